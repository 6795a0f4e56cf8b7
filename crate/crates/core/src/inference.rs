//! Whole-volume synthesis by overlapping sliding windows with Gaussian
//! weighted fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ParameterStore};
use crate::tensor::Tensor;
use crate::volume::{Modality, Study, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    /// Cubic window edge in voxels.
    pub patch: usize,
    /// Fraction of a window shared with its neighbour, in `[0, 1)`.
    pub overlap: f64,
    /// Gaussian standard deviation as a fraction of `patch`.
    pub sigma_scale: f64,
    pub weight_floor: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch: 128,
            overlap: 0.5,
            sigma_scale: 0.125,
            weight_floor: 1e-8,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("tiling: patch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("tiling: overlap must lie in [0, 1)".into()));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::Config("tiling: sigma_scale must be positive".into()));
        }
        if !(self.weight_floor > 0.0) {
            return Err(Error::Config(
                "tiling: weight_floor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.patch as f64 * (1.0 - self.overlap)).floor() as usize).max(1)
    }
}

/// Separable Gaussian over a `patch`-cube, centred at `(patch - 1) / 2` on
/// every axis, peak 1, floored at `floor`. Row-major `(z, y, x)`.
pub fn gaussian_weight_map(patch: usize, sigma_scale: f64, floor: f64) -> Tensor<f64> {
    let sigma = sigma_scale * patch as f64;
    let center = (patch as f64 - 1.0) / 2.0;
    let axis: Vec<f64> = (0..patch)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let peak = axis.iter().copied().fold(0.0, f64::max).powi(3);
    Tensor::from_fn(&[patch, patch, patch], |idx| {
        let (z, y, x) = (idx / (patch * patch), (idx / patch) % patch, idx % patch);
        (axis[z] * axis[y] * axis[x] / peak).max(floor)
    })
}

/// Window start positions along one axis of (padded) length `len`: a regular
/// grid with the last window flush with the end.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let last = len - patch;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    starts
}

/// Corners `(z, y, x)` of every window over a `(D, H, W)` volume, padded
/// to at least one window per axis.
pub fn window_corners(dims: [usize; 3], cfg: &TilingConfig) -> Vec<[usize; 3]> {
    let stride = cfg.stride();
    let starts = dims.map(|d| window_starts(d.max(cfg.patch), cfg.patch, stride));
    let mut out = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Total fusion weight received by each voxel of a `(D, H, W)` volume.
pub fn fusion_weight_sum(dims: [usize; 3], cfg: &TilingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let p = cfg.patch;
    let weights = gaussian_weight_map(p, cfg.sigma_scale, cfg.weight_floor);
    let mut den = vec![0.0f64; dims.iter().product()];
    for [z0, y0, x0] in window_corners(dims, cfg) {
        for (i, &w) in weights.data().iter().enumerate() {
            let (z, y, x) = (z0 + i / (p * p), y0 + (i / p) % p, x0 + i % p);
            if z < dims[0] && y < dims[1] && x < dims[2] {
                den[(z * dims[1] + y) * dims[2] + x] += w;
            }
        }
    }
    Ok(den)
}

/// A network mapping `(N, 3, p, p, p)` to `(N, 1, p, p, p)`.
pub trait PatchPredictor {
    fn predict(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for ParameterStore {
    fn predict(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        forward(self, inputs)
    }
}

impl<F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>> PatchPredictor for F {
    fn predict(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(inputs)
    }
}

/// Fuses per-window predictions over a `(C, D, H, W)` input. Volumes smaller
/// than the window are zero-padded at the high end and the result cropped.
pub fn sliding_window(
    model: &dyn PatchPredictor,
    input: &Tensor<f32>,
    cfg: &TilingConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let shape = input.shape();
    if shape.len() != 4 || shape.iter().any(|&s| s == 0) {
        return Err(Error::Shape(format!(
            "expected non-empty (C, D, H, W), got {shape:?}"
        )));
    }
    let c = shape[0];
    let dims = [shape[1], shape[2], shape[3]];
    let p = cfg.patch;
    let padded = dims.map(|d| d.max(p));
    let weights = gaussian_weight_map(p, cfg.sigma_scale, cfg.weight_floor);
    let [pd, ph, pw] = padded;
    let mut num = vec![0.0f64; pd * ph * pw];
    let mut den = vec![0.0f64; pd * ph * pw];
    let block = p * p * p;
    let src = input.data();
    let mut window = vec![0.0f32; c * block];
    for [z0, y0, x0] in window_corners(dims, cfg) {
        for ch in 0..c {
            for z in 0..p {
                for y in 0..p {
                    let row = &mut window[((ch * p + z) * p + y) * p..][..p];
                    let (sz, sy) = (z0 + z, y0 + y);
                    if sz >= dims[0] || sy >= dims[1] {
                        row.fill(0.0);
                        continue;
                    }
                    let base = ((ch * dims[0] + sz) * dims[1] + sy) * dims[2];
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = x0 + x;
                        *v = if sx < dims[2] { src[base + sx] } else { 0.0 };
                    }
                }
            }
        }
        let batch = Tensor::new(vec![1, c, p, p, p], window.clone())?;
        let out = model.predict(&batch)?;
        if out.shape() != [1, 1, p, p, p] {
            return Err(Error::Shape(format!(
                "window prediction has shape {:?}, expected [1, 1, {p}, {p}, {p}]",
                out.shape()
            )));
        }
        for (i, (&o, &w)) in out.data().iter().zip(weights.data()).enumerate() {
            let (z, y, x) = (i / (p * p), (i / p) % p, i % p);
            let dst = ((z0 + z) * ph + y0 + y) * pw + x0 + x;
            num[dst] += w * o as f64;
            den[dst] += w;
        }
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * ph + y) * pw + x;
                debug_assert!(den[i] > 0.0);
                out.push((num[i] / den[i]) as f32);
            }
        }
    }
    let out = Tensor::new(vec![1, dims[0], dims[1], dims[2]], out)?;
    if !out.all_finite() {
        return Err(Error::NonFinite(
            "fused prediction contains non-finite voxels".into(),
        ));
    }
    Ok(out)
}

/// Stacks the input modalities for synthesizing `target` as `(3, D, H, W)`.
pub fn stack_inputs(study: &Study, target: Modality) -> Result<Tensor<f32>> {
    let order = Modality::inputs_for(target)?;
    let vols: Vec<Tensor<f32>> = order
        .iter()
        .map(|&m| study.get(m).map(Volume::to_tensor))
        .collect::<Result<_>>()?;
    Tensor::stack(&vols.iter().collect::<Vec<_>>())
}

/// Synthesizes the single missing modality of a standardized study. The
/// result keeps the study's geometry and stays in standardized units.
pub fn sliding_window_synthesize(
    params: &ParameterStore,
    study: &Study,
    cfg: &TilingConfig,
) -> Result<Volume> {
    let missing = study.missing();
    let [target] = missing.as_slice() else {
        return Err(Error::InvalidStudy {
            subject: study.subject_id.clone(),
            reason: format!(
                "synthesis needs exactly three modalities, found {}",
                study.modalities.len()
            ),
        });
    };
    match params.scenario() {
        Some(s) if s == *target => {}
        other => {
            return Err(Error::ScenarioMismatch(format!(
                "network synthesizes {}, subject {} is missing {}",
                other.map_or("an unspecified modality", Modality::name),
                study.subject_id,
                target.name()
            )))
        }
    }
    synthesize_with(params, study, *target, cfg)
}

/// Synthesizes `target` from a study with any predictor.
pub fn synthesize_with(
    model: &dyn PatchPredictor,
    study: &Study,
    target: Modality,
    cfg: &TilingConfig,
) -> Result<Volume> {
    let input = stack_inputs(study, target)?;
    let fused = sliding_window(model, &input, cfg)?;
    let reference = study.get(Modality::inputs_for(target)?[0])?;
    let [nz, ny, nx] = [fused.shape()[1], fused.shape()[2], fused.shape()[3]];
    reference.from_tensor_like(&fused.reshape(&[nz, ny, nx])?, target)
}
