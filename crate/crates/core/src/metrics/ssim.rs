use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    /// Odd window edge in voxels.
    pub window: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 7,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(
                "ssim: window must be odd and at least 3".into(),
            ));
        }
        if !(self.data_range > 0.0) || !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config(
                "ssim: data_range and gaussian_sigma must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian taps; the 3D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Valid-mode correlation with `taps` along `axis` of a row-major 3D array.
fn filter_axis(src: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - taps.len();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let step = strides[axis];
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let base = z * strides[0] + y * strides[1] + x;
                out.push(
                    taps.iter()
                        .enumerate()
                        .map(|(k, t)| t * src[base + k * step])
                        .sum(),
                );
            }
        }
    }
    (out, out_dims)
}

fn gaussian_filter(src: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(src, dims, 2, taps);
    let (b, d) = filter_axis(&a, d, 1, taps);
    filter_axis(&b, d, 0, taps).0
}

/// Mean local SSIM over every window position that lies fully inside a
/// row-major `(D, H, W)` array pair.
pub fn ssim_arrays(a: &[f32], b: &[f32], dims: [usize; 3], cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "ssim inputs do not match dims {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d < cfg.window) {
        return Err(Error::Shape(format!(
            "ssim window {} does not fit volume {dims:?}",
            cfg.window
        )));
    }
    let taps = cfg.taps();
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod =
        |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = gaussian_filter(&a, dims, &taps);
    let mu_b = gaussian_filter(&b, dims, &taps);
    let aa = gaussian_filter(&prod(|x, _| x * x), dims, &taps);
    let bb = gaussian_filter(&prod(|_, y| y * y), dims, &taps);
    let ab = gaussian_filter(&prod(|x, y| x * y), dims, &taps);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two co-registered volumes.
pub fn ssim(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<f64> {
    if let Some(diff) = a.geometry_difference(b) {
        return Err(Error::GeometryMismatch(diff));
    }
    let [nx, ny, nz] = a.dims();
    ssim_arrays(a.data(), b.data(), [nz, ny, nx], cfg)
}
