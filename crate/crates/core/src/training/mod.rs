//! Patch-based MSE training, one network per missing modality.

mod adam;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};

use crate::autodiff::{mse_loss, Tape, Var};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{build_model, forward_graph, ModelConfig, ParamSet, ParameterStore};
use crate::preprocess::{standardize, StatsMode};
use crate::tensor::Tensor;
use crate::volume::{Modality, Study, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub target_modality: Modality,
    /// Cubic patch edge in voxels.
    pub patch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// `None` means one step per training study.
    pub steps_per_epoch: Option<usize>,
    pub stats_mode: StatsMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_modality: Modality::T1ce,
            patch: 128,
            batch_size: 1,
            epochs: 100,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            steps_per_epoch: None,
            stats_mode: StatsMode::AllVoxels,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Modality::inputs_for(self.target_modality)?;
        let bad = |what: &str| Err(Error::Config(format!("training: {what}")));
        if self.patch == 0 {
            return bad("patch must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a non-negative number");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            betas: self.betas,
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, studies: usize) -> usize {
        self.steps_per_epoch.unwrap_or(studies)
    }
}

/// Network inputs `(3, p, p, p)` and supervision `(1, p, p, p)`, both
/// row-major `(z, y, x)` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub inputs: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Standardizes every imaging volume of `study` by its own statistics.
pub fn standardize_study(study: &Study, mode: StatsMode) -> Result<Study> {
    let mut out = Study::new(study.subject_id.clone());
    out.mask = study.mask.clone();
    for (&m, v) in &study.modalities {
        let (z, _) = standardize(v, mode).map_err(|e| match e {
            Error::DegenerateVolume { sigma } => Error::InvalidStudy {
                subject: study.subject_id.clone(),
                reason: format!("{} is constant (sigma {sigma:e})", m.name()),
            },
            other => other,
        })?;
        out.modalities.insert(m, z);
    }
    Ok(out)
}

/// Copies the `p`-cube at `corner` (volume order x, y, z) from `v` into
/// `dst`, zero-filling outside the volume.
fn cut_block(v: &Volume, corner: [usize; 3], p: usize, dst: &mut [f32]) {
    let [nx, ny, nz] = v.dims();
    let data = v.data();
    for z in 0..p {
        for y in 0..p {
            let row = &mut dst[(z * p + y) * p..(z * p + y + 1) * p];
            let (sz, sy) = (corner[2] + z, corner[1] + y);
            if sz >= nz || sy >= ny {
                row.fill(0.0);
                continue;
            }
            let base = (sz * ny + sy) * nx;
            for (x, out) in row.iter_mut().enumerate() {
                let sx = corner[0] + x;
                *out = if sx < nx { data[base + sx] } else { 0.0 };
            }
        }
    }
}

/// Draws a uniformly placed `p`-cube from a complete study. Axes shorter
/// than `p` are zero-padded at the high end, leaving corner 0 as the only
/// choice there. Returns the sample and the corner in volume order.
pub fn sample_patch(
    study: &Study,
    target: Modality,
    p: usize,
    rng: &mut impl Rng,
) -> Result<(TrainSample, [usize; 3])> {
    if !study.is_complete() {
        return Err(Error::InvalidStudy {
            subject: study.subject_id.clone(),
            reason: format!(
                "training needs all four modalities, missing {:?}",
                study.missing().iter().map(|m| m.name()).collect::<Vec<_>>()
            ),
        });
    }
    if p == 0 {
        return Err(Error::Config("patch must be positive".into()));
    }
    let inputs = Modality::inputs_for(target)?;
    let dims = study.get(target)?.dims();
    let corner = dims.map(|d| rng.gen_range(0..=d.max(p) - p));
    let block = p * p * p;
    let mut x = vec![0.0f32; 3 * block];
    for (c, m) in inputs.iter().enumerate() {
        cut_block(
            study.get(*m)?,
            corner,
            p,
            &mut x[c * block..(c + 1) * block],
        );
    }
    let mut y = vec![0.0f32; block];
    cut_block(study.get(target)?, corner, p, &mut y);
    Ok((
        TrainSample {
            inputs: Tensor::new(vec![3, p, p, p], x)?,
            target: Tensor::new(vec![1, p, p, p], y)?,
        },
        corner,
    ))
}

/// Stacks samples into `(B, 3, p, p, p)` and `(B, 1, p, p, p)` batches.
pub fn collate(samples: &[TrainSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let xs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.inputs).collect();
    let ys: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.target).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients(
    params: &ParameterStore,
    inputs: &Tensor<f32>,
    target: &Tensor<f32>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let tape = Tape::new();
    let set = ParamSet::leaves(&tape, params.iter());
    let prediction = forward_graph(params.config(), &set, &Var::constant(inputs.clone()))?;
    let loss = mse_loss(&Var::constant(target.clone()), &prediction)?;
    let value = loss.value().data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(&loss);
    let out = set
        .iter()
        .map(|(name, var)| (name.clone(), grads.get(var)))
        .collect();
    Ok((value, out))
}

/// One Adam update against the MSE of a batch. Returns the loss measured
/// before the update.
pub fn train_step(
    params: &mut ParameterStore,
    state: &mut AdamState,
    inputs: &Tensor<f32>,
    target: &Tensor<f32>,
    cfg: &AdamConfig,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(params, inputs, target)?;
    state.update(params, &grads, cfg)?;
    Ok(loss)
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training loop state. Every random choice is keyed on `(seed, step)`, so a
/// trainer restored from a checkpoint continues exactly like one that never
/// stopped.
pub struct Trainer {
    cfg: TrainConfig,
    params: ParameterStore,
    state: AdamState,
    studies: Vec<Study>,
    losses: Vec<(u64, f64)>,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: TrainConfig, studies: &[Study]) -> Result<Self> {
        let mut params = build_model(model, cfg.seed)?;
        params.set_scenario(Some(cfg.target_modality));
        Self::with_state(params, AdamState::default(), cfg, studies)
    }

    pub fn with_state(
        params: ParameterStore,
        state: AdamState,
        cfg: TrainConfig,
        studies: &[Study],
    ) -> Result<Self> {
        cfg.validate()?;
        if params.scenario() != Some(cfg.target_modality) {
            return Err(Error::ScenarioMismatch(format!(
                "network synthesizes {:?}, training targets {}",
                params.scenario().map(Modality::name),
                cfg.target_modality.name()
            )));
        }
        if studies.is_empty() {
            return Err(Error::Empty("no training studies".into()));
        }
        let studies = studies
            .iter()
            .map(|s| {
                if !s.is_complete() {
                    return Err(Error::InvalidStudy {
                        subject: s.subject_id.clone(),
                        reason: "training needs all four modalities".into(),
                    });
                }
                standardize_study(s, cfg.stats_mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            cfg,
            params,
            state,
            studies,
            losses: Vec::new(),
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, studies: &[Study]) -> Result<Self> {
        let step = ckpt
            .metadata
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("checkpoint has no training step".into()))?;
        let state = AdamState::from_tensors(step, &ckpt.state)?;
        Self::with_state(ckpt.params, state, cfg, studies)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    pub fn global_step(&self) -> u64 {
        self.state.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.studies.len())
    }

    /// Losses recorded by this trainer as `(step, loss)`, steps counted from 1.
    pub fn losses(&self) -> &[(u64, f64)] {
        &self.losses
    }

    /// Study visiting order for an epoch: a seeded shuffle.
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.studies.len()).collect();
        order.shuffle(&mut step_rng(self.cfg.seed, (1 << 63) | epoch));
        order
    }

    /// The batch for global step `step` (0-based).
    pub fn batch_for_step(&self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let per_epoch = self.steps_per_epoch() as u64;
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        let order = self.epoch_order(epoch);
        let mut rng = step_rng(self.cfg.seed, step);
        let b = self.cfg.batch_size;
        let samples = (0..b)
            .map(|i| {
                let study = &self.studies[order[(within as usize * b + i) % order.len()]];
                Ok(sample_patch(study, self.cfg.target_modality, self.cfg.patch, &mut rng)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        collate(&samples)
    }

    pub fn step(&mut self) -> Result<f64> {
        let (x, y) = self.batch_for_step(self.state.step)?;
        let loss = train_step(&mut self.params, &mut self.state, &x, &y, &self.cfg.adam())?;
        self.losses.push((self.state.step, loss));
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.state = self.state.to_tensors();
        ckpt.metadata.insert("step".into(), self.state.step.into());
        ckpt.metadata.insert(
            "epoch".into(),
            (self.state.step / self.steps_per_epoch() as u64).into(),
        );
        ckpt.metadata.insert(
            "train_config".into(),
            serde_json::to_value(&self.cfg).expect("config serializes"),
        );
        ckpt
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParameterStore,
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

pub const LOSS_FILE: &str = "loss.tsv";

pub fn write_loss_curve(path: &Path, losses: &[(u64, f64)]) -> Result<()> {
    let mut text = String::from("step\tloss\n");
    for (step, loss) in losses {
        writeln!(text, "{step}\t{loss:.9e}").expect("write to string");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh network for `cfg.epochs` epochs. With `out_dir`, a
/// checkpoint is written after each epoch and the loss curve after the last.
pub fn fit(
    studies: &[Study],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    let mut trainer = Trainer::new(model, cfg.clone(), studies)?;
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 1..=cfg.epochs {
        for _ in 0..trainer.steps_per_epoch() {
            trainer.step()?;
        }
        if let Some(dir) = out_dir {
            let path = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(&trainer.checkpoint(), &path)?;
            write_loss_curve(&dir.join(LOSS_FILE), trainer.losses())?;
            checkpoints.push(path);
        }
    }
    let losses = trainer.losses().to_vec();
    Ok(FitResult {
        params: trainer.into_params(),
        losses,
        checkpoints,
    })
}

/// Trains the four scenario networks, one per missing modality, each in
/// `out_root/<tag>` when an output root is given.
pub fn train_all_scenarios(
    studies: &[Study],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_root: Option<&Path>,
) -> Result<Vec<(Modality, FitResult)>> {
    Modality::IMAGING
        .into_iter()
        .map(|target| {
            let scenario = TrainConfig {
                target_modality: target,
                ..cfg.clone()
            };
            let dir = out_root.map(|r| r.join(target.tag()));
            Ok((target, fit(studies, model, &scenario, dir.as_deref())?))
        })
        .collect()
}

/// Latest `epoch_XXX.ckpt` in a scenario directory.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("epoch_")?
                .strip_suffix(".ckpt")?
                .parse()
                .ok()
        });
        if let Some(epoch) = epoch {
            if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                best = Some((epoch, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Empty(format!("no epoch checkpoints in {}", dir.display())))
}

/// Loads a checkpoint and rebuilds its trainer.
pub fn resume_from(path: &Path, cfg: TrainConfig, studies: &[Study]) -> Result<Trainer> {
    Trainer::resume(load_checkpoint(path)?, cfg, studies)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_size: 8,
            depths: vec![1, 1],
            num_heads: vec![2, 4],
            window: 2,
            ..ModelConfig::default()
        }
    }

    fn study(subject: &str, dims: [usize; 3], seed: u64) -> Study {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Modality::IMAGING.iter().fold(Study::new(subject), |s, &m| {
            let data = (0..n).map(|_| rng.gen_range(0.0f32..100.0)).collect();
            s.with(Volume::from_data(dims, data, m).unwrap())
        })
    }

    fn quick(target: Modality) -> TrainConfig {
        TrainConfig {
            target_modality: target,
            patch: 8,
            epochs: 2,
            steps_per_epoch: Some(2),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn corner_ranges_follow_volume_extent() {
        let s = study("a", [12, 9, 8], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen_max = [0usize; 3];
        for _ in 0..400 {
            let (sample, corner) = sample_patch(&s, Modality::T1ce, 8, &mut rng).unwrap();
            assert_eq!(sample.inputs.shape(), [3, 8, 8, 8]);
            assert!(corner[0] <= 4 && corner[1] <= 1 && corner[2] == 0);
            for a in 0..3 {
                seen_max[a] = seen_max[a].max(corner[a]);
            }
        }
        assert_eq!(seen_max, [4, 1, 0]);

        // Exact-fit volume yields itself; channel 0 is FLAIR for a T1CE target.
        let s = study("b", [8, 8, 8], 2);
        let (sample, corner) = sample_patch(&s, Modality::T1ce, 8, &mut rng).unwrap();
        assert_eq!(corner, [0, 0, 0]);
        assert_eq!(
            &sample.inputs.data()[..512],
            s.get(Modality::Flair).unwrap().data()
        );
        assert_eq!(sample.target.data(), s.get(Modality::T1ce).unwrap().data());

        // Short axes are zero-padded.
        let s = study("c", [4, 8, 8], 3);
        let (sample, _) = sample_patch(&s, Modality::T1w, 8, &mut rng).unwrap();
        assert_eq!(sample.target.data()[5], 0.0);
        assert_eq!(
            sample.target.data()[3],
            s.get(Modality::T1w).unwrap().data()[3]
        );
    }

    #[test]
    fn full_size_corner_bounds() {
        let dims = [240usize, 240, 155];
        assert_eq!(dims.map(|d| d.max(128) - 128), [112, 112, 27]);
    }

    #[test]
    fn incomplete_study_and_bad_config_are_rejected() {
        let mut s = study("a", [8, 8, 8], 1);
        s.modalities.remove(&Modality::T2w);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&s, Modality::T1ce, 8, &mut rng).is_err());
        let cfg = TrainConfig {
            target_modality: Modality::Seg,
            ..quick(Modality::T1ce)
        };
        assert!(fit(&[study("a", [8, 8, 8], 1)], &tiny(), &cfg, None).is_err());
        assert!(matches!(
            fit(&[], &tiny(), &quick(Modality::T1ce), None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn fit_bookkeeping_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let studies = [study("a", [10, 8, 8], 1)];
        let cfg = quick(Modality::T2w);
        let a = fit(&studies, &tiny(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(a.losses.len(), 4);
        assert_eq!(a.checkpoints.len(), 2);
        assert!(dir.path().join("epoch_002.ckpt").is_file());
        let curve = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        assert_eq!(curve.lines().count(), 5);
        assert_eq!(
            latest_checkpoint(dir.path()).unwrap(),
            dir.path().join("epoch_002.ckpt")
        );
        let b = fit(&studies, &tiny(), &cfg, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params.scenario(), Some(Modality::T2w));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(Modality::Flair)
        };
        let out = fit(&[study("a", [8, 8, 8], 1)], &tiny(), &cfg, None).unwrap();
        let mut fresh = build_model(&tiny(), cfg.seed).unwrap();
        fresh.set_scenario(Some(Modality::Flair));
        assert!(out.params.bit_identical(&fresh));
    }

    #[test]
    fn nan_target_aborts() {
        let params = build_model(&tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8, 8]);
        let mut y = Tensor::zeros(&[1, 1, 8, 8, 8]);
        y.data_mut()[7] = f32::NAN;
        assert!(matches!(
            loss_and_gradients(&params, &x, &y),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let studies = [study("a", [8, 8, 8], 1), study("b", [9, 8, 8], 2)];
        let cfg = quick(Modality::T1ce);
        let mut straight = Trainer::new(&tiny(), cfg.clone(), &studies).unwrap();
        for _ in 0..3 {
            straight.step().unwrap();
        }
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&straight.checkpoint(), &path).unwrap();
        let next = straight.step().unwrap();
        let mut resumed = resume_from(&path, cfg, &studies).unwrap();
        assert_eq!(resumed.global_step(), 3);
        assert_eq!(resumed.step().unwrap(), next);
        assert!(resumed.params().bit_identical(straight.params()));
    }
}
