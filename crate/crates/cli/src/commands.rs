use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use swinsyn::inference::{sliding_window_synthesize, TilingConfig};
use swinsyn::metrics::{self, aggregate, MetricRecord, MetricReport, Region};
use swinsyn::model::checkpoint::{checkpoint_digest, load_checkpoint};
use swinsyn::preprocess::minmax_rescale;
use swinsyn::training::{fit, latest_checkpoint, standardize_study};
use swinsyn::volume::{
    dropped_modality, list_subjects, load_study_with, load_volume_as, save_volume, study_file_name,
    Modality, Study,
};
use swinsyn::Error;

use crate::config::RunConfig;
use crate::montage::write_montage;

pub const MANIFEST_HEADER: &str = "subject\tdropped_modality";
pub const MANIFEST_FILE: &str = "dropout_manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject: String,
    pub dropped: Modality,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        writeln!(out, "{}\t{}", e.subject, e.dropped.name()).unwrap();
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
        bail!(Error::Config(format!(
            "{} does not start with the header {MANIFEST_HEADER:?}",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (subject, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("malformed manifest line {line:?}")))?;
            Ok(ManifestEntry {
                subject: subject.to_string(),
                dropped: tag.trim().parse()?,
            })
        })
        .collect()
}

fn subject_dir(cfg: &RunConfig, subject: &str) -> PathBuf {
    cfg.data.root.join(subject)
}

fn load_subject(cfg: &RunConfig, subject: &str) -> Result<Study> {
    Ok(load_study_with(
        &subject_dir(cfg, subject),
        subject,
        &cfg.data.pattern,
    )?)
}

fn require_complete(study: &Study) -> Result<()> {
    if !study.is_complete() {
        bail!(Error::InvalidStudy {
            subject: study.subject_id.clone(),
            reason: format!(
                "missing {}",
                study
                    .missing()
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }
    Ok(())
}

fn load_all_complete(cfg: &RunConfig) -> Result<Vec<Study>> {
    let subjects = list_subjects(&cfg.data.root)?;
    if subjects.is_empty() {
        bail!(Error::Empty(format!(
            "no subject directories under {}",
            cfg.data.root.display()
        )));
    }
    subjects
        .iter()
        .map(|(id, _)| {
            let study = load_subject(cfg, id)?;
            require_complete(&study)?;
            Ok(study)
        })
        .collect()
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<R>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn train(cfg: &RunConfig, targets: &[Modality], out: &Path) -> Result<Vec<PathBuf>> {
    let studies = load_all_complete(cfg)?;
    cfg.write_resolved(out)?;
    let mut dirs = Vec::new();
    for &target in targets {
        let train = swinsyn::training::TrainConfig {
            target_modality: target,
            ..cfg.train.clone()
        };
        let dir = out.join(target.tag());
        let result = fit(&studies, &cfg.model, &train, Some(&dir))?;
        eprintln!(
            "{}: {} steps, final loss {:.6}",
            target.name(),
            result.losses.len(),
            result.losses.last().map_or(f64::NAN, |l| l.1)
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn dropout(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let subjects = list_subjects(&cfg.data.root)?;
    if subjects.is_empty() {
        bail!(Error::Empty(format!(
            "no subject directories under {}",
            cfg.data.root.display()
        )));
    }
    let mut entries = Vec::new();
    for (subject, dir) in &subjects {
        for m in Modality::IMAGING {
            let file = dir.join(study_file_name(&cfg.data.pattern, subject, m));
            if !file.is_file() {
                bail!(Error::InvalidStudy {
                    subject: subject.clone(),
                    reason: format!("{} not found at {}", m.name(), file.display()),
                });
            }
        }
        entries.push(ManifestEntry {
            subject: subject.clone(),
            dropped: dropped_modality(subject, cfg.seed),
        });
    }
    cfg.write_resolved(out)?;
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, format_manifest(&entries))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Where synthesis takes its networks from.
pub enum ModelSource {
    /// One checkpoint for every subject.
    Checkpoint(PathBuf),
    /// A training output root with one `<tag>/epoch_XXX.ckpt` series per target.
    Directory(PathBuf),
}

#[derive(Serialize)]
struct Provenance<'a> {
    subject: &'a str,
    synthesized: &'a str,
    checkpoint: String,
    checkpoint_sha256: String,
    tiling: &'a TilingConfig,
    stats_mode: swinsyn::preprocess::StatsMode,
}

pub fn synthesized_path(out: &Path, subject: &str, target: Modality) -> PathBuf {
    out.join(subject)
        .join(format!("{subject}_{}.nii.gz", target.tag()))
}

pub fn synthesize(
    cfg: &RunConfig,
    source: &ModelSource,
    manifest: &[ManifestEntry],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.write_resolved(out)?;
    let mut cache: BTreeMap<Modality, PathBuf> = BTreeMap::new();
    for entry in manifest {
        let path = match source {
            ModelSource::Checkpoint(p) => p.clone(),
            ModelSource::Directory(d) => latest_checkpoint(&d.join(entry.dropped.tag()))?,
        };
        cache.entry(entry.dropped).or_insert(path);
    }
    let mut models = BTreeMap::new();
    for (target, path) in &cache {
        let ckpt = load_checkpoint(path)?;
        models.insert(
            *target,
            (path.clone(), checkpoint_digest(path)?, ckpt.params),
        );
    }
    parallel_map(manifest, cfg.workers, |entry| {
        let (ckpt_path, digest, params) = &models[&entry.dropped];
        let mut study = load_subject(cfg, &entry.subject)?;
        study.modalities.remove(&entry.dropped);
        let standardized = standardize_study(&study, cfg.train.stats_mode)?;
        let volume = sliding_window_synthesize(params, &standardized, &cfg.tiling)?;
        let path = synthesized_path(out, &entry.subject, entry.dropped);
        std::fs::create_dir_all(path.parent().unwrap())?;
        save_volume(&volume, &path)?;
        let provenance = Provenance {
            subject: &entry.subject,
            synthesized: entry.dropped.name(),
            checkpoint: ckpt_path.display().to_string(),
            checkpoint_sha256: digest.clone(),
            tiling: &cfg.tiling,
            stats_mode: cfg.train.stats_mode,
        };
        let prov_path = path.with_file_name(format!("{}_provenance.json", entry.subject));
        std::fs::write(&prov_path, serde_json::to_string_pretty(&provenance)?)
            .with_context(|| format!("writing {}", prov_path.display()))?;
        Ok(path)
    })
}

pub struct EvaluateInputs<'a> {
    pub manifest: &'a [ManifestEntry],
    /// Output directory of `synthesize`.
    pub synth_dir: &'a Path,
    /// Optional `<subject>/<subject>_seg.nii.gz` masks segmented from the
    /// synthesized inputs; references come from the data root.
    pub mask_dir: Option<&'a Path>,
    pub montage: bool,
}

fn case_records(
    cfg: &RunConfig,
    inputs: &EvaluateInputs,
    entry: &ManifestEntry,
    out: &Path,
) -> Result<Vec<MetricRecord>> {
    let subject = &entry.subject;
    let real_path =
        subject_dir(cfg, subject).join(study_file_name(&cfg.data.pattern, subject, entry.dropped));
    let real = load_volume_as(&real_path, entry.dropped)?;
    let synth_path = synthesized_path(inputs.synth_dir, subject, entry.dropped);
    let synth = load_volume_as(&synth_path, entry.dropped)?;
    let (r, s) = minmax_rescale(&real, &synth)?;
    let mut records = vec![MetricRecord {
        subject: subject.clone(),
        missing: Some(entry.dropped),
        metric: "SSIM".into(),
        value: Some(metrics::ssim(&s, &r, &cfg.ssim)?),
    }];
    if let Some(mask_dir) = inputs.mask_dir {
        let pred_path = mask_dir.join(subject).join(format!("{subject}_seg.nii.gz"));
        let pred = load_volume_as(&pred_path, Modality::Seg)?;
        let ref_path = subject_dir(cfg, subject).join(study_file_name(
            &cfg.data.pattern,
            subject,
            Modality::Seg,
        ));
        let reference = load_volume_as(&ref_path, Modality::Seg)?;
        for region in Region::ALL {
            let record = |metric: &str, value| MetricRecord {
                subject: subject.clone(),
                missing: Some(entry.dropped),
                metric: format!("{metric}_{region}"),
                value,
            };
            let empty = cfg.evaluation.empty_dice;
            records.push(record(
                "Dice",
                metrics::dice_with(&pred, &reference, region, empty)?,
            ));
            records.push(record("HD95", metrics::hd95(&pred, &reference, region)?));
        }
    }
    if inputs.montage {
        write_montage(
            &[&real, &synth],
            &out.join("montage").join(format!("{subject}.png")),
        )?;
    }
    Ok(records)
}

pub fn evaluate(cfg: &RunConfig, inputs: &EvaluateInputs, out: &Path) -> Result<MetricReport> {
    if inputs.manifest.is_empty() {
        bail!(Error::Empty("manifest lists no subjects".into()));
    }
    cfg.write_resolved(out)?;
    let per_case = parallel_map(inputs.manifest, cfg.workers, |e| {
        case_records(cfg, inputs, e, out)
    })?;
    let report = aggregate(per_case.into_iter().flatten().collect())?;
    report.write(out)?;
    Ok(report)
}
