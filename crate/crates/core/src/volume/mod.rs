//! Volumes, multi-modal studies, NIfTI persistence and modality dropout.

mod nifti;
mod phantom;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use phantom::phantom_study;

/// Geometry comparisons (spacing, affine) tolerate this absolute difference.
pub const GEOMETRY_TOLERANCE: f64 = 1e-5;

/// Default file naming inside a subject directory.
pub const DEFAULT_PATTERN: &str = "{subject}_{modality}.nii.gz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    T1w,
    T2w,
    Flair,
    T1ce,
    Seg,
}

impl Modality {
    /// The four imaging contrasts (everything except the label map).
    pub const IMAGING: [Modality; 4] = [
        Modality::T1w,
        Modality::T2w,
        Modality::Flair,
        Modality::T1ce,
    ];

    /// File-name tag, e.g. `t1ce`.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1w => "t1",
            Modality::T2w => "t2",
            Modality::Flair => "flair",
            Modality::T1ce => "t1ce",
            Modality::Seg => "seg",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
            Modality::Flair => "FLAIR",
            Modality::T1ce => "T1CE",
            Modality::Seg => "SEG",
        }
    }

    pub fn is_imaging(self) -> bool {
        self != Modality::Seg
    }

    /// Network input channels when `target` is synthesized: the other three
    /// imaging modalities sorted by file tag (flair, t1, t1ce, t2).
    pub fn inputs_for(target: Modality) -> Result<[Modality; 3]> {
        if !target.is_imaging() {
            return Err(Error::Config(format!(
                "{} cannot be a synthesis target",
                target.name()
            )));
        }
        let mut rest: Vec<Modality> = Self::IMAGING.into_iter().filter(|&m| m != target).collect();
        rest.sort_by_key(|m| m.tag());
        Ok([rest[0], rest[1], rest[2]])
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "t1" | "t1w" => Modality::T1w,
            "t2" | "t2w" => Modality::T2w,
            "flair" => Modality::Flair,
            "t1ce" | "t1c" | "t1gd" => Modality::T1ce,
            "seg" | "mask" => Modality::Seg,
            _ => return Err(Error::UnknownModality(s.to_string())),
        })
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One 3D scalar image. Voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`
/// (x fastest, as on disk), so the buffer reads as a row-major
/// `(nz, ny, nx)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
    modality: Modality,
    data: Vec<f32>,
}

pub fn identity_affine() -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        data: Vec<f32>,
        spacing: [f64; 3],
        affine: [[f64; 4]; 4],
        modality: Modality,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} must all be >= 1"
            )));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!(
                "voxel spacing {spacing:?} must be positive"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            affine,
            modality,
            data,
        })
    }

    /// Unit spacing, identity affine.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>, modality: Modality) -> Result<Self> {
        Self::new(dims, data, [1.0; 3], identity_affine(), modality)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &[[f64; 4]; 4] {
        &self.affine
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Same geometry and modality, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, data, self.spacing, self.affine, self.modality)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    /// Row-major `(nz, ny, nx)` view of the voxels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [nx, ny, nz] = self.dims;
        Tensor::new(vec![nz, ny, nx], self.data.clone()).expect("volume dims")
    }

    /// Inverse of [`Volume::to_tensor`], copying this volume's geometry.
    pub fn from_tensor_like(&self, t: &Tensor<f32>, modality: Modality) -> Result<Self> {
        let [nx, ny, nz] = self.dims;
        if t.shape() != [nz, ny, nx] {
            return Err(Error::GeometryMismatch(format!(
                "tensor {:?} does not match volume dims {:?}",
                t.shape(),
                self.dims
            )));
        }
        Self::new(
            self.dims,
            t.data().to_vec(),
            self.spacing,
            self.affine,
            modality,
        )
    }

    /// Describes the first geometry difference from `other`, if any.
    pub fn geometry_difference(&self, other: &Volume) -> Option<String> {
        if self.dims != other.dims {
            return Some(format!("shape {:?} vs {:?}", self.dims, other.dims));
        }
        if self
            .spacing
            .iter()
            .zip(&other.spacing)
            .any(|(a, b)| (a - b).abs() > GEOMETRY_TOLERANCE)
        {
            return Some(format!("spacing {:?} vs {:?}", self.spacing, other.spacing));
        }
        let affine_differs = self
            .affine
            .iter()
            .flatten()
            .zip(other.affine.iter().flatten())
            .any(|(a, b)| (a - b).abs() > GEOMETRY_TOLERANCE);
        affine_differs.then(|| "affine differs".to_string())
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.geometry_difference(other).is_none()
    }
}

/// Reads a NIfTI-1 volume (`.nii` or `.nii.gz`), tagging it with `modality`.
pub fn load_volume_as(path: &Path, modality: Modality) -> Result<Volume> {
    let img = nifti::read(path)?;
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteVoxels {
            path: path.to_path_buf(),
        });
    }
    Volume::new(img.dims, img.data, img.spacing, img.affine, modality)
}

/// Reads a NIfTI-1 volume, inferring the modality from a trailing
/// `_<tag>.nii[.gz]` in the file name (T1w when absent).
pub fn load_volume(path: &Path) -> Result<Volume> {
    let modality = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii"))
        .and_then(|stem| stem.rsplit('_').next())
        .and_then(|tag| tag.parse().ok())
        .unwrap_or(Modality::T1w);
    load_volume_as(path, modality)
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    nifti::write(
        path,
        &nifti::NiftiImage {
            dims: volume.dims,
            spacing: volume.spacing,
            affine: volume.affine,
            data: volume.data.clone(),
        },
    )
}

/// A subject's co-registered modalities plus an optional label mask.
#[derive(Clone, Debug)]
pub struct Study {
    pub subject_id: String,
    pub modalities: BTreeMap<Modality, Volume>,
    pub mask: Option<Volume>,
}

impl Study {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Study {
            subject_id: subject_id.into(),
            modalities: BTreeMap::new(),
            mask: None,
        }
    }

    pub fn with(mut self, volume: Volume) -> Self {
        if volume.modality() == Modality::Seg {
            self.mask = Some(volume);
        } else {
            self.modalities.insert(volume.modality(), volume);
        }
        self
    }

    pub fn is_complete(&self) -> bool {
        Modality::IMAGING
            .iter()
            .all(|m| self.modalities.contains_key(m))
    }

    /// Imaging modalities absent from this study.
    pub fn missing(&self) -> Vec<Modality> {
        Modality::IMAGING
            .into_iter()
            .filter(|m| !self.modalities.contains_key(m))
            .collect()
    }

    pub fn get(&self, modality: Modality) -> Result<&Volume> {
        self.modalities
            .get(&modality)
            .ok_or_else(|| Error::InvalidStudy {
                subject: self.subject_id.clone(),
                reason: format!("{} is not present", modality.name()),
            })
    }

    pub fn reference(&self) -> Option<&Volume> {
        self.modalities.values().next()
    }
}

/// Expands a naming pattern containing `{subject}` and `{modality}`.
pub fn study_file_name(pattern: &str, subject: &str, modality: Modality) -> String {
    pattern
        .replace("{subject}", subject)
        .replace("{modality}", modality.tag())
}

/// Loads every modality (and the mask) of `subject` present in `dir` using
/// [`DEFAULT_PATTERN`].
pub fn load_study(dir: &Path, subject_id: &str) -> Result<Study> {
    load_study_with(dir, subject_id, DEFAULT_PATTERN)
}

pub fn load_study_with(dir: &Path, subject_id: &str, pattern: &str) -> Result<Study> {
    let mut study = Study::new(subject_id);
    for modality in Modality::IMAGING.into_iter().chain([Modality::Seg]) {
        let path = dir.join(study_file_name(pattern, subject_id, modality));
        if path.is_file() {
            study = study.with(load_volume_as(&path, modality)?);
        }
    }
    if study.modalities.is_empty() {
        return Err(Error::NoModalities {
            subject: subject_id.to_string(),
            dir: dir.to_path_buf(),
        });
    }
    let findings = validate_study(&study);
    if let Some(first) = findings.first() {
        return Err(match first {
            Finding::Geometry { .. } => {
                Error::GeometryMismatch(format!("subject {subject_id}: {first}"))
            }
            _ => Error::InvalidStudy {
                subject: subject_id.to_string(),
                reason: findings
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            },
        });
    }
    Ok(study)
}

/// Subject directories under a data root: every subdirectory, sorted by name,
/// with the directory name as subject id.
pub fn list_subjects(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.push((name.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// A violated study invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Finding {
    Geometry { modality: Modality, detail: String },
    IllegalLabel { value: f32, count: usize },
    ModalityTag { key: Modality, actual: Modality },
    Empty,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Geometry { modality, detail } => {
                write!(
                    f,
                    "{} geometry differs from reference: {detail}",
                    modality.name()
                )
            }
            Finding::IllegalLabel { value, count } => {
                write!(f, "mask contains illegal label {value} in {count} voxels")
            }
            Finding::ModalityTag { key, actual } => {
                write!(
                    f,
                    "volume stored as {} is tagged {}",
                    key.name(),
                    actual.name()
                )
            }
            Finding::Empty => f.write_str("study holds no modalities"),
        }
    }
}

/// Lists every violated study invariant; empty when the study is well formed.
pub fn validate_study(study: &Study) -> Vec<Finding> {
    let mut findings = Vec::new();
    let Some(reference) = study.reference() else {
        findings.push(Finding::Empty);
        return findings;
    };
    for (&key, volume) in &study.modalities {
        if volume.modality() != key {
            findings.push(Finding::ModalityTag {
                key,
                actual: volume.modality(),
            });
        }
        if let Some(detail) = reference.geometry_difference(volume) {
            findings.push(Finding::Geometry {
                modality: key,
                detail,
            });
        }
    }
    if let Some(mask) = &study.mask {
        if let Some(detail) = reference.geometry_difference(mask) {
            findings.push(Finding::Geometry {
                modality: Modality::Seg,
                detail,
            });
        }
        let mut illegal: BTreeMap<u32, (f32, usize)> = BTreeMap::new();
        for &v in mask.data() {
            if !(v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0) {
                illegal.entry(v.to_bits()).or_insert((v, 0)).1 += 1;
            }
        }
        findings.extend(
            illegal
                .into_values()
                .map(|(value, count)| Finding::IllegalLabel { value, count }),
        );
    }
    findings
}

/// Record of which modality was withheld from a subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropPlan {
    pub subject_id: String,
    pub dropped: Modality,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// The modality withheld from `subject_id` under `seed`: a uniform draw from
/// a generator keyed on both, independent of processing order.
pub fn dropped_modality(subject_id: &str, seed: u64) -> Modality {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(subject_id.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(subject_id.len() as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    Modality::IMAGING[rng.gen_range(0..4)]
}

/// Removes one uniformly chosen modality from a complete study.
pub fn drop_modality(study: &Study, seed: u64) -> Result<(Study, DropPlan)> {
    if !study.is_complete() {
        return Err(Error::InvalidStudy {
            subject: study.subject_id.clone(),
            reason: format!(
                "dropout needs all four modalities, missing {:?}",
                study.missing().iter().map(|m| m.name()).collect::<Vec<_>>()
            ),
        });
    }
    let dropped = dropped_modality(&study.subject_id, seed);
    let mut reduced = study.clone();
    reduced.modalities.remove(&dropped);
    Ok((
        reduced,
        DropPlan {
            subject_id: study.subject_id.clone(),
            dropped,
            seed,
        },
    ))
}
