use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Label-composed tumor region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ET")]
    Enhancing,
    #[serde(rename = "TC")]
    Core,
    #[serde(rename = "WT")]
    Whole,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Enhancing, Region::Core, Region::Whole];

    /// Member labels: 1 necrotic core, 2 edema, 3 enhancing tumor.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Enhancing => &[3],
            Region::Core => &[1, 3],
            Region::Whole => &[1, 2, 3],
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::Enhancing => "ET",
            Region::Core => "TC",
            Region::Whole => "WT",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

fn label_of(v: f32) -> Result<u8> {
    match v {
        0.0 => Ok(0),
        1.0 => Ok(1),
        2.0 => Ok(2),
        3.0 => Ok(3),
        other => Err(Error::Shape(format!("illegal mask label {other}"))),
    }
}

/// Binary support of `region` in a label volume.
pub fn region_mask(mask: &Volume, region: Region) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| Ok(region.labels().contains(&label_of(v)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub enhancing: Vec<bool>,
    pub core: Vec<bool>,
    pub whole: Vec<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &[bool] {
        match region {
            Region::Enhancing => &self.enhancing,
            Region::Core => &self.core,
            Region::Whole => &self.whole,
        }
    }
}

pub fn compose_regions(mask: &Volume) -> Result<RegionMasks> {
    Ok(RegionMasks {
        enhancing: region_mask(mask, Region::Enhancing)?,
        core: region_mask(mask, Region::Core)?,
        whole: region_mask(mask, Region::Whole)?,
    })
}

/// Dice overlap of two binary masks; two empty masks score 1.
pub fn dice_binary(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dice of {} vs {} voxels",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn dice(pred: &Volume, reference: &Volume, region: Region) -> Result<f64> {
    if let Some(diff) = pred.geometry_difference(reference) {
        return Err(Error::GeometryMismatch(diff));
    }
    dice_binary(
        &region_mask(pred, region)?,
        &region_mask(reference, region)?,
    )
}

/// Treatment of a region absent from both masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyDice {
    /// Scores 1.
    #[default]
    One,
    /// Undefined, so aggregation excludes the case.
    Exclude,
}

/// [`dice`] with an explicit rule for regions absent from both volumes.
pub fn dice_with(
    pred: &Volume,
    reference: &Volume,
    region: Region,
    empty: EmptyDice,
) -> Result<Option<f64>> {
    let value = dice(pred, reference, region)?;
    let both_empty = empty == EmptyDice::Exclude
        && !region_mask(pred, region)?.contains(&true)
        && !region_mask(reference, region)?.contains(&true);
    Ok((!both_empty).then_some(value))
}

/// Foreground voxels with a 6-neighbour outside the mask (the array edge
/// counts as outside). `dims` is row-major `(D, H, W)`.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `s`. `f` holds squared distances or infinity.
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let xp = p as f64 * s;
            let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if cross <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let xq = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let d = xq - v[k] as f64 * s;
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel,
/// in physical units. Infinite everywhere when `features` is empty.
pub fn squared_distance_transform(
    features: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let mut f: Vec<f64> = features
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (t, slot) in line.iter_mut().enumerate() {
                    *slot = f[base + t * strides[axis]];
                }
                edt_1d(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (t, val) in line.iter().enumerate() {
                    f[base + t * strides[axis]] = *val;
                }
            }
        }
    }
    f
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions. `Some(0)` when both masks are empty, `None` when exactly
/// one is. `dims` and `spacing` are in row-major `(D, H, W)` order.
pub fn hd95_binary(
    a: &[bool],
    b: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "hd95 masks do not match dims {dims:?}"
        )));
    }
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    if ea && eb {
        return Ok(Some(0.0));
    }
    if ea || eb {
        return Ok(None);
    }
    let (ba, bb) = (boundary(a, dims), boundary(b, dims));
    let (da, db) = (
        squared_distance_transform(&ba, dims, spacing),
        squared_distance_transform(&bb, dims, spacing),
    );
    let mut distances: Vec<f64> = Vec::new();
    distances.extend((0..n).filter(|&i| ba[i]).map(|i| db[i].sqrt()));
    distances.extend((0..n).filter(|&i| bb[i]).map(|i| da[i].sqrt()));
    distances.sort_by(f64::total_cmp);
    Ok(Some(quantile_sorted(&distances, 0.95)))
}

/// HD95 of a region between two label volumes, in millimetres.
pub fn hd95(pred: &Volume, reference: &Volume, region: Region) -> Result<Option<f64>> {
    if let Some(diff) = pred.geometry_difference(reference) {
        return Err(Error::GeometryMismatch(diff));
    }
    let [nx, ny, nz] = pred.dims();
    let [sx, sy, sz] = pred.spacing();
    hd95_binary(
        &region_mask(pred, region)?,
        &region_mask(reference, region)?,
        [nz, ny, nx],
        [sz, sy, sx],
    )
}
