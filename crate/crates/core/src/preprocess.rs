//! Per-volume intensity standardization and rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Smallest standard deviation accepted by [`zscore_fit`].
pub const MIN_SIGMA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    #[default]
    AllVoxels,
    NonzeroVoxels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreParams {
    pub mu: f64,
    /// Population standard deviation; always `>= MIN_SIGMA`.
    pub sigma: f64,
    pub mode: StatsMode,
}

/// Mean and population standard deviation over the voxels selected by `mode`.
pub fn zscore_fit(v: &Volume, mode: StatsMode) -> Result<ZScoreParams> {
    let selected = v
        .data()
        .iter()
        .filter(|&&x| mode == StatsMode::AllVoxels || x != 0.0)
        .map(|&x| x as f64);
    let (mut n, mut sum) = (0usize, 0.0f64);
    for x in selected.clone() {
        n += 1;
        sum += x;
    }
    if n < 2 {
        return Err(Error::DegenerateVolume { sigma: 0.0 });
    }
    let mu = sum / n as f64;
    let var = selected.map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    if !(sigma >= MIN_SIGMA) {
        return Err(Error::DegenerateVolume { sigma });
    }
    Ok(ZScoreParams { mu, sigma, mode })
}

pub fn zscore_apply(v: &Volume, p: &ZScoreParams) -> Volume {
    debug_assert!(p.sigma > 0.0);
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - p.mu) / p.sigma) as f32)
        .collect();
    v.with_data(data).expect("same dims")
}

pub fn zscore_invert(v: &Volume, p: &ZScoreParams) -> Volume {
    let data = v
        .data()
        .iter()
        .map(|&z| (z as f64 * p.sigma + p.mu) as f32)
        .collect();
    v.with_data(data).expect("same dims")
}

/// Fits and applies in one step.
pub fn standardize(v: &Volume, mode: StatsMode) -> Result<(Volume, ZScoreParams)> {
    let p = zscore_fit(v, mode)?;
    Ok((zscore_apply(v, &p), p))
}

fn unit_range(v: &Volume) -> Volume {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi as f64 - lo as f64;
    let data = if span > 0.0 {
        v.data()
            .iter()
            .map(|&x| ((x as f64 - lo as f64) / span) as f32)
            .collect()
    } else {
        vec![0.0; v.len()]
    };
    v.with_data(data).expect("same dims")
}

/// Maps each volume independently onto [0, 1] by its own min and max.
/// Constant volumes become all zeros.
pub fn minmax_rescale(a: &Volume, b: &Volume) -> Result<(Volume, Volume)> {
    if let Some(diff) = a.geometry_difference(b) {
        return Err(Error::GeometryMismatch(diff));
    }
    Ok((unit_range(a), unit_range(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use proptest::prelude::*;

    fn vol(data: Vec<f32>) -> Volume {
        Volume::from_data([data.len(), 1, 1], data, Modality::T1w).unwrap()
    }

    #[test]
    fn hand_values() {
        let p = zscore_fit(&vol(vec![1.0, 2.0, 3.0]), StatsMode::AllVoxels).unwrap();
        assert!((p.mu - 2.0).abs() < 1e-12);
        assert!((p.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let z = zscore_apply(&vol(vec![1.0, 2.0, 3.0]), &p);
        for (got, want) in z.data().iter().zip([-1.2247449, 0.0, 1.2247449]) {
            assert!((got - want).abs() < 1e-5);
        }

        let p = zscore_fit(&vol(vec![0.0, 0.0, 4.0, 6.0]), StatsMode::NonzeroVoxels).unwrap();
        assert_eq!((p.mu, p.sigma), (5.0, 1.0));

        let p = ZScoreParams {
            mu: 10.0,
            sigma: 2.0,
            mode: StatsMode::AllVoxels,
        };
        assert_eq!(zscore_invert(&vol(vec![-1.0, 1.0]), &p).data(), [8.0, 12.0]);
        assert_eq!(zscore_invert(&vol(vec![0.0; 3]), &p).data(), [10.0; 3]);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            zscore_fit(&vol(vec![0.0; 8]), StatsMode::AllVoxels),
            Err(Error::DegenerateVolume { .. })
        ));
        assert!(zscore_fit(&vol(vec![0.0, 0.0, 5.0]), StatsMode::NonzeroVoxels).is_err());
    }

    #[test]
    fn already_standard_is_unchanged() {
        let v = vol(vec![-1.0, 1.0, -1.0, 1.0]);
        let (z, _) = standardize(&v, StatsMode::AllVoxels).unwrap();
        for (a, b) in z.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minmax_rules() {
        let a = vol(vec![0.0, 50.0, 100.0]);
        let b = vol(vec![3.0; 3]);
        let (ra, rb) = minmax_rescale(&a, &b).unwrap();
        assert_eq!(ra.data(), [0.0, 0.5, 1.0]);
        assert_eq!(rb.data(), [0.0; 3]);
        let (rra, _) = minmax_rescale(&ra, &rb).unwrap();
        assert_eq!(rra.data(), ra.data());
        assert!(minmax_rescale(&a, &vol(vec![1.0; 4])).is_err());
    }

    proptest! {
        #[test]
        fn standardized_volume_has_unit_moments(
            data in prop::collection::vec(-1000.0f32..1000.0, 8..200),
        ) {
            let v = vol(data);
            prop_assume!(zscore_fit(&v, StatsMode::AllVoxels).is_ok_and(|p| p.sigma > 1e-2));
            let (z, p) = standardize(&v, StatsMode::AllVoxels).unwrap();
            let q = zscore_fit(&z, StatsMode::AllVoxels).unwrap();
            prop_assert!(q.mu.abs() <= 1e-5);
            prop_assert!((q.sigma - 1.0).abs() <= 1e-5);
            let back = zscore_invert(&z, &p);
            for (a, b) in back.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() as f64 <= 1e-5 * (b.abs() as f64).max(p.sigma));
            }
        }

        #[test]
        fn standardization_ignores_positive_affine_maps(
            data in prop::collection::vec(-10.0f32..10.0, 8..64),
            alpha in 0.1f32..10.0,
            beta in -50.0f32..50.0,
        ) {
            let v = vol(data.clone());
            prop_assume!(zscore_fit(&v, StatsMode::AllVoxels).is_ok_and(|p| p.sigma > 1e-1));
            let w = vol(data.iter().map(|x| alpha * x + beta).collect());
            let (zv, _) = standardize(&v, StatsMode::AllVoxels).unwrap();
            let (zw, _) = standardize(&w, StatsMode::AllVoxels).unwrap();
            for (a, b) in zv.data().iter().zip(zw.data()) {
                prop_assert!((a - b).abs() < 1e-3);
            }
        }
    }
}
