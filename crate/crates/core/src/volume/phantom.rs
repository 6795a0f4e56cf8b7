//! Synthetic multi-contrast head phantoms with a labelled tumor, for tests
//! and demonstrations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Modality, Study, Volume};

/// Mean intensity of (background, brain, edema, enhancing, necrosis).
fn contrast(m: Modality) -> [f32; 5] {
    match m {
        Modality::T1w => [0.0, 600.0, 450.0, 550.0, 300.0],
        Modality::T2w => [0.0, 500.0, 900.0, 700.0, 1000.0],
        Modality::Flair => [0.0, 400.0, 800.0, 600.0, 350.0],
        Modality::T1ce => [0.0, 600.0, 500.0, 1100.0, 300.0],
        Modality::Seg => [0.0; 5],
    }
}

/// A complete study of `dims` (x, y, z) voxels: an ellipsoidal brain with
/// a smooth bias field and a tumor made of necrosis (label 1), an enhancing
/// rim (label 3) and surrounding edema (label 2). Deterministic in `seed`.
pub fn phantom_study(subject: &str, dims: [usize; 3], seed: u64) -> Study {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = dims;
    let half = dims.map(|d| d as f64 / 2.0);
    let brain_radius = half.map(|h| h * rng.gen_range(0.75..0.9));
    let tumor_center: [f64; 3] =
        std::array::from_fn(|a| half[a] + rng.gen_range(-0.25..0.25) * brain_radius[a]);
    let tumor_radius =
        brain_radius.iter().cloned().fold(f64::INFINITY, f64::min) * rng.gen_range(0.25..0.4);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));

    let n = nx * ny * nz;
    let mut tissue = vec![0usize; n];
    let mut bias = vec![0.0f64; n];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let brain: f64 = (0..3)
                    .map(|a| ((p[a] - half[a]) / brain_radius[a]).powi(2))
                    .sum();
                let r = (0..3)
                    .map(|a| (p[a] - tumor_center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / tumor_radius;
                let idx = i + nx * (j + ny * k);
                tissue[idx] = if brain > 1.0 {
                    0
                } else if r < 0.45 {
                    4
                } else if r < 0.7 {
                    3
                } else if r < 1.0 {
                    2
                } else {
                    1
                };
                bias[idx] = 1.0
                    + 0.1 * (p[0] / nx as f64 * 3.0 + phase[0]).sin()
                    + 0.1 * (p[1] / ny as f64 * 2.0 + phase[1]).cos()
                    + 0.05 * (p[2] / nz as f64 * 4.0 + phase[2]).sin();
            }
        }
    }
    let mut study = Study::new(subject);
    for m in Modality::IMAGING {
        let c = contrast(m);
        let data = (0..n)
            .map(|i| {
                let t = tissue[i];
                if t == 0 {
                    rng.gen_range(0.0..5.0)
                } else {
                    (c[t] as f64 * bias[i] + rng.gen_range(-15.0..15.0)) as f32
                }
            })
            .collect();
        study = study.with(Volume::from_data(dims, data, m).expect("phantom dims"));
    }
    let labels = tissue
        .iter()
        .map(|&t| match t {
            4 => 1.0,
            3 => 3.0,
            2 => 2.0,
            _ => 0.0,
        })
        .collect();
    study.with(Volume::from_data(dims, labels, Modality::Seg).expect("phantom dims"))
}
