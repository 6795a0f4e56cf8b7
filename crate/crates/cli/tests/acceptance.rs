//! Acceptance suite. Every criterion runs in isolation and prints one
//! `criterion N ... PASS|FAIL` line; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinsyn::autodiff::{mse_loss, Tape, Var};
use swinsyn::inference::{fusion_weight_sum, sliding_window, TilingConfig};
use swinsyn::metrics::{dice_binary, hd95_binary, ssim_arrays, Region, SsimConfig};
use swinsyn::model::checkpoint::{load_checkpoint, save_checkpoint};
use swinsyn::model::{
    build_model, forward, forward_graph, window_attention_weights, window_partition,
    window_reverse, AttentionParams, ModelConfig, ParamSet, WindowPlan,
};
use swinsyn::preprocess::{zscore_apply, zscore_fit, zscore_invert, StatsMode};
use swinsyn::training::{
    sample_patch, standardize_study, train_step, AdamConfig, AdamState, TrainConfig, Trainer,
};
use swinsyn::volume::{
    dropped_modality, phantom_study, save_volume, study_file_name, Modality, Study, Volume,
    DEFAULT_PATTERN,
};
use swinsyn::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_size: 8,
        depths: vec![1, 1],
        num_heads: vec![2, 4],
        window: 2,
        ..ModelConfig::default()
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn shape_contract() -> Outcome {
    let store = build_model(&ModelConfig::desk(), 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut timings = Vec::new();
    for edge in [32, 128] {
        let x = random_tensor(&[1, 3, edge, edge, edge], &mut rng, 1.0);
        let t = Instant::now();
        let y = forward(&store, &x).map_err(|e| e.to_string())?;
        let secs = t.elapsed().as_secs_f64();
        ensure!(
            y.shape() == [1, 1, edge, edge, edge],
            "{edge}^3 gave shape {:?}",
            y.shape()
        );
        ensure!(y.all_finite(), "{edge}^3 output has non-finite values");
        timings.push(format!("{edge}^3 in {secs:.1} s"));
    }
    Ok(format!(
        "{} params, {}",
        store.num_parameters(),
        timings.join(", ")
    ))
}

fn gradient_check() -> Outcome {
    let cfg = tiny_config();
    let store = build_model(&cfg, 5).map_err(|e| e.to_string())?;
    let params = store.to_precision::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::from_fn(&[1, 3, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let y = Tensor::<f64>::from_fn(&[1, 1, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));

    let loss_at = |p: &BTreeMap<String, Arc<Tensor<f64>>>| -> f64 {
        let set = ParamSet::from_tensors(p.iter());
        let out = forward_graph(&cfg, &set, &Var::constant(x.clone())).unwrap();
        mse_loss(&Var::constant(y.clone()), &out)
            .unwrap()
            .value()
            .data()[0]
    };

    let tape = Tape::new();
    let set = ParamSet::leaves(&tape, params.iter());
    let out = forward_graph(&cfg, &set, &Var::constant(x.clone())).map_err(|e| e.to_string())?;
    let loss = mse_loss(&Var::constant(y.clone()), &out).map_err(|e| e.to_string())?;
    let grads = tape.backward(&loss);

    let names: Vec<&String> = params.keys().collect();
    let h = 1e-5;
    // Denominator floor: below it central differences are roundoff-limited.
    let floor = 1e-6;
    let samples = 24;
    let mut worst = (0.0f64, String::new());
    for _ in 0..samples {
        let name = names[rng.gen_range(0..names.len())];
        let len = params[name].len();
        let i = rng.gen_range(0..len);
        let analytic = grads.get(set.get(name).unwrap()).data()[i];
        let mut shifted = params.clone();
        let mut probe = |delta: f64| {
            let mut t = (*params[name]).clone();
            t.data_mut()[i] += delta;
            shifted.insert(name.clone(), Arc::new(t));
            loss_at(&shifted)
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        ensure!(
            rel <= 1e-3,
            "{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
        );
        if rel >= worst.0 {
            worst = (rel, format!("{name}[{i}], gradient {analytic:.2e}"));
        }
    }
    Ok(format!(
        "{samples} parameters, worst relative error {:.2e} at {}",
        worst.0, worst.1
    ))
}

fn overfit() -> Outcome {
    let mut params = build_model(&ModelConfig::desk(), 0).map_err(|e| e.to_string())?;
    let study = standardize_study(
        &phantom_study("fixed", [16, 16, 16], 3),
        StatsMode::AllVoxels,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (sample, _) =
        sample_patch(&study, Modality::T1ce, 16, &mut rng).map_err(|e| e.to_string())?;
    let x = sample.inputs.reshape(&[1, 3, 16, 16, 16]).unwrap();
    let y = sample.target.reshape(&[1, 1, 16, 16, 16]).unwrap();
    let mut state = AdamState::default();
    let adam = AdamConfig::default();
    let t = Instant::now();
    let mut first = None;
    for _ in 0..500 {
        let l = train_step(&mut params, &mut state, &x, &y, &adam).map_err(|e| e.to_string())?;
        first.get_or_insert(l);
    }
    let pred = forward(&params, &x).map_err(|e| e.to_string())?;
    let final_loss = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| ((p - t) as f64).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    ensure!(final_loss < 1e-3, "loss {final_loss:.3e} after 500 steps");
    ensure!(secs <= 600.0, "took {secs:.0} s");
    Ok(format!(
        "loss {:.3} -> {final_loss:.2e} after 500 steps in {secs:.0} s",
        first.unwrap()
    ))
}

fn window_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let w = rng.gen_range(1..=4);
        let shape = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            w * rng.gen_range(1..=3),
            w * rng.gen_range(1..=3),
            w * rng.gen_range(1..=3),
        ];
        let x = random_tensor(&shape, &mut rng, 10.0);
        let windows = window_partition(&x, w).map_err(|e| e.to_string())?;
        let back = window_reverse(&windows, shape, w).map_err(|e| e.to_string())?;
        ensure!(
            back.data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "reverse(partition(x)) differs for {shape:?}, w {w}"
        );
        let again = window_partition(&back, w).map_err(|e| e.to_string())?;
        ensure!(
            again == windows,
            "partition(reverse(w)) differs for {shape:?}"
        );

        // Shifted plans over arbitrary grids undo themselves exactly.
        let grid = [
            rng.gen_range(1..10),
            rng.gen_range(1..10),
            rng.gen_range(1..10),
        ];
        let plan = WindowPlan::new(1, grid, 2, w.max(2), w.max(2) / 2);
        let tokens = random_tensor(&[1, grid[0], grid[1], grid[2], 2], &mut rng, 10.0);
        let merged = plan.merge.apply(&plan.partition.apply(tokens.data()));
        ensure!(
            merged == tokens.data(),
            "plan round trip differs for grid {grid:?}"
        );
    }

    // Brute-force region labels for a shift of 2 in 4^3 windows on an 8^3 grid.
    let (w, shift, n, c, heads) = (4usize, 2usize, 8usize, 6usize, 2usize);
    let table = (2 * w - 1).pow(3);
    let vars = [
        Var::constant(random_tensor(&[3 * c, c], &mut rng, 0.3)),
        Var::constant(random_tensor(&[3 * c], &mut rng, 0.1)),
        Var::constant(random_tensor(&[table, heads], &mut rng, 0.1)),
        Var::constant(random_tensor(&[c, c], &mut rng, 0.3)),
        Var::constant(random_tensor(&[c], &mut rng, 0.1)),
    ];
    let attn = AttentionParams {
        qkv_weight: &vars[0],
        qkv_bias: &vars[1],
        bias_table: &vars[2],
        proj_weight: &vars[3],
        proj_bias: &vars[4],
    };
    let x = random_tensor(&[1, n, n, n, c], &mut rng, 1.0);
    let (plan, weights) =
        window_attention_weights(&x, &attn, w, shift, heads).map_err(|e| e.to_string())?;
    ensure!(
        plan.window == [w; 3] && plan.padded == [n; 3],
        "unexpected plan {:?} {:?}",
        plan.window,
        plan.padded
    );
    let counts = n / w;
    let l = w * w * w;
    let (mut blocked, mut open) = (0usize, 0usize);
    let mut max_blocked = 0.0f32;
    for (wi, per_head) in weights.iter().enumerate() {
        let corner = [wi / (counts * counts), (wi / counts) % counts, wi % counts];
        let original = |t: usize| -> [usize; 3] {
            let local = [t / (w * w), (t / w) % w, t % w];
            std::array::from_fn(|a| (corner[a] * w + local[a] + shift) % n)
        };
        for probs in per_head {
            for q in 0..l {
                for k in 0..l {
                    let (oq, ok) = (original(q), original(k));
                    let contiguous = (0..3).all(|a| oq[a].abs_diff(ok[a]) < w);
                    let p = probs[q * l + k];
                    if contiguous {
                        open += 1;
                        ensure!(
                            p >= 1e-7,
                            "window {wi}: open pair ({q}, {k}) has weight {p:e}"
                        );
                    } else {
                        blocked += 1;
                        max_blocked = max_blocked.max(p);
                        ensure!(p < 1e-7, "window {wi}: pair ({q}, {k}) leaks weight {p:e}");
                    }
                }
            }
        }
    }
    ensure!(blocked > 0, "no cross-region pairs were exercised");
    Ok(format!(
        "30 random round trips bit-exact; {blocked} blocked pairs (max weight {max_blocked:e}), {open} open"
    ))
}

fn fusion() -> Outcome {
    let dims = [19usize, 13, 23];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random_tensor(&[3, dims[0], dims[1], dims[2]], &mut rng, 2.0);
    let mut min_weight = f64::INFINITY;
    for overlap in [0.0, 0.25, 0.5] {
        let cfg = TilingConfig {
            patch: 8,
            overlap,
            ..TilingConfig::default()
        };
        let constant = |x: &Tensor<f32>| -> swinsyn::Result<Tensor<f32>> {
            let s = x.shape();
            Ok(Tensor::full(&[s[0], 1, s[2], s[3], s[4]], 3.25))
        };
        let out = sliding_window(&constant, &input, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            out.data().iter().all(|&v| v == 3.25),
            "constant stub not reproduced at overlap {overlap}"
        );

        let identity = |x: &Tensor<f32>| -> swinsyn::Result<Tensor<f32>> {
            let s = x.shape();
            let block = s[2] * s[3] * s[4];
            Tensor::new(vec![1, 1, s[2], s[3], s[4]], x.data()[..block].to_vec())
        };
        let out = sliding_window(&identity, &input, &cfg).map_err(|e| e.to_string())?;
        let diff = out
            .data()
            .iter()
            .zip(&input.data()[..out.len()])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        ensure!(
            diff <= 1e-5,
            "identity stub off by {diff:e} at overlap {overlap}"
        );

        for probe in [dims, [5, 8, 17], [8, 8, 8], [3, 2, 1]] {
            let sum = fusion_weight_sum(probe, &cfg).map_err(|e| e.to_string())?;
            let lowest = sum.iter().cloned().fold(f64::INFINITY, f64::min);
            ensure!(
                lowest > 0.0,
                "zero fusion weight for {probe:?} at overlap {overlap}"
            );
            min_weight = min_weight.min(lowest);
        }
    }

    let store = build_model(&tiny_config(), 9).map_err(|e| e.to_string())?;
    let x = random_tensor(&[3, 16, 16, 16], &mut rng, 1.0);
    let cfg = TilingConfig {
        patch: 16,
        ..TilingConfig::default()
    };
    let fused = sliding_window(&store, &x, &cfg).map_err(|e| e.to_string())?;
    let direct = forward(&store, &x.clone().reshape(&[1, 3, 16, 16, 16]).unwrap())
        .map_err(|e| e.to_string())?;
    let diff = fused
        .data()
        .iter()
        .zip(direct.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(
        diff <= 1e-6,
        "single-window fusion differs from forward by {diff:e}"
    );
    Ok(format!(
        "stubs exact, single window within {diff:e}, minimum fused weight {min_weight:.2e}"
    ))
}

fn zscore() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let n = rng.gen_range(8..2000);
        let (loc, scale) = (rng.gen_range(-500.0..500.0), rng.gen_range(0.01..300.0));
        let data: Vec<f32> = (0..n)
            .map(|_| (loc + scale * rng.gen_range(-1.0..1.0f64)) as f32)
            .collect();
        let v = Volume::from_data([n, 1, 1], data, Modality::T1w).unwrap();
        let p = zscore_fit(&v, StatsMode::AllVoxels).map_err(|e| e.to_string())?;
        let z = zscore_apply(&v, &p);
        let q = zscore_fit(&z, StatsMode::AllVoxels).map_err(|e| e.to_string())?;
        ensure!(q.mu.abs() <= 1e-5, "standardized mean {:e}", q.mu);
        ensure!(
            (q.sigma - 1.0).abs() <= 1e-5,
            "standardized sigma {}",
            q.sigma
        );
        let back = zscore_invert(&z, &p);
        for (a, b) in back.data().iter().zip(v.data()) {
            let rel = (a - b).abs() as f64 / (b.abs() as f64).max(p.sigma);
            ensure!(rel <= 1e-5, "round trip {b} -> {a} (rel {rel:e})");
            worst[2] = worst[2].max(rel);
        }
        worst[0] = worst[0].max(q.mu.abs());
        worst[1] = worst[1].max((q.sigma - 1.0).abs());
    }
    let v = Volume::from_data([3, 1, 1], vec![1.0, 2.0, 3.0], Modality::T1w).unwrap();
    let z = zscore_apply(&v, &zscore_fit(&v, StatsMode::AllVoxels).unwrap());
    for (got, want) in z.data().iter().zip([-1.2247f32, 0.0, 1.2247]) {
        ensure!((got - want).abs() <= 1e-4, "{{1,2,3}} gave {:?}", z.data());
    }
    Ok(format!(
        "50 volumes: |mu| <= {:.1e}, |sigma-1| <= {:.1e}, round trip rel <= {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

/// Local SSIM at every fully contained window with an explicit 3D kernel.
fn ssim_oracle(a: &[f32], b: &[f32], d: usize, cfg: &SsimConfig) -> f64 {
    let w = cfg.window;
    let r = (w / 2) as f64;
    let mut kernel = Vec::with_capacity(w * w * w);
    for z in 0..w {
        for y in 0..w {
            for x in 0..w {
                let dist2 =
                    (z as f64 - r).powi(2) + (y as f64 - r).powi(2) + (x as f64 - r).powi(2);
                kernel.push((-dist2 / (2.0 * cfg.gaussian_sigma.powi(2))).exp());
            }
        }
    }
    let total: f64 = kernel.iter().sum();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for z0 in 0..=d - w {
        for y0 in 0..=d - w {
            for x0 in 0..=d - w {
                let mut m = [0.0f64; 5];
                for (i, k) in kernel.iter().enumerate() {
                    let (z, y, x) = (z0 + i / (w * w), y0 + (i / w) % w, x0 + i % w);
                    let idx = (z * d + y) * d + x;
                    let (p, q, k) = (a[idx] as f64, b[idx] as f64, k / total);
                    m[0] += k * p;
                    m[1] += k * q;
                    m[2] += k * p * p;
                    m[3] += k * q * q;
                    m[4] += k * p * q;
                }
                let (va, vb, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                sum += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2)
                    / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn ssim_checks() -> Outcome {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 16;
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let noise = rng.gen_range(0.0..1.0f32);
        let a: Vec<f32> = (0..d * d * d).map(|_| rng.gen()).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|v| ((1.0 - noise) * v + noise * rng.gen::<f32>()).clamp(0.0, 1.0))
            .collect();
        let fast = ssim_arrays(&a, &b, [d; 3], &cfg).map_err(|e| e.to_string())?;
        let oracle = ssim_oracle(&a, &b, d, &cfg);
        let swapped = ssim_arrays(&b, &a, [d; 3], &cfg).map_err(|e| e.to_string())?;
        let own = ssim_arrays(&a, &a, [d; 3], &cfg).map_err(|e| e.to_string())?;
        ensure!(
            (fast - oracle).abs() <= 1e-6,
            "ssim {fast} vs oracle {oracle}"
        );
        ensure!(
            (fast - swapped).abs() <= 1e-9,
            "asymmetric: {fast} vs {swapped}"
        );
        ensure!((own - 1.0).abs() <= 1e-6, "self-similarity {own}");
        worst[0] = worst[0].max((fast - oracle).abs());
        worst[1] = worst[1].max((fast - swapped).abs());
        worst[2] = worst[2].max((own - 1.0).abs());
    }
    Ok(format!(
        "20 pairs: oracle gap {:.1e}, asymmetry {:.1e}, self gap {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn brute_boundary(mask: &[bool], d: usize) -> Vec<[i64; 3]> {
    let inside = |z: i64, y: i64, x: i64| {
        let ok = |v: i64| v >= 0 && v < d as i64;
        ok(z) && ok(y) && ok(x) && mask[((z as usize) * d + y as usize) * d + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..d as i64 {
            for x in 0..d as i64 {
                if !inside(z, y, x) {
                    continue;
                }
                let neighbours = [
                    (z - 1, y, x),
                    (z + 1, y, x),
                    (z, y - 1, x),
                    (z, y + 1, x),
                    (z, y, x - 1),
                    (z, y, x + 1),
                ];
                if neighbours.iter().any(|&(a, b, c)| !inside(a, b, c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_hd95(a: &[bool], b: &[bool], d: usize) -> Option<f64> {
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    if ea && eb {
        return Some(0.0);
    }
    if ea || eb {
        return None;
    }
    let (ba, bb) = (brute_boundary(a, d), brute_boundary(b, d));
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| ((0..3).map(|i| (p[i] - q[i]).pow(2)).sum::<i64>() as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    all.extend(bb.iter().map(|p| nearest(p, &ba)));
    all.sort_by(f64::total_cmp);
    let h = (all.len() - 1) as f64 * 0.95;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    Some(all[lo] + (h - lo as f64) * (all[hi] - all[lo]))
}

fn random_labels(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    // A random ball of tumor labels, occasionally empty.
    let mut out = vec![0.0f32; d * d * d];
    if rng.gen_bool(0.1) {
        return out;
    }
    let center: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..d as f64));
    let radius = rng.gen_range(0.5..d as f64 / 2.0);
    for (i, v) in out.iter_mut().enumerate() {
        let p = [i / (d * d), (i / d) % d, i % d];
        let r = (0..3)
            .map(|a| (p[a] as f64 - center[a]).powi(2))
            .sum::<f64>()
            .sqrt()
            / radius;
        if r < 1.0 || rng.gen_bool(0.02) {
            *v = [1.0, 2.0, 3.0][rng.gen_range(0..3)];
        }
    }
    out
}

fn overlap_metrics() -> Outcome {
    let d = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut finite = 0;
    for case in 0..50 {
        let (pa, pb) = (random_labels(d, &mut rng), random_labels(d, &mut rng));
        let mut sizes = Vec::new();
        for region in Region::ALL {
            let a: Vec<bool> = pa
                .iter()
                .map(|&v| region.labels().contains(&(v as u8)))
                .collect();
            let b: Vec<bool> = pb
                .iter()
                .map(|&v| region.labels().contains(&(v as u8)))
                .collect();
            let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
            let (na, nb) = (
                a.iter().filter(|x| **x).count(),
                b.iter().filter(|x| **x).count(),
            );
            let expected = if na + nb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (na + nb) as f64
            };
            let got = dice_binary(&a, &b).map_err(|e| e.to_string())?;
            ensure!(
                got == expected,
                "case {case} {region}: dice {got} vs {expected}"
            );
            let got = hd95_binary(&a, &b, [d; 3], [1.0; 3]).map_err(|e| e.to_string())?;
            let expected = brute_hd95(&a, &b, d);
            ensure!(
                got == expected,
                "case {case} {region}: hd95 {got:?} vs {expected:?}"
            );
            finite += got.is_some() as usize;
            sizes.push(na);
        }
        ensure!(
            sizes[0] <= sizes[1] && sizes[1] <= sizes[2],
            "case {case}: region sizes ET {} TC {} WT {} not nested",
            sizes[0],
            sizes[1],
            sizes[2]
        );
    }

    let mut a = vec![false; d * d * d];
    let mut b = vec![false; d * d * d];
    a[(5 * d + 5) * d + 2] = true;
    b[(5 * d + 5) * d + 5] = true;
    let hand = hd95_binary(&a, &b, [d; 3], [1.0; 3]).map_err(|e| e.to_string())?;
    ensure!(hand == Some(3.0), "single voxels 3 apart gave {hand:?}");
    Ok(format!(
        "50 label pairs x 3 regions exact ({finite} finite HD95), hand case 3.0"
    ))
}

fn write_study(root: &Path, study: &Study) {
    let dir = root.join(&study.subject_id);
    std::fs::create_dir_all(&dir).unwrap();
    let volumes = study.modalities.values().chain(study.mask.as_ref());
    for v in volumes {
        let name = study_file_name(DEFAULT_PATTERN, &study.subject_id, v.modality());
        save_volume(v, &dir.join(name)).unwrap();
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_swinsyn"));
    cmd.args(args);
    for (key, _) in std::env::vars() {
        if key.starts_with("SWINSYN__") {
            cmd.env_remove(key);
        }
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`swinsyn {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn dropout_checks() -> Outcome {
    let n = 4000;
    let mut counts = BTreeMap::new();
    for i in 0..n {
        let subject = format!("case-{i:05}");
        let m = dropped_modality(&subject, 2024);
        ensure!(
            m == dropped_modality(&subject, 2024),
            "{subject} is not deterministic"
        );
        *counts.entry(m).or_insert(0usize) += 1;
    }
    let mut freqs = Vec::new();
    for m in Modality::IMAGING {
        let f = *counts.get(&m).unwrap_or(&0) as f64 / n as f64;
        ensure!(
            (f - 0.25).abs() <= 0.02,
            "{} dropped with frequency {f}",
            m.name()
        );
        freqs.push(format!("{} {f:.3}", m.tag()));
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    for (i, name) in ["alpha", "beta", "gamma"].iter().enumerate() {
        write_study(&data, &phantom_study(name, [8, 8, 8], i as u64));
    }
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 11\n[data]\nroot = {:?}\n",
            data.display().to_string()
        ),
    )
    .unwrap();
    let mut manifests = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let path = cli(&[
            "dropout",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        manifests.push(std::fs::read(path.trim()).map_err(|e| e.to_string())?);
    }
    ensure!(
        manifests[0] == manifests[1],
        "manifests differ between runs"
    );
    Ok(format!(
        "{n} subjects: {}; CLI manifest identical twice",
        freqs.join(", ")
    ))
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    for (i, name) in ["s01", "s02"].iter().enumerate() {
        write_study(&data, &phantom_study(name, [32, 32, 32], 100 + i as u64));
    }
    let run = tmp.path().join("run");
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 3\noutput_dir = {:?}\n\n[data]\nroot = {:?}\n\n[train]\nepochs = 5\npatch = 16\n\n[tiling]\npatch = 16\n",
            run.display().to_string(),
            data.display().to_string()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let models = run.join("models");
    let manifest = run.join("dropout_manifest.tsv");
    let synth = run.join("synth");
    let eval = run.join("eval");
    cli(&[
        "train",
        "--config",
        cfg,
        "--target",
        "all",
        "--out",
        models.to_str().unwrap(),
    ])?;
    cli(&["dropout", "--config", cfg])?;
    cli(&[
        "synthesize",
        "--config",
        cfg,
        "--models",
        models.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        synth.to_str().unwrap(),
    ])?;
    cli(&[
        "evaluate",
        "--config",
        cfg,
        "--manifest",
        manifest.to_str().unwrap(),
        "--synth",
        synth.to_str().unwrap(),
        "--masks",
        data.to_str().unwrap(),
        "--montage",
        "--out",
        eval.to_str().unwrap(),
    ])?;
    let summary = std::fs::read_to_string(eval.join("summary.tsv")).map_err(|e| e.to_string())?;
    let header: Vec<&str> = summary.lines().next().unwrap_or("").split('\t').collect();
    for column in ["mean", "std", "q25", "median", "q75"] {
        ensure!(header.contains(&column), "summary lacks column {column}");
    }
    let ssim_row = summary
        .lines()
        .find(|l| l.starts_with("all\tSSIM\t"))
        .ok_or("summary has no pooled SSIM row")?;
    for file in ["records.tsv", "report.json"] {
        ensure!(eval.join(file).is_file(), "missing {file}");
    }
    for subject in ["s01", "s02"] {
        ensure!(
            eval.join("montage")
                .join(format!("{subject}.png"))
                .is_file(),
            "missing montage for {subject}"
        );
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs <= 900.0, "pipeline took {secs:.0} s");
    let mean = ssim_row.split('\t').nth(4).unwrap_or("?");
    Ok(format!(
        "pipeline finished in {secs:.0} s, pooled SSIM mean {mean}"
    ))
}

fn checkpoint_portability() -> Outcome {
    let studies: Vec<Study> = (0..2)
        .map(|i| phantom_study(&format!("c{i}"), [12, 10, 9], 40 + i))
        .collect();
    let cfg = TrainConfig {
        patch: 8,
        epochs: 3,
        seed: 17,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("mid.ckpt");

    let mut straight =
        Trainer::new(&tiny_config(), cfg.clone(), &studies).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        straight.step().map_err(|e| e.to_string())?;
    }
    let ckpt = straight.checkpoint();
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure!(
        loaded.params.bit_identical(&ckpt.params),
        "parameters changed across save/load"
    );
    ensure!(
        loaded.state.len() == ckpt.state.len()
            && loaded
                .state
                .iter()
                .all(|(k, v)| ckpt.state.get(k) == Some(v)),
        "optimizer state changed across save/load"
    );
    let expected = straight.step().map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(loaded, cfg, &studies).map_err(|e| e.to_string())?;
    let got = resumed.step().map_err(|e| e.to_string())?;
    let gap = (got - expected).abs();
    ensure!(
        gap <= 1e-6,
        "resumed loss {got} vs uninterrupted {expected}"
    );
    ensure!(
        resumed.params().bit_identical(straight.params()),
        "parameters diverge after the resumed step"
    );
    Ok(format!("bit-exact round trip, next-step loss gap {gap:e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("shape contract", shape_contract),
        ("gradient check", gradient_check),
        ("overfit", overfit),
        ("window algebra", window_algebra),
        ("sliding-window fusion", fusion),
        ("z-score", zscore),
        ("ssim", ssim_checks),
        ("dice and hd95", overlap_metrics),
        ("dropout", dropout_checks),
        ("end to end", end_to_end),
        ("checkpoint portability", checkpoint_portability),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !filter.is_empty() && !filter.contains(&number) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number:>2} {name:<24} PASS  {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} {name:<24} FAIL  {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
