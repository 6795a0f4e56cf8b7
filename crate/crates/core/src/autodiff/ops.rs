use std::sync::Arc;

use super::{record, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Scalar, Tensor};

/// Marks an output element of a gather that is filled with zero.
pub const ZERO_INDEX: u32 = u32::MAX;

/// A precomputed element permutation (with optional zero fill): output element
/// `i` takes input element `indices[i]`. Covers padding, cropping, cyclic
/// shifts, axis permutations and window tiling.
#[derive(Clone, Debug)]
pub struct IndexMap {
    pub indices: Arc<Vec<u32>>,
    pub out_shape: Vec<usize>,
    pub source_len: usize,
}

impl IndexMap {
    pub fn new(indices: Vec<u32>, out_shape: Vec<usize>, source_len: usize) -> Self {
        debug_assert_eq!(indices.len(), out_shape.iter().product::<usize>());
        IndexMap {
            indices: Arc::new(indices),
            out_shape,
            source_len,
        }
    }

    pub fn apply<T: Scalar>(&self, src: &[T]) -> Vec<T> {
        self.indices
            .iter()
            .map(|&i| {
                if i == ZERO_INDEX {
                    T::zero()
                } else {
                    src[i as usize]
                }
            })
            .collect()
    }
}

pub fn gather<'t, T: Scalar>(x: &Var<'t, T>, map: &IndexMap) -> Result<Var<'t, T>> {
    if x.value().len() != map.source_len {
        return Err(Error::Shape(format!(
            "gather expects {} source elements, got {}",
            map.source_len,
            x.value().len()
        )));
    }
    let out = Tensor::new(map.out_shape.clone(), map.apply(x.value().data()))?;
    let indices = map.indices.clone();
    let src_shape = x.shape().to_vec();
    Ok(record(&[x], out, move |g, _| {
        let mut dx = Tensor::zeros(&src_shape);
        let d = dx.data_mut();
        for (&i, &gv) in indices.iter().zip(g.data()) {
            if i != ZERO_INDEX {
                d[i as usize] += gv;
            }
        }
        vec![Some(dx)]
    }))
}

pub fn add<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.value().clone();
    out.add_assign(b.value());
    Ok(record(&[a, b], out, |g, needs| {
        needs
            .iter()
            .map(|&n| if n { Some(g.clone()) } else { None })
            .collect()
    }))
}

/// Concatenates two (N, C, ...) tensors along the channel axis.
pub fn concat_channels<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("concat of {sa:?} and {sb:?}")));
    }
    let n = sa[0];
    let spatial: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(&a.value().data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.value().data()[i * cb..(i + 1) * cb]);
    }
    let mut shape = sa.clone();
    shape[1] += sb[1];
    let out = Tensor::new(shape, data)?;
    Ok(record(&[a, b], out, move |g, needs| {
        let gd = g.data();
        let split = |offset: usize, len: usize, shape: &[usize]| {
            let mut d = Vec::with_capacity(n * len);
            for i in 0..n {
                let base = i * (ca + cb) + offset;
                d.extend_from_slice(&gd[base..base + len]);
            }
            Tensor::new(shape.to_vec(), d).expect("concat split")
        };
        vec![
            needs[0].then(|| split(0, ca, &sa)),
            needs[1].then(|| split(ca, cb, &sb)),
        ]
    }))
}

/// `y = x W^T + b` over the last axis; `weight` has shape (out, in).
pub fn linear<'t, T: Scalar>(
    x: &Var<'t, T>,
    weight: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    let k = *xs
        .last()
        .ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
    if ws.len() != 2 || ws[1] != k {
        return Err(Error::Shape(format!(
            "linear weight {ws:?} vs input {xs:?}"
        )));
    }
    let n = ws[0];
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::Shape(format!("linear bias {:?}", b.shape())));
        }
    }
    let m = x.value().len() / k.max(1);
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = n;
    let mut out = vec![T::zero(); m * n];
    if let Some(b) = bias {
        for row in out.chunks_mut(n.max(1)) {
            row.copy_from_slice(b.value().data());
        }
    }
    matmul(
        MatRef::new(x.value().data(), m, k),
        MatRef::new(weight.value().data(), n, k).t(),
        T::one(),
        &mut out,
        n,
    );
    let out = Tensor::new(out_shape, out)?;
    let xv = x.arc();
    let wv = weight.arc();
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(record(&inputs, out, move |g, needs| {
        let gm = MatRef::new(g.data(), m, n);
        let dx = needs[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            matmul(gm, MatRef::new(wv.data(), n, k), T::zero(), &mut d, k);
            Tensor::new(xs.clone(), d).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut d = vec![T::zero(); n * k];
            matmul(gm.t(), MatRef::new(xv.data(), m, k), T::zero(), &mut d, k);
            Tensor::new(ws.clone(), d).unwrap()
        });
        let mut grads = vec![dx, dw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut d = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new(vec![n], d).unwrap()
            }));
        }
        grads
    }))
}

fn unary<'t, T: Scalar>(
    x: &Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T) -> T + 'static,
) -> Var<'t, T> {
    let out = x.value().map(f);
    let xv = x.arc();
    record(&[x], out, move |g, _| {
        let d = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&gv, &xv)| gv * df(xv))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
    })
}

/// Exact (erf-based) GELU.
pub fn gelu<'t, T: Scalar>(x: &Var<'t, T>) -> Var<'t, T> {
    fn cdf(x: f64) -> f64 {
        0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }
    unary(
        x,
        |v| {
            let f = v.to_f64_lossy();
            T::from_f64_lossy(f * cdf(f))
        },
        |v| {
            let f = v.to_f64_lossy();
            let pdf = (-0.5 * f * f).exp() / (2.0 * std::f64::consts::PI).sqrt();
            T::from_f64_lossy(cdf(f) + f * pdf)
        },
    )
}

pub fn leaky_relu<'t, T: Scalar>(x: &Var<'t, T>, slope: f64) -> Var<'t, T> {
    let s = T::from_f64_lossy(slope);
    unary(
        x,
        move |v| if v > T::zero() { v } else { v * s },
        move |v| if v > T::zero() { T::one() } else { s },
    )
}

/// Normalizes contiguous groups of `group` elements to zero mean and unit
/// (biased) variance. Returns the normalized values and per-group 1/std.
fn normalize_groups<T: Scalar>(data: &[T], group: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(data.len() / group.max(1));
    let count = T::from_usize(group).unwrap();
    let eps = T::from_f64_lossy(eps);
    for (src, dst) in data.chunks(group).zip(out.chunks_mut(group)) {
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Gradient through `normalize_groups` given the upstream gradient with
/// respect to the normalized values.
fn normalize_groups_backward<T: Scalar>(dy: &[T], y: &[T], inv_std: &[T], group: usize) -> Vec<T> {
    let count = T::from_usize(group).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    for (((g, yv), d), &inv) in dy
        .chunks(group)
        .zip(y.chunks(group))
        .zip(dx.chunks_mut(group))
        .zip(inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / count;
        let mean_gy = g.iter().zip(yv).map(|(&a, &b)| a * b).sum::<T>() / count;
        for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(yv) {
            *dv = inv * (gv - mean_g - yv * mean_gy);
        }
    }
    dx
}

/// Layer normalization over the last axis with optional affine parameters.
pub fn layer_norm<'t, T: Scalar>(
    x: &Var<'t, T>,
    affine: Option<(&Var<'t, T>, &Var<'t, T>)>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
    if let Some((w, b)) = affine {
        if w.shape() != [c] || b.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} vs {c} channels",
                w.shape(),
                b.shape()
            )));
        }
    }
    let (xhat, inv_std) = normalize_groups(x.value().data(), c, eps);
    let out = match affine {
        Some((w, b)) => {
            let (w, b) = (w.value().data(), b.value().data());
            xhat.chunks(c)
                .flat_map(|row| row.iter().enumerate().map(|(j, &v)| v * w[j] + b[j]))
                .collect()
        }
        None => xhat.clone(),
    };
    let out = Tensor::new(shape.clone(), out)?;
    let xhat = Arc::new(xhat);
    match affine {
        None => Ok(record(&[x], out, move |g, _| {
            let dx = normalize_groups_backward(g.data(), &xhat, &inv_std, c);
            vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
        })),
        Some((w, b)) => {
            let wv = w.arc();
            Ok(record(&[x, w, b], out, move |g, needs| {
                let w = wv.data();
                let dx = needs[0].then(|| {
                    let dxhat: Vec<T> = g
                        .data()
                        .chunks(c)
                        .flat_map(|row| row.iter().enumerate().map(|(j, &v)| v * w[j]))
                        .collect();
                    let dx = normalize_groups_backward(&dxhat, &xhat, &inv_std, c);
                    Tensor::new(shape.clone(), dx).unwrap()
                });
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (row, xr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dw[j] += row[j] * xr[j];
                        db[j] += row[j];
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::new(vec![c], dw).unwrap()),
                    needs[2].then(|| Tensor::new(vec![c], db).unwrap()),
                ]
            }))
        }
    }
}

/// Instance normalization (no affine) of an (N, C, spatial...) tensor: each
/// (item, channel) plane is standardized independently.
pub fn instance_norm<'t, T: Scalar>(x: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("instance_norm on {shape:?}")));
    }
    let group: usize = shape[2..].iter().product();
    let (y, inv_std) = normalize_groups(x.value().data(), group, eps);
    let out = Tensor::new(shape.clone(), y)?;
    let y = out.data().to_vec();
    Ok(record(&[x], out, move |g, _| {
        let dx = normalize_groups_backward(g.data(), &y, &inv_std, group);
        vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
    }))
}

/// Mean squared error between a target and a prediction, as a scalar.
pub fn mse_loss<'t, T: Scalar>(target: &Var<'t, T>, prediction: &Var<'t, T>) -> Result<Var<'t, T>> {
    if target.shape() != prediction.shape() {
        return Err(Error::Shape(format!(
            "mse of {:?} vs {:?}",
            target.shape(),
            prediction.shape()
        )));
    }
    let n = target.value().len();
    if n == 0 {
        return Err(Error::Empty("mse over zero voxels".into()));
    }
    let count = T::from_usize(n).unwrap();
    let diff: Vec<T> = target
        .value()
        .data()
        .iter()
        .zip(prediction.value().data())
        .map(|(&y, &p)| y - p)
        .collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / count;
    let shape = target.shape().to_vec();
    Ok(record(
        &[target, prediction],
        Tensor::scalar(loss),
        move |g, needs| {
            let scale = g.data()[0] * T::from_f64_lossy(2.0) / count;
            let d_target: Vec<T> = diff.iter().map(|&d| d * scale).collect();
            vec![
                needs[0].then(|| Tensor::new(shape.clone(), d_target.clone()).unwrap()),
                needs[1].then(|| {
                    Tensor::new(shape.clone(), d_target.iter().map(|&v| -v).collect()).unwrap()
                }),
            ]
        },
    ))
}

/// `sum(x * weights)` with constant weights; used by gradient probes.
#[cfg(test)]
pub(crate) fn weighted_sum<'t, T: Scalar>(x: &Var<'t, T>, weights: &Tensor<T>) -> Var<'t, T> {
    let value = x
        .value()
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum();
    let w = weights.clone();
    record(&[x], Tensor::scalar(value), move |g, _| {
        let s = g.data()[0];
        vec![Some(w.map(|v| v * s))]
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_gradients;
    use super::*;

    fn ramp(shape: &[usize], seed: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            (((i + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0
        })
    }

    #[test]
    fn linear_gradients() {
        check_gradients(
            &[ramp(&[2, 3, 4], 1), ramp(&[5, 4], 2), ramp(&[5], 3)],
            |v| linear(&v[0], &v[1], Some(&v[2])).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        check_gradients(
            &[ramp(&[3, 6], 4), ramp(&[6], 5), ramp(&[6], 6)],
            |v| layer_norm(&v[0], Some((&v[1], &v[2])), 1e-5).unwrap(),
            1e-6,
        );
        check_gradients(
            &[ramp(&[4, 5], 7)],
            |v| layer_norm(&v[0], None, 1e-5).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradients() {
        check_gradients(
            &[ramp(&[2, 2, 2, 2, 3], 8)],
            |v| instance_norm(&v[0], 1e-5).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        check_gradients(&[ramp(&[10], 9)], |v| gelu(&v[0]), 1e-6);
        check_gradients(&[ramp(&[10], 10)], |v| leaky_relu(&v[0], 0.01), 1e-6);
        check_gradients(
            &[ramp(&[2, 1, 3], 11), ramp(&[2, 2, 3], 12)],
            |v| concat_channels(&v[0], &v[1]).unwrap(),
            1e-6,
        );
        let map = IndexMap::new(vec![2, ZERO_INDEX, 0, 2, 1], vec![5], 3);
        check_gradients(&[ramp(&[3], 13)], |v| gather(&v[0], &map).unwrap(), 1e-6);
        check_gradients(
            &[ramp(&[6], 14), ramp(&[6], 15)],
            |v| mse_loss(&v[0], &v[1]).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn mse_matches_hand_values() {
        let y = Var::constant(Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap());
        let p = Var::constant(Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap());
        assert_eq!(mse_loss(&y, &p).unwrap().value().data()[0], 1.0);
        let y = Var::constant(Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap());
        let p = Var::constant(Tensor::zeros(&[2]));
        assert_eq!(mse_loss(&y, &p).unwrap().value().data()[0], 1.0);
        assert_eq!(mse_loss(&y, &y).unwrap().value().data()[0], 0.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Var::constant(Tensor::<f32>::zeros(&[2, 3]));
        let b = Var::constant(Tensor::<f32>::zeros(&[3, 2]));
        assert!(add(&a, &b).is_err());
        assert!(mse_loss(&a, &b).is_err());
    }
}
