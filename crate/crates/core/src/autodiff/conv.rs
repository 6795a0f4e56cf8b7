//! 3D convolutions lowered to GEMM one output depth-slice at a time.

use super::{record, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    pub const SAME3: Conv3dSpec = Conv3dSpec {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: Conv3dSpec = Conv3dSpec {
        stride: 1,
        padding: 0,
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::Shape(format!("conv3d input {xs:?} / weight {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::Shape(format!(
                "conv3d weight expects {} input channels, got {}",
                ws[1], xs[1]
            )));
        }
        if spec.stride == 0 {
            return Err(Error::Shape("conv3d stride must be positive".into()));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = xs[2 + a] + 2 * spec.padding;
            if padded < ws[2 + a] {
                return Err(Error::Shape(format!(
                    "conv3d kernel {ws:?} larger than padded input {xs:?}"
                )));
            }
            output[a] = (padded - ws[2 + a]) / spec.stride + 1;
        }
        Ok(Geometry {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            output,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    /// Fills `col` (patch_len x out_plane) with the receptive fields of
    /// output depth slice `od` of item `x` (Ci x D x H x W).
    fn im2col<T: Scalar>(&self, x: &[T], od: usize, col: &mut [T]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh_n, ow_n] = self.output;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let plane = self.out_plane();
        let mut row = 0;
        for ci in 0..self.ci {
            let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for a in 0..kd {
                let id = od as isize * s + a as isize - p;
                for b in 0..kh {
                    for c in 0..kw {
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        row += 1;
                        if id < 0 || id >= d as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = oh as isize * s + b as isize - p;
                            let seg = &mut dst[oh * ow_n..(oh + 1) * ow_n];
                            if ih < 0 || ih >= h as isize {
                                seg.fill(T::zero());
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for (ow, v) in seg.iter_mut().enumerate() {
                                let iw = ow as isize * s + c as isize - p;
                                *v = if iw < 0 || iw >= w as isize {
                                    T::zero()
                                } else {
                                    xc[base + iw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds `col` back into the item gradient `dx` (transpose of `im2col`).
    fn col2im<T: Scalar>(&self, col: &[T], od: usize, dx: &mut [T]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh_n, ow_n] = self.output;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let plane = self.out_plane();
        let mut row = 0;
        for ci in 0..self.ci {
            for a in 0..kd {
                let id = od as isize * s + a as isize - p;
                for b in 0..kh {
                    for c in 0..kw {
                        let src = &col[row * plane..(row + 1) * plane];
                        row += 1;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = oh as isize * s + b as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            for (ow, &v) in src[oh * ow_n..(oh + 1) * ow_n].iter().enumerate() {
                                let iw = ow as isize * s + c as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    dx[base + iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Plain (untracked) 3D convolution. `weight` is (Co, Ci, kd, kh, kw).
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::Shape(format!("conv3d bias {:?}", b.shape())));
        }
    }
    let out_len = g.co * g.out_volume();
    let mut out = vec![T::zero(); g.n * out_len];
    if let Some(b) = bias {
        for item in out.chunks_mut(out_len) {
            for (co, chunk) in item.chunks_mut(g.out_volume()).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
    }
    let in_len = g.ci * g.in_volume();
    let wm = MatRef::new(weight.data(), g.co, g.patch_len());
    if g.pointwise() {
        for n in 0..g.n {
            let xm = MatRef::new(&x.data()[n * in_len..(n + 1) * in_len], g.ci, g.in_volume());
            matmul(wm, xm, T::one(), &mut out[n * out_len..], g.out_volume());
        }
    } else {
        let plane = g.out_plane();
        let mut col = vec![T::zero(); g.patch_len() * plane];
        for n in 0..g.n {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            for od in 0..g.output[0] {
                g.im2col(xn, od, &mut col);
                let offset = n * out_len + od * plane;
                matmul(
                    wm,
                    MatRef::new(&col, g.patch_len(), plane),
                    T::one(),
                    &mut out[offset..],
                    g.out_volume(),
                );
            }
        }
    }
    let mut shape = vec![g.n, g.co];
    shape.extend_from_slice(&g.output);
    Tensor::new(shape, out)
}

pub fn conv3d<'t, T: Scalar>(
    x: &Var<'t, T>,
    weight: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    spec: Conv3dSpec,
) -> Result<Var<'t, T>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    let out = conv3d_forward(x.value(), weight.value(), bias.map(|b| b.value()), spec)?;
    let xv = x.arc();
    let wv = weight.arc();
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(record(&inputs, out, move |grad, needs| {
        let gd = grad.data();
        let in_len = g.ci * g.in_volume();
        let out_len = g.co * g.out_volume();
        let plen = g.patch_len();
        let mut dx = needs[0].then(|| vec![T::zero(); g.n * in_len]);
        let mut dw = needs[1].then(|| vec![T::zero(); g.co * plen]);
        let wm = MatRef::new(wv.data(), g.co, plen);
        if g.pointwise() {
            for n in 0..g.n {
                let gm = MatRef::new(&gd[n * out_len..(n + 1) * out_len], g.co, g.out_volume());
                if let Some(dx) = dx.as_mut() {
                    matmul(wm.t(), gm, T::zero(), &mut dx[n * in_len..], g.in_volume());
                }
                if let Some(dw) = dw.as_mut() {
                    let xm = MatRef::new(
                        &xv.data()[n * in_len..(n + 1) * in_len],
                        g.ci,
                        g.in_volume(),
                    );
                    matmul(gm, xm.t(), T::one(), dw, plen);
                }
            }
        } else {
            let plane = g.out_plane();
            let mut col = vec![T::zero(); plen * plane];
            for n in 0..g.n {
                let xn = &xv.data()[n * in_len..(n + 1) * in_len];
                for od in 0..g.output[0] {
                    let offset = n * out_len + od * plane;
                    let gm = MatRef {
                        data: &gd[offset..],
                        rows: g.co,
                        cols: plane,
                        row_stride: g.out_volume(),
                        col_stride: 1,
                    };
                    if let Some(dw) = dw.as_mut() {
                        g.im2col(xn, od, &mut col);
                        matmul(gm, MatRef::new(&col, plen, plane).t(), T::one(), dw, plen);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(wm.t(), gm, T::zero(), &mut col, plane);
                        g.col2im(&col, od, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(xv.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap()),
        ];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); g.co];
                for item in gd.chunks(out_len) {
                    for (co, chunk) in item.chunks(g.out_volume()).enumerate() {
                        db[co] += chunk.iter().copied().sum::<T>();
                    }
                }
                Tensor::new(vec![g.co], db).unwrap()
            }));
        }
        grads
    }))
}

/// Transposed convolution with kernel size and stride 2 (non-overlapping
/// upsampling), no bias. `weight` is (Ci, Co, 2, 2, 2).
pub fn conv_transpose3d_k2<'t, T: Scalar>(
    x: &Var<'t, T>,
    weight: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
        return Err(Error::Shape(format!(
            "transposed conv input {xs:?} / weight {ws:?}"
        )));
    }
    let (n, ci, co) = (xs[0], xs[1], ws[1]);
    let [d, h, w] = [xs[2], xs[3], xs[4]];
    let vol = d * h * w;
    let rows = co * 8;
    let out_shape = vec![n, co, 2 * d, 2 * h, 2 * w];
    let out_vol = 8 * vol;

    // Position of column-matrix element (row, voxel) in the upsampled item.
    let target = move |row: usize, v: usize| -> usize {
        let (c, k) = (row / 8, row % 8);
        let (a, b, e) = (k / 4, (k / 2) % 2, k % 2);
        let (z, rem) = (v / (h * w), v % (h * w));
        let (y, xx) = (rem / w, rem % w);
        ((c * 2 * d + 2 * z + a) * 2 * h + 2 * y + b) * 2 * w + 2 * xx + e
    };

    let wm = MatRef::new(weight.value().data(), ci, rows);
    let mut out = vec![T::zero(); n * co * out_vol];
    let mut ycol = vec![T::zero(); rows * vol];
    for item in 0..n {
        let xm = MatRef::new(
            &x.value().data()[item * ci * vol..(item + 1) * ci * vol],
            ci,
            vol,
        );
        matmul(wm.t(), xm, T::zero(), &mut ycol, vol);
        let dst = &mut out[item * co * out_vol..(item + 1) * co * out_vol];
        for row in 0..rows {
            for v in 0..vol {
                dst[target(row, v)] = ycol[row * vol + v];
            }
        }
    }
    let out = Tensor::new(out_shape, out)?;
    let xv = x.arc();
    let wv = weight.arc();
    Ok(record(&[x, weight], out, move |grad, needs| {
        let mut dx = needs[0].then(|| vec![T::zero(); n * ci * vol]);
        let mut dw = needs[1].then(|| vec![T::zero(); ci * rows]);
        let wm = MatRef::new(wv.data(), ci, rows);
        let mut dcol = vec![T::zero(); rows * vol];
        for item in 0..n {
            let src = &grad.data()[item * co * out_vol..(item + 1) * co * out_vol];
            for row in 0..rows {
                for v in 0..vol {
                    dcol[row * vol + v] = src[target(row, v)];
                }
            }
            let dm = MatRef::new(&dcol, rows, vol);
            if let Some(dx) = dx.as_mut() {
                matmul(wm, dm, T::zero(), &mut dx[item * ci * vol..], vol);
            }
            if let Some(dw) = dw.as_mut() {
                let xm = MatRef::new(&xv.data()[item * ci * vol..(item + 1) * ci * vol], ci, vol);
                matmul(xm, dm.t(), T::one(), dw, rows);
            }
        }
        vec![
            dx.map(|d| Tensor::new(xv.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap()),
        ]
    }))
}
