//! Window tiling, cyclic shifts and the index bookkeeping behind shifted
//! window attention.

use std::sync::Arc;

use crate::autodiff::{IndexMap, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a 5D tensor, got {shape:?}")))
}

/// Splits an (N, C, D, H, W) tensor into non-overlapping `w`-cubes, returning
/// (num_windows * N, C, w, w, w) ordered item-major, then depth, height, width.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let [n, c, d, h, wd] = dims5(x.shape())?;
    if w == 0 || d % w != 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::Shape(format!(
            "spatial dims {:?} not divisible by window {w}",
            &x.shape()[2..]
        )));
    }
    let (nd, nh, nw) = (d / w, h / w, wd / w);
    let mut out = Vec::with_capacity(x.len());
    let src = x.data();
    for item in 0..n {
        for a in 0..nd {
            for b in 0..nh {
                for e in 0..nw {
                    for ch in 0..c {
                        for z in 0..w {
                            for y in 0..w {
                                let base = (((item * c + ch) * d + a * w + z) * h + b * w + y) * wd
                                    + e * w;
                                out.extend_from_slice(&src[base..base + w]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * nd * nh * nw, c, w, w, w], out)
}

/// Inverse of [`window_partition`] for a target shape (N, C, D, H, W).
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    shape: [usize; 5],
    w: usize,
) -> Result<Tensor<T>> {
    let [n, c, d, h, wd] = shape;
    if w == 0 || d % w != 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::Shape(format!(
            "shape {shape:?} not divisible by window {w}"
        )));
    }
    let (nd, nh, nw) = (d / w, h / w, wd / w);
    if windows.shape() != [n * nd * nh * nw, c, w, w, w] {
        return Err(Error::Shape(format!(
            "{:?} windows inconsistent with shape {shape:?} and window {w}",
            windows.shape()
        )));
    }
    let mut out = vec![T::zero(); windows.len()];
    let mut chunks = windows.data().chunks(w);
    for item in 0..n {
        for a in 0..nd {
            for b in 0..nh {
                for e in 0..nw {
                    for ch in 0..c {
                        for z in 0..w {
                            for y in 0..w {
                                let base = (((item * c + ch) * d + a * w + z) * h + b * w + y) * wd
                                    + e * w;
                                out[base..base + w].copy_from_slice(chunks.next().unwrap());
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Cyclic shift of a channels-last grid (N, D, H, W, C): output voxel `r`
/// takes input voxel `(r + shift) mod dim` on every axis, matching a roll by
/// `-shift`.
pub fn roll_channels_last<T: Scalar>(x: &Tensor<T>, shift: [usize; 3]) -> Result<Tensor<T>> {
    let [n, d, h, w, c] = dims5(x.shape())?;
    let mut out = Vec::with_capacity(x.len());
    for item in 0..n {
        for z in 0..d {
            for y in 0..h {
                for q in 0..w {
                    let (sz, sy, sq) = ((z + shift[0]) % d, (y + shift[1]) % h, (q + shift[2]) % w);
                    let base = (((item * d + sz) * h + sy) * w + sq) * c;
                    out.extend_from_slice(&x.data()[base..base + c]);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Index bookkeeping for one (possibly shifted) window attention pass over a
/// channels-last token grid.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub padded: [usize; 3],
    /// Per-axis window actually used (clipped to small grids).
    pub window: [usize; 3],
    /// Per-axis cyclic shift actually used (zero on clipped axes).
    pub shift: [usize; 3],
    pub windows_per_item: usize,
    /// (N, D, H, W, C) tokens to (N * windows, L, C), with padding and shift.
    pub partition: IndexMap,
    /// Inverse of `partition` restricted to the unpadded grid.
    pub merge: IndexMap,
    /// Region label per token of each window of one item, when shifted.
    pub regions: Option<Arc<Vec<u32>>>,
    /// Bias-table row of each (query, key) pair of a window.
    pub rel_index: Arc<Vec<u32>>,
}

impl WindowPlan {
    pub fn new(
        batch: usize,
        grid: [usize; 3],
        channels: usize,
        window: usize,
        shift: usize,
    ) -> Self {
        let mut win = [0; 3];
        let mut sh = [0; 3];
        let mut padded = [0; 3];
        for a in 0..3 {
            if grid[a] <= window {
                win[a] = grid[a];
                sh[a] = 0;
            } else {
                win[a] = window;
                sh[a] = shift;
            }
            padded[a] = grid[a].div_ceil(win[a]) * win[a];
        }
        let counts = [padded[0] / win[0], padded[1] / win[1], padded[2] / win[2]];
        let windows_per_item = counts.iter().product::<usize>();
        let l = win.iter().product::<usize>();
        let c = channels;
        let grid_len = batch * grid.iter().product::<usize>() * c;

        let mut fwd = Vec::with_capacity(batch * windows_per_item * l * c);
        for n in 0..batch {
            for a in 0..counts[0] {
                for b in 0..counts[1] {
                    for e in 0..counts[2] {
                        for z in 0..win[0] {
                            for y in 0..win[1] {
                                for q in 0..win[2] {
                                    let r = [a * win[0] + z, b * win[1] + y, e * win[2] + q];
                                    let p: Vec<usize> =
                                        (0..3).map(|ax| (r[ax] + sh[ax]) % padded[ax]).collect();
                                    if p[0] < grid[0] && p[1] < grid[1] && p[2] < grid[2] {
                                        let base = (((n * grid[0] + p[0]) * grid[1] + p[1])
                                            * grid[2]
                                            + p[2])
                                            * c;
                                        fwd.extend((0..c).map(|ch| (base + ch) as u32));
                                    } else {
                                        fwd.extend(std::iter::repeat(ZERO_INDEX).take(c));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let partition = IndexMap::new(fwd, vec![batch * windows_per_item, l, c], grid_len);

        let mut rev = Vec::with_capacity(grid_len);
        for n in 0..batch {
            for z in 0..grid[0] {
                for y in 0..grid[1] {
                    for q in 0..grid[2] {
                        let p = [z, y, q];
                        let r: Vec<usize> = (0..3)
                            .map(|ax| (p[ax] + padded[ax] - sh[ax]) % padded[ax])
                            .collect();
                        let wi = ((r[0] / win[0]) * counts[1] + r[1] / win[1]) * counts[2]
                            + r[2] / win[2];
                        let ti =
                            ((r[0] % win[0]) * win[1] + r[1] % win[1]) * win[2] + r[2] % win[2];
                        let base = ((n * windows_per_item + wi) * l + ti) * c;
                        rev.extend((0..c).map(|ch| (base + ch) as u32));
                    }
                }
            }
        }
        let merge = IndexMap::new(
            rev,
            vec![batch, grid[0], grid[1], grid[2], c],
            batch * windows_per_item * l * c,
        );

        let regions = sh.iter().any(|&s| s > 0).then(|| {
            let label = |ax: usize, r: usize| -> u32 {
                if sh[ax] == 0 || r < padded[ax] - win[ax] {
                    0
                } else if r < padded[ax] - sh[ax] {
                    1
                } else {
                    2
                }
            };
            let mut labels = Vec::with_capacity(windows_per_item * l);
            for a in 0..counts[0] {
                for b in 0..counts[1] {
                    for e in 0..counts[2] {
                        for z in 0..win[0] {
                            for y in 0..win[1] {
                                for q in 0..win[2] {
                                    labels.push(
                                        label(0, a * win[0] + z) * 9
                                            + label(1, b * win[1] + y) * 3
                                            + label(2, e * win[2] + q),
                                    );
                                }
                            }
                        }
                    }
                }
            }
            Arc::new(labels)
        });

        WindowPlan {
            grid,
            padded,
            window: win,
            shift: sh,
            windows_per_item,
            partition,
            merge,
            regions,
            rel_index: Arc::new(relative_index(win, window)),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }
}

/// Rows of a `(2 * table_window - 1)^3` bias table addressed by the 3D
/// offset between every (query, key) token pair of a `window`-shaped window.
pub fn relative_index(window: [usize; 3], table_window: usize) -> Vec<u32> {
    let side = 2 * table_window - 1;
    let coords: Vec<[isize; 3]> = (0..window[0])
        .flat_map(|z| {
            (0..window[1]).flat_map(move |y| {
                (0..window[2]).map(move |q| [z as isize, y as isize, q as isize])
            })
        })
        .collect();
    let off = table_window as isize - 1;
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for i in &coords {
        for j in &coords {
            let r = |ax: usize| (i[ax] - j[ax] + off) as usize;
            out.push(((r(0) * side + r(1)) * side + r(2)) as u32);
        }
    }
    out
}
