//! Hierarchical shifted-window transformer encoder.

use super::config::{ModelConfig, NORM_EPS};
use super::window::WindowPlan;
use super::ParamSet;
use crate::autodiff::{
    self, attention_probs, conv3d, gather, gelu, layer_norm, linear, AttentionLayout, Conv3dSpec,
    IndexMap, Var,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights of one window attention layer.
pub struct AttentionParams<'a, 't, T> {
    pub qkv_weight: &'a Var<'t, T>,
    pub qkv_bias: &'a Var<'t, T>,
    pub bias_table: &'a Var<'t, T>,
    pub proj_weight: &'a Var<'t, T>,
    pub proj_bias: &'a Var<'t, T>,
}

impl<'a, 't, T: Scalar> AttentionParams<'a, 't, T> {
    pub fn from_set(params: &'a ParamSet<'t, T>, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            qkv_weight: params.get(&format!("{prefix}.qkv.weight"))?,
            qkv_bias: params.get(&format!("{prefix}.qkv.bias"))?,
            bias_table: params.get(&format!("{prefix}.relative_position_bias_table"))?,
            proj_weight: params.get(&format!("{prefix}.proj.weight"))?,
            proj_bias: params.get(&format!("{prefix}.proj.bias"))?,
        })
    }
}

/// Whether shifted windows mask token pairs that wrapped around the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMask {
    Regions,
    AllPass,
}

fn grid_of(shape: &[usize]) -> Result<(usize, [usize; 3], usize)> {
    match shape {
        &[n, d, h, w, c] if n > 0 && d > 0 && h > 0 && w > 0 && c > 0 => Ok((n, [d, h, w], c)),
        _ => Err(Error::Shape(format!(
            "expected a non-empty channels-last (N, D, H, W, C) grid, got {shape:?}"
        ))),
    }
}

fn layout_for(plan: &WindowPlan, heads: usize, mask: ShiftMask) -> AttentionLayout {
    AttentionLayout {
        heads,
        window_len: plan.window_len(),
        rel_index: plan.rel_index.clone(),
        regions: match mask {
            ShiftMask::Regions => plan.regions.clone(),
            ShiftMask::AllPass => None,
        },
        windows_per_item: plan.windows_per_item,
    }
}

/// Multi-head self-attention inside (optionally cyclically shifted) windows
/// of a channels-last grid (N, D, H, W, C). Axes no longer than `window` use
/// a single unshifted window; other axes are zero-padded to a window multiple.
/// The result has the input's shape with the shift undone.
pub fn shifted_window_attention<'t, T: Scalar>(
    x: &Var<'t, T>,
    attn: &AttentionParams<'_, 't, T>,
    window: usize,
    shift: usize,
    heads: usize,
    mask: ShiftMask,
) -> Result<Var<'t, T>> {
    let (n, grid, c) = grid_of(x.shape())?;
    let plan = WindowPlan::new(n, grid, c, window, shift);
    let windows = gather(x, &plan.partition)?;
    let qkv = linear(&windows, attn.qkv_weight, Some(attn.qkv_bias))?;
    let mixed = autodiff::window_attention(&qkv, attn.bias_table, &layout_for(&plan, heads, mask))?;
    let projected = linear(&mixed, attn.proj_weight, Some(attn.proj_bias))?;
    gather(&projected, &plan.merge)
}

/// Attention weights of every window and head (each L x L, row = query) for
/// the same computation as [`shifted_window_attention`].
pub fn window_attention_weights<T: Scalar>(
    x: &Tensor<T>,
    attn: &AttentionParams<'_, '_, T>,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<(WindowPlan, Vec<Vec<Vec<T>>>)> {
    let (n, grid, c) = grid_of(x.shape())?;
    let plan = WindowPlan::new(n, grid, c, window, shift);
    let windows = Tensor::new(
        plan.partition.out_shape.clone(),
        plan.partition.apply(x.data()),
    )?;
    let qkv = linear(
        &Var::constant(windows),
        attn.qkv_weight,
        Some(attn.qkv_bias),
    )?;
    let layout = layout_for(&plan, heads, ShiftMask::Regions);
    let table = attn.bias_table.value();
    let mut all = Vec::new();
    for w in 0..qkv.shape()[0] {
        let per_head = (0..heads)
            .map(|h| attention_probs(qkv.value(), table, &layout, w, h))
            .collect::<Result<Vec<_>>>()?;
        all.push(per_head);
    }
    Ok((plan, all))
}

/// One transformer block: pre-norm window attention and a GELU MLP, each
/// with a residual connection.
pub(crate) fn swin_block<'t, T: Scalar>(
    params: &ParamSet<'t, T>,
    prefix: &str,
    x: &Var<'t, T>,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<Var<'t, T>> {
    let norm1 = (
        params.get(&format!("{prefix}.norm1.weight"))?,
        params.get(&format!("{prefix}.norm1.bias"))?,
    );
    let normed = layer_norm(x, Some(norm1), NORM_EPS)?;
    let attn = AttentionParams::from_set(params, &format!("{prefix}.attn"))?;
    let attended =
        shifted_window_attention(&normed, &attn, window, shift, heads, ShiftMask::Regions)?;
    let x = autodiff::add(x, &attended)?;

    let norm2 = (
        params.get(&format!("{prefix}.norm2.weight"))?,
        params.get(&format!("{prefix}.norm2.bias"))?,
    );
    let h = layer_norm(&x, Some(norm2), NORM_EPS)?;
    let h = linear(
        &h,
        params.get(&format!("{prefix}.mlp.fc1.weight"))?,
        Some(params.get(&format!("{prefix}.mlp.fc1.bias"))?),
    )?;
    let h = gelu(&h);
    let h = linear(
        &h,
        params.get(&format!("{prefix}.mlp.fc2.weight"))?,
        Some(params.get(&format!("{prefix}.mlp.fc2.bias"))?),
    )?;
    autodiff::add(&x, &h)
}

/// Gathers the 8 neighbors of every 2x2x2 cell of a channels-last grid into
/// one (N, D/2, H/2, W/2, 8C) grid; neighbor `(a, b, e)` fills channel block
/// `4a + 2b + e`.
fn merge_neighbors_map(n: usize, grid: [usize; 3], c: usize) -> Result<IndexMap> {
    if grid.iter().any(|&v| v % 2 != 0) {
        return Err(Error::Shape(format!(
            "patch merging needs even dims, got {grid:?}"
        )));
    }
    let [d, h, w] = grid;
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * d * h * w * c);
    for item in 0..n {
        for z in 0..hd {
            for y in 0..hh {
                for q in 0..hw {
                    for k in 0..8 {
                        let (a, b, e) = (k / 4, (k / 2) % 2, k % 2);
                        let base = (((item * d + 2 * z + a) * h + 2 * y + b) * w + 2 * q + e) * c;
                        idx.extend((0..c).map(|ch| (base + ch) as u32));
                    }
                }
            }
        }
    }
    Ok(IndexMap::new(
        idx,
        vec![n, hd, hh, hw, 8 * c],
        n * d * h * w * c,
    ))
}

/// Downsampling between stages on a channels-last grid: neighbor
/// concatenation, optional layer norm, bias-free projection 8C -> 2C.
pub(crate) fn merge_tokens<'t, T: Scalar>(
    x: &Var<'t, T>,
    norm: Option<(&Var<'t, T>, &Var<'t, T>)>,
    reduction: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (n, grid, c) = grid_of(x.shape())?;
    let merged = gather(x, &merge_neighbors_map(n, grid, c)?)?;
    let merged = match norm {
        Some(affine) => layer_norm(&merged, Some(affine), NORM_EPS)?,
        None => merged,
    };
    linear(&merged, reduction, None)
}

/// Patch merging on a channels-first tensor (N, C, D, H, W) -> (N, 2C, D/2, H/2, W/2).
/// `reduction` is (2C, 8C); pass `norm` to include the pre-projection layer norm.
pub fn patch_merge<'t, T: Scalar>(
    x: &Var<'t, T>,
    norm: Option<(&Var<'t, T>, &Var<'t, T>)>,
    reduction: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cl = gather(x, &to_channels_last(x.shape())?)?;
    let merged = merge_tokens(&cl, norm, reduction)?;
    gather(&merged, &to_channels_first(merged.shape())?)
}

/// Permutation (N, C, D, H, W) -> (N, D, H, W, C).
pub(crate) fn to_channels_last(shape: &[usize]) -> Result<IndexMap> {
    let &[n, c, d, h, w] = shape else {
        return Err(Error::Shape(format!("expected 5D, got {shape:?}")));
    };
    let vol = d * h * w;
    let mut idx = Vec::with_capacity(n * c * vol);
    for item in 0..n {
        for v in 0..vol {
            idx.extend((0..c).map(|ch| ((item * c + ch) * vol + v) as u32));
        }
    }
    Ok(IndexMap::new(idx, vec![n, d, h, w, c], n * c * vol))
}

/// Permutation (N, D, H, W, C) -> (N, C, D, H, W).
pub(crate) fn to_channels_first(shape: &[usize]) -> Result<IndexMap> {
    let &[n, d, h, w, c] = shape else {
        return Err(Error::Shape(format!("expected 5D, got {shape:?}")));
    };
    let vol = d * h * w;
    let mut idx = Vec::with_capacity(n * c * vol);
    for item in 0..n {
        for ch in 0..c {
            idx.extend((0..vol).map(|v| ((item * vol + v) * c + ch) as u32));
        }
    }
    Ok(IndexMap::new(idx, vec![n, c, d, h, w], n * c * vol))
}

/// Runs the encoder on a channels-first input whose spatial dims are
/// multiples of [`ModelConfig::spatial_multiple`]. Returns the
/// channel-normalized hidden states, channels-first: the patch embedding
/// followed by the output of every stage.
pub(crate) fn encode<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<'t, T>,
    x: &Var<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    let embedded = conv3d(
        x,
        params.get("encoder.patch_embed.weight")?,
        Some(params.get("encoder.patch_embed.bias")?),
        Conv3dSpec {
            stride: cfg.embed_patch,
            padding: 0,
        },
    )?;
    let mut tokens = gather(&embedded, &to_channels_last(embedded.shape())?)?;
    let normalized_out = |t: &Var<'t, T>| -> Result<Var<'t, T>> {
        let normed = layer_norm(t, None, NORM_EPS)?;
        gather(&normed, &to_channels_first(normed.shape())?)
    };
    let mut hidden = vec![normalized_out(&tokens)?];
    for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.num_heads).enumerate() {
        for blk in 0..depth {
            let shift = if blk % 2 == 1 { cfg.window / 2 } else { 0 };
            tokens = swin_block(
                params,
                &format!("encoder.stages.{s}.blocks.{blk}"),
                &tokens,
                cfg.window,
                shift,
                heads,
            )?;
        }
        let norm = (
            params.get(&format!("encoder.stages.{s}.merge.norm.weight"))?,
            params.get(&format!("encoder.stages.{s}.merge.norm.bias"))?,
        );
        tokens = merge_tokens(
            &tokens,
            Some(norm),
            params.get(&format!("encoder.stages.{s}.merge.reduction.weight"))?,
        )?;
        hidden.push(normalized_out(&tokens)?);
    }
    Ok(hidden)
}
