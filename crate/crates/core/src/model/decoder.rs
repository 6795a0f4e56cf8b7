//! Convolutional decoder with residual blocks and skip connections.

use super::config::{ModelConfig, LEAKY_SLOPE, NORM_EPS};
use super::ParamSet;
use crate::autodiff::{
    add, concat_channels, conv3d, conv_transpose3d_k2, instance_norm, leaky_relu, Conv3dSpec, Var,
};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// conv3-norm-act-conv3-norm plus a (projected when channel counts differ)
/// shortcut, followed by the activation.
pub(crate) fn res_block<'t, T: Scalar>(
    params: &ParamSet<'t, T>,
    prefix: &str,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let h = conv3d(
        x,
        params.get(&format!("{prefix}.conv1.weight"))?,
        None,
        Conv3dSpec::SAME3,
    )?;
    let h = leaky_relu(&instance_norm(&h, NORM_EPS)?, LEAKY_SLOPE);
    let h = conv3d(
        &h,
        params.get(&format!("{prefix}.conv2.weight"))?,
        None,
        Conv3dSpec::SAME3,
    )?;
    let h = instance_norm(&h, NORM_EPS)?;
    let shortcut = match params.try_get(&format!("{prefix}.conv3.weight")) {
        Some(w) => instance_norm(&conv3d(x, w, None, Conv3dSpec::POINTWISE)?, NORM_EPS)?,
        None => x.clone(),
    };
    Ok(leaky_relu(&add(&h, &shortcut)?, LEAKY_SLOPE))
}

/// Doubles the resolution of `x`, concatenates the skip features and fuses
/// them with a residual block.
fn up_block<'t, T: Scalar>(
    params: &ParamSet<'t, T>,
    prefix: &str,
    x: &Var<'t, T>,
    skip: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let up = conv_transpose3d_k2(x, params.get(&format!("{prefix}.transp.weight"))?)?;
    if up.shape()[2..] != skip.shape()[2..] {
        return Err(Error::Shape(format!(
            "{prefix}: upsampled {:?} does not match skip {:?}",
            up.shape(),
            skip.shape()
        )));
    }
    res_block(
        params,
        &format!("{prefix}.res"),
        &concat_channels(&up, skip)?,
    )
}

/// Decodes the encoder pyramid into an output with `cfg.out_channels`
/// channels at the input resolution. `hidden` holds the patch embedding and
/// every stage output (channels-first); `input` is the network input.
/// The regression head has no output activation.
pub fn decode<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<'t, T>,
    input: &Var<'t, T>,
    hidden: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    let stages = cfg.num_stages();
    if hidden.len() != stages + 1 {
        return Err(Error::Shape(format!(
            "decoder expects {} pyramid levels, got {}",
            stages + 1,
            hidden.len()
        )));
    }
    for (level, h) in hidden.iter().enumerate() {
        let expected = cfg.stage_channels(level);
        if h.shape().len() != 5 || h.shape()[1] != expected {
            return Err(Error::Shape(format!(
                "pyramid level {level} has shape {:?}, expected {expected} channels",
                h.shape()
            )));
        }
        if level > 0 {
            let prev = &hidden[level - 1].shape()[2..];
            if h.shape()[2..].iter().zip(prev).any(|(&a, &b)| 2 * a != b) {
                return Err(Error::Shape(format!(
                    "pyramid level {level} is not half the resolution of level {}",
                    level - 1
                )));
            }
        }
    }

    let input_skip = res_block(params, "decoder.input_block", input)?;
    let mut skips = Vec::with_capacity(stages);
    for (i, h) in hidden.iter().take(stages).enumerate() {
        skips.push(if i + 1 < stages {
            res_block(params, &format!("decoder.skip_blocks.{i}"), h)?
        } else {
            h.clone()
        });
    }
    let mut x = res_block(params, "decoder.bottleneck", &hidden[stages])?;
    for level in (1..=stages).rev() {
        x = up_block(
            params,
            &format!("decoder.up_blocks.{level}"),
            &x,
            &skips[level - 1],
        )?;
    }
    x = up_block(params, "decoder.up_blocks.0", &x, &input_skip)?;
    conv3d(
        &x,
        params.get("head.weight")?,
        Some(params.get("head.bias")?),
        Conv3dSpec::POINTWISE,
    )
}
