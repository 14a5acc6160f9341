//! Channel + spatial attention gate.
//!
//! Channel gate: `σ(mlp(avgpool(X)) + mlp(maxpool(X)))` with a shared
//! `C → C/r → C` MLP. Spatial gate: `σ(conv7x7([mean_c(X); max_c(X)]))`.
//! Both gates multiply the features, channel gate first.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Error, Result};
use crate::nn::{sigmoid, Conv2d, Linear, ParamBuilder};

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    pub channels: usize,
}

/// Effective reduction ratio: `r` clamped so the hidden layer keeps ≥ 1 unit.
pub fn effective_reduction(channels: usize, reduction: usize) -> Result<usize> {
    let r = reduction.clamp(1, channels.max(1));
    if channels == 0 || !channels.is_multiple_of(r) {
        return Err(Error::Config(format!(
            "attention reduction {r} does not divide {channels} channels"
        )));
    }
    Ok(r)
}

impl AttentionParams {
    pub fn new(pb: &mut ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels / effective_reduction(channels, reduction)?;
        let pad = SPATIAL_KERNEL / 2;
        Ok(Self {
            fc1: Linear::new(&mut pb.sub("fc1"), channels, hidden)?,
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, channels)?,
            spatial: Conv2d::new(&mut pb.sub("spatial"), 2, 1, SPATIAL_KERNEL, 1, pad, true)?,
            channels,
        })
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }
}

/// Attention layer that can be switched off (identity) for ablations.
#[derive(Clone, Debug)]
pub enum Attention {
    Enabled(AttentionParams),
    Identity,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, channels: usize, reduction: usize, enabled: bool) -> Result<Self> {
        if enabled {
            Ok(Attention::Enabled(AttentionParams::new(pb, channels, reduction)?))
        } else {
            Ok(Attention::Identity)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Attention::Enabled(p) => attend(x, p),
            Attention::Identity => Ok(x.clone()),
        }
    }
}

/// `x`: `(batch, C, H, W)`; output has the same shape.
pub fn attend(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != params.channels {
        return Err(shape_err!(
            "attention layer built for {} channels, got {c}",
            params.channels
        ));
    }
    let flat = x.reshape((b, c, h * w))?;
    let avg = flat.mean(D::Minus1)?;
    let max = flat.max(D::Minus1)?;
    let channel_gate = sigmoid(&(params.mlp(&avg)? + params.mlp(&max)?)?)?;
    let x = x.broadcast_mul(&channel_gate.reshape((b, c, 1, 1))?)?;

    let pooled = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
    let spatial_gate = sigmoid(&params.spatial.forward(&pooled)?)?;
    Ok(x.broadcast_mul(&spatial_gate)?)
}
