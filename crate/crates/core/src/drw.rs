//! Descriptor re-weighting: three learned scalar weights over the
//! per-level sub-descriptors, summed into one refined descriptor.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{l2_normalize, softmax, Linear, ParamBuilder};

pub const DEFAULT_HIDDEN: usize = 12;
pub const LEVELS: usize = 3;

/// Sub-descriptors stacked as `(B, 3, N)` with optional weights `(B, 3)`
/// and refined descriptor `(B, N)`.
#[derive(Clone, Debug)]
pub struct MultiScaleDescriptor {
    d: Tensor,
    pub weights: Option<Tensor>,
    pub refined: Option<Tensor>,
}

impl MultiScaleDescriptor {
    pub fn new(d: Tensor) -> Self {
        Self {
            d,
            weights: None,
            refined: None,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.d
    }

    /// Sub-descriptor `i` for every batch entry, `(B, N)`.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        Ok(self.d.narrow(1, i, 1)?.squeeze(1)?)
    }
}

#[derive(Clone, Debug)]
struct Stack {
    fc1: Linear,
    fc2: Linear,
}

impl Stack {
    fn new(pb: &mut ParamBuilder, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.sub("fc1"), LEVELS, hidden)?,
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, LEVELS)?,
        })
    }

    fn forward(&self, g: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(g)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct DrwParams {
    avg: Stack,
    max: Stack,
    /// Feed the max statistic to both stacks.
    pub max_pool_weights: bool,
    /// L2-normalize the refined descriptor.
    pub normalize: bool,
}

impl DrwParams {
    pub fn new(pb: &mut ParamBuilder, hidden: usize) -> Result<Self> {
        Ok(Self {
            avg: Stack::new(&mut pb.sub("avg"), hidden)?,
            max: Stack::new(&mut pb.sub("max"), hidden)?,
            max_pool_weights: false,
            normalize: true,
        })
    }

    /// `(fc1, fc2)` of the average-path and max-path stacks.
    pub fn layers(&self) -> [(&Linear, &Linear); 2] {
        [(&self.avg.fc1, &self.avg.fc2), (&self.max.fc1, &self.max.fc2)]
    }
}

/// Row means and maxima of `(B, 3, N)`, each `(B, 3)`.
pub fn global_stats(d: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, l, n) = d.dims3()?;
    if l != LEVELS || n == 0 {
        return Err(shape_err!("expected (B, 3, N>0) descriptors, got {:?}", d.dims()));
    }
    Ok((d.mean(D::Minus1)?, d.max(D::Minus1)?))
}

/// Softmax-normalized level weights `(B, 3)`.
pub fn compute_weights(g_avg: &Tensor, g_max: &Tensor, params: &DrwParams) -> Result<Tensor> {
    let first = if params.max_pool_weights { g_max } else { g_avg };
    let logits = (params.avg.forward(first)? + params.max.forward(g_max)?)?;
    softmax(&logits, 1)
}

/// `Σᵢ wᵢ·Dᵢ`, `(B, 3, N)` × `(B, 3)` → `(B, N)`; optionally unit-normalized.
pub fn reweight(d: &Tensor, w: &Tensor, normalize: bool) -> Result<Tensor> {
    let (b, l, _) = d.dims3()?;
    if w.dims() != [b, l] || l != LEVELS {
        return Err(shape_err!("weights {:?} do not match descriptors {:?}", w.dims(), d.dims()));
    }
    let out = d.broadcast_mul(&w.unsqueeze(2)?)?.sum(1)?;
    if normalize {
        l2_normalize(&out, 1)
    } else {
        Ok(out)
    }
}

/// Full head: statistics, weights and the refined descriptor.
pub fn drw_forward(desc: MultiScaleDescriptor, params: &DrwParams) -> Result<MultiScaleDescriptor> {
    let (g_avg, g_max) = global_stats(desc.tensor())?;
    let w = compute_weights(&g_avg, &g_max, params)?;
    let refined = reweight(desc.tensor(), &w, params.normalize)?;
    Ok(MultiScaleDescriptor {
        d: desc.d,
        weights: Some(w),
        refined: Some(refined),
    })
}
