//! Trainable VLAD pooling.
//!
//! Every spatial position of a feature map is a local feature `x ∈ R^C`.
//! Soft assignment `a_k(x) = softmax_k(w_k·x + b_k)` weights the residuals
//! to each center: `V[k] = Σ_x a_k(x)(x − c_k)`. Rows of `V` are
//! L2-normalized (intra-normalization), then the flattened `K·C` vector is.

use candle_core::{Tensor, Var};

use crate::drw::MultiScaleDescriptor;
use crate::error::{shape_err, Result};
use crate::nn::{l2_normalize, softmax, Init, ParamBuilder};

#[derive(Clone, Debug)]
pub struct VladParams {
    /// `(K, C)`
    pub centers: Var,
    /// `(K, C)`
    pub assign_weight: Var,
    /// `(K,)`
    pub assign_bias: Var,
    pub intra_norm: bool,
}

impl VladParams {
    /// Random-normal centers with assignment weights derived from them.
    pub fn new(pb: &mut ParamBuilder, clusters: usize, channels: usize, intra_norm: bool) -> Result<Self> {
        if clusters == 0 || channels == 0 {
            return Err(shape_err!("VLAD needs at least one cluster and channel"));
        }
        let centers = pb.param("centers", &[clusters, channels], Init::Normal { std: 1.0 })?;
        let assign_weight = pb.param("assign_weight", &[clusters, channels], Init::Zeros)?;
        let assign_bias = pb.param("assign_bias", &[clusters], Init::Zeros)?;
        let params = Self {
            centers,
            assign_weight,
            assign_bias,
            intra_norm,
        };
        let c = params.centers.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        params.set_centers(&c, 1.0)?;
        Ok(params)
    }

    pub fn clusters(&self) -> usize {
        self.centers.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.centers.dims()[1]
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters() * self.channels()
    }

    /// Install centers (row-major `K×C`) and the matching assignment
    /// projection `w_k = 2α c_k`, `b_k = −α‖c_k‖²`.
    pub fn set_centers(&self, centers: &[f64], alpha: f64) -> Result<()> {
        let (k, c) = (self.clusters(), self.channels());
        if centers.len() != k * c {
            return Err(shape_err!("expected {k}x{c} centers, got {} values", centers.len()));
        }
        let dev = self.centers.device();
        let dtype = self.centers.dtype();
        let weight: Vec<f64> = centers.iter().map(|v| 2.0 * alpha * v).collect();
        let bias: Vec<f64> = centers
            .chunks(c)
            .map(|row| -alpha * row.iter().map(|v| v * v).sum::<f64>())
            .collect();
        self.centers.set(&Tensor::from_vec(centers.to_vec(), (k, c), dev)?.to_dtype(dtype)?)?;
        self.assign_weight.set(&Tensor::from_vec(weight, (k, c), dev)?.to_dtype(dtype)?)?;
        self.assign_bias.set(&Tensor::from_vec(bias, k, dev)?.to_dtype(dtype)?)?;
        Ok(())
    }
}

/// `local`: `(B, C, P)` → soft assignments `(B, P, K)`.
pub fn soft_assignment(local: &Tensor, params: &VladParams) -> Result<Tensor> {
    let (b, c, p) = local.dims3()?;
    if c != params.channels() {
        return Err(shape_err!(
            "VLAD layer has {}-dimensional centers, features have {c} channels",
            params.channels()
        ));
    }
    let x = local.transpose(1, 2)?.contiguous()?.reshape((b * p, c))?;
    let logits = x
        .matmul(&params.assign_weight.t()?)?
        .broadcast_add(&params.assign_bias)?;
    softmax(&logits.reshape((b, p, params.clusters()))?, 2)
}

/// Aggregate local features `(B, C, P)` into `(B, K·C)` descriptors.
pub fn vlad_aggregate_local(local: &Tensor, params: &VladParams) -> Result<Tensor> {
    let (b, c, _) = local.dims3()?;
    let k = params.clusters();
    let assign = soft_assignment(local, params)?;
    let x = local.transpose(1, 2)?.contiguous()?;
    let weighted = assign.transpose(1, 2)?.contiguous()?.matmul(&x)?;
    let mass = assign.sum(1)?.unsqueeze(2)?;
    let offset = mass.broadcast_mul(&params.centers.unsqueeze(0)?)?;
    let mut v = (weighted - offset)?;
    if params.intra_norm {
        v = l2_normalize(&v, 2)?;
    }
    l2_normalize(&v.reshape((b, k * c))?, 1)
}

/// Aggregate a feature map `(B, C, H, W)` into `(B, K·C)` descriptors.
pub fn vlad_aggregate(features: &Tensor, params: &VladParams) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    vlad_aggregate_local(&features.reshape((b, c, h * w))?, params)
}

/// Stack three `(B, N)` sub-descriptors into a `(B, 3, N)` descriptor.
pub fn concat_descriptors(d1: &Tensor, d2: &Tensor, d3: &Tensor) -> Result<MultiScaleDescriptor> {
    if d1.dims() != d2.dims() || d1.dims() != d3.dims() {
        return Err(shape_err!(
            "sub-descriptor shapes differ: {:?}, {:?}, {:?}",
            d1.dims(),
            d2.dims(),
            d3.dims()
        ));
    }
    let d = match d1.rank() {
        1 => Tensor::stack(&[d1, d2, d3], 0)?.unsqueeze(0)?,
        2 => Tensor::stack(&[d1, d2, d3], 1)?,
        r => return Err(shape_err!("sub-descriptors must be rank 1 or 2, got rank {r}")),
    };
    Ok(MultiScaleDescriptor::new(d))
}

/// Flatten each `(B, C, Hᵢ, Wᵢ)` map to `(B, C, Hᵢ·Wᵢ)` and join along positions.
/// Column `j` maps back to a level and position via [`flat_position`].
pub fn flatten_concat(levels: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = levels.first() else {
        return Err(shape_err!("flatten_concat needs at least one feature map"));
    };
    let (b, c, _, _) = first.dims4()?;
    let mut flat = Vec::with_capacity(levels.len());
    for m in levels {
        let (bm, cm, h, w) = m.dims4()?;
        if (bm, cm) != (b, c) {
            return Err(shape_err!("flatten_concat channel mismatch: {:?} vs {:?}", first.dims(), m.dims()));
        }
        flat.push(m.reshape((b, c, h * w))?);
    }
    Ok(Tensor::cat(&flat, 2)?)
}

/// Map a flattened column back to `(level, y, x)` given level sizes `(H, W)`.
pub fn flat_position(sizes: &[(usize, usize)], mut column: usize) -> Option<(usize, usize, usize)> {
    for (level, &(h, w)) in sizes.iter().enumerate() {
        if column < h * w {
            return Some((level, column / w, column % w));
        }
        column -= h * w;
    }
    None
}
