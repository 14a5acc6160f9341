//! Parameter registry and the small set of layers the network is built from.

use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    /// Buffers (batch-norm running statistics) are saved but not optimized.
    pub trainable: bool,
}

/// Shared, ordered registry of every variable in a model.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Arc<Mutex<Vec<ParamEntry>>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: Arc::new(Mutex::new(Vec::new())),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn entries(&self) -> MutexGuard<'_, Vec<ParamEntry>> {
        self.entries.lock().expect("parameter registry poisoned")
    }

    pub fn trainable(&self) -> Vec<ParamEntry> {
        self.entries().iter().filter(|e| e.trainable).cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries().iter().find(|e| e.name == name).map(|e| e.var.clone())
    }

    pub fn num_trainable(&self) -> usize {
        self.entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Set every variable (including buffers) to zero.
    pub fn zero_all(&self) -> Result<()> {
        for e in self.entries().iter() {
            e.var.set(&e.var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Flat f64 copies of every variable, in registration order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.entries()
            .iter()
            .map(|e| {
                let v = e.var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((e.name.clone(), v))
            })
            .collect()
    }

    /// Detached deep copies, restorable with [`ParamStore::restore_tensors`].
    pub fn snapshot_tensors(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .entries()
            .iter()
            .map(|e| e.var.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore_tensors(&self, saved: &[Tensor]) -> Result<()> {
        let entries = self.entries();
        if saved.len() != entries.len() {
            return Err(shape_err!("snapshot has {} tensors, store has {}", saved.len(), entries.len()));
        }
        for (e, t) in entries.iter().zip(saved) {
            e.var.set(t)?;
        }
        Ok(())
    }

    fn register(&self, name: String, tensor: Tensor, trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        let mut entries = self.entries();
        if entries.iter().any(|e| e.name == name) {
            return Err(shape_err!("duplicate parameter name '{name}'"));
        }
        entries.push(ParamEntry {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He/Kaiming normal with the given fan-in.
    He { fan_in: usize },
    Uniform { bound: f64 },
    Normal { std: f64 },
}

/// Hierarchical builder: names are dot-joined prefixes.
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            prefix: String::new(),
            rng,
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
            rng: self.rng,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn values(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(self.rng)).collect()
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| normal.sample(self.rng)).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        }
    }

    fn make(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let n = shape.iter().product();
        let data = self.values(n, init);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.register(self.full_name(name), t, trainable)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.make(name, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.make(name, shape, init, false)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 0.5 * (tanh(x/2) + 1) stays finite for large |x|.
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Normalize to unit L2 norm along `dim`; all-zero slices stay zero.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.param("weight", &[out_ch, in_ch, kernel, kernel], Init::He { fan_in })?;
        let bias = if bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Some(pb.param("bias", &[out_ch], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(shape_err!(
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
    /// Always normalize with running statistics, also while training.
    pub frozen: bool,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, channels: usize, frozen: bool) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[channels], Init::Ones)?,
            beta: pb.param("beta", &[channels], Init::Zeros)?,
            running_mean: pb.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: pb.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
            frozen,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.dim(0)? {
            return Err(shape_err!("batch-norm expects {} channels, got {c}", self.gamma.dim(0)?));
        }
        let as4 = |t: &Tensor| t.reshape((1, c, 1, 1));
        let (mean, var) = if mode == Mode::Train && !self.frozen {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (as4(&self.running_mean)?, as4(&self.running_var)?)
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&as4(&self.gamma)?)?
            .broadcast_add(&as4(&self.beta)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", &[out_dim, in_dim], Init::Uniform { bound })?,
            bias: pb.param("bias", &[out_dim], Init::Uniform { bound })?,
        })
    }

    /// `x`: `(batch, in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = self.weight.dim(1)?;
        if x.dim(D::Minus1)? != in_dim {
            return Err(shape_err!("linear layer expects {in_dim} inputs, got {:?}", x.dims()));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// ResNet basic block: two 3×3 convolutions with batch norm and a shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        frozen_bn: bool,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(&mut pb.sub("conv1"), in_ch, out_ch, 3, stride, 1, false)?;
        let bn1 = BatchNorm2d::new(&mut pb.sub("bn1"), out_ch, frozen_bn)?;
        let conv2 = Conv2d::new(&mut pb.sub("conv2"), out_ch, out_ch, 3, 1, 1, false)?;
        let bn2 = BatchNorm2d::new(&mut pb.sub("bn2"), out_ch, frozen_bn)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let mut ds = pb.sub("downsample");
            Some((
                Conv2d::new(&mut ds.sub("conv"), in_ch, out_ch, 1, stride, 0, false)?,
                BatchNorm2d::new(&mut ds.sub("bn"), out_ch, frozen_bn)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

/// A run of residual blocks; the first one may change stride and width.
#[derive(Clone, Debug)]
pub struct ResStage {
    blocks: Vec<ResBlock>,
}

impl ResStage {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        blocks: usize,
        stride: usize,
        frozen_bn: bool,
    ) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|i| {
                let (cin, s) = if i == 0 { (in_ch, stride) } else { (out_ch, 1) };
                ResBlock::new(&mut pb.sub(&format!("block{i}")), cin, out_ch, s, frozen_bn)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

/// Fixed 1-D interpolation matrix `(2n, n)` for ×2 bilinear upsampling with
/// half-pixel centers, edges clamped.
fn bilinear_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; 2 * n * n];
    for o in 0..2 * n {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        m[o * n + i0] += 1.0 - f;
        m[o * n + i1] += f;
    }
    m
}

pub fn upsample2x(x: &Tensor, method: Upsample) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    match method {
        Upsample::Nearest => Ok(x.upsample_nearest2d(2 * h, 2 * w)?),
        Upsample::Bilinear => {
            let dev = x.device();
            let mh = Tensor::from_vec(bilinear_matrix(h), (2 * h, h), dev)?.to_dtype(x.dtype())?;
            let mw = Tensor::from_vec(bilinear_matrix(w), (2 * w, w), dev)?.to_dtype(x.dtype())?;
            // Width: (b,c,h,w) x (w,2w); height: (2h,h) x (b,c,h,2w).
            let y = x.reshape((b * c * h, w))?.matmul(&mw.t()?)?;
            let y = y.reshape((b * c, h, 2 * w))?;
            let y = mh.unsqueeze(0)?.broadcast_as((b * c, 2 * h, h))?.contiguous()?.matmul(&y)?;
            Ok(y.reshape((b, c, 2 * h, 2 * w))?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(DType::F64), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn builder_names_are_hierarchical() {
        let (s, mut rng) = store();
        let mut pb = ParamBuilder::new(&s, &mut rng);
        let _ = Conv2d::new(&mut pb.sub("enc").sub("conv1"), 1, 4, 3, 1, 1, true).unwrap();
        let names: Vec<String> = s.entries().iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, vec!["enc.conv1.weight", "enc.conv1.bias"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (s, mut rng) = store();
        let mut pb = ParamBuilder::new(&s, &mut rng);
        pb.param("w", &[1], Init::Zeros).unwrap();
        assert!(pb.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn residual_stage_shapes() {
        let (s, mut rng) = store();
        let mut pb = ParamBuilder::new(&s, &mut rng);
        let stage = ResStage::new(&mut pb, 4, 8, 2, 2, false).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        let y = stage.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[2, 8, 4, 4]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks_stats() {
        let (s, mut rng) = store();
        let mut pb = ParamBuilder::new(&s, &mut rng);
        let bn = BatchNorm2d::new(&mut pb, 3, false).unwrap();
        let x = (Tensor::randn(0f64, 2.0, (4, 3, 5, 5), &Device::Cpu).unwrap() + 3.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-9);
        let rm = bn.running_mean.to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| (v - 0.3).abs() < 0.1), "{rm:?}");
        let before = bn.running_mean.to_vec1::<f64>().unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, bn.running_mean.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -5.0], [0.1, 0.2, 0.3]], &Device::Cpu).unwrap();
        let p = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_matches_nearest_shape() {
        let x = Tensor::ones((1, 2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let a = upsample2x(&x, Upsample::Bilinear).unwrap();
        let b = upsample2x(&x, Upsample::Nearest).unwrap();
        assert_eq!(a.dims(), b.dims());
        let v = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_normalize_stays_zero() {
        let x = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let y = l2_normalize(&x, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
