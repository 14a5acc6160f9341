//! Multi-scale fusion: bottom-up residual stages and a top-down pathway
//! that fuses adjacent stages by concatenation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::error::{shape_err, Result};
use crate::nn::{upsample2x, BatchNorm2d, Conv2d, Mode, ParamBuilder, ResStage, Upsample};

#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub s1: Tensor,
    pub s2: Tensor,
    pub s3: Tensor,
}

/// `m1` is the coarsest level (8×8 at 256×256 input), `m3` the finest.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub m1: Tensor,
    pub m2: Tensor,
    pub m3: Tensor,
}

impl PyramidFeatures {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.m1, &self.m2, &self.m3]
    }
}

/// A single pyramid level, named by its resolution at 256×256 input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidLevel {
    /// M1, fed by S3.
    Coarse,
    /// M2, fed by S2.
    Mid,
    /// M3, fed by S1.
    Fine,
}

impl PyramidLevel {
    pub fn index(self) -> usize {
        match self {
            PyramidLevel::Coarse => 0,
            PyramidLevel::Mid => 1,
            PyramidLevel::Fine => 2,
        }
    }

    /// Side length at the reference 256×256 input.
    pub fn reference_resolution(self) -> usize {
        8 << self.index()
    }

    pub fn from_resolution(r: usize) -> Option<Self> {
        match r {
            8 => Some(PyramidLevel::Coarse),
            16 => Some(PyramidLevel::Mid),
            32 => Some(PyramidLevel::Fine),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stage2_channels: usize,
    pub stage3_channels: usize,
    pub stage2_blocks: usize,
    pub stage3_blocks: usize,
    pub reduction: usize,
    pub attention: bool,
    pub frozen_bn: bool,
}

/// `S1 = Attn(MaxPool(X))`, `S2 = Attn(Res2(S1))`, `S3 = Res3(S2)`.
#[derive(Clone, Debug)]
pub struct Backbone {
    attn_s1: Attention,
    stage2: ResStage,
    attn_s2: Attention,
    stage3: ResStage,
    spec: BackboneSpec,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, spec: BackboneSpec) -> Result<Self> {
        let BackboneSpec {
            in_channels: c1,
            stage2_channels: c2,
            stage3_channels: c3,
            ..
        } = spec;
        Ok(Self {
            attn_s1: Attention::new(&mut pb.sub("attn_s1"), c1, spec.reduction, spec.attention)?,
            stage2: ResStage::new(&mut pb.sub("layer3"), c1, c2, spec.stage2_blocks, 2, spec.frozen_bn)?,
            attn_s2: Attention::new(&mut pb.sub("attn_s2"), c2, spec.reduction, spec.attention)?,
            stage3: ResStage::new(&mut pb.sub("layer4"), c2, c3, spec.stage3_blocks, 2, spec.frozen_bn)?,
            spec,
        })
    }

    pub fn channels(&self) -> [usize; 3] {
        [self.spec.in_channels, self.spec.stage2_channels, self.spec.stage3_channels]
    }

    pub fn forward(&self, hybrid: &Tensor, mode: Mode) -> Result<StageFeatures> {
        let (_, c, h, w) = hybrid.dims4()?;
        if c != self.spec.in_channels {
            return Err(shape_err!("backbone expects {} channels, got {c}", self.spec.in_channels));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("backbone input {h}x{w} must be divisible by 8"));
        }
        let s1 = self.attn_s1.forward(&hybrid.max_pool2d(2)?)?;
        let s2 = self.attn_s2.forward(&self.stage2.forward(&s1, mode)?)?;
        let s3 = self.stage3.forward(&s2, mode)?;
        Ok(StageFeatures { s1, s2, s3 })
    }
}

pub fn backbone_stages(backbone: &Backbone, hybrid: &Tensor, mode: Mode) -> Result<StageFeatures> {
    backbone.forward(hybrid, mode)
}

/// 1×1 lateral projection followed by batch norm and ReLU.
#[derive(Clone, Debug)]
struct Lateral {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Lateral {
    fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, frozen_bn: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.sub("conv"), in_ch, out_ch, 1, 1, 0, true)?,
            bn: BatchNorm2d::new(&mut pb.sub("bn"), out_ch, frozen_bn)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Top-down step: `ReLU(BN(conv3x3([up2(coarser); conv1x1(stage)])))`.
#[derive(Clone, Debug)]
struct TopDown {
    lateral: Conv2d,
    fuse: Conv2d,
    bn: BatchNorm2d,
}

impl TopDown {
    fn new(pb: &mut ParamBuilder, stage_ch: usize, out_ch: usize, frozen_bn: bool) -> Result<Self> {
        Ok(Self {
            lateral: Conv2d::new(&mut pb.sub("lateral"), stage_ch, out_ch, 1, 1, 0, true)?,
            fuse: Conv2d::new(&mut pb.sub("fuse"), 2 * out_ch, out_ch, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(&mut pb.sub("bn"), out_ch, frozen_bn)?,
        })
    }

    fn forward(&self, coarser: &Tensor, stage: &Tensor, up: Upsample, mode: Mode) -> Result<Tensor> {
        let up = upsample2x(coarser, up)?;
        let lat = self.lateral.forward(stage)?;
        if up.dims()[2..] != lat.dims()[2..] {
            return Err(shape_err!(
                "top-down resolution mismatch: {:?} vs {:?}",
                up.dims(),
                lat.dims()
            ));
        }
        let cat = Tensor::cat(&[&up, &lat], 1)?;
        Ok(self.bn.forward(&self.fuse.forward(&cat)?, mode)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct LateralFusion {
    top: Lateral,
    mid: TopDown,
    fine: TopDown,
    upsample: Upsample,
    out_channels: usize,
}

impl LateralFusion {
    pub fn new(
        pb: &mut ParamBuilder,
        stage_channels: [usize; 3],
        out_channels: usize,
        upsample: Upsample,
        frozen_bn: bool,
    ) -> Result<Self> {
        let [c1, c2, c3] = stage_channels;
        Ok(Self {
            top: Lateral::new(&mut pb.sub("m1"), c3, out_channels, frozen_bn)?,
            mid: TopDown::new(&mut pb.sub("m2"), c2, out_channels, frozen_bn)?,
            fine: TopDown::new(&mut pb.sub("m3"), c1, out_channels, frozen_bn)?,
            upsample,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, stages: &StageFeatures, mode: Mode) -> Result<PyramidFeatures> {
        let m1 = self.top.forward(&stages.s3, mode)?;
        let m2 = self.mid.forward(&m1, &stages.s2, self.upsample, mode)?;
        let m3 = self.fine.forward(&m2, &stages.s1, self.upsample, mode)?;
        Ok(PyramidFeatures { m1, m2, m3 })
    }
}

pub fn lateral_fuse(fusion: &LateralFusion, stages: &StageFeatures, mode: Mode) -> Result<PyramidFeatures> {
    fusion.forward(stages, mode)
}

/// Single-level ablation: one lateral projection, no cross-stage fusion.
#[derive(Clone, Debug)]
pub struct SingleLevel {
    level: PyramidLevel,
    lateral: Lateral,
}

impl SingleLevel {
    pub fn new(
        pb: &mut ParamBuilder,
        level: PyramidLevel,
        stage_channels: [usize; 3],
        out_channels: usize,
        frozen_bn: bool,
    ) -> Result<Self> {
        // Coarse reads S3, fine reads S1.
        let in_ch = stage_channels[2 - level.index()];
        Ok(Self {
            level,
            lateral: Lateral::new(&mut pb.sub("single"), in_ch, out_channels, frozen_bn)?,
        })
    }

    pub fn level(&self) -> PyramidLevel {
        self.level
    }

    pub fn forward(&self, stages: &StageFeatures, mode: Mode) -> Result<Tensor> {
        let stage = match self.level {
            PyramidLevel::Coarse => &stages.s3,
            PyramidLevel::Mid => &stages.s2,
            PyramidLevel::Fine => &stages.s1,
        };
        self.lateral.forward(stage, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(c: usize) -> BackboneSpec {
        BackboneSpec {
            in_channels: c,
            stage2_channels: 2 * c,
            stage3_channels: 4 * c,
            stage2_blocks: 1,
            stage3_blocks: 1,
            reduction: 4,
            attention: true,
            frozen_bn: false,
        }
    }

    fn build(seed: u64, up: Upsample) -> (ParamStore, Backbone, LateralFusion) {
        let store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&store, &mut rng);
        let bb = Backbone::new(&mut pb.sub("backbone"), spec(8)).unwrap();
        let lf = LateralFusion::new(&mut pb.sub("fusion"), bb.channels(), 12, up, false).unwrap();
        (store, bb, lf)
    }

    #[test]
    fn stage_and_pyramid_shapes() {
        for up in [Upsample::Nearest, Upsample::Bilinear] {
            let (_s, bb, lf) = build(0, up);
            let x = Tensor::randn(0f64, 1.0, (2, 8, 16, 16), &Device::Cpu).unwrap();
            let st = bb.forward(&x, Mode::Eval).unwrap();
            assert_eq!(st.s1.dims(), &[2, 8, 8, 8]);
            assert_eq!(st.s2.dims(), &[2, 16, 4, 4]);
            assert_eq!(st.s3.dims(), &[2, 32, 2, 2]);
            let p = lf.forward(&st, Mode::Eval).unwrap();
            assert_eq!(p.m1.dims(), &[2, 12, 2, 2]);
            assert_eq!(p.m2.dims(), &[2, 12, 4, 4]);
            assert_eq!(p.m3.dims(), &[2, 12, 8, 8]);
        }
    }

    #[test]
    fn coarsest_level_ignores_finer_stages() {
        let (_s, bb, lf) = build(2, Upsample::Nearest);
        let x = Tensor::randn(0f64, 1.0, (1, 8, 16, 16), &Device::Cpu).unwrap();
        let st = bb.forward(&x, Mode::Eval).unwrap();
        let a = lf.forward(&st, Mode::Eval).unwrap();
        let perturbed = StageFeatures {
            s1: (st.s1.clone() + 1.0).unwrap(),
            s2: (st.s2.clone() * -3.0).unwrap(),
            s3: st.s3.clone(),
        };
        let b = lf.forward(&perturbed, Mode::Eval).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v(&a.m1), v(&b.m1));
        assert_ne!(v(&a.m3), v(&b.m3));
    }

    #[test]
    fn wrong_width_rejected() {
        let (_s, bb, _) = build(0, Upsample::Nearest);
        let x = Tensor::zeros((1, 6, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(bb.forward(&x, Mode::Eval).is_err());
    }

    #[test]
    fn single_level_resolutions() {
        let store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&store, &mut rng);
        let bb = Backbone::new(&mut pb.sub("backbone"), spec(8)).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 8, 16, 16), &Device::Cpu).unwrap();
        let st = bb.forward(&x, Mode::Eval).unwrap();
        for (level, side) in [(PyramidLevel::Coarse, 2), (PyramidLevel::Mid, 4), (PyramidLevel::Fine, 8)] {
            let head = SingleLevel::new(&mut pb.sub(&format!("{level:?}")), level, bb.channels(), 12, false).unwrap();
            assert_eq!(head.forward(&st, Mode::Eval).unwrap().dims(), &[1, 12, side, side]);
        }
    }
}
