//! Two-stream shallow encoder: frames and event frames are encoded by
//! separate networks and fused by channel concatenation (frame channels first).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Mode, ParamBuilder, ResStage};

/// Which input streams feed the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Fused,
    FrameOnly,
    EventOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub reduction: usize,
    pub attention: bool,
    pub frozen_bn: bool,
}

/// `Conv7x7/2 → Attn → MaxPool/2 → ResBlock×n → Attn → BN → ReLU`.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv1: Conv2d,
    attn1: Attention,
    blocks: ResStage,
    attn2: Attention,
    bn: BatchNorm2d,
    in_channels: usize,
    width: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, spec: EncoderSpec) -> Result<Self> {
        let w = spec.width;
        Ok(Self {
            conv1: Conv2d::new(&mut pb.sub("conv1"), spec.in_channels, w, 7, 2, 3, false)?,
            attn1: Attention::new(&mut pb.sub("attn1"), w, spec.reduction, spec.attention)?,
            blocks: ResStage::new(&mut pb.sub("layer1"), w, w, spec.blocks, 1, spec.frozen_bn)?,
            attn2: Attention::new(&mut pb.sub("attn2"), w, spec.reduction, spec.attention)?,
            bn: BatchNorm2d::new(&mut pb.sub("bn"), w, spec.frozen_bn)?,
            in_channels: spec.in_channels,
            width: w,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.width
    }

    /// `x`: `(batch, in_channels, H, W)` with `H`, `W` divisible by 4.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(shape_err!("encoder expects {} input channels, got {c}", self.in_channels));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!("encoder input {h}x{w} is not divisible by 4"));
        }
        let y = self.conv1.forward(x)?;
        let y = self.attn1.forward(&y)?.max_pool2d(2)?;
        let y = self.blocks.forward(&y, mode)?;
        let y = self.attn2.forward(&y)?;
        Ok(self.bn.forward(&y, mode)?.relu()?)
    }
}

/// Concatenate frame and event features along channels.
pub fn fuse(frame_features: &Tensor, event_features: &Tensor) -> Result<Tensor> {
    let (bf, _, hf, wf) = frame_features.dims4()?;
    let (be, _, he, we) = event_features.dims4()?;
    if (bf, hf, wf) != (be, he, we) {
        return Err(shape_err!(
            "cannot fuse features of shape {:?} and {:?}",
            frame_features.dims(),
            event_features.dims()
        ));
    }
    Ok(Tensor::cat(&[frame_features, event_features], 1)?)
}

#[derive(Clone, Debug)]
pub struct TwoStreamEncoder {
    pub frame: Option<Encoder>,
    pub event: Option<Encoder>,
}

impl TwoStreamEncoder {
    pub fn new(
        pb: &mut ParamBuilder,
        modality: Modality,
        frame_channels: usize,
        spec: EncoderSpec,
    ) -> Result<Self> {
        let frame = match modality {
            Modality::EventOnly => None,
            _ => Some(Encoder::new(
                &mut pb.sub("frame_encoder"),
                EncoderSpec {
                    in_channels: frame_channels,
                    ..spec
                },
            )?),
        };
        let event = match modality {
            Modality::FrameOnly => None,
            _ => Some(Encoder::new(
                &mut pb.sub("event_encoder"),
                EncoderSpec {
                    in_channels: 2,
                    ..spec
                },
            )?),
        };
        Ok(Self { frame, event })
    }

    pub fn out_channels(&self) -> usize {
        self.frame.as_ref().map_or(0, Encoder::out_channels)
            + self.event.as_ref().map_or(0, Encoder::out_channels)
    }

    pub fn encode_frame(&self, frames: &Tensor, mode: Mode) -> Result<Tensor> {
        self.frame
            .as_ref()
            .ok_or_else(|| Error::Config("frame encoder is disabled".into()))?
            .forward(frames, mode)
    }

    pub fn encode_events(&self, event_frames: &Tensor, mode: Mode) -> Result<Tensor> {
        self.event
            .as_ref()
            .ok_or_else(|| Error::Config("event encoder is disabled".into()))?
            .forward(event_frames, mode)
    }

    /// Hybrid feature from whichever streams are enabled.
    pub fn forward(&self, frames: &Tensor, event_frames: &Tensor, mode: Mode) -> Result<Tensor> {
        match (&self.frame, &self.event) {
            (Some(_), Some(_)) => fuse(
                &self.encode_frame(frames, mode)?,
                &self.encode_events(event_frames, mode)?,
            ),
            (Some(_), None) => self.encode_frame(frames, mode),
            (None, Some(_)) => self.encode_events(event_frames, mode),
            (None, None) => Err(Error::Config("both encoders disabled".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(width: usize) -> EncoderSpec {
        EncoderSpec {
            in_channels: 1,
            width,
            blocks: 1,
            reduction: 16,
            attention: true,
            frozen_bn: false,
        }
    }

    fn two_stream(modality: Modality, seed: u64) -> (ParamStore, TwoStreamEncoder) {
        let store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TwoStreamEncoder::new(&mut ParamBuilder::new(&store, &mut rng), modality, 1, spec(8)).unwrap();
        (store, enc)
    }

    #[test]
    fn stride_arithmetic() {
        let (_s, enc) = two_stream(Modality::Fused, 0);
        let f = Tensor::randn(0f64, 1.0, (2, 1, 32, 24), &Device::Cpu).unwrap();
        let e = Tensor::randn(0f64, 1.0, (2, 2, 32, 24), &Device::Cpu).unwrap();
        assert_eq!(enc.encode_frame(&f, Mode::Eval).unwrap().dims(), &[2, 8, 8, 6]);
        assert_eq!(enc.forward(&f, &e, Mode::Eval).unwrap().dims(), &[2, 16, 8, 6]);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let (_s, enc) = two_stream(Modality::Fused, 0);
        let e = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode_events(&e, Mode::Eval), Err(Error::Shape(_))));
        let f = Tensor::zeros((1, 1, 18, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode_frame(&f, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_puts_frame_channels_first() {
        let a = Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let h = fuse(&a, &b).unwrap();
        let ch = |t: &Tensor, c: usize| t.narrow(1, c, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ch(&h, 0), ch(&a, 0));
        assert_eq!(ch(&h, 3), ch(&b, 0));
        let bad = Tensor::randn(0f64, 1.0, (1, 3, 4, 2), &Device::Cpu).unwrap();
        assert!(matches!(fuse(&a, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let (store, enc) = two_stream(Modality::Fused, 1);
        // Zero every bias-like parameter; weights keep their random values.
        for e in store.entries().iter() {
            if e.name.ends_with("bias") || e.name.ends_with("beta") || e.name.ends_with("running_mean") {
                e.var.set(&e.var.zeros_like().unwrap()).unwrap();
            }
        }
        let f = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let e = Tensor::zeros((1, 2, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let y = enc.forward(&f, &e, Mode::Eval).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_modality_widths() {
        let (_s, enc) = two_stream(Modality::FrameOnly, 0);
        assert!(enc.event.is_none());
        assert_eq!(enc.out_channels(), 8);
        let f = Tensor::randn(0f64, 1.0, (1, 1, 16, 16), &Device::Cpu).unwrap();
        let e = Tensor::zeros((1, 2, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&f, &e, Mode::Eval).unwrap().dims(), &[1, 8, 4, 4]);
        let (_s, enc) = two_stream(Modality::EventOnly, 0);
        assert!(enc.encode_frame(&f, Mode::Eval).is_err());
        assert_eq!(enc.forward(&f, &e, Mode::Eval).unwrap().dims(), &[1, 8, 4, 4]);
    }
}
