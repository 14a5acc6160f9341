//! The full network: two-stream encoder, backbone, pyramid fusion, VLAD
//! pooling and the re-weighting head, plus the ablation switches.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Position, Traverse};
use crate::drw::{drw_forward, DrwParams, MultiScaleDescriptor};
use crate::error::{shape_err, Error, Result};
use crate::events::{events_to_frame, Normalization};
use crate::msf::{Backbone, BackboneSpec, LateralFusion, PyramidFeatures, PyramidLevel, SingleLevel, StageFeatures};
use crate::nn::{Mode, ParamBuilder, ParamStore, Upsample};
use crate::raster::{resample_area, Fold};
use crate::tsfe::{EncoderSpec, Modality, TwoStreamEncoder};
use crate::vlad::{concat_descriptors, flatten_concat, vlad_aggregate, vlad_aggregate_local, VladParams};

/// How pyramid features become a descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Head {
    /// One VLAD per level, re-weighted.
    #[default]
    MultiScale,
    /// VLAD over one level only.
    SingleScale(PyramidLevel),
    /// All levels flattened along positions into one VLAD.
    FlattenConcat,
}

/// Ablation switches. Parsed from comma-separated names such as
/// `frame_only,no_attention` or `single_scale:16`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub modality: Modality,
    pub attention: bool,
    #[serde(with = "head_serde")]
    pub head: Head,
    pub max_pool_weights: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            modality: Modality::Fused,
            attention: true,
            head: Head::MultiScale,
            max_pool_weights: false,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::MultiScale => f.write_str("multi_scale"),
            Head::SingleScale(l) => write!(f, "single_scale:{}", l.reference_resolution()),
            Head::FlattenConcat => f.write_str("flatten_concat"),
        }
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_scale" => Ok(Head::MultiScale),
            "flatten_concat" => Ok(Head::FlattenConcat),
            _ => {
                let level = s
                    .strip_prefix("single_scale:")
                    .and_then(|r| r.parse().ok())
                    .and_then(PyramidLevel::from_resolution)
                    .ok_or_else(|| Error::Config(format!("unknown head '{s}' (single_scale takes 8, 16 or 32)")))?;
                Ok(Head::SingleScale(level))
            }
        }
    }
}

mod head_serde {
    use super::Head;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &Head, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(h)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Head, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named presets, one per row of the ablation study.
pub const ABLATION_PRESETS: &[(&str, &str)] = &[
    ("frame_only", "frame_only"),
    ("event_only", "event_only"),
    ("full", ""),
    ("single_scale_8_no_attention", "single_scale:8,no_attention"),
    ("single_scale_8", "single_scale:8"),
    ("single_scale_16_no_attention", "single_scale:16,no_attention"),
    ("single_scale_16", "single_scale:16"),
    ("single_scale_32_no_attention", "single_scale:32,no_attention"),
    ("single_scale_32", "single_scale:32"),
    ("multi_scale_no_attention", "no_attention"),
    ("flatten_concat", "flatten_concat"),
];

impl Ablation {
    /// Parse a comma-separated switch list; rejects contradictory combinations.
    pub fn from_switches(spec: &str) -> Result<Self> {
        let mut a = Ablation::default();
        let mut head_set = false;
        let mut modality_set = false;
        for sw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match sw {
                "frame_only" | "event_only" => {
                    if modality_set {
                        return Err(Error::Config("frame_only and event_only are mutually exclusive".into()));
                    }
                    modality_set = true;
                    a.modality = if sw == "frame_only" { Modality::FrameOnly } else { Modality::EventOnly };
                }
                "no_attention" => a.attention = false,
                "max_pool_weights" => a.max_pool_weights = true,
                "full" => {}
                other => {
                    let head: Head = other
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown ablation switch '{other}'")))?;
                    if head_set {
                        return Err(Error::Config("only one of single_scale / flatten_concat may be given".into()));
                    }
                    head_set = true;
                    a.head = head;
                }
            }
        }
        a.validate()?;
        Ok(a)
    }

    /// Look up a named preset, falling back to parsing switches.
    pub fn preset(name: &str) -> Result<Self> {
        match ABLATION_PRESETS.iter().find(|(n, _)| *n == name) {
            Some((_, switches)) => Ablation::from_switches(switches),
            None => Ablation::from_switches(name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_pool_weights && self.head != Head::MultiScale {
            return Err(Error::Config(
                "max_pool_weights only affects the re-weighting head; it cannot be combined with single_scale or flatten_concat".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder width `w`; the backbone uses `2w`/`4w`/`8w`, pyramid `4w`.
    pub width: usize,
    /// Pyramid channel count; `None` means `4·width`.
    pub pyramid_channels: Option<usize>,
    pub frame_channels: usize,
    pub encoder_blocks: usize,
    pub stage2_blocks: usize,
    pub stage3_blocks: usize,
    pub clusters: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub reduction: usize,
    pub drw_hidden: usize,
    pub upsample: Upsample,
    pub intra_norm: bool,
    pub final_norm: bool,
    pub frozen_bn: bool,
    pub event_normalization: Normalization,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            pyramid_channels: None,
            frame_channels: 1,
            encoder_blocks: 3,
            stage2_blocks: 6,
            stage3_blocks: 3,
            clusters: 128,
            input_width: 256,
            input_height: 256,
            reduction: 16,
            drw_hidden: 12,
            upsample: Upsample::Nearest,
            intra_norm: true,
            final_norm: true,
            frozen_bn: false,
            event_normalization: Normalization::Max,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn pyramid(&self) -> usize {
        self.pyramid_channels.unwrap_or(4 * self.width)
    }

    pub fn hybrid_channels(&self) -> usize {
        match self.ablation.modality {
            Modality::Fused => 2 * self.width,
            _ => self.width,
        }
    }

    /// Length of the final descriptor.
    pub fn descriptor_len(&self) -> usize {
        self.clusters * self.pyramid()
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.width == 0 || self.clusters == 0 {
            return Err(Error::Config("width and clusters must be positive".into()));
        }
        if !self.input_width.is_multiple_of(32) || !self.input_height.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {}x{} must be a multiple of 32",
                self.input_width, self.input_height
            )));
        }
        if !matches!(self.frame_channels, 1 | 3) {
            return Err(Error::Config("frame_channels must be 1 or 3".into()));
        }
        Ok(())
    }
}

/// Intermediate activations, for inspection and cluster initialization.
pub struct Features {
    pub hybrid: Tensor,
    pub stages: StageFeatures,
    pub pyramid: Option<PyramidFeatures>,
    /// Single-level head output.
    pub single: Option<Tensor>,
}

pub struct Output {
    /// `(B, N)` final descriptor.
    pub descriptor: Tensor,
    pub multi: Option<MultiScaleDescriptor>,
}

#[derive(Clone, Debug)]
enum HeadParts {
    MultiScale { fusion: LateralFusion, vlad: [VladParams; 3], drw: DrwParams },
    Single { level: SingleLevel, vlad: VladParams },
    Flatten { fusion: LateralFusion, vlad: VladParams },
}

pub struct FusionVpr {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: TwoStreamEncoder,
    backbone: Backbone,
    head: HeadParts,
}

impl FusionVpr {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&store, &mut rng);
        let w = config.width;
        let attention = config.ablation.attention;
        let encoder = TwoStreamEncoder::new(
            &mut pb.sub("tsfe"),
            config.ablation.modality,
            config.frame_channels,
            EncoderSpec {
                in_channels: config.frame_channels,
                width: w,
                blocks: config.encoder_blocks,
                reduction: config.reduction,
                attention,
                frozen_bn: config.frozen_bn,
            },
        )?;
        let hybrid = encoder.out_channels();
        let backbone = Backbone::new(
            &mut pb.sub("msf"),
            BackboneSpec {
                in_channels: hybrid,
                stage2_channels: 4 * w,
                stage3_channels: 8 * w,
                stage2_blocks: config.stage2_blocks,
                stage3_blocks: config.stage3_blocks,
                reduction: config.reduction,
                attention,
                frozen_bn: config.frozen_bn,
            },
        )?;
        let p = config.pyramid();
        let k = config.clusters;
        let stage_ch = backbone.channels();
        let head = match config.ablation.head {
            Head::MultiScale => {
                let fusion = LateralFusion::new(&mut pb.sub("msf"), stage_ch, p, config.upsample, config.frozen_bn)?;
                let mut vpb = pb.sub("vlad");
                let vlad = [
                    VladParams::new(&mut vpb.sub("m1"), k, p, config.intra_norm)?,
                    VladParams::new(&mut vpb.sub("m2"), k, p, config.intra_norm)?,
                    VladParams::new(&mut vpb.sub("m3"), k, p, config.intra_norm)?,
                ];
                let mut drw = DrwParams::new(&mut pb.sub("drw"), config.drw_hidden)?;
                drw.max_pool_weights = config.ablation.max_pool_weights;
                drw.normalize = config.final_norm;
                HeadParts::MultiScale { fusion, vlad, drw }
            }
            Head::SingleScale(level) => HeadParts::Single {
                level: SingleLevel::new(&mut pb.sub("msf"), level, stage_ch, p, config.frozen_bn)?,
                vlad: VladParams::new(&mut pb.sub("vlad"), k, p, config.intra_norm)?,
            },
            Head::FlattenConcat => HeadParts::Flatten {
                fusion: LateralFusion::new(&mut pb.sub("msf"), stage_ch, p, config.upsample, config.frozen_bn)?,
                vlad: VladParams::new(&mut pb.sub("vlad"), k, p, config.intra_norm)?,
            },
        };
        Ok(Self {
            config,
            store,
            encoder,
            backbone,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// VLAD layers in pyramid order (one for the single-level and flatten heads).
    pub fn vlad_layers(&self) -> Vec<&VladParams> {
        match &self.head {
            HeadParts::MultiScale { vlad, .. } => vlad.iter().collect(),
            HeadParts::Single { vlad, .. } | HeadParts::Flatten { vlad, .. } => vec![vlad],
        }
    }

    fn check_inputs(&self, frames: &Tensor, events: &Tensor) -> Result<()> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let (bf, cf, hf, wf) = frames.dims4()?;
        let (be, ce, he, we) = events.dims4()?;
        if (hf, wf) != (h, w) || (he, we) != (h, w) || bf != be {
            return Err(shape_err!(
                "model expects {w}x{h} inputs with equal batch sizes, got frames {:?} and events {:?}",
                frames.dims(),
                events.dims()
            ));
        }
        if cf != self.config.frame_channels || ce != 2 {
            return Err(shape_err!(
                "expected {} frame channels and 2 event channels, got {cf} and {ce}",
                self.config.frame_channels
            ));
        }
        Ok(())
    }

    pub fn features(&self, frames: &Tensor, events: &Tensor, mode: Mode) -> Result<Features> {
        self.check_inputs(frames, events)?;
        let hybrid = self.encoder.forward(frames, events, mode)?;
        let stages = self.backbone.forward(&hybrid, mode)?;
        let (pyramid, single) = match &self.head {
            HeadParts::MultiScale { fusion, .. } | HeadParts::Flatten { fusion, .. } => {
                (Some(fusion.forward(&stages, mode)?), None)
            }
            HeadParts::Single { level, .. } => (None, Some(level.forward(&stages, mode)?)),
        };
        Ok(Features {
            hybrid,
            stages,
            pyramid,
            single,
        })
    }

    /// Local features fed to each VLAD layer, `(B, C, P)` per layer.
    pub fn vlad_inputs(&self, features: &Features) -> Result<Vec<Tensor>> {
        let flat = |t: &Tensor| -> Result<Tensor> {
            let (b, c, h, w) = t.dims4()?;
            Ok(t.reshape((b, c, h * w))?)
        };
        match (&self.head, &features.pyramid, &features.single) {
            (HeadParts::MultiScale { .. }, Some(p), _) => p.levels().iter().map(|m| flat(m)).collect(),
            (HeadParts::Flatten { .. }, Some(p), _) => Ok(vec![flatten_concat(&p.levels())?]),
            (HeadParts::Single { .. }, _, Some(s)) => Ok(vec![flat(s)?]),
            _ => Err(Error::Config("features do not match the model head".into())),
        }
    }

    pub fn forward(&self, frames: &Tensor, events: &Tensor, mode: Mode) -> Result<Output> {
        let f = self.features(frames, events, mode)?;
        match &self.head {
            HeadParts::MultiScale { vlad, drw, .. } => {
                let p = f.pyramid.as_ref().expect("multi-scale head builds a pyramid");
                let d: Vec<Tensor> = p
                    .levels()
                    .iter()
                    .zip(vlad)
                    .map(|(m, v)| vlad_aggregate(m, v))
                    .collect::<Result<_>>()?;
                let multi = drw_forward(concat_descriptors(&d[0], &d[1], &d[2])?, drw)?;
                Ok(Output {
                    descriptor: multi.refined.clone().expect("re-weighting sets the refined descriptor"),
                    multi: Some(multi),
                })
            }
            HeadParts::Single { vlad, .. } => Ok(Output {
                descriptor: vlad_aggregate(f.single.as_ref().expect("single head"), vlad)?,
                multi: None,
            }),
            HeadParts::Flatten { vlad, .. } => {
                let p = f.pyramid.as_ref().expect("flatten head builds a pyramid");
                Ok(Output {
                    descriptor: vlad_aggregate_local(&flatten_concat(&p.levels())?, vlad)?,
                    multi: None,
                })
            }
        }
    }

    /// Inference-mode descriptors for `indices` of a prepared set, row-major.
    pub fn describe(&self, set: &PreparedSet, indices: &[usize], batch: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.config.descriptor_len());
        for chunk in indices.chunks(batch.max(1)) {
            let (f, e) = set.batch(chunk, self.dtype())?;
            let d = self.forward(&f, &e, Mode::Eval)?.descriptor;
            out.extend(d.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }
}

/// A traverse resampled to network input size, ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub name: String,
    pub frames: Vec<f32>,
    pub events: Vec<f32>,
    pub positions: Vec<Position>,
    pub timestamps: Vec<u64>,
    pub frame_channels: usize,
    pub width: usize,
    pub height: usize,
}

impl PreparedSet {
    pub fn from_traverse(traverse: &Traverse, config: &ModelConfig) -> Result<Self> {
        let (w, h) = (config.input_width, config.input_height);
        let fc = config.frame_channels;
        let mut frames = Vec::with_capacity(traverse.len() * fc * w * h);
        let mut events = Vec::with_capacity(traverse.len() * 2 * w * h);
        for s in &traverse.samples {
            if s.frame.channels != fc {
                return Err(Error::Config(format!(
                    "traverse '{}' has {}-channel frames, model expects {fc}",
                    traverse.name, s.frame.channels
                )));
            }
            let n = s.frame.width * s.frame.height;
            for c in 0..fc {
                frames.extend(resample_area(
                    &s.frame.data[c * n..(c + 1) * n],
                    (s.frame.width, s.frame.height),
                    (w, h),
                    Fold::Mean,
                ));
            }
            events.extend(events_to_frame(&s.event_volume, (w, h), config.event_normalization)?.data);
        }
        Ok(Self {
            name: traverse.name.clone(),
            frames,
            events,
            positions: traverse.positions(),
            timestamps: traverse.samples.iter().map(|s| s.timestamp).collect(),
            frame_channels: fc,
            width: w,
            height: h,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `(frames, events)` tensors for the selected samples.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let px = self.width * self.height;
        let (fs, es) = (self.frame_channels * px, 2 * px);
        let mut f = Vec::with_capacity(indices.len() * fs);
        let mut e = Vec::with_capacity(indices.len() * es);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("sample {i} out of range for '{}'", self.name)));
            }
            f.extend_from_slice(&self.frames[i * fs..(i + 1) * fs]);
            e.extend_from_slice(&self.events[i * es..(i + 1) * es]);
        }
        let b = indices.len();
        let dev = Device::Cpu;
        Ok((
            Tensor::from_vec(f, (b, self.frame_channels, self.height, self.width), &dev)?.to_dtype(dtype)?,
            Tensor::from_vec(e, (b, 2, self.height, self.width), &dev)?.to_dtype(dtype)?,
        ))
    }
}
