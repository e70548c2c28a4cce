//! Pseudo siamese backbone: four sub-networks with pairwise identical
//! architectures and independent weights.
//!
//! FN (frame) and FDN (motion) are the shallow halves at total stride 4;
//! BN and BDN are the deep halves that take the stride-4 maps to stride 16.
//! The deep halves end in a normalization layer with no activation after
//! it, so the aggregation mask downstream sees normalized features. Stage
//! splits follow the backbone split table; channel widths are thinned for
//! CPU-scale use.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationParams;
use crate::error::{MpsnError, Result};
use crate::head::DetectionHead;
use crate::nn::{Block, ChannelNorm, Conv2d, Feat, Layer, NormKind, Shortcut, Stage, SubNet};

/// Minimum input side accepted by the backbone.
pub const MIN_INPUT_SIDE: usize = 32;

/// Stride of the shallow halves.
pub const SHALLOW_STRIDE: usize = 4;

/// Total stride after the deep halves.
pub const DEEP_STRIDE: usize = 16;

/// Supported backbone families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Vgg16Like,
    MobileNetV2Like,
    ResNet18Like,
    /// Two conv stages per sub-network, for desk-scale runs and tests.
    Tiny,
}

impl FromStr for Arch {
    type Err = MpsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(Arch::Vgg16Like),
            "mobilenetv2" => Ok(Arch::MobileNetV2Like),
            "resnet18" => Ok(Arch::ResNet18Like),
            "tiny" => Ok(Arch::Tiny),
            other => Err(MpsnError::Config(format!(
                "unknown arch '{other}' (expected vgg16|mobilenetv2|resnet18|tiny)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arch::Vgg16Like => "vgg16",
            Arch::MobileNetV2Like => "mobilenetv2",
            Arch::ResNet18Like => "resnet18",
            Arch::Tiny => "tiny",
        };
        f.write_str(s)
    }
}

/// Which input stream a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Frame,
    Motion,
}

/// Stage split of a backbone into shallow (stride 4) and deep (stride 16)
/// halves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSplitSpec {
    pub arch: Arch,
    pub shallow_stages: Vec<String>,
    pub deep_stages: Vec<String>,
    pub shallow_stride: usize,
    pub deep_stride_total: usize,
    pub norm: NormKind,
}

impl BackboneSplitSpec {
    pub fn for_arch(arch: Arch) -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let (shallow, deep) = match arch {
            Arch::Vgg16Like => (
                names(&["conv1", "conv2"]),
                names(&["conv3", "conv4", "conv5"]),
            ),
            Arch::MobileNetV2Like => (
                names(&["conv1", "bottleneck1", "bottleneck2", "bottleneck3"]),
                (4..=13).map(|i| format!("bottleneck{i}")).collect(),
            ),
            Arch::ResNet18Like => (
                names(&["conv1", "conv2_x"]),
                names(&["conv3_x", "conv4_x"]),
            ),
            Arch::Tiny => (names(&["conv1", "conv2"]), names(&["conv3", "conv4"])),
        };
        BackboneSplitSpec {
            arch,
            shallow_stages: shallow,
            deep_stages: deep,
            shallow_stride: SHALLOW_STRIDE,
            deep_stride_total: DEEP_STRIDE,
            norm: NormKind::Batch,
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shallow_stride != SHALLOW_STRIDE || self.deep_stride_total != DEEP_STRIDE {
            return Err(MpsnError::Config(format!(
                "stride split must be {SHALLOW_STRIDE}/{DEEP_STRIDE}, got {}/{}",
                self.shallow_stride, self.deep_stride_total
            )));
        }
        for s in &self.shallow_stages {
            if self.deep_stages.contains(s) {
                return Err(MpsnError::Config(format!(
                    "stage '{s}' appears in both shallow and deep splits"
                )));
            }
        }
        Ok(())
    }

    /// (shallow output channels, deep output channels) for this arch.
    pub fn channels(&self) -> (usize, usize) {
        match self.arch {
            Arch::Vgg16Like => (32, 64),
            Arch::MobileNetV2Like => (24, 48),
            Arch::ResNet18Like => (24, 48),
            Arch::Tiny => (32, 64),
        }
    }
}

/// A feature grid with stride metadata (pixels per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Feat,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Feat, stride: usize) -> Self {
        FeatureMap { values, stride }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn shape_string(&self) -> String {
        let s = self.values.shape();
        format!("{}x{}x{}@{}", s[0], s[1], s[2], self.stride)
    }
}

/// Input mode a model bundle was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Single-stream baseline: only the current frame.
    SingleFrame,
    /// Pseudo siamese over (current, previous) with degenerate additive
    /// deep aggregation.
    TwoFrames,
    /// Pseudo siamese over (current, |current - previous|).
    DiffAbs,
    /// Pseudo siamese over (current, encoded optical flow).
    Flow,
}

impl ModelVariant {
    pub fn uses_motion_stream(&self) -> bool {
        !matches!(self, ModelVariant::SingleFrame)
    }
}

impl FromStr for ModelVariant {
    type Err = MpsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_frame" => Ok(ModelVariant::SingleFrame),
            "two_frames" => Ok(ModelVariant::TwoFrames),
            "diffabs" => Ok(ModelVariant::DiffAbs),
            "flow" => Ok(ModelVariant::Flow),
            other => Err(MpsnError::Config(format!(
                "unknown variant '{other}' (expected single_frame|two_frames|diffabs|flow)"
            ))),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::SingleFrame => "single_frame",
            ModelVariant::TwoFrames => "two_frames",
            ModelVariant::DiffAbs => "diffabs",
            ModelVariant::Flow => "flow",
        };
        f.write_str(s)
    }
}

/// Weight initialization policy.
#[derive(Debug, Clone)]
pub enum InitPolicy {
    /// Everything from the seeded generator.
    Random { seed: u64 },
    /// Frame-stream weights (FN/BN) copied from an existing checkpoint;
    /// motion-stream weights stay random since no pretraining exists for
    /// difference images.
    PretrainedFrameStream { path: std::path::PathBuf, seed: u64 },
}

/// The motion-stream pair of sub-networks.
#[derive(Debug, Clone)]
pub struct MotionStreams {
    pub fdn: SubNet,
    pub bdn: SubNet,
}

/// All parameters of one detector: sub-networks, detection head, and
/// aggregation coefficients.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: BackboneSplitSpec,
    pub variant: ModelVariant,
    pub fn_net: SubNet,
    pub bn_net: SubNet,
    pub motion: Option<MotionStreams>,
    pub head: DetectionHead,
    pub agg: AggregationParams,
}

fn conv(c_in: usize, c_out: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv(Conv2d::new(c_in, c_out, k, s, rng))
}

fn plain_stage(name: &str, layers: Vec<Layer>) -> Stage {
    Stage {
        name: name.into(),
        blocks: vec![Block::plain(layers)],
    }
}

/// Inverted-residual block: 1x1 expand, 3x3 spatial, 1x1 linear project.
fn bottleneck(c_in: usize, c_out: usize, s: usize, rng: &mut ChaCha8Rng) -> Block {
    let e = c_in * 2;
    let body = vec![
        conv(c_in, e, 1, 1, rng),
        Layer::Relu,
        conv(e, e, 3, s, rng),
        Layer::Relu,
        conv(e, c_out, 1, 1, rng),
    ];
    let shortcut = if s == 1 && c_in == c_out {
        Shortcut::Identity
    } else {
        Shortcut::None
    };
    Block { body, shortcut }
}

/// Two-conv residual block with projection shortcut when shape changes.
fn basic_block(c_in: usize, c_out: usize, s: usize, rng: &mut ChaCha8Rng) -> Block {
    let body = vec![
        conv(c_in, c_out, 3, s, rng),
        Layer::Relu,
        conv(c_out, c_out, 3, 1, rng),
    ];
    let shortcut = if s == 1 && c_in == c_out {
        Shortcut::Identity
    } else {
        Shortcut::Proj(Conv2d::new(c_in, c_out, 1, s, rng))
    };
    Block { body, shortcut }
}

fn relu_block() -> Block {
    Block::plain(vec![Layer::Relu])
}

fn norm_block(c: usize, kind: NormKind) -> Block {
    Block::plain(vec![Layer::Norm(ChannelNorm::new(c, kind))])
}

/// Build the shallow (stride-4) half of one stream.
fn build_shallow(spec: &BackboneSplitSpec, rng: &mut ChaCha8Rng) -> SubNet {
    let stages = match spec.arch {
        Arch::Tiny => vec![
            plain_stage(
                "conv1",
                vec![
                    conv(3, 16, 3, 2, rng),
                    Layer::Relu,
                    conv(16, 16, 3, 1, rng),
                    Layer::Relu,
                ],
            ),
            plain_stage(
                "conv2",
                vec![
                    conv(16, 32, 3, 2, rng),
                    Layer::Relu,
                    conv(32, 32, 3, 1, rng),
                    Layer::Relu,
                ],
            ),
        ],
        Arch::Vgg16Like => vec![
            plain_stage(
                "conv1",
                vec![
                    conv(3, 16, 3, 1, rng),
                    Layer::Relu,
                    conv(16, 16, 3, 2, rng),
                    Layer::Relu,
                ],
            ),
            plain_stage(
                "conv2",
                vec![
                    conv(16, 32, 3, 1, rng),
                    Layer::Relu,
                    conv(32, 32, 3, 2, rng),
                    Layer::Relu,
                ],
            ),
        ],
        Arch::MobileNetV2Like => vec![
            plain_stage("conv1", vec![conv(3, 16, 3, 2, rng), Layer::Relu]),
            Stage {
                name: "bottleneck1".into(),
                blocks: vec![bottleneck(16, 16, 1, rng)],
            },
            Stage {
                name: "bottleneck2".into(),
                blocks: vec![bottleneck(16, 24, 2, rng)],
            },
            Stage {
                name: "bottleneck3".into(),
                blocks: vec![bottleneck(24, 24, 1, rng)],
            },
        ],
        Arch::ResNet18Like => vec![
            plain_stage("conv1", vec![conv(3, 16, 3, 2, rng), Layer::Relu]),
            Stage {
                name: "conv2_x".into(),
                blocks: vec![
                    basic_block(16, 24, 2, rng),
                    relu_block(),
                    basic_block(24, 24, 1, rng),
                    relu_block(),
                ],
            },
        ],
    };
    SubNet { stages }
}

/// Build the deep (stride-4-to-16) half of one stream. Ends with the
/// normalization layer; no activation afterwards.
fn build_deep(spec: &BackboneSplitSpec, rng: &mut ChaCha8Rng) -> SubNet {
    let norm = spec.norm;
    let stages = match spec.arch {
        Arch::Tiny => vec![
            plain_stage(
                "conv3",
                vec![
                    conv(32, 48, 3, 2, rng),
                    Layer::Relu,
                    conv(48, 48, 3, 1, rng),
                    Layer::Relu,
                ],
            ),
            plain_stage(
                "conv4",
                vec![
                    conv(48, 64, 3, 2, rng),
                    Layer::Relu,
                    conv(64, 64, 3, 1, rng),
                    Layer::Norm(ChannelNorm::new(64, norm)),
                ],
            ),
        ],
        Arch::Vgg16Like => vec![
            plain_stage(
                "conv3",
                vec![
                    conv(32, 48, 3, 1, rng),
                    Layer::Relu,
                    conv(48, 48, 3, 2, rng),
                    Layer::Relu,
                ],
            ),
            plain_stage(
                "conv4",
                vec![
                    conv(48, 64, 3, 1, rng),
                    Layer::Relu,
                    conv(64, 64, 3, 2, rng),
                    Layer::Relu,
                ],
            ),
            plain_stage(
                "conv5",
                vec![
                    conv(64, 64, 3, 1, rng),
                    Layer::Relu,
                    conv(64, 64, 3, 1, rng),
                    Layer::Norm(ChannelNorm::new(64, norm)),
                ],
            ),
        ],
        Arch::MobileNetV2Like => {
            let mut stages = Vec::new();
            let plan: Vec<(usize, usize, usize)> = vec![
                (24, 32, 2), // bottleneck4
                (32, 32, 1),
                (32, 32, 1),
                (32, 48, 2), // bottleneck7
                (48, 48, 1),
                (48, 48, 1),
                (48, 48, 1),
                (48, 48, 1),
                (48, 48, 1),
                (48, 48, 1), // bottleneck13
            ];
            let last = plan.len() - 1;
            for (i, (ci, co, s)) in plan.into_iter().enumerate() {
                let mut blocks = vec![bottleneck(ci, co, s, rng)];
                if i == last {
                    blocks.push(norm_block(co, norm));
                }
                stages.push(Stage {
                    name: format!("bottleneck{}", i + 4),
                    blocks,
                });
            }
            stages
        }
        Arch::ResNet18Like => vec![
            Stage {
                name: "conv3_x".into(),
                blocks: vec![
                    basic_block(24, 32, 2, rng),
                    relu_block(),
                    basic_block(32, 32, 1, rng),
                    relu_block(),
                ],
            },
            Stage {
                name: "conv4_x".into(),
                blocks: vec![
                    basic_block(32, 48, 2, rng),
                    relu_block(),
                    basic_block(48, 48, 1, rng),
                    relu_block(),
                    norm_block(48, norm),
                ],
            },
        ],
    };
    SubNet { stages }
}

/// Build a dual-stream bundle: FN/FDN and BN/BDN structurally identical,
/// weights drawn independently.
pub fn build_backbone(spec: &BackboneSplitSpec, init: &InitPolicy) -> Result<ModelBundle> {
    build_bundle(spec, init, ModelVariant::DiffAbs)
}

/// Build a bundle for an explicit variant; `SingleFrame` gets no motion
/// streams.
pub fn build_bundle(
    spec: &BackboneSplitSpec,
    init: &InitPolicy,
    variant: ModelVariant,
) -> Result<ModelBundle> {
    spec.validate()?;
    let seed = match init {
        InitPolicy::Random { seed } => *seed,
        InitPolicy::PretrainedFrameStream { seed, .. } => *seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fn_net = build_shallow(spec, &mut rng);
    let bn_net = build_deep(spec, &mut rng);
    let motion = if variant.uses_motion_stream() {
        Some(MotionStreams {
            fdn: build_shallow(spec, &mut rng),
            bdn: build_deep(spec, &mut rng),
        })
    } else {
        None
    };
    let (_, deep_c) = spec.channels();
    let head = DetectionHead::new(deep_c, &mut rng);
    let mut bundle = ModelBundle {
        spec: spec.clone(),
        variant,
        fn_net,
        bn_net,
        motion,
        head,
        agg: AggregationParams::default(),
    };
    if let InitPolicy::PretrainedFrameStream { path, .. } = init {
        let donor = crate::train::load_checkpoint(path)?;
        if donor.spec.arch != spec.arch {
            return Err(MpsnError::Config(format!(
                "pretrained checkpoint arch {} does not match requested arch {}",
                donor.spec.arch, spec.arch
            )));
        }
        bundle.fn_net = donor.fn_net;
        bundle.bn_net = donor.bn_net;
    }
    Ok(bundle)
}

impl ModelBundle {
    /// Shallow forward pass at stride 4 for one stream.
    pub fn forward_shallow(&self, stream: StreamKind, image: &Feat) -> Result<FeatureMap> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(MpsnError::InputTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT_SIDE,
            });
        }
        let net = match stream {
            StreamKind::Frame => &self.fn_net,
            StreamKind::Motion => &self.motion_streams()?.fdn,
        };
        Ok(FeatureMap::new(net.forward(image), SHALLOW_STRIDE))
    }

    /// Deep forward pass: stride-4 features in, stride-16 features out.
    pub fn forward_deep(&self, stream: StreamKind, feat: &FeatureMap) -> Result<FeatureMap> {
        if feat.stride != SHALLOW_STRIDE {
            return Err(MpsnError::Contract(format!(
                "forward_deep expects stride-{SHALLOW_STRIDE} input, got stride {}",
                feat.stride
            )));
        }
        let net = match stream {
            StreamKind::Frame => &self.bn_net,
            StreamKind::Motion => &self.motion_streams()?.bdn,
        };
        Ok(FeatureMap::new(net.forward(&feat.values), DEEP_STRIDE))
    }

    pub fn motion_streams(&self) -> Result<&MotionStreams> {
        self.motion.as_ref().ok_or_else(|| {
            MpsnError::Contract("bundle has no motion stream (single-frame baseline)".into())
        })
    }

    /// Visit every parameter tensor in a stable traversal order.
    pub fn visit(&self, f: &mut dyn FnMut(&ndarray::ArrayD<f64>)) {
        self.fn_net.visit(f);
        self.bn_net.visit(f);
        if let Some(m) = &self.motion {
            m.fdn.visit(f);
            m.bdn.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ndarray::ArrayD<f64>)) {
        self.fn_net.visit_mut(f);
        self.bn_net.visit_mut(f);
        if let Some(m) = &mut self.motion {
            m.fdn.visit_mut(f);
            m.bdn.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    pub fn params_mut(&mut self) -> Vec<&mut ndarray::ArrayD<f64>> {
        let mut out = self.fn_net.params_mut();
        out.extend(self.bn_net.params_mut());
        if let Some(m) = &mut self.motion {
            out.extend(m.fdn.params_mut());
            out.extend(m.bdn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |a| n += a.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn random_image(seed: u64, h: usize, w: usize) -> Feat {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array3::<f64>::zeros((3, h, w));
        x.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        x
    }

    #[test]
    fn vgg_split_matches_stage_table() {
        let spec = BackboneSplitSpec::for_arch(Arch::Vgg16Like);
        assert_eq!(spec.shallow_stages, vec!["conv1", "conv2"]);
        assert_eq!(spec.deep_stages, vec!["conv3", "conv4", "conv5"]);
        assert_eq!(spec.shallow_stride, 4);
        assert_eq!(spec.deep_stride_total, 16);
    }

    #[test]
    fn tiny_pair_shapes_match_and_weights_differ() {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        let bundle = build_backbone(&spec, &InitPolicy::Random { seed: 9 }).unwrap();
        let m = bundle.motion.as_ref().unwrap();
        assert_eq!(bundle.fn_net.shape_signature(), m.fdn.shape_signature());
        assert_eq!(bundle.bn_net.shape_signature(), m.bdn.shape_signature());
        // Independent sampling: the flattened parameter vectors differ.
        assert_ne!(bundle.fn_net.flat_params(), m.fdn.flat_params());
        assert_ne!(bundle.bn_net.flat_params(), m.bdn.flat_params());
    }

    #[test]
    fn stride_contract_holds_for_all_archs() {
        for arch in [
            Arch::Tiny,
            Arch::Vgg16Like,
            Arch::MobileNetV2Like,
            Arch::ResNet18Like,
        ] {
            let spec = BackboneSplitSpec::for_arch(arch);
            let bundle = build_backbone(&spec, &InitPolicy::Random { seed: 1 }).unwrap();
            assert_eq!(bundle.fn_net.total_stride(), 4, "{arch}");
            assert_eq!(bundle.bn_net.total_stride(), 4, "{arch}");
            let x = random_image(2, 64, 64);
            let shallow = bundle.forward_shallow(StreamKind::Frame, &x).unwrap();
            assert_eq!(shallow.stride, 4);
            assert_eq!(shallow.height(), 16);
            assert_eq!(shallow.width(), 16);
            let deep = bundle.forward_deep(StreamKind::Frame, &shallow).unwrap();
            assert_eq!(deep.stride, 16);
            assert_eq!(deep.height(), 4);
            assert_eq!(deep.width(), 4);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        let bundle = build_backbone(&spec, &InitPolicy::Random { seed: 3 }).unwrap();
        let x = random_image(4, 48, 40);
        let a = bundle.forward_shallow(StreamKind::Frame, &x).unwrap();
        let b = bundle.forward_shallow(StreamKind::Frame, &x).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        let bundle = build_backbone(&spec, &InitPolicy::Random { seed: 3 }).unwrap();
        let x = random_image(5, 16, 64);
        let err = bundle.forward_shallow(StreamKind::Frame, &x).unwrap_err();
        assert!(matches!(err, MpsnError::InputTooSmall { .. }));
    }

    #[test]
    fn wrong_stride_into_deep_is_a_contract_error() {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        let bundle = build_backbone(&spec, &InitPolicy::Random { seed: 3 }).unwrap();
        let feat = FeatureMap::new(Feat::zeros((32, 4, 4)), 16);
        let err = bundle.forward_deep(StreamKind::Frame, &feat).unwrap_err();
        assert!(matches!(err, MpsnError::Contract(_)));
    }

    #[test]
    fn unknown_arch_string_is_a_config_error() {
        assert!(matches!(
            "vgg19".parse::<Arch>(),
            Err(MpsnError::Config(_))
        ));
    }

    #[test]
    fn single_frame_bundle_has_no_motion_stream() {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        let bundle = build_bundle(
            &spec,
            &InitPolicy::Random { seed: 5 },
            ModelVariant::SingleFrame,
        )
        .unwrap();
        assert!(bundle.motion.is_none());
        let x = random_image(6, 32, 32);
        assert!(bundle.forward_shallow(StreamKind::Motion, &x).is_err());
    }
}
