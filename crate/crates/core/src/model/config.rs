use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of logmel bins per audio frame.
pub const MEL_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// One convolution stage: zero-pad by `kernel / 2`, convolve, add bias, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvBlock {
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output length of one spatial axis.
    pub fn output_len(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}s{}", self.out_channels, self.kernel, self.stride)
    }
}

impl FromStr for ConvBlock {
    type Err = String;

    /// Parses `<channels>x<kernel>s<stride>`, e.g. `16x3s2`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("expected <channels>x<kernel>s<stride>, got `{s}`");
        let (c, rest) = s.trim().split_once('x').ok_or_else(bad)?;
        let (k, st) = rest.split_once('s').ok_or_else(bad)?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(ConvBlock::new(parse(c)?, parse(k)?, parse(st)?))
    }
}

/// Convolutional encoder for one modality.
///
/// The audio encoder reads a `T×64` logmel image as a single-channel map with
/// time along the height axis, pools frames with additive self-attention and
/// emits `encoding_dim` features. The video encoder treats every face frame
/// as a `C×H×W` image and averages per-frame encodings over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub conv_blocks: Vec<ConvBlock>,
    pub encoding_dim: usize,
    /// Hidden width of the attention scorer (audio only).
    pub attention_dim: usize,
    /// Input frame shape `[C, H, W]` (video only).
    pub frame_shape: [usize; 3],
}

impl EncoderConfig {
    pub fn desk_audio() -> Self {
        EncoderConfig {
            modality: Modality::Audio,
            conv_blocks: vec![
                ConvBlock::new(8, 3, 2),
                ConvBlock::new(16, 3, 2),
                ConvBlock::new(32, 3, 2),
            ],
            encoding_dim: 64,
            attention_dim: 32,
            frame_shape: [1, 1, MEL_BINS],
        }
    }

    pub fn desk_video() -> Self {
        EncoderConfig {
            modality: Modality::Video,
            conv_blocks: vec![ConvBlock::new(8, 3, 2), ConvBlock::new(16, 3, 2)],
            encoding_dim: 128,
            attention_dim: 0,
            frame_shape: [3, 16, 16],
        }
    }

    /// Audio stack mirroring the large-scale MobileNetV2 layout: each
    /// `[expansion, channels, repeats, stride]` row becomes one plain
    /// `channels×3` conv stage with that stride.
    pub fn mirror_paper_audio() -> Self {
        EncoderConfig {
            conv_blocks: MOBILENET_V2_AUDIO_BLOCKS
                .iter()
                .map(|&[_, c, _, s]| ConvBlock::new(c, 3, s))
                .collect(),
            encoding_dim: 356,
            attention_dim: 128,
            ..Self::desk_audio()
        }
    }

    /// Video stack at ResNet-like widths on 112×112 face crops.
    pub fn mirror_paper_video() -> Self {
        EncoderConfig {
            modality: Modality::Video,
            conv_blocks: vec![
                ConvBlock::new(64, 7, 2),
                ConvBlock::new(256, 3, 2),
                ConvBlock::new(512, 3, 2),
                ConvBlock::new(1024, 3, 2),
                ConvBlock::new(2048, 3, 2),
            ],
            encoding_dim: 2048,
            attention_dim: 0,
            frame_shape: [3, 112, 112],
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.modality {
            Modality::Audio => 1,
            Modality::Video => self.frame_shape[0],
        }
    }

    /// Width of the per-frame feature vector that enters the frame projection.
    pub fn frame_feature_dim(&self) -> usize {
        let last = self.conv_blocks.last().map_or(self.input_channels(), |b| b.out_channels);
        match self.modality {
            Modality::Audio => {
                let w = self.conv_blocks.iter().fold(MEL_BINS, |w, b| b.output_len(w));
                last * w
            }
            Modality::Video => {
                let (h, w) = self.conv_blocks.iter().fold(
                    (self.frame_shape[1], self.frame_shape[2]),
                    |(h, w), b| (b.output_len(h), b.output_len(w)),
                );
                last * h * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = format!("{}", self.modality);
        if self.conv_blocks.is_empty() {
            return Err(Error::config(format!("{key}.conv_blocks"), "must list at least one block"));
        }
        if self
            .conv_blocks
            .iter()
            .any(|b| b.out_channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return Err(Error::config(format!("{key}.conv_blocks"), "channels, kernel and stride must be positive"));
        }
        if self.encoding_dim == 0 {
            return Err(Error::config(format!("{key}.encoding_dim"), "must be positive"));
        }
        match self.modality {
            Modality::Audio if self.attention_dim == 0 => {
                Err(Error::config("audio.attention_dim", "must be positive"))
            }
            Modality::Video if self.frame_shape.contains(&0) => {
                Err(Error::config("video.frame_shape", "dimensions must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Inverted-residual rows `[expansion, channels, repeats, stride]` of the
/// large-scale audio encoder.
pub const MOBILENET_V2_AUDIO_BLOCKS: [[usize; 4]; 12] = [
    [3, 32, 1, 1],
    [4, 32, 1, 1],
    [6, 64, 1, 2],
    [4, 64, 1, 1],
    [4, 64, 1, 1],
    [6, 128, 1, 2],
    [6, 128, 1, 1],
    [4, 128, 1, 1],
    [6, 256, 1, 2],
    [4, 256, 1, 1],
    [5, 256, 1, 1],
    [4, 256, 1, 1],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopologyKind {
    UnimodalA,
    UnimodalV,
    MidFusion,
    MultiView,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 4] = [
        TopologyKind::UnimodalA,
        TopologyKind::UnimodalV,
        TopologyKind::MidFusion,
        TopologyKind::MultiView,
    ];

    pub fn uses(self, modality: Modality) -> bool {
        match (self, modality) {
            (TopologyKind::UnimodalA, Modality::Video) | (TopologyKind::UnimodalV, Modality::Audio) => false,
            _ => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::UnimodalA => "unimodal-a",
            TopologyKind::UnimodalV => "unimodal-v",
            TopologyKind::MidFusion => "midfusion",
            TopologyKind::MultiView => "multiview",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "topology",
                    format!("unknown topology `{s}` (expected unimodal-a, unimodal-v, midfusion or multiview)"),
                )
            })
    }
}

/// Classifier head: FC → ReLU → [BN] → dropout, followed by the arc-margin
/// class-weight layer (one row per training speaker).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub use_batchnorm: bool,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: 128,
            dropout_p: 0.2,
            use_batchnorm: true,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcConfig {
    fn default() -> Self {
        ArcConfig {
            scale: 30.0,
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    /// Shared-space width (multi-view only).
    pub proj_dim: Option<usize>,
    pub head: HeadConfig,
    pub arc: ArcConfig,
    pub lambda_a: f64,
    pub lambda_v: f64,
}

impl Topology {
    pub fn new(kind: TopologyKind, num_classes: usize) -> Self {
        let multiview = kind == TopologyKind::MultiView;
        Topology {
            kind,
            proj_dim: multiview.then_some(64),
            head: HeadConfig {
                num_classes,
                use_batchnorm: !multiview,
                ..HeadConfig::default()
            },
            arc: ArcConfig::default(),
            lambda_a: 1.0,
            lambda_v: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        if h.hidden_dim == 0 {
            return Err(Error::config("head.hidden_dim", "must be positive"));
        }
        if h.num_classes == 0 {
            return Err(Error::config("head.num_classes", "must be positive"));
        }
        if !(0.0..1.0).contains(&h.dropout_p) {
            return Err(Error::config("head.dropout_p", "must lie in [0, 1)"));
        }
        if !(self.arc.scale > 0.0) {
            return Err(Error::config("arc.scale", "must be positive"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arc.margin) {
            return Err(Error::config("arc.margin", "must lie in [0, pi/2)"));
        }
        if !(self.lambda_a >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::config("model.lambda_a", "loss weights must be nonnegative"));
        }
        match self.kind {
            TopologyKind::MultiView => {
                if !self.proj_dim.is_some_and(|d| d > 0) {
                    return Err(Error::config("model.proj_dim", "multiview needs a positive projection width"));
                }
                if h.use_batchnorm {
                    return Err(Error::config(
                        "head.use_batchnorm",
                        "the shared multiview head must not contain batch normalization",
                    ));
                }
            }
            _ if self.proj_dim.is_some() => {
                return Err(Error::config("model.proj_dim", "only the multiview topology has a projection"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_block_parse_and_display_roundtrip() {
        let b: ConvBlock = "16x3s2".parse().unwrap();
        assert_eq!(b, ConvBlock::new(16, 3, 2));
        assert_eq!(b.to_string(), "16x3s2");
        assert!("16x3".parse::<ConvBlock>().is_err());
        assert!("ax3s1".parse::<ConvBlock>().is_err());
    }

    #[test]
    fn padded_blocks_halve_with_stride_two() {
        let b = ConvBlock::new(4, 3, 2);
        assert_eq!(b.output_len(64), 32);
        assert_eq!(b.output_len(100), 50);
        assert_eq!(b.output_len(1), 1);
        assert_eq!(EncoderConfig::desk_audio().frame_feature_dim(), 32 * 8);
        assert_eq!(EncoderConfig::desk_video().frame_feature_dim(), 16 * 4 * 4);
    }

    #[test]
    fn mirror_preset_records_large_scale_dims() {
        let a = EncoderConfig::mirror_paper_audio();
        assert_eq!(a.conv_blocks.len(), 12);
        assert_eq!(a.encoding_dim, 356);
        assert_eq!(a.conv_blocks[8], ConvBlock::new(256, 3, 2));
        let v = EncoderConfig::mirror_paper_video();
        assert_eq!(v.encoding_dim, 2048);
        assert_eq!(v.frame_shape, [3, 112, 112]);
        a.validate().unwrap();
        v.validate().unwrap();
    }

    #[test]
    fn multiview_rules() {
        let mut t = Topology::new(TopologyKind::MultiView, 4);
        t.validate().unwrap();
        t.head.use_batchnorm = true;
        assert!(matches!(t.validate(), Err(Error::Config { key, .. }) if key == "head.use_batchnorm"));
        t.head.use_batchnorm = false;
        t.proj_dim = None;
        assert!(t.validate().is_err());
        let mut u = Topology::new(TopologyKind::UnimodalA, 4);
        u.proj_dim = Some(8);
        assert!(u.validate().is_err());
    }

    #[test]
    fn topology_names_parse() {
        for k in TopologyKind::ALL {
            assert_eq!(k.as_str().parse::<TopologyKind>().unwrap(), k);
        }
        assert!("fusion".parse::<TopologyKind>().is_err());
    }
}
