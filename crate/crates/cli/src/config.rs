//! Run configuration: a flat, line-oriented `section.key = value` file.
//!
//! `#` starts a comment. Every key has a default, unknown keys are rejected,
//! and a `preset = desk | mirror-paper` line (wherever it appears) selects the
//! base values before the other lines are applied.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvsv::data::{Condition, SynthConfig};
use mvsv::error::{Error, Result};
use mvsv::model::{ArcConfig, ConvBlock, EncoderConfig, HeadConfig, Topology, TopologyKind};
use mvsv::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    MirrorPaper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::MirrorPaper => "mirror-paper",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "mirror-paper" => Ok(Preset::MirrorPaper),
            _ => Err(Error::config("preset", format!("unknown preset `{s}` (expected desk or mirror-paper)"))),
        }
    }
}

/// Batchnorm in the classifier head: `auto` enables it except for multi-view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormSetting {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub batchnorm: BatchNormSetting,
    pub arc: ArcConfig,
    pub lambda_a: f64,
    pub lambda_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Conditions to score; empty means the trial file's own tags.
    pub conditions: Vec<Condition>,
    /// Score-fusion recipes such as `a+v+av`.
    pub fuse: Vec<String>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    pub trials: PathBuf,
    pub checkpoints: PathBuf,
    pub scores: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: SynthConfig,
    pub audio: EncoderConfig,
    pub video: EncoderConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "data.num_speakers",
    "data.videos_per_speaker",
    "data.utts_per_video",
    "data.latent_dim",
    "data.sigma_audio",
    "data.sigma_video",
    "data.sigma_session",
    "data.missing_face_prob",
    "data.audio_frames_min",
    "data.audio_frames_max",
    "data.video_frames",
    "data.frame_shape",
    "audio.conv_blocks",
    "audio.encoding_dim",
    "audio.attention_dim",
    "video.conv_blocks",
    "video.encoding_dim",
    "model.proj_dim",
    "model.hidden_dim",
    "model.dropout_p",
    "model.batchnorm",
    "model.arc_scale",
    "model.arc_margin",
    "model.lambda_a",
    "model.lambda_v",
    "train.lr",
    "train.momentum",
    "train.plateau_factor",
    "train.plateau_patience",
    "train.plateau_threshold",
    "train.batch_size",
    "train.max_epochs",
    "train.crop_frames",
    "train.shards",
    "eval.conditions",
    "eval.fuse",
    "eval.threshold",
    "paths.dataset",
    "paths.trials",
    "paths.checkpoints",
    "paths.scores",
    "paths.reports",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let seed = 7;
        let mirror = preset == Preset::MirrorPaper;
        let (audio, video) = if mirror {
            (EncoderConfig::mirror_paper_audio(), EncoderConfig::mirror_paper_video())
        } else {
            (EncoderConfig::desk_audio(), EncoderConfig::desk_video())
        };
        let head = HeadConfig::default();
        RunConfig {
            preset,
            seed,
            data: SynthConfig {
                seed,
                frame_shape: video.frame_shape,
                ..SynthConfig::default()
            },
            audio,
            video,
            model: ModelOptions {
                proj_dim: if mirror { 256 } else { 64 },
                hidden_dim: head.hidden_dim,
                dropout_p: head.dropout_p,
                batchnorm: BatchNormSetting::Auto,
                arc: ArcConfig::default(),
                lambda_a: 1.0,
                lambda_v: 1.0,
            },
            train: TrainConfig {
                seed,
                ..if mirror { TrainConfig::mirror_paper() } else { TrainConfig::default() }
            },
            eval: EvalOptions {
                conditions: Vec::new(),
                fuse: Vec::new(),
                threshold: 0.5,
            },
            paths: Paths {
                dataset: "run/data.mvsv".into(),
                trials: "run/trials.tsv".into(),
                checkpoints: "run/checkpoints".into(),
                scores: "run/scores".into(),
                reports: "run/reports".into(),
            },
        }
    }

    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        let preset = match entries.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        if let Some((_, v)) = entries.iter().find(|(k, _)| k == "seed") {
            cfg.set("seed", v)?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset" && k != "seed") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment. Setting `seed` reseeds data and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => {
                let p: Preset = v.parse()?;
                if p != self.preset {
                    return Err(Error::config("preset", "can only be chosen in the config file"));
                }
            }
            "seed" => {
                self.seed = parse(key, v)?;
                self.data.seed = self.seed;
                self.train.seed = self.seed;
            }
            "data.num_speakers" => self.data.num_speakers = parse(key, v)?,
            "data.videos_per_speaker" => self.data.videos_per_speaker = parse(key, v)?,
            "data.utts_per_video" => self.data.utts_per_video = parse(key, v)?,
            "data.latent_dim" => self.data.latent_dim = parse(key, v)?,
            "data.sigma_audio" => self.data.sigma_audio = parse(key, v)?,
            "data.sigma_video" => self.data.sigma_video = parse(key, v)?,
            "data.sigma_session" => self.data.sigma_session = parse(key, v)?,
            "data.missing_face_prob" => self.data.missing_face_prob = parse(key, v)?,
            "data.audio_frames_min" => self.data.audio_frames.0 = parse(key, v)?,
            "data.audio_frames_max" => self.data.audio_frames.1 = parse(key, v)?,
            "data.video_frames" => self.data.video_frames = parse(key, v)?,
            "data.frame_shape" => {
                let dims: Vec<usize> = v.split('x').map(|d| parse(key, d.trim())).collect::<Result<_>>()?;
                let shape: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| Error::config(key, "expected CxHxW, e.g. 3x16x16"))?;
                self.data.frame_shape = shape;
                self.video.frame_shape = shape;
            }
            "audio.conv_blocks" | "video.conv_blocks" => {
                let blocks = list(v).map(ConvBlock::from_str).collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::config(key, e))?;
                if key.starts_with("audio") {
                    self.audio.conv_blocks = blocks;
                } else {
                    self.video.conv_blocks = blocks;
                }
            }
            "audio.encoding_dim" => self.audio.encoding_dim = parse(key, v)?,
            "audio.attention_dim" => self.audio.attention_dim = parse(key, v)?,
            "video.encoding_dim" => self.video.encoding_dim = parse(key, v)?,
            "model.proj_dim" => self.model.proj_dim = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "model.dropout_p" => self.model.dropout_p = parse(key, v)?,
            "model.batchnorm" => {
                self.model.batchnorm = match v {
                    "auto" => BatchNormSetting::Auto,
                    "true" => BatchNormSetting::On,
                    "false" => BatchNormSetting::Off,
                    _ => return Err(Error::config(key, "expected auto, true or false")),
                }
            }
            "model.arc_scale" => self.model.arc.scale = parse(key, v)?,
            "model.arc_margin" => self.model.arc.margin = parse(key, v)?,
            "model.lambda_a" => self.model.lambda_a = parse(key, v)?,
            "model.lambda_v" => self.model.lambda_v = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.plateau_factor" => self.train.plateau_factor = parse(key, v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "train.plateau_threshold" => self.train.plateau_threshold = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.crop_frames" => self.train.crop_frames = parse(key, v)?,
            "train.shards" => self.train.shards = parse(key, v)?,
            "eval.conditions" => {
                self.eval.conditions = list(v)
                    .map(|c| Condition::from_tag(c).ok_or_else(|| Error::config(key, format!("unknown condition `{c}`"))))
                    .collect::<Result<_>>()?
            }
            "eval.fuse" => self.eval.fuse = list(v).map(String::from).collect(),
            "eval.threshold" => self.eval.threshold = parse(key, v)?,
            "paths.dataset" => self.paths.dataset = v.into(),
            "paths.trials" => self.paths.trials = v.into(),
            "paths.checkpoints" => self.paths.checkpoints = v.into(),
            "paths.scores" => self.paths.scores = v.into(),
            "paths.reports" => self.paths.reports = v.into(),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides (e.g. from the command line) and revalidates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::config(k, "unknown key"));
            }
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.audio.validate()?;
        self.video.validate()?;
        if self.video.frame_shape != self.data.frame_shape {
            return Err(Error::config("data.frame_shape", "video encoder and data frame shapes differ"));
        }
        for kind in TopologyKind::ALL {
            let t = self.topology(kind, 2);
            t.validate()?;
            self.train.validate(t.head.use_batchnorm)?;
        }
        if !(self.eval.threshold.is_finite()) {
            return Err(Error::config("eval.threshold", "must be finite"));
        }
        Ok(())
    }

    pub fn topology(&self, kind: TopologyKind, num_classes: usize) -> Topology {
        let multiview = kind == TopologyKind::MultiView;
        Topology {
            kind,
            proj_dim: multiview.then_some(self.model.proj_dim),
            head: HeadConfig {
                hidden_dim: self.model.hidden_dim,
                dropout_p: self.model.dropout_p,
                use_batchnorm: match self.model.batchnorm {
                    BatchNormSetting::Auto => !multiview,
                    BatchNormSetting::On => true,
                    BatchNormSetting::Off => false,
                },
                num_classes,
            },
            arc: self.model.arc,
            lambda_a: self.model.lambda_a,
            lambda_v: self.model.lambda_v,
        }
    }

    fn value(&self, key: &str) -> String {
        let d = &self.data;
        match key {
            "preset" => self.preset.as_str().into(),
            "seed" => self.seed.to_string(),
            "data.num_speakers" => d.num_speakers.to_string(),
            "data.videos_per_speaker" => d.videos_per_speaker.to_string(),
            "data.utts_per_video" => d.utts_per_video.to_string(),
            "data.latent_dim" => d.latent_dim.to_string(),
            "data.sigma_audio" => d.sigma_audio.to_string(),
            "data.sigma_video" => d.sigma_video.to_string(),
            "data.sigma_session" => d.sigma_session.to_string(),
            "data.missing_face_prob" => d.missing_face_prob.to_string(),
            "data.audio_frames_min" => d.audio_frames.0.to_string(),
            "data.audio_frames_max" => d.audio_frames.1.to_string(),
            "data.video_frames" => d.video_frames.to_string(),
            "data.frame_shape" => d.frame_shape.map(|x| x.to_string()).join("x"),
            "audio.conv_blocks" => join(&self.audio.conv_blocks),
            "audio.encoding_dim" => self.audio.encoding_dim.to_string(),
            "audio.attention_dim" => self.audio.attention_dim.to_string(),
            "video.conv_blocks" => join(&self.video.conv_blocks),
            "video.encoding_dim" => self.video.encoding_dim.to_string(),
            "model.proj_dim" => self.model.proj_dim.to_string(),
            "model.hidden_dim" => self.model.hidden_dim.to_string(),
            "model.dropout_p" => self.model.dropout_p.to_string(),
            "model.batchnorm" => match self.model.batchnorm {
                BatchNormSetting::Auto => "auto",
                BatchNormSetting::On => "true",
                BatchNormSetting::Off => "false",
            }
            .into(),
            "model.arc_scale" => self.model.arc.scale.to_string(),
            "model.arc_margin" => self.model.arc.margin.to_string(),
            "model.lambda_a" => self.model.lambda_a.to_string(),
            "model.lambda_v" => self.model.lambda_v.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.plateau_factor" => self.train.plateau_factor.to_string(),
            "train.plateau_patience" => self.train.plateau_patience.to_string(),
            "train.plateau_threshold" => self.train.plateau_threshold.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.crop_frames" => self.train.crop_frames.to_string(),
            "train.shards" => self.train.shards.to_string(),
            "eval.conditions" => self.eval.conditions.iter().map(|c| c.tag()).collect::<Vec<_>>().join(","),
            "eval.fuse" => self.eval.fuse.join(","),
            "eval.threshold" => self.eval.threshold.to_string(),
            "paths.dataset" => self.paths.dataset.display().to_string(),
            "paths.trials" => self.paths.trials.display().to_string(),
            "paths.checkpoints" => self.paths.checkpoints.display().to_string(),
            "paths.scores" => self.paths.scores.display().to_string(),
            "paths.reports" => self.paths.reports.display().to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// Writes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let s = key.split_once('.').map_or("", |(s, _)| s);
            if s != section && !out.is_empty() {
                out.push('\n');
            }
            section = s;
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        for preset in [Preset::Desk, Preset::MirrorPaper] {
            let cfg = RunConfig::preset(preset);
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("train.batchsz = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.batchsz"));
        let err = RunConfig::parse("batchsz = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "batchsz"));
    }

    #[test]
    fn preset_applies_before_other_lines() {
        let cfg = RunConfig::parse("train.lr = 0.5\npreset = mirror-paper\n").unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.audio.encoding_dim, 356);
        assert_eq!(cfg.video.frame_shape, [3, 112, 112]);
    }

    #[test]
    fn comments_blank_lines_and_seed() {
        let cfg = RunConfig::parse("# run\n\nseed = 9  # reseed\ndata.frame_shape = 1x8x8\n").unwrap();
        assert_eq!((cfg.seed, cfg.data.seed, cfg.train.seed), (9, 9, 9));
        assert_eq!(cfg.video.frame_shape, [1, 8, 8]);
    }

    #[test]
    fn malformed_values_and_duplicates_are_rejected() {
        assert!(RunConfig::parse("train.lr = fast").is_err());
        assert!(RunConfig::parse("train.lr = 0.1\ntrain.lr = 0.2").is_err());
        assert!(RunConfig::parse("eval.conditions = AA,XY").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        let err = RunConfig::parse("data.videos_per_speaker = 1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "data.videos_per_speaker"));
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let mut cfg = RunConfig::parse("train.max_epochs = 3").unwrap();
        cfg.apply_overrides(["train.max_epochs=5", "audio.conv_blocks=4x3s2"]).unwrap();
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.audio.conv_blocks, vec![ConvBlock::new(4, 3, 2)]);
        assert!(cfg.apply_overrides(["train.batch_size=1"]).is_err());
        assert!(cfg.apply_overrides(["nope=1"]).is_err());
    }

    #[test]
    fn multiview_topology_drops_batchnorm_under_auto() {
        let cfg = RunConfig::default();
        assert!(!cfg.topology(TopologyKind::MultiView, 4).head.use_batchnorm);
        assert!(cfg.topology(TopologyKind::MidFusion, 4).head.use_batchnorm);
        assert_eq!(cfg.topology(TopologyKind::MultiView, 4).proj_dim, Some(64));
        assert_eq!(cfg.topology(TopologyKind::UnimodalA, 4).proj_dim, None);
    }
}
