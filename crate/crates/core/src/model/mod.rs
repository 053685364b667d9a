//! Encoders, pooling, classifier heads, losses, and the four network topologies.
//!
//! * `UnimodalA` / `UnimodalV`: one encoder followed by a classifier head.
//! * `MidFusion`: both encoders, concatenated along the feature axis, one head.
//! * `MultiView`: both encoders, each projected to `proj_dim`, sharing a single
//!   head so both modalities land in one embedding space. Trained with the
//!   weighted sum of the two per-modality losses.

mod batch;
mod config;
mod layers;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use batch::{AudioWindow, Batch};
pub use config::{
    ArcConfig, ConvBlock, EncoderConfig, HeadConfig, Modality, Topology, TopologyKind, MEL_BINS,
    MOBILENET_V2_AUDIO_BLOCKS,
};
pub use layers::{
    arc_margin_loss, attentive_pool, cosine_logits, cosine_matrix, encode_audio, encode_video,
    head_features, multitask_loss, temporal_pool, AttentionParams, Params,
};

use crate::autodiff::{BatchNormStats, Mode, Tape, Tensor, Var};
use crate::data::AVSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Which input produced a head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Audio,
    Video,
    Joint,
}

/// One classifier output of a training forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub branch: Branch,
    /// Head features fed to the arc-margin layer, `[N × hidden_dim]`.
    pub features: Var,
    pub class_weights: Var,
    /// Cosine logits `s·cosθ` without margin, `[N × num_classes]`.
    pub logits: Var,
    /// Variables of every head parameter used to produce this output.
    pub head_params: Vec<Var>,
}

/// Loss, per-parameter gradients and updated batchnorm statistics of one batch.
#[derive(Debug, Clone)]
pub struct GradientStep<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<T>>,
    pub bn_stats: Option<BatchNormStats<T>>,
    /// Correctly classified (output, sample) pairs, by margin-free argmax.
    pub correct: usize,
    pub total: usize,
}

/// A network topology together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    topology: Topology,
    audio: Option<EncoderConfig>,
    video: Option<EncoderConfig>,
    params: BTreeMap<String, Tensor<T>>,
    bn_stats: Option<BatchNormStats<T>>,
    mode: Mode,
}

/// Builds a model with parameters drawn deterministically from `seed`.
///
/// Weights are uniform in `±1/sqrt(fan_in)`, biases and BN shifts zero, BN
/// scales one. Encoders not used by the topology are dropped.
pub fn build_model<T: Scalar>(
    topology: Topology,
    audio_cfg: &EncoderConfig,
    video_cfg: &EncoderConfig,
    seed: u64,
) -> Result<Model<T>> {
    topology.validate()?;
    if audio_cfg.modality != Modality::Audio || video_cfg.modality != Modality::Video {
        return Err(Error::config("model", "encoder configs must be (audio, video)"));
    }
    let audio = topology.kind.uses(Modality::Audio).then(|| audio_cfg.clone());
    let video = topology.kind.uses(Modality::Video).then(|| video_cfg.clone());
    for cfg in audio.iter().chain(video.iter()) {
        cfg.validate()?;
    }
    let specs = param_specs(&topology, audio.as_ref(), video.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let values: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
            }
        };
        let t = Tensor::new(spec.shape, values)?.with_grad();
        if params.insert(spec.name.clone(), t).is_some() {
            return Err(Error::Parameter(format!("duplicate parameter name `{}`", spec.name)));
        }
    }
    let bn_stats = topology
        .head
        .use_batchnorm
        .then(|| BatchNormStats::new(topology.head.hidden_dim));
    Ok(Model {
        topology,
        audio,
        video,
        params,
        bn_stats,
        mode: Mode::Train,
    })
}

impl<T: Scalar> Model<T> {
    /// Reassembles a model from stored parts, checking every parameter name and
    /// shape against what the topology requires.
    pub fn from_parts(
        topology: Topology,
        audio: Option<EncoderConfig>,
        video: Option<EncoderConfig>,
        params: BTreeMap<String, Tensor<T>>,
        bn_stats: Option<BatchNormStats<T>>,
    ) -> Result<Self> {
        topology.validate()?;
        for (m, cfg) in [(Modality::Audio, &audio), (Modality::Video, &video)] {
            match cfg {
                Some(c) if c.modality != m => {
                    return Err(Error::Format(format!("{m} encoder slot holds a {} config", c.modality)))
                }
                Some(c) => c.validate()?,
                None if topology.kind.uses(m) => {
                    return Err(Error::Format(format!("{} model lacks its {m} encoder config", topology.kind)))
                }
                None => {}
            }
        }
        let specs = param_specs(&topology, audio.as_ref(), video.as_ref())?;
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "load parameter",
                    lhs: spec.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut model = Model {
            topology,
            audio,
            video,
            params: params.into_iter().map(|(k, t)| (k, t.with_grad())).collect(),
            bn_stats: None,
            mode: Mode::Infer,
        };
        model.set_bn_stats(bn_stats)?;
        Ok(model)
    }
}

fn encoder_specs(cfg: &EncoderConfig, specs: &mut Vec<ParamSpec>) {
    let prefix = cfg.modality.to_string();
    let mut c_in = cfg.input_channels();
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        let fan_in = c_in * b.kernel * b.kernel;
        specs.push(ParamSpec::new(
            format!("{prefix}.conv{i}.weight"),
            vec![b.out_channels, c_in, b.kernel, b.kernel],
            Init::Uniform { fan_in },
        ));
        specs.push(ParamSpec::new(format!("{prefix}.conv{i}.bias"), vec![b.out_channels], Init::Zeros));
        c_in = b.out_channels;
    }
    let f = cfg.frame_feature_dim();
    let d = cfg.encoding_dim;
    specs.push(ParamSpec::new(format!("{prefix}.frame.weight"), vec![f, d], Init::Uniform { fan_in: f }));
    specs.push(ParamSpec::new(format!("{prefix}.frame.bias"), vec![d], Init::Zeros));
    if cfg.modality == Modality::Audio {
        let a = cfg.attention_dim;
        specs.push(ParamSpec::new("audio.att.weight", vec![d, a], Init::Uniform { fan_in: d }));
        specs.push(ParamSpec::new("audio.att.bias", vec![a], Init::Zeros));
        specs.push(ParamSpec::new("audio.att.vector", vec![a, 1], Init::Uniform { fan_in: a }));
    }
}

fn param_specs(
    topology: &Topology,
    audio: Option<&EncoderConfig>,
    video: Option<&EncoderConfig>,
) -> Result<Vec<ParamSpec>> {
    let mut specs = Vec::new();
    if let Some(a) = audio {
        encoder_specs(a, &mut specs);
    }
    if let Some(v) = video {
        encoder_specs(v, &mut specs);
    }
    let head_in = match (topology.kind, audio, video) {
        (TopologyKind::UnimodalA, Some(a), _) => a.encoding_dim,
        (TopologyKind::UnimodalV, _, Some(v)) => v.encoding_dim,
        (TopologyKind::MidFusion, Some(a), Some(v)) => a.encoding_dim + v.encoding_dim,
        (TopologyKind::MultiView, Some(a), Some(v)) => {
            let p = topology
                .proj_dim
                .ok_or_else(|| Error::config("model.proj_dim", "multiview needs a projection width"))?;
            for (name, cfg) in [("audio", a), ("video", v)] {
                let d = cfg.encoding_dim;
                specs.push(ParamSpec::new(format!("proj.{name}.weight"), vec![d, p], Init::Uniform { fan_in: d }));
                specs.push(ParamSpec::new(format!("proj.{name}.bias"), vec![p], Init::Zeros));
            }
            p
        }
        _ => return Err(Error::config("model", "topology is missing a required encoder")),
    };
    let h = &topology.head;
    specs.push(ParamSpec::new("head.fc.weight", vec![head_in, h.hidden_dim], Init::Uniform { fan_in: head_in }));
    specs.push(ParamSpec::new("head.fc.bias", vec![h.hidden_dim], Init::Zeros));
    if h.use_batchnorm {
        specs.push(ParamSpec::new("head.bn.gamma", vec![h.hidden_dim], Init::Ones));
        specs.push(ParamSpec::new("head.bn.beta", vec![h.hidden_dim], Init::Zeros));
    }
    specs.push(ParamSpec::new(
        "head.arc.weight",
        vec![h.num_classes, h.hidden_dim],
        Init::Uniform { fan_in: h.hidden_dim },
    ));
    Ok(specs)
}

fn argmax_hits<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count()
}

impl<T: Scalar> Model<T> {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn kind(&self) -> TopologyKind {
        self.topology.kind
    }

    pub fn audio_config(&self) -> Option<&EncoderConfig> {
        self.audio.as_ref()
    }

    pub fn video_config(&self) -> Option<&EncoderConfig> {
        self.video.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn bn_stats(&self) -> Option<&BatchNormStats<T>> {
        self.bn_stats.as_ref()
    }

    pub fn set_bn_stats(&mut self, stats: Option<BatchNormStats<T>>) -> Result<()> {
        let want = self.topology.head.use_batchnorm.then_some(self.topology.head.hidden_dim);
        let got = stats.as_ref().map(|s| s.mean.len());
        if want != got || stats.as_ref().is_some_and(|s| s.var.len() != s.mean.len()) {
            return Err(Error::Format(format!(
                "batchnorm statistics of width {got:?} do not fit a head expecting {want:?}"
            )));
        }
        self.bn_stats = stats;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Same topology and parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            topology: self.topology,
            audio: self.audio.clone(),
            video: self.video.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_stats: self.bn_stats.as_ref().map(|s| BatchNormStats {
                mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
            }),
            mode: self.mode,
        }
    }

    /// Records every parameter on `tape`; trainable ones participate in backward.
    pub fn register(&self, tape: &Tape<T>, trainable: bool) -> Params {
        Params(
            self.params
                .iter()
                .map(|(name, t)| {
                    let v = if trainable { tape.param(t) } else { tape.constant(t.clone()) };
                    (name.clone(), v)
                })
                .collect(),
        )
    }

    fn needs(&self, modality: Modality) -> bool {
        self.topology.kind.uses(modality)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let classes = self.topology.head.num_classes;
        match labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::Label { label, classes }),
            None => Ok(()),
        }
    }

    fn encode_audio_batch(&self, tape: &Tape<T>, p: &Params, batch: &Batch<T>) -> Result<Var> {
        let cfg = self.audio.as_ref().ok_or_else(|| Error::Capability("model has no audio encoder".into()))?;
        let audio = batch
            .audio
            .as_ref()
            .ok_or_else(|| Error::Capability("batch carries no audio".into()))?;
        let x = tape.constant(audio.clone());
        encode_audio(tape, p, cfg, x)
    }

    fn encode_video_batch(&self, tape: &Tape<T>, p: &Params, batch: &Batch<T>) -> Result<Var> {
        let cfg = self.video.as_ref().ok_or_else(|| Error::Capability("model has no video encoder".into()))?;
        let (frames, lengths) = batch
            .video
            .as_ref()
            .ok_or_else(|| Error::Capability("batch carries no video".into()))?;
        if frames.shape()[1..] != cfg.frame_shape {
            return Err(Error::Dimension {
                op: "video encoder input",
                lhs: cfg.frame_shape.to_vec(),
                rhs: frames.shape()[1..].to_vec(),
            });
        }
        let x = tape.constant(frames.clone());
        encode_video(tape, p, cfg, x, lengths)
    }

    /// Runs every active classifier output of the topology in the given mode.
    ///
    /// `bn` holds the head's running statistics; train mode updates it.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        p: &Params,
        batch: &Batch<T>,
        mode: Mode,
        bn: &mut Option<BatchNormStats<T>>,
        rng: &mut R,
    ) -> Result<Vec<HeadOutput>> {
        self.check_labels(&batch.labels)?;
        let head = &self.topology.head;
        let scale = self.topology.arc.scale;
        let class_weights = p.get("head.arc.weight")?;
        let mut head_params = vec![p.get("head.fc.weight")?, p.get("head.fc.bias")?];
        if head.use_batchnorm {
            head_params.push(p.get("head.bn.gamma")?);
            head_params.push(p.get("head.bn.beta")?);
        }
        head_params.push(class_weights);

        let mut run_head = |x: Var, branch: Branch, rng: &mut R| -> Result<HeadOutput> {
            let features = head_features(tape, p, head, x, mode, bn.as_mut(), rng)?;
            let logits = cosine_logits(tape, features, class_weights, scale)?;
            Ok(HeadOutput {
                branch,
                features,
                class_weights,
                logits,
                head_params: head_params.clone(),
            })
        };

        match self.topology.kind {
            TopologyKind::UnimodalA => {
                let a = self.encode_audio_batch(tape, p, batch)?;
                Ok(vec![run_head(a, Branch::Audio, rng)?])
            }
            TopologyKind::UnimodalV => {
                let v = self.encode_video_batch(tape, p, batch)?;
                Ok(vec![run_head(v, Branch::Video, rng)?])
            }
            TopologyKind::MidFusion => {
                let a = self.encode_audio_batch(tape, p, batch)?;
                let v = self.encode_video_batch(tape, p, batch)?;
                let joint = tape.concat(&[a, v])?;
                Ok(vec![run_head(joint, Branch::Joint, rng)?])
            }
            TopologyKind::MultiView => {
                let a = self.encode_audio_batch(tape, p, batch)?;
                let a = tape.linear(a, p.get("proj.audio.weight")?, p.get("proj.audio.bias")?)?;
                let v = self.encode_video_batch(tape, p, batch)?;
                let v = tape.linear(v, p.get("proj.video.weight")?, p.get("proj.video.bias")?)?;
                let out_a = run_head(a, Branch::Audio, rng)?;
                let out_v = run_head(v, Branch::Video, rng)?;
                Ok(vec![out_a, out_v])
            }
        }
    }

    /// Training-mode forward pass; errors unless the model is in train mode.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        p: &Params,
        batch: &Batch<T>,
        bn: &mut Option<BatchNormStats<T>>,
        rng: &mut R,
    ) -> Result<Vec<HeadOutput>> {
        if self.mode != Mode::Train {
            return Err(Error::Parameter("forward_train needs the model in train mode".into()));
        }
        self.forward(tape, p, batch, Mode::Train, bn, rng)
    }

    /// Scalar training objective over the outputs of [`forward`](Self::forward).
    pub fn objective(&self, tape: &Tape<T>, outputs: &[HeadOutput], labels: &[usize]) -> Result<Var> {
        let arc = &self.topology.arc;
        let losses = outputs
            .iter()
            .map(|o| arc_margin_loss(tape, o.features, o.class_weights, labels, arc))
            .collect::<Result<Vec<_>>>()?;
        match losses.as_slice() {
            [single] => Ok(*single),
            [la, lv] => multitask_loss(tape, *la, *lv, self.topology.lambda_a, self.topology.lambda_v),
            _ => Err(Error::Parameter("unexpected number of head outputs".into())),
        }
    }

    /// Worst relative error between tape gradients of the training objective
    /// and central differences with step `h`, over every parameter. Dropout
    /// draws come from a fixed seed so the objective is deterministic.
    pub fn grad_check(&self, batch: &Batch<T>, h: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, tensor) in &self.params {
            let err = crate::autodiff::grad_check(
                |tape, x| {
                    let mut p = self.register(tape, false);
                    p.0.insert(name.clone(), x);
                    let mut bn = self.bn_stats.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let outs = self.forward(tape, &p, batch, Mode::Train, &mut bn, &mut rng)?;
                    self.objective(tape, &outs, &batch.labels)
                },
                tensor,
                h,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Loss and gradients for one batch, with the loss multiplied by `weight`.
    ///
    /// The model itself is not modified; batchnorm statistics are returned.
    pub fn gradient_step<R: Rng + ?Sized>(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        weight: f64,
        rng: &mut R,
    ) -> Result<GradientStep<T>> {
        let tape = Tape::new();
        let p = self.register(&tape, true);
        let mut bn = self.bn_stats.clone();
        let outputs = self.forward(&tape, &p, batch, mode, &mut bn, rng)?;
        let loss = self.objective(&tape, &outputs, &batch.labels)?;
        let weighted = if weight == 1.0 { loss } else { tape.scale(loss, T::lit(weight)) };
        let k = self.topology.head.num_classes;
        let correct = outputs
            .iter()
            .map(|o| argmax_hits(&tape.values(o.logits), k, &batch.labels))
            .sum();
        let total = outputs.len() * batch.len();
        let loss_value = tape.scalar(loss).as_f64();
        let grads = tape.backward(weighted)?;
        let grads = p
            .iter()
            .map(|(name, v)| (name.to_owned(), grads.get_or_zeros(v, self.params[name].numel())))
            .collect();
        Ok(GradientStep {
            loss: loss_value,
            grads,
            bn_stats: bn,
            correct,
            total,
        })
    }

    /// Loss without gradients (e.g. validation in infer mode).
    pub fn evaluate_loss<R: Rng + ?Sized>(&self, batch: &Batch<T>, mode: Mode, rng: &mut R) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let mut bn = self.bn_stats.clone();
        let outputs = self.forward(&tape, &p, batch, mode, &mut bn, rng)?;
        let loss = self.objective(&tape, &outputs, &batch.labels)?;
        let k = self.topology.head.num_classes;
        let correct = outputs
            .iter()
            .map(|o| argmax_hits(&tape.values(o.logits), k, &batch.labels))
            .sum();
        Ok((tape.scalar(loss).as_f64(), correct))
    }

    /// Verification embedding of one sample for one modality (infer mode).
    ///
    /// Unimodal and mid-fusion models return the pooled encoder output of the
    /// branch; the multi-view model returns the projected shared-space vector.
    pub fn embed(&self, sample: &AVSample, modality: Modality) -> Result<Tensor<T>> {
        if !self.needs(modality) {
            return Err(Error::Capability(format!(
                "{} model has no {modality} encoder",
                self.topology.kind
            )));
        }
        let batch = Batch::from_samples(
            &[sample],
            vec![0],
            AudioWindow::Full,
            modality == Modality::Audio,
            modality == Modality::Video,
        )?;
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let encoded = match modality {
            Modality::Audio => self.encode_audio_batch(&tape, &p, &batch)?,
            Modality::Video => self.encode_video_batch(&tape, &p, &batch)?,
        };
        let out = if self.topology.kind == TopologyKind::MultiView {
            let prefix = format!("proj.{modality}");
            tape.linear(encoded, p.get(&format!("{prefix}.weight"))?, p.get(&format!("{prefix}.bias"))?)?
        } else {
            encoded
        };
        let d = tape.shape(out)[1];
        Tensor::new(vec![d], tape.values(out))
    }

    /// Joint audio-visual embedding of a mid-fusion model: the concatenated
    /// branch encodings that enter its head.
    pub fn embed_joint(&self, sample: &AVSample) -> Result<Tensor<T>> {
        if self.topology.kind != TopologyKind::MidFusion {
            return Err(Error::Capability(format!(
                "joint audio-visual embeddings need a midfusion model, not {}",
                self.topology.kind
            )));
        }
        let a = self.embed(sample, Modality::Audio)?;
        let v = self.embed(sample, Modality::Video)?;
        let mut values = a.into_values();
        values.extend(v.into_values());
        let d = values.len();
        Tensor::new(vec![d], values)
    }
}
