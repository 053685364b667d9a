use std::collections::BTreeMap;

use rand::Rng;

use super::config::{ArcConfig, ConvBlock, EncoderConfig, HeadConfig};
use crate::autodiff::{BatchNormStats, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameter name → tape variable for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Params(pub(crate) BTreeMap<String, Var>);

impl Params {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Variables of the additive attention scorer `vᵀ·tanh(W·h + b)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub weight: Var,
    pub bias: Var,
    pub vector: Var,
}

fn conv_stack<T: Scalar>(
    tape: &Tape<T>,
    p: &Params,
    prefix: &str,
    blocks: &[ConvBlock],
    mut x: Var,
) -> Result<Var> {
    for (i, block) in blocks.iter().enumerate() {
        x = tape.pad2d(x, block.pad())?;
        x = tape.conv2d(x, p.get(&format!("{prefix}.conv{i}.weight"))?, block.stride)?;
        x = tape.channel_bias(x, p.get(&format!("{prefix}.conv{i}.bias"))?)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Audio branch: `x[N×1×T×64]` → conv stack → per-frame projection →
/// attentive pooling → `[N×encoding_dim]`.
pub fn encode_audio<T: Scalar>(tape: &Tape<T>, p: &Params, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let maps = conv_stack(tape, p, "audio", &cfg.conv_blocks, x)?;
    let steps = tape.shape(maps)[2];
    let seq = tape.conv_to_seq(maps)?;
    let frames = tape.linear(seq, p.get("audio.frame.weight")?, p.get("audio.frame.bias")?)?;
    let att = AttentionParams {
        weight: p.get("audio.att.weight")?,
        bias: p.get("audio.att.bias")?,
        vector: p.get("audio.att.vector")?,
    };
    attentive_pool(tape, frames, &vec![steps; n], att)
}

/// Video branch: `frames[(ΣT)×C×H×W]` → conv stack → per-frame projection →
/// temporal mean per utterance → `[N×encoding_dim]`.
pub fn encode_video<T: Scalar>(
    tape: &Tape<T>,
    p: &Params,
    cfg: &EncoderConfig,
    frames: Var,
    lengths: &[usize],
) -> Result<Var> {
    let maps = conv_stack(tape, p, "video", &cfg.conv_blocks, frames)?;
    let s = tape.shape(maps);
    let flat = tape.reshape(maps, &[s[0], s[1] * s[2] * s[3]])?;
    let per_frame = tape.linear(flat, p.get("video.frame.weight")?, p.get("video.frame.bias")?)?;
    temporal_pool(tape, per_frame, lengths)
}

/// Self-attentive pooling of a frame sequence `seq[(ΣT)×D]`:
/// `α = softmax_t(vᵀ·tanh(W·h_t + b))`, output `Σ_t α_t·h_t` per segment.
pub fn attentive_pool<T: Scalar>(
    tape: &Tape<T>,
    seq: Var,
    lengths: &[usize],
    att: AttentionParams,
) -> Result<Var> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptySequence("attentive_pool"));
    }
    let hidden = tape.tanh(tape.linear(seq, att.weight, att.bias)?);
    let scores = tape.matmul(hidden, att.vector)?;
    let alpha = tape.segment_softmax(scores, lengths)?;
    tape.segment_weighted_sum(seq, alpha, lengths)
}

/// Arithmetic mean over time of each segment of `seq[(ΣT)×D]`.
pub fn temporal_pool<T: Scalar>(tape: &Tape<T>, seq: Var, lengths: &[usize]) -> Result<Var> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptySequence("temporal_pool"));
    }
    tape.segment_mean(seq, lengths)
}

/// Head trunk FC → ReLU → [BN] → dropout. The arc-margin class weights are
/// applied separately by the loss.
pub fn head_features<T: Scalar, R: Rng + ?Sized>(
    tape: &Tape<T>,
    p: &Params,
    cfg: &HeadConfig,
    x: Var,
    mode: Mode,
    bn: Option<&mut BatchNormStats<T>>,
    rng: &mut R,
) -> Result<Var> {
    let mut h = tape.linear(x, p.get("head.fc.weight")?, p.get("head.fc.bias")?)?;
    h = tape.relu(h);
    if cfg.use_batchnorm {
        let stats = bn.ok_or_else(|| Error::Parameter("head batchnorm needs running statistics".into()))?;
        h = tape.batchnorm(h, p.get("head.bn.gamma")?, p.get("head.bn.beta")?, stats, mode)?;
    }
    tape.dropout(h, cfg.dropout_p, mode, rng)
}

/// Cosine similarities between L2-normalized embeddings and class weights.
pub fn cosine_matrix<T: Scalar>(tape: &Tape<T>, embeddings: Var, class_weights: Var) -> Result<Var> {
    let e = tape.l2_normalize(embeddings)?;
    let w = tape.l2_normalize(class_weights)?;
    tape.matmul_t(e, w)
}

/// Margin-free logits `s·cosθ`.
pub fn cosine_logits<T: Scalar>(tape: &Tape<T>, embeddings: Var, class_weights: Var, scale: f64) -> Result<Var> {
    let cos = cosine_matrix(tape, embeddings, class_weights)?;
    Ok(tape.scale(cos, T::lit(scale)))
}

/// Additive angular margin softmax loss, averaged over the batch.
pub fn arc_margin_loss<T: Scalar>(
    tape: &Tape<T>,
    embeddings: Var,
    class_weights: Var,
    labels: &[usize],
    arc: &ArcConfig,
) -> Result<Var> {
    let (es, ws) = (tape.shape(embeddings), tape.shape(class_weights));
    if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] {
        return Err(Error::Dimension {
            op: "arc_margin_loss",
            lhs: es,
            rhs: ws,
        });
    }
    let cos = cosine_matrix(tape, embeddings, class_weights)?;
    let logits = tape.arc_margin(cos, labels, arc.scale, arc.margin)?;
    tape.cross_entropy(logits, labels)
}

/// Weighted sum of the two per-modality losses, `λ_A·L_A + λ_V·L_V`.
pub fn multitask_loss<T: Scalar>(
    tape: &Tape<T>,
    loss_a: Var,
    loss_v: Var,
    lambda_a: f64,
    lambda_v: f64,
) -> Result<Var> {
    if !(lambda_a >= 0.0 && lambda_v >= 0.0) {
        return Err(Error::Parameter("multitask weights must be nonnegative".into()));
    }
    let a = tape.scale(loss_a, T::lit(lambda_a));
    let v = tape.scale(loss_v, T::lit(lambda_v));
    tape.add(a, v)
}
