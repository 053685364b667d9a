use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::schedule::{Plateau, Sgd};
use super::trainer::{EpochLog, TrainState, Trainer};
use crate::autodiff::{BatchNormStats, Mode, Tensor};
use crate::container;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Model, Topology, TopologyKind};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVSC";
pub const CHECKPOINT_VERSION: u32 = 1;

const BN_MEAN: &str = "bn.running_mean";
const BN_VAR: &str = "bn.running_var";
const VELOCITY: &str = "velocity.";

/// Everything needed to resume training or to evaluate a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub state: TrainState<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    topology: Topology,
    audio: Option<EncoderConfig>,
    video: Option<EncoderConfig>,
    train: TrainConfig,
    epoch: usize,
    schedule: Plateau,
    log: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn kind(&self) -> TopologyKind {
        self.model.kind()
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// Fails unless the stored model has the given topology.
    pub fn expect_topology(&self, kind: TopologyKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::config(
                "topology",
                format!("checkpoint holds a {} model, not {kind}", self.kind()),
            ));
        }
        Ok(())
    }

    /// The stored model in inference mode, in the requested precision.
    pub fn infer_model<T: Scalar>(&self) -> Model<T> {
        let mut m = self.model.cast();
        m.set_mode(Mode::Infer);
        m
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn checkpoint(&self) -> Checkpoint {
        let velocity = self
            .state
            .optimizer
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x.as_f64() as f32).collect()))
            .collect();
        Checkpoint {
            model: self.model.cast(),
            config: self.config.clone(),
            state: TrainState {
                epoch: self.state.epoch,
                schedule: self.state.schedule.clone(),
                optimizer: Sgd {
                    momentum: self.state.optimizer.momentum,
                    velocity,
                },
                log: self.state.log.clone(),
            },
        }
    }

    /// Continues a stored run; `max_epochs` may be raised to train further.
    pub fn resume(checkpoint: &Checkpoint, max_epochs: Option<usize>) -> Result<Self> {
        let mut config = checkpoint.config.clone();
        if let Some(m) = max_epochs {
            config.max_epochs = m;
        }
        let mut trainer = Trainer::new(checkpoint.model.cast(), config)?;
        let s = &checkpoint.state;
        trainer.state = TrainState {
            epoch: s.epoch,
            schedule: s.schedule.clone(),
            optimizer: Sgd {
                momentum: s.optimizer.momentum,
                velocity: s
                    .optimizer
                    .velocity
                    .iter()
                    .map(|(k, v)| (k.clone(), v.iter().map(|&x| T::lit(x as f64)).collect()))
                    .collect(),
            },
            log: s.log.clone(),
        };
        Ok(trainer)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: 4 * payload.len() as u64,
        });
        payload.extend_from_slice(values);
    };
    for (name, t) in ckpt.model.params() {
        push(name.clone(), t.shape().to_vec(), t.values());
    }
    if let Some(bn) = ckpt.model.bn_stats() {
        push(BN_MEAN.into(), vec![bn.mean.len()], &bn.mean);
        push(BN_VAR.into(), vec![bn.var.len()], &bn.var);
    }
    for (name, v) in &ckpt.state.optimizer.velocity {
        push(format!("{VELOCITY}{name}"), vec![v.len()], v);
    }
    let header = Header {
        topology: *ckpt.model.topology(),
        audio: ckpt.model.audio_config().cloned(),
        video: ckpt.model.video_config().cloned(),
        train: ckpt.config.clone(),
        epoch: ckpt.state.epoch,
        schedule: ckpt.state.schedule.clone(),
        log: ckpt.state.log.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    container::write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &json, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (json, payload) = container::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    let (mut mean, mut var) = (None, None);
    let mut end = 0u64;
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let values = container::floats(&payload, entry.offset, count, &entry.name)?;
        end = end.max(entry.offset + 4 * count as u64);
        if entry.name == BN_MEAN {
            mean = Some(values);
        } else if entry.name == BN_VAR {
            var = Some(values);
        } else if let Some(p) = entry.name.strip_prefix(VELOCITY) {
            velocity.insert(p.to_string(), values);
        } else if params
            .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?)
            .is_some()
        {
            return Err(Error::Format(format!("duplicate tensor `{}`", entry.name)));
        }
    }
    if end != payload.len() as u64 {
        return Err(Error::Format(format!(
            "{}: tensor table covers {end} of {} payload bytes",
            path.display(),
            payload.len()
        )));
    }
    let bn = match (mean, var) {
        (Some(mean), Some(var)) => Some(BatchNormStats { mean, var }),
        (None, None) => None,
        _ => return Err(Error::Format("batchnorm statistics are incomplete".into())),
    };
    let model = Model::from_parts(header.topology, header.audio, header.video, params, bn)?;
    if let Some(k) = velocity.keys().find(|k| model.param(k).is_none()) {
        return Err(Error::Format(format!("optimizer state for unknown parameter `{k}`")));
    }
    Ok(Checkpoint {
        model,
        state: TrainState {
            epoch: header.epoch,
            schedule: header.schedule,
            optimizer: Sgd {
                momentum: header.train.momentum,
                velocity,
            },
            log: header.log,
        },
        config: header.train,
    })
}
