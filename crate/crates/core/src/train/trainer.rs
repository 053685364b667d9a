use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::schedule::{Plateau, Sgd};
use crate::autodiff::{BatchNormStats, Mode};
use crate::data::{speaker_labels, AVSample, Dataset};
use crate::error::{Error, Result};
use crate::model::{AudioWindow, Batch, Modality, Model};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate the epoch's updates used.
    pub lr: f64,
    /// Margin-free argmax accuracy over the epoch's training batches (train mode).
    pub train_accuracy: f64,
}

pub const LOG_CSV_HEADER: &str = "epoch,train_loss,val_loss,lr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.lr)
    }
}

pub fn format_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_CSV_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

/// Training and validation samples with contiguous speaker labels.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub train: Vec<&'a AVSample>,
    pub train_labels: Vec<usize>,
    pub val: Vec<&'a AVSample>,
    pub val_labels: Vec<usize>,
    pub frame_shape: [usize; 3],
}

impl<'a> TrainData<'a> {
    /// Labels follow ascending speaker id over the training split; every
    /// validation speaker must also appear in training.
    pub fn new(dataset: &'a Dataset, train_ids: &[u32], val_ids: &[u32]) -> Result<Self> {
        let records: BTreeMap<u32, _> = dataset.manifest.records.iter().map(|r| (r.utterance_id, r)).collect();
        let lookup = |id: &u32| records.get(id).copied().ok_or_else(|| Error::Protocol(format!("utterance {id} not in dataset")));
        let train_records = train_ids.iter().map(lookup).collect::<Result<Vec<_>>>()?;
        let labels = speaker_labels(train_records.iter().copied());
        let label_of = |s: &AVSample| {
            labels
                .get(&s.speaker_id)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("validation speaker {} has no training utterances", s.speaker_id)))
        };
        let train = train_ids.iter().map(|&id| dataset.sample(id)).collect::<Result<Vec<_>>>()?;
        let val = val_ids.iter().map(|&id| dataset.sample(id)).collect::<Result<Vec<_>>>()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Protocol("training and validation splits must both be non-empty".into()));
        }
        Ok(TrainData {
            train_labels: train.iter().map(|s| label_of(s)).collect::<Result<_>>()?,
            val_labels: val.iter().map(|s| label_of(s)).collect::<Result<_>>()?,
            train,
            val,
            frame_shape: dataset.frame_shape(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train_labels.iter().collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u8)]
enum Stream {
    Shuffle = 1,
    Crop = 2,
    Dropout = 3,
}

/// Independent stream for one (epoch, batch, shard) slot, so that resuming
/// needs no stored generator state.
fn slot_rng(seed: u64, stream: Stream, epoch: usize, batch: usize, shard: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(batch as u64).to_le_bytes());
    key[24..28].copy_from_slice(&(shard as u32).to_le_bytes());
    key[28] = stream as u8;
    ChaCha8Rng::from_seed(key)
}

/// Contiguous shard ranges; earlier shards take the remainder.
fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / shards, n % shards);
    let mut start = 0;
    (0..shards)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Optimizer, schedule and log of a training run in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub schedule: Plateau,
    pub optimizer: Sgd<T>,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate(model.topology().head.use_batchnorm)?;
        model.set_mode(Mode::Train);
        let state = TrainState {
            epoch: 0,
            schedule: Plateau::new(config.lr, config.plateau_factor, config.plateau_patience, config.plateau_threshold),
            optimizer: Sgd::new(config.momentum),
            log: Vec::new(),
        };
        Ok(Trainer { model, config, state })
    }

    pub fn lr(&self) -> f64 {
        self.state.schedule.lr
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        let classes = self.model.topology().head.num_classes;
        if data.num_classes() != classes {
            return Err(Error::config(
                "head.num_classes",
                format!("model has {classes} classes but the training split has {} speakers", data.num_classes()),
            ));
        }
        if let Some(v) = self.model.video_config() {
            if v.frame_shape != data.frame_shape {
                return Err(Error::Dimension {
                    op: "video frame shape",
                    lhs: v.frame_shape.to_vec(),
                    rhs: data.frame_shape.to_vec(),
                });
            }
        }
        Ok(())
    }

    fn batch(&self, samples: &[&AVSample], labels: Vec<usize>, starts: Vec<usize>) -> Result<Batch<T>> {
        let kind = self.model.kind();
        Batch::from_samples(
            samples,
            labels,
            AudioWindow::Crop {
                len: self.config.crop_frames,
                starts,
            },
            kind.uses(Modality::Audio),
            kind.uses(Modality::Video),
        )
    }

    /// Runs one epoch of SGD followed by validation and the plateau rule.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochLog> {
        self.check_data(data)?;
        self.model.set_mode(Mode::Train);
        let epoch = self.state.epoch;
        let seed = self.config.seed;
        let lr = self.state.schedule.lr;
        let min_batch = if self.model.topology().head.use_batchnorm { 2 * self.config.shards } else { self.config.shards };

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut slot_rng(seed, Stream::Shuffle, epoch, 0, 0));

        let (mut loss_sum, mut seen, mut correct, mut outputs) = (0.0, 0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < min_batch {
                continue;
            }
            let samples: Vec<&AVSample> = chunk.iter().map(|&i| data.train[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train_labels[i]).collect();
            let mut crop = slot_rng(seed, Stream::Crop, epoch, b, 0);
            let starts: Vec<usize> = samples.iter().map(|s| crop.gen_range(0..s.audio_frames())).collect();

            let n = chunk.len();
            let steps = shard_ranges(n, self.config.shards)
                .into_par_iter()
                .enumerate()
                .map(|(r, range)| {
                    let batch = self.batch(&samples[range.clone()], labels[range.clone()].to_vec(), starts[range.clone()].to_vec())?;
                    let weight = range.len() as f64 / n as f64;
                    let mut rng = slot_rng(seed, Stream::Dropout, epoch, b, r);
                    self.model.gradient_step(&batch, Mode::Train, weight, &mut rng).map(|s| (weight, s))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut loss = 0.0;
            let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
            let mut stats: Option<BatchNormStats<T>> = None;
            for (weight, step) in &steps {
                loss += weight * step.loss;
                correct += step.correct;
                outputs += step.total;
                for (name, g) in &step.grads {
                    match grads.get_mut(name) {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &d)| *a += d),
                        None => {
                            grads.insert(name.clone(), g.clone());
                        }
                    }
                }
                if let Some(s) = &step.bn_stats {
                    let acc = stats.get_or_insert_with(|| BatchNormStats {
                        mean: vec![T::zero(); s.mean.len()],
                        var: vec![T::zero(); s.var.len()],
                    });
                    let share = T::lit(1.0 / steps.len() as f64);
                    acc.mean.iter_mut().zip(&s.mean).for_each(|(a, &m)| *a += share * m);
                    acc.var.iter_mut().zip(&s.var).for_each(|(a, &v)| *a += share * v);
                }
            }
            if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch: epoch + 1, batch: b });
            }
            self.state.optimizer.step(self.model.params_mut(), &grads, lr)?;
            if stats.is_some() {
                self.model.set_bn_stats(stats)?;
            }
            loss_sum += loss * n as f64;
            seen += n;
        }
        if seen == 0 {
            return Err(Error::config("train.batch_size", "no training batch is large enough"));
        }

        let val_loss = self.validation_loss(data)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch: epoch + 1, batch: usize::MAX });
        }
        self.state.schedule.observe(val_loss);
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss,
            lr,
            train_accuracy: correct as f64 / outputs as f64,
        };
        self.state.log.push(entry.clone());
        self.state.epoch += 1;
        Ok(entry)
    }

    /// Mean validation loss in inference mode (no dropout, running BN
    /// statistics), each utterance cropped from its first frame.
    pub fn validation_loss(&self, data: &TrainData) -> Result<f64> {
        let mut infer = self.model.clone();
        infer.set_mode(Mode::Infer);
        let parts = data
            .val
            .par_chunks(self.config.batch_size)
            .zip(data.val_labels.par_chunks(self.config.batch_size))
            .map(|(samples, labels)| {
                let batch = self.batch(samples, labels.to_vec(), vec![0; samples.len()])?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                infer
                    .evaluate_loss(&batch, Mode::Infer, &mut rng)
                    .map(|(l, _)| l * samples.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum::<f64>() / data.val.len() as f64)
    }

    /// Trains until `max_epochs`, calling `on_epoch` after every epoch.
    pub fn run<F: FnMut(&Self, &EpochLog) -> Result<()>>(&mut self, data: &TrainData, mut on_epoch: F) -> Result<()> {
        while !self.is_finished() {
            let entry = self.run_epoch(data)?;
            on_epoch(self, &entry)?;
        }
        self.model.set_mode(Mode::Infer);
        Ok(())
    }
}

/// Trains `model` from scratch and returns the trained model with its log.
pub fn train<T: Scalar>(model: Model<T>, data: &TrainData, config: TrainConfig) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(data, |_, _| Ok(()))?;
    Ok((trainer.model, trainer.state.log))
}
