#![allow(dead_code)]

use mvsv::data::{gen_synthetic, split_train_val, Dataset, SynthConfig};
use mvsv::model::{build_model, EncoderConfig, Model, Topology, TopologyKind};
use mvsv::train::{TrainConfig, TrainData};

pub fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_speakers: 6,
        videos_per_speaker: 3,
        utts_per_video: 3,
        audio_frames: (20, 40),
        video_frames: 2,
        seed,
        ..SynthConfig::default()
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    gen_synthetic(&small_config(seed)).unwrap()
}

pub fn splits(d: &Dataset) -> (Vec<u32>, Vec<u32>) {
    split_train_val(&d.manifest).unwrap()
}

pub fn with_data<R>(d: &Dataset, f: impl FnOnce(&TrainData) -> R) -> R {
    let (tr, va) = splits(d);
    let data = TrainData::new(d, &tr, &va).unwrap();
    f(&data)
}

pub fn small_audio() -> EncoderConfig {
    EncoderConfig {
        encoding_dim: 16,
        attention_dim: 8,
        ..EncoderConfig::desk_audio()
    }
}

pub fn small_video() -> EncoderConfig {
    EncoderConfig {
        encoding_dim: 16,
        ..EncoderConfig::desk_video()
    }
}

pub fn small_model(kind: TopologyKind, classes: usize, seed: u64) -> Model<f32> {
    let mut t = Topology::new(kind, classes);
    t.head.hidden_dim = 16;
    if kind == TopologyKind::MultiView {
        t.proj_dim = Some(16);
    }
    build_model(t, &small_audio(), &small_video(), seed).unwrap()
}

pub fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        max_epochs: epochs,
        crop_frames: 24,
        ..TrainConfig::default()
    }
}
