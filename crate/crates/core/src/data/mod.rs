//! Synthetic audio-visual data, waveform featurization, persistence, and the
//! split and trial protocols.

mod io;
mod logmel;
mod protocol;
mod sample;
mod synth;

pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use logmel::{
    framing, hz_to_mel, mel_edges, mel_filterbank, mel_to_hz, read_wav, sample_from_wav, wav_to_logmel, LOG_FLOOR,
};
pub use protocol::{
    format_trials, parse_trials, read_trials, sample_trials, speaker_labels, split_train_val, with_condition,
    write_trials,
};
pub use sample::{AVSample, Condition, TrialPair};
pub use synth::{gen_synthetic, speaker_latents, speaker_prototypes, Dataset, DatasetManifest, SynthConfig, UtteranceRecord};
