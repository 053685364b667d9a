use crate::autodiff::Tensor;
use crate::data::AVSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::MEL_BINS;

/// How audio frames are taken from each utterance of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioWindow {
    /// Every frame; all utterances of the batch must have the same length.
    Full,
    /// `len` frames starting at the given per-sample offsets, wrapping around
    /// the utterance when it is shorter than the window.
    Crop { len: usize, starts: Vec<usize> },
}

/// Model inputs for a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[N × 1 × T × 64]`.
    pub audio: Option<Tensor<T>>,
    /// Face frames of all samples stacked `[(ΣT_v) × C × H × W]` with per-sample lengths.
    pub video: Option<(Tensor<T>, Vec<usize>)>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_samples(
        samples: &[&AVSample],
        labels: Vec<usize>,
        window: AudioWindow,
        with_audio: bool,
        with_video: bool,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::BatchSize { op: "batch", got: 0 });
        }
        if labels.len() != samples.len() {
            return Err(Error::Parameter(format!(
                "{} labels for {} samples",
                labels.len(),
                samples.len()
            )));
        }
        let audio = if with_audio {
            Some(audio_tensor(samples, &window)?)
        } else {
            None
        };
        let video = if with_video {
            Some(video_tensor(samples)?)
        } else {
            None
        };
        Ok(Batch { audio, video, labels })
    }
}

fn audio_tensor<T: Scalar>(samples: &[&AVSample], window: &AudioWindow) -> Result<Tensor<T>> {
    let n = samples.len();
    let len = match window {
        AudioWindow::Full => {
            let t = samples[0].audio_frames();
            if let Some(s) = samples.iter().find(|s| s.audio_frames() != t) {
                return Err(Error::Dimension {
                    op: "batch audio",
                    lhs: vec![t, MEL_BINS],
                    rhs: s.audio.shape().to_vec(),
                });
            }
            t
        }
        AudioWindow::Crop { len, starts } => {
            if *len == 0 {
                return Err(Error::EmptySequence("audio crop"));
            }
            if starts.len() != n {
                return Err(Error::Parameter(format!("{} crop offsets for {n} samples", starts.len())));
            }
            *len
        }
    };
    let mut values = Vec::with_capacity(n * len * MEL_BINS);
    for (i, s) in samples.iter().enumerate() {
        let frames = s.audio_frames();
        if frames == 0 {
            return Err(Error::EmptySequence("audio"));
        }
        let start = match window {
            AudioWindow::Full => 0,
            AudioWindow::Crop { starts, .. } => starts[i] % frames,
        };
        let src = s.audio.values();
        for t in 0..len {
            let row = (start + t) % frames;
            values.extend(src[row * MEL_BINS..(row + 1) * MEL_BINS].iter().map(|&v| T::lit(v as f64)));
        }
    }
    Tensor::new(vec![n, 1, len, MEL_BINS], values)
}

fn video_tensor<T: Scalar>(samples: &[&AVSample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = samples[0].frame_shape();
    let mut lengths = Vec::with_capacity(samples.len());
    let mut values = Vec::new();
    for s in samples {
        if s.frame_shape() != shape {
            return Err(Error::Dimension {
                op: "batch video",
                lhs: shape.to_vec(),
                rhs: s.frame_shape().to_vec(),
            });
        }
        lengths.push(s.video_frames());
        values.extend(s.video.values().iter().map(|&v| T::lit(v as f64)));
    }
    let total = lengths.iter().sum();
    let t = Tensor::new(vec![total, shape[0], shape[1], shape[2]], values)?;
    Ok((t, lengths))
}
