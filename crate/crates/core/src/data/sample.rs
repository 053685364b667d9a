use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MEL_BINS;

/// One utterance with its paired face frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AVSample {
    pub speaker_id: u32,
    /// Recording session the utterance was cut from.
    pub video_id: u32,
    pub utterance_id: u32,
    /// `T_a × 64` logmel-like frames.
    pub audio: Tensor<f32>,
    /// `T_v × C × H × W` face frames.
    pub video: Tensor<f32>,
    /// No face was found; `video` is then a single all-zero frame.
    pub missing_face: bool,
}

impl AVSample {
    pub fn audio_frames(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn video_frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.video.shape();
        [s[1], s[2], s[3]]
    }

    /// A single all-zero face frame of the given shape.
    pub fn zero_frame(frame_shape: [usize; 3]) -> Tensor<f32> {
        let [c, h, w] = frame_shape;
        Tensor::zeros(vec![1, c, h, w])
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.audio.shape();
        if a.len() != 2 || a[1] != MEL_BINS {
            return Err(Error::Format(format!(
                "utterance {}: audio must be T×{MEL_BINS}, got {a:?}",
                self.utterance_id
            )));
        }
        if self.video.shape().len() != 4 {
            return Err(Error::Format(format!(
                "utterance {}: video must be T×C×H×W, got {:?}",
                self.utterance_id,
                self.video.shape()
            )));
        }
        if self.missing_face
            && (self.video_frames() != 1 || self.video.values().iter().any(|&v| v != 0.0))
        {
            return Err(Error::Format(format!(
                "utterance {}: a missing face must be one zero frame",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

/// Modality condition of a verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// audio vs audio
    AA,
    /// video vs video
    VV,
    /// audio+video on both sides
    AVAV,
    /// enrol audio vs test video (cross-modal)
    AvX,
    /// enrol audio vs test audio+video
    AAv,
    /// enrol video vs test audio+video
    VAv,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::AA,
        Condition::VV,
        Condition::AVAV,
        Condition::AvX,
        Condition::AAv,
        Condition::VAv,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::AA => "AA",
            Condition::VV => "VV",
            Condition::AVAV => "AVAV",
            Condition::AvX => "AV_X",
            Condition::AAv => "A_AV",
            Condition::VAv => "V_AV",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Condition::ALL.into_iter().find(|c| c.tag() == tag)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One enrol-vs-test verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialPair {
    pub target: bool,
    pub enrol_id: u32,
    pub test_id: u32,
    pub condition: Condition,
}
