use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::AVSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MEL_BINS;

/// Generator settings for the latent-identity synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub videos_per_speaker: usize,
    pub utts_per_video: usize,
    /// Dimension `k` of the speaker latent.
    pub latent_dim: usize,
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub sigma_session: f64,
    pub missing_face_prob: f64,
    /// Inclusive audio frame-count range.
    pub audio_frames: (usize, usize),
    pub video_frames: usize,
    pub frame_shape: [usize; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 32,
            videos_per_speaker: 4,
            utts_per_video: 4,
            latent_dim: 16,
            sigma_audio: 1.0,
            sigma_video: 1.0,
            sigma_session: 0.5,
            missing_face_prob: 0.0,
            audio_frames: (60, 140),
            video_frames: 4,
            frame_shape: [3, 16, 16],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn pixel_dim(&self) -> usize {
        self.frame_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.num_speakers", self.num_speakers),
            ("data.utts_per_video", self.utts_per_video),
            ("data.latent_dim", self.latent_dim),
            ("data.video_frames", self.video_frames),
            ("data.audio_frames_min", self.audio_frames.0),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.videos_per_speaker < 2 {
            return Err(Error::config(
                "data.videos_per_speaker",
                "needs at least 2 videos per speaker so one can be held out",
            ));
        }
        if self.audio_frames.1 < self.audio_frames.0 {
            return Err(Error::config("data.audio_frames_max", "must not be below audio_frames_min"));
        }
        if self.frame_shape.contains(&0) {
            return Err(Error::config("data.frame_shape", "dimensions must be positive"));
        }
        for (key, v) in [
            ("data.sigma_audio", self.sigma_audio),
            ("data.sigma_video", self.sigma_video),
            ("data.sigma_session", self.sigma_session),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite nonnegative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_face_prob) {
            return Err(Error::config("data.missing_face_prob", "must lie in [0, 1]"));
        }
        let total = self
            .num_speakers
            .checked_mul(self.videos_per_speaker)
            .and_then(|v| v.checked_mul(self.utts_per_video));
        if !total.is_some_and(|t| t <= u32::MAX as usize) {
            return Err(Error::config("data.num_speakers", "too many utterances for 32-bit ids"));
        }
        Ok(())
    }
}

/// Per-utterance entry of a dataset manifest. Offsets are byte positions
/// within the tensor payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker_id: u32,
    pub video_id: u32,
    pub utterance_id: u32,
    pub audio_frames: usize,
    pub video_frames: usize,
    pub missing_face: bool,
    pub audio_offset: u64,
    pub video_offset: u64,
}

impl UtteranceRecord {
    pub fn audio_bytes(&self) -> u64 {
        (self.audio_frames * MEL_BINS * 4) as u64
    }

    pub fn video_bytes(&self, frame_shape: [usize; 3]) -> u64 {
        (self.video_frames * frame_shape.iter().product::<usize>() * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub speakers: usize,
    pub frame_shape: [usize; 3],
    pub records: Vec<UtteranceRecord>,
    /// Settings the corpus was generated with, if synthetic.
    pub generator: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn payload_bytes(&self) -> u64 {
        self.records
            .iter()
            .map(|r| r.audio_bytes() + r.video_bytes(self.frame_shape))
            .sum()
    }

    /// Checks that ids are unique and that tensor ranges tile the payload without overlap.
    pub fn validate(&self) -> Result<()> {
        let mut ranges = Vec::with_capacity(2 * self.records.len());
        let mut ids = std::collections::BTreeSet::new();
        let mut video_owner = BTreeMap::new();
        for r in &self.records {
            if !ids.insert(r.utterance_id) {
                return Err(Error::Format(format!("duplicate utterance id {}", r.utterance_id)));
            }
            if *video_owner.entry(r.video_id).or_insert(r.speaker_id) != r.speaker_id {
                return Err(Error::Format(format!("video {} spans several speakers", r.video_id)));
            }
            if r.audio_frames == 0 || r.video_frames == 0 {
                return Err(Error::Format(format!("utterance {} has no frames", r.utterance_id)));
            }
            ranges.push((r.audio_offset, r.audio_bytes()));
            ranges.push((r.video_offset, r.video_bytes(self.frame_shape)));
        }
        ranges.sort_unstable();
        let mut end = 0u64;
        for (start, len) in ranges {
            if start < end {
                return Err(Error::Format(format!("tensor at byte {start} overlaps its predecessor")));
            }
            end = start + len;
        }
        if end > self.payload_bytes() {
            return Err(Error::Format("tensor offsets run past the payload".into()));
        }
        Ok(())
    }
}

/// A manifest and its samples, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<AVSample>,
    index: BTreeMap<u32, usize>,
}

impl Dataset {
    /// Lays out `samples` contiguously (audio then video per utterance) and builds the manifest.
    pub fn from_samples(samples: Vec<AVSample>, generator: Option<SynthConfig>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Format("a dataset needs at least one utterance".into()))?;
        let frame_shape = first.frame_shape();
        let mut offset = 0u64;
        let mut records = Vec::with_capacity(samples.len());
        for s in &samples {
            s.validate()?;
            if s.frame_shape() != frame_shape {
                return Err(Error::Format(format!(
                    "utterance {} has frame shape {:?}, dataset uses {frame_shape:?}",
                    s.utterance_id,
                    s.frame_shape()
                )));
            }
            let mut r = UtteranceRecord {
                speaker_id: s.speaker_id,
                video_id: s.video_id,
                utterance_id: s.utterance_id,
                audio_frames: s.audio_frames(),
                video_frames: s.video_frames(),
                missing_face: s.missing_face,
                audio_offset: offset,
                video_offset: 0,
            };
            offset += r.audio_bytes();
            r.video_offset = offset;
            offset += r.video_bytes(frame_shape);
            records.push(r);
        }
        let speakers = records
            .iter()
            .map(|r| r.speaker_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let manifest = DatasetManifest {
            speakers,
            frame_shape,
            records,
            generator,
        };
        Self::new(manifest, samples)
    }

    pub(crate) fn new(manifest: DatasetManifest, samples: Vec<AVSample>) -> Result<Self> {
        manifest.validate()?;
        if manifest.records.len() != samples.len() {
            return Err(Error::Format(format!(
                "manifest lists {} utterances, payload holds {}",
                manifest.records.len(),
                samples.len()
            )));
        }
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.utterance_id, i))
            .collect();
        Ok(Dataset {
            manifest,
            samples,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, utterance_id: u32) -> Option<&AVSample> {
        self.index.get(&utterance_id).map(|&i| &self.samples[i])
    }

    /// Looks up an utterance, failing with a data error naming the id.
    pub fn sample(&self, utterance_id: u32) -> Result<&AVSample> {
        self.get(utterance_id)
            .ok_or_else(|| Error::Format(format!("utterance {utterance_id} is not in the dataset")))
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        self.manifest.frame_shape
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn project_tanh(map: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let k = z.len();
    (0..rows)
        .map(|r| {
            let dot: f64 = map[r * k..(r + 1) * k].iter().zip(z).map(|(m, z)| m * z).sum();
            dot.tanh()
        })
        .collect()
}

/// Random stream for `speaker`; stream 0 holds the global projection maps.
fn speaker_stream(seed: u64, speaker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(speaker as u64 + 1);
    rng
}

/// Global maps `M_A (64×k)` and `M_V (pixels×k)` with `N(0, 1/k)` entries.
fn global_maps(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let sd = 1.0 / (cfg.latent_dim as f64).sqrt();
    let m_a = normals(&mut rng, MEL_BINS * cfg.latent_dim, sd);
    let m_v = normals(&mut rng, cfg.pixel_dim() * cfg.latent_dim, sd);
    (m_a, m_v)
}

/// Draws the latent identity `z_s ~ N(0, I_k)` of every speaker.
pub fn speaker_latents(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    (0..cfg.num_speakers)
        .map(|s| normals(&mut speaker_stream(cfg.seed, s), cfg.latent_dim, 1.0))
        .collect()
}

/// Noise-free audio and video prototypes `tanh(M_A z_s)`, `tanh(M_V z_s)` per speaker.
pub fn speaker_prototypes(cfg: &SynthConfig) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    cfg.validate()?;
    let (m_a, m_v) = global_maps(cfg);
    Ok(speaker_latents(cfg)
        .iter()
        .map(|z| (project_tanh(&m_a, MEL_BINS, z), project_tanh(&m_v, cfg.pixel_dim(), z)))
        .collect())
}

fn speaker_samples(cfg: &SynthConfig, speaker: usize, m_a: &[f64], m_v: &[f64]) -> Vec<AVSample> {
    let mut rng = speaker_stream(cfg.seed, speaker);
    let z = normals(&mut rng, cfg.latent_dim, 1.0);
    let audio_mean = project_tanh(m_a, MEL_BINS, &z);
    let pixels = cfg.pixel_dim();
    let video_mean = project_tanh(m_v, pixels, &z);
    let [c, h, w] = cfg.frame_shape;
    let mut out = Vec::with_capacity(cfg.videos_per_speaker * cfg.utts_per_video);
    for v in 0..cfg.videos_per_speaker {
        let video_id = speaker * cfg.videos_per_speaker + v;
        for u in 0..cfg.utts_per_video {
            let utterance_id = video_id * cfg.utts_per_video + u;
            let missing_face = rng.gen_bool(cfg.missing_face_prob);
            let frames = rng.gen_range(cfg.audio_frames.0..=cfg.audio_frames.1);
            let session = normals(&mut rng, MEL_BINS, cfg.sigma_session);
            let noise = normals(&mut rng, frames * MEL_BINS, cfg.sigma_audio);
            let audio: Vec<f32> = noise
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let j = i % MEL_BINS;
                    (audio_mean[j] + session[j] + e) as f32
                })
                .collect();
            let video = if missing_face {
                AVSample::zero_frame(cfg.frame_shape)
            } else {
                let n = cfg.video_frames;
                let noise = normals(&mut rng, n * pixels, cfg.sigma_video);
                let values = noise
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (video_mean[i % pixels] + e) as f32)
                    .collect();
                Tensor::new(vec![n, c, h, w], values).expect("positive frame dims")
            };
            out.push(AVSample {
                speaker_id: speaker as u32,
                video_id: video_id as u32,
                utterance_id: utterance_id as u32,
                audio: Tensor::new(vec![frames, MEL_BINS], audio).expect("positive frame count"),
                video,
                missing_face,
            });
        }
    }
    out
}

/// Generates the synthetic corpus. Each speaker draws from its own stream, so
/// output does not depend on how the work is scheduled.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (m_a, m_v) = global_maps(cfg);
    let per_speaker: Vec<Vec<AVSample>> = (0..cfg.num_speakers)
        .into_par_iter()
        .map(|s| speaker_samples(cfg, s, &m_a, &m_v))
        .collect();
    Dataset::from_samples(per_speaker.into_iter().flatten().collect(), Some(cfg.clone()))
}
