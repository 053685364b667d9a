use std::path::Path;

use super::sample::AVSample;
use super::synth::{Dataset, DatasetManifest};
use crate::autodiff::Tensor;
use crate::container;
use crate::error::{Error, Result};
use crate::model::MEL_BINS;

pub const DATASET_MAGIC: [u8; 4] = *b"MVSV";
pub const DATASET_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = serde_json::to_vec(&dataset.manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut payload = Vec::with_capacity(dataset.manifest.payload_bytes() as usize / 4);
    for s in &dataset.samples {
        payload.extend_from_slice(s.audio.values());
        payload.extend_from_slice(s.video.values());
    }
    container::write(path, DATASET_MAGIC, DATASET_VERSION, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, payload) = container::read(path, DATASET_MAGIC, DATASET_VERSION)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&header).map_err(|e| Error::Format(format!("{}: manifest: {e}", path.display())))?;
    manifest.validate()?;
    let expected = manifest.payload_bytes();
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated(format!(
            "{}: payload has {} of {expected} bytes",
            path.display(),
            payload.len()
        )));
    }
    if payload.len() as u64 > expected {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the payload",
            path.display(),
            payload.len() as u64 - expected
        )));
    }
    let [c, h, w] = manifest.frame_shape;
    let samples = manifest
        .records
        .iter()
        .map(|r| {
            let what = format!("utterance {}", r.utterance_id);
            let audio = container::floats(&payload, r.audio_offset, r.audio_frames * MEL_BINS, &what)?;
            let video = container::floats(&payload, r.video_offset, r.video_frames * c * h * w, &what)?;
            let s = AVSample {
                speaker_id: r.speaker_id,
                video_id: r.video_id,
                utterance_id: r.utterance_id,
                audio: Tensor::new(vec![r.audio_frames, MEL_BINS], audio)?,
                video: Tensor::new(vec![r.video_frames, c, h, w], video)?,
                missing_face: r.missing_face,
            };
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic, SynthConfig};

    fn tiny() -> Dataset {
        gen_synthetic(&SynthConfig {
            num_speakers: 2,
            videos_per_speaker: 2,
            utts_per_video: 2,
            audio_frames: (3, 6),
            video_frames: 2,
            frame_shape: [2, 3, 3],
            missing_face_prob: 0.3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mvsv");
        let d = tiny();
        save_dataset(&path, &d).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.audio), bits(&b.audio));
            assert_eq!(bits(&a.video), bits(&b.video));
        }
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mvsv");
        save_dataset(&path, &tiny()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&(DATASET_VERSION + 1).to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::Version { found: 2, expected: 1 })
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated(_))));

        std::fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated(_))));
    }
}
