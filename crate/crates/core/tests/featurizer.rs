use mvsv::data::{read_wav, sample_from_wav, wav_to_logmel, LOG_FLOOR};
use mvsv::model::MEL_BINS;
use mvsv::{Error, ErrorKind};

/// Filter edges recomputed from the HTK formula, independent of the library.
fn oracle_edges(sr: f64) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sr / 2.0);
    (0..MEL_BINS + 2).map(|i| hz(top * i as f64 / (MEL_BINS as f64 + 1.0))).collect()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

#[test]
fn silence_hits_the_log_floor_everywhere() {
    let out = wav_to_logmel(&vec![0.0; 16000], 16000).unwrap();
    let floor = LOG_FLOOR.ln() as f32;
    assert!(out.values().iter().all(|&v| v == floor));
    assert_eq!(floor, (1e-10f64).ln() as f32);
}

#[test]
fn one_second_at_16k_gives_98_frames() {
    let out = wav_to_logmel(&vec![0.1; 16000], 16000).unwrap();
    assert_eq!(out.shape(), &[98, MEL_BINS]);
    assert_eq!(wav_to_logmel(&vec![0.0; 400], 16000).unwrap().shape(), &[1, MEL_BINS]);
    assert_eq!(wav_to_logmel(&vec![0.0; 559], 16000).unwrap().shape(), &[1, MEL_BINS]);
    assert_eq!(wav_to_logmel(&vec![0.0; 560], 16000).unwrap().shape(), &[2, MEL_BINS]);
}

#[test]
fn pure_tone_peaks_in_the_filter_bracketing_its_frequency() {
    let (sr, f0) = (16000.0, 440.0);
    let edges = oracle_edges(sr);
    // Filter j peaks at edges[j+1]; the tone sits between two adjacent peaks
    // and the filter with the larger triangle weight there must win.
    let j = (0..MEL_BINS).find(|&j| edges[j + 1] <= f0 && f0 < edges[j + 2]).unwrap();
    let rise = (f0 - edges[j + 1]) / (edges[j + 2] - edges[j + 1]);
    let expected = if rise > 0.5 { j + 1 } else { j };
    assert!(edges[expected] < f0 && f0 < edges[expected + 2]);

    let wave: Vec<f64> = (0..16000)
        .map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / sr).sin())
        .collect();
    let out = wav_to_logmel(&wave, 16000).unwrap();
    for row in out.values().chunks(MEL_BINS) {
        assert_eq!(argmax(row), expected);
    }
}

#[test]
fn output_is_finite_and_short_inputs_are_rejected() {
    let wave: Vec<f64> = (0..1000).map(|n| ((n * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    assert!(wav_to_logmel(&wave, 8000).unwrap().values().iter().all(|v| v.is_finite()));
    let err = wav_to_logmel(&[0.0; 399], 16000).unwrap_err();
    assert!(matches!(err, Error::TooShort { samples: 399, needed: 400 }));
    assert_eq!(wav_to_logmel(&[0.0; 4000], 4000).unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn wav_files_become_audio_only_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for n in 0..8000 {
        w.write_sample(((n as f64 * 0.1).sin() * 16000.0) as i16).unwrap();
    }
    w.finalize().unwrap();

    let (wave, sr) = read_wav(&path).unwrap();
    assert_eq!((wave.len(), sr), (8000, 16000));
    let s = sample_from_wav(&path, [3, 16, 16]).unwrap();
    assert_eq!(s.audio.shape(), &[48, MEL_BINS]);
    assert!(s.missing_face);
    assert_eq!(s.video.shape(), &[1, 3, 16, 16]);
    assert!(s.video.values().iter().all(|&v| v == 0.0));
}
