use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::sample::AVSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MEL_BINS;

pub const LOG_FLOOR: f64 = 1e-10;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;
pub const MIN_SAMPLE_RATE: u32 = 8000;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// STFT framing for a sample rate: `(window, hop, n_fft)` in samples.
pub fn framing(sample_rate: u32) -> (usize, usize, usize) {
    let sr = sample_rate as f64;
    let win = (WINDOW_SECONDS * sr).round() as usize;
    let hop = (HOP_SECONDS * sr).round() as usize;
    (win, hop, win.next_power_of_two())
}

/// `MEL_BINS + 2` filter edge frequencies in Hz, equally spaced on the mel scale
/// from 0 to Nyquist. Filter `j` rises from `edges[j]`, peaks at `edges[j+1]`
/// and falls to zero at `edges[j+2]`.
pub fn mel_edges(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

/// Triangular filterbank `[MEL_BINS × (n_fft/2 + 1)]`, row-major.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize) -> Vec<f64> {
    let edges = mel_edges(sample_rate);
    let bins = n_fft / 2 + 1;
    let mut fb = vec![0.0; MEL_BINS * bins];
    for j in 0..MEL_BINS {
        let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        for b in 0..bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[j * bins + b] = w;
        }
    }
    fb
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Log-compressed mel filterbank magnitudes, one 64-bin row per 10 ms hop.
pub fn wav_to_logmel(waveform: &[f64], sample_rate: u32) -> Result<Tensor<f32>> {
    if sample_rate < MIN_SAMPLE_RATE {
        return Err(Error::Format(format!(
            "sample rate {sample_rate} Hz is below the {MIN_SAMPLE_RATE} Hz minimum"
        )));
    }
    let (win, hop, n_fft) = framing(sample_rate);
    if waveform.len() < win {
        return Err(Error::TooShort {
            samples: waveform.len(),
            needed: win,
        });
    }
    let frames = 1 + (waveform.len() - win) / hop;
    let bins = n_fft / 2 + 1;
    let window = hann(win);
    let fb = mel_filterbank(sample_rate, n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames * MEL_BINS);
    for t in 0..frames {
        let chunk = &waveform[t * hop..t * hop + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, (x, w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            c.re = x * w;
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for j in 0..MEL_BINS {
            let e: f64 = fb[j * bins..(j + 1) * bins].iter().zip(&mag).map(|(w, m)| w * m).sum();
            out.push((e + LOG_FLOOR).ln() as f32);
        }
    }
    Tensor::new(vec![frames, MEL_BINS], out)
}

/// Reads a 16-bit PCM mono RIFF/WAVE file as samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok((samples, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Audio-only sample from a WAV file; the face side is the missing-face zero frame.
pub fn sample_from_wav(path: &Path, frame_shape: [usize; 3]) -> Result<AVSample> {
    let (wave, sr) = read_wav(path)?;
    Ok(AVSample {
        speaker_id: 0,
        video_id: 0,
        utterance_id: 0,
        audio: wav_to_logmel(&wave, sr)?,
        video: AVSample::zero_frame(frame_shape),
        missing_face: true,
    })
}
