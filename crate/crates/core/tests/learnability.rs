use mvsv::data::{gen_synthetic, speaker_prototypes, SynthConfig};

/// Multinomial logistic regression by full-batch gradient descent; returns
/// training accuracy.
fn probe_accuracy(xs: &[Vec<f64>], ys: &[usize], classes: usize, steps: usize, lr: f64) -> f64 {
    let dim = xs[0].len();
    let mut w = vec![0.0; classes * (dim + 1)];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|k| {
                let row = &w[k * (dim + 1)..(k + 1) * (dim + 1)];
                row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(ys) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..classes {
                let d = e[k] / s - f64::from(k == y);
                let row = &mut g[k * (dim + 1)..(k + 1) * (dim + 1)];
                for (gi, xi) in row[..dim].iter_mut().zip(x) {
                    *gi += d * xi;
                }
                row[dim] += d;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi / xs.len() as f64;
        }
    }
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let z = logits(&w, x);
            (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap() == y
        })
        .count();
    correct as f64 / xs.len() as f64
}

fn mean_rows(values: &[f32], width: usize) -> Vec<f64> {
    let rows = values.len() / width;
    (0..width)
        .map(|j| (0..rows).map(|r| values[r * width + j] as f64).sum::<f64>() / rows as f64)
        .collect()
}

#[test]
fn both_modalities_carry_speaker_identity() {
    let cfg = SynthConfig::default();
    let protos = speaker_prototypes(&cfg).unwrap();
    let labels: Vec<usize> = (0..cfg.num_speakers).collect();
    let audio: Vec<Vec<f64>> = protos.iter().map(|p| p.0.clone()).collect();
    let video: Vec<Vec<f64>> = protos.iter().map(|p| p.1.clone()).collect();
    assert!(probe_accuracy(&audio, &labels, cfg.num_speakers, 200, 1.0) > 0.9);
    assert!(probe_accuracy(&video, &labels, cfg.num_speakers, 200, 1.0) > 0.9);

    // the same holds per utterance once generator noise is added
    let d = gen_synthetic(&cfg).unwrap();
    let (mut xa, mut ya, mut xv, mut yv) = (vec![], vec![], vec![], vec![]);
    for s in &d.samples {
        xa.push(mean_rows(s.audio.values(), 64));
        ya.push(s.speaker_id as usize);
        if !s.missing_face {
            xv.push(mean_rows(s.video.values(), cfg.pixel_dim()));
            yv.push(s.speaker_id as usize);
        }
    }
    assert!(probe_accuracy(&xa, &ya, cfg.num_speakers, 300, 1.0) > 0.9);
    assert!(probe_accuracy(&xv, &yv, cfg.num_speakers, 300, 0.5) > 0.9);
}

#[test]
fn noiseless_audio_repeats_exactly_within_a_speaker() {
    let cfg = SynthConfig {
        num_speakers: 3,
        sigma_audio: 0.0,
        sigma_video: 0.0,
        sigma_session: 0.0,
        ..SynthConfig::default()
    };
    let d = gen_synthetic(&cfg).unwrap();
    let protos = speaker_prototypes(&cfg).unwrap();
    for s in &d.samples {
        let want = &protos[s.speaker_id as usize].0;
        for row in s.audio.values().chunks(64) {
            for (a, b) in row.iter().zip(want) {
                assert_eq!(*a, *b as f32);
            }
        }
    }
}
