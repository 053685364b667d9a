use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{Condition, TrialPair};
use super::synth::{DatasetManifest, UtteranceRecord};
use crate::error::{Error, Result};

/// Holds out each speaker's highest-numbered video for validation.
/// Returns `(train, val)` utterance ids in manifest order.
pub fn split_train_val(manifest: &DatasetManifest) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut videos: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    for r in &manifest.records {
        let e = videos.entry(r.speaker_id).or_insert((r.video_id, r.video_id));
        e.0 = e.0.min(r.video_id);
        e.1 = e.1.max(r.video_id);
    }
    if let Some((spk, _)) = videos.iter().find(|(_, (lo, hi))| lo == hi) {
        return Err(Error::Protocol(format!(
            "speaker {spk} has a single video; nothing left to train on after the hold-out"
        )));
    }
    let (val, train): (Vec<&UtteranceRecord>, Vec<&UtteranceRecord>) = manifest
        .records
        .iter()
        .partition(|r| videos[&r.speaker_id].1 == r.video_id);
    Ok((
        train.iter().map(|r| r.utterance_id).collect(),
        val.iter().map(|r| r.utterance_id).collect(),
    ))
}

/// Contiguous class index per speaker id, in ascending speaker order.
pub fn speaker_labels<'a>(records: impl IntoIterator<Item = &'a UtteranceRecord>) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = records.into_iter().map(|r| r.speaker_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

/// One target and one nontarget trial per test utterance, tagged `AA`.
///
/// The positive partner is a uniformly chosen other utterance of the same
/// speaker; the negative picks a different speaker uniformly, then one of
/// that speaker's utterances uniformly.
pub fn sample_trials(test: &[&UtteranceRecord], seed: u64) -> Result<Vec<TrialPair>> {
    let mut by_speaker: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for r in test {
        by_speaker.entry(r.speaker_id).or_default().push(r.utterance_id);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Protocol("trials need at least two speakers".into()));
    }
    if let Some((spk, _)) = by_speaker.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::Protocol(format!("speaker {spk} has a single test utterance")));
    }
    let speakers: Vec<u32> = by_speaker.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(2 * test.len());
    for r in test {
        let own = &by_speaker[&r.speaker_id];
        let pos = own.iter().position(|&u| u == r.utterance_id).expect("indexed above");
        let mut j = rng.gen_range(0..own.len() - 1);
        if j >= pos {
            j += 1;
        }
        trials.push(TrialPair {
            target: true,
            enrol_id: r.utterance_id,
            test_id: own[j],
            condition: Condition::AA,
        });
        let me = speakers.binary_search(&r.speaker_id).expect("indexed above");
        let mut s = rng.gen_range(0..speakers.len() - 1);
        if s >= me {
            s += 1;
        }
        let other = &by_speaker[&speakers[s]];
        trials.push(TrialPair {
            target: false,
            enrol_id: r.utterance_id,
            test_id: other[rng.gen_range(0..other.len())],
            condition: Condition::AA,
        });
    }
    Ok(trials)
}

/// The same pairs under another condition.
pub fn with_condition(trials: &[TrialPair], condition: Condition) -> Vec<TrialPair> {
    trials.iter().map(|t| TrialPair { condition, ..*t }).collect()
}

pub fn format_trials(trials: &[TrialPair]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", u8::from(t.target), t.enrol_id, t.test_id, t.condition);
    }
    s
}

pub fn parse_trials(text: &str) -> Result<Vec<TrialPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |why: &str| Error::Format(format!("trial line {}: {why}: `{line}`", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [label, enrol, test, cond] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 1 or 0")),
            };
            let enrol_id = enrol.parse().map_err(|_| bad("bad enrol id"))?;
            let test_id = test.parse().map_err(|_| bad("bad test id"))?;
            if enrol_id == test_id {
                return Err(bad("an utterance cannot be paired with itself"));
            }
            let condition = Condition::from_tag(cond).ok_or_else(|| bad("unknown condition"))?;
            Ok(TrialPair {
                target,
                enrol_id,
                test_id,
                condition,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    std::fs::write(path, format_trials(trials)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_trials(&text)
}
