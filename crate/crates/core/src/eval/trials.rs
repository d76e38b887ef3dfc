use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_utt_id: String,
    pub test_utt_id: String,
    pub same_speaker: bool,
}

/// Draws `n_trials` verification pairs from `(utt_id, speaker_id)` pairs, exactly
/// half of them cross-speaker, in a seed-determined shuffled order.
///
/// Same-speaker trials pick a speaker with at least two utterances, then two
/// distinct utterances; cross-speaker trials pick two distinct speakers and one
/// utterance from each.
pub fn generate_trials(utterances: &[(String, String)], n_trials: usize, seed: u64) -> Result<Vec<Trial>> {
    if n_trials % 2 != 0 {
        return Err(Error::config(format!("n_trials must be even, got {n_trials}")));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (utt, spk) in utterances {
        by_speaker.entry(spk.as_str()).or_default().push(utt.as_str());
    }
    if by_speaker.len() < 2 {
        return Err(Error::invalid(format!(
            "trials need at least 2 speakers, found {}",
            by_speaker.len()
        )));
    }
    let speakers: Vec<&Vec<&str>> = by_speaker.values().collect();
    let multi: Vec<&Vec<&str>> = speakers.iter().copied().filter(|u| u.len() >= 2).collect();
    if multi.is_empty() && n_trials > 0 {
        return Err(Error::invalid("same-speaker trials need a speaker with at least 2 utterances"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials / 2 {
        let utts = multi[rng.random_range(0..multi.len())];
        let a = rng.random_range(0..utts.len());
        let mut b = rng.random_range(0..utts.len() - 1);
        if b >= a {
            b += 1;
        }
        trials.push(Trial {
            enroll_utt_id: utts[a].to_string(),
            test_utt_id: utts[b].to_string(),
            same_speaker: true,
        });
    }
    for _ in 0..n_trials / 2 {
        let sa = rng.random_range(0..speakers.len());
        let mut sb = rng.random_range(0..speakers.len() - 1);
        if sb >= sa {
            sb += 1;
        }
        let (ua, ub) = (speakers[sa], speakers[sb]);
        trials.push(Trial {
            enroll_utt_id: ua[rng.random_range(0..ua.len())].to_string(),
            test_utt_id: ub[rng.random_range(0..ub.len())].to_string(),
            same_speaker: false,
        });
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(speakers: usize, per: usize) -> Vec<(String, String)> {
        (0..speakers)
            .flat_map(|s| (0..per).map(move |u| (format!("s{s}_u{u}"), format!("s{s}"))))
            .collect()
    }

    fn speaker_of(utts: &[(String, String)], id: &str) -> String {
        utts.iter().find(|(u, _)| u == id).unwrap().1.clone()
    }

    #[test]
    fn ten_trials_split_evenly() {
        let utts = corpus(3, 4);
        let t = generate_trials(&utts, 10, 1).unwrap();
        assert_eq!(t.iter().filter(|t| t.same_speaker).count(), 5);
        assert_eq!(t.iter().filter(|t| !t.same_speaker).count(), 5);
        for trial in &t {
            assert_ne!(trial.enroll_utt_id, trial.test_utt_id);
            let same = speaker_of(&utts, &trial.enroll_utt_id) == speaker_of(&utts, &trial.test_utt_id);
            assert_eq!(same, trial.same_speaker);
        }
        assert_eq!(t, generate_trials(&utts, 10, 1).unwrap());
        assert_ne!(t, generate_trials(&utts, 10, 2).unwrap());
    }

    #[test]
    fn preconditions() {
        assert!(matches!(generate_trials(&corpus(1, 5), 10, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(generate_trials(&corpus(3, 5), 7, 0), Err(Error::Config(_))));
        assert!(matches!(generate_trials(&corpus(3, 1), 4, 0), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn balance_exact(half in 0usize..60, speakers in 2usize..6, per in 2usize..5, seed in any::<u64>()) {
            let t = generate_trials(&corpus(speakers, per), 2 * half, seed).unwrap();
            prop_assert_eq!(t.len(), 2 * half);
            prop_assert_eq!(t.iter().filter(|t| t.same_speaker).count(), half);
        }
    }
}
