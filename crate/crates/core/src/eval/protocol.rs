use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_eer, cosine_score, generate_trials};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::speaker::{SpeakerEmbedding, VerifierModel};
use crate::synth::{text_to_ids, PrenetDropout, SynthesisLimits, SynthesizerModel};
use crate::tensor::Tensor;
use crate::training::sample_seed;

/// Which utterance supplies the conditioning embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// The target utterance itself (same content).
    Dep,
    /// Another utterance of the same speaker, drawn uniformly.
    Indep,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Dep => "dep",
            Protocol::Indep => "indep",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dep" => Ok(Protocol::Dep),
            "indep" => Ok(Protocol::Indep),
            other => Err(Error::config(format!("unknown protocol {other:?} (expected dep or indep)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub utt_id: String,
    pub speaker_id: String,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub utt_id: String,
    pub ref_utt_id: String,
    pub speaker_id: String,
    pub protocol: Protocol,
    pub synth_emb: SpeakerEmbedding,
    pub n_frames: usize,
    pub stopped_naturally: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub protocol: Protocol,
    pub records: Vec<EvalRecord>,
    /// Speakers left out because the protocol could not be applied to them.
    pub skipped_speakers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub eer_percent: f64,
    pub threshold_at_eer: f64,
    pub avg_cosine: f64,
    /// EER of natural-vs-natural scoring on the same trials.
    pub natural_eer_percent: f64,
    pub trial_count: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "protocol={}\neer_percent={:.4}\nthreshold_at_eer={:.6}\navg_cosine={:.6}\nnatural_eer_percent={:.4}\ntrial_count={}\nseed={}\n",
            self.protocol,
            self.eer_percent,
            self.threshold_at_eer,
            self.avg_cosine,
            self.natural_eer_percent,
            self.trial_count,
            self.seed
        )
    }

    pub fn table_header() -> &'static str {
        "system\tset\tprotocol\tsv_eer_percent\tavg_cosine\tnatural_eer_percent"
    }

    pub fn table_row(&self, system: &str, set: &str) -> String {
        format!(
            "{system}\t{set}\t{}\t{:.2}\t{:.3}\t{:.2}",
            self.protocol, self.eer_percent, self.avg_cosine, self.natural_eer_percent
        )
    }
}

/// Natural-vs-natural verification EER over trials drawn from `utterances`.
pub fn natural_eer(
    natural: &BTreeMap<String, SpeakerEmbedding>,
    utterances: &[(String, String)],
    n_trials: usize,
    seed: u64,
) -> Result<super::EerResult> {
    let trials = generate_trials(utterances, n_trials, seed)?;
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials {
        let get = |id: &str| {
            natural
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no natural embedding for {id}")))
        };
        scores.push(cosine_score(get(&t.enroll_utt_id)?, get(&t.test_utt_id)?)?);
    }
    let labels: Vec<bool> = trials.iter().map(|t| t.same_speaker).collect();
    compute_eer(&scores, &labels)
}

/// Verifier embeddings of natural mels, keyed by utterance id.
pub fn natural_embeddings(
    verifier: &VerifierModel,
    mels: &[(String, Tensor)],
    exec: Exec,
) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let embs = exec.try_map(mels, |_, (_, m)| verifier.embed_frames(m))?;
    Ok(mels.iter().map(|(id, _)| id.clone()).zip(embs).collect())
}

fn assign_references(items: &[EvalItem], protocol: Protocol, seed: u64) -> (Vec<(usize, String)>, usize) {
    match protocol {
        Protocol::Dep => (
            items.iter().enumerate().map(|(i, it)| (i, it.utt_id.clone())).collect(),
            0,
        ),
        Protocol::Indep => {
            let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for it in items {
                by_speaker.entry(&it.speaker_id).or_default().push(&it.utt_id);
            }
            let skipped = by_speaker.values().filter(|u| u.len() < 2).count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for (i, it) in items.iter().enumerate() {
                let others: Vec<&str> = by_speaker[it.speaker_id.as_str()]
                    .iter()
                    .copied()
                    .filter(|u| *u != it.utt_id)
                    .collect();
                if others.is_empty() {
                    continue;
                }
                out.push((i, others[rng.random_range(0..others.len())].to_string()));
            }
            (out, skipped)
        }
    }
}

/// Synthesizes every item conditioned on its protocol-assigned reference embedding
/// and embeds the result with the verifier.
///
/// Outputs shorter than the verifier's receptive minimum are padded with
/// silence (`go_value`) frames before embedding.
pub fn synthesize_eval_set(
    items: &[EvalItem],
    natural: &BTreeMap<String, SpeakerEmbedding>,
    synth: &SynthesizerModel,
    verifier: &VerifierModel,
    protocol: Protocol,
    seed: u64,
    exec: Exec,
) -> Result<EvalSet> {
    let (assigned, skipped_speakers) = assign_references(items, protocol, seed);
    for (_, r) in &assigned {
        if !natural.contains_key(r) {
            return Err(Error::invalid(format!("no natural embedding for reference {r}")));
        }
    }
    let records = exec.try_map(&assigned, |k, (i, ref_utt)| -> Result<EvalRecord> {
        let item = &items[*i];
        let text = text_to_ids(&item.transcript)?;
        let limits = SynthesisLimits::for_text(synth.arch(), text.len());
        let mut dropout = PrenetDropout::seeded(sample_seed(seed, 0, k));
        let out = synth.synthesize(&text.ids, &natural[ref_utt], limits, &mut dropout)?;
        let mel = pad_to(&out.mel_post, verifier.min_frames(), synth.arch().go_value);
        Ok(EvalRecord {
            utt_id: item.utt_id.clone(),
            ref_utt_id: ref_utt.clone(),
            speaker_id: item.speaker_id.clone(),
            protocol,
            synth_emb: verifier.embed_frames(&mel)?,
            n_frames: out.n_frames(),
            stopped_naturally: out.stopped_naturally,
        })
    })?;
    Ok(EvalSet {
        protocol,
        records,
        skipped_speakers,
    })
}

fn pad_to(mel: &Tensor, min_frames: usize, value: f64) -> Tensor {
    if mel.rows() >= min_frames {
        return mel.clone();
    }
    let cols = mel.cols();
    let mut data = mel.data().to_vec();
    data.resize(min_frames * cols, value);
    Tensor::new(vec![min_frames, cols], data)
}

/// Scores trials drawn over the evaluated utterances (natural enrollment vs
/// synthesized test) and averages the cosine between each synthesized
/// embedding and the natural embedding of the same utterance.
pub fn evaluate(
    set: &EvalSet,
    natural: &BTreeMap<String, SpeakerEmbedding>,
    n_trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let lookup = |id: &str| {
        natural
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no natural embedding for {id}")))
    };
    let synth: BTreeMap<&str, &SpeakerEmbedding> =
        set.records.iter().map(|r| (r.utt_id.as_str(), &r.synth_emb)).collect();
    let utts: Vec<(String, String)> = set
        .records
        .iter()
        .map(|r| (r.utt_id.clone(), r.speaker_id.clone()))
        .collect();
    let trials = generate_trials(&utts, n_trials, seed)?;

    let mut scores = Vec::with_capacity(trials.len());
    let mut natural_scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in &trials {
        let enroll = lookup(&t.enroll_utt_id)?;
        scores.push(cosine_score(enroll, synth[t.test_utt_id.as_str()])?);
        natural_scores.push(cosine_score(enroll, lookup(&t.test_utt_id)?)?);
        labels.push(t.same_speaker);
    }
    let eer = compute_eer(&scores, &labels)?;
    let natural_eer = compute_eer(&natural_scores, &labels)?;

    let mut total = 0.0;
    for r in &set.records {
        total += cosine_score(&r.synth_emb, lookup(&r.utt_id)?)?;
    }
    Ok(EvalReport {
        protocol: set.protocol,
        eer_percent: eer.eer_percent,
        threshold_at_eer: eer.threshold,
        avg_cosine: total / set.records.len() as f64,
        natural_eer_percent: natural_eer.eer_percent,
        trial_count: trials.len(),
        seed,
    })
}
