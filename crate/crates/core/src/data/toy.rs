//! Synthetic corpus: each utterance plays its characters as harmonic tones.
//!
//! A speaker is a fundamental (log-spaced over 110–440 Hz) plus a harmonic
//! amplitude profile. A character shifts the pitch by a fixed number of
//! semitones and reweights the harmonics with a per-character timbre shared by
//! all speakers. That gives both a speaker axis and a content axis.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::audio::{write_wav, AudioClip};
use crate::error::{Error, Result};

const TONE_SECS: f64 = 0.080;
const RAMP_SECS: f64 = 0.010;
const F0_LOW_HZ: f64 = 110.0;
const F0_HIGH_HZ: f64 = 440.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Characters words are drawn from; each maps to a semitone offset.
    pub vocab: String,
    pub min_chars: usize,
    pub max_chars: usize,
    pub n_harmonics: usize,
    /// Pitch shift between consecutive vocabulary characters.
    pub semitones_per_char: f64,
    /// Spread of the per-character harmonic gains, in nepers; 0 disables.
    pub char_timbre: f64,
    /// Held-out utterances per speaker (the last ones generated).
    pub val_per_speaker: usize,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            utterances_per_speaker: 20,
            vocab: "abcdefgh".into(),
            min_chars: 4,
            max_chars: 7,
            n_harmonics: 6,
            semitones_per_char: 0.5,
            char_timbre: 1.0,
            val_per_speaker: 4,
            sample_rate_hz: 16_000,
            seed: 11,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::config("toy corpus needs at least one speaker and utterance"));
        }
        if self.vocab.is_empty() || self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::config("toy corpus needs a vocabulary and 1 <= min_chars <= max_chars"));
        }
        if crate::synth::text_to_ids(&self.vocab)?.unknown_count > 0 {
            return Err(Error::config(format!("toy vocab {:?} has characters the synthesizer cannot read", self.vocab)));
        }
        if !(self.semitones_per_char >= 0.0) || !(self.char_timbre >= 0.0) {
            return Err(Error::config("semitones_per_char and char_timbre must be non-negative"));
        }
        if self.n_harmonics == 0 {
            return Err(Error::config("n_harmonics must be at least 1"));
        }
        if self.val_per_speaker >= self.utterances_per_speaker {
            return Err(Error::config("val_per_speaker must leave training utterances"));
        }
        if self.sample_rate_hz < 8_000 {
            return Err(Error::config("toy sample rate must be at least 8 kHz"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeaker {
    pub speaker_id: String,
    pub fundamental_hz: f64,
    /// Sums to 1.
    pub harmonics: Vec<f64>,
}

pub fn toy_speakers(spec: &ToyDatasetSpec) -> Vec<ToySpeaker> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_speakers)
        .map(|s| {
            let frac = if spec.n_speakers == 1 {
                0.0
            } else {
                s as f64 / (spec.n_speakers - 1) as f64
            };
            let raw: Vec<f64> = (0..spec.n_harmonics).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            ToySpeaker {
                speaker_id: format!("spk{s:02}"),
                fundamental_hz: F0_LOW_HZ * (F0_HIGH_HZ / F0_LOW_HZ).powf(frac),
                harmonics: raw.into_iter().map(|a| a / total).collect(),
            }
        })
        .collect()
}

/// `[char][harmonic]` gains `exp(char_timbre * z)`, `z ~ N(0, 1)`.
pub fn char_timbres(spec: &ToyDatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7469_6d62_7265);
    spec.vocab
        .chars()
        .map(|_| {
            (0..spec.n_harmonics)
                .map(|_| (spec.char_timbre * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect()
        })
        .collect()
}

/// Renders `text` with `speaker`'s voice; characters outside `vocab` are silent.
pub fn render_utterance(speaker: &ToySpeaker, text: &str, spec: &ToyDatasetSpec) -> Vec<f64> {
    let (vocab, sample_rate_hz) = (spec.vocab.as_str(), spec.sample_rate_hz);
    let timbres = char_timbres(spec);
    let sr = f64::from(sample_rate_hz);
    let n = (TONE_SECS * sr).round() as usize;
    let ramp = (RAMP_SECS * sr).round() as usize;
    let mut out = Vec::with_capacity(n * text.len());
    for c in text.chars() {
        let Some(k) = vocab.chars().position(|v| v == c) else {
            out.extend(std::iter::repeat_n(0.0, n));
            continue;
        };
        let f = speaker.fundamental_hz * 2f64.powf(k as f64 * spec.semitones_per_char / 12.0);
        let gains: Vec<f64> = speaker.harmonics.iter().zip(&timbres[k]).map(|(a, t)| a * t).collect();
        let total: f64 = gains.iter().sum();
        for i in 0..n {
            let env = if i < ramp {
                0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos())
            } else if i >= n - ramp {
                0.5 * (1.0 - (PI * (n - 1 - i) as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            let t = i as f64 / sr;
            let mut v = 0.0;
            for (h, a) in gains.iter().map(|g| g / total).enumerate() {
                let fh = f * (h + 1) as f64;
                if fh < sr / 2.0 {
                    v += a * (2.0 * PI * fh * t).sin();
                }
            }
            out.push(0.5 * env * v);
        }
    }
    out
}

/// Writes `wavs/`, `txt/` and `manifest.tsv` under `out_dir`.
pub fn make_toy_dataset(spec: &ToyDatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wavs");
    let txt_dir = out_dir.join("txt");
    for d in [&wav_dir, &txt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let speakers = toy_speakers(spec);
    let vocab: Vec<char> = spec.vocab.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut entries = Vec::new();
    for spk in &speakers {
        for u in 0..spec.utterances_per_speaker {
            let len = rng.random_range(spec.min_chars..=spec.max_chars);
            let text: String = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
            let utt_id = format!("{}_{u:03}", spk.speaker_id);
            let samples = render_utterance(spk, &text, spec);
            let rel = PathBuf::from("wavs").join(format!("{utt_id}.wav"));
            write_wav(out_dir.join(&rel), &AudioClip::new(samples, spec.sample_rate_hz)?)?;
            let txt = txt_dir.join(format!("{utt_id}.txt"));
            fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
            let split = if u >= spec.utterances_per_speaker - spec.val_per_speaker {
                Split::Val
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                utt_id,
                speaker_id: spk.speaker_id.clone(),
                split,
                audio_path: rel,
                transcript: text,
            });
        }
    }
    let manifest = DatasetManifest::new(entries, out_dir)?;
    manifest.write(out_dir.join("manifest.tsv"))?;
    let sig_path = out_dir.join("speakers.tsv");
    let mut sig = String::from("speaker_id\tfundamental_hz\tharmonics\n");
    for s in &speakers {
        let h: Vec<String> = s.harmonics.iter().map(|a| format!("{a:.6}")).collect();
        sig.push_str(&format!("{}\t{:.4}\t{}\n", s.speaker_id, s.fundamental_hz, h.join(",")));
    }
    fs::write(&sig_path, sig).map_err(|e| Error::io(&sig_path, e))?;
    Ok(manifest)
}
