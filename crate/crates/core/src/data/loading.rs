//! Turning manifest entries into model inputs.

use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::audio::{mel_spectrogram, read_wav, resample, MelConfig};
use crate::error::{Error, Result};
use crate::eval::EvalItem;
use crate::exec::Exec;
use crate::speaker::{LabelledMel, VerifierModel};
use crate::synth::text_to_ids;
use crate::tensor::Tensor;
use crate::training::TrainExample;

/// `[T, n_mels]` log-mel frames of a WAV file, resampled to the config rate if needed.
pub fn load_mel(path: impl AsRef<Path>, cfg: &MelConfig) -> Result<Tensor> {
    let mut clip = read_wav(path)?;
    if clip.sample_rate_hz != cfg.sample_rate_hz {
        clip = resample(&clip, cfg.sample_rate_hz)?.clip;
    }
    Ok(mel_spectrogram(&clip, cfg)?.frames)
}

/// `(utt_id, mel)` pairs in entry order.
pub fn load_mels(
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    cfg: &MelConfig,
    exec: Exec,
) -> Result<Vec<(String, Tensor)>> {
    let mels = exec.try_map(entries, |_, e| load_mel(manifest.audio_file(e), cfg))?;
    Ok(entries.iter().map(|e| e.utt_id.clone()).zip(mels).collect())
}

/// Dense class indices for the sorted distinct speakers of `entries`.
pub fn speaker_index(entries: &[&ManifestEntry]) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

pub fn labelled_mels(
    entries: &[&ManifestEntry],
    mels: &[(String, Tensor)],
    index: &BTreeMap<String, usize>,
) -> Result<Vec<LabelledMel>> {
    entries
        .iter()
        .zip(mels)
        .map(|(e, (_, m))| {
            let label = *index
                .get(&e.speaker_id)
                .ok_or_else(|| Error::invalid(format!("speaker {} has no class index", e.speaker_id)))?;
            Ok(LabelledMel {
                frames: m.clone(),
                label,
            })
        })
        .collect()
}

/// Synthesizer training examples; each reference embedding is the frozen
/// verifier's embedding of the target utterance itself.
pub fn train_examples(
    entries: &[&ManifestEntry],
    mels: &[(String, Tensor)],
    verifier: &VerifierModel,
    exec: Exec,
) -> Result<Vec<TrainExample>> {
    let pairs: Vec<(&ManifestEntry, &Tensor)> = entries.iter().copied().zip(mels.iter().map(|(_, m)| m)).collect();
    exec.try_map(&pairs, |_, (e, m)| {
        Ok(TrainExample {
            utt_id: e.utt_id.clone(),
            ids: text_to_ids(&e.transcript)?.ids,
            target: (*m).clone(),
            ref_emb: verifier.embed_frames(m)?,
        })
    })
}

pub fn eval_items(entries: &[&ManifestEntry]) -> Vec<EvalItem> {
    entries
        .iter()
        .map(|e| EvalItem {
            utt_id: e.utt_id.clone(),
            speaker_id: e.speaker_id.clone(),
            transcript: e.transcript.clone(),
        })
        .collect()
}
