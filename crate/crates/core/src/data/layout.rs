//! Manifest building for on-disk corpora.
//!
//! * `vctk_like`: `wav48/<spk>/<utt>.wav` with `txt/<spk>/<utt>.txt`.
//! * `librispeech_like`: `<spk>/<chapter>/<utt>.wav` with one
//!   `<spk>-<chapter>.trans.txt` per chapter holding `<utt> TEXT` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusLayout {
    VctkLike,
    LibrispeechLike,
}

impl FromStr for CorpusLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vctk_like" => Ok(CorpusLayout::VctkLike),
            "librispeech_like" => Ok(CorpusLayout::LibrispeechLike),
            other => Err(Error::config(format!(
                "unknown layout {other:?} (expected vctk_like or librispeech_like)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Whole speakers held out as the test split.
    pub test_speakers: usize,
    /// Utterances per remaining speaker moved to the validation split.
    pub val_per_speaker: usize,
    /// Restrict the corpus to these speakers (empty keeps all).
    pub speakers: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_speakers: 8,
            val_per_speaker: 8,
            speakers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub missing_transcripts: Vec<PathBuf>,
    pub unreadable_audio: Vec<(PathBuf, String)>,
    /// Training speakers with too few utterances for the full validation quota.
    pub flagged_speakers: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing_transcripts.is_empty() && self.unreadable_audio.is_empty() && self.flagged_speakers.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "missing_transcripts={} unreadable_audio={} flagged_speakers={}",
            self.missing_transcripts.len(),
            self.unreadable_audio.len(),
            self.flagged_speakers.len()
        );
        for p in &self.missing_transcripts {
            s.push_str(&format!("\nmissing transcript: {}", p.display()));
        }
        for (p, why) in &self.unreadable_audio {
            s.push_str(&format!("\nunreadable audio: {}: {why}", p.display()));
        }
        for spk in &self.flagged_speakers {
            s.push_str(&format!("\nshort speaker: {spk}"));
        }
        s
    }
}

struct Found {
    utt_id: String,
    speaker_id: String,
    audio: PathBuf,
    transcript: Option<String>,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(e.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn scan_vctk(root: &Path) -> Result<Vec<Found>> {
    let mut out = Vec::new();
    for spk_dir in sorted_dir(&root.join("wav48"))?.into_iter().filter(|p| p.is_dir()) {
        let spk = spk_dir.file_name().unwrap().to_string_lossy().into_owned();
        for wav in sorted_dir(&spk_dir)?.into_iter().filter(|p| is_wav(p)) {
            let utt = wav.file_stem().unwrap().to_string_lossy().into_owned();
            let txt = root.join("txt").join(&spk).join(format!("{utt}.txt"));
            out.push(Found {
                utt_id: utt,
                speaker_id: spk.clone(),
                audio: wav,
                transcript: fs::read_to_string(&txt).ok().map(|t| t.trim().to_string()),
            });
        }
    }
    Ok(out)
}

fn scan_librispeech(root: &Path) -> Result<Vec<Found>> {
    let mut out = Vec::new();
    for spk_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let spk = spk_dir.file_name().unwrap().to_string_lossy().into_owned();
        for ch_dir in sorted_dir(&spk_dir)?.into_iter().filter(|p| p.is_dir()) {
            let ch = ch_dir.file_name().unwrap().to_string_lossy().into_owned();
            let trans_path = ch_dir.join(format!("{spk}-{ch}.trans.txt"));
            let texts: BTreeMap<String, String> = fs::read_to_string(&trans_path)
                .unwrap_or_default()
                .lines()
                .filter_map(|l| l.split_once(' '))
                .map(|(id, t)| (id.to_string(), t.trim().to_string()))
                .collect();
            for wav in sorted_dir(&ch_dir)?.into_iter().filter(|p| is_wav(p)) {
                let utt = wav.file_stem().unwrap().to_string_lossy().into_owned();
                out.push(Found {
                    transcript: texts.get(&utt).cloned(),
                    utt_id: utt,
                    speaker_id: spk.clone(),
                    audio: wav,
                });
            }
        }
    }
    Ok(out)
}

/// Scans `root`, drops utterances with a missing transcript or unreadable
/// audio (listing them in the report), and assigns splits deterministically.
///
/// Split rule: after shuffling speakers with `seed`, the first
/// `test_speakers` go to `test`. Each remaining speaker contributes
/// `val_per_speaker` shuffled utterances to `val` and the rest to `train`; a
/// speaker with no more than `val_per_speaker` utterances is flagged and gives
/// only one utterance to `val`.
pub fn build_manifest(
    root: impl AsRef<Path>,
    layout: CorpusLayout,
    split: &SplitSpec,
    seed: u64,
) -> Result<(DatasetManifest, ValidationReport)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::invalid(format!("corpus root {} is not a directory", root.display())));
    }
    // absolute audio paths keep the manifest valid wherever it is written
    let root = &root.canonicalize().map_err(|e| Error::io(root, e))?;
    let found = match layout {
        CorpusLayout::VctkLike => scan_vctk(root)?,
        CorpusLayout::LibrispeechLike => scan_librispeech(root)?,
    };
    let mut report = ValidationReport::default();
    let mut by_speaker: BTreeMap<String, Vec<(String, PathBuf, String)>> = BTreeMap::new();
    for f in found {
        if !split.speakers.is_empty() && !split.speakers.contains(&f.speaker_id) {
            continue;
        }
        let Some(text) = f.transcript else {
            report.missing_transcripts.push(f.audio);
            continue;
        };
        if let Err(e) = hound::WavReader::open(&f.audio) {
            report.unreadable_audio.push((f.audio, e.to_string()));
            continue;
        }
        by_speaker.entry(f.speaker_id).or_default().push((f.utt_id, f.audio, text));
    }
    if by_speaker.is_empty() {
        return Err(Error::invalid(format!("no usable utterances under {}", root.display())));
    }
    if split.test_speakers >= by_speaker.len() {
        return Err(Error::config(format!(
            "cannot hold out {} test speakers from {}",
            split.test_speakers,
            by_speaker.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speakers: Vec<String> = by_speaker.keys().cloned().collect();
    speakers.shuffle(&mut rng);
    let test: Vec<String> = speakers[..split.test_speakers].to_vec();

    let mut entries = Vec::new();
    for (spk, mut utts) in by_speaker {
        let is_test = test.contains(&spk);
        utts.shuffle(&mut rng);
        let n_val = if is_test {
            0
        } else if utts.len() > split.val_per_speaker {
            split.val_per_speaker
        } else {
            report.flagged_speakers.push(spk.clone());
            1
        };
        for (k, (utt_id, audio_path, transcript)) in utts.into_iter().enumerate() {
            let s = if is_test {
                Split::Test
            } else if k < n_val {
                Split::Val
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                utt_id,
                speaker_id: spk.clone(),
                split: s,
                audio_path,
                transcript,
            });
        }
    }
    entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok((DatasetManifest::new(entries, root)?, report))
}
