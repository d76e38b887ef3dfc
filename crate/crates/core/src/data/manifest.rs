use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub split: Split,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    pub transcript: String,
}

/// Tab-separated utterance list with a header line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Base for relative audio paths; the manifest file's directory after [`read`](Self::read).
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            root: root.into(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::invalid(format!("duplicate utt_id {}", e.utt_id)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, root)
    }

    pub fn audio_file(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.audio_path)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Sorted distinct speaker ids of the given split.
    pub fn speakers(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.speaker_id.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn counts_by_speaker(&self, split: Split) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            *out.entry(e.speaker_id.clone()).or_insert(0) += 1;
        }
        out
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, spk: &str, split: Split, text: &str) -> ManifestEntry {
        ManifestEntry {
            utt_id: id.into(),
            speaker_id: spk.into(),
            split,
            audio_path: PathBuf::from(format!("wavs/{id}.wav")),
            transcript: text.into(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            vec![
                entry("a", "s1", Split::Train, "hello, world"),
                entry("b", "s1", Split::Val, "tab\there \"quoted\""),
                entry("c", "s2", Split::Test, "ünïcode"),
            ],
            dir.path(),
        )
        .unwrap();
        let path = dir.path().join("manifest.tsv");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.audio_file(&back.entries[0]), dir.path().join("wavs/a.wav"));
        assert_eq!(back.speakers(Split::Train), vec!["s1".to_string()]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("utt_id\tspeaker_id\tsplit\taudio_path\ttranscript\n"));
    }

    #[test]
    fn duplicates_and_bad_rows_rejected() {
        let dup = DatasetManifest::new(vec![entry("a", "s", Split::Train, "x"), entry("a", "s", Split::Val, "y")], "");
        assert!(matches!(dup, Err(Error::InvalidInput(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "utt_id\tspeaker_id\tsplit\taudio_path\ttranscript\na\ts\tnope\tx.wav\thi\n").unwrap();
        assert!(matches!(DatasetManifest::read(&path), Err(Error::Format(_))));
        assert!(matches!(DatasetManifest::read(dir.path().join("none.tsv")), Err(Error::Io { .. })));
    }
}
