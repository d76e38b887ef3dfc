//! Corpus manifests, on-disk layouts, the synthetic toy corpus, and loaders.

mod layout;
mod loading;
mod manifest;
mod toy;

pub use layout::{build_manifest, CorpusLayout, SplitSpec, ValidationReport};
pub use loading::{eval_items, labelled_mels, load_mel, load_mels, speaker_index, train_examples};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use toy::{make_toy_dataset, render_utterance, toy_speakers, ToyDatasetSpec, ToySpeaker};
