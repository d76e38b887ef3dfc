//! Text-to-mel synthesizer conditioned on a speaker embedding.

mod model;
mod text;

pub use model::{
    DecoderState, DecoderStepOutput, EncoderStates, PostnetOutput, PrenetDropout, SynthArch,
    SynthesisLimits, SynthesisOutput, SynthesizerModel, SYNTHESIZER_KIND,
};
pub use text::{text_to_ids, TextSequence, Vocabulary, EOS_ID, PAD_ID};
