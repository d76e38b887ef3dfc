//! Objective evaluation: verification trials, EER, cosine similarity, Dep/Indep
//! synthesis protocols and embedding export.

mod eer;
mod export;
mod protocol;
mod trials;

pub use eer::{compute_eer, EerResult};
pub use export::{export_embeddings, project_2d, read_embeddings, EmbeddingRow, EmbeddingTag, Pca};
pub use protocol::{
    evaluate, natural_eer, natural_embeddings, synthesize_eval_set, EvalItem, EvalRecord, EvalReport, EvalSet, Protocol,
};
pub use trials::{generate_trials, Trial};

use crate::autodiff::{dot, norm};
use crate::error::{Error, Result};
use crate::speaker::SpeakerEmbedding;

/// `a·b / (‖a‖ ‖b‖)`.
pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config(format!(
            "cannot score embeddings of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (norm(a.values()), norm(b.values()));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine of a zero-norm embedding"));
    }
    Ok((dot(a.values(), b.values()) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding(v.to_vec())
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_score(&e(&[1.0, 2.0]), &e(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&e(&[1.0, 0.0]), &e(&[0.0, 3.0])).unwrap(), 0.0);
        assert!((cosine_score(&e(&[1.0, 2.0]), &e(&[2.0, 4.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_score(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])), Err(Error::Numerical(_))));
        assert!(matches!(cosine_score(&e(&[1.0]), &e(&[1.0, 0.0])), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_score(&e(&a), &e(&b)).unwrap();
            prop_assert_eq!(ab, cosine_score(&e(&b), &e(&a)).unwrap());
            let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
            prop_assert!((cosine_score(&e(&ca), &e(&b)).unwrap() - ab).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
