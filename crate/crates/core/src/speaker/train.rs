//! Cross-entropy training of the verifier on fixed-length random crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::VerifierModel;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::{clip_global_norm, reduce_grads, OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Crop length in frames; shortened to the shortest utterance when needed.
    pub crop_frames: usize,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            crop_frames: 20,
            optimizer: OptimizerConfig::momentum_sgd(0.02),
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

/// One labelled utterance: `[T, n_mels]` frames and a speaker index.
#[derive(Clone, Debug)]
pub struct LabelledMel {
    pub frames: Tensor,
    pub label: usize,
}

/// Equal-length crops with labels.
#[derive(Clone, Debug)]
pub struct VerifierBatch {
    pub crops: Vec<Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifierTrainReport {
    pub losses: Vec<f64>,
    /// Whole-utterance classification accuracy after the last step.
    pub train_accuracy: f64,
}

fn check_batch(model: &VerifierModel, batch: &VerifierBatch) -> Result<()> {
    if batch.crops.is_empty() || batch.crops.len() != batch.labels.len() {
        return Err(Error::invalid("batch needs matching, non-empty crops and labels"));
    }
    let t = batch.crops[0].rows();
    if batch.crops.iter().any(|c| c.rows() != t) {
        return Err(Error::invalid("crops within a batch must share one length"));
    }
    let n = model.arch().n_speakers;
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {l} outside [0, {n})")));
    }
    Ok(())
}

/// Mean cross-entropy and its parameter gradients over a batch.
pub fn verifier_batch_gradients(
    model: &VerifierModel,
    batch: &VerifierBatch,
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(model, batch)?;
    if batch.crops[0].rows() < model.min_frames() {
        return Err(Error::invalid(format!(
            "crops of {} frames are shorter than the minimum {}",
            batch.crops[0].rows(),
            model.min_frames()
        )));
    }
    let pairs: Vec<(&Tensor, usize)> = batch.crops.iter().zip(batch.labels.iter().copied()).collect();
    let parts = exec.map(&pairs, |_, &(crop, label)| {
        let mut g = Graph::new();
        let b = g.bind(model.params(), true);
        let x = g.constant(crop.clone());
        let emb = model.embedding_graph(&mut g, &b, x);
        let logits = model.logits_graph(&mut g, &b, emb);
        let loss = g.softmax_xent(logits, label);
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss);
        (value, b.collect_grads(&mut grads, model.params()))
    });
    let n = parts.len() as f64;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grads = reduce_grads(parts.into_iter().map(|(_, g)| g).collect(), 1.0 / n);
    Ok((loss, grads))
}

/// One optimizer update; returns the batch loss before the update.
pub fn train_verifier_step(
    model: &mut VerifierModel,
    opt: &mut OptimizerState,
    batch: &VerifierBatch,
    step: usize,
    clip_norm: f64,
    exec: Exec,
) -> Result<f64> {
    let (loss, mut grads) = verifier_batch_gradients(model, batch, exec)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            term: "cross_entropy",
            value: loss,
        });
    }
    clip_global_norm(&mut grads, clip_norm);
    opt.apply(model.params_mut(), &grads);
    Ok(loss)
}

/// Draws a batch of random crops; indices and offsets come from `rng`.
pub fn sample_batch(data: &[LabelledMel], batch_size: usize, crop: usize, rng: &mut impl Rng) -> VerifierBatch {
    let mut crops = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u = &data[rng.random_range(0..data.len())];
        let start = rng.random_range(0..=u.frames.rows() - crop);
        let cols = u.frames.cols();
        crops.push(Tensor::new(
            vec![crop, cols],
            u.frames.data()[start * cols..(start + crop) * cols].to_vec(),
        ));
        labels.push(u.label);
    }
    VerifierBatch { crops, labels }
}

/// Fraction of utterances whose arg-max posterior equals the label.
pub fn accuracy(model: &VerifierModel, data: &[LabelledMel], exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let hits = exec.try_map(data, |_, u| -> Result<bool> {
        let emb = model.embed_frames(&u.frames)?;
        let p = model.classify(&emb)?;
        let best = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        Ok(best == u.label)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Full training loop. `on_step(step, loss)` is called after each update.
pub fn train_verifier(
    model: &mut VerifierModel,
    data: &[LabelledMel],
    cfg: &VerifierTrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<VerifierTrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let shortest = data.iter().map(|u| u.frames.rows()).min().unwrap_or(0);
    let crop = cfg.crop_frames.min(shortest);
    if crop < model.min_frames() {
        return Err(Error::invalid(format!(
            "shortest utterance has {shortest} frames; the verifier needs at least {}",
            model.min_frames()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch_size, crop, &mut rng);
        let loss = train_verifier_step(model, &mut opt, &batch, step, cfg.clip_norm, exec)?;
        on_step(step, loss);
        losses.push(loss);
    }
    let train_accuracy = accuracy(model, data, exec)?;
    Ok(VerifierTrainReport {
        losses,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker::VerifierArch;

    fn tiny_data() -> Vec<LabelledMel> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..6)
            .map(|i| LabelledMel {
                frames: Tensor::new(
                    vec![16, 80],
                    (0..16 * 80).map(|_| rng.random_range(-10.0..0.0)).collect(),
                ),
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut m = VerifierModel::new(VerifierArch::toy(), 1).unwrap();
        let before = m.params().digest();
        let cfg = VerifierTrainConfig {
            steps: 3,
            batch_size: 4,
            optimizer: OptimizerConfig::momentum_sgd(0.0),
            ..Default::default()
        };
        train_verifier(&mut m, &tiny_data(), &cfg, Exec::default(), |_, _| {}).unwrap();
        assert_eq!(m.params().digest(), before);
    }

    #[test]
    fn same_seed_same_losses_across_executors() {
        let cfg = VerifierTrainConfig {
            steps: 4,
            batch_size: 4,
            ..Default::default()
        };
        let run = |exec| {
            let mut m = VerifierModel::new(VerifierArch::toy(), 2).unwrap();
            let r = train_verifier(&mut m, &tiny_data(), &cfg, exec, |_, _| {}).unwrap();
            (r.losses, m.params().digest())
        };
        let a = run(Exec::Sequential);
        assert_eq!(a, run(Exec::Sequential));
        assert_eq!(a, run(Exec::Parallel));
    }

    #[test]
    fn bad_labels_and_short_data_rejected() {
        let mut m = VerifierModel::new(VerifierArch::toy(), 2).unwrap();
        let mut data = tiny_data();
        data[0].label = 99;
        let cfg = VerifierTrainConfig::default();
        assert!(matches!(
            train_verifier(&mut m, &data, &cfg, Exec::Sequential, |_, _| {}),
            Err(Error::InvalidInput(_))
        ));
        let short = vec![LabelledMel {
            frames: Tensor::zeros(&[5, 80]),
            label: 0,
        }];
        let err = train_verifier(&mut m, &short, &cfg, Exec::Sequential, |_, _| {}).unwrap_err();
        assert!(err.to_string().contains("at least 8"));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let mut m = VerifierModel::new(VerifierArch::toy(), 2).unwrap();
        let fc2_b = m.classifier_ids()[3];
        m.params_mut().get_mut(fc2_b).data_mut()[0] = f64::NAN;
        let mut opt = OptimizerState::new(OptimizerConfig::momentum_sgd(0.1), m.params());
        let batch = VerifierBatch {
            crops: vec![Tensor::full(&[8, 80], -5.0)],
            labels: vec![0],
        };
        let err = train_verifier_step(&mut m, &mut opt, &batch, 17, 0.0, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 17, .. }));
    }
}
