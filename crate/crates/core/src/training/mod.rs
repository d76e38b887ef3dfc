//! Two-phase synthesizer training.
//!
//! The baseline phase minimises mel reconstruction, stop-token and weight
//! penalties. The feedback phase adds `1 - cos(ref, verifier(mel_post))`, where
//! the verifier is bound into every graph as constants so it never changes.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits, norm, Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::{clip_global_norm, reduce_grads, OptimizerConfig, OptimizerState};
use crate::speaker::{SpeakerEmbedding, VerifierModel};
use crate::synth::{PrenetDropout, SynthesisOutput, SynthesizerModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Fc,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Fc => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub w_reg: f64,
    pub w_spk: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// PreNet dropout during training; off makes every forward deterministic.
    pub prenet_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl TrainConfig {
    pub fn baseline() -> Self {
        Self {
            phase: Phase::Baseline,
            w_reg: 1e-6,
            w_spk: 0.0,
            batch_size: 8,
            total_steps: 3000,
            seed: 17,
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 1.0,
            checkpoint_every: 1000,
            prenet_dropout: true,
        }
    }

    pub fn fc() -> Self {
        Self {
            phase: Phase::Fc,
            w_spk: 1.0,
            seed: 29,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_reg >= 0.0) || !(self.w_spk >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.phase == Phase::Baseline && self.w_spk > 0.0 {
            return Err(Error::config("w_spk > 0 is only allowed in the fc phase"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Per-term loss record of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_pre: f64,
    pub mse_post: f64,
    pub stop_loss: f64,
    pub reg_loss: f64,
    pub speaker_loss: f64,
    pub total: f64,
    pub w_reg: f64,
    pub w_spk: f64,
}

impl LossBreakdown {
    pub fn new(mse_pre: f64, mse_post: f64, stop_loss: f64, reg_loss: f64, speaker_loss: f64, w_reg: f64, w_spk: f64) -> Self {
        let mut b = Self {
            mse_pre,
            mse_post,
            stop_loss,
            reg_loss,
            speaker_loss,
            total: 0.0,
            w_reg,
            w_spk,
        };
        b.total = b.recompute_total();
        b
    }

    /// `mse_pre + mse_post + stop + w_reg·reg + w_spk·speaker`, in that order.
    pub fn recompute_total(&self) -> f64 {
        self.mse_pre + self.mse_post + self.stop_loss + self.w_reg * self.reg_loss + self.w_spk * self.speaker_loss
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("mse_pre", self.mse_pre),
            ("mse_post", self.mse_post),
            ("stop_loss", self.stop_loss),
            ("reg_loss", self.reg_loss),
            ("speaker_loss", self.speaker_loss),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }

    pub const FIELDS: [&'static str; 8] = [
        "mse_pre",
        "mse_post",
        "stop_loss",
        "reg_loss",
        "speaker_loss",
        "total",
        "w_reg",
        "w_spk",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.mse_pre,
            self.mse_post,
            self.stop_loss,
            self.reg_loss,
            self.speaker_loss,
            self.total,
            self.w_reg,
            self.w_spk,
        ]
    }
}

/// One training utterance: token ids, target mel, and the reference embedding
/// extracted from the target by the frozen verifier.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub utt_id: String,
    pub ids: Vec<usize>,
    pub target: Tensor,
    pub ref_emb: SpeakerEmbedding,
}

/// Zeros, then ones over the final decoder step: with `reduction` frames per
/// step, every frame that shares the last step's stop logit is a stop frame.
pub fn stop_targets(frames: usize, reduction: usize) -> Vec<f64> {
    let ones = match frames {
        0 => 0,
        n => (n - 1) % reduction.max(1) + 1,
    };
    let mut t = vec![0.0; frames];
    t[frames - ones..].fill(1.0);
    t
}

fn check_stop_targets(t: &[f64]) -> Result<()> {
    let first_one = t.iter().position(|&v| v == 1.0).unwrap_or(t.len());
    let ok = t.iter().all(|&v| v == 0.0 || v == 1.0)
        && first_one < t.len()
        && t[first_one..].iter().all(|&v| v == 1.0);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("stop targets must be zeros followed by one trailing block of ones"))
    }
}

fn check_feedback_inputs(mel: &Tensor, ref_emb: &SpeakerEmbedding, verifier: &VerifierModel) -> Result<()> {
    if ref_emb.dim() != verifier.embedding_dim() {
        return Err(Error::config(format!(
            "reference embedding has dimension {}, verifier produces {}",
            ref_emb.dim(),
            verifier.embedding_dim()
        )));
    }
    if mel.cols() != verifier.arch().n_mels {
        return Err(Error::config(format!(
            "predicted mel has {} bins, verifier expects {}",
            mel.cols(),
            verifier.arch().n_mels
        )));
    }
    if mel.rows() < verifier.min_frames() {
        return Err(Error::invalid(format!(
            "predicted mel has {} frames; the verifier needs at least {}",
            mel.rows(),
            verifier.min_frames()
        )));
    }
    if ref_emb.norm() == 0.0 {
        return Err(Error::numerical("reference embedding has zero norm"));
    }
    Ok(())
}

/// Adds the frozen verifier and cosine distance on top of `mel` inside `g`.
/// Returns the distance node.
fn feedback_node(g: &mut Graph, verifier: &VerifierModel, mel: Var, ref_emb: &SpeakerEmbedding) -> Result<Var> {
    let frozen = g.bind(verifier.params(), false);
    let pred = verifier.embedding_graph(g, &frozen, mel);
    if norm(g.value(pred).data()) == 0.0 {
        return Err(Error::numerical("predicted-mel embedding has zero norm"));
    }
    let r = g.constant(ref_emb.to_row());
    Ok(g.cosine_distance(pred, r))
}

fn clamp_distance(v: f64) -> f64 {
    v.clamp(0.0, 2.0)
}

/// `1 - cos(ref_emb, verifier(mel_post))`, in `[0, 2]`.
pub fn speaker_feedback_loss(mel_post: &Tensor, ref_emb: &SpeakerEmbedding, verifier: &VerifierModel) -> Result<f64> {
    check_feedback_inputs(mel_post, ref_emb, verifier)?;
    let mut g = Graph::new();
    let x = g.constant(mel_post.clone());
    let d = feedback_node(&mut g, verifier, x, ref_emb)?;
    Ok(clamp_distance(g.value(d).data()[0]))
}

/// Feedback loss and its gradient with respect to `mel_post`.
pub fn speaker_feedback_gradient(
    mel_post: &Tensor,
    ref_emb: &SpeakerEmbedding,
    verifier: &VerifierModel,
) -> Result<(f64, Tensor)> {
    check_feedback_inputs(mel_post, ref_emb, verifier)?;
    let mut g = Graph::new();
    let x = g.variable(mel_post.clone());
    let d = feedback_node(&mut g, verifier, x, ref_emb)?;
    let mut grads = g.backward(d);
    let dx = grads.take(x).unwrap_or_else(|| Tensor::zeros(mel_post.shape()));
    Ok((clamp_distance(g.value(d).data()[0]), dx))
}

/// Value-level composite loss of one output against its target.
pub fn composite_loss(
    out: &SynthesisOutput,
    target: &Tensor,
    stop_target: &[f64],
    synth: &SynthesizerModel,
    feedback: Option<(&VerifierModel, &SpeakerEmbedding)>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if out.mel_pre.shape() != target.shape() || out.mel_post.shape() != target.shape() {
        return Err(Error::config(format!(
            "output shape {:?} does not match target {:?}",
            out.mel_pre.shape(),
            target.shape()
        )));
    }
    if stop_target.len() != out.stop_logits.len() || stop_target.len() != target.rows() {
        return Err(Error::config("stop targets must have one entry per frame"));
    }
    check_stop_targets(stop_target)?;
    let n = target.len() as f64;
    let mse = |pred: &Tensor| -> f64 {
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n
    };
    let stop = out
        .stop_logits
        .iter()
        .zip(stop_target)
        .map(|(&x, &y)| bce_with_logits(x, y))
        .sum::<f64>()
        / stop_target.len() as f64;
    let speaker = match (cfg.phase, feedback) {
        (Phase::Fc, Some((v, r))) => speaker_feedback_loss(&out.mel_post, r, v)?,
        (Phase::Fc, None) => return Err(Error::config("fc phase needs a verifier and reference embedding")),
        (Phase::Baseline, _) => 0.0,
    };
    Ok(LossBreakdown::new(
        mse(&out.mel_pre),
        mse(&out.mel_post),
        stop,
        synth.params().sum_sq(),
        speaker,
        cfg.w_reg,
        cfg.w_spk,
    ))
}

/// Per-sample PreNet dropout seed derived from `(seed, step, index)`.
pub fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SampleTerms {
    sq_pre: f64,
    sq_post: f64,
    bce: f64,
    speaker: f64,
    grads: Vec<Tensor>,
}

fn validate_batch(
    batch: &[&TrainExample],
    synth: &SynthesizerModel,
    verifier: Option<&VerifierModel>,
    cfg: &TrainConfig,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let arch = synth.arch();
    for ex in batch {
        if ex.target.cols() != arch.n_mels {
            return Err(Error::config(format!(
                "{}: target has {} mel bins, synthesizer expects {}",
                ex.utt_id,
                ex.target.cols(),
                arch.n_mels
            )));
        }
        if ex.target.rows() == 0 || ex.ids.is_empty() {
            return Err(Error::invalid(format!("{}: empty text or target", ex.utt_id)));
        }
        if ex.ref_emb.dim() != arch.speaker_dim {
            return Err(Error::config(format!(
                "{}: reference embedding has dimension {}, synthesizer expects {}",
                ex.utt_id,
                ex.ref_emb.dim(),
                arch.speaker_dim
            )));
        }
        if let Some(&bad) = ex.ids.iter().find(|&&i| i >= arch.vocab_size) {
            return Err(Error::invalid(format!("{}: token id {bad} outside vocabulary", ex.utt_id)));
        }
        if cfg.phase == Phase::Fc {
            let v = verifier.ok_or_else(|| Error::config("fc phase needs a verifier"))?;
            check_feedback_inputs(&ex.target, &ex.ref_emb, v)?;
        }
    }
    Ok(())
}

/// Batch loss and gradients for the current parameters. `step` only feeds the
/// dropout seeds.
pub fn compute_gradients(
    batch: &[&TrainExample],
    synth: &SynthesizerModel,
    verifier: Option<&VerifierModel>,
    cfg: &TrainConfig,
    step: usize,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    cfg.validate()?;
    validate_batch(batch, synth, verifier, cfg)?;
    let n_mels = synth.arch().n_mels as f64;
    let frames: usize = batch.iter().map(|e| e.target.rows()).sum();
    let mel_norm = 1.0 / (frames as f64 * n_mels);
    let stop_norm = 1.0 / frames as f64;
    let spk_norm = 1.0 / batch.len() as f64;

    let parts = exec.try_map(batch, |i, ex| -> Result<SampleTerms> {
        let mut dropout = if cfg.prenet_dropout {
            PrenetDropout::seeded(sample_seed(cfg.seed, step, i))
        } else {
            PrenetDropout::Off
        };
        let mut g = Graph::new();
        let b = g.bind(synth.params(), true);
        let emb = g.constant(synth.conditioning_row(&ex.ref_emb));
        let v = synth.teacher_forced_graph(&mut g, &b, &ex.ids, emb, &ex.target, &mut dropout);
        let sq_pre = g.sq_err_sum(v.mel_pre, ex.target.clone());
        let sq_post = g.sq_err_sum(v.mel_post, ex.target.clone());
        let bce = g.bce_logits_sum(v.stop_logits, stop_targets(ex.target.rows(), synth.arch().reduction));
        let t_pre = g.scale(sq_pre, mel_norm);
        let t_post = g.scale(sq_post, mel_norm);
        let t_stop = g.scale(bce, stop_norm);
        let mut loss = g.add(t_pre, t_post);
        loss = g.add(loss, t_stop);
        let mut speaker = 0.0;
        if cfg.phase == Phase::Fc {
            let v_model = verifier.expect("validated above");
            let d = feedback_node(&mut g, v_model, v.mel_post, &ex.ref_emb)?;
            speaker = clamp_distance(g.value(d).data()[0]);
            if cfg.w_spk > 0.0 {
                let t_spk = g.scale(d, cfg.w_spk * spk_norm);
                loss = g.add(loss, t_spk);
            }
        }
        let mut grads = g.backward(loss);
        Ok(SampleTerms {
            sq_pre: g.value(sq_pre).data()[0],
            sq_post: g.value(sq_post).data()[0],
            bce: g.value(bce).data()[0],
            speaker,
            grads: b.collect_grads(&mut grads, synth.params()),
        })
    })?;

    let (mut sq_pre, mut sq_post, mut bce, mut speaker) = (0.0, 0.0, 0.0, 0.0);
    for p in &parts {
        sq_pre += p.sq_pre;
        sq_post += p.sq_post;
        bce += p.bce;
        speaker += p.speaker;
    }
    let breakdown = LossBreakdown::new(
        sq_pre * mel_norm,
        sq_post * mel_norm,
        bce * stop_norm,
        synth.params().sum_sq(),
        speaker * spk_norm,
        cfg.w_reg,
        cfg.w_spk,
    );
    let mut grads = reduce_grads(parts.into_iter().map(|p| p.grads).collect(), 1.0);
    for (g, p) in grads.iter_mut().zip(synth.params().tensors()) {
        for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
            *gv += 2.0 * cfg.w_reg * pv;
        }
    }
    Ok((breakdown, grads))
}

/// One optimizer update of the synthesizer. The verifier is only read.
pub fn train_step(
    batch: &[&TrainExample],
    synth: &mut SynthesizerModel,
    verifier: Option<&VerifierModel>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
    exec: Exec,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads) = compute_gradients(batch, synth, verifier, cfg, step, exec)?;
    if let Some((term, value)) = breakdown.non_finite_term() {
        return Err(Error::Divergence { step, term, value });
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    opt.apply(synth.params_mut(), &grads);
    Ok(breakdown)
}

/// Mean and standard deviation over every entry of the targets.
pub fn fit_mel_stats(examples: &[TrainExample]) -> Result<(f64, f64)> {
    let n: usize = examples.iter().map(|e| e.target.len()).sum();
    if n == 0 {
        return Err(Error::invalid("no mel frames to fit statistics on"));
    }
    let mean = examples.iter().map(|e| e.target.sum()).sum::<f64>() / n as f64;
    let var = examples
        .iter()
        .flat_map(|e| e.target.data().iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt().max(1e-3)))
}

/// Epoch-shuffled batch order, fully determined by the seed.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Where a run writes its artefacts.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunOutputs {
    /// `<stem>.step<N>.ckpt` next to the final checkpoint.
    pub fn intermediate(&self, step: usize) -> PathBuf {
        let stem = self
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "synth".into());
        self.checkpoint.with_file_name(format!("{stem}.step{step}.ckpt"))
    }
}

/// Loads the checkpoints a phase depends on. The verifier is always required;
/// the fc phase also requires an initial synthesizer.
pub fn load_prerequisites(
    phase: Phase,
    verifier: Option<&Path>,
    init: Option<&Path>,
) -> Result<(VerifierModel, Option<SynthesizerModel>)> {
    let need = |p: Option<&Path>, what: &str| -> Result<PathBuf> {
        match p {
            Some(p) if p.is_file() => Ok(p.to_path_buf()),
            Some(p) => Err(Error::config(format!("{what} checkpoint {} does not exist", p.display()))),
            None => Err(Error::config(format!("{} phase requires a {what} checkpoint", phase.name()))),
        }
    };
    let v = VerifierModel::load(need(verifier, "verifier")?)?;
    let s = match (phase, init) {
        (Phase::Fc, _) => Some(SynthesizerModel::load(need(init, "baseline synthesizer")?)?),
        (Phase::Baseline, Some(p)) => Some(SynthesizerModel::load(need(Some(p), "initial synthesizer")?)?),
        (Phase::Baseline, None) => None,
    };
    Ok((v, s))
}

fn open_metrics(path: &Path) -> Result<std::fs::File> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        let header = std::iter::once("step")
            .chain(LossBreakdown::FIELDS)
            .collect::<Vec<_>>()
            .join("\t");
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn append_metrics(f: &mut std::fs::File, path: &Path, step: usize, b: &LossBreakdown) -> Result<()> {
    let mut line = step.to_string();
    for v in b.values() {
        line.push('\t');
        line.push_str(&v.to_string());
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `synth` for `cfg.total_steps` steps, appending one metrics line per
/// step and saving checkpoints at the configured cadence and at the end.
pub fn run_training(
    synth: &mut SynthesizerModel,
    verifier: &VerifierModel,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    outputs: &RunOutputs,
    exec: Exec,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let all: Vec<&TrainExample> = examples.iter().collect();
    validate_batch(&all, synth, Some(verifier), cfg)?;
    if let Some(dir) = outputs.metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = open_metrics(&outputs.metrics)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), synth.params());
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch: Vec<&TrainExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &examples[i])
            .collect();
        let b = train_step(&batch, synth, Some(verifier), &mut opt, cfg, step, exec)?;
        append_metrics(&mut log, &outputs.metrics, step, &b)?;
        on_step(step, &b);
        history.push(b);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps {
            synth.save(outputs.intermediate(step + 1))?;
        }
    }
    synth.save(&outputs.checkpoint)?;
    Ok(history)
}
