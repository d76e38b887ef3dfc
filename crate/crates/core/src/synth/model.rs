//! Attention-based text-to-mel network.
//!
//! Encoder: embedding lookup → same-padded conv stack (ReLU) → BLSTM, giving
//! `[L, e]` states. The speaker embedding is appended to every row to form the
//! `[L, e + d]` attention memory.
//!
//! Decoder, one frame per step:
//!
//! ```text
//! p      = PreNet(normalised previous frame)
//! h, c   = LSTM([p ; ctx_prev], h, c)
//! energy = tanh(h·Wq + memory·V + conv([α_prev, α_cum])·U + b) · v
//! α      = softmax(energy);  ctx = α · memory
//! mel    = mean + std · ([h ; ctx]·Wm + bm);  stop = [h ; ctx]·Ws + bs
//! ```
//!
//! PostNet: conv stack (tanh) on the normalised decoder output, scaled back by
//! `mel_std`, added as a residual.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::Vocabulary;
use crate::autodiff::{sigmoid, Bound, Graph, Var};
use crate::checkpoint::{ensure_kind, fill_params, load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::params::{glorot, he_normal, ParamId, ParamStore};
use crate::speaker::SpeakerEmbedding;
use crate::tensor::Tensor;

pub const SYNTHESIZER_KIND: &str = "synthesizer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArch {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub char_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_kernel: usize,
    /// Encoder output width `e`; each BLSTM direction has `e / 2` units.
    pub enc_width: usize,
    /// Speaker embedding width `d`.
    pub speaker_dim: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub decoder_dim: usize,
    pub attn_dim: usize,
    pub loc_filters: usize,
    pub loc_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_width: usize,
    pub postnet_kernel: usize,
    /// Log-mel statistics used to normalise network inputs and outputs.
    pub mel_mean: f64,
    pub mel_std: f64,
    /// Value of the all-silence go frame, `ln(log_floor)`.
    pub go_value: f64,
    /// Frames emitted per decoder step.
    pub reduction: usize,
    /// Scale the speaker embedding to unit length before conditioning.
    /// Raw verifier embeddings have norms in the tens and saturate the attention
    /// energies; cosine scoring ignores the norm, so nothing speaker-related is lost.
    pub unit_speaker: bool,
}

impl Default for SynthArch {
    fn default() -> Self {
        Self::toy()
    }
}

impl SynthArch {
    pub fn toy() -> Self {
        Self {
            vocab_size: Vocabulary::default().len(),
            n_mels: 80,
            char_dim: 16,
            enc_conv_layers: 3,
            enc_kernel: 5,
            enc_width: 32,
            speaker_dim: 64,
            prenet_dims: vec![32, 32],
            prenet_dropout: 0.5,
            decoder_dim: 64,
            attn_dim: 32,
            loc_filters: 8,
            loc_kernel: 7,
            postnet_layers: 3,
            postnet_width: 32,
            postnet_kernel: 5,
            mel_mean: -8.0,
            mel_std: 5.0,
            go_value: 1e-10f64.ln(),
            reduction: 3,
            unit_speaker: true,
        }
    }

    pub fn full() -> Self {
        Self {
            char_dim: 256,
            enc_conv_layers: 5,
            enc_width: 512,
            speaker_dim: 512,
            prenet_dims: vec![256, 256],
            decoder_dim: 1024,
            attn_dim: 128,
            loc_filters: 32,
            loc_kernel: 31,
            postnet_layers: 5,
            postnet_width: 512,
            reduction: 1,
            ..Self::toy()
        }
    }

    /// Gradient-check sized network.
    pub fn mini() -> Self {
        Self {
            vocab_size: 5,
            n_mels: 6,
            char_dim: 4,
            enc_conv_layers: 1,
            enc_kernel: 3,
            enc_width: 8,
            speaker_dim: 4,
            prenet_dims: vec![4, 4],
            decoder_dim: 8,
            attn_dim: 4,
            loc_filters: 2,
            loc_kernel: 3,
            postnet_layers: 2,
            postnet_width: 4,
            postnet_kernel: 3,
            mel_mean: -2.0,
            mel_std: 2.0,
            reduction: 1,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.n_mels,
            self.char_dim,
            self.enc_width,
            self.speaker_dim,
            self.decoder_dim,
            self.attn_dim,
            self.loc_filters,
            self.postnet_width,
        ];
        if positive.contains(&0) {
            return Err(Error::config("synthesizer dimensions must be positive"));
        }
        if self.enc_width % 2 != 0 {
            return Err(Error::config("enc_width must be even (two BLSTM halves)"));
        }
        if self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return Err(Error::config("prenet_dims must be non-empty and positive"));
        }
        if [self.enc_kernel, self.loc_kernel, self.postnet_kernel]
            .iter()
            .any(|k| k % 2 == 0)
        {
            return Err(Error::config("convolution kernels must be odd"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction must be at least 1"));
        }
        if self.postnet_layers == 0 {
            return Err(Error::config("postnet needs at least one layer"));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config("prenet_dropout must lie in [0, 1)"));
        }
        if !(self.mel_std > 0.0) || !self.mel_mean.is_finite() || !self.go_value.is_finite() {
            return Err(Error::config("mel_std must be positive, mel_mean and go_value finite"));
        }
        Ok(())
    }

    pub fn memory_dim(&self) -> usize {
        self.enc_width + self.speaker_dim
    }

    /// Frames on either side of `t` that can influence PostNet output at `t`.
    pub fn postnet_radius(&self) -> usize {
        self.postnet_layers * (self.postnet_kernel / 2)
    }

    /// Default decoding cap: `max(200, 12 L)`.
    pub fn max_steps_for(&self, text_len: usize) -> usize {
        200.max(12 * text_len)
    }
}

/// Source of PreNet dropout masks. `Off` is the determinism switch.
#[derive(Clone, Debug)]
pub enum PrenetDropout {
    Off,
    Seeded(ChaCha8Rng),
}

impl PrenetDropout {
    pub fn seeded(seed: u64) -> Self {
        Self::Seeded(ChaCha8Rng::seed_from_u64(seed))
    }

    fn mask(&mut self, dim: usize, p: f64) -> Option<Tensor> {
        match self {
            Self::Off => None,
            Self::Seeded(_) if p == 0.0 => None,
            Self::Seeded(rng) => {
                let keep = 1.0 / (1.0 - p);
                Some(Tensor::row(
                    (0..dim)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                ))
            }
        }
    }
}

/// Encoder rows. `speaker_dim` is 0 before conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Tensor,
    pub speaker_dim: usize,
}

/// Recurrent and attention state carried between decoder steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    pub context: Tensor,
    pub alpha_prev: Tensor,
    /// Running sum of every attention row emitted so far.
    pub alpha_cum: Tensor,
}

impl DecoderState {
    /// All-zero state for a memory of `text_len` rows.
    pub fn zero(arch: &SynthArch, text_len: usize) -> Self {
        Self {
            h: Tensor::zeros(&[1, arch.decoder_dim]),
            c: Tensor::zeros(&[1, arch.decoder_dim]),
            context: Tensor::zeros(&[1, arch.memory_dim()]),
            alpha_prev: Tensor::zeros(&[1, text_len]),
            alpha_cum: Tensor::zeros(&[1, text_len]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    /// `[reduction, n_mels]`
    pub mel: Tensor,
    pub stop_logit: f64,
    pub attention: Vec<f64>,
    pub state: DecoderState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostnetOutput {
    pub residual: Tensor,
    pub mel_post: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
    pub postnet_residual: Tensor,
    pub stop_logits: Vec<f64>,
    /// `[T_out, L]`; each row is a probability distribution.
    pub alignments: Tensor,
    /// True when the stop token fired; always false under teacher forcing.
    pub stopped_naturally: bool,
}

impl SynthesisOutput {
    pub fn n_frames(&self) -> usize {
        self.mel_post.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisLimits {
    pub stop_threshold: f64,
    pub max_steps: usize,
}

impl SynthesisLimits {
    pub fn for_text(arch: &SynthArch, text_len: usize) -> Self {
        Self {
            stop_threshold: 0.5,
            max_steps: arch.max_steps_for(text_len),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    w: ParamId,
    b: ParamId,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    enc_convs: Vec<Affine>,
    enc_fwd: Lstm,
    enc_bwd: Lstm,
    prenet: Vec<Affine>,
    dec: Lstm,
    attn_query: ParamId,
    attn_memory: ParamId,
    attn_loc_conv: ParamId,
    attn_loc_proj: ParamId,
    attn_bias: ParamId,
    attn_v: ParamId,
    mel_proj: Affine,
    stop_proj: Affine,
    postnet: Vec<Affine>,
}

/// Graph handles produced by a teacher-forced or free-running decode.
pub(crate) struct DecodeVars {
    pub mel_pre: Var,
    pub mel_post: Var,
    pub residual: Var,
    /// `[T, 1]`
    pub stop_logits: Var,
    pub alignments: Vec<Var>,
    pub stopped_naturally: bool,
}

struct StepVars {
    h: Var,
    c: Var,
    ctx: Var,
    alpha_prev: Var,
    alpha_cum: Var,
}

#[derive(Clone, Debug)]
pub struct SynthesizerModel {
    arch: SynthArch,
    params: ParamStore,
    layout: Layout,
}

fn add_lstm(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Lstm {
    let w = p.add(
        format!("{name}.w"),
        glorot(rng, &[input + hidden, 4 * hidden], input + hidden, hidden),
    );
    let mut bias = Tensor::zeros(&[1, 4 * hidden]);
    bias.data_mut()[hidden..2 * hidden].fill(1.0);
    let b = p.add(format!("{name}.b"), bias);
    Lstm { w, b, hidden }
}

impl SynthesizerModel {
    pub fn new(arch: SynthArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let a = &arch;
        let embed = p.add(
            "embed.table",
            glorot(&mut rng, &[a.vocab_size, a.char_dim], a.vocab_size, a.char_dim),
        );
        let mut enc_convs = Vec::new();
        let mut c_in = a.char_dim;
        for i in 0..a.enc_conv_layers {
            let fan = c_in * a.enc_kernel;
            enc_convs.push(Affine {
                w: p.add(
                    format!("encoder.conv{i}.w"),
                    he_normal(&mut rng, &[a.enc_width, c_in, a.enc_kernel], fan),
                ),
                b: p.add(format!("encoder.conv{i}.b"), Tensor::zeros(&[1, a.enc_width])),
            });
            c_in = a.enc_width;
        }
        let half = a.enc_width / 2;
        let enc_fwd = add_lstm(&mut p, &mut rng, "encoder.lstm_fwd", c_in, half);
        let enc_bwd = add_lstm(&mut p, &mut rng, "encoder.lstm_bwd", c_in, half);

        let mut prenet = Vec::new();
        let mut d_in = a.n_mels;
        for (i, &d) in a.prenet_dims.iter().enumerate() {
            prenet.push(Affine {
                w: p.add(format!("prenet.fc{i}.w"), he_normal(&mut rng, &[d_in, d], d_in)),
                b: p.add(format!("prenet.fc{i}.b"), Tensor::zeros(&[1, d])),
            });
            d_in = d;
        }
        let m = a.memory_dim();
        let dec = add_lstm(&mut p, &mut rng, "decoder.lstm", d_in + m, a.decoder_dim);

        let attn_query = p.add(
            "attention.query.w",
            glorot(&mut rng, &[a.decoder_dim, a.attn_dim], a.decoder_dim, a.attn_dim),
        );
        let attn_memory = p.add("attention.memory.w", glorot(&mut rng, &[m, a.attn_dim], m, a.attn_dim));
        let attn_loc_conv = p.add(
            "attention.location.conv",
            glorot(&mut rng, &[a.loc_filters, 2, a.loc_kernel], 2 * a.loc_kernel, a.loc_filters),
        );
        let attn_loc_proj = p.add(
            "attention.location.w",
            glorot(&mut rng, &[a.loc_filters, a.attn_dim], a.loc_filters, a.attn_dim),
        );
        let attn_bias = p.add("attention.b", Tensor::zeros(&[1, a.attn_dim]));
        let attn_v = p.add("attention.v", glorot(&mut rng, &[a.attn_dim, 1], a.attn_dim, 1));

        let proj_in = a.decoder_dim + m;
        let mel_proj = Affine {
            w: p.add("proj.mel.w", glorot(&mut rng, &[proj_in, a.reduction * a.n_mels], proj_in, a.n_mels)),
            b: p.add("proj.mel.b", Tensor::zeros(&[1, a.reduction * a.n_mels])),
        };
        let stop_proj = Affine {
            w: p.add("proj.stop.w", glorot(&mut rng, &[proj_in, 1], proj_in, 1)),
            b: p.add("proj.stop.b", Tensor::zeros(&[1, 1])),
        };

        let mut postnet = Vec::new();
        let k = a.postnet_kernel;
        for i in 0..a.postnet_layers {
            let c_in = if i == 0 { a.n_mels } else { a.postnet_width };
            let last = i + 1 == a.postnet_layers;
            let c_out = if last { a.n_mels } else { a.postnet_width };
            let mut w = glorot(&mut rng, &[c_out, c_in, k], c_in * k, c_out * k);
            if last {
                // small residual at initialisation
                w.scale_inplace(0.1);
            }
            postnet.push(Affine {
                w: p.add(format!("postnet.conv{i}.w"), w),
                b: p.add(format!("postnet.conv{i}.b"), Tensor::zeros(&[1, c_out])),
            });
        }

        Ok(Self {
            arch,
            params: p,
            layout: Layout {
                embed,
                enc_convs,
                enc_fwd,
                enc_bwd,
                prenet,
                dec,
                attn_query,
                attn_memory,
                attn_loc_conv,
                attn_loc_proj,
                attn_bias,
                attn_v,
                mel_proj,
                stop_proj,
                postnet,
            },
        })
    }

    pub fn arch(&self) -> &SynthArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Updates the mel statistics stored in the architecture.
    pub fn set_mel_stats(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::config("mel statistics must be finite with positive std"));
        }
        self.arch.mel_mean = mean;
        self.arch.mel_std = std;
        Ok(())
    }

    /// Ids of the stop projection `(w, b)`.
    pub fn stop_projection_ids(&self) -> (ParamId, ParamId) {
        (self.layout.stop_proj.w, self.layout.stop_proj.b)
    }

    /// Ids of the final PostNet layer `(w, b)`.
    pub fn postnet_final_ids(&self) -> (ParamId, ParamId) {
        let l = self.layout.postnet.last().expect("postnet has layers");
        (l.w, l.b)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.arch.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.arch.vocab_size
            )));
        }
        Ok(())
    }

    /// `[1, d]` conditioning row for `emb`; a zero embedding stays zero.
    pub fn conditioning_row(&self, emb: &SpeakerEmbedding) -> Tensor {
        let norm = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        if self.arch.unit_speaker && norm > 0.0 {
            Tensor::row(emb.values().iter().map(|v| v / norm).collect())
        } else {
            emb.to_row()
        }
    }

    fn check_embedding(&self, emb: &SpeakerEmbedding) -> Result<()> {
        if emb.dim() != self.arch.speaker_dim {
            return Err(Error::config(format!(
                "speaker embedding has dimension {}, synthesizer expects {}",
                emb.dim(),
                self.arch.speaker_dim
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: &Tensor) -> Result<()> {
        if target.cols() != self.arch.n_mels {
            return Err(Error::config(format!(
                "target has {} mel bins, synthesizer expects {}",
                target.cols(),
                self.arch.n_mels
            )));
        }
        if target.rows() == 0 {
            return Err(Error::invalid("empty target mel"));
        }
        Ok(())
    }

    // ---- graph builders ----

    fn lstm_cell(&self, g: &mut Graph, b: &Bound, p: &Lstm, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = p.hidden;
        let xh = g.concat_cols(&[x, h]);
        let z = g.matmul(xh, b.var(p.w));
        let z = g.add_row(z, b.var(p.b));
        let i = g.slice_cols(z, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, n, n);
        let f = g.sigmoid(f);
        let u = g.slice_cols(z, 2 * n, n);
        let u = g.tanh(u);
        let o = g.slice_cols(z, 3 * n, n);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c2 = g.add(fc, iu);
        let tc = g.tanh(c2);
        (g.mul(o, tc), c2)
    }

    fn lstm_run(&self, g: &mut Graph, b: &Bound, p: &Lstm, x: Var, reverse: bool) -> Var {
        let steps = g.value(x).rows();
        let mut h = g.constant(Tensor::zeros(&[1, p.hidden]));
        let mut c = g.constant(Tensor::zeros(&[1, p.hidden]));
        let mut outs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.slice_rows(x, t, 1);
            (h, c) = self.lstm_cell(g, b, p, xt, h, c);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }

    /// `[L, e]` encoder states.
    pub(crate) fn encoder_graph(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Var {
        let l = &self.layout;
        let mut x = g.embedding(b.var(l.embed), ids);
        for conv in &l.enc_convs {
            let y = g.conv1d(x, b.var(conv.w), Some(b.var(conv.b)));
            x = g.relu(y);
        }
        let fwd = self.lstm_run(g, b, &l.enc_fwd, x, false);
        let bwd = self.lstm_run(g, b, &l.enc_bwd, x, true);
        g.concat_cols(&[fwd, bwd])
    }

    /// Appends `emb: [1, d]` to every row of `states: [L, e]`.
    pub(crate) fn condition_graph(&self, g: &mut Graph, states: Var, emb: Var) -> Var {
        let rows = g.value(states).rows();
        let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
        let tiled = g.matmul(ones, emb);
        g.concat_cols(&[states, tiled])
    }

    fn normalise(&self, g: &mut Graph, x: Var) -> Var {
        let shifted = g.add_scalar(x, -self.arch.mel_mean);
        g.scale(shifted, 1.0 / self.arch.mel_std)
    }

    fn denormalise(&self, g: &mut Graph, x: Var) -> Var {
        let scaled = g.scale(x, self.arch.mel_std);
        g.add_scalar(scaled, self.arch.mel_mean)
    }

    fn prenet_graph(&self, g: &mut Graph, b: &Bound, prev: Var, dropout: &mut PrenetDropout) -> Var {
        let mut x = self.normalise(g, prev);
        for layer in &self.layout.prenet {
            let y = g.matmul(x, b.var(layer.w));
            let y = g.add_row(y, b.var(layer.b));
            x = g.relu(y);
            let dim = g.value(x).cols();
            if let Some(mask) = dropout.mask(dim, self.arch.prenet_dropout) {
                x = g.mul_const(x, mask);
            }
        }
        x
    }

    /// One decoder step on graph nodes. `pm` is `memory · V`, precomputed.
    /// The mel output holds `reduction` frames; stop and attention are per step.
    fn step_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        pm: Var,
        st: &StepVars,
        prev: Var,
        dropout: &mut PrenetDropout,
    ) -> (Var, Var, Var, StepVars) {
        let l = &self.layout;
        let p = self.prenet_graph(g, b, prev, dropout);
        let x = g.concat_cols(&[p, st.ctx]);
        let (h, c) = self.lstm_cell(g, b, &l.dec, x, st.h, st.c);

        let q = g.matmul(h, b.var(l.attn_query));
        let loc_in = g.concat_rows(&[st.alpha_prev, st.alpha_cum]);
        let loc_in = g.transpose(loc_in);
        let loc = g.conv1d(loc_in, b.var(l.attn_loc_conv), None);
        let loc = g.matmul(loc, b.var(l.attn_loc_proj));
        let e = g.add(pm, loc);
        let e = g.add_row(e, q);
        let e = g.add_row(e, b.var(l.attn_bias));
        let e = g.tanh(e);
        let energies = g.matmul(e, b.var(l.attn_v));
        let energies = g.transpose(energies);
        let alpha = g.softmax_rows(energies);
        let ctx = g.matmul(alpha, memory);
        let alpha_cum = g.add(st.alpha_cum, alpha);

        let hc = g.concat_cols(&[h, ctx]);
        let mel = g.matmul(hc, b.var(l.mel_proj.w));
        let mel = g.add_row(mel, b.var(l.mel_proj.b));
        let mel = g.reshape(mel, &[self.arch.reduction, self.arch.n_mels]);
        let mel = self.denormalise(g, mel);
        let stop = g.matmul(hc, b.var(l.stop_proj.w));
        let stop = g.add_row(stop, b.var(l.stop_proj.b));
        (
            mel,
            stop,
            alpha,
            StepVars {
                h,
                c,
                ctx,
                alpha_prev: alpha,
                alpha_cum,
            },
        )
    }

    /// Returns `(residual, mel_post)` nodes.
    pub(crate) fn postnet_graph(&self, g: &mut Graph, b: &Bound, mel_pre: Var) -> (Var, Var) {
        let mut x = self.normalise(g, mel_pre);
        let n = self.layout.postnet.len();
        for (i, layer) in self.layout.postnet.iter().enumerate() {
            let y = g.conv1d(x, b.var(layer.w), Some(b.var(layer.b)));
            x = if i + 1 < n { g.tanh(y) } else { y };
        }
        let residual = g.scale(x, self.arch.mel_std);
        let post = g.add(mel_pre, residual);
        (residual, post)
    }

    fn zero_step_vars(&self, g: &mut Graph, text_len: usize) -> StepVars {
        let z = DecoderState::zero(&self.arch, text_len);
        self.state_vars(g, &z)
    }

    fn state_vars(&self, g: &mut Graph, s: &DecoderState) -> StepVars {
        StepVars {
            h: g.constant(s.h.clone()),
            c: g.constant(s.c.clone()),
            ctx: g.constant(s.context.clone()),
            alpha_prev: g.constant(s.alpha_prev.clone()),
            alpha_cum: g.constant(s.alpha_cum.clone()),
        }
    }

    /// Teacher-forced decode of `target` on graph nodes.
    pub(crate) fn teacher_forced_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        emb: Var,
        target: &Tensor,
        dropout: &mut PrenetDropout,
    ) -> DecodeVars {
        let states = self.encoder_graph(g, b, ids);
        let memory = self.condition_graph(g, states, emb);
        let pm = g.matmul(memory, b.var(self.layout.attn_memory));
        let mut st = self.zero_step_vars(g, ids.len());
        let n_mels = self.arch.n_mels;
        let mut prev = g.constant(Tensor::full(&[1, n_mels], self.arch.go_value));
        let (frames, r) = (target.rows(), self.arch.reduction);
        let (mut mels, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..frames.div_ceil(r) {
            let (mel, stop, alpha, next) = self.step_graph(g, b, memory, pm, &st, prev, dropout);
            mels.push(mel);
            stops.extend(std::iter::repeat_n(stop, r));
            aligns.extend(std::iter::repeat_n(alpha, r));
            st = next;
            let last = (s * r + r - 1).min(frames - 1);
            prev = g.constant(Tensor::row(target.row_slice(last).to_vec()));
        }
        aligns.truncate(frames);
        let mel_pre = g.concat_rows(&mels);
        let mel_pre = g.slice_rows(mel_pre, 0, frames);
        let stop_logits = g.concat_rows(&stops);
        let stop_logits = g.slice_rows(stop_logits, 0, frames);
        let (residual, mel_post) = self.postnet_graph(g, b, mel_pre);
        DecodeVars {
            mel_pre,
            mel_post,
            residual,
            stop_logits,
            alignments: aligns,
            stopped_naturally: false,
        }
    }

    fn free_running_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        emb: Var,
        limits: SynthesisLimits,
        dropout: &mut PrenetDropout,
    ) -> Result<DecodeVars> {
        let states = self.encoder_graph(g, b, ids);
        let memory = self.condition_graph(g, states, emb);
        let pm = g.matmul(memory, b.var(self.layout.attn_memory));
        let mut st = self.zero_step_vars(g, ids.len());
        let mut prev = g.constant(Tensor::full(&[1, self.arch.n_mels], self.arch.go_value));
        let (mut mels, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        let r = self.arch.reduction;
        let mut stopped = false;
        let (mut frames, mut t) = (0, 0);
        while frames < limits.max_steps {
            let (mel, stop, alpha, next) = self.step_graph(g, b, memory, pm, &st, prev, dropout);
            if !g.value(mel).is_finite() || !g.value(stop).is_finite() {
                return Err(Error::numerical(format!("non-finite decoder output at step {t}")));
            }
            mels.push(mel);
            stops.extend(std::iter::repeat_n(stop, r));
            aligns.extend(std::iter::repeat_n(alpha, r));
            frames += r;
            t += 1;
            st = next;
            prev = g.slice_rows(mel, r - 1, 1);
            if sigmoid(g.value(stop).data()[0]) > limits.stop_threshold {
                stopped = true;
                break;
            }
        }
        let frames = frames.min(limits.max_steps);
        aligns.truncate(frames);
        let mel_pre = g.concat_rows(&mels);
        let mel_pre = g.slice_rows(mel_pre, 0, frames);
        let stop_logits = g.concat_rows(&stops);
        let stop_logits = g.slice_rows(stop_logits, 0, frames);
        let (residual, mel_post) = self.postnet_graph(g, b, mel_pre);
        Ok(DecodeVars {
            mel_pre,
            mel_post,
            residual,
            stop_logits,
            alignments: aligns,
            stopped_naturally: stopped,
        })
    }

    fn collect_output(&self, g: &Graph, v: &DecodeVars) -> SynthesisOutput {
        let rows: Vec<Vec<f64>> = v.alignments.iter().map(|&a| g.value(a).data().to_vec()).collect();
        SynthesisOutput {
            mel_pre: g.value(v.mel_pre).clone(),
            mel_post: g.value(v.mel_post).clone(),
            postnet_residual: g.value(v.residual).clone(),
            stop_logits: g.value(v.stop_logits).data().to_vec(),
            alignments: Tensor::from_rows(&rows),
            stopped_naturally: v.stopped_naturally,
        }
    }

    // ---- value-level operations ----

    pub fn encode_text(&self, ids: &[usize]) -> Result<EncoderStates> {
        self.check_ids(ids)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let s = self.encoder_graph(&mut g, &b, ids);
        Ok(EncoderStates {
            states: g.value(s).clone(),
            speaker_dim: 0,
        })
    }

    pub fn condition(&self, states: &EncoderStates, emb: &SpeakerEmbedding) -> Result<EncoderStates> {
        self.check_embedding(emb)?;
        if states.speaker_dim != 0 || states.states.cols() != self.arch.enc_width {
            return Err(Error::config("condition expects unconditioned encoder states"));
        }
        let (rows, e) = (states.states.rows(), states.states.cols());
        let d = emb.dim();
        let suffix = self.conditioning_row(emb);
        let mut out = Tensor::zeros(&[rows, e + d]);
        for r in 0..rows {
            let row = out.row_slice_mut(r);
            row[..e].copy_from_slice(states.states.row_slice(r));
            row[e..].copy_from_slice(suffix.data());
        }
        Ok(EncoderStates {
            states: out,
            speaker_dim: d,
        })
    }

    /// One decoding step from explicit state. `prev_frame` is the go frame at step 0.
    pub fn decoder_step(
        &self,
        prev_frame: &[f64],
        state: &DecoderState,
        conditioned: &EncoderStates,
        step: usize,
        dropout: &mut PrenetDropout,
    ) -> Result<DecoderStepOutput> {
        if conditioned.speaker_dim != self.arch.speaker_dim || conditioned.states.cols() != self.arch.memory_dim() {
            return Err(Error::config("decoder_step needs conditioned encoder states"));
        }
        if prev_frame.len() != self.arch.n_mels {
            return Err(Error::config(format!(
                "previous frame has {} bins, expected {}",
                prev_frame.len(),
                self.arch.n_mels
            )));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let memory = g.constant(conditioned.states.clone());
        let pm = g.matmul(memory, b.var(self.layout.attn_memory));
        let st = self.state_vars(&mut g, state);
        let prev = g.constant(Tensor::row(prev_frame.to_vec()));
        let (mel, stop, alpha, next) = self.step_graph(&mut g, &b, memory, pm, &st, prev, dropout);
        if !g.value(mel).is_finite() || !g.value(stop).is_finite() {
            return Err(Error::numerical(format!("non-finite decoder output at step {step}")));
        }
        Ok(DecoderStepOutput {
            mel: g.value(mel).clone(),
            stop_logit: g.value(stop).data()[0],
            attention: g.value(alpha).data().to_vec(),
            state: DecoderState {
                h: g.value(next.h).clone(),
                c: g.value(next.c).clone(),
                context: g.value(next.ctx).clone(),
                alpha_prev: g.value(next.alpha_prev).clone(),
                alpha_cum: g.value(next.alpha_cum).clone(),
            },
        })
    }

    pub fn postnet_refine(&self, mel_pre: &Tensor) -> Result<PostnetOutput> {
        self.check_target(mel_pre)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let x = g.constant(mel_pre.clone());
        let (r, post) = self.postnet_graph(&mut g, &b, x);
        Ok(PostnetOutput {
            residual: g.value(r).clone(),
            mel_post: g.value(post).clone(),
        })
    }

    pub fn run_teacher_forced(
        &self,
        ids: &[usize],
        emb: &SpeakerEmbedding,
        target: &Tensor,
        dropout: &mut PrenetDropout,
    ) -> Result<SynthesisOutput> {
        self.check_ids(ids)?;
        self.check_embedding(emb)?;
        self.check_target(target)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let e = g.constant(self.conditioning_row(emb));
        let v = self.teacher_forced_graph(&mut g, &b, ids, e, target, dropout);
        Ok(self.collect_output(&g, &v))
    }

    pub fn synthesize(
        &self,
        ids: &[usize],
        emb: &SpeakerEmbedding,
        limits: SynthesisLimits,
        dropout: &mut PrenetDropout,
    ) -> Result<SynthesisOutput> {
        self.check_ids(ids)?;
        self.check_embedding(emb)?;
        if limits.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let e = g.constant(self.conditioning_row(emb));
        let v = self.free_running_graph(&mut g, &b, ids, e, limits, dropout)?;
        Ok(self.collect_output(&g, &v))
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: SYNTHESIZER_KIND.into(),
            arch_toml: toml::to_string(&self.arch).map_err(|e| Error::config(e.to_string()))?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure_kind(ckpt, SYNTHESIZER_KIND)?;
        let arch: SynthArch = toml::from_str(&ckpt.arch_toml)
            .map_err(|e| Error::Format(format!("synthesizer arch: {e}")))?;
        let mut model = Self::new(arch, 0)?;
        fill_params(&mut model.params, &ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mini() -> SynthesizerModel {
        SynthesizerModel::new(SynthArch::mini(), 4).unwrap()
    }

    fn emb(d: usize, seed: u64) -> SpeakerEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeakerEmbedding((0..d).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    fn target(t: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, n], (0..t * n).map(|_| rng.random_range(-6.0..0.0)).collect())
    }

    #[test]
    fn encoder_preserves_length() {
        let m = mini();
        for l in 1..6 {
            let ids: Vec<usize> = (0..l).map(|i| i % 5).collect();
            let s = m.encode_text(&ids).unwrap();
            assert_eq!(s.states.shape(), &[l, 8]);
        }
        assert!(m.encode_text(&[7]).is_err());
    }

    #[test]
    fn blstm_direction_swap() {
        let arch = SynthArch {
            enc_conv_layers: 0,
            ..SynthArch::mini()
        };
        let mut m = SynthesizerModel::new(arch, 2).unwrap();
        for suffix in ["w", "b"] {
            let f = m.params().id(&format!("encoder.lstm_fwd.{suffix}")).unwrap();
            let b = m.params().id(&format!("encoder.lstm_bwd.{suffix}")).unwrap();
            *m.params_mut().get_mut(b) = m.params().get(f).clone();
        }
        let ab = m.encode_text(&[1, 3]).unwrap().states;
        let ba = m.encode_text(&[3, 1]).unwrap().states;
        for t in 0..2 {
            assert_eq!(&ab.row_slice(t)[..4], &ba.row_slice(1 - t)[4..]);
        }
    }

    #[test]
    fn conditioning_is_a_broadcast_suffix() {
        let m = mini();
        let s = m.encode_text(&[1, 2, 3]).unwrap();
        let zero = m.condition(&s, &SpeakerEmbedding(vec![0.0; 4])).unwrap();
        let a = m.condition(&s, &emb(4, 1)).unwrap();
        let b = m.condition(&s, &emb(4, 2)).unwrap();
        for r in 0..3 {
            assert_eq!(&zero.states.row_slice(r)[8..], &[0.0; 4]);
            assert_eq!(&a.states.row_slice(r)[..8], s.states.row_slice(r));
            assert_eq!(&a.states.row_slice(r)[8..], &a.states.row_slice(0)[8..]);
            assert_eq!(&a.states.row_slice(r)[..8], &b.states.row_slice(r)[..8]);
            assert_ne!(&a.states.row_slice(r)[8..], &b.states.row_slice(r)[8..]);
        }
        assert!(matches!(m.condition(&s, &emb(3, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = mini();
        let c = m.condition(&m.encode_text(&[2]).unwrap(), &emb(4, 1)).unwrap();
        let out = m
            .decoder_step(&[-3.0; 6], &DecoderState::zero(m.arch(), 1), &c, 0, &mut PrenetDropout::Off)
            .unwrap();
        assert_eq!(out.attention, vec![1.0]);
    }

    #[test]
    fn uniform_energies_give_uniform_attention() {
        let mut m = mini();
        let v = m.layout.attn_v;
        *m.params_mut().get_mut(v) = Tensor::zeros(&[4, 1]);
        let c = m.condition(&m.encode_text(&[1, 2, 3, 4]).unwrap(), &emb(4, 1)).unwrap();
        let out = m
            .decoder_step(&[-3.0; 6], &DecoderState::zero(m.arch(), 4), &c, 0, &mut PrenetDropout::Off)
            .unwrap();
        assert_eq!(out.attention, vec![0.25; 4]);
    }

    #[test]
    fn cumulative_attention_is_running_sum() {
        let m = mini();
        let c = m.condition(&m.encode_text(&[1, 2, 3]).unwrap(), &emb(4, 1)).unwrap();
        let mut state = DecoderState::zero(m.arch(), 3);
        let mut prev = vec![m.arch().go_value; 6];
        let mut sum = [0.0; 3];
        for k in 0..5 {
            let out = m.decoder_step(&prev, &state, &c, k, &mut PrenetDropout::Off).unwrap();
            for (s, a) in sum.iter_mut().zip(&out.attention) {
                *s += a;
            }
            state = out.state;
            prev = out.mel.row_slice(out.mel.rows() - 1).to_vec();
            assert_eq!(state.alpha_cum.data(), &sum);
            assert_eq!(state.alpha_prev.data(), &out.attention[..]);
        }
    }

    #[test]
    fn postnet_contracts() {
        let mut m = SynthesizerModel::new(SynthArch::toy(), 1).unwrap();
        let x = target(7, 80, 3);
        let out = m.postnet_refine(&x).unwrap();
        assert_eq!(out.residual.shape(), &[7, 80]);
        for i in 0..x.len() {
            assert_eq!(out.mel_post.data()[i], x.data()[i] + out.residual.data()[i]);
        }
        let (w, b) = m.postnet_final_ids();
        for id in [w, b] {
            let shape = m.params().get(id).shape().to_vec();
            *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
        }
        let out = m.postnet_refine(&x).unwrap();
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.mel_post, x);
    }

    #[test]
    fn postnet_receptive_radius() {
        let m = SynthesizerModel::new(SynthArch::toy(), 1).unwrap();
        let r = m.arch().postnet_radius();
        assert_eq!(r, 6);
        let x = target(20, 80, 5);
        let base = m.postnet_refine(&x).unwrap().residual;
        let t = 3;
        let probe = |frame: usize| {
            let mut y = x.clone();
            y.row_slice_mut(frame)[10] += 1.0;
            let res = m.postnet_refine(&y).unwrap().residual;
            res.row_slice(t) != base.row_slice(t)
        };
        assert!(probe(t + r));
        assert!(!probe(t + r + 1));
    }

    #[test]
    fn teacher_forcing_contract() {
        let m = mini();
        let tgt = target(5, 6, 1);
        let e = emb(4, 3);
        let a = m.run_teacher_forced(&[1, 2, 3], &e, &tgt, &mut PrenetDropout::Off).unwrap();
        assert_eq!(a.mel_pre.shape(), &[5, 6]);
        assert_eq!(a.alignments.shape(), &[5, 3]);
        assert_eq!(a.stop_logits.len(), 5);
        let b = m.run_teacher_forced(&[1, 2, 3], &e, &tgt, &mut PrenetDropout::Off).unwrap();
        assert_eq!(a, b);
        for i in 0..a.mel_pre.len() {
            assert_eq!(a.mel_post.data()[i], a.mel_pre.data()[i] + a.postnet_residual.data()[i]);
        }
        assert!(matches!(
            m.run_teacher_forced(&[1], &e, &target(3, 5, 1), &mut PrenetDropout::Off),
            Err(Error::Config(_))
        ));
        let c = m.run_teacher_forced(&[1, 2, 3], &e, &tgt, &mut PrenetDropout::seeded(9)).unwrap();
        assert_ne!(a.mel_pre, c.mel_pre);
    }

    #[test]
    fn rigged_stop_emits_one_frame() {
        let mut m = mini();
        let (w, b) = m.stop_projection_ids();
        let shape = m.params().get(w).shape().to_vec();
        *m.params_mut().get_mut(w) = Tensor::zeros(&shape);
        m.params_mut().get_mut(b).data_mut()[0] = 10.0;
        let limits = SynthesisLimits::for_text(m.arch(), 3);
        let out = m.synthesize(&[1, 2, 3], &emb(4, 1), limits, &mut PrenetDropout::Off).unwrap();
        assert_eq!(out.n_frames(), 1);
        assert!(out.stopped_naturally);
    }

    #[test]
    fn never_stopping_model_hits_cap() {
        let mut m = mini();
        let (w, b) = m.stop_projection_ids();
        let shape = m.params().get(w).shape().to_vec();
        *m.params_mut().get_mut(w) = Tensor::zeros(&shape);
        m.params_mut().get_mut(b).data_mut()[0] = -10.0;
        let limits = SynthesisLimits {
            stop_threshold: 0.5,
            max_steps: 13,
        };
        let out = m.synthesize(&[1, 2], &emb(4, 1), limits, &mut PrenetDropout::Off).unwrap();
        assert_eq!(out.n_frames(), 13);
        assert!(!out.stopped_naturally);
        assert_eq!(SynthesisLimits::for_text(m.arch(), 30).max_steps, 360);
        assert_eq!(SynthesisLimits::for_text(m.arch(), 3).max_steps, 200);
    }

    fn reduced(r: usize) -> SynthesizerModel {
        SynthesizerModel::new(SynthArch { reduction: r, ..SynthArch::mini() }, 4).unwrap()
    }

    #[test]
    fn reduction_emits_groups_and_truncates() {
        let m = reduced(3);
        let tgt = target(7, 6, 2);
        let e = emb(4, 3);
        let a = m.run_teacher_forced(&[1, 2, 3], &e, &tgt, &mut PrenetDropout::Off).unwrap();
        assert_eq!(a.mel_pre.shape(), &[7, 6]);
        assert_eq!(a.alignments.shape(), &[7, 3]);
        assert_eq!(a.stop_logits.len(), 7);
        // frames of one step share its stop logit and attention row
        assert_eq!(a.stop_logits[3], a.stop_logits[5]);
        assert_eq!(a.alignments.row_slice(3), a.alignments.row_slice(4));

        let c = m.condition(&m.encode_text(&[1, 2]).unwrap(), &e).unwrap();
        let go = vec![m.arch().go_value; 6];
        let out = m.decoder_step(&go, &DecoderState::zero(m.arch(), 2), &c, 0, &mut PrenetDropout::Off).unwrap();
        assert_eq!(out.mel.shape(), &[3, 6]);

        let limits = SynthesisLimits {
            stop_threshold: 2.0,
            max_steps: 10,
        };
        let out = m.synthesize(&[1, 2], &e, limits, &mut PrenetDropout::Off).unwrap();
        assert_eq!(out.n_frames(), 10);
        assert_eq!(out.alignments.rows(), 10);
        assert!(SynthArch { reduction: 0, ..SynthArch::mini() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        let mut m = mini();
        m.params_mut().round_to_f32();
        m.save(&p).unwrap();
        let back = SynthesizerModel::load(&p).unwrap();
        assert_eq!(back.params().digest(), m.params().digest());
        assert_eq!(back.arch(), m.arch());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn attention_rows_are_distributions(seed in 0u64..1000, l in 1usize..6) {
            let m = SynthesizerModel::new(SynthArch::mini(), seed).unwrap();
            let ids: Vec<usize> = (0..l).map(|i| (i + seed as usize) % 5).collect();
            let limits = SynthesisLimits { stop_threshold: 0.5, max_steps: 15 };
            let out = m.synthesize(&ids, &emb(4, seed), limits, &mut PrenetDropout::seeded(seed)).unwrap();
            prop_assert!(out.n_frames() <= 15 && out.n_frames() >= 1);
            for r in 0..out.alignments.rows() {
                let row = out.alignments.row_slice(r);
                prop_assert!(row.iter().all(|&a| a >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}
