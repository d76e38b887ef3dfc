//! Residual CNN speaker verifier.
//!
//! The log-mel input is treated as a one-channel `[time, mel]` image. A stem
//! convolution feeds residual stages; every stage after the first halves both
//! axes. The final feature map is collapsed over the mel axis (a learned
//! projection by default, which keeps absolute pitch visible; plain averaging
//! is available), then mean and standard deviation over time are concatenated
//! into the embedding. A two-layer classifier head maps embeddings to training
//! speakers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::autodiff::{softmax_inplace, stats_pool_forward, Bound, Graph, Var};
use crate::checkpoint::{ensure_kind, fill_params, load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::params::{glorot, he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const VERIFIER_KIND: &str = "verifier";

/// How the final `[C, T', F']` map loses its mel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqCollapse {
    /// Average over mel bins; translation-invariant in frequency.
    Mean,
    /// Affine map from every `(channel, bin)` to `C` outputs.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierArch {
    pub n_mels: usize,
    /// Channel width per residual stage.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    pub kernel: usize,
    pub classifier_hidden: usize,
    pub n_speakers: usize,
    /// Stabiliser inside the pooled standard deviation.
    pub eps: f64,
    /// Network input is `(mel - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    pub freq_collapse: FreqCollapse,
}

impl Default for VerifierArch {
    fn default() -> Self {
        Self::toy()
    }
}

impl VerifierArch {
    /// Desk-scale configuration used by the tests and the toy pipeline.
    pub fn toy() -> Self {
        Self {
            n_mels: 80,
            widths: vec![4, 8, 16, 32],
            blocks: vec![1, 1, 1, 1],
            kernel: 3,
            classifier_hidden: 64,
            n_speakers: 8,
            eps: 1e-8,
            input_offset: -8.0,
            input_scale: 0.2,
            freq_collapse: FreqCollapse::Projection,
        }
    }

    /// ResNet34-shaped configuration.
    pub fn full() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            blocks: vec![3, 4, 6, 3],
            classifier_hidden: 512,
            n_speakers: 7000,
            ..Self::toy()
        }
    }

    /// Two 2-channel stages over 6 mel bins, for gradient checks.
    pub fn mini() -> Self {
        Self {
            n_mels: 6,
            widths: vec![2, 2],
            blocks: vec![1, 1],
            classifier_hidden: 4,
            n_speakers: 3,
            input_offset: -3.0,
            input_scale: 0.5,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::config("verifier widths and blocks must be non-empty and equal length"));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::config("verifier stage widths and block counts must be positive"));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::config("verifier kernel must be odd"));
        }
        if self.n_mels == 0 || self.n_speakers == 0 || self.classifier_hidden == 0 {
            return Err(Error::config("verifier dimensions must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("verifier eps must be positive"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.widths[self.widths.len() - 1]
    }

    /// Product of all stage strides along time.
    pub fn total_stride(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Shortest input (in frames) the encoder accepts.
    pub fn min_frames(&self) -> usize {
        self.total_stride()
    }

    /// Time length of the feature map for a `frames`-long input.
    pub fn output_frames(&self, frames: usize) -> usize {
        (1..self.widths.len()).fold(frames, |t, _| (t - 1) / 2 + 1)
    }

    /// Mel-axis length of the final feature map.
    pub fn output_bins(&self) -> usize {
        self.output_frames(self.n_mels)
    }
}

/// Encoder output, `[time', channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

/// Fixed-dimension speaker vector: per-channel means followed by standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        crate::autodiff::norm(&self.0)
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row(self.0.clone())
    }
}

/// Mean ⧺ population std over time; the std carries `eps` under the root.
pub fn statistics_pool(features: &FeatureMap, eps: f64) -> Result<SpeakerEmbedding> {
    if features.0.rows() == 0 || features.0.cols() == 0 {
        return Err(Error::invalid("statistics pooling needs at least one frame"));
    }
    Ok(SpeakerEmbedding(
        stats_pool_forward(&features.0, eps).into_data(),
    ))
}

#[derive(Clone, Debug)]
struct Block {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    shortcut: Option<ParamId>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<Block>,
    collapse: Option<(ParamId, ParamId)>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct VerifierModel {
    arch: VerifierArch,
    params: ParamStore,
    layout: Layout,
}

impl VerifierModel {
    pub fn new(arch: VerifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = arch.kernel;
        let w0 = arch.widths[0];
        let stem_w = p.add("stem.w", he_normal(&mut rng, &[w0, 1, k, k], k * k));
        let stem_b = p.add("stem.b", Tensor::zeros(&[1, w0]));
        let mut blocks = Vec::new();
        let mut c_in = w0;
        for (s, (&width, &n_blocks)) in arch.widths.iter().zip(&arch.blocks).enumerate() {
            for b in 0..n_blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{b}");
                let fan1 = c_in * k * k;
                let fan2 = width * k * k;
                let conv1_w = p.add(format!("{name}.conv1.w"), he_normal(&mut rng, &[width, c_in, k, k], fan1));
                let conv1_b = p.add(format!("{name}.conv1.b"), Tensor::zeros(&[1, width]));
                let mut w2 = he_normal(&mut rng, &[width, width, k, k], fan2);
                // keeps the residual branch small at init
                w2.scale_inplace(0.5);
                let conv2_w = p.add(format!("{name}.conv2.w"), w2);
                let conv2_b = p.add(format!("{name}.conv2.b"), Tensor::zeros(&[1, width]));
                let shortcut = (stride != 1 || c_in != width).then(|| {
                    p.add(
                        format!("{name}.shortcut.w"),
                        he_normal(&mut rng, &[width, c_in, 1, 1], c_in),
                    )
                });
                blocks.push(Block {
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    shortcut,
                    stride,
                });
                c_in = width;
            }
        }
        let collapse = (arch.freq_collapse == FreqCollapse::Projection).then(|| {
            let fan_in = c_in * arch.output_bins();
            (
                p.add("collapse.w", glorot(&mut rng, &[fan_in, c_in], fan_in, c_in)),
                p.add("collapse.b", Tensor::zeros(&[1, c_in])),
            )
        });
        let d = arch.embedding_dim();
        let h = arch.classifier_hidden;
        let fc1_w = p.add("classifier.fc1.w", glorot(&mut rng, &[d, h], d, h));
        let fc1_b = p.add("classifier.fc1.b", Tensor::zeros(&[1, h]));
        let fc2_w = p.add("classifier.fc2.w", glorot(&mut rng, &[h, arch.n_speakers], h, arch.n_speakers));
        let fc2_b = p.add("classifier.fc2.b", Tensor::zeros(&[1, arch.n_speakers]));
        Ok(Self {
            arch,
            params: p,
            layout: Layout {
                stem_w,
                stem_b,
                blocks,
                collapse,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            },
        })
    }

    pub fn arch(&self) -> &VerifierArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn min_frames(&self) -> usize {
        self.arch.min_frames()
    }

    /// Classifier head parameters `(fc1_w, fc1_b, fc2_w, fc2_b)` for direct edits.
    pub fn classifier_ids(&self) -> [ParamId; 4] {
        let l = &self.layout;
        [l.fc1_w, l.fc1_b, l.fc2_w, l.fc2_b]
    }

    fn check_input(&self, frames: &Tensor) -> Result<()> {
        if frames.cols() != self.arch.n_mels {
            return Err(Error::config(format!(
                "verifier expects {} mel bins, got {}",
                self.arch.n_mels,
                frames.cols()
            )));
        }
        if frames.rows() < self.min_frames() {
            return Err(Error::invalid(format!(
                "input has {} frames; the verifier needs at least {}",
                frames.rows(),
                self.min_frames()
            )));
        }
        Ok(())
    }

    /// Builds the encoder on `x: [T, n_mels]` and returns the `[T', C]` feature map.
    pub fn encoder_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let l = &self.layout;
        let (t, f) = {
            let v = g.value(x);
            (v.rows(), v.cols())
        };
        let shifted = g.add_scalar(x, -self.arch.input_offset);
        let scaled = g.scale(shifted, self.arch.input_scale);
        let img = g.reshape(scaled, &[1, t, f]);
        let pad = self.arch.kernel / 2;
        let stem = g.conv2d(img, b.var(l.stem_w), Some(b.var(l.stem_b)), 1, pad);
        let mut h = g.relu(stem);
        for blk in &l.blocks {
            let y = g.conv2d(h, b.var(blk.conv1_w), Some(b.var(blk.conv1_b)), blk.stride, pad);
            let y = g.relu(y);
            let y = g.conv2d(y, b.var(blk.conv2_w), Some(b.var(blk.conv2_b)), 1, pad);
            let skip = match blk.shortcut {
                Some(w) => g.conv2d(h, b.var(w), None, blk.stride, 0),
                None => h,
            };
            let sum = g.add(y, skip);
            h = g.relu(sum);
        }
        match l.collapse {
            Some((w, bias)) => {
                let flat = g.flatten_channels(h);
                let y = g.matmul(flat, b.var(w));
                g.add_row(y, b.var(bias))
            }
            None => g.mean_last_axis(h),
        }
    }

    /// Builds encoder + statistics pooling; returns the `[1, d]` embedding node.
    pub fn embedding_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let feats = self.encoder_graph(g, b, x);
        g.stats_pool(feats, self.arch.eps)
    }

    /// Classifier logits `[1, n_speakers]` for an embedding node.
    pub fn logits_graph(&self, g: &mut Graph, b: &Bound, emb: Var) -> Var {
        let l = &self.layout;
        let h = g.matmul(emb, b.var(l.fc1_w));
        let h = g.add_row(h, b.var(l.fc1_b));
        let h = g.relu(h);
        let o = g.matmul(h, b.var(l.fc2_w));
        g.add_row(o, b.var(l.fc2_b))
    }

    pub fn encode_frames(&self, mel: &MelSpectrogram) -> Result<FeatureMap> {
        self.check_input(&mel.frames)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let x = g.constant(mel.frames.clone());
        let f = self.encoder_graph(&mut g, &b, x);
        Ok(FeatureMap(g.value(f).clone()))
    }

    pub fn extract_embedding(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        self.embed_frames(&mel.frames)
    }

    /// Embedding of a raw `[T, n_mels]` matrix.
    pub fn embed_frames(&self, frames: &Tensor) -> Result<SpeakerEmbedding> {
        self.check_input(frames)?;
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let x = g.constant(frames.clone());
        let e = self.embedding_graph(&mut g, &b, x);
        Ok(SpeakerEmbedding(g.value(e).data().to_vec()))
    }

    /// Softmax posterior over training speakers.
    pub fn classify(&self, emb: &SpeakerEmbedding) -> Result<Vec<f64>> {
        if emb.dim() != self.embedding_dim() {
            return Err(Error::config(format!(
                "embedding has dimension {}, classifier expects {}",
                emb.dim(),
                self.embedding_dim()
            )));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let e = g.constant(emb.to_row());
        let logits = self.logits_graph(&mut g, &b, e);
        let mut p = g.value(logits).data().to_vec();
        softmax_inplace(&mut p);
        Ok(p)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: VERIFIER_KIND.into(),
            arch_toml: toml::to_string(&self.arch).map_err(|e| Error::config(e.to_string()))?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure_kind(ckpt, VERIFIER_KIND)?;
        let arch: VerifierArch = toml::from_str(&ckpt.arch_toml)
            .map_err(|e| Error::Format(format!("verifier arch: {e}")))?;
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

    /// Loads and insists the stored architecture equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &VerifierArch) -> Result<Self> {
        let m = Self::load(path)?;
        if &m.arch != expected {
            return Err(Error::config(format!(
                "verifier checkpoint architecture {:?} does not match configured {:?}",
                m.arch, expected
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn mel(frames: Tensor) -> MelSpectrogram {
        MelSpectrogram {
            frames,
            config: MelConfig::default(),
        }
    }

    fn random_frames(seed: u64, t: usize, f: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, f], (0..t * f).map(|_| rng.random_range(-12.0..2.0)).collect())
    }

    #[test]
    fn dims_follow_arch() {
        assert_eq!(VerifierArch::toy().embedding_dim(), 64);
        assert_eq!(VerifierArch::full().embedding_dim(), 512);
        assert_eq!(VerifierArch::toy().total_stride(), 8);
    }

    #[test]
    fn doubling_input_doubles_output_time() {
        let m = VerifierModel::new(VerifierArch::toy(), 3).unwrap();
        let t0 = 24;
        let a = m.encode_frames(&mel(random_frames(1, t0, 80))).unwrap();
        let b = m.encode_frames(&mel(random_frames(2, 2 * t0, 80))).unwrap();
        assert_eq!(a.0.rows(), t0 / 8);
        assert_eq!(b.0.rows(), 2 * a.0.rows());
        assert_eq!(a.0.cols(), 32);
        assert_eq!(m.arch().output_frames(t0), t0 / 8);
    }

    #[test]
    fn zero_input_zero_bias_is_finite() {
        let m = VerifierModel::new(VerifierArch::toy(), 3).unwrap();
        let mut frames = Tensor::zeros(&[16, 80]);
        frames.data_mut().iter_mut().for_each(|v| *v = m.arch().input_offset);
        let f = m.encode_frames(&mel(frames)).unwrap();
        // zero network input and zero biases propagate zeros through every ReLU
        assert!(f.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_input_names_minimum() {
        let m = VerifierModel::new(VerifierArch::toy(), 3).unwrap();
        let err = m.extract_embedding(&mel(Tensor::zeros(&[7, 80]))).unwrap_err();
        assert!(err.to_string().contains("at least 8"), "{err}");
        let err = m.extract_embedding(&mel(Tensor::zeros(&[16, 40]))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pooling_hand_cases() {
        let constant = FeatureMap(Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![2.0, -1.0]]));
        let e = statistics_pool(&constant, 1e-8).unwrap();
        assert_eq!(&e.0[..2], &[2.0, -1.0]);
        assert_eq!(e.0[2], 1e-8f64.sqrt());
        assert_eq!(e.0[3], 1e-8f64.sqrt());

        let two = FeatureMap(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
        let e = statistics_pool(&two, 1e-8).unwrap();
        assert_eq!(e.0[0], 2.0);
        assert!((e.0[1] - 1.0).abs() < 1e-8);

        assert!(statistics_pool(&FeatureMap(Tensor::zeros(&[0, 3])), 1e-8).is_err());
    }

    #[test]
    fn softmax_head_cases() {
        let mut arch = VerifierArch::toy();
        arch.n_speakers = 2;
        arch.classifier_hidden = 1;
        let mut m = VerifierModel::new(arch, 0).unwrap();
        let [w1, b1, w2, b2] = m.classifier_ids();
        for id in [w1, b1, w2, b2] {
            let shape = m.params().get(id).shape().to_vec();
            *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
        }
        let emb = SpeakerEmbedding(vec![0.3; 64]);
        assert_eq!(m.classify(&emb).unwrap(), vec![0.5, 0.5]);

        // hidden unit fixed at 1, second layer emits logits (2, 0)
        m.params_mut().get_mut(b1).data_mut()[0] = 1.0;
        m.params_mut().get_mut(w2).data_mut().copy_from_slice(&[2.0, 0.0]);
        let p = m.classify(&emb).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.881).abs() < 1e-3);

        assert!(matches!(m.classify(&SpeakerEmbedding(vec![0.0; 3])), Err(Error::Config(_))));
    }

    #[test]
    fn frame_local_encoder_is_permutation_invariant() {
        let arch = VerifierArch {
            n_mels: 6,
            widths: vec![3],
            blocks: vec![1],
            kernel: 1,
            ..VerifierArch::toy()
        };
        let m = VerifierModel::new(arch, 9).unwrap();
        let x = random_frames(4, 10, 6);
        let rows: Vec<Vec<f64>> = (0..10).rev().map(|r| x.row_slice(r).to_vec()).collect();
        let perm = Tensor::from_rows(&rows);
        let a = m.embed_frames(&x).unwrap();
        let b = m.embed_frames(&perm).unwrap();
        for (u, v) in a.0.iter().zip(&b.0) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_pooling_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        let mut m = VerifierModel::new(VerifierArch::toy(), 5).unwrap();
        m.params_mut().round_to_f32();
        m.save(&p).unwrap();
        let back = VerifierModel::load(&p).unwrap();
        assert_eq!(back.params().digest(), m.params().digest());
        let x = random_frames(8, 20, 80);
        assert_eq!(m.embed_frames(&x).unwrap(), back.embed_frames(&x).unwrap());

        let mut other = VerifierArch::toy();
        other.widths = vec![4, 8, 16, 16];
        assert!(matches!(VerifierModel::load_expecting(&p, &other), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn embedding_dim_independent_of_duration(t in 8usize..60, seed in 0u64..100) {
            let m = VerifierModel::new(VerifierArch::toy(), 1).unwrap();
            let e = m.embed_frames(&random_frames(seed, t, 80)).unwrap();
            prop_assert_eq!(e.dim(), 64);
            prop_assert!(e.0.iter().all(|v| v.is_finite()));
            prop_assert!(e.0[32..].iter().all(|&s| s >= 1e-8f64.sqrt()));
        }
    }
}
