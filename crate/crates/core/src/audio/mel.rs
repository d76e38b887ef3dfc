//! Log-mel spectrogram extraction.
//!
//! Frames are taken fully inside the signal (no padding), so a clip of `n`
//! samples yields `1 + (n - n_fft) / hop` frames. The filterbank uses the
//! Slaney mel scale with area normalisation.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// Optional affine `(x - mean) / std` applied after the log. Off by default.
    pub normalization: Option<MelNormalization>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelNormalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            n_fft: 800,
            hop: 200,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
            normalization: None,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 || self.n_fft == 0 || self.hop == 0 {
            return Err(Error::config("sample rate, n_fft and hop must be positive"));
        }
        if self.hop > self.n_fft {
            return Err(Error::config(format!(
                "hop {} exceeds n_fft {}",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got [{}, {}]",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        if let Some(n) = self.normalization {
            if !(n.std > 0.0) {
                return Err(Error::config("normalization std must be positive"));
            }
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a clip of `n_samples` under the no-padding rule.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.n_fft {
            0
        } else {
            1 + (n_samples - self.n_fft) / self.hop
        }
    }

    /// The value every frame takes for silence: `ln(log_floor)`, normalised if enabled.
    pub fn floor_value(&self) -> f64 {
        self.apply_normalization(self.log_floor.ln())
    }

    pub(crate) fn apply_normalization(&self, v: f64) -> f64 {
        match self.normalization {
            Some(n) => (v - n.mean) / n.std,
            None => v,
        }
    }

    pub(crate) fn undo_normalization(&self, v: f64) -> f64 {
        match self.normalization {
            Some(n) => v * n.std + n.mean,
            None => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `[T, n_mels]`
    pub frames: Tensor,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edges in Hz: `n_mels + 2` points, filter `i` peaks at point `i + 1`.
pub(crate) fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// `[n_mels, n_fft / 2 + 1]` triangular filterbank, Slaney-normalised.
pub fn mel_filterbank(cfg: &MelConfig) -> Tensor {
    let n_freqs = cfg.n_freqs();
    let edges = mel_band_edges(cfg);
    let sr = f64::from(cfg.sample_rate_hz);
    let mut w = Tensor::zeros(&[cfg.n_mels, n_freqs]);
    for m in 0..cfg.n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (f2 - f0);
        for k in 0..n_freqs {
            let f = k as f64 * sr / cfg.n_fft as f64;
            let lower = (f - f0) / (f1 - f0);
            let upper = (f2 - f) / (f2 - f1);
            w[(m, k)] = lower.min(upper).max(0.0) * enorm;
        }
    }
    w
}

/// Centre frequency in Hz of every mel bin.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_band_edges(cfg)[1..=cfg.n_mels].to_vec()
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT `[T][n_fft/2 + 1]` with a periodic Hann window and no padding.
pub(crate) fn stft(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let n_frames = if samples.len() < n_fft {
        0
    } else {
        1 + (samples.len() - n_fft) / hop
    };
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    (0..n_frames)
        .map(|t| {
            let start = t * hop;
            let mut buf: Vec<Complex<f64>> = samples[start..start + n_fft]
                .iter()
                .zip(&window)
                .map(|(x, w)| Complex::new(x * w, 0.0))
                .collect();
            fft.process_with_scratch(&mut buf, &mut scratch);
            buf.truncate(n_fft / 2 + 1);
            buf
        })
        .collect()
}

/// Magnitude STFT `[T, n_fft/2 + 1]`.
pub fn stft_magnitude(samples: &[f64], n_fft: usize, hop: usize) -> Tensor {
    let spec = stft(samples, n_fft, hop);
    let n_freqs = n_fft / 2 + 1;
    let mut data = Vec::with_capacity(spec.len() * n_freqs);
    for frame in &spec {
        data.extend(frame.iter().map(|c| c.norm()));
    }
    Tensor::new(vec![spec.len(), n_freqs], data)
}

pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::config(format!(
            "clip is {} Hz but mel config expects {} Hz",
            clip.sample_rate_hz, cfg.sample_rate_hz
        )));
    }
    if clip.samples.len() < cfg.n_fft {
        return Err(Error::invalid(format!(
            "clip has {} samples, shorter than one {}-sample window",
            clip.samples.len(),
            cfg.n_fft
        )));
    }
    let fb = mel_filterbank(cfg);
    let spec = stft(&clip.samples, cfg.n_fft, cfg.hop);
    let n_freqs = cfg.n_freqs();
    let mut frames = Tensor::zeros(&[spec.len(), cfg.n_mels]);
    let mut power = vec![0.0; n_freqs];
    for (t, frame) in spec.iter().enumerate() {
        for (p, c) in power.iter_mut().zip(frame) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row_slice(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            frames[(t, m)] = cfg.apply_normalization(e.max(cfg.log_floor).ln());
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> AudioClip {
        let n = (secs * f64::from(sr)) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
            .collect();
        AudioClip::new(samples, sr).unwrap()
    }

    #[test]
    fn zero_clip_hits_the_floor_everywhere() {
        let cfg = MelConfig::default();
        let clip = AudioClip::new(vec![0.0; 4000], 16_000).unwrap();
        let mel = mel_spectrogram(&clip, &cfg).unwrap();
        assert!(mel.frames.data().iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn frame_count_for_one_second() {
        let cfg = MelConfig::default();
        let clip = AudioClip::new(vec![0.1; 16_000], 16_000).unwrap();
        assert_eq!(mel_spectrogram(&clip, &cfg).unwrap().n_frames(), 77);
    }

    #[test]
    fn sine_peaks_in_nearest_mel_bin() {
        let cfg = MelConfig::default();
        let mel = mel_spectrogram(&sine(1000.0, 1.0, 16_000), &cfg).unwrap();
        // oracle: nearest analytic centre frequency
        let centers = mel_centers(&cfg);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        for t in 0..mel.n_frames() {
            let row = mel.frames.row_slice(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn errors_on_rate_mismatch_and_short_clip() {
        let cfg = MelConfig::default();
        let clip = AudioClip::new(vec![0.0; 1000], 8000).unwrap();
        assert!(matches!(mel_spectrogram(&clip, &cfg), Err(Error::Config(_))));
        let short = AudioClip::new(vec![0.0; 799], 16_000).unwrap();
        assert!(matches!(mel_spectrogram(&short, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MelConfig::default();
        cfg.hop = 900;
        assert!(cfg.validate().is_err());
        let mut cfg = MelConfig::default();
        cfg.fmax_hz = 9000.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MelConfig::default();
        cfg.log_floor = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hop_shift_moves_frames_by_one() {
        let cfg = MelConfig::default();
        let clip = sine(700.0, 0.5, 16_000);
        let shifted = AudioClip::new(clip.samples[cfg.hop..].to_vec(), 16_000).unwrap();
        let a = mel_spectrogram(&clip, &cfg).unwrap();
        let b = mel_spectrogram(&shifted, &cfg).unwrap();
        for t in 0..b.n_frames() {
            assert_eq!(a.frames.row_slice(t + 1), b.frames.row_slice(t));
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frame_count_matches_formula(len in 800usize..6000) {
            let cfg = MelConfig::default();
            let clip = AudioClip::new(vec![0.01; len], 16_000).unwrap();
            let mel = mel_spectrogram(&clip, &cfg).unwrap();
            prop_assert_eq!(mel.n_frames(), 1 + (len - 800) / 200);
        }

        #[test]
        fn louder_never_lowers_energy(c in 1.0f64..8.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = MelConfig::default();
            let samples: Vec<f64> = (0..2000).map(|_| rng.random_range(-0.1..0.1)).collect();
            let a = mel_spectrogram(&AudioClip::new(samples.clone(), 16_000).unwrap(), &cfg).unwrap();
            let scaled: Vec<f64> = samples.iter().map(|x| x * c).collect();
            let b = mel_spectrogram(&AudioClip::new(scaled, 16_000).unwrap(), &cfg).unwrap();
            for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn extraction_is_deterministic(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = MelConfig::default();
            let samples: Vec<f64> = (0..1600).map(|_| rng.random_range(-1.0..1.0)).collect();
            let clip = AudioClip::new(samples, 16_000).unwrap();
            prop_assert_eq!(mel_spectrogram(&clip, &cfg).unwrap(), mel_spectrogram(&clip, &cfg).unwrap());
        }
    }
}
