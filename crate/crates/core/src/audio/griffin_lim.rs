//! Griffin-Lim phase reconstruction from a log-mel spectrogram.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use super::mel::{hann, mel_filterbank, stft};
use super::{AudioClip, MelSpectrogram};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PHASE_SEED: u64 = 0x6172_6966;

/// Linear magnitude `[T, n_fft/2 + 1]` recovered through the filterbank pseudo-inverse.
pub fn mel_to_linear_magnitude(mel: &MelSpectrogram) -> Result<Tensor> {
    let cfg = &mel.config;
    let fb = mel_filterbank(cfg);
    let (n_mels, n_freqs) = (fb.rows(), fb.cols());
    if mel.n_mels() != n_mels {
        return Err(Error::config(format!(
            "mel has {} bins, config says {n_mels}",
            mel.n_mels()
        )));
    }
    let m = DMatrix::from_row_slice(n_mels, n_freqs, fb.data());
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::numerical(format!(
            "mel filterbank is singular (singular values {smin:e}..{smax:e})"
        )));
    }
    let pinv = svd
        .pseudo_inverse(smax * 1e-12)
        .map_err(|e| Error::numerical(e.to_string()))?;

    let t_len = mel.n_frames();
    let mut out = Tensor::zeros(&[t_len, n_freqs]);
    let mut power = vec![0.0; n_mels];
    for t in 0..t_len {
        for (p, &v) in power.iter_mut().zip(mel.frames.row_slice(t)) {
            *p = cfg.undo_normalization(v).exp();
        }
        let row = out.row_slice_mut(t);
        for (k, r) in row.iter_mut().enumerate() {
            let lin: f64 = (0..n_mels).map(|j| pinv[(k, j)] * power[j]).sum();
            *r = lin.max(0.0).sqrt();
        }
    }
    Ok(out)
}

/// Least-squares inverse STFT (weighted overlap-add, no padding).
fn istft(spec: &[Vec<Complex<f64>>], n_fft: usize, hop: usize) -> Vec<f64> {
    let len = (spec.len() - 1) * hop + n_fft;
    let window = hann(n_fft);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut out = vec![0.0; len];
    let mut wsum = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (t, frame) in spec.iter().enumerate() {
        buf[..frame.len()].copy_from_slice(frame);
        for k in 1..n_fft - frame.len() + 1 {
            buf[n_fft - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            out[start + i] += window[i] * buf[i].re / n_fft as f64;
            wsum[start + i] += window[i] * window[i];
        }
    }
    for (o, w) in out.iter_mut().zip(&wsum) {
        *o = if *w > 1e-8 { *o / w } else { 0.0 };
    }
    out
}

fn spectral_error(target: &Tensor, spec: &[Vec<Complex<f64>>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, frame) in spec.iter().enumerate() {
        for (s, c) in target.row_slice(t).iter().zip(frame) {
            let d = s - c.norm();
            num += d * d;
            den += s * s;
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Runs `n_iters` Griffin-Lim iterations and returns the waveform together with
/// the spectral-convergence error `‖S - |STFT(x_k)|‖ / ‖S‖` after each iteration.
pub fn griffin_lim_with_errors(mel: &MelSpectrogram, n_iters: usize) -> Result<(AudioClip, Vec<f64>)> {
    if n_iters == 0 {
        return Err(Error::invalid("griffin-lim needs at least one iteration"));
    }
    if mel.n_frames() == 0 {
        return Err(Error::invalid("empty mel spectrogram"));
    }
    let cfg = &mel.config;
    let target = mel_to_linear_magnitude(mel)?;
    let (n_fft, hop) = (cfg.n_fft, cfg.hop);

    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spec: Vec<Vec<Complex<f64>>> = (0..target.rows())
        .map(|t| {
            target
                .row_slice(t)
                .iter()
                .map(|&s| Complex::from_polar(s, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();

    let mut errors = Vec::with_capacity(n_iters);
    let mut signal = Vec::new();
    for _ in 0..n_iters {
        signal = istft(&spec, n_fft, hop);
        let rebuilt = stft(&signal, n_fft, hop);
        errors.push(spectral_error(&target, &rebuilt));
        for (t, frame) in rebuilt.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                let phase = if c.norm() > 0.0 { c / c.norm() } else { Complex::new(1.0, 0.0) };
                spec[t][k] = phase * target[(t, k)];
            }
        }
    }
    let samples = signal.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    Ok((
        AudioClip {
            samples,
            sample_rate_hz: cfg.sample_rate_hz,
        },
        errors,
    ))
}

pub fn griffin_lim_invert(mel: &MelSpectrogram, n_iters: usize) -> Result<AudioClip> {
    griffin_lim_with_errors(mel, n_iters).map(|(clip, _)| clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{dominant_frequency, mel_spectrogram, MelConfig};

    fn sine_mel(freq: f64) -> MelSpectrogram {
        let cfg = MelConfig::default();
        let samples = (0..8000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        mel_spectrogram(&AudioClip::new(samples, 16_000).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn output_length_follows_frames() {
        let mel = sine_mel(500.0);
        let clip = griffin_lim_invert(&mel, 2).unwrap();
        assert_eq!(clip.samples.len(), (mel.n_frames() - 1) * 200 + 800);
        assert_eq!(clip.sample_rate_hz, 16_000);
    }

    #[test]
    fn floor_mel_gives_near_silence() {
        let cfg = MelConfig::default();
        let mel = MelSpectrogram {
            frames: Tensor::full(&[20, 80], cfg.log_floor.ln()),
            config: cfg,
        };
        let clip = griffin_lim_invert(&mel, 5).unwrap();
        assert!(clip.rms() < 1e-3);
    }

    #[test]
    fn more_iterations_never_hurt() {
        let mel = sine_mel(500.0);
        let (_, errs) = griffin_lim_with_errors(&mel, 60).unwrap();
        assert!(errs[59] <= errs[0]);
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{errs:?}");
        }
    }

    #[test]
    fn degenerate_filterbank_is_reported() {
        // 400 mels over 401 bins leaves low filters without any support.
        let cfg = MelConfig {
            n_mels: 400,
            ..MelConfig::default()
        };
        let mel = MelSpectrogram {
            frames: Tensor::zeros(&[3, 400]),
            config: cfg,
        };
        assert!(matches!(
            mel_to_linear_magnitude(&mel),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn pure_tone_round_trip() {
        let mel = sine_mel(500.0);
        let clip = griffin_lim_invert(&mel, 30).unwrap();
        let f = dominant_frequency(&clip.samples, 16_000);
        assert!((f - 500.0).abs() < 60.0, "dominant {f}");
    }
}
