//! Acoustic front-end shared by the verifier and the synthesizer.

mod griffin_lim;
mod mel;
mod mels_format;
mod resample;
mod wav;

pub use griffin_lim::{griffin_lim_invert, griffin_lim_with_errors, mel_to_linear_magnitude};
pub use mel::{
    hz_to_mel, mel_centers, mel_filterbank, mel_spectrogram, mel_to_hz, stft_magnitude, MelConfig,
    MelNormalization, MelSpectrogram,
};
pub use mels_format::{decode_mels, encode_mels, read_mels, write_mels, MELS_MAGIC, MELS_VERSION};
pub use resample::{resample, ResampleOutput, ResampleWarning};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Mono PCM audio with samples normalised to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Frequency in Hz of the largest-magnitude DFT bin of `samples`.
pub fn dominant_frequency(samples: &[f64], sample_rate_hz: u32) -> f64 {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (best, _) = buf[..n / 2 + 1]
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, 0.0), |(bi, bm), (i, c)| {
            let m = c.norm_sqr();
            if m > bm {
                (i, m)
            } else {
                (bi, bm)
            }
        });
    best as f64 * f64::from(sample_rate_hz) / n as f64
}
