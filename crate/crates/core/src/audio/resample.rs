//! Polyphase windowed-sinc resampling.

use super::AudioClip;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kept on each side, measured at the cutoff.
const ZERO_CROSSINGS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleWarning {
    /// The target rate exceeds the source rate; no new bandwidth is created.
    Upsampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleOutput {
    pub clip: AudioClip,
    pub warning: Option<ResampleWarning>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = (x + 1.0) / 2.0;
    let tau = 2.0 * std::f64::consts::PI;
    0.42 - 0.5 * (tau * t).cos() + 0.08 * (2.0 * tau * t).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<ResampleOutput> {
    if target_rate_hz == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if clip.samples.is_empty() {
        return Err(Error::invalid("cannot resample an empty clip"));
    }
    let src = u64::from(clip.sample_rate_hz);
    let dst = u64::from(target_rate_hz);
    if src == dst {
        return Ok(ResampleOutput {
            clip: clip.clone(),
            warning: None,
        });
    }
    let warning = (dst > src).then_some(ResampleWarning::Upsampled);

    let g = gcd(src, dst);
    let up = (dst / g) as usize;
    let down = (src / g) as usize;
    // cutoff relative to the source Nyquist
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let half_width = (ZERO_CROSSINGS as f64 / cutoff).ceil() as isize;

    // One filter per output phase: phase p sits p/up of a source sample past an integer.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (-half_width + 1..=half_width)
                .map(|k| {
                    let delta = k as f64 - frac;
                    let x = delta / half_width as f64;
                    if x.abs() >= 1.0 {
                        0.0
                    } else {
                        cutoff * sinc(cutoff * delta) * blackman(x)
                    }
                })
                .collect()
        })
        .collect();

    let n_in = clip.samples.len();
    let n_out = ((n_in as u64 * dst + src - 1) / src) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let num = n * down;
        let base = (num / up) as isize;
        let taps = &phases[num % up];
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let idx = base + (j as isize - half_width + 1);
            if idx >= 0 && (idx as usize) < n_in {
                acc += h * clip.samples[idx as usize];
            }
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    Ok(ResampleOutput {
        clip: AudioClip {
            samples: out,
            sample_rate_hz: target_rate_hz,
        },
        warning,
    })
}
