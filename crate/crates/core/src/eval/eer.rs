use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer_percent: f64,
    pub threshold: f64,
}

/// Equal error rate of `scores` where `labels[i]` marks a same-speaker trial.
///
/// Operating points sit at `-inf`, at every midpoint between adjacent distinct
/// scores, and at `+inf`; a trial is accepted when its score exceeds the
/// threshold. `FAR - FRR` falls strictly from 1 to -1 across these points, and
/// the EER is the linear interpolation of FAR (equivalently FRR) at its zero
/// crossing.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<EerResult> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("EER needs both same- and cross-speaker trials"));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep upward: at the point just above a score group, every trial in it is rejected.
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let mut points: Vec<(f64, f64, f64)> = vec![(f64::NEG_INFINITY, 1.0, 0.0)];
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
        let theta = if i < pairs.len() {
            0.5 * (s + pairs[i].0)
        } else {
            f64::INFINITY
        };
        points.push((theta, (nn - rejected_neg as f64) / nn, rejected_pos as f64 / np));
    }

    for w in points.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok(EerResult {
                eer_percent: 100.0 * far0,
                threshold: t0,
            });
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let frac = d0 / (d0 - d1);
            let eer = far0 + frac * (far1 - far0);
            let threshold = if t0.is_finite() && t1.is_finite() {
                t0 + frac * (t1 - t0)
            } else if t0.is_finite() {
                t0
            } else {
                t1
            };
            return Ok(EerResult {
                eer_percent: 100.0 * eer,
                threshold: if threshold.is_finite() { threshold } else { pairs[0].0 },
            });
        }
    }
    unreachable!("FAR - FRR goes from 1 to -1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive O(n²) reference: every operating point counted from scratch.
    pub(crate) fn brute_force_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let mut uniq: Vec<f64> = scores.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let mut thresholds = vec![f64::NEG_INFINITY];
        thresholds.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        thresholds.push(f64::INFINITY);
        let rates: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let (mut fa, mut fr, mut np, mut nn) = (0.0, 0.0, 0.0, 0.0);
                for (&s, &l) in scores.iter().zip(labels) {
                    if l {
                        np += 1.0;
                        if s < t {
                            fr += 1.0;
                        }
                    } else {
                        nn += 1.0;
                        if s > t {
                            fa += 1.0;
                        }
                    }
                }
                (fa / nn, fr / np)
            })
            .collect();
        let best = (0..rates.len())
            .min_by(|&a, &b| {
                let da = (rates[a].0 - rates[a].1).abs();
                let db = (rates[b].0 - rates[b].1).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        let d = |k: usize| rates[k].0 - rates[k].1;
        if d(best) == 0.0 {
            return 100.0 * rates[best].0;
        }
        let other = if d(best) > 0.0 { best + 1 } else { best - 1 };
        let (lo, hi) = if d(best) > 0.0 { (best, other) } else { (other, best) };
        let frac = d(lo) / (d(lo) - d(hi));
        100.0 * (rates[lo].0 + frac * (rates[hi].0 - rates[lo].0))
    }

    #[test]
    fn separation_extremes() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let r = compute_eer(&scores, &[true, true, false, false]).unwrap();
        assert_eq!(r.eer_percent, 0.0);
        assert_eq!(r.threshold, 0.5);
        let r = compute_eer(&scores, &[false, false, true, true]).unwrap();
        assert_eq!(r.eer_percent, 100.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(compute_eer(&[0.1, 0.2], &[true, true]), Err(Error::InvalidInput(_))));
        assert!(compute_eer(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..80);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            // coarse grid forces ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 10.0).collect();
            let fast = compute_eer(&scores, &labels).unwrap().eer_percent;
            let slow = brute_force_eer(&scores, &labels);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            raw in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 4..60)
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<bool>) = raw.into_iter().unzip();
            labels[0] = true;
            labels[1] = false;
            let a = compute_eer(&scores, &labels).unwrap().eer_percent;
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
            let b = compute_eer(&mapped, &labels).unwrap().eer_percent;
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
