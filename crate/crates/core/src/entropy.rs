//! Entropy measures over quantized activations.
//!
//! Three quantities live here:
//!
//! * [`empirical_entropy`] — Shannon entropy in bits of a level histogram;
//!   the quantity the codec's rate is bounded by.
//! * [`soft_entropy`] — a differentiable surrogate built from
//!   softmax-relaxed bin assignments with temperature `T`. Sharper
//!   temperature means harder assignment; as `T -> inf` the soft histogram
//!   converges to the hard one.
//! * [`compressibility`] — the `l1/l2` ratio, a sparsity-promoting
//!   regularizer with the same minimizer.
//!
//! All values are in bits (log base 2) so losses are directly comparable to
//! measured code rates. Gradients are exact; the straight-through tricks
//! live in [`crate::quant`], not here.

use thiserror::Error;

const LN_2: f64 = core::f64::consts::LN_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("histogram is empty (no counts)")]
    EmptyHistogram,
    #[error("soft entropy config invalid: {0}")]
    BadConfig(String),
    #[error("network entropy loss needs at least one activation")]
    NoActivations,
}

/// Per-level symbol counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Histogram { counts, total }
    }

    pub fn from_symbols(symbols: &[u16], num_levels: usize) -> Self {
        let mut counts = vec![0u64; num_levels];
        for &s in symbols {
            counts[s as usize] += 1;
        }
        Histogram::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.counts.len(), other.counts.len());
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.total += other.total;
    }
}

/// Shannon entropy of a histogram in bits per symbol.
///
/// Levels with zero count contribute exactly zero.
pub fn empirical_entropy(h: &Histogram) -> Result<f64, EntropyError> {
    if h.total == 0 {
        return Err(EntropyError::EmptyHistogram);
    }
    let total = h.total as f64;
    let mut bits = 0.0;
    for &c in &h.counts {
        if c > 0 {
            let p = c as f64 / total;
            bits -= p * p.log2();
        }
    }
    Ok(bits)
}

/// Softmax-relaxed assignment of one sample to the level set.
///
/// Entry `i` is `softmax(-T * |x - levels|)_i`: strictly positive, summing
/// to one, concentrating on the nearest level as `T` grows and flattening
/// to uniform as `T -> 0`.
pub fn soft_assignment(x: f64, levels: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let scores: Vec<f64> = levels.iter().map(|&q| -temperature * (x - q).abs()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Soft entropy of a set of samples against a level set, in bits.
///
/// Returns the value and, when `with_grad`, the exact gradient with respect
/// to each sample (levels are treated as constants).
pub fn soft_entropy_with_grad(
    samples: &[f64],
    levels: &[f64],
    temperature: f64,
    with_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let n = samples.len();
    let num_levels = levels.len();
    debug_assert!(n > 0);

    // Soft histogram: p_hat[i] = mean over samples of assignment[i].
    let mut assign = vec![0.0; n * num_levels];
    let mut p_hat = vec![0.0; num_levels];
    for (j, &x) in samples.iter().enumerate() {
        let q = soft_assignment(x, levels, temperature);
        for i in 0..num_levels {
            p_hat[i] += q[i];
            assign[j * num_levels + i] = q[i];
        }
    }
    for p in &mut p_hat {
        *p /= n as f64;
    }

    let mut value = 0.0;
    for &p in &p_hat {
        if p > 0.0 {
            value -= p * p.log2();
        }
    }

    if !with_grad {
        return (value, None);
    }

    // dH/dp_i = -(log2 p_i + 1/ln 2); softmax jacobian folds in per sample.
    let dh_dp: Vec<f64> = p_hat
        .iter()
        .map(|&p| if p > 0.0 { -(p.log2() + 1.0 / LN_2) } else { 0.0 })
        .collect();

    let mut grad = vec![0.0; n];
    for (j, &x) in samples.iter().enumerate() {
        let q = &assign[j * num_levels..(j + 1) * num_levels];
        let weighted: f64 = q.iter().zip(&dh_dp).map(|(a, g)| a * g).sum();
        let mut acc = 0.0;
        for k in 0..num_levels {
            // d score_k / dx = -T * sign(x - q_k); sign(0) taken as 0.
            let diff = x - levels[k];
            let dsign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let ds_dx = -temperature * dsign;
            acc += q[k] * (dh_dp[k] - weighted) * ds_dx;
        }
        grad[j] = acc / n as f64;
    }
    (value, Some(grad))
}

/// l1/l2 ratio of a sample vector with its exact gradient.
///
/// An all-zero input (l2 below `eps`) is already maximally compressible:
/// value and gradient are defined as zero there.
pub fn compressibility_with_grad(samples: &[f64], with_grad: bool) -> (f64, Option<Vec<f64>>) {
    const EPS: f64 = 1e-12;
    let l1: f64 = samples.iter().map(|v| v.abs()).sum();
    let l2: f64 = samples.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 < EPS {
        let grad = with_grad.then(|| vec![0.0; samples.len()]);
        return (0.0, grad);
    }
    let value = l1 / l2;
    if !with_grad {
        return (value, None);
    }
    let l2_sq = l2 * l2;
    let grad = samples
        .iter()
        .map(|&x| {
            let sign = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            (sign * l2 - x * l1 / l2) / l2_sq
        })
        .collect();
    (value, Some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy_of(counts: &[u64]) -> f64 {
        empirical_entropy(&Histogram::new(counts.to_vec())).unwrap()
    }

    #[test]
    fn entropy_identities() {
        assert_eq!(entropy_of(&[4, 4]), 1.0);
        assert_eq!(entropy_of(&[8, 0, 0, 0]), 0.0);
        assert!((entropy_of(&[1, 1, 2]) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_empty_is_error() {
        assert_eq!(
            empirical_entropy(&Histogram::new(vec![0, 0])),
            Err(EntropyError::EmptyHistogram)
        );
        assert_eq!(
            empirical_entropy(&Histogram::new(vec![])),
            Err(EntropyError::EmptyHistogram)
        );
    }

    #[test]
    fn entropy_bounds() {
        // 0 <= H <= log2(L), extremes exactly at one-hot / uniform.
        let h = entropy_of(&[3, 9, 1, 7]);
        assert!(h > 0.0 && h < 2.0);
        assert_eq!(entropy_of(&[5, 5, 5, 5]), 2.0);
    }

    #[test]
    fn soft_assignment_on_level_is_one_hot_at_high_temperature() {
        let levels: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let q = soft_assignment(levels[2], &levels, 1000.0);
        assert!(q[2] >= 1.0 - 1e-10);
    }

    #[test]
    fn soft_assignment_midpoint_symmetry() {
        let levels: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let mid = (levels[1] + levels[2]) / 2.0;
        for t in [0.5, 10.0, 250.0] {
            let q = soft_assignment(mid, &levels, t);
            assert!((q[1] - q[2]).abs() < 1e-12, "T={t}: {q:?}");
        }
    }

    #[test]
    fn soft_assignment_low_temperature_is_uniform() {
        let levels: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let q = soft_assignment(0.4, &levels, 1e-9);
        for &v in &q {
            assert!((v - 1.0 / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_assignment_rows_sum_to_one() {
        let levels: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        for k in 0..50 {
            let x = k as f64 * 0.02;
            let q = soft_assignment(x, &levels, 10.0);
            let sum: f64 = q.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn soft_entropy_degenerate_cases() {
        let levels: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        // Every sample on one level: near zero.
        let samples = vec![levels[1]; 32];
        let (h, _) = soft_entropy_with_grad(&samples, &levels, 1000.0, false);
        assert!(h <= 1e-6, "h = {h}");
        // Each level exactly once: log2(L).
        let (h, _) = soft_entropy_with_grad(&levels.clone(), &levels, 1000.0, false);
        assert!((h - 2.0).abs() <= 1e-6, "h = {h}");
    }

    #[test]
    fn soft_entropy_permutation_invariant() {
        let levels: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let samples: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7919) % 1.0).collect();
        let mut reversed = samples.clone();
        reversed.reverse();
        let (a, _) = soft_entropy_with_grad(&samples, &levels, 10.0, false);
        let (b, _) = soft_entropy_with_grad(&reversed, &levels, 10.0, false);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn compressibility_identities() {
        // One-hot vector.
        let mut v = vec![0.0; 9];
        v[3] = 2.5;
        let (c, _) = compressibility_with_grad(&v, false);
        assert!((c - 1.0).abs() < 1e-12);
        // Constant vector of length 16 -> sqrt(16).
        let v = vec![0.7; 16];
        let (c, _) = compressibility_with_grad(&v, false);
        assert!((c - 4.0).abs() < 1e-12);
    }

    #[test]
    fn compressibility_scale_invariant() {
        let v: Vec<f64> = (1..20).map(|i| (i as f64 * 0.377).sin()).collect();
        let (c1, _) = compressibility_with_grad(&v, false);
        for scale in [0.001, 0.5, 3.0, -7.0, 1e6] {
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let (c2, _) = compressibility_with_grad(&scaled, false);
            assert!(rel(c1, c2) < 1e-10, "scale {scale}: {c1} vs {c2}");
        }
    }

    #[test]
    fn compressibility_zero_vector_is_zero() {
        let v = vec![0.0; 8];
        let (c, g) = compressibility_with_grad(&v, true);
        assert_eq!(c, 0.0);
        assert!(g.unwrap().iter().all(|&x| x == 0.0));
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}
