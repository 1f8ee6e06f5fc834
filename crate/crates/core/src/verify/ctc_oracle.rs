//! Brute-force CTC reference: enumerate every frame labelling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss_value, LabelSequence, BLANK};
use crate::error::Result;
use crate::tensor::Tensor;

/// Merge runs of equal symbols, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut merged: Vec<usize> = Vec::with_capacity(path.len());
    for &k in path {
        if merged.last() != Some(&k) {
            merged.push(k);
        }
    }
    merged.retain(|&k| k != BLANK);
    merged
}

/// `-log Σ P(path)` over all `V^T` paths collapsing to `labels`.
pub fn enumerate_loss(logp: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (t, v) = (logp.shape()[0], logp.shape()[1]);
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == labels {
            terms.push(path.iter().enumerate().map(|(i, &k)| logp.data()[i * v + k]).sum::<f64>());
        }
        // odometer increment
        let mut i = t;
        loop {
            if i == 0 {
                let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                return -(m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln());
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Row-normalised random log-probabilities.
pub fn random_log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::from_parts(vec![t, v], data)
}

#[derive(Clone, Debug)]
pub struct CtcGridReport {
    pub cases: usize,
    pub max_abs_diff: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl CtcGridReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

/// DP loss vs enumeration over `T ∈ [1,6]`, `U ∈ [0,3]`, `V ∈ [2,4]`,
/// `draws` random cases per cell.
pub fn ctc_grid(draws: usize, seed: u64) -> Result<CtcGridReport> {
    let mut report = CtcGridReport {
        cases: 0,
        max_abs_diff: 0.0,
        worst: "-".into(),
        tolerance: 1e-9,
    };
    for t in 1..=6 {
        for u in 0..=3 {
            for v in 2..=4 {
                let cell = (t * 100 + u * 10 + v) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell << 32));
                for d in 0..draws {
                    let logp = random_log_probs(t, v, &mut rng);
                    let tokens: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
                    let labels = LabelSequence::new(tokens.clone(), v)?;
                    let dp = ctc_loss_value(&logp, &labels)?;
                    let bf = enumerate_loss(&logp, &tokens);
                    let diff = if dp.is_infinite() && bf.is_infinite() {
                        0.0
                    } else {
                        (dp - bf).abs()
                    };
                    report.cases += 1;
                    if diff > report.max_abs_diff || diff.is_nan() {
                        report.max_abs_diff = if diff.is_nan() { f64::INFINITY } else { diff };
                        report.worst = format!("T={t} U={u} V={v} draw {d}: dp {dp} enum {bf}");
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_merges_then_drops_blanks() {
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[0, 2, 2, 3, 0]), vec![2, 3]);
        assert!(collapse(&[0, 0]).is_empty());
    }

    #[test]
    fn small_grid_agrees() {
        let r = ctc_grid(2, 7).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.cases, 6 * 4 * 3 * 2);
    }
}
