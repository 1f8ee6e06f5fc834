//! CTC loss, Inter-CTC combination, greedy decoding and WER scoring.
//!
//! Index 0 of every vocabulary is the blank symbol.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Target token sequence, blank excluded.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    /// Validates every index against a vocabulary of size `vocab`
    /// (blank included).
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&k| k == BLANK || k >= vocab) {
            return Err(Error::InvalidToken { index: bad, vocab });
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames any alignment of this sequence needs: one per label
    /// plus a separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

fn lse<S: Scalar>(a: S, b: S) -> S {
    let m = a.max(b);
    if m == S::neg_infinity() {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Negative log-likelihood and its gradient with respect to `logp`.
struct CtcResult<S> {
    loss: S,
    grad: Vec<S>,
}

fn forward_backward<S: Scalar>(logp: &Tensor<S>, labels: &[usize], want_grad: bool) -> Result<CtcResult<S>> {
    if logp.rank() != 2 {
        return Err(Error::dim("ctc_loss", logp.shape(), &[]));
    }
    let (t_len, vocab) = (logp.shape()[0], logp.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&k| k == BLANK || k >= vocab) {
        return Err(Error::InvalidToken { index: bad, vocab });
    }
    let ninf = S::neg_infinity();
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logp.data()[t * vocab + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = lse(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    let loss = -log_p;
    let mut grad = Vec::new();
    if !want_grad {
        return Ok(CtcResult { loss, grad });
    }
    grad = vec![S::zero(); t_len * vocab];
    if log_p == ninf {
        return Ok(CtcResult { loss, grad });
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = S::zero();
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut b = next(s);
            if s + 1 < s_len {
                b = lse(b, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * vocab + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(CtcResult { loss, grad })
}

/// `-log P(labels | logp)` for per-frame log-probabilities `logp[T, V]`.
///
/// Returns `+inf` when no alignment fits in `T` frames.
pub fn ctc_loss_value<S: Scalar>(logp: &Tensor<S>, labels: &LabelSequence) -> Result<S> {
    Ok(forward_backward(logp, labels.tokens(), false)?.loss)
}

/// Differentiable CTC loss. The recorded gradient is with respect to
/// `logp` itself; chaining through a log-softmax yields the usual
/// `softmax - occupancy` gradient on logits.
pub fn ctc_loss<S: Scalar>(tape: &Tape<S>, logp: Var, labels: &LabelSequence) -> Result<Var> {
    let res = {
        let v = tape.value(logp);
        forward_backward(&v, labels.tokens(), tape.requires_grad(logp))?
    };
    let shape = tape.shape(logp);
    let grad = res.grad;
    Ok(tape.record(Tensor::scalar(res.loss), &[logp], move |g, _, _, _| {
        let gs = g.item();
        vec![Some(Tensor::from_parts(shape.clone(), grad.iter().map(|&v| v * gs).collect()))]
    }))
}

fn check_lambda(lambda: f64, taps: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("inter-CTC weight {lambda} outside [0, 1]")));
    }
    if taps == 0 && lambda > 0.0 {
        return Err(Error::Config("inter-CTC weight > 0 but no intermediate taps".into()));
    }
    Ok(())
}

/// `(1 - λ)·final + λ·mean(taps)`.
pub fn inter_ctc_combine_value(final_loss: f64, tap_losses: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda, tap_losses.len())?;
    if tap_losses.is_empty() {
        return Ok(final_loss);
    }
    let mean = tap_losses.iter().sum::<f64>() / tap_losses.len() as f64;
    Ok((1.0 - lambda) * final_loss + lambda * mean)
}

/// Differentiable form of [`inter_ctc_combine_value`].
pub fn inter_ctc_combine<S: Scalar>(tape: &Tape<S>, final_loss: Var, taps: &[Var], lambda: f64) -> Result<Var> {
    check_lambda(lambda, taps.len())?;
    if taps.is_empty() || lambda == 0.0 {
        return Ok(final_loss);
    }
    let sum = tape.add_n(taps)?;
    let tap_term = tape.scale(sum, S::lit(lambda / taps.len() as f64));
    let main = tape.scale(final_loss, S::lit(1.0 - lambda));
    tape.add(main, tap_term)
}

/// Per-frame argmax (ties to the lower index), repeats collapsed, blanks
/// removed.
pub fn greedy_decode<S: Scalar>(logp: &Tensor<S>) -> Vec<usize> {
    let v = logp.last_dim();
    let mut out = Vec::new();
    let mut prev = None;
    for row in logp.data().chunks(v) {
        let mut best = 0;
        for (k, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: total edits over total reference tokens.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::arg(format!("{} references vs {} hypotheses", refs.len(), hyps.len())));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::UndefinedRate("empty reference corpus"));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalized(t: usize, v: usize, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
        };
        let raw: Vec<f64> = (0..t * v).map(|_| next()).collect();
        let mut out = Vec::with_capacity(t * v);
        for row in raw.chunks(v) {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        Tensor::new(&[t, v], out).unwrap()
    }

    #[test]
    fn single_frame_forces_the_label() {
        let lp = normalized(1, 4, 1);
        let y = LabelSequence::new(vec![2], 4).unwrap();
        assert_eq!(ctc_loss_value(&lp, &y).unwrap(), -lp.at(&[0, 2]));
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let lp = normalized(5, 3, 2);
        let y = LabelSequence::new(vec![], 3).unwrap();
        let expect: f64 = -(0..5).map(|t| lp.at(&[t, 0])).sum::<f64>();
        assert!((ctc_loss_value(&lp, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_has_infinite_loss() {
        let lp = normalized(2, 3, 3);
        let y = LabelSequence::new(vec![1, 1], 3).unwrap();
        assert_eq!(y.min_frames(), 3);
        assert_eq!(ctc_loss_value(&lp, &y).unwrap(), f64::INFINITY);
    }

    #[test]
    fn invalid_tokens_are_rejected() {
        assert!(LabelSequence::new(vec![0], 4).is_err());
        assert!(LabelSequence::new(vec![4], 4).is_err());
        let lp = normalized(3, 3, 4);
        let y = LabelSequence::new(vec![3], 4).unwrap();
        assert!(matches!(ctc_loss_value(&lp, &y), Err(Error::InvalidToken { .. })));
    }

    #[test]
    fn combine_examples() {
        assert_eq!(inter_ctc_combine_value(1.5, &[3.0], 0.0).unwrap(), 1.5);
        assert_eq!(inter_ctc_combine_value(1.5, &[3.0], 1.0).unwrap(), 3.0);
        assert!((inter_ctc_combine_value(1.0, &[2.0, 4.0], 0.3).unwrap() - 1.6).abs() < 1e-12);
        assert!(inter_ctc_combine_value(1.0, &[], 0.3).is_err());
        assert!(inter_ctc_combine_value(1.0, &[1.0], 1.5).is_err());
    }

    #[test]
    fn greedy_examples() {
        let mk = |rows: &[usize], v: usize| {
            Tensor::<f64>::from_fn(&[rows.len(), v], |i| if rows[i / v] == i % v { 0.0 } else { -5.0 })
        };
        assert!(greedy_decode(&mk(&[0, 0], 3)).is_empty());
        assert_eq!(greedy_decode(&mk(&[1, 1, 0, 1], 3)), vec![1, 1]);
        // ties go to the lower index
        let tie = Tensor::<f64>::new(&[1, 3], vec![-1.0, -0.5, -0.5]).unwrap();
        assert_eq!(greedy_decode(&tie), vec![1]);
    }

    #[test]
    fn edit_distance_examples() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&k, &s), 3);
        assert_eq!(edit_distance(&k, &k), 0);
        let r: Vec<usize> = (1..=10).collect();
        let mut h = r.clone();
        h[4] = 99;
        assert!((wer(&[r], &[h]).unwrap() - 0.1).abs() < 1e-15);
        assert!(wer::<usize>(&[vec![]], &[vec![1]]).is_err());
    }
}
