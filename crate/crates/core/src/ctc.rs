//! Connectionist temporal classification: loss by the forward-backward
//! recursion and greedy collapse decoding.
//!
//! Class `0` is the blank for every head in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Stand-in for `log(0)` that keeps every tape value finite.
const LOG_ZERO: f64 = -1e30;

/// A target label sequence; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CtcLabelSeq(Vec<usize>);

impl CtcLabelSeq {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(contract("label sequence contains the blank index"));
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum number of frames any alignment needs: one per label plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Negative log-likelihood and its gradient with respect to `log_probs`.
///
/// Returns `None` when no alignment fits in the available frames.
fn forward_backward(log_probs: &Tensor, labels: &CtcLabelSeq) -> Result<Option<(f64, Vec<f64>)>> {
    let t_len = log_probs.rows();
    let c = log_probs.cols();
    if let Some(&bad) = labels.labels().iter().find(|&&l| l >= c) {
        return Err(contract(format!("label {bad} outside {c} classes")));
    }
    if log_probs.data().iter().any(|v| v.is_nan()) {
        return Err(contract("ctc input contains NaN"));
    }
    if t_len == 0 || labels.min_frames() > t_len {
        return Ok(None);
    }
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels.labels() {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * c + k];
    let skip_allowed = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_allowed(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a <= LOG_ZERO { LOG_ZERO } else { a + lp(t, ext[s]) };
        }
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![LOG_ZERO; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_allowed(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b.max(LOG_ZERO);
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p <= LOG_ZERO / 2.0 {
        return Ok(None);
    }
    let mut grad = vec![0.0; t_len * c];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > LOG_ZERO / 2.0 {
                grad[t * c + ext[s]] -= (ab - log_p).exp();
            }
        }
    }
    Ok(Some((-log_p, grad)))
}

/// `-log P(labels | log_probs)`, with `+inf` when no alignment is feasible.
pub fn ctc_neg_log_likelihood(log_probs: &Tensor, labels: &CtcLabelSeq) -> Result<f64> {
    Ok(forward_backward(log_probs, labels)?.map_or(f64::INFINITY, |(l, _)| l))
}

/// Differentiable CTC loss over a `[T × C]` matrix of log-probabilities.
///
/// An infeasible alignment (too few frames) surfaces as
/// [`Error::AlignmentInfeasible`] so that the tape never holds an infinity.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, labels: &CtcLabelSeq) -> Result<Var> {
    let lp = tape.value(log_probs);
    match forward_backward(lp, labels)? {
        Some((loss, grad)) => {
            let grad = Tensor::new(lp.shape().to_vec(), grad)?;
            tape.precomputed_scalar(log_probs, loss, grad)
        }
        None => Err(Error::AlignmentInfeasible {
            required: labels.min_frames(),
            frames: lp.rows(),
        }),
    }
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Per-frame argmax (lowest index on ties).
pub fn frame_argmax(log_probs: &Tensor) -> Vec<usize> {
    (0..log_probs.rows())
        .map(|r| {
            let row = log_probs.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    collapse(&frame_argmax(log_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(t: usize, c: usize) -> Tensor {
        Tensor::full(&[t, c], -(c as f64).ln())
    }

    #[test]
    fn single_frame_uniform() {
        let l = ctc_neg_log_likelihood(&uniform(1, 3), &CtcLabelSeq::new(vec![1]).unwrap()).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((l - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn empty_labels_take_the_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 5;
        let logits = Tensor::new(vec![t, 3], (0..t * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits).unwrap();
        let lp = tape.log_softmax(x).unwrap();
        let lp = tape.value(lp).clone();
        let expected: f64 = -(0..t).map(|r| lp.at(r, BLANK)).sum::<f64>();
        let got = ctc_neg_log_likelihood(&lp, &CtcLabelSeq::default()).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let p: [[f64; 2]; 2] = [[0.3, 0.7], [0.6, 0.4]];
        let lp = Tensor::from_rows(&[vec![p[0][0].ln(), p[0][1].ln()], vec![p[1][0].ln(), p[1][1].ln()]]).unwrap();
        let expected = -(p[0][1] * p[1][1] + p[0][1] * p[1][0] + p[0][0] * p[1][1]).ln();
        let got = ctc_neg_log_likelihood(&lp, &CtcLabelSeq::new(vec![1]).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_alignment() {
        let labels = CtcLabelSeq::new(vec![1, 1]).unwrap();
        assert_eq!(labels.min_frames(), 3);
        assert_eq!(ctc_neg_log_likelihood(&uniform(2, 3), &labels).unwrap(), f64::INFINITY);
        let mut tape = Tape::new();
        let x = tape.constant(uniform(2, 3)).unwrap();
        assert!(matches!(
            ctc_loss(&mut tape, x, &labels),
            Err(Error::AlignmentInfeasible { required: 3, frames: 2 })
        ));
    }

    #[test]
    fn rejects_blank_and_out_of_range_labels() {
        assert!(CtcLabelSeq::new(vec![2, 0]).is_err());
        let labels = CtcLabelSeq::new(vec![5]).unwrap();
        assert!(ctc_neg_log_likelihood(&uniform(3, 3), &labels).is_err());
        let mut nan = uniform(2, 3);
        nan.data_mut()[1] = f64::NAN;
        assert!(ctc_neg_log_likelihood(&nan, &CtcLabelSeq::new(vec![1]).unwrap()).is_err());
    }

    #[test]
    fn greedy_decode_examples() {
        assert_eq!(collapse(&[0, 1, 1, 0, 2]), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        let one_hot = |path: &[usize], c: usize| {
            let rows: Vec<Vec<f64>> = path
                .iter()
                .map(|&k| (0..c).map(|j| if j == k { 0.0 } else { -10.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&one_hot(&[0, 1, 1, 0, 2], 3)), vec![1, 2]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, c) = (6, 4);
        let logits = Tensor::new(vec![t, c], (0..t * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let labels = CtcLabelSeq::new(vec![2, 2, 3]).unwrap();
        let loss_of = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true).unwrap();
            let lp = tape.log_softmax(v).unwrap();
            let l = ctc_loss(&mut tape, lp, &labels).unwrap();
            (tape.value(l).item(), tape.backward(l).unwrap().get(v).unwrap().clone())
        };
        let (_, grad) = loss_of(&logits);
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (loss_of(&p).0 - loss_of(&m).0) / (2.0 * h);
            let a = grad.data()[i];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "{i}: {a} vs {fd}"
            );
        }
    }
}
