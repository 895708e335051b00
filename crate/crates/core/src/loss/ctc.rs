//! Connectionist temporal classification: log-space forward/backward over
//! the blank-augmented label lattice.

use crate::numerics::element::Element;
use crate::numerics::tensor::{BackwardOp, Tensor};

use super::LossError;

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum frames needed to emit `target`: its length plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Row-wise log-softmax of a `(frames, classes)` block.
pub fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Negative log-likelihood of one utterance and its gradient with respect to
/// the `(frames, classes)` logits.
pub fn ctc_single(logits: &[f64], classes: usize, target: &[usize]) -> (f64, Vec<f64>) {
    let frames = logits.len() / classes;
    let lp = log_softmax_rows(logits, classes);
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let emit = |t: usize, s: usize| lp[t * classes + ext[s]];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            if a > neg {
                alpha[t * s_len + s] = a + emit(t, s);
            }
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![neg; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + emit(t + 1, s);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + emit(t + 1, s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + emit(t + 1, s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }

    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > neg {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    (-log_p, grad)
}

struct CtcOp<T> {
    grad: Vec<T>,
}

impl<T: Element> BackwardOp<T> for CtcOp<T> {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.grad.iter().map(|&v| v * g[0]).collect())]
    }
}

/// Per-utterance negative log-likelihoods for `(B, T', V+1)` logits. Frames
/// at or beyond `lengths[b]` are ignored.
pub fn ctc_nll<T: Element>(logits: &Tensor<T>, targets: &[Vec<usize>], lengths: &[usize]) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    if logits.rank() != 3 || targets.len() != logits.dim(0) || lengths.len() != logits.dim(0) {
        return Err(LossError::CountMismatch {
            what: "ctc batch",
            expected: logits.dim(0),
            got: targets.len().min(lengths.len()),
        });
    }
    let (b, t_max, classes) = (logits.dim(0), logits.dim(1), logits.dim(2));
    let data = logits.data();
    let mut losses = Vec::with_capacity(b);
    let mut grad = vec![0.0; logits.numel()];
    for (i, (target, &len)) in targets.iter().zip(lengths).enumerate() {
        if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
            return Err(LossError::BadToken { item: i, token: bad, classes });
        }
        let needed = min_frames(target);
        if len == 0 || len > t_max || needed > len {
            return Err(LossError::Infeasible {
                item: i,
                target_len: target.len(),
                needed,
                frames: len.min(t_max),
            });
        }
        let base = i * t_max * classes;
        let block: Vec<f64> = data[base..base + len * classes].iter().map(|v| v.as_f64()).collect();
        let (nll, g) = ctc_single(&block, classes, target);
        losses.push(nll);
        grad[base..base + len * classes].copy_from_slice(&g);
    }
    Ok((losses, grad))
}

/// Batch-mean CTC loss as a differentiable scalar.
pub fn ctc_loss<T: Element>(logits: &Tensor<T>, targets: &[Vec<usize>], lengths: &[usize]) -> Result<Tensor<T>, LossError> {
    let (losses, grad) = ctc_nll(logits, targets, lengths)?;
    let scale = 1.0 / losses.len() as f64;
    let mean = losses.iter().sum::<f64>() * scale;
    let grad = grad.into_iter().map(|g| T::from_f64(g * scale)).collect();
    Ok(Tensor::from_op(
        vec![T::from_f64(mean)],
        vec![1],
        vec![logits.clone()],
        CtcOp { grad },
    ))
}
