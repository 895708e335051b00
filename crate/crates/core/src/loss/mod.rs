//! Joint objective: gate loss, filtered-spectrum and encoder consistency
//! losses, and CTC.

mod ctc;

use thiserror::Error;

use crate::numerics::element::Element;
use crate::numerics::{Tensor, TensorError};

pub use ctc::{ctc_loss, ctc_nll, ctc_single, log_softmax_rows, min_frames, BLANK};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("utterance {item}: {target_len} tokens need {needed} frames, only {frames} available")]
    Infeasible {
        item: usize,
        target_len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("utterance {item}: token {token} outside 1..{classes}")]
    BadToken { item: usize, token: usize, classes: usize },
    #[error("{0} reference is attached to the autodiff graph; compute it without gradients")]
    UndetachedReference(&'static str),
    #[error("{0} loss is not finite")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Mean absolute difference over the positions selected by `mask`, which
/// broadcasts against `a` (for example `(B, T, 1)` against `(B, T, Q)`).
pub fn masked_l1<T: Element>(a: &Tensor<T>, b: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let diff = a.sub(b)?.abs();
    match mask {
        None => Ok(diff.mean()),
        Some(m) => {
            let selected: f64 = m.data().iter().map(|v| v.as_f64()).sum();
            let count = selected * (a.numel() / m.numel()) as f64;
            if count == 0.0 {
                return Err(LossError::CountMismatch {
                    what: "masked positions",
                    expected: 1,
                    got: 0,
                });
            }
            Ok(diff.mul(m)?.sum().mul_scalar(1.0 / count))
        }
    }
}

fn check_count(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LossError::CountMismatch {
            what,
            expected: a,
            got: b,
        });
    }
    Ok(())
}

fn sum_terms<T: Element>(terms: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or(LossError::CountMismatch {
        what: "loss terms",
        expected: 1,
        got: 0,
    })?;
    it.try_fold(first, |acc, t| acc.add(&t).map_err(LossError::from))
}

/// Sum over heads of the L1 distance between predicted gates and labels.
pub fn gate_loss<T: Element>(gates: &[Tensor<T>], labels: &[Tensor<T>], mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_count("gate labels", gates.len(), labels.len())?;
    sum_terms(
        gates
            .iter()
            .zip(labels)
            .map(|(g, l)| masked_l1(g, l, mask))
            .collect::<Result<_>>()?,
    )
}

/// Sum over heads of the L1 distance between noisy and clean gated spectra.
/// The clean side must carry no gradient.
pub fn filtered_consistency_loss<T: Element>(
    noisy: &[Tensor<T>],
    clean: &[Tensor<T>],
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_count("clean filtered spectra", noisy.len(), clean.len())?;
    if clean.iter().any(|c| c.requires_grad()) {
        return Err(LossError::UndetachedReference("clean filtered spectrum"));
    }
    sum_terms(
        noisy
            .iter()
            .zip(clean)
            .map(|(n, c)| masked_l1(n, c, mask))
            .collect::<Result<_>>()?,
    )
}

/// L1 distance between noisy and clean encoder outputs.
pub fn encoder_consistency_loss<T: Element>(
    noisy: &Tensor<T>,
    clean: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if clean.requires_grad() {
        return Err(LossError::UndetachedReference("clean encoder output"));
    }
    masked_l1(noisy, clean, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gate: f64,
    pub filtered: f64,
    pub encoder: f64,
    pub ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gate: 1.0,
            filtered: 1.0,
            encoder: 1.0,
            ctc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn ctc_only() -> Self {
        Self {
            gate: 0.0,
            filtered: 0.0,
            encoder: 0.0,
            ctc: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.gate, self.filtered, self.encoder, self.ctc]
    }
}

/// The four loss terms of one step.
pub struct LossParts<T: Element> {
    pub gate: Tensor<T>,
    pub filtered: Tensor<T>,
    pub encoder: Tensor<T>,
    pub ctc: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossBreakdown {
    pub l_g: f64,
    pub l_r: f64,
    pub l_o: f64,
    pub l_ctc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Weighted sum of the parts. Terms with zero weight are left out of the
/// graph entirely.
pub fn total_loss<T: Element>(parts: &LossParts<T>, weights: LossWeights) -> Result<(Tensor<T>, JointLossBreakdown)> {
    let named = [
        ("gate", &parts.gate, weights.gate),
        ("filtered", &parts.filtered, weights.filtered),
        ("encoder", &parts.encoder, weights.encoder),
        ("ctc", &parts.ctc, weights.ctc),
    ];
    let mut values = [0.0; 4];
    let mut terms = Vec::with_capacity(4);
    for (i, (name, t, w)) in named.into_iter().enumerate() {
        let v = t.item().as_f64();
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
        values[i] = v;
        if w != 0.0 {
            terms.push(if w == 1.0 { t.clone() } else { t.mul_scalar(w) });
        }
    }
    let total = if terms.is_empty() {
        Tensor::zeros(&[1])
    } else {
        sum_terms(terms)?
    };
    let breakdown = JointLossBreakdown {
        l_g: values[0],
        l_r: values[1],
        l_o: values[2],
        l_ctc: values[3],
        total: total.item().as_f64(),
        weights,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::no_grad;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v, shape).unwrap()
    }

    fn parts(v: [f64; 4]) -> LossParts<f64> {
        LossParts {
            gate: Tensor::scalar(v[0]),
            filtered: Tensor::scalar(v[1]),
            encoder: Tensor::scalar(v[2]),
            ctc: Tensor::scalar(v[3]),
        }
    }

    #[test]
    fn identical_gates_give_zero_loss() {
        let g = t(vec![0.0, 1.0, 1.0, 0.0], &[1, 2, 2]);
        assert_eq!(gate_loss(&[g.clone()], &[g], None).unwrap().item(), 0.0);
    }

    #[test]
    fn half_gate_against_binary_label_costs_half_per_head() {
        let g = t(vec![0.5; 6], &[1, 3, 2]);
        let l = t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[1, 3, 2]);
        let loss = gate_loss(&[g.clone(), g], &[l.clone(), l], None).unwrap();
        assert_eq!(loss.item(), 1.0);
    }

    #[test]
    fn mask_excludes_padded_frames() {
        let a = t(vec![1.0, 1.0, 9.0, 9.0], &[1, 2, 2]);
        let b = t(vec![0.0; 4], &[1, 2, 2]);
        let m = t(vec![1.0, 0.0], &[1, 2, 1]);
        assert_eq!(masked_l1(&a, &b, Some(&m)).unwrap().item(), 1.0);
    }

    #[test]
    fn head_count_mismatch_is_an_error() {
        let g = t(vec![0.5; 2], &[1, 1, 2]);
        assert!(matches!(
            gate_loss(&[g.clone(), g.clone()], &[g], None),
            Err(LossError::CountMismatch { .. })
        ));
    }

    #[test]
    fn undetached_clean_reference_is_rejected() {
        let w = t(vec![1.0, 2.0], &[1, 1, 2]).into_leaf(true);
        let clean = w.mul_scalar(2.0);
        assert!(matches!(
            filtered_consistency_loss(&[w.clone()], &[clean], None),
            Err(LossError::UndetachedReference(_))
        ));
        let clean = no_grad(|| w.mul_scalar(2.0));
        assert!(filtered_consistency_loss(&[w.clone()], &[clean], None).is_ok());
        assert!(encoder_consistency_loss(&w, &w, None).is_err());
        assert!(encoder_consistency_loss(&w, &w.detach(), None).is_ok());
    }

    #[test]
    fn total_is_the_plain_sum_by_default() {
        let (total, b) = total_loss(&parts([1.0, 2.0, 3.0, 4.0]), LossWeights::default()).unwrap();
        assert_eq!(total.item(), 10.0);
        assert_eq!(b.total, 10.0);
    }

    #[test]
    fn zeroed_weight_drops_exactly_that_component() {
        let p = parts([0.25, 0.5, 1.5, 3.0]);
        let full = total_loss(&p, LossWeights::default()).unwrap().1.total;
        let w = LossWeights {
            filtered: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&p, w).unwrap().1.total, full - 0.5);
        assert_eq!(total_loss(&p, LossWeights::ctc_only()).unwrap().1.total, 3.0);
    }

    #[test]
    fn non_finite_part_is_named() {
        let err = total_loss(&parts([0.0, f64::NAN, 0.0, 0.0]), LossWeights::default()).unwrap_err();
        assert!(matches!(err, LossError::NonFinite("filtered")));
    }
}
