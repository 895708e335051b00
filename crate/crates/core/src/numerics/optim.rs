//! Adam with bias correction and a reduce-on-plateau schedule.

use std::collections::BTreeMap;

use thiserror::Error;

use super::element::Element;
use super::param::Param;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has {got} elements, parameter has {expected}")]
    GradShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub config: AdamConfig,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self, OptimError> {
        if !(config.learning_rate > 0.0) {
            return Err(OptimError::BadLearningRate(config.learning_rate));
        }
        Ok(Self {
            step: 0,
            config,
            moments: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::BadLearningRate(lr));
        }
        self.config.learning_rate = lr;
        Ok(())
    }

    /// One Adam update over named `(values, grads)` pairs. Nothing is
    /// modified if any gradient is non-finite.
    pub fn update(&mut self, params: &mut [(&str, &mut [T], &[T])]) -> Result<(), OptimError> {
        for (name, value, grad) in params.iter() {
            if grad.len() != value.len() {
                return Err(OptimError::GradShape {
                    name: name.to_string(),
                    expected: value.len(),
                    got: grad.len(),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(learning_rate), T::from_f64(eps));
        for (name, value, grad) in params.iter_mut() {
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); value.len()],
                v: vec![T::zero(); value.len()],
            });
            for i in 0..value.len() {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + one_b1 * g;
                mom.v[i] = b2 * mom.v[i] + one_b2 * g * g;
                let m_hat = mom.m[i] * inv_bc1;
                let v_hat = mom.v[i] * inv_bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Steps every trainable parameter using its accumulated gradient
    /// (missing gradients count as zero).
    pub fn step(&mut self, params: &[Param<T>]) -> Result<(), OptimError> {
        let trainable: Vec<&Param<T>> = params.iter().filter(|p| p.trainable()).collect();
        let mut values: Vec<Vec<T>> = trainable.iter().map(|p| p.get().to_vec()).collect();
        let grads: Vec<Vec<T>> = trainable
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        {
            let mut batch: Vec<(&str, &mut [T], &[T])> = trainable
                .iter()
                .zip(values.iter_mut())
                .zip(grads.iter())
                .map(|((p, v), g)| (p.name(), v.as_mut_slice(), g.as_slice()))
                .collect();
            self.update(&mut batch)?;
        }
        for (p, v) in trainable.into_iter().zip(values) {
            p.set_data(v);
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to [`PlateauSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauDecision {
    pub learning_rate: f64,
    pub decayed: bool,
    pub improved: bool,
    pub stop: bool,
}

/// Halves the learning rate after `plateau_patience` non-improving epochs
/// and requests a stop after `stop_patience`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub plateau_patience: u32,
    pub stop_patience: u32,
    pub best_loss: f64,
    pub epochs_since_improvement: u32,
    pub epochs_since_decay: u32,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(2e-4, 0.5, 5, 20)
    }
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, plateau_patience: u32, stop_patience: u32) -> Self {
        Self {
            learning_rate: initial_lr,
            decay_factor,
            plateau_patience,
            stop_patience,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            epochs_since_decay: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> PlateauDecision {
        let improved = val_loss < self.best_loss;
        let mut decayed = false;
        if improved {
            self.best_loss = val_loss;
            self.epochs_since_improvement = 0;
            self.epochs_since_decay = 0;
        } else {
            self.epochs_since_improvement += 1;
            self.epochs_since_decay += 1;
            if self.epochs_since_decay >= self.plateau_patience {
                self.learning_rate *= self.decay_factor;
                self.epochs_since_decay = 0;
                decayed = true;
            }
        }
        PlateauDecision {
            learning_rate: self.learning_rate,
            decayed,
            improved,
            stop: self.epochs_since_improvement >= self.stop_patience,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut st = AdamState::<f64>::new(AdamConfig::default()).unwrap();
        let mut v = vec![1.0, -2.0];
        st.update(&mut [("w", &mut v, &[0.0, 0.0])]).unwrap();
        assert_eq!(v, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::<f64>::new(cfg).unwrap();
        let mut v = vec![0.0];
        st.update(&mut [("w", &mut v, &[1.0])]).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((v[0] - expected).abs() < 1e-15, "{}", v[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut st = AdamState::<f32>::new(AdamConfig::default()).unwrap();
        let mut a = vec![1.0f32];
        let mut b = vec![2.0f32];
        let err = st
            .update(&mut [("a", &mut a, &[0.5]), ("b", &mut b, &[f32::NAN])])
            .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("b".into()));
        assert_eq!((a[0], b[0], st.step), (1.0, 2.0, 0));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut st = AdamState::<f32>::new(AdamConfig::default()).unwrap();
            let mut v = vec![0.3f32, -0.7];
            for i in 0..5 {
                let g = [i as f32 * 0.1, -0.2];
                st.update(&mut [("w", &mut v, &g)]).unwrap();
            }
            (v, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut s = PlateauSchedule::default();
        for l in [1.0, 0.9, 0.8] {
            let d = s.update(l);
            assert_eq!(d.learning_rate, 2e-4);
            assert!(!d.stop);
        }
    }

    #[test]
    fn plateau_halves_after_five_flat_epochs() {
        let mut s = PlateauSchedule::default();
        s.update(1.0);
        for i in 0..5 {
            let d = s.update(1.0);
            assert_eq!(d.decayed, i == 4);
        }
        assert_eq!(s.learning_rate, 1e-4);
    }

    #[test]
    fn plateau_stops_after_twenty_flat_epochs() {
        let mut s = PlateauSchedule::default();
        s.update(1.0);
        let stops: Vec<bool> = (0..20).map(|_| s.update(2.0).stop).collect();
        assert!(stops[..19].iter().all(|&x| !x));
        assert!(stops[19]);
        // lr is non-increasing and was decayed four times
        assert!((s.learning_rate - 2e-4 / 16.0).abs() < 1e-18);
    }

    #[test]
    fn improvement_resets_counters() {
        let mut s = PlateauSchedule::default();
        s.update(1.0);
        for _ in 0..4 {
            s.update(1.5);
        }
        let d = s.update(0.5);
        assert!(d.improved);
        assert_eq!(s.epochs_since_improvement, 0);
        assert_eq!(s.learning_rate, 2e-4);
    }
}
