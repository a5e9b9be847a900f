use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients to at most this global L2 norm before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

pub struct Adam<T> {
    config: AdamConfig,
    state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(AutodiffError::InvalidArgument(format!("learning rate {} must be > 0", config.lr)));
        }
        let zeros = |_| params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            config,
            state: AdamState {
                m: zeros(()),
                v: zeros(()),
                step: 0,
            },
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// One bias-corrected Adam update from the gradients held in `params`.
    /// A non-finite gradient anywhere skips the whole step.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> StepOutcome {
        assert_eq!(params.len(), self.state.m.len(), "parameter set changed under the optimizer");
        if params.iter().any(|(_, p)| !p.grad.is_finite()) {
            log::warn!("non-finite gradient at step {}; update skipped", self.state.step + 1);
            return StepOutcome::SkippedNonFinite;
        }
        if let Some(max) = self.config.max_grad_norm {
            let norm = params.grad_norm();
            if norm > max {
                params.scale_grads(T::from_f64_lossy(max / norm));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s.params_mut()[id.index()].grad = Tensor::from_f64(&[1], &[g]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(0.7, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        assert_eq!(adam.step(&mut s), StepOutcome::Applied);
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.7]);
        assert_eq!(adam.state().step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut s = store(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s).unwrap();
        adam.step(&mut s);
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(s.id("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 0.0001);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut s = store(1.0, f64::NAN);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        assert_eq!(adam.step(&mut s), StepOutcome::SkippedNonFinite);
        assert_eq!(adam.state().step, 0);
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let s = store(0.0, 0.0);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg, &s).is_err());
    }
}
