use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverse-square-root schedule with linear warm-up.
///
/// `lr(t) = factor * d_model^-0.5 * min(t^-0.5, t * warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub d_model: usize,
    pub warmup: usize,
    pub factor: f64,
}

impl NoamSchedule {
    pub fn new(d_model: usize, warmup: usize) -> Self {
        NoamSchedule {
            d_model,
            warmup,
            factor: 1.0,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.factor * (self.d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * w.powf(-1.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Constant(f64),
    Noam(NoamSchedule),
}

impl LearningRate {
    pub fn at(&self, step: u64) -> f64 {
        match self {
            LearningRate::Constant(lr) => *lr,
            LearningRate::Noam(s) => s.lr(step),
        }
    }
}

/// Adam with bias correction. Moments live per parameter, in the same order
/// as the store they were created for.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter for which `trainable` holds, with
    /// the learning rate for the new step count.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        schedule: &LearningRate,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<f64> {
        let lr = schedule.at(self.step + 1);
        self.step_with_lr(store, grads, lr, trainable)?;
        Ok(lr)
    }

    pub fn step_with_lr(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        lr: f64,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !trainable(id) {
                continue;
            }
            let g = grads.get(id);
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi.f64();
                let mn = self.beta1 * mi.f64() + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * vi.f64() + (1.0 - self.beta2) * gi * gi;
                *mi = T::lit(mn);
                *vi = T::lit(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = T::lit(w.f64() - update);
            }
        }
        Ok(())
    }
}

/// Guard for the step-count precondition of the schedule.
pub fn checked_lr(schedule: &NoamSchedule, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    Ok(schedule.lr(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knee_of_schedule() {
        let s = NoamSchedule::new(512, 6000);
        let expected = 512f64.powf(-0.5) * 6000f64.powf(-0.5);
        assert!((s.lr(6000) - expected).abs() < 1e-15);
    }

    #[test]
    fn schedule_rises_then_falls() {
        let s = NoamSchedule::new(512, 6000);
        for t in 1..6000 {
            assert!(s.lr(t + 1) > s.lr(t), "not increasing at {t}");
        }
        for t in 6000..20000 {
            assert!(s.lr(t + 1) < s.lr(t), "not decreasing at {t}");
        }
    }

    #[test]
    fn zero_step_is_an_error() {
        assert!(checked_lr(&NoamSchedule::new(8, 10), 0).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::vector(vec![0.0])).unwrap();
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(w).data_mut()[0] = 1.0;
        let schedule = LearningRate::Noam(NoamSchedule::new(512, 6000));
        let mut adam = Adam::new(&store);
        let lr = adam.step(&mut store, &grads, &schedule, |_| true).unwrap();
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let moved = store.get(w).data()[0];
        assert!(moved < 0.0);
        assert!((moved + lr / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(lr, NoamSchedule::new(512, 6000).lr(1));
    }

    #[test]
    fn untrainable_params_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::vector(vec![1.0])).unwrap();
        let b = store.add("b", Tensor::vector(vec![1.0])).unwrap();
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(a).data_mut()[0] = 1.0;
        grads.get_mut(b).data_mut()[0] = 1.0;
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, &LearningRate::Constant(0.1), |id| id == a)
            .unwrap();
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(b).data()[0], 1.0);
    }
}
