//! Parameter update rules and learning-rate schedules.
//!
//! Each optimizer keeps per-slot buffers; a slot is one trainable tensor
//! (latent weights, a bias, a batch-norm affine vector or a learnable `a`/`b`).
//! Buffers are created as zeros the first time a slot is stepped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Contribution `2 * lambda * w * psi'(v)` of the penalty `lambda * psi(v)^2`
/// to the gradient of the latent weight `v`.
pub fn decay_grad_on_psi(w: f64, psi_prime_v: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    2.0 * lambda * w * psi_prime_v
}

fn check_finite<T: Real>(grad: &Tensor<T>, name: &str) -> Result<()> {
    if grad.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            param: name.to_string(),
        })
    }
}

fn check_shapes<T: Real>(v: &Tensor<T>, grad: &Tensor<T>, name: &str) -> Result<()> {
    if v.shape() == grad.shape() {
        Ok(())
    } else {
        Err(Error::Dimension {
            layer: name.to_string(),
            detail: format!("gradient {:?} for parameter {:?}", grad.shape(), v.shape()),
        })
    }
}

fn slot<'a, T: Real>(
    buffers: &'a mut Vec<Option<Tensor<T>>>,
    index: usize,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    if buffers.len() <= index {
        buffers.resize_with(index + 1, || None);
    }
    buffers[index].get_or_insert_with(|| Tensor::zeros(shape))
}

#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight-decay coefficient. The decay gradient itself is injected by the
    /// compander before the step.
    pub lambda: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, lambda: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("weight decay {lambda}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            lambda,
            velocity: Vec::new(),
        })
    }

    /// `velocity <- momentum * velocity + grad; v <- v - lr * velocity`
    pub fn step(&mut self, slot_index: usize, name: &str, v: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        check_shapes(v, grad, name)?;
        check_finite(grad, name)?;
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.learning_rate);
        let vel = slot(&mut self.velocity, slot_index, v.shape());
        for ((x, b), &g) in v.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
            *b = mu * *b + g;
            *x = *x - lr * *b;
        }
        Ok(())
    }

    pub fn velocity(&self, slot_index: usize) -> Option<&Tensor<T>> {
        self.velocity.get(slot_index).and_then(|b| b.as_ref())
    }

    pub(crate) fn buffers(&self) -> &[Option<Tensor<T>>] {
        &self.velocity
    }

    pub(crate) fn set_buffers(&mut self, velocity: Vec<Option<Tensor<T>>>) {
        self.velocity = velocity;
    }
}

/// Per-slot Adam moments and step counters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate}")));
        }
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} = {beta} outside [0, 1)")));
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {epsilon} must be positive")));
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn with_defaults(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self, slot_index: usize) -> u64 {
        self.steps.get(slot_index).copied().unwrap_or(0)
    }

    pub fn moments(&self, slot_index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        let m = self.first.get(slot_index)?.as_ref()?;
        let s = self.second.get(slot_index)?.as_ref()?;
        Some((m, s))
    }

    /// Updates the moments from `grad` and returns the bias-corrected step
    /// `lr * m_hat / (sqrt(s_hat) + eps)` for every element.
    fn advance(&mut self, slot_index: usize, grad: &Tensor<T>) -> Vec<T> {
        if self.steps.len() <= slot_index {
            self.steps.resize(slot_index + 1, 0);
        }
        self.steps[slot_index] += 1;
        let t = self.steps[slot_index] as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);
        let m = slot(&mut self.first, slot_index, grad.shape());
        for (mi, &g) in m.data_mut().iter_mut().zip(grad.data()) {
            *mi = b1 * *mi + (one - b1) * g;
        }
        let s = slot(&mut self.second, slot_index, grad.shape());
        for (si, &g) in s.data_mut().iter_mut().zip(grad.data()) {
            *si = b2 * *si + (one - b2) * g * g;
        }
        let m = self.first[slot_index].as_ref().expect("first moment");
        let s = self.second[slot_index].as_ref().expect("second moment");
        m.data()
            .iter()
            .zip(s.data())
            .map(|(&mi, &si)| lr * (mi / c1) / ((si / c2).sqrt() + eps))
            .collect()
    }

    /// Standard Adam with bias correction.
    pub fn step(&mut self, slot_index: usize, name: &str, v: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        check_shapes(v, grad, name)?;
        check_finite(grad, name)?;
        let delta = self.advance(slot_index, grad);
        for (x, d) in v.data_mut().iter_mut().zip(delta) {
            *x = *x - d;
        }
        Ok(())
    }

    /// Modified adaptive step: the Adam step is computed from the raw
    /// gradient `dL/dpsi(v)` and then scaled elementwise by `psi'(v)`.
    pub fn modified_step(
        &mut self,
        slot_index: usize,
        name: &str,
        v: &mut Tensor<T>,
        grad_psi: &Tensor<T>,
        psi_prime_v: &Tensor<T>,
    ) -> Result<()> {
        check_shapes(v, grad_psi, name)?;
        check_shapes(v, psi_prime_v, name)?;
        check_finite(grad_psi, name)?;
        let delta = self.advance(slot_index, grad_psi);
        for ((x, d), &p) in v.data_mut().iter_mut().zip(delta).zip(psi_prime_v.data()) {
            *x = *x - d * p;
        }
        Ok(())
    }

    pub(crate) fn buffers(&self) -> (&[Option<Tensor<T>>], &[Option<Tensor<T>>], &[u64]) {
        (&self.first, &self.second, &self.steps)
    }

    pub(crate) fn set_buffers(
        &mut self,
        first: Vec<Option<Tensor<T>>>,
        second: Vec<Option<Tensor<T>>>,
        steps: Vec<u64>,
    ) {
        self.first = first;
        self.second = second;
        self.steps = steps;
    }
}

/// Step decay: the rate is multiplied by `factor` at every milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "unit_factor")]
    pub factor: f64,
}

fn unit_factor() -> f64 {
    1.0
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::constant()
    }
}

impl LrSchedule {
    pub fn new(milestones: Vec<usize>, factor: f64) -> Result<Self> {
        let s = LrSchedule { milestones, factor };
        s.validate()?;
        Ok(s)
    }

    pub fn constant() -> Self {
        LrSchedule {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor {} outside (0, 1]",
                self.factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        Ok(())
    }
}

/// `base_lr * factor^k` with `k` the number of milestones `<= epoch`.
pub fn lr_at(schedule: &LrSchedule, base_lr: f64, epoch: usize) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * schedule.factor.powi(passed as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    ModifiedAdam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. }
            | OptimizerConfig::Adam { lr, .. }
            | OptimizerConfig::ModifiedAdam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, new_lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd {
                lr: new_lr,
                momentum,
            },
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::Adam {
                lr: new_lr,
                beta1,
                beta2,
                eps,
            },
            OptimizerConfig::ModifiedAdam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::ModifiedAdam {
                lr: new_lr,
                beta1,
                beta2,
                eps,
            },
        }
    }

    pub fn build<T: Real>(&self, lambda: f64) -> Result<Optimizer<T>> {
        Ok(match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                Optimizer::Sgd(SgdState::new(lr, momentum, lambda)?)
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Optimizer::Adam(AdamState::new(lr, beta1, beta2, eps)?),
            OptimizerConfig::ModifiedAdam {
                lr,
                beta1,
                beta2,
                eps,
            } => Optimizer::ModifiedAdam(AdamState::new(lr, beta1, beta2, eps)?),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
    ModifiedAdam(AdamState<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(s) => s.learning_rate = lr,
            Optimizer::Adam(s) | Optimizer::ModifiedAdam(s) => s.learning_rate = lr,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd(s) => s.learning_rate,
            Optimizer::Adam(s) | Optimizer::ModifiedAdam(s) => s.learning_rate,
        }
    }

    pub fn is_modified(&self) -> bool {
        matches!(self, Optimizer::ModifiedAdam(_))
    }

    /// Plain step on `grad_v` (the modified optimizer falls back to Adam).
    pub fn step(&mut self, slot_index: usize, name: &str, v: &mut Tensor<T>, grad_v: &Tensor<T>) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(slot_index, name, v, grad_v),
            Optimizer::Adam(s) | Optimizer::ModifiedAdam(s) => s.step(slot_index, name, v, grad_v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Tensor<f64> {
        Tensor::scalar(x)
    }

    /// Straight-line scalar Adam used as the reference.
    fn reference_adam(g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, v0: f64) -> Vec<f64> {
        let (mut m, mut sq, mut v) = (0.0, 0.0, v0);
        let mut out = Vec::new();
        for (t, &gt) in g.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * gt;
            sq = b2 * sq + (1.0 - b2) * gt * gt;
            let mh = m / (1.0 - b1.powi(t));
            let sh = sq / (1.0 - b2.powi(t));
            v -= lr * mh / (sh.sqrt() + eps);
            out.push(v);
        }
        out
    }

    #[test]
    fn decay_gradient_examples() {
        assert_eq!(decay_grad_on_psi(0.0, 0.7, 0.1), 0.0);
        assert_eq!(decay_grad_on_psi(0.3, 0.7, 0.0), 0.0);
        let w = 1f64.atan();
        let got = decay_grad_on_psi(w, 0.5, 0.1);
        assert!((got - std::f64::consts::PI / 40.0).abs() < 1e-15);
        let pen = |v: f64| 0.1 * v.atan().powi(2);
        let h = 1e-6;
        let fd = (pen(1.0 + h) - pen(1.0 - h)) / (2.0 * h);
        assert!((got - fd).abs() / fd < 1e-8);
    }

    #[test]
    fn sgd_plain_step() {
        let mut st = SgdState::new(0.1, 0.0, 0.0).unwrap();
        let mut v = s(1.0);
        st.step(0, "p", &mut v, &s(2.0)).unwrap();
        assert!((v.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_stationary() {
        let mut st = SgdState::new(0.1, 0.9, 0.0).unwrap();
        let mut v = s(0.37);
        for _ in 0..10 {
            st.step(0, "p", &mut v, &s(0.0)).unwrap();
        }
        assert_eq!(v.data()[0], 0.37);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut st = SgdState::new(lr, 0.9, 0.0).unwrap();
        let mut v = s(1.0);
        st.step(0, "p", &mut v, &s(g)).unwrap();
        assert!((v.data()[0] - (1.0 - lr * g)).abs() < 1e-15);
        st.step(0, "p", &mut v, &s(g)).unwrap();
        assert!((v.data()[0] - (1.0 - lr * g - lr * 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut st = SgdState::new(0.1, 0.0, 0.0).unwrap();
        let mut v = s(1.0);
        match st.step(0, "layer0.weight", &mut v, &s(f64::NAN)) {
            Err(Error::Divergence { param }) => assert_eq!(param, "layer0.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(1e-3, 0.9, 0.999, 1e-8).unwrap();
        let mut v = s(0.0);
        st.step(0, "p", &mut v, &s(0.2)).unwrap();
        let want = reference_adam(&[0.2], 1e-3, 0.9, 0.999, 1e-8, 0.0)[0];
        assert!((v.data()[0] - want).abs() < 1e-18);
        assert!((v.data()[0] + 9.999_999_5e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state() {
        let mut st = AdamState::with_defaults(1e-3).unwrap();
        let mut v = s(0.4);
        st.step(0, "p", &mut v, &s(0.0)).unwrap();
        assert_eq!(v.data()[0], 0.4);
        assert_eq!(st.step_count(0), 1);
    }

    #[test]
    fn adam_trajectory_matches_reference() {
        let g = vec![0.3; 100];
        let want = reference_adam(&g, 1e-2, 0.9, 0.999, 1e-8, 1.0);
        let mut st = AdamState::new(1e-2, 0.9, 0.999, 1e-8).unwrap();
        let mut v = s(1.0);
        for (i, &gi) in g.iter().enumerate() {
            st.step(0, "p", &mut v, &s(gi)).unwrap();
            assert!((v.data()[0] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn modified_adam_identity_reduction() {
        let mut a = AdamState::with_defaults(1e-3).unwrap();
        let mut b = AdamState::with_defaults(1e-3).unwrap();
        let (mut va, mut vb) = (s(0.5), s(0.5));
        for i in 0..100 {
            let g = s(((i * 37) % 11) as f64 / 10.0 - 0.5);
            a.step(0, "p", &mut va, &g).unwrap();
            b.modified_step(0, "p", &mut vb, &g, &s(1.0)).unwrap();
            assert!((va.data()[0] - vb.data()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn modified_adam_annihilated_step() {
        let mut st = AdamState::with_defaults(1e-3).unwrap();
        let mut v = s(0.5);
        st.modified_step(0, "p", &mut v, &s(0.3), &s(0.0)).unwrap();
        assert_eq!(v.data()[0], 0.5);
        let (m, _) = st.moments(0).unwrap();
        assert!(m.data()[0] != 0.0);
    }

    #[test]
    fn modified_adam_scaled_first_step() {
        let mut st = AdamState::with_defaults(1e-3).unwrap();
        let mut v = s(0.0);
        st.modified_step(0, "p", &mut v, &s(0.2), &s(0.5)).unwrap();
        let reference = reference_adam(&[0.2], 1e-3, 0.9, 0.999, 1e-8, 0.0)[0];
        assert!((v.data()[0] - 0.5 * reference).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let sch = LrSchedule::new(vec![60, 120, 160], 0.2).unwrap();
        assert_eq!(lr_at(&sch, 0.1, 59), 0.1);
        assert!((lr_at(&sch, 0.1, 120) - 0.1 * 0.04).abs() < 1e-15);
        assert_eq!(lr_at(&LrSchedule::constant(), 0.1, 500), 0.1);
        assert!(LrSchedule::new(vec![5, 5], 0.5).is_err());
        assert!(LrSchedule::new(vec![5], 1.5).is_err());
    }
}
