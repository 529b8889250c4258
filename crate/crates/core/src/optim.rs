use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyper-parameters of the bias-corrected adaptive moment optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment state for one flat parameter vector.
#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam over a list of tensors; moments are allocated lazily per slot.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    slots: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, slots: usize) -> Self {
        Self {
            config,
            step: 0,
            slots: (0..slots).map(|_| None).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Advances the step counter; call once per optimizer iteration before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update of slot `slot` with learning-rate multiplier `lr_mult`.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T], lr_mult: f64) {
        debug_assert!(self.step > 0, "begin_step not called");
        let c = &self.config;
        let st = self.slots[slot].get_or_insert_with(|| Moments {
            m: alloc::vec![T::zero(); param.len()],
            v: alloc::vec![T::zero(); param.len()],
        });
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr = T::lit(c.lr * lr_mult);
        let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(c.eps));
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }

    pub fn update_tensor(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>, lr_mult: f64) {
        self.update(slot, param.data_mut(), grad.data(), lr_mult);
    }

    /// One step over a whole parameter set; `None` gradients leave their tensor untouched.
    pub fn step_params(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr_mult: impl Fn(&str) -> f64) {
        self.begin_step();
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let mult = lr_mult(params.name(i));
                self.update_tensor(i, params.tensor_mut(i), g, mult);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::<f64>::new(AdamConfig::with_lr(0.1), 1);
        let mut x = [3.0, -2.0];
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            opt.begin_step();
            opt.update(0, &mut x, &g, 1.0);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut opt = Adam::<f32>::new(AdamConfig::default(), 1);
        let mut x = [0.25f32, -1.5];
        for _ in 0..10 {
            opt.begin_step();
            opt.update(0, &mut x, &[0.0, 0.0], 1.0);
        }
        assert_eq!(x, [0.25, -1.5]);
    }
}
