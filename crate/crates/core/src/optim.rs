//! Adam with per-tensor moments.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Gradients, ParamKey};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<ParamKey, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<ParamKey, Moments<T>> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<ParamKey, Moments<T>>) {
        self.state = state;
    }

    /// Puts back the moments of one tensor; `None` forgets them.
    pub fn restore_moments(&mut self, key: ParamKey, moments: Option<Moments<T>>) {
        match moments {
            Some(m) => {
                self.state.insert(key, m);
            }
            None => {
                self.state.remove(&key);
            }
        }
    }

    /// Updates every tensor of `stores` that has a gradient; tensors without
    /// one are left alone, moments included. Gradients for keys outside
    /// `stores` are ignored.
    pub fn step(
        &mut self,
        stores: &mut [&mut ParamStore<T>],
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        let (b1, b2) = (self.beta1, self.beta2);
        for store in stores.iter_mut() {
            for idx in 0..store.len() {
                let key = store.key(idx);
                let Some(grad) = grads.get(key) else { continue };
                let param = &mut store.tensors_mut()[idx];
                if grad.len() != param.len() {
                    return Err(Error::Shape(alloc::format!(
                        "gradient for {key:?} has {} values",
                        grad.len()
                    )));
                }
                let n = param.len();
                let st = self.state.entry(key).or_insert_with(|| Moments {
                    step: 0,
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
                st.step += 1;
                let bc1 = 1.0 - b1.powi(st.step as i32);
                let bc2 = 1.0 - b2.powi(st.step as i32);
                let step_size = T::of_f64(lr / bc1);
                let (b1t, b2t) = (T::of_f64(b1), T::of_f64(b2));
                let (one_b1, one_b2) = (T::of_f64(1.0 - b1), T::of_f64(1.0 - b2));
                let rbc2 = T::of_f64(1.0 / bc2.sqrt());
                let eps = T::of_f64(self.eps);
                for (((p, &gr), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(st.m.iter_mut())
                    .zip(st.v.iter_mut())
                {
                    *m = b1t * *m + one_b1 * gr;
                    *v = b2t * *v + one_b2 * gr * gr;
                    *p -= step_size * *m / (v.sqrt() * rbc2 + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::<f64>::new(0);
        s.push("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let w = b.var(0);
        let l = g.mean(w);
        let grads = g.backward(l).unwrap();
        let mut adam = Adam::new(0.0, 0.99, 1e-8);
        adam.step(&mut [&mut s], &grads, 0.1).unwrap();
        // Adam's first step is lr·sign(grad) up to eps.
        assert!((s.get(0).data()[0] - 0.9).abs() < 1e-6);
        assert!((s.get(0).data()[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::<f64>::new(0);
        s.push("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let before = s.clone();
        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let l = g.mean(b.var(0));
        let l = g.weighted_sum(&[(l, 0.0)]).unwrap();
        let grads = g.backward(l).unwrap();
        let mut adam = Adam::new(0.0, 0.99, 1e-8);
        adam.step(&mut [&mut s], &grads, 0.1).unwrap();
        assert_eq!(s, before);
    }
}
