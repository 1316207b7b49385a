use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            learning_rate,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    /// One update from the gradients currently held by `store`. Parameters
    /// without a gradient are treated as having a zero gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (id, name, t) in store.iter() {
            if self.first_moment[id.index()].len() != t.numel() {
                return Err(Error::dimension(
                    format!("adam moments for `{name}`"),
                    t.shape().to_vec(),
                    vec![self.first_moment[id.index()].len()],
                ));
            }
            if let Some(g) = t.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: name.to_string(), index });
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                // zero gradient: moments decay, parameter moves only if they were nonzero
                let m = &mut self.first_moment[id.index()];
                let v = &mut self.second_moment[id.index()];
                if m.iter().all(|&x| x == 0.0) {
                    continue;
                }
                m.iter_mut().for_each(|x| *x *= self.beta1);
                v.iter_mut().for_each(|x| *x *= self.beta2);
                let data = tensor.data_mut();
                for ((p, m), v) in data.iter_mut().zip(m.iter()).zip(v.iter()) {
                    *p -= self.learning_rate * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                }
                continue;
            };
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let data = tensor.data_mut();
            for (((p, g), m), v) in data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("p", Tensor::new(&[n], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(vec![1.0, -2.0]);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let mut adam = AdamState::new(&s, 1e-4);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(vec![0.5]);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        let mut adam = AdamState::new(&s, 1e-4);
        adam.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1  =>  Δ = lr / (1 + ε)
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store_with(vec![0.0, 0.0]);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, f64::NAN]);
        let mut adam = AdamState::new(&s, 1e-3);
        match adam.step(&mut s) {
            Err(Error::NonFiniteGradient { name, index }) => {
                assert_eq!(name, "p");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut s = store_with(vec![0.3, -0.7, 1.1]);
            let id = s.id("p").unwrap();
            let mut adam = AdamState::new(&s, 1e-2);
            for k in 0..50 {
                s.zero_grads();
                let g: Vec<f64> = s.get(id).data().iter().map(|x| 2.0 * x + k as f64 * 1e-3).collect();
                s.get_mut(id).accumulate_grad(&g);
                adam.step(&mut s).unwrap();
            }
            s.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
