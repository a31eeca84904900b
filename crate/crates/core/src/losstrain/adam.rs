use crate::diffcore::{DiffError, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, v)| Tensor::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one bias-corrected update from the gradients held in
    /// `params`. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), DiffError> {
        if params.len() != self.first.len() {
            return Err(DiffError::InvalidArgument("optimizer state belongs to another store"));
        }
        for id in params.ids() {
            if !params.grad(id).is_finite() {
                return Err(DiffError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = params.grad(id).clone();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let w = params.value_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(vec![1.0, -2.0, 0.5])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut s = store();
        let before = s.values_snapshot();
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s).unwrap();
        assert_eq!(s.values_snapshot(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut s = store();
        let id = s.find("w").unwrap();
        *s.grad_mut(id) = Tensor::row_vector(vec![3.0, -0.25, 1e-3]);
        let lr = 0.01;
        let mut adam = AdamState::new(&s, lr);
        let before = s.value(id).clone();
        adam.step(&mut s).unwrap();
        for (k, g) in [3.0f64, -0.25, 1e-3].into_iter().enumerate() {
            let moved = s.value(id).data()[k] - before.data()[k];
            // m_hat = g, v_hat = g^2 at t = 1.
            let expect = -lr * g / (g.abs() + EPSILON);
            assert!((moved - expect).abs() <= 1e-15, "{moved} vs {expect}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let mut s = store();
        let id = s.find("w").unwrap();
        s.grad_mut(id).data_mut()[1] = f64::NAN;
        let before = s.values_snapshot();
        let mut adam = AdamState::new(&s, 0.1);
        assert_eq!(adam.step(&mut s), Err(DiffError::NonFiniteGradient("w".into())));
        assert_eq!(s.values_snapshot(), before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = store();
            let id = s.find("w").unwrap();
            let mut adam = AdamState::new(&s, 0.05);
            for k in 0..10 {
                *s.grad_mut(id) = Tensor::row_vector(vec![k as f64 * 0.3, -1.0, 0.7]);
                adam.step(&mut s).unwrap();
            }
            s.values_snapshot()
        };
        assert_eq!(run(), run());
    }
}
