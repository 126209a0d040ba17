//! Adam optimizer with bias correction.

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::tensor::{fl, Scalar};

/// Optimizer state for one [`ParamSet`]: step count plus first and second
/// moment estimates per parameter, in entry order.
#[derive(Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let first_moment = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let second_moment = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            step: 0,
            learning_rate: fl(learning_rate),
            beta1: fl(beta1),
            beta2: fl(beta2),
            epsilon: fl(epsilon),
            first_moment,
            second_moment,
        }
    }

    /// One update over all parameters. `grads` is aligned with the param
    /// set; `None` entries (parameters unreached by backward) are treated
    /// as zero gradient: their moments decay but the step still counts.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::InvalidArgument(format!(
                "adam_step: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.epsilon);

        for i in 0..grads.len() {
            let g = grads[i].as_deref();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = params.tensor_at_mut(i).data_mut();
            for j in 0..data.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Restore moments from checkpointed tensors, in entry order.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        if first.len() != self.first_moment.len() || second.len() != self.second_moment.len() {
            return Err(CoreError::InvalidArgument(
                "adam restore: moment count does not match parameter count".into(),
            ));
        }
        for (cur, new) in self.first_moment.iter().zip(&first) {
            if cur.len() != new.len() {
                return Err(CoreError::InvalidArgument(
                    "adam restore: moment length mismatch".into(),
                ));
            }
        }
        self.step = step;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }
}
