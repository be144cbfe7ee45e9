use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// Per-parameter moment estimates for [`Adam`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn step_with(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::LengthMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(TensorError::LengthMismatch {
                    expected: p.len(),
                    actual: g.len(),
                });
            }
        }
        let st = &mut self.state;
        if st.first_moment.is_empty() {
            st.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            st.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if st.first_moment.len() != params.len()
            || st.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(TensorError::LengthMismatch {
                expected: st.first_moment.len(),
                actual: params.len(),
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(st.first_moment.iter_mut().zip(st.second_moment.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Updates every tensor of `store` from its stored gradient. Tensors
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let grads: Vec<Vec<f32>> = store
            .tensors()
            .iter()
            .map(|t| t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [f32]> = store.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
        self.step_with(&mut params, &grad_refs)
    }
}
