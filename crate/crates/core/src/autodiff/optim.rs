use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore};

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params`. Every parameter must carry a
    /// gradient; call [`ParamStore::zero_grad`] afterwards.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), AutodiffError> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(AutodiffError::Contract(format!(
                "adamw_step: parameter `{name}` has no gradient"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            let n = p.data.len();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(AutodiffError::Dimension(format!(
                    "adamw_step: moment size mismatch for `{name}`"
                )));
            }
            let g = p.grad.as_ref().expect("checked above");
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
