use std::collections::BTreeMap;

use rand::Rng;

use super::{AutodiffError, Tensor};

/// Named learnable parameters, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds a `fan_in × fan_out` weight (uniform Glorot init) and a zero bias
    /// under `{prefix}.w` / `{prefix}.b`.
    pub fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.insert(
            format!("{prefix}.w"),
            Tensor {
                shape: vec![fan_in, fan_out],
                data: w,
                grad: None,
            },
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, limit: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(
            name,
            Tensor {
                shape,
                data,
                grad: None,
            },
        );
    }

    /// Copies `data` into the named tensor, checking the shape.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<(), AutodiffError> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| AutodiffError::Contract(format!("unknown parameter `{name}`")))?;
        if t.data.len() != data.len() {
            return Err(AutodiffError::Dimension(format!(
                "parameter `{name}` has {} values, got {}",
                t.data.len(),
                data.len()
            )));
        }
        t.data.copy_from_slice(data);
        Ok(())
    }
}
