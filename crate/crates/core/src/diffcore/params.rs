use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    /// `None` until a backward pass reaches this parameter.
    pub grad: Option<Vec<f64>>,
}

/// Owns every trainable tensor of a model, tagged with a named group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// `<group>.<name>` as used in checkpoints.
    pub fn qualified_name(&self, id: ParamId) -> String {
        let p = &self.params[id.0];
        format!("{}.{}", p.group, p.name)
    }

    pub fn find(&self, qualified: &str) -> Option<ParamId> {
        self.ids().find(|&id| self.qualified_name(id) == qualified)
    }

    /// Ids of every parameter in `group`, in registration order.
    pub fn group(&self, group: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].group == group)
            .collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for p in &self.params {
            if !names.contains(&p.group) {
                names.push(p.group.clone());
            }
        }
        names
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for parameter {} of shape {:?}",
                grad.len(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].grad = None;
        }
    }

    pub fn zero_all_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Hash over the exact bit patterns of the listed parameter values.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut hasher = DefaultHasher::new();
        for id in ids {
            let p = &self.params[id.0];
            p.name.hash(&mut hasher);
            p.value.shape().hash(&mut hasher);
            for v in p.value.data() {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    pub fn group_fingerprint(&self, group: &str) -> u64 {
        self.fingerprint(&self.group(group))
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.value.shape() != src.value.shape() || dst.name != src.name {
                return Err(Error::Contract(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
