use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameter partition: recognition parameters (theta) or gaze-model
/// parameters (phi).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Theta,
    Phi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S = f64> {
    pub group: Group,
    pub value: Tensor<S>,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S = f64> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar entries, optionally restricted to one group.
    pub fn numel(&self, group: Option<Group>) -> usize {
        self.iter()
            .filter(|(_, p)| group.is_none_or(|g| p.group == g))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn zero_grads(&self) -> ParamGrads<S> {
        ParamGrads {
            grads: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), (p.group, Tensor::zeros(p.value.shape()))))
                .collect(),
        }
    }

    /// In-place `self += scale * grads` for every parameter the gradient map names.
    pub fn axpy(&mut self, scale: S, grads: &ParamGrads<S>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self.value_mut(name)?;
            for (a, &b) in p.data_mut().iter_mut().zip(g.data()) {
                *a = *a + scale * b;
            }
        }
        Ok(())
    }
}

/// Gradient (or any per-parameter tensor map) aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<S = f64> {
    grads: BTreeMap<String, (Group, Tensor<S>)>,
}

impl<S: Scalar> ParamGrads<S> {
    pub(crate) fn from_map(grads: BTreeMap<String, (Group, Tensor<S>)>) -> Self {
        ParamGrads { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name).map(|(_, t)| t)
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.grads.get(name).map(|(g, _)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.grads.iter().map(|(k, (_, t))| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only the parameters of `group`.
    pub fn restrict(&self, group: Group) -> Self {
        ParamGrads {
            grads: self
                .grads
                .iter()
                .filter(|(_, (g, _))| *g == group)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Zeroes every entry belonging to `group`.
    pub fn zero_group(&mut self, group: Group) {
        for (g, t) in self.grads.values_mut() {
            if *g == group {
                t.data_mut().iter_mut().for_each(|v| *v = S::zero());
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<S>) -> Result<()> {
        for (name, (_, t)) in self.grads.iter_mut() {
            let o = other
                .grads
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient for `{name}` missing")))?;
            if o.1.shape() != t.shape() {
                return Err(Error::shape("grad-add", format!("`{name}`")));
            }
            t.add_assign(&o.1);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for (_, t) in self.grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    /// Entries concatenated in name order.
    pub fn flatten(&self) -> Vec<S> {
        self.grads
            .values()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamGrads::flatten`] using `self` as the layout template.
    pub fn unflatten_like(&self, flat: &[S]) -> Result<Self> {
        let total: usize = self.grads.values().map(|(_, t)| t.len()).sum();
        if total != flat.len() {
            return Err(Error::shape(
                "unflatten",
                format!("layout has {total} entries, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        let grads = self
            .grads
            .iter()
            .map(|(k, (g, t))| {
                let n = t.len();
                let data = flat[offset..offset + n].to_vec();
                offset += n;
                (k.clone(), (*g, Tensor::from_parts(t.shape().to_vec(), data)))
            })
            .collect();
        Ok(ParamGrads { grads })
    }

    pub fn l2_norm(&self) -> S {
        self.grads
            .values()
            .map(|(_, t)| t.sq_norm())
            .sum::<S>()
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.grads
            .values()
            .flat_map(|(_, t)| t.data().iter())
            .fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_zero(&self) -> bool {
        self.grads
            .values()
            .all(|(_, t)| t.data().iter().all(|v| *v == S::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Group::Theta, Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Group::Phi, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn flatten_round_trip_and_restrict() {
        let mut p = ParamSet::<f64>::new();
        p.insert("b", Group::Phi, Tensor::zeros(&[2])).unwrap();
        p.insert("a", Group::Theta, Tensor::zeros(&[3])).unwrap();
        let g = p.zero_grads();
        let flat: Vec<f64> = (0..5).map(f64::from).collect();
        let back = g.unflatten_like(&flat).unwrap();
        assert_eq!(back.flatten(), flat);
        assert_eq!(back.get("a").unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(back.restrict(Group::Phi).flatten(), vec![3.0, 4.0]);
    }
}
