use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Updated by the optimizer (running statistics are not).
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Infers the kind from the naming convention used by the model builder.
    pub fn from_name(name: &str) -> Option<Self> {
        let suffix = name.rsplit_once('.').map(|(_, s)| s)?;
        let parent = name.rsplit_once('.')?.0.rsplit_once('.').map_or(name, |(_, p)| p);
        match (parent, suffix) {
            ("conv", "weight") => Some(ParamKind::ConvWeight),
            ("conv", "bias") => Some(ParamKind::ConvBias),
            ("bn", "gamma") => Some(ParamKind::BnGamma),
            ("bn", "beta") => Some(ParamKind::BnBeta),
            ("bn", "running_mean") => Some(ParamKind::BnRunningMean),
            ("bn", "running_var") => Some(ParamKind::BnRunningVar),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Ordered, uniquely named collection of model tensors.
///
/// Iteration order is insertion order, which the model builder keeps fixed.
/// Gradients and optimizer velocities use the same type restricted to learnable entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        self.entries.insert(name, Param { kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Zero tensors for every learnable entry, in the same order.
    pub fn zeros_like_learnable(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(_, p)| p.kind.is_learnable())
            .map(|(k, p)| {
                (
                    k.clone(),
                    Param {
                        kind: p.kind,
                        tensor: Tensor::zeros(p.tensor.shape()),
                    },
                )
            })
            .collect();
        ParamSet { entries }
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Adds `g` into the entry `name`, which must exist with the same shape.
    pub fn accumulate(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        self.get_mut(name)?.add_assign(g)
    }

    /// Replaces the tensor stored under `name`, keeping its kind and position.
    pub fn replace(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(shape_err!(
                "replacing '{name}': shape {} differs from {}",
                t.shape(),
                slot.shape()
            ));
        }
        *slot = t;
        Ok(())
    }

    /// True when both sets have identical names, kinds, order and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.kind == b.kind && a.tensor.shape() == b.tensor.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            kind: p.kind,
                            tensor: p.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every tensor and name.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.kind == b.kind && a.tensor.bit_eq(&b.tensor))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn kinds_from_names() {
        assert_eq!(ParamKind::from_name("enc.arm0.block1.conv.weight"), Some(ParamKind::ConvWeight));
        assert_eq!(ParamKind::from_name("head.arm1.conv.bias"), Some(ParamKind::ConvBias));
        assert_eq!(ParamKind::from_name("dec.arm0.block0.bn.running_var"), Some(ParamKind::BnRunningVar));
        assert_eq!(ParamKind::from_name("optim.iteration"), None);
    }

    #[test]
    fn duplicate_names_are_rejected_and_order_is_kept() {
        let s = Shape4::new(1, 1, 1, 1).unwrap();
        let mut p = ParamSet::<f64>::new();
        p.insert("b", ParamKind::ConvBias, Tensor::new(s, 1.0)).unwrap();
        p.insert("a", ParamKind::BnRunningMean, Tensor::new(s, 2.0)).unwrap();
        assert!(p.insert("b", ParamKind::ConvBias, Tensor::new(s, 1.0)).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        let g = p.zeros_like_learnable();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(p.learnable_count(), 1);
    }
}
