//! Named parameter storage and the per-forward binding of parameters to a
//! tape.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::BatchStats;
use crate::tensor::{Tape, Tensor, Var};

/// Role of a stored tensor, derived from its name suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn from_name(name: &str) -> Option<Self> {
        let suffix = name.rsplit('.').next()?;
        Some(match suffix {
            "weight" => ParamKind::ConvWeight,
            "bias" => ParamKind::Bias,
            "scale" => ParamKind::NormScale,
            "shift" => ParamKind::NormShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }

    /// Updated by the optimizer (running statistics are not).
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to convolution weights only.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }
}

/// Sorted map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if ParamKind::from_name(&name).is_none() {
            return Err(Error::contract(format!(
                "parameter `{}` has no known role suffix",
                name
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!(
                "parameter `{}` registered twice",
                name
            )));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{}`", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count of optimizer-updated tensors.
    pub fn learnable_count(&self) -> usize {
        self.iter()
            .filter(|(name, _)| ParamKind::from_name(name).is_some_and(ParamKind::learnable))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Gradients of learnable parameters by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Whether a forward pass trains (batch statistics, gradients) or infers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds parameters to a tape for one forward pass.
///
/// Each parameter becomes a single leaf the first time it is requested.
/// Normalization layers in training mode report their batch statistics here
/// instead of writing running estimates, so the forward pass never mutates
/// the store.
pub struct Session<'t, 'p> {
    pub tape: &'t mut Tape,
    params: &'p ParamStore,
    mode: Mode,
    bound: HashMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'t, 'p> Session<'t, 'p> {
    pub fn new(tape: &'t mut Tape, params: &'p ParamStore, mode: Mode) -> Self {
        Session {
            tape,
            params,
            mode,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for a stored parameter; tracked for gradients in training mode.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.require(name)?.clone();
        let v = self.tape.leaf(value, self.mode == Mode::Train);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Substitutes an existing tape value for a named parameter, e.g. to
    /// differentiate with respect to it outside training mode.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let stored = self.params.require(name)?;
        if stored.shape() != self.tape.shape(var) {
            return Err(Error::shape(
                "bind",
                format!(
                    "`{}` is {:?}, got {:?}",
                    name,
                    stored.shape(),
                    self.tape.shape(var)
                ),
            ));
        }
        self.bound.insert(name.to_string(), var);
        Ok(())
    }

    pub fn record_stats(&mut self, norm: &str, stats: BatchStats) {
        self.stats.push((norm.to_string(), stats));
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    /// Gradients of every bound learnable parameter after `tape.backward`.
    pub fn gradients(&self) -> Gradients {
        self.bound
            .iter()
            .filter(|(name, _)| ParamKind::from_name(name).is_some_and(ParamKind::learnable))
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_unknown_roles() {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::zeros([1])).unwrap();
        assert!(store.insert("a.weight", Tensor::zeros([1])).is_err());
        assert!(store.insert("a.gamma", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn kinds_from_suffix() {
        assert_eq!(
            ParamKind::from_name("stage1.block0.conv1.weight"),
            Some(ParamKind::ConvWeight)
        );
        assert!(ParamKind::from_name("x.running_var").is_some_and(|k| !k.learnable()));
        assert!(!ParamKind::NormScale.decays());
    }

    #[test]
    fn session_binds_each_parameter_once() {
        let mut store = ParamStore::new();
        store.insert("p.weight", Tensor::ones([2])).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Train);
        let a = s.param("p.weight").unwrap();
        let b = s.param("p.weight").unwrap();
        assert_eq!(a, b);
        let y = s.tape.mul(a, b).unwrap();
        let loss = s.tape.sum(y).unwrap();
        s.tape.backward(loss).unwrap();
        let grads = s.gradients();
        assert_eq!(grads["p.weight"].data(), &[2.0, 2.0]);
    }
}
