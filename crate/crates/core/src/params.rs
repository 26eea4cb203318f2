//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::recalib::GateControl;
use crate::tensor::{Element, Tensor};

/// Whether a stored tensor is optimized or is a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    RunningStat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// All tensors of a model, addressed by hierarchical dotted names
/// (`stage2.block0.conv1.weight`). Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
    }

    /// Number of scalar values, optionally including running statistics.
    pub fn num_values(&self, include_running_stats: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| include_running_stats || e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }
}

/// Weight initialization source used while building layers.
#[derive(Debug)]
pub enum Init {
    Random(ChaCha8Rng),
    /// All-zero tensors; for shape-only uses such as parameter counting.
    Zeros,
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        Init::Random(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        match self {
            Init::Random(rng) => Tensor::randn(shape.to_vec(), std, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
        match self {
            Init::Random(rng) => Tensor::uniform(shape.to_vec(), -bound, bound, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// How layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Like `Eval`, but recalibration layers use their folded affine map.
    Folded,
}

/// State of one forward pass: the tape, lazily bound parameters, pending
/// running-statistic updates and gate instrumentation.
pub struct Session<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    pub gates: GateControl<T>,
}

impl<'s, T: Element> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            stat_updates: Vec::new(),
            gates: GateControl::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Tape handle of a stored tensor, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let grad = self.track_grads && entry.kind == ParamKind::Trainable;
        let v = self.tape.leaf(entry.value.clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    pub(crate) fn push_stat_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    /// Running-statistic updates produced by train-mode normalization, in
    /// execution order.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = grads.get(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::zeros([2]).unwrap(), ParamKind::Trainable).unwrap();
        assert!(store.add("a.weight", Tensor::zeros([2]).unwrap(), ParamKind::Trainable).is_err());
        assert_eq!(store.id("a.weight"), Some(ParamId(0)));
    }

    #[test]
    fn value_counts_split_by_kind() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros([3, 2]).unwrap(), ParamKind::Trainable).unwrap();
        store.add("m", Tensor::zeros([4]).unwrap(), ParamKind::RunningStat).unwrap();
        assert_eq!(store.num_values(false), 6);
        assert_eq!(store.num_values(true), 10);
    }

    #[test]
    fn binding_is_memoized_and_respects_kind() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::ones([2]).unwrap(), ParamKind::Trainable).unwrap();
        let m = store.add("m", Tensor::ones([2]).unwrap(), ParamKind::RunningStat).unwrap();
        let mut s = Session::new(&store, Mode::Train, true);
        let a = s.param(w);
        assert_eq!(a, s.param(w));
        assert!(s.tape.requires_grad(a));
        let b = s.param(m);
        assert!(!s.tape.requires_grad(b));
    }
}
