//! Named parameter storage and the per-pass [`Session`] that binds parameters
//! onto a fresh tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Every tensor a model owns: trainable weights plus non-trainable buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrites every tensor with the same-named tensor from `other`.
    pub fn assign_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for entry in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::MissingTensor(entry.name.clone()))?;
            if t.shape() != entry.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    left: entry.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            entry.value = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) pass: a tape, the parameters bound
/// onto it, the layer mode and the RNG for stochastic layers.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, seed: u64) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            track_params: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Eval session whose parameters are recorded as constants, so nothing
    /// downstream of them tracks gradients.
    pub fn inference(store: &'a mut ParamStore) -> Self {
        let mut s = Self::new(store, Mode::Eval, 0);
        s.track_params = false;
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// The tape variable for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.track_params && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_cached() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2]), true);
        let mut s = Session::new(&mut store, Mode::Train, 0);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a, b);
        assert_eq!(s.tape.len(), 1);
    }

    #[test]
    fn inference_session_tracks_nothing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2]), true);
        let mut s = Session::inference(&mut store);
        let v = s.param(id);
        assert!(!s.tape.requires_grad(v));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::ones(&[1]), true);
        store.add("w", Tensor::ones(&[1]), true);
    }
}
