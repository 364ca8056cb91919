use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds every bound parameter's gradient from `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &Bindings) {
        for (pid, var) in bindings.iter() {
            grads.accumulate_into(var, &mut self.tensors[pid.0]);
        }
    }

    /// Global L2 norm of all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

/// Parameter → tape-variable map for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    map: Vec<Option<Var>>,
}

impl Bindings {
    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.map.get(id.0).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// One forward pass: a fresh tape, the parameters bound so far, and the
/// dropout stream when training.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    bindings: Bindings,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Graph {
    pub fn eval() -> Self {
        Self {
            tape: Tape::new(),
            bindings: Bindings::default(),
            dropout_rng: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            bindings: Bindings::default(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Returns the tape variable for `id`, binding it on first use so each
    /// parameter appears once per pass.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bindings.get(id) {
            return v;
        }
        let v = self.tape.leaf(store.get(id));
        if self.bindings.map.len() <= id.0 {
            self.bindings.map.resize(id.0 + 1, None);
        }
        self.bindings.map[id.0] = Some(v);
        v
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> crate::Result<Var> {
        match self.dropout_rng.as_mut() {
            Some(rng) => self.tape.dropout(x, p, true, rng),
            None => Ok(x),
        }
    }

    /// Backward from `loss`, adding the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> crate::Result<()> {
        let grads = self.tape.backward(loss)?;
        store.accumulate(&grads, &self.bindings);
        Ok(())
    }
}
