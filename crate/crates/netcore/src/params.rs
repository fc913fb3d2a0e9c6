use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{NetError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::Mat;

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub value: Mat,
    pub m: Mat,
    pub v: Mat,
}

/// Named, shaped parameters plus adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub(crate) entries: Vec<Entry>,
    index: HashMap<String, usize>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Names are unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NetError::DuplicateParam(name));
        }
        let (r, c) = value.shape();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    /// Uniform Glorot initialization for an `fan_in x fan_out` weight.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit));
        self.add(name, w)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Mat> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }

    /// Overwrites the values of an entry. The shape must not change.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                format!("`{}` is {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates of an entry.
    pub fn moments(&self, id: ParamId) -> (&Mat, &Mat) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| crate::all_finite(&e.value))
    }

    /// Binds every entry as a differentiable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> ParamVars {
        ParamVars(self.entries.iter().map(|e| g.param(&e.value)).collect())
    }

    /// Binds every entry as a constant (inference only).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> ParamVars {
        ParamVars(self.entries.iter().map(|e| g.frozen(&e.value)).collect())
    }

    pub(crate) fn restore_raw(entries: Vec<Entry>, step: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(NetError::DuplicateParam(e.name.clone()));
            }
        }
        Ok(ParamStore {
            entries,
            index,
            step,
        })
    }
}

/// Graph handles for the entries of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamVars {
    /// Collects per-entry gradients, filling zeros for entries the loss does not reach.
    pub fn collect(&self, store: &ParamStore, mut grads: Gradients) -> Grads {
        Grads(
            self.0
                .iter()
                .zip(&store.entries)
                .map(|(v, e)| grads.take(*v).unwrap_or_else(|| Mat::zeros(e.value.nrows(), e.value.ncols())))
                .collect(),
        )
    }
}

/// Per-entry gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Mat>);

impl Index<ParamId> for Grads {
    type Output = Mat;

    fn index(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(
            store
                .entries
                .iter()
                .map(|e| Mat::zeros(e.value.nrows(), e.value.ncols()))
                .collect(),
        )
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.0[id.0]
    }

    /// Global L2 norm across all entries.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    /// Rescales all entries so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            let k = max_norm / n;
            for g in &mut self.0 {
                *g *= k;
            }
        }
    }
}
