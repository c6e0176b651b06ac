//! Parameter storage, forward sessions and the layers built on them.

mod layers;

pub use layers::{
    gelu, Attention, AttentionSpec, BatchNorm, Conv2d, Conv2dSpec, ConvTranspose2d, LayerNorm,
    Linear, Lstm, LstmSpec,
};

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Gradients, Precision, Tape, Tensor, Var};

/// Momentum of the batch-norm running statistics: `running = m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

/// Named parameters and buffers in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        kind: EntryKind,
        value: Tensor,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().map(|e| e.value.numel()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.params()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for e in &mut self.entries {
            precision.apply(&mut e.value);
        }
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            let unbiased = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let mean = self
                .get_mut(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::invalid(format!("missing running mean for {name}")))?;
            for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let var = self
                .get_mut(&format!("{name}.running_var"))
                .ok_or_else(|| Error::invalid(format!("missing running var for {name}")))?;
            for (r, v) in var.data_mut().iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbiased;
            }
        }
        Ok(())
    }
}

/// Registers freshly initialized layer parameters.
#[derive(Debug)]
pub struct Builder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.store.insert(name, EntryKind::Param, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store
            .insert(name, EntryKind::Param, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.store.insert(name, EntryKind::Buffer, value)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optional backward) pass over a parameter store.
///
/// Parameters are bound to the tape lazily on first use. In `Train` mode they
/// are gradient leaves and batch norms use batch statistics; in `Eval` mode
/// they are constants and batch norms use the running buffers.
pub struct Session<'a> {
    tape: Tape,
    store: &'a ParamStore,
    mode: Mode,
    track_params: bool,
    bound: RefCell<Vec<(String, Var)>>,
    lookup: RefCell<HashMap<String, usize>>,
    batch_stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::on_tape(Tape::new(), store, mode)
    }

    /// Session recording onto an existing tape.
    pub fn on_tape(tape: Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            track_params: mode == Mode::Train,
            bound: RefCell::default(),
            lookup: RefCell::default(),
            batch_stats: RefCell::default(),
        }
    }

    /// Overrides whether parameters become gradient leaves.
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.track_params = on;
        self
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&i) = self.lookup.borrow().get(name) {
            return Ok(self.bound.borrow()[i].1.clone());
        }
        let entry = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let var = if self.track_params {
            self.tape.leaf(entry)
        } else {
            self.tape.constant(entry)
        };
        let mut bound = self.bound.borrow_mut();
        self.lookup
            .borrow_mut()
            .insert(name.to_string(), bound.len());
        bound.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Binds `name` to an existing variable instead of the stored value.
    pub fn bind(&self, name: &str, var: Var) -> Result<()> {
        if self.lookup.borrow().contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} already bound")));
        }
        let mut bound = self.bound.borrow_mut();
        self.lookup
            .borrow_mut()
            .insert(name.to_string(), bound.len());
        bound.push((name.to_string(), var));
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))
    }

    pub(crate) fn record_batch_stats(&self, name: &str, stats: BatchStats) {
        self.batch_stats
            .borrow_mut()
            .push((name.to_string(), stats));
    }

    pub fn take_batch_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.batch_stats.borrow_mut())
    }

    /// Runs backward from `loss` and returns gradients keyed by parameter name.
    pub fn backward(&self, loss: &Var) -> Result<Vec<(String, Tensor)>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect())
    }
}
