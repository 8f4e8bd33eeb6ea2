use crate::error::{config_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Gradients, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted by `count_params`.
    Learnable,
    /// Running statistics; saved in checkpoints, never counted.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named parameters and buffers of a model, in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Init stream for `name`; depends only on (seed, name), so two models
    /// built from the same seed share the values of identically named
    /// parameters regardless of construction order.
    pub fn rng_for(&self, name: &str) -> SplitMix64 {
        SplitMix64::derive(self.seed, fnv1a(name))
    }

    /// Kaiming-uniform weights, bound = gain·sqrt(3 / fan_in) with gain √2.
    pub fn add_kaiming(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        let name = name.into();
        let fan_in = (shape.c * shape.h * shape.w) as f64;
        let bound = std::f64::consts::SQRT_2 * (3.0 / fan_in).sqrt();
        let mut rng = self.rng_for(&name);
        let value = Tensor::from_fn(shape, |_, _, _, _| rng.uniform(-bound, bound));
        self.add(name, value, ParamKind::Learnable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of scalar learnable parameters.
    pub fn count_learnable(&self) -> usize {
        self.learnable().map(|(_, e)| e.value.numel()).sum()
    }

    /// Sum of learnable parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.learnable()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Copies values of identically named, identically shaped entries from
    /// `other`; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.find(&e.name) {
                let v = other.get(src);
                if v.shape() == e.value.shape() {
                    e.value = v.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Sets every learnable parameter whose name starts with `prefix` to 0.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Learnable && e.name.starts_with(prefix) {
                e.value.data_mut().fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running stats are collected.
    Train,
    /// Running statistics in normalization layers.
    Infer,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Per-forward state: the tape, a lazily populated map from parameters to
/// tape leaves, and collected statistics updates. Parameters are borrowed
/// immutably for the whole forward pass.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, tape: Tape, mode: Mode) -> Self {
        Self {
            tape,
            store,
            vars: vec![None; store.len()],
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape leaf for a parameter; learnable parameters require grad.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.value.clone(), e.kind == ParamKind::Learnable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn push_stat_update(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every parameter that took part in the forward pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

/// Applies collected running-statistics updates:
/// running ← (1 − momentum)·running + momentum·batch.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(batch)
                .for_each(|(r, b)| *r = (1.0 - u.momentum) * *r + u.momentum * b);
        }
    }
}
