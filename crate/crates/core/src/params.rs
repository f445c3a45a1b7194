//! Named parameter storage and per-pass binding onto a tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HugError, Result};
use crate::tensor::{ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored name must be present with its shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = values
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| HugError::invalid(format!("missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(HugError::ShapeMismatch {
                    op: "load_values",
                    lhs: e.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        if values.len() != self.entries.len() {
            return Err(HugError::invalid(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters; each parameter becomes one leaf per pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Continues `tape` with every parameter already bound to `vars`, in id order.
    pub fn with_vars(tape: Tape, store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(HugError::invalid(format!(
                "expected {} parameter variables, got {}",
                store.len(),
                vars.len()
            )));
        }
        Ok(Graph {
            tape,
            store,
            bound: vars.iter().copied().map(Some).collect(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect(),
    )
}

pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}
