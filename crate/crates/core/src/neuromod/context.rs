use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{config_err, shape_err, CrwnError, Result};
use crate::scalar::{Precision, Scalar};

/// Everything learned for one task: a context vector per modulated layer
/// and one gain shared by all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskContext<T> {
    pub task_id: u32,
    pub alpha: T,
    pub vs: Vec<Array1<T>>,
}

impl<T: Scalar> TaskContext<T> {
    pub fn layer_dims(&self) -> Vec<usize> {
        self.vs.iter().map(Array1::len).collect()
    }

    /// Little-endian `f64` image of `alpha` followed by every `v`; used
    /// for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.vs.iter().map(Array1::len).sum::<usize>()));
        out.extend_from_slice(&self.alpha.as_f64().to_le_bytes());
        for v in &self.vs {
            for x in v {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }
}

/// Fresh context: `alpha = alpha0` and every entry of every `v` set to `v0`.
pub fn context_init<T: Scalar>(
    task_id: u32,
    layer_dims: &[usize],
    alpha0: f64,
    v0: f64,
) -> Result<TaskContext<T>> {
    if layer_dims.is_empty() {
        return Err(config_err("a context needs at least one modulated layer"));
    }
    if layer_dims.contains(&0) {
        return Err(config_err("modulated layers must have positive fan-in"));
    }
    Ok(TaskContext {
        task_id,
        alpha: T::of(alpha0),
        vs: layer_dims
            .iter()
            .map(|&d| Array1::from_elem(d, T::of(v0)))
            .collect(),
    })
}

/// Learnable parameters per task: `1 + Σ_l len(v_l)`.
pub fn count_params<T>(ctx: &TaskContext<T>) -> usize {
    1 + ctx.vs.iter().map(Array1::len).sum::<usize>()
}

/// Task id → context map for one model. The only learned state a
/// standard-mode run persists; fixed bases are re-derived from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStore<T> {
    pub(crate) fingerprint: u64,
    pub(crate) precision: Precision,
    pub(crate) seed: u64,
    pub(crate) architecture: String,
    pub(crate) layer_dims: Vec<usize>,
    pub(crate) contexts: BTreeMap<u32, TaskContext<T>>,
    pub(crate) trained_bases: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> ContextStore<T> {
    /// Empty store. `architecture` is an opaque description (JSON) kept in
    /// checkpoint headers.
    pub fn new(fingerprint: u64, seed: u64, architecture: String, layer_dims: Vec<usize>) -> Self {
        Self {
            fingerprint,
            precision: T::PRECISION,
            seed,
            architecture,
            layer_dims,
            contexts: BTreeMap::new(),
            trained_bases: None,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn architecture(&self) -> &str {
        &self.architecture
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn ensure_compatible(&self, fingerprint: u64) -> Result<()> {
        if fingerprint != self.fingerprint {
            return Err(CrwnError::Incompatible {
                expected: fingerprint,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    /// Inserts (or replaces) the context for `ctx.task_id`. Other tasks'
    /// contexts are untouched.
    pub fn put(&mut self, model_fingerprint: u64, ctx: TaskContext<T>) -> Result<()> {
        self.ensure_compatible(model_fingerprint)?;
        if ctx.layer_dims() != self.layer_dims {
            return Err(shape_err(format!(
                "context layer sizes {:?} differ from model {:?}",
                ctx.layer_dims(),
                self.layer_dims
            )));
        }
        self.contexts.insert(ctx.task_id, ctx);
        Ok(())
    }

    pub fn get(&self, task_id: u32) -> Result<&TaskContext<T>> {
        self.contexts
            .get(&task_id)
            .ok_or(CrwnError::MissingTask(task_id))
    }

    pub fn contains(&self, task_id: u32) -> bool {
        self.contexts.contains_key(&task_id)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Task ids in ascending order.
    pub fn task_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.contexts.keys().copied()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &TaskContext<T>> {
        self.contexts.values()
    }

    /// Shared weights learned in pretrained mode, persisted by value.
    pub fn trained_bases(&self) -> Option<&[Array2<T>]> {
        self.trained_bases.as_deref()
    }

    pub fn set_trained_bases(&mut self, bases: Option<Vec<Array2<T>>>) {
        self.trained_bases = bases;
    }
}
