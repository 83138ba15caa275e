//! Neuromodulated layers: fixed random transforms reshaped per task by a
//! local context vector `v` (elementwise on the layer input) and a global
//! gain `alpha`, plus the per-task context store and its checkpoint format.
//!
//! Dense and convolutional layers share one row kernel. A dense layer
//! applies it to a batch of input vectors; a convolution applies it to the
//! im2col patches of the input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, usage_err, Result};
use crate::rngcore::{gaussian_matrix, stream_id, Purpose, RngStream};
use crate::scalar::Scalar;

mod checkpoint;
mod context;
mod conv;
mod linear;

pub use checkpoint::{read_checkpoint, write_atomic, write_checkpoint, CheckpointJson, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use context::{context_init, count_params, ContextStore, TaskContext};
pub use conv::{conv_backward, conv_forward_batch, modulated_conv_forward, ConvGeometry};
pub use linear::{linear_backward, linear_forward_batch, modulated_linear_forward, superposed_forward};

/// Shape of a fixed random transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisShape {
    Linear {
        d_out: usize,
        d_in: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
    },
}

impl BasisShape {
    /// Rows of the stored matrix (outputs or output channels).
    pub fn rows(&self) -> usize {
        match *self {
            BasisShape::Linear { d_out, .. } => d_out,
            BasisShape::Conv { out_channels, .. } => out_channels,
        }
    }

    /// Columns of the stored matrix; also the context length for the layer.
    pub fn fan_in(&self) -> usize {
        match *self {
            BasisShape::Linear { d_in, .. } => d_in,
            BasisShape::Conv {
                in_channels,
                kh,
                kw,
                ..
            } => in_channels * kh * kw,
        }
    }

    pub fn len(&self) -> usize {
        self.rows() * self.fan_in()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a basis is regenerated: never stored by value in standard mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisRecipe {
    pub seed: u64,
    pub stream_id: u64,
    pub std: f64,
}

/// Fixed zero-mean Gaussian weights `R`, stored as `rows × fan_in`
/// (a conv kernel `(N, M, Kh, Kw)` is stored as `N × (M·Kh·Kw)`).
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBasis<T> {
    shape: BasisShape,
    recipe: Option<BasisRecipe>,
    values: Array2<T>,
}

impl<T: Scalar> RandomBasis<T> {
    /// Basis for modulated layer `layer` with std `1/sqrt(fan_in)`.
    pub fn generate(shape: BasisShape, seed: u64, layer: u32) -> Result<Self> {
        let std = 1.0 / (shape.fan_in() as f64).sqrt();
        Self::generate_with_std(shape, seed, layer, std)
    }

    pub fn generate_with_std(shape: BasisShape, seed: u64, layer: u32, std: f64) -> Result<Self> {
        let recipe = BasisRecipe {
            seed,
            stream_id: stream_id(Purpose::Basis, layer, 0),
            std,
        };
        Self::from_recipe(shape, recipe)
    }

    pub fn from_recipe(shape: BasisShape, recipe: BasisRecipe) -> Result<Self> {
        let mut rng = RngStream::new(recipe.seed, recipe.stream_id);
        let values = gaussian_matrix(shape.rows(), shape.fan_in(), recipe.std, &mut rng)?;
        Ok(Self {
            shape,
            recipe: Some(recipe),
            values,
        })
    }

    /// Basis with explicit values (hand-built or trained weights).
    pub fn from_values(shape: BasisShape, values: Array2<T>) -> Result<Self> {
        if values.dim() != (shape.rows(), shape.fan_in()) {
            return Err(shape_err(format!(
                "basis values are {:?}, shape {:?} needs {}x{}",
                values.dim(),
                shape,
                shape.rows(),
                shape.fan_in()
            )));
        }
        Ok(Self {
            shape,
            recipe: None,
            values,
        })
    }

    pub fn shape(&self) -> BasisShape {
        self.shape
    }

    /// `None` once the values no longer derive from a seed.
    pub fn recipe(&self) -> Option<BasisRecipe> {
        self.recipe
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    /// Conv kernel view `(N, M, Kh, Kw)`.
    pub fn kernel(&self) -> Result<ArrayView4<'_, T>> {
        match self.shape {
            BasisShape::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
            } => self
                .values
                .view()
                .into_shape_with_order((out_channels, in_channels, kh, kw))
                .map_err(|e| shape_err(e.to_string())),
            BasisShape::Linear { .. } => Err(usage_err("dense basis has no kernel view")),
        }
    }

    /// Applies `values -= step`; the basis stops being seed-regenerable.
    /// Drops the recipe: the values no longer follow from the seed.
    pub(crate) fn mark_trained(&mut self) {
        self.recipe = None;
    }

    pub(crate) fn values_mut_slice(&mut self) -> &mut [T] {
        self.recipe = None;
        self.values.as_slice_mut().expect("basis values are contiguous")
    }
}

/// Which gradients a backward pass should produce beyond `v` and `alpha`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub basis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CacheKind {
    Linear,
    Conv(ConvGeometry),
}

/// What a modulated forward pass leaves behind for its backward pass.
///
/// `rows` are the layer inputs (dense) or im2col patches (conv), `unscaled`
/// is the modulated pre-activation before the gain, `z / alpha`.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub(crate) kind: CacheKind,
    pub(crate) batch: usize,
    pub(crate) rows: Array2<T>,
    pub(crate) unscaled: Array2<T>,
    pub(crate) v: Array1<T>,
    pub(crate) alpha: T,
    pub(crate) basis_dim: (usize, usize),
}

impl<T: Scalar> LayerCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn context(&self) -> ArrayView1<'_, T> {
        self.v.view()
    }

    /// Pre-activation `z = alpha * (R ×⊙ v) x` in row-kernel layout.
    pub fn pre_activation(&self) -> Array2<T> {
        &self.unscaled * self.alpha
    }

    fn check(&self, basis: &RandomBasis<T>, delta_rows: usize, delta_cols: usize) -> Result<()> {
        if basis.values.dim() != self.basis_dim {
            return Err(usage_err(format!(
                "cache was produced by a {:?} basis, got {:?}",
                self.basis_dim,
                basis.values.dim()
            )));
        }
        if (delta_rows, delta_cols) != self.unscaled.dim() {
            return Err(usage_err(format!(
                "upstream gradient {:?} does not match cached forward {:?}",
                (delta_rows, delta_cols),
                self.unscaled.dim()
            )));
        }
        Ok(())
    }
}

/// Gradients of one modulated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub v: Array1<T>,
    pub alpha: T,
    pub input: Option<Array2<T>>,
    pub basis: Option<Array2<T>>,
}

fn check_context<T>(basis: &RandomBasis<T>, v_len: usize) -> Result<()> {
    if v_len != basis.shape.fan_in() {
        return Err(shape_err(format!(
            "context has length {v_len}, layer fan-in is {}",
            basis.shape.fan_in()
        )));
    }
    Ok(())
}

/// Row kernel, superposition order: `u = (v ⊙ x) Rᵀ`, `y = alpha·u`.
fn rows_forward<T: Scalar>(
    basis: &RandomBasis<T>,
    v: ArrayView1<'_, T>,
    rows: ArrayView2<'_, T>,
) -> Array2<T> {
    let modulated = &rows * &v;
    modulated.dot(&basis.values.t())
}

/// Row-kernel backward with `delta` in the `rows × d_out` layout.
///
/// * `P = delta·R`
/// * `g_v[j] = alpha · Σ_rows x ⊙ P`
/// * `g_alpha = Σ delta ⊙ u`
/// * `g_x = alpha · P ⊙ v`
/// * `g_R = alpha · deltaᵀ (v ⊙ x)`
fn rows_backward<T: Scalar>(
    basis: &RandomBasis<T>,
    cache: &LayerCache<T>,
    delta: ArrayView2<'_, T>,
    want: GradRequest,
) -> (Array1<T>, T, Option<Array2<T>>, Option<Array2<T>>) {
    let alpha = cache.alpha;
    let projected = delta.dot(&basis.values);
    let mut g_v = Array1::<T>::zeros(cache.v.len());
    for (x_row, p_row) in cache.rows.axis_iter(Axis(0)).zip(projected.axis_iter(Axis(0))) {
        Zip::from(&mut g_v)
            .and(&x_row)
            .and(&p_row)
            .for_each(|g, &x, &p| *g += x * p);
    }
    g_v.mapv_inplace(|g| g * alpha);

    let mut g_alpha = T::zero();
    Zip::from(&delta)
        .and(&cache.unscaled)
        .for_each(|&d, &u| g_alpha += d * u);

    let g_input = want.input.then(|| {
        let scaled_v = cache.v.mapv(|v| v * alpha);
        &projected * &scaled_v
    });
    let g_basis = want.basis.then(|| {
        let modulated = &cache.rows * &cache.v;
        delta.t().dot(&modulated) * alpha
    });
    (g_v, g_alpha, g_input, g_basis)
}

pub(crate) fn validate_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if !alpha.is_finite() {
        return Err(config_err(format!("alpha must be finite, got {alpha}")));
    }
    Ok(())
}
