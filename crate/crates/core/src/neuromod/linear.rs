use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{
    check_context, rows_backward, rows_forward, validate_alpha, BasisShape, CacheKind, GradRequest,
    LayerCache, LayerGrads, RandomBasis,
};
use crate::error::{shape_err, usage_err, Result};
use crate::scalar::Scalar;

fn dense_dims<T: Scalar>(basis: &RandomBasis<T>) -> Result<(usize, usize)> {
    match basis.shape() {
        BasisShape::Linear { d_out, d_in } => Ok((d_out, d_in)),
        BasisShape::Conv { .. } => Err(usage_err("expected a dense basis, got a conv kernel")),
    }
}

/// `y = W h` with the modulated weight `W = alpha · (R ×⊙ v)` built
/// explicitly: row `i` of `W` is `alpha · (r_i ⊙ v)`.
pub fn modulated_linear_forward<T: Scalar>(
    basis: &RandomBasis<T>,
    v: &[T],
    alpha: T,
    h: &[T],
) -> Result<Vec<T>> {
    let (d_out, d_in) = dense_dims(basis)?;
    check_context(basis, v.len())?;
    if h.len() != d_in {
        return Err(shape_err(format!("layer expects {d_in} inputs, got {}", h.len())));
    }
    let r = basis.values();
    let mut y = Vec::with_capacity(d_out);
    for i in 0..d_out {
        let mut acc = T::zero();
        for j in 0..d_in {
            let w = alpha * (r[[i, j]] * v[j]);
            acc += w * h[j];
        }
        y.push(acc);
    }
    Ok(y)
}

/// `y = (alpha · R)(v ⊙ h)`: the same map read as a context key `v`
/// addressing one shared matrix.
pub fn superposed_forward<T: Scalar>(
    basis: &RandomBasis<T>,
    v: &[T],
    alpha: T,
    h: &[T],
) -> Result<Vec<T>> {
    let (d_out, d_in) = dense_dims(basis)?;
    check_context(basis, v.len())?;
    if h.len() != d_in {
        return Err(shape_err(format!("layer expects {d_in} inputs, got {}", h.len())));
    }
    let r = basis.values();
    let keyed: Vec<T> = v.iter().zip(h).map(|(&vj, &hj)| vj * hj).collect();
    let mut y = Vec::with_capacity(d_out);
    for i in 0..d_out {
        let mut acc = T::zero();
        for j in 0..d_in {
            acc += (alpha * r[[i, j]]) * keyed[j];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Batched dense forward: `x` is `batch × d_in`, the result `batch × d_out`.
pub fn linear_forward_batch<T: Scalar>(
    basis: &RandomBasis<T>,
    v: ArrayView1<'_, T>,
    alpha: T,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, LayerCache<T>)> {
    let (_, d_in) = dense_dims(basis)?;
    check_context(basis, v.len())?;
    validate_alpha(alpha)?;
    if x.ncols() != d_in {
        return Err(shape_err(format!(
            "layer expects {d_in} inputs, got {}",
            x.ncols()
        )));
    }
    let unscaled = rows_forward(basis, v, x);
    let y = &unscaled * alpha;
    let cache = LayerCache {
        kind: CacheKind::Linear,
        batch: x.nrows(),
        rows: x.to_owned(),
        unscaled,
        v: v.to_owned(),
        alpha,
        basis_dim: basis.values().dim(),
    };
    Ok((y, cache))
}

/// Gradients of a dense modulated layer given `delta = ∂L/∂y`
/// (`batch × d_out`). Gradients are summed over the batch.
pub fn linear_backward<T: Scalar>(
    basis: &RandomBasis<T>,
    delta: ArrayView2<'_, T>,
    cache: &LayerCache<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    if cache.kind != CacheKind::Linear {
        return Err(usage_err("dense backward given a conv cache"));
    }
    cache.check(basis, delta.nrows(), delta.ncols())?;
    let (v, alpha, input, grad_basis) = rows_backward(basis, cache, delta, want);
    Ok(LayerGrads {
        v,
        alpha,
        input,
        basis: grad_basis,
    })
}
