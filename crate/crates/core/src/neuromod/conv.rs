use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{
    check_context, rows_backward, rows_forward, validate_alpha, BasisShape, CacheKind, GradRequest,
    LayerCache, LayerGrads, RandomBasis,
};
use crate::error::{shape_err, usage_err, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-D cross-correlation over channel-major `(C, H, W)`
/// inputs flattened row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    out_h: usize,
    out_w: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(shape_err(format!(
            "kernel {kernel} with stride {stride} does not fit input {input} padded by {padding}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(shape_err(format!(
            "output size ({input} + 2·{padding} − {kernel})/{stride} + 1 is not integral"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(shape_err("convolution needs at least one channel each way"));
        }
        let out_h = output_extent(in_h, kh, stride, padding)?;
        let out_w = output_extent(in_w, kw, stride, padding)?;
        Ok(Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_h(&self) -> usize {
        self.out_h
    }

    pub fn out_w(&self) -> usize {
        self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn basis_shape(&self) -> BasisShape {
        BasisShape::Conv {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kh: self.kh,
            kw: self.kw,
        }
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Patch matrix with one row per `(sample, oy, ox)` and columns ordered
/// `(channel, ky, kx)` to match the flattened kernel.
fn im2col<T: Scalar>(x: ArrayView2<'_, T>, g: &ConvGeometry) -> Array2<T> {
    let batch = x.nrows();
    let positions = g.positions();
    let mut cols = Array2::<T>::zeros((batch * positions, g.patch_len()));
    let plane = g.in_h * g.in_w;
    for b in 0..batch {
        let xb = x.row(b);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut row = cols.row_mut(b * positions + oy * g.out_w + ox);
                let mut col = 0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                row[col] = xb[c * plane + y * g.in_w + xx];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Scalar>(cols: ArrayView2<'_, T>, g: &ConvGeometry, batch: usize) -> Array2<T> {
    let positions = g.positions();
    let plane = g.in_h * g.in_w;
    let mut out = Array2::<T>::zeros((batch, g.in_len()));
    for b in 0..batch {
        let mut ob = out.row_mut(b);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = cols.row(b * positions + oy * g.out_w + ox);
                let mut col = 0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                ob[c * plane + y * g.in_w + xx] += row[col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_geometry<T: Scalar>(basis: &RandomBasis<T>, g: &ConvGeometry) -> Result<()> {
    if basis.shape() != g.basis_shape() {
        return Err(usage_err(format!(
            "basis {:?} does not match convolution geometry {:?}",
            basis.shape(),
            g.basis_shape()
        )));
    }
    Ok(())
}

/// Batched modulated convolution. `x` is `batch × (M·H·W)`; the output is
/// `batch × (N·H'·W')`, channel `n` being the cross-correlation of the
/// input with the kernel `alpha · (R_n ⊙ v)`.
pub fn conv_forward_batch<T: Scalar>(
    basis: &RandomBasis<T>,
    geometry: &ConvGeometry,
    v: ArrayView1<'_, T>,
    alpha: T,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, LayerCache<T>)> {
    check_geometry(basis, geometry)?;
    check_context(basis, v.len())?;
    validate_alpha(alpha)?;
    if x.ncols() != geometry.in_len() {
        return Err(shape_err(format!(
            "convolution expects inputs of length {}, got {}",
            geometry.in_len(),
            x.ncols()
        )));
    }
    let batch = x.nrows();
    let cols = im2col(x, geometry);
    let unscaled = rows_forward(basis, v, cols.view());
    let positions = geometry.positions();
    let mut y = Array2::<T>::zeros((batch, geometry.out_len()));
    for b in 0..batch {
        let mut yb = y.row_mut(b);
        for p in 0..positions {
            let u = unscaled.row(b * positions + p);
            for n in 0..geometry.out_channels {
                yb[n * positions + p] = alpha * u[n];
            }
        }
    }
    let cache = LayerCache {
        kind: CacheKind::Conv(*geometry),
        batch,
        rows: cols,
        unscaled,
        v: v.to_owned(),
        alpha,
        basis_dim: basis.values().dim(),
    };
    Ok((y, cache))
}

/// Gradients of a modulated convolution given `delta = ∂L/∂y`
/// (`batch × (N·H'·W')`), summed over the batch.
pub fn conv_backward<T: Scalar>(
    basis: &RandomBasis<T>,
    delta: ArrayView2<'_, T>,
    cache: &LayerCache<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    let geometry = match cache.kind {
        CacheKind::Conv(g) => g,
        CacheKind::Linear => return Err(usage_err("conv backward given a dense cache")),
    };
    check_geometry(basis, &geometry)?;
    if delta.nrows() != cache.batch || delta.ncols() != geometry.out_len() {
        return Err(usage_err(format!(
            "upstream gradient {:?} does not match cached forward ({}, {})",
            delta.dim(),
            cache.batch,
            geometry.out_len()
        )));
    }
    let positions = geometry.positions();
    let mut delta_rows = Array2::<T>::zeros((cache.batch * positions, geometry.out_channels));
    for b in 0..cache.batch {
        let db = delta.row(b);
        for p in 0..positions {
            let mut row = delta_rows.row_mut(b * positions + p);
            for n in 0..geometry.out_channels {
                row[n] = db[n * positions + p];
            }
        }
    }
    cache.check(basis, delta_rows.nrows(), delta_rows.ncols())?;
    let (v, alpha, patch_grads, grad_basis) = rows_backward(basis, cache, delta_rows.view(), want);
    let input = patch_grads.map(|pg| col2im(pg.view(), &geometry, cache.batch));
    Ok(LayerGrads {
        v,
        alpha,
        input,
        basis: grad_basis,
    })
}

/// Single-sample modulated convolution on `(M, H, W)` input with a
/// `(M, Kh, Kw)` context; returns `(N, H', W')`.
pub fn modulated_conv_forward<T: Scalar>(
    basis: &RandomBasis<T>,
    v: ArrayView3<'_, T>,
    alpha: T,
    x: ArrayView3<'_, T>,
    stride: usize,
    padding: usize,
) -> Result<Array3<T>> {
    let (n, m, kh, kw) = match basis.shape() {
        BasisShape::Conv {
            out_channels,
            in_channels,
            kh,
            kw,
        } => (out_channels, in_channels, kh, kw),
        BasisShape::Linear { .. } => return Err(usage_err("expected a conv kernel")),
    };
    if v.dim() != (m, kh, kw) {
        return Err(shape_err(format!(
            "context {:?} does not match kernel input shape {:?}",
            v.dim(),
            (m, kh, kw)
        )));
    }
    let (c, h, w) = x.dim();
    if c != m {
        return Err(shape_err(format!("input has {c} channels, kernel expects {m}")));
    }
    let g = ConvGeometry::new(m, h, w, n, kh, kw, stride, padding)?;
    let flat_x: Vec<T> = x.iter().copied().collect();
    let flat_v: Vec<T> = v.iter().copied().collect();
    let xs = ArrayView2::from_shape((1, g.in_len()), &flat_x).map_err(|e| shape_err(e.to_string()))?;
    let (y, _) = conv_forward_batch(basis, &g, ArrayView1::from(&flat_v), alpha, xs)?;
    y.into_shape_with_order((n, g.out_h(), g.out_w()))
        .map_err(|e| shape_err(e.to_string()))
}
