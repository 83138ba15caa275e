//! FlyNet's non-learnable sparse encoder.
//!
//! Every hidden node sums a fixed random subset of `n_in` inputs (binary
//! gate weights), the population mean over hidden nodes scaled by `gamma`
//! is subtracted, and the result is rectified.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::rngcore::{sample_gate_indices, Purpose, RngStream};
use crate::scalar::Scalar;

/// Index lists implementing the binary encoder weights: row `j` holds the
/// `n_in` inputs gated into hidden node `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateTable {
    d_in: usize,
    n_in: usize,
    d_hidden: usize,
    indices: Vec<u32>,
}

/// What a gate table persists as: it is always regenerated from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecipe {
    pub seed: u64,
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_in: usize,
}

impl GateTable {
    pub(crate) fn from_flat(
        d_in: usize,
        n_in: usize,
        d_hidden: usize,
        indices: Vec<u32>,
    ) -> Result<Self> {
        if indices.len() != d_hidden * n_in {
            return Err(shape_err(format!(
                "gate table holds {} indices, expected {}",
                indices.len(),
                d_hidden * n_in
            )));
        }
        Ok(Self {
            d_in,
            n_in,
            d_hidden,
            indices,
        })
    }

    /// Builds a table from explicit rows. Rows must have equal length and
    /// distinct in-range entries.
    pub fn from_rows(d_in: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let n_in = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || n_in == 0 || n_in >= d_in {
            return Err(config_err(format!(
                "gate rows must be non-empty with 1 <= n_in < d_in (d_in={d_in}, n_in={n_in})"
            )));
        }
        let mut indices = Vec::with_capacity(rows.len() * n_in);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != n_in {
                return Err(shape_err(format!(
                    "gate row {j} has {} entries, expected {n_in}",
                    row.len()
                )));
            }
            let mut sorted = row.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != n_in || sorted.iter().any(|&i| i as usize >= d_in) {
                return Err(config_err(format!(
                    "gate row {j} must hold distinct indices below {d_in}"
                )));
            }
            indices.extend_from_slice(row);
        }
        Self::from_flat(d_in, n_in, rows.len(), indices)
    }

    /// Regenerates the table described by `recipe`.
    pub fn generate(recipe: GateRecipe) -> Result<Self> {
        let mut rng = RngStream::derive(recipe.seed, Purpose::Gates, 0, 0);
        sample_gate_indices(recipe.d_in, recipe.n_in, recipe.d_hidden, &mut rng)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u32] {
        &self.indices[j * self.n_in..(j + 1) * self.n_in]
    }

    /// Table whose row `k` is row `order[k]` of `self`.
    pub fn reorder_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.d_hidden {
            return Err(shape_err("row order length differs from hidden size"));
        }
        let mut indices = Vec::with_capacity(self.indices.len());
        for &j in order {
            indices.extend_from_slice(self.row(j));
        }
        Self::from_flat(self.d_in, self.n_in, self.d_hidden, indices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub gamma: f64,
    pub n_in: usize,
    pub d_hidden: usize,
}

impl EncoderConfig {
    pub fn new(n_in: usize, d_hidden: usize) -> Self {
        Self {
            gamma: 1.0,
            n_in,
            d_hidden,
        }
    }

    fn validate(&self, gates: &GateTable) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(config_err(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if gates.n_in != self.n_in || gates.d_hidden != self.d_hidden {
            return Err(shape_err(format!(
                "encoder config ({} x {}) disagrees with gate table ({} x {})",
                self.d_hidden, self.n_in, gates.d_hidden, gates.n_in
            )));
        }
        Ok(())
    }
}

/// Gated sums followed by mean subtraction, before rectification.
/// Writes `d_hidden` values into `out`.
fn centered_sums<T: Scalar>(x: &[T], gates: &GateTable, gamma: T, out: &mut [T]) {
    let mut total = T::zero();
    for (j, slot) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for &i in gates.row(j) {
            s += x[i as usize];
        }
        *slot = s;
        total += s;
    }
    let shift = gamma * total / T::of(gates.d_hidden as f64);
    for slot in out.iter_mut() {
        *slot -= shift;
    }
}

fn check_len(len: usize, gates: &GateTable) -> Result<()> {
    if len != gates.d_in {
        return Err(shape_err(format!(
            "encoder expects {} inputs, got {len}",
            gates.d_in
        )));
    }
    Ok(())
}

/// Pre-rectification activations `x̄ - γ·mean(x̄)`; exposed for
/// inspection of the zero-sum property.
pub fn encode_centered<T: Scalar>(x: &[T], gates: &GateTable, cfg: &EncoderConfig) -> Result<Vec<T>> {
    cfg.validate(gates)?;
    check_len(x.len(), gates)?;
    let mut out = vec![T::zero(); gates.d_hidden];
    centered_sums(x, gates, T::of(cfg.gamma), &mut out);
    Ok(out)
}

/// Encodes one input vector into a non-negative hidden vector.
pub fn encode<T: Scalar>(x: &[T], gates: &GateTable, cfg: &EncoderConfig) -> Result<Vec<T>> {
    let mut h = encode_centered(x, gates, cfg)?;
    for v in h.iter_mut() {
        *v = v.max(T::zero());
    }
    Ok(h)
}

/// Row-wise [`encode`]; the mean is taken per sample, never over the batch.
pub fn encode_batch<T: Scalar>(
    x: ArrayView2<'_, T>,
    gates: &GateTable,
    cfg: &EncoderConfig,
) -> Result<Array2<T>> {
    cfg.validate(gates)?;
    check_len(x.ncols(), gates)?;
    let gamma = T::of(cfg.gamma);
    let mut h = Array2::zeros((x.nrows(), gates.d_hidden));
    let mut scratch: Vec<T> = Vec::new();
    for (xi, mut hi) in x.axis_iter(Axis(0)).zip(h.axis_iter_mut(Axis(0))) {
        let xs = match xi.as_slice() {
            Some(s) => s,
            None => {
                scratch.clear();
                scratch.extend(xi.iter().copied());
                &scratch
            }
        };
        let out = hi.as_slice_mut().expect("fresh array is contiguous");
        centered_sums(xs, gates, gamma, out);
        for v in out.iter_mut() {
            *v = v.max(T::zero());
        }
    }
    Ok(h)
}

/// Ragged batches cannot be expressed as a matrix; this entry point takes
/// rows as slices and reports the first row of the wrong length.
pub fn encode_rows<T: Scalar>(
    rows: &[&[T]],
    gates: &GateTable,
    cfg: &EncoderConfig,
) -> Result<Array2<T>> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != gates.d_in {
            return Err(shape_err(format!(
                "batch row {i} has length {}, expected {}",
                r.len(),
                gates.d_in
            )));
        }
    }
    let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let x = ArrayView2::from_shape((rows.len(), gates.d_in), &flat)
        .map_err(|e| shape_err(e.to_string()))?;
    encode_batch(x, gates, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> (GateTable, EncoderConfig) {
        let g = GateTable::from_rows(4, &[vec![0, 1], vec![2, 3]]).unwrap();
        (g, EncoderConfig::new(2, 2))
    }

    #[test]
    fn hand_example() {
        let (g, cfg) = toy();
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(encode_centered(&x, &g, &cfg).unwrap(), vec![-2.0, 2.0]);
        assert_eq!(encode(&x, &g, &cfg).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn zero_input_gives_zero() {
        let (g, cfg) = toy();
        assert_eq!(encode(&[0.0f64; 4], &g, &cfg).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gamma_zero_passes_sums() {
        let (g, mut cfg) = toy();
        cfg.gamma = 0.0;
        assert_eq!(encode(&[1.0f64, 2.0, 3.0, 4.0], &g, &cfg).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn negative_gamma_rejected() {
        let (g, mut cfg) = toy();
        cfg.gamma = -0.5;
        assert!(encode(&[0.0f64; 4], &g, &cfg).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let (g, cfg) = toy();
        assert!(matches!(
            encode(&[0.0f64; 3], &g, &cfg),
            Err(crate::CrwnError::Shape(_))
        ));
        let short = [0.0f64; 3];
        let full = [0.0f64; 4];
        assert!(matches!(
            encode_rows(&[&full[..], &short[..]], &g, &cfg),
            Err(crate::CrwnError::Shape(_))
        ));
    }

    #[test]
    fn batch_matches_single() {
        let (g, cfg) = toy();
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]];
        let h = encode_batch(x.view(), &g, &cfg).unwrap();
        assert_eq!(h, array![[0.0, 2.0], [0.0, 2.0]]);
        let one = encode_batch(x.slice(ndarray::s![0..1, ..]), &g, &cfg).unwrap();
        assert_eq!(one.row(0).to_vec(), encode(&[1.0, 2.0, 3.0, 4.0], &g, &cfg).unwrap());
    }

    #[test]
    fn batch_matches_loop_oracle() {
        let g = GateTable::generate(GateRecipe {
            seed: 5,
            d_in: 16,
            d_hidden: 40,
            n_in: 3,
        })
        .unwrap();
        let cfg = EncoderConfig::new(3, 40);
        let mut rng = RngStream::new(8, 8);
        let x = Array2::from_shape_simple_fn((8, 16), || rng.next_f64());
        let h = encode_batch(x.view(), &g, &cfg).unwrap();
        for b in 0..8 {
            // loop oracle straight from the definition
            let xb = x.row(b);
            let sums: Vec<f64> = (0..40)
                .map(|j| g.row(j).iter().map(|&i| xb[i as usize]).sum())
                .collect();
            let mu = sums.iter().sum::<f64>() / 40.0;
            for j in 0..40 {
                assert_eq!(h[[b, j]], (sums[j] - mu).max(0.0));
            }
        }
    }
}
