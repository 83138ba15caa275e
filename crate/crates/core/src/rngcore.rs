//! Seeded, platform-independent randomness for every fixed structure in a
//! model: Gaussian bases, encoder gate sets, pixel permutations, class
//! splits and batch shuffles.
//!
//! Each structure draws from its own [`RngStream`], a ChaCha8 keystream
//! keyed by the run seed and positioned on a stream id derived from a
//! purpose label plus layer and task indices. Adding a layer or a task
//! therefore never shifts the values another structure sees.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::flyenc::GateTable;
use crate::scalar::Scalar;

/// What a stream is used for. The label takes part in stream-id derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Basis,
    Gates,
    Permutation,
    Split,
    Shuffle,
}

impl Purpose {
    pub fn label(self) -> &'static str {
        match self {
            Purpose::Basis => "basis",
            Purpose::Gates => "gates",
            Purpose::Permutation => "permutation",
            Purpose::Split => "split",
            Purpose::Shuffle => "shuffle",
        }
    }
}

/// Stable 64-bit stream id for `(purpose, layer, task)`.
pub fn stream_id(purpose: Purpose, layer: u32, task: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"crwn/stream/");
    h.update(purpose.label().as_bytes());
    h.update(layer.to_le_bytes());
    h.update(task.to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// A deterministic random stream. Cloning forks the state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Stream positioned at the start of `(seed, stream_id)`.
    ///
    /// The ChaCha8 key is the SHA-256 digest of the little-endian seed and
    /// the stream id is used as the 64-bit ChaCha stream (nonce).
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
            spare_normal: None,
        }
    }

    pub fn derive(seed: u64, purpose: Purpose, layer: u32, task: u32) -> Self {
        Self::new(seed, stream_id(purpose, layer, task))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Standard normal sample. Box-Muller in pairs: every second call
    /// returns the cached sine branch, so consumption is exactly one
    /// uniform per normal.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. `Normal(0, std²)` entries in row-major
/// draw order.
pub fn gaussian_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut RngStream,
) -> Result<Array2<T>> {
    if rows == 0 || cols == 0 {
        return Err(config_err(format!(
            "gaussian matrix needs positive dimensions, got {rows}x{cols}"
        )));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(config_err(format!(
            "gaussian std must be positive, got {std}"
        )));
    }
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        T::of(std * rng.next_normal())
    }))
}

/// For each of `d_hidden` nodes, `n_in` distinct input indices drawn
/// uniformly without replacement (Floyd's algorithm), stored sorted.
pub fn sample_gate_indices(
    d_in: usize,
    n_in: usize,
    d_hidden: usize,
    rng: &mut RngStream,
) -> Result<GateTable> {
    if n_in == 0 || n_in >= d_in {
        return Err(config_err(format!(
            "gate fan-in must satisfy 1 <= n_in < d_in, got n_in={n_in}, d_in={d_in}"
        )));
    }
    if d_hidden == 0 {
        return Err(config_err("encoder needs at least one hidden node"));
    }
    if d_in > u32::MAX as usize {
        return Err(config_err("input dimension exceeds u32 index range"));
    }
    let mut indices = Vec::with_capacity(d_hidden * n_in);
    let mut row: Vec<u32> = Vec::with_capacity(n_in);
    for _ in 0..d_hidden {
        row.clear();
        for j in (d_in - n_in)..d_in {
            let t = rng.below(j as u64 + 1) as u32;
            if row.contains(&t) {
                row.push(j as u32);
            } else {
                row.push(t);
            }
        }
        row.sort_unstable();
        indices.extend_from_slice(&row);
    }
    GateTable::from_flat(d_in, n_in, d_hidden, indices)
}

/// Uniform random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(config_err("permutation length must be positive"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_streams_repeat() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_stream_ids_share_no_prefix() {
        let mut a = RngStream::derive(11, Purpose::Basis, 0, 0);
        let mut b = RngStream::derive(11, Purpose::Gates, 0, 0);
        let mut c = RngStream::derive(11, Purpose::Basis, 1, 0);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_ne!(xa[0], xb[0]);
        assert_ne!(xa[0], xc[0]);
        assert!(xa.iter().all(|x| !xb.contains(x) && !xc.contains(x)));
    }

    #[test]
    fn clone_forks_state() {
        let mut a = RngStream::new(5, 9);
        a.next_u64();
        let mut b = a.clone();
        assert_eq!(a.next_normal(), b.next_normal());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(1, 1);
        for n in [1u64, 2, 3, 7, 784, 1 << 40] {
            for _ in 0..200 {
                assert!(r.below(n) < n);
            }
        }
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a: Array2<f64> = gaussian_matrix(2, 2, 1.0, &mut RngStream::new(7, 0)).unwrap();
        let b: Array2<f64> = gaussian_matrix(2, 2, 1.0, &mut RngStream::new(7, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_matrix_moments() {
        let m: Array2<f64> =
            gaussian_matrix(1000, 1000, 1.0, &mut RngStream::derive(3, Purpose::Basis, 0, 0))
                .unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_matrix_tail_bound() {
        let std = 0.05;
        let m: Array2<f64> = gaussian_matrix(3, 4, std, &mut RngStream::new(1, 0)).unwrap();
        let bound = 10.0 * std * (2.0 * 12f64.ln()).sqrt();
        assert!(m.iter().all(|x| x.abs() < bound));
        assert!(m.iter().all(|x| x.abs() < 0.5));
    }

    #[test]
    fn gaussian_matrix_rejects_bad_arguments() {
        let mut r = RngStream::new(0, 0);
        assert!(gaussian_matrix::<f64>(0, 3, 1.0, &mut r).is_err());
        assert!(gaussian_matrix::<f64>(3, 0, 1.0, &mut r).is_err());
        assert!(gaussian_matrix::<f64>(3, 3, 0.0, &mut r).is_err());
        assert!(gaussian_matrix::<f64>(3, 3, -1.0, &mut r).is_err());
    }

    #[test]
    fn gate_fan_in_must_be_below_input_dim() {
        let mut r = RngStream::new(0, 0);
        assert!(sample_gate_indices(4, 4, 3, &mut r).is_err());
        assert!(sample_gate_indices(4, 0, 3, &mut r).is_err());
        assert!(sample_gate_indices(4, 2, 0, &mut r).is_err());
    }

    #[test]
    fn gate_rows_are_distinct_and_in_range() {
        let mut r = RngStream::derive(1, Purpose::Gates, 0, 0);
        let g = sample_gate_indices(784, 7, 7840, &mut r).unwrap();
        for j in 0..7840 {
            let row = g.row(j);
            assert_eq!(row.len(), 7);
            assert!(row.iter().all(|&i| (i as usize) < 784));
            assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn gate_selection_is_uniform() {
        let mut r = RngStream::derive(2, Purpose::Gates, 0, 0);
        let g = sample_gate_indices(10, 3, 10_000, &mut r).unwrap();
        let mut counts = [0usize; 10];
        for j in 0..10_000 {
            for &i in g.row(j) {
                counts[i as usize] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.3).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn permutations() {
        let mut r = RngStream::new(4, 4);
        assert_eq!(random_permutation(1, &mut r).unwrap(), vec![0]);
        assert!(random_permutation(0, &mut r).is_err());
        let p1 = random_permutation(784, &mut RngStream::new(9, 1)).unwrap();
        let p2 = random_permutation(784, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(p1, p2);
        let mut sorted = p1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
    }
}
