//! Seeded, splittable randomness.
//!
//! Every random draw in the crate flows through `SeedRng`, a splitmix64
//! generator with 64 bits of state. `split` derives an independent child
//! stream from a label, so components (sweep cells, fitter starts, probe
//! streams) get their own deterministic substream and runs reproduce
//! bit-identically for a fixed root seed.

use crate::linalg::RealMatrix;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct SeedRng {
    state: u64,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng { state: seed }
    }

    /// Derive an independent child stream tagged by `label`.
    pub fn split(&self, label: u64) -> SeedRng {
        let mut probe = SeedRng {
            state: self.state.wrapping_add(label.wrapping_mul(GOLDEN) ^ 0x5851_f42d_4c95_7f2d),
        };
        SeedRng::new(probe.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (one draw per two uniforms; the spare
    /// is discarded to keep the stream position independent of call parity).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Matrix with iid standard normal entries scaled by `scale`.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> RealMatrix {
        RealMatrix::from_fn(rows, cols, |_, _| scale * self.normal())
    }

    /// Matrix with iid uniform entries in [-scale, scale].
    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> RealMatrix {
        RealMatrix::from_fn(rows, cols, |_, _| self.range(-scale, scale))
    }

    /// Random n x n orthogonal matrix: modified Gram-Schmidt on a Gaussian
    /// draw, with one re-orthogonalization pass.
    pub fn orthogonal(&mut self, n: usize) -> RealMatrix {
        loop {
            let g = self.normal_matrix(n, n, 1.0);
            if let Some(q) = gram_schmidt(&g) {
                return q;
            }
        }
    }
}

fn gram_schmidt(g: &RealMatrix) -> Option<RealMatrix> {
    let n = g.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| g.col(j)).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                for r in 0..n {
                    cols[j][r] -= dot * cols[i][r];
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None; // numerically dependent draw; caller retries
        }
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    Some(RealMatrix::from_fn(n, n, |r, c| cols[c][r]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_reproduce_streams() {
        let mut a = SeedRng::new(42);
        let mut b = SeedRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_are_independent_of_parent_position() {
        let parent = SeedRng::new(7);
        let mut c1 = parent.split(3);
        let mut c2 = parent.split(3);
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = parent.split(4);
        assert_ne!(c1.next_u64(), other.next_u64());
    }

    #[test]
    fn orthogonal_matrix_has_orthonormal_columns() {
        let mut rng = SeedRng::new(11);
        let q = rng.orthogonal(6);
        let qtq = q.transpose().matmul(&q);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SeedRng::new(5);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
