//! Interaction-tensor materialization and application.
//!
//! The central object is the n x n grid of p x d operators `W_ij(X)`: the
//! linear map carrying token j into output position i. `apply_tensor` is the
//! literal double sum `y_i = sum_j W_ij x_j`; everything else in the crate is
//! some factorized or implicit route to the same grid, so this module is the
//! common reference point the other paths are checked against.

use serde::{Deserialize, Serialize};

use crate::dynamics::LtiSystem;
use crate::error::{Error, Result};
use crate::linalg::RealMatrix;

/// Hard cap on materialized tensor length (memory grows as n^2 p d).
pub const MAX_MATERIALIZED_LEN: usize = 256;

/// An input sequence: d x n matrix whose columns are tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    tokens: RealMatrix,
}

impl SequenceBatch {
    pub fn new(tokens: RealMatrix) -> Result<Self> {
        if !tokens.is_finite() {
            return Err(Error::InvalidInput("sequence contains non-finite entries".into()));
        }
        Ok(SequenceBatch { tokens })
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let n = cols.len();
        let d = cols[0].len();
        if !cols.iter().all(|c| c.len() == d) {
            return Err(Error::ShapeError("ragged token columns".into()));
        }
        Self::new(RealMatrix::from_fn(d, n, |i, j| cols[j][i]))
    }

    pub fn dim(&self) -> usize {
        self.tokens.rows()
    }

    pub fn len(&self) -> usize {
        self.tokens.cols()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by RealMatrix construction
    }

    pub fn token(&self, j: usize) -> Vec<f64> {
        self.tokens.col(j)
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.tokens
    }
}

/// The materialized weight tensor: blocks[i][j] is the p x d operator from
/// token j to output i. Causal tensors keep blocks[i][j] = 0 (exactly) for
/// j > i; the upper triangle is stored as `None` and never allocated.
#[derive(Debug, Clone)]
pub struct InteractionTensor {
    n: usize,
    out_dim: usize,
    in_dim: usize,
    causal: bool,
    blocks: Vec<Option<RealMatrix>>, // row-major (i, j); None = exact zero block
}

impl InteractionTensor {
    pub fn from_blocks(blocks: Vec<Vec<RealMatrix>>, causal: bool) -> Result<Self> {
        let n = blocks.len();
        check_capacity(n)?;
        if blocks.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeError("tensor grid is not n x n".into()));
        }
        let out_dim = blocks[0][0].rows();
        let in_dim = blocks[0][0].cols();
        let mut store = Vec::with_capacity(n * n);
        for (i, row) in blocks.into_iter().enumerate() {
            for (j, b) in row.into_iter().enumerate() {
                if (b.rows(), b.cols()) != (out_dim, in_dim) {
                    return Err(Error::ShapeError(format!(
                        "block ({i},{j}) is {}x{}, expected {out_dim}x{in_dim}",
                        b.rows(),
                        b.cols()
                    )));
                }
                if !b.is_finite() {
                    return Err(Error::InvalidInput(format!("block ({i},{j}) non-finite")));
                }
                if causal && j > i && b.max_abs() != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "causal tensor has nonzero block at ({i},{j})"
                    )));
                }
                if causal && j > i {
                    store.push(None);
                } else {
                    store.push(Some(b));
                }
            }
        }
        Ok(InteractionTensor { n, out_dim, in_dim, causal, blocks: store })
    }

    pub(crate) fn empty(n: usize, out_dim: usize, in_dim: usize, causal: bool) -> Result<Self> {
        check_capacity(n)?;
        Ok(InteractionTensor { n, out_dim, in_dim, causal, blocks: vec![None; n * n] })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub(crate) fn set_block(&mut self, i: usize, j: usize, b: RealMatrix) {
        debug_assert_eq!((b.rows(), b.cols()), (self.out_dim, self.in_dim));
        self.blocks[i * self.n + j] = Some(b);
    }

    /// Block (i, j); zero blocks come back as an owned zero matrix.
    pub fn block(&self, i: usize, j: usize) -> RealMatrix {
        self.blocks[i * self.n + j]
            .clone()
            .unwrap_or_else(|| RealMatrix::zeros(self.out_dim, self.in_dim))
    }

    fn block_ref(&self, i: usize, j: usize) -> Option<&RealMatrix> {
        self.blocks[i * self.n + j].as_ref()
    }

    /// CSV dump: header `i,j,row,col,value`, rows sorted by (i, j, row, col),
    /// 1-based indices, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,row,col,value\n");
        for i in 0..self.n {
            for j in 0..self.n {
                let block = self.block(i, j);
                for r in 0..self.out_dim {
                    for c in 0..self.in_dim {
                        out.push_str(&format!(
                            "{},{},{},{},{:.16e}\n",
                            i + 1,
                            j + 1,
                            r + 1,
                            c + 1,
                            block.get(r, c)
                        ));
                    }
                }
            }
        }
        out
    }
}

fn check_capacity(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::ShapeError("tensor length must be >= 1".into()));
    }
    if n > MAX_MATERIALIZED_LEN {
        return Err(Error::CapacityError { n, limit: MAX_MATERIALIZED_LEN });
    }
    Ok(())
}

/// The lag-indexed operator family {W(tau)}_{tau=0..n-1} of an LTI system.
#[derive(Debug, Clone)]
pub struct ImpulseFamily {
    pub operators: Vec<RealMatrix>, // operators[tau] = W(tau)
}

impl ImpulseFamily {
    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn out_dim(&self) -> usize {
        self.operators[0].rows()
    }

    pub fn in_dim(&self) -> usize {
        self.operators[0].cols()
    }
}

/// y_i = sum_j W_ij x_j, the definition applied verbatim.
pub fn apply_tensor(w: &InteractionTensor, x: &SequenceBatch) -> Result<RealMatrix> {
    if w.in_dim() != x.dim() || w.len() != x.len() {
        return Err(Error::ShapeError(format!(
            "tensor ({}, d={}) vs sequence ({}, d={})",
            w.len(),
            w.in_dim(),
            x.len(),
            x.dim()
        )));
    }
    let n = w.len();
    let p = w.out_dim();
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        for j in 0..n {
            let Some(block) = w.block_ref(i, j) else { continue };
            let xj = x.token(j);
            let contrib = block.matvec(&xj);
            for r in 0..p {
                y.set(r, i, y.get(r, i) + contrib[r]);
            }
        }
    }
    Ok(y)
}

/// Materialize the causal tensor of a time-invariant system:
/// blocks[i][j] = C A^(i-j) B for j <= i, computed by iterated
/// multiplication (no spectral shortcut, so defective transitions stay exact).
pub fn materialize_lti(sys: &LtiSystem, n: usize) -> Result<InteractionTensor> {
    let family = impulse_family(sys, n)?;
    let mut tensor = InteractionTensor::empty(n, sys.out_dim(), sys.in_dim(), true)?;
    for i in 0..n {
        for j in 0..=i {
            tensor.set_block(i, j, family.operators[i - j].clone());
        }
    }
    Ok(tensor)
}

/// Materialize a selective (input-dependent) causal tensor from per-position
/// step maps: blocks[i][j] = C_i (prod_{k=j+1..i} A_k) B_j, the product over
/// an empty range being the identity.
pub fn materialize_selective(
    transitions: &[RealMatrix],
    input_maps: &[RealMatrix],
    output_maps: &[RealMatrix],
    n: usize,
) -> Result<InteractionTensor> {
    if transitions.len() != n || input_maps.len() != n || output_maps.len() != n {
        return Err(Error::ShapeError(format!(
            "expected {n} per-position maps, got ({}, {}, {})",
            transitions.len(),
            input_maps.len(),
            output_maps.len()
        )));
    }
    let m = transitions[0].rows();
    let d = input_maps[0].cols();
    let p = output_maps[0].rows();
    for (k, a) in transitions.iter().enumerate() {
        if (a.rows(), a.cols()) != (m, m) {
            return Err(Error::ShapeError(format!("transition {k} is not {m}x{m}")));
        }
    }
    for (k, b) in input_maps.iter().enumerate() {
        if (b.rows(), b.cols()) != (m, d) {
            return Err(Error::ShapeError(format!("input map {k} is not {m}x{d}")));
        }
    }
    for (k, c) in output_maps.iter().enumerate() {
        if (c.rows(), c.cols()) != (p, m) {
            return Err(Error::ShapeError(format!("output map {k} is not {p}x{m}")));
        }
    }

    let mut tensor = InteractionTensor::empty(n, p, d, true)?;
    for j in 0..n {
        // running product prod_{k=j+1..i} A_k, extended one step per i
        let mut prod_b = input_maps[j].clone(); // (prod over empty range) B_j
        for i in j..n {
            if i > j {
                prod_b = transitions[i].matmul(&prod_b);
            }
            tensor.set_block(i, j, output_maps[i].matmul(&prod_b));
        }
    }
    Ok(tensor)
}

/// Blockwise distance between two tensors:
/// max over (i,j) of ||W1_ij - W2_ij||_F, and the total Frobenius distance.
pub fn kernel_distance(w1: &InteractionTensor, w2: &InteractionTensor) -> Result<KernelDistance> {
    if w1.len() != w2.len() || w1.out_dim() != w2.out_dim() || w1.in_dim() != w2.in_dim() {
        return Err(Error::ShapeError("kernel_distance: shape mismatch".into()));
    }
    let n = w1.len();
    let mut max_block = 0.0f64;
    let mut worst = (0, 0);
    let mut total_sq = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let diff_sq = match (w1.block_ref(i, j), w2.block_ref(i, j)) {
                (None, None) => 0.0,
                (Some(a), None) => a.frobenius_norm().powi(2),
                (None, Some(b)) => b.frobenius_norm().powi(2),
                (Some(a), Some(b)) => a.sub(b).frobenius_norm().powi(2),
            };
            total_sq += diff_sq;
            let dist = diff_sq.sqrt();
            if dist > max_block {
                max_block = dist;
                worst = (i, j);
            }
        }
    }
    Ok(KernelDistance { max_block, frobenius_total: total_sq.sqrt(), worst_block: worst })
}

#[derive(Debug, Clone, Copy)]
pub struct KernelDistance {
    pub max_block: f64,
    pub frobenius_total: f64,
    /// (i, j) of the largest blockwise deviation, 0-based.
    pub worst_block: (usize, usize),
}

/// {W(tau) = C A^tau B}_{tau=0..n-1} by repeated multiplication.
pub fn impulse_family(sys: &LtiSystem, n: usize) -> Result<ImpulseFamily> {
    if n == 0 {
        return Err(Error::ShapeError("impulse family length must be >= 1".into()));
    }
    let mut operators = Vec::with_capacity(n);
    let mut state_map = sys.input_map().clone(); // A^tau B
    operators.push(sys.output_map().matmul(&state_map));
    for _ in 1..n {
        state_map = sys.transition().matmul(&state_map);
        operators.push(sys.output_map().matmul(&state_map));
    }
    Ok(ImpulseFamily { operators })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LtiSystem;
    use crate::rank::theorem1_witness;
    use crate::rng::SeedRng;

    fn random_causal_tensor(rng: &mut SeedRng, n: usize, p: usize, d: usize) -> InteractionTensor {
        let blocks: Vec<Vec<RealMatrix>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if j > i {
                            RealMatrix::zeros(p, d)
                        } else {
                            rng.normal_matrix(p, d, 1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        InteractionTensor::from_blocks(blocks, true).unwrap()
    }

    #[test]
    fn identity_diagonal_tensor_acts_as_identity() {
        let n = 4;
        let d = 3;
        let blocks: Vec<Vec<RealMatrix>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { RealMatrix::identity(d) } else { RealMatrix::zeros(d, d) })
                    .collect()
            })
            .collect();
        let w = InteractionTensor::from_blocks(blocks, true).unwrap();
        let mut rng = SeedRng::new(3);
        let x = SequenceBatch::new(rng.normal_matrix(d, n, 1.0)).unwrap();
        let y = apply_tensor(&w, &x).unwrap();
        assert!(y.sub(x.matrix()).max_abs() < 1e-15);
    }

    #[test]
    fn witness_tensor_maps_probe_to_rotated_basis() {
        // On X = [e1, 0, ...], the witness system must produce y1 = e1, y2 = e2.
        let sys = theorem1_witness();
        let w = materialize_lti(&sys, 4).unwrap();
        let mut cols = vec![vec![0.0, 0.0]; 4];
        cols[0] = vec![1.0, 0.0];
        let x = SequenceBatch::from_columns(&cols).unwrap();
        let y = apply_tensor(&w, &x).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-15 && y.get(1, 0).abs() < 1e-15);
        assert!(y.get(0, 1).abs() < 1e-15 && (y.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn causal_tensor_propagates_no_zero_prefix() {
        // If x_j = 0 for j <= i0, then y_i = 0 for i <= i0.
        let mut rng = SeedRng::new(11);
        let (n, p, d, i0) = (6, 2, 3, 2);
        let w = random_causal_tensor(&mut rng, n, p, d);
        let x_mat = rng.normal_matrix(d, n, 1.0);
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| x_mat.col(j)).collect();
        for col in cols.iter_mut().take(i0 + 1) {
            col.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = SequenceBatch::from_columns(&cols).unwrap();
        let y = apply_tensor(&w, &x).unwrap();
        for i in 0..=i0 {
            for r in 0..p {
                assert_eq!(y.get(r, i), 0.0);
            }
        }
    }

    #[test]
    fn materialize_lti_nilpotent_degree_one() {
        // A = 0: only the diagonal blocks C B survive.
        let sys = LtiSystem::new(
            RealMatrix::zeros(2, 2),
            RealMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]),
            RealMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]),
        )
        .unwrap();
        let w = materialize_lti(&sys, 3).unwrap();
        let cb = sys.output_map().matmul(sys.input_map());
        for i in 0..3 {
            for j in 0..3 {
                let b = w.block(i, j);
                if i == j {
                    assert!(b.sub(&cb).max_abs() < 1e-15);
                } else {
                    assert_eq!(b.max_abs(), 0.0);
                }
            }
        }
    }

    #[test]
    fn materialize_lti_witness_blocks() {
        let sys = theorem1_witness();
        let w = materialize_lti(&sys, 3).unwrap();
        let rot = sys.transition();
        for i in 0..3 {
            assert!(w.block(i, i).sub(&RealMatrix::identity(2)).max_abs() < 1e-15);
            if i + 1 < 3 {
                assert!(w.block(i + 1, i).sub(rot).max_abs() < 1e-15);
            }
        }
    }

    #[test]
    fn materialize_lti_scalar_power() {
        // A = 0.5 I, B = C = I: block at lag 3 is 0.125 I.
        let sys = LtiSystem::new(
            RealMatrix::identity(2).scaled(0.5),
            RealMatrix::identity(2),
            RealMatrix::identity(2),
        )
        .unwrap();
        let w = materialize_lti(&sys, 5).unwrap();
        assert!(w.block(4, 1).sub(&RealMatrix::identity(2).scaled(0.125)).max_abs() < 1e-15);
    }

    #[test]
    fn selective_with_constant_maps_equals_lti() {
        let mut rng = SeedRng::new(5);
        let (m, d, p, n) = (3, 2, 2, 6);
        let sys = LtiSystem::new(
            rng.normal_matrix(m, m, 0.4),
            rng.normal_matrix(m, d, 1.0),
            rng.normal_matrix(p, m, 1.0),
        )
        .unwrap();
        let selective = materialize_selective(
            &vec![sys.transition().clone(); n],
            &vec![sys.input_map().clone(); n],
            &vec![sys.output_map().clone(); n],
            n,
        )
        .unwrap();
        let lti = materialize_lti(&sys, n).unwrap();
        let dist = kernel_distance(&selective, &lti).unwrap();
        assert!(dist.max_block < 1e-12, "max block {:.3e}", dist.max_block);
    }

    #[test]
    fn selective_alternating_zero_transitions_cut_the_product() {
        // A_k alternates {I, 0}: any product crossing a zero step vanishes.
        let (m, n) = (2, 5);
        let transitions: Vec<RealMatrix> = (0..n)
            .map(|k| if k % 2 == 0 { RealMatrix::identity(m) } else { RealMatrix::zeros(m, m) })
            .collect();
        let maps = vec![RealMatrix::identity(m); n];
        let w = materialize_selective(&transitions, &maps, &maps, n).unwrap();
        for i in 0..n {
            for j in 0..=i {
                // product over k in (j, i]; zero iff some odd k lies in it
                let crosses_zero = ((j + 1)..=i).any(|k| k % 2 == 1);
                let is_zero = w.block(i, j).max_abs() == 0.0;
                assert_eq!(is_zero, crosses_zero, "block ({i},{j})");
            }
        }
    }

    #[test]
    fn selective_single_position_is_cb() {
        let mut rng = SeedRng::new(9);
        let (m, d, p) = (3, 2, 4);
        let a = vec![rng.normal_matrix(m, m, 1.0)];
        let b = vec![rng.normal_matrix(m, d, 1.0)];
        let c = vec![rng.normal_matrix(p, m, 1.0)];
        let w = materialize_selective(&a, &b, &c, 1).unwrap();
        assert!(w.block(0, 0).sub(&c[0].matmul(&b[0])).max_abs() < 1e-15);
    }

    #[test]
    fn kernel_distance_self_is_zero() {
        let mut rng = SeedRng::new(13);
        let w = random_causal_tensor(&mut rng, 4, 2, 2);
        let dist = kernel_distance(&w, &w).unwrap();
        assert_eq!(dist.max_block, 0.0);
        assert_eq!(dist.frobenius_total, 0.0);
    }

    #[test]
    fn kernel_distance_identity_vs_zero_hand_value() {
        // n=2, p=d=2: two diagonal identity blocks, each ||I||_F = sqrt(2),
        // so the total distance is sqrt(2 + 2) = 2.
        let n = 2;
        let blocks: Vec<Vec<RealMatrix>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { RealMatrix::identity(2) } else { RealMatrix::zeros(2, 2) })
                    .collect()
            })
            .collect();
        let eye = InteractionTensor::from_blocks(blocks, true).unwrap();
        let zero = InteractionTensor::empty(n, 2, 2, true).unwrap();
        let dist = kernel_distance(&eye, &zero).unwrap();
        assert!((dist.frobenius_total - 2.0).abs() < 1e-15);
        assert!((dist.max_block - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn impulse_family_of_witness_cycles_through_rotations() {
        let sys = theorem1_witness();
        let fam = impulse_family(&sys, 4).unwrap();
        let rot = sys.transition();
        let expect = [
            RealMatrix::identity(2),
            rot.clone(),
            RealMatrix::identity(2).scaled(-1.0),
            rot.scaled(-1.0),
        ];
        for (tau, want) in expect.iter().enumerate() {
            assert!(fam.operators[tau].sub(want).max_abs() < 1e-15, "lag {tau}");
        }
    }

    #[test]
    fn impulse_family_identity_transition_is_constant() {
        let mut rng = SeedRng::new(21);
        let sys = LtiSystem::new(
            RealMatrix::identity(3),
            rng.normal_matrix(3, 2, 1.0),
            rng.normal_matrix(2, 3, 1.0),
        )
        .unwrap();
        let fam = impulse_family(&sys, 5).unwrap();
        let cb = sys.output_map().matmul(sys.input_map());
        for op in &fam.operators {
            assert!(op.sub(&cb).max_abs() < 1e-15);
        }
    }

    #[test]
    fn impulse_family_scalar_geometric() {
        let sys = LtiSystem::new(
            RealMatrix::new(1, 1, vec![0.5]).unwrap(),
            RealMatrix::new(1, 2, vec![1.0, 2.0]).unwrap(),
            RealMatrix::new(3, 1, vec![1.0, 0.0, -1.0]).unwrap(),
        )
        .unwrap();
        let fam = impulse_family(&sys, 6).unwrap();
        let cb = sys.output_map().matmul(sys.input_map());
        for (tau, op) in fam.operators.iter().enumerate() {
            assert!(op.sub(&cb.scaled(0.5f64.powi(tau as i32))).max_abs() < 1e-15);
        }
    }

    #[test]
    fn capacity_guard_rejects_oversized_tensors() {
        let sys = theorem1_witness();
        match materialize_lti(&sys, MAX_MATERIALIZED_LEN + 1) {
            Err(Error::CapacityError { n, limit }) => {
                assert_eq!(n, MAX_MATERIALIZED_LEN + 1);
                assert_eq!(limit, MAX_MATERIALIZED_LEN);
            }
            other => panic!("expected CapacityError, got {other:?}"),
        }
    }

    #[test]
    fn apply_tensor_rejects_shape_mismatch() {
        let sys = theorem1_witness();
        let w = materialize_lti(&sys, 3).unwrap();
        let x = SequenceBatch::new(RealMatrix::zeros(3, 3)).unwrap();
        assert!(matches!(apply_tensor(&w, &x), Err(Error::ShapeError(_))));
    }

    #[test]
    fn tensor_csv_is_sorted_and_headed() {
        let sys = theorem1_witness();
        let w = materialize_lti(&sys, 2).unwrap();
        let csv = w.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "i,j,row,col,value");
        let keys: Vec<Vec<u32>> = lines
            .map(|l| l.split(',').take(4).map(|t| t.parse().unwrap()).collect())
            .collect();
        assert_eq!(keys.len(), 2 * 2 * 2 * 2);
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
