//! Factorized (attention-style) models: a scalar weight matrix A(X) paired
//! with one shared value matrix per head, applied as Y = V X A(X)^T.
//!
//! Generators cover the static kinds (identity, banded Toeplitz), the
//! content-dependent kinds (softmax attention, linear attention, separable
//! bases), and positional tables whose weights are inner products of
//! learnable per-position features. Causality for table-based generators is
//! enforced by explicit masking after the inner product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{InteractionTensor, SequenceBatch};
use crate::linalg::RealMatrix;
use crate::rng::SeedRng;

/// An n x n scalar weight matrix together with the structure flags the
/// generators guarantee.
#[derive(Debug, Clone)]
pub struct ScalarWeightMatrix {
    pub matrix: RealMatrix,
    pub causal: bool,
    pub row_stochastic: bool,
}

impl ScalarWeightMatrix {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Vector-valued feature map for linear attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    /// x -> M x.
    Linear { matrix: RealMatrix },
    /// x -> fixed vector, regardless of content.
    Constant { values: Vec<f64> },
}

impl FeatureMap {
    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => in_dim,
            FeatureMap::Linear { matrix } => matrix.rows(),
            FeatureMap::Constant { values } => values.len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::Linear { matrix } => matrix.matvec(x),
            FeatureMap::Constant { values } => values.clone(),
        }
    }
}

/// Scalar-valued basis functions for separable (KAN-style) weights; a small
/// closed vocabulary so configurations stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarBasis {
    Const { value: f64 },
    /// x -> x[index].
    Coordinate { index: usize },
    /// x -> sum_k coeffs[k] * (w . x + bias)^k, degree <= 3.
    Polynomial { weights: Vec<f64>, bias: f64, coeffs: Vec<f64> },
    /// x -> tanh(w . x + bias).
    Tanh { weights: Vec<f64>, bias: f64 },
}

impl ScalarBasis {
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        match self {
            ScalarBasis::Const { value } => Ok(*value),
            ScalarBasis::Coordinate { index } => x.get(*index).copied().ok_or_else(|| {
                Error::ShapeError(format!("coordinate {index} out of range for d={}", x.len()))
            }),
            ScalarBasis::Polynomial { weights, bias, coeffs } => {
                if coeffs.len() > 4 {
                    return Err(Error::InvalidInput("polynomial degree above 3".into()));
                }
                let z = dot(weights, x)? + bias;
                Ok(coeffs.iter().enumerate().map(|(k, c)| c * z.powi(k as i32)).sum())
            }
            ScalarBasis::Tanh { weights, bias } => Ok((dot(weights, x)? + bias).tanh()),
        }
    }
}

fn dot(w: &[f64], x: &[f64]) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::ShapeError(format!(
            "functional weight length {} vs input dim {}",
            w.len(),
            x.len()
        )));
    }
    Ok(w.iter().zip(x).map(|(a, b)| a * b).sum())
}

/// How a head's scalar weights are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightGenerator {
    /// A = I (tokenwise map).
    Identity,
    /// Banded Toeplitz: A[i][j] = taps[radius + i - j] when |i - j| <= radius.
    /// Purely causal kernels set the negative-lag taps to zero.
    Toeplitz { radius: usize, taps: Vec<f64> },
    /// Row-stochastic attention weights from query-key logits.
    SoftmaxAttention { w_q: RealMatrix, w_k: RealMatrix, scale: f64, causal: bool },
    /// A[i][j] = phi(x_i) . psi(x_j), optionally masked causal.
    LinearAttention { phi: FeatureMap, psi: FeatureMap, causal: bool },
    /// A[i][j] = <Phi[i], Psi[j]> from learnable n x r tables, masked causal
    /// after the inner product when the flag is set.
    PositionalTable { phi: RealMatrix, psi: RealMatrix, causal: bool },
    /// A[i][j] = sum_m g_m(x_i) h_m(x_j) (global, non-causal).
    SeparableKan { pairs: Vec<(ScalarBasis, ScalarBasis)> },
}

impl WeightGenerator {
    /// True when the weights depend only on positions (no token content).
    pub fn is_positional(&self) -> bool {
        matches!(
            self,
            WeightGenerator::Identity
                | WeightGenerator::Toeplitz { .. }
                | WeightGenerator::PositionalTable { .. }
        )
    }

    /// Scalar weights for a concrete input sequence.
    pub fn weights(&self, x: &SequenceBatch) -> Result<ScalarWeightMatrix> {
        match self {
            WeightGenerator::Identity => Ok(weights_mlp(x.len())),
            WeightGenerator::Toeplitz { radius, taps } => weights_cnn(taps, *radius, x.len()),
            WeightGenerator::SoftmaxAttention { w_q, w_k, scale, causal } => {
                weights_softmax_attention(x, w_q, w_k, *scale, *causal)
            }
            WeightGenerator::LinearAttention { phi, psi, causal } => {
                weights_linear_attention(x, phi, psi, *causal)
            }
            WeightGenerator::PositionalTable { .. } => self.positional_weights(x.len()),
            WeightGenerator::SeparableKan { pairs } => weights_kan(x, pairs),
        }
    }

    /// Scalar weights for position-only generators; content-dependent kinds
    /// have no weights without an input.
    pub fn positional_weights(&self, n: usize) -> Result<ScalarWeightMatrix> {
        match self {
            WeightGenerator::Identity => Ok(weights_mlp(n)),
            WeightGenerator::Toeplitz { radius, taps } => weights_cnn(taps, *radius, n),
            WeightGenerator::PositionalTable { phi, psi, causal } => {
                if phi.rows() != n || psi.rows() != n {
                    return Err(Error::ShapeError(format!(
                        "positional tables are length {} / {}, sequence is {n}",
                        phi.rows(),
                        psi.rows()
                    )));
                }
                if phi.cols() != psi.cols() {
                    return Err(Error::ShapeError("phi/psi widths differ".into()));
                }
                let mut a = phi.matmul(&psi.transpose());
                if *causal {
                    mask_causal(&mut a);
                }
                Ok(ScalarWeightMatrix { matrix: a, causal: *causal, row_stochastic: false })
            }
            _ => Err(Error::InvalidInput(
                "content-dependent generator has no positional weights".into(),
            )),
        }
    }
}

fn mask_causal(a: &mut RealMatrix) {
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            a.set(i, j, 0.0);
        }
    }
}

/// Tokenwise (identity) weights.
pub fn weights_mlp(n: usize) -> ScalarWeightMatrix {
    ScalarWeightMatrix { matrix: RealMatrix::identity(n), causal: true, row_stochastic: true }
}

/// Banded Toeplitz weights from a kernel tap vector indexed -radius..radius.
/// Boundary rows are truncated, never padded.
pub fn weights_cnn(taps: &[f64], radius: usize, n: usize) -> Result<ScalarWeightMatrix> {
    if taps.len() != 2 * radius + 1 {
        return Err(Error::ShapeError(format!(
            "kernel has {} taps, radius {radius} needs {}",
            taps.len(),
            2 * radius + 1
        )));
    }
    if 2 * radius + 1 > 2 * n - 1 {
        return Err(Error::InvalidInput(format!("kernel radius {radius} too wide for n={n}")));
    }
    let a = RealMatrix::from_fn(n, n, |i, j| {
        let lag = i as isize - j as isize;
        if lag.unsigned_abs() <= radius {
            taps[(radius as isize + lag) as usize]
        } else {
            0.0
        }
    });
    let causal = taps[..radius].iter().all(|&t| t == 0.0);
    Ok(ScalarWeightMatrix { matrix: a, causal, row_stochastic: false })
}

/// Row-stochastic softmax attention weights. Logits are q_i . k_j divided by
/// `scale`; each row subtracts its max logit before exponentiation so large
/// logits (the adversarial construction drives them to ~700) cannot overflow.
pub fn weights_softmax_attention(
    x: &SequenceBatch,
    w_q: &RealMatrix,
    w_k: &RealMatrix,
    scale: f64,
    causal: bool,
) -> Result<ScalarWeightMatrix> {
    if w_q.cols() != x.dim() || w_k.cols() != x.dim() {
        return Err(Error::ShapeError(format!(
            "projections expect d={}/{}, sequence has d={}",
            w_q.cols(),
            w_k.cols(),
            x.dim()
        )));
    }
    if w_q.rows() != w_k.rows() {
        return Err(Error::ShapeError("query/key dims differ".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidInput("scale must be positive".into()));
    }
    let n = x.len();
    let queries: Vec<Vec<f64>> = (0..n).map(|i| w_q.matvec(&x.token(i))).collect();
    let keys: Vec<Vec<f64>> = (0..n).map(|j| w_k.matvec(&x.token(j))).collect();
    let mut a = RealMatrix::zeros(n, n);
    for i in 0..n {
        let limit = if causal { i + 1 } else { n };
        let logits: Vec<f64> = (0..limit)
            .map(|j| queries[i].iter().zip(&keys[j]).map(|(q, k)| q * k).sum::<f64>() / scale)
            .collect();
        let max_logit = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
        let exps: Vec<f64> = logits.iter().map(|l| (l - max_logit).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..limit {
            a.set(i, j, exps[j] / total);
        }
    }
    Ok(ScalarWeightMatrix { matrix: a, causal, row_stochastic: true })
}

/// Kernelized weights A[i][j] = phi(x_i) . psi(x_j); the causal mask is
/// applied after the inner product.
pub fn weights_linear_attention(
    x: &SequenceBatch,
    phi: &FeatureMap,
    psi: &FeatureMap,
    causal: bool,
) -> Result<ScalarWeightMatrix> {
    let n = x.len();
    let r_phi = phi.out_dim(x.dim());
    let r_psi = psi.out_dim(x.dim());
    if r_phi != r_psi {
        return Err(Error::ShapeError(format!("feature widths differ: {r_phi} vs {r_psi}")));
    }
    let phis: Vec<Vec<f64>> = (0..n).map(|i| phi.apply(&x.token(i))).collect();
    let psis: Vec<Vec<f64>> = (0..n).map(|j| psi.apply(&x.token(j))).collect();
    let mut a =
        RealMatrix::from_fn(n, n, |i, j| phis[i].iter().zip(&psis[j]).map(|(p, q)| p * q).sum());
    if causal {
        mask_causal(&mut a);
    }
    Ok(ScalarWeightMatrix { matrix: a, causal, row_stochastic: false })
}

fn weights_kan(x: &SequenceBatch, pairs: &[(ScalarBasis, ScalarBasis)]) -> Result<ScalarWeightMatrix> {
    let n = x.len();
    let mut g_vals = vec![vec![0.0; pairs.len()]; n];
    let mut h_vals = vec![vec![0.0; pairs.len()]; n];
    for t in 0..n {
        let xt = x.token(t);
        for (m, (g, h)) in pairs.iter().enumerate() {
            g_vals[t][m] = g.evaluate(&xt)?;
            h_vals[t][m] = h.evaluate(&xt)?;
        }
    }
    let a = RealMatrix::from_fn(n, n, |i, j| {
        g_vals[i].iter().zip(&h_vals[j]).map(|(g, h)| g * h).sum()
    });
    Ok(ScalarWeightMatrix { matrix: a, causal: false, row_stochastic: false })
}

/// Y = V X A^T.
pub fn apply_factorized(
    weights: &ScalarWeightMatrix,
    value: &RealMatrix,
    x: &SequenceBatch,
) -> Result<RealMatrix> {
    if weights.len() != x.len() {
        return Err(Error::ShapeError(format!(
            "weights are {} long, sequence is {}",
            weights.len(),
            x.len()
        )));
    }
    if value.cols() != x.dim() {
        return Err(Error::ShapeError(format!(
            "value matrix expects d={}, sequence has d={}",
            value.cols(),
            x.dim()
        )));
    }
    Ok(value.matmul(x.matrix()).matmul(&weights.matrix.transpose()))
}

/// Non-causal linear attention through the summary matrix:
/// S = sum_j psi(x_j) (V x_j)^T, then y_i = S^T phi(x_i). O(n r + r p) per
/// token instead of materializing the n x n weights.
pub fn apply_linear_attention_fast(
    x: &SequenceBatch,
    phi: &FeatureMap,
    psi: &FeatureMap,
    value: &RealMatrix,
) -> Result<RealMatrix> {
    if value.cols() != x.dim() {
        return Err(Error::ShapeError("value matrix dimension mismatch".into()));
    }
    let r = phi.out_dim(x.dim());
    if r != psi.out_dim(x.dim()) {
        return Err(Error::ShapeError("feature widths differ".into()));
    }
    let n = x.len();
    let p = value.rows();
    let mut summary = RealMatrix::zeros(r, p);
    for j in 0..n {
        let xj = x.token(j);
        let psi_j = psi.apply(&xj);
        let vx = value.matvec(&xj);
        for a in 0..r {
            for b in 0..p {
                summary.set(a, b, summary.get(a, b) + psi_j[a] * vx[b]);
            }
        }
    }
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        let phi_i = phi.apply(&x.token(i));
        let yi = summary.transpose().matvec(&phi_i);
        for b in 0..p {
            y.set(b, i, yi[b]);
        }
    }
    Ok(y)
}

/// Separable-basis application through the r content channels:
/// C_m = sum_j h_m(x_j) V x_j, then y_i = sum_m g_m(x_i) C_m.
pub fn apply_kan(
    x: &SequenceBatch,
    pairs: &[(ScalarBasis, ScalarBasis)],
    value: &RealMatrix,
) -> Result<RealMatrix> {
    if value.cols() != x.dim() {
        return Err(Error::ShapeError("value matrix dimension mismatch".into()));
    }
    let n = x.len();
    let p = value.rows();
    let mut channels = vec![vec![0.0; p]; pairs.len()];
    for j in 0..n {
        let xj = x.token(j);
        let vx = value.matvec(&xj);
        for (m, (_, h)) in pairs.iter().enumerate() {
            let hv = h.evaluate(&xj)?;
            for b in 0..p {
                channels[m][b] += hv * vx[b];
            }
        }
    }
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        let xi = x.token(i);
        for (m, (g, _)) in pairs.iter().enumerate() {
            let gv = g.evaluate(&xi)?;
            for b in 0..p {
                y.set(b, i, y.get(b, i) + gv * channels[m][b]);
            }
        }
    }
    Ok(y)
}

/// How a head's value matrix is initialized when loading a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ValueInit {
    Explicit { matrix: RealMatrix },
    /// Entries uniform in [-1/sqrt(d), 1/sqrt(d)], drawn from the model seed
    /// split by head index.
    ScaledUniform { rows: usize, cols: usize },
}

/// One factorized head: a value matrix and its weight generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedHead {
    pub value: RealMatrix,
    pub generator: WeightGenerator,
}

/// Sum-of-heads factorized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadModel {
    pub heads: Vec<FactorizedHead>,
}

impl MultiHeadModel {
    pub fn new(heads: Vec<FactorizedHead>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidInput("model needs at least one head".into()));
        }
        let (p, d) = (heads[0].value.rows(), heads[0].value.cols());
        for (h, head) in heads.iter().enumerate() {
            if (head.value.rows(), head.value.cols()) != (p, d) {
                return Err(Error::ShapeError(format!("head {h} value shape differs")));
            }
        }
        Ok(MultiHeadModel { heads })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn out_dim(&self) -> usize {
        self.heads[0].value.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0].value.cols()
    }

    pub fn is_positional(&self) -> bool {
        self.heads.iter().all(|h| h.generator.is_positional())
    }

    /// Materialize the model kernel K_ij = sum_h alpha^h_ij V_h as an
    /// interaction tensor. Positional generators only.
    pub fn kernel(&self, n: usize) -> Result<InteractionTensor> {
        let (p, d) = (self.out_dim(), self.in_dim());
        let mut blocks = vec![vec![RealMatrix::zeros(p, d); n]; n];
        let mut causal = true;
        for head in &self.heads {
            let weights = head.generator.positional_weights(n)?;
            causal &= weights.causal;
            for i in 0..n {
                for j in 0..n {
                    let alpha = weights.matrix.get(i, j);
                    if alpha != 0.0 {
                        blocks[i][j] = blocks[i][j].add(&head.value.scaled(alpha));
                    }
                }
            }
        }
        InteractionTensor::from_blocks(blocks, causal)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_config())?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.build()
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            head_count: self.heads.len(),
            seed: 0,
            heads: self
                .heads
                .iter()
                .map(|h| HeadConfig {
                    value: ValueInit::Explicit { matrix: h.value.clone() },
                    generator: h.generator.clone(),
                })
                .collect(),
        }
    }
}

/// On-disk model description: head count, per-head generator parameters, a
/// value-initialization mode per head, and the seed used for seeded modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head_count: usize,
    pub seed: u64,
    pub heads: Vec<HeadConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub value: ValueInit,
    pub generator: WeightGenerator,
}

impl ModelConfig {
    pub fn build(&self) -> Result<MultiHeadModel> {
        if self.heads.len() != self.head_count {
            return Err(Error::ShapeError(format!(
                "config declares {} heads but lists {}",
                self.head_count,
                self.heads.len()
            )));
        }
        let root = SeedRng::new(self.seed);
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, cfg)| {
                let value = match &cfg.value {
                    ValueInit::Explicit { matrix } => matrix.clone(),
                    ValueInit::ScaledUniform { rows, cols } => {
                        let mut rng = root.split(h as u64);
                        rng.uniform_matrix(*rows, *cols, 1.0 / (*cols as f64).sqrt())
                    }
                };
                FactorizedHead { value, generator: cfg.generator.clone() }
            })
            .collect();
        MultiHeadModel::new(heads)
    }
}

/// Sum of per-head factorized applications.
pub fn apply_multihead(model: &MultiHeadModel, x: &SequenceBatch) -> Result<RealMatrix> {
    let mut y = RealMatrix::zeros(model.out_dim(), x.len());
    for head in &model.heads {
        let weights = head.generator.weights(x)?;
        y = y.add(&apply_factorized(&weights, &head.value, x)?);
    }
    Ok(y)
}

/// Concatenation form of multi-head attention: each head h produces
/// z^h = V_h X A_h^T, the stack [z^1; ...; z^H] is multiplied by the output
/// matrix W_O. Equivalent to the sum form after absorbing the W_O block of
/// each head into its value matrix.
pub fn apply_multihead_concat(
    heads: &[(RealMatrix, WeightGenerator)],
    w_o: &RealMatrix,
    x: &SequenceBatch,
) -> Result<RealMatrix> {
    if heads.is_empty() {
        return Err(Error::InvalidInput("no heads".into()));
    }
    let head_dim = heads[0].0.rows();
    if w_o.cols() != head_dim * heads.len() {
        return Err(Error::ShapeError(format!(
            "output matrix has {} cols, heads stack to {}",
            w_o.cols(),
            head_dim * heads.len()
        )));
    }
    let n = x.len();
    let mut stacked = RealMatrix::zeros(head_dim * heads.len(), n);
    for (h, (value, generator)) in heads.iter().enumerate() {
        if value.rows() != head_dim {
            return Err(Error::ShapeError("head dims differ".into()));
        }
        let weights = generator.weights(x)?;
        let z = apply_factorized(&weights, value, x)?;
        for r in 0..head_dim {
            for c in 0..n {
                stacked.set(h * head_dim + r, c, z.get(r, c));
            }
        }
    }
    Ok(w_o.matmul(&stacked))
}

/// The rank-1 tensor blocks alpha_ij * V of a single head, for checking the
/// factorized path against the materialized path.
pub fn scalar_weights_to_tensor(
    weights: &ScalarWeightMatrix,
    value: &RealMatrix,
) -> Result<InteractionTensor> {
    let n = weights.len();
    let blocks = (0..n)
        .map(|i| (0..n).map(|j| value.scaled(weights.matrix.get(i, j))).collect())
        .collect();
    InteractionTensor::from_blocks(blocks, weights.causal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::apply_tensor;

    fn seq(rng: &mut SeedRng, d: usize, n: usize) -> SequenceBatch {
        SequenceBatch::new(rng.normal_matrix(d, n, 1.0)).unwrap()
    }

    #[test]
    fn mlp_weights_are_identity() {
        assert_eq!(weights_mlp(1).matrix, RealMatrix::identity(1));
        assert_eq!(weights_mlp(3).matrix, RealMatrix::identity(3));
        let mut rng = SeedRng::new(1);
        let x = seq(&mut rng, 3, 4);
        let v = rng.normal_matrix(2, 3, 1.0);
        let y = apply_factorized(&weights_mlp(4), &v, &x).unwrap();
        assert!(y.sub(&v.matmul(x.matrix())).max_abs() < 1e-14);
    }

    #[test]
    fn cnn_degenerate_kernel_is_identity() {
        let w = weights_cnn(&[1.0], 0, 5).unwrap();
        assert_eq!(w.matrix, RealMatrix::identity(5));
        assert!(w.causal);
    }

    #[test]
    fn cnn_kernel_substitution_example() {
        // taps c_{-1}=1, c_0=2, c_1=3 on n=3
        let w = weights_cnn(&[1.0, 2.0, 3.0], 1, 3).unwrap();
        let want =
            RealMatrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![3.0, 2.0, 1.0], vec![0.0, 3.0, 2.0]]);
        assert_eq!(w.matrix, want);
        assert!(!w.causal);
    }

    #[test]
    fn cnn_boundary_truncates_instead_of_padding() {
        // oracle: zero-padded convolution of V X with the kernel, compared on
        // interior AND boundary rows; truncation = zero padding for weights
        let mut rng = SeedRng::new(4);
        let (d, n, radius) = (2, 6, 2);
        let taps: Vec<f64> = (0..(2 * radius + 1)).map(|_| rng.normal()).collect();
        let x = seq(&mut rng, d, n);
        let v = rng.normal_matrix(2, d, 1.0);
        let w = weights_cnn(&taps, radius, n).unwrap();
        let y = apply_factorized(&w, &v, &x).unwrap();
        let vx = v.matmul(x.matrix());
        // y_i = sum_{k=-r..r} c_k (V x)_{i-k}, indices outside [0, n) dropped
        for i in 0..n {
            for row in 0..2 {
                let mut want = 0.0;
                for (t, tap) in taps.iter().enumerate() {
                    let k = t as isize - radius as isize; // lag
                    let j = i as isize - k;
                    if j >= 0 && j < n as isize {
                        want += tap * vx.get(row, j as usize);
                    }
                }
                assert!((y.get(row, i) - want).abs() < 1e-12, "row {row} pos {i}");
            }
        }
    }

    #[test]
    fn cnn_rejects_oversized_kernels() {
        assert!(weights_cnn(&[1.0; 7], 3, 3).is_err());
    }

    #[test]
    fn softmax_zero_input_gives_uniform_causal_rows() {
        let x = SequenceBatch::new(RealMatrix::zeros(3, 5)).unwrap();
        let w = weights_softmax_attention(
            &x,
            &RealMatrix::identity(3),
            &RealMatrix::identity(3),
            1.0,
            true,
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((w.matrix.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_concentration_formula_at_gamma_20() {
        // one token carries logit gamma, the i-1 others logit 0 (the key
        // projection is a rotation so the self-logit vanishes):
        // alpha_ij = e^gamma / (e^gamma + i - 1)
        let gamma = 20.0;
        let (i, j, n) = (7usize, 2usize, 8usize); // 0-based positions 8 and 3
        let w_q = RealMatrix::identity(2);
        let w_k = RealMatrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        // a = W_K^T W_Q e1 = (0, -1); x_j = gamma * a / |a|^2
        let mut cols = vec![vec![0.0, 0.0]; n];
        cols[i] = vec![1.0, 0.0];
        cols[j] = vec![0.0, -gamma];
        let x = SequenceBatch::from_columns(&cols).unwrap();
        let w = weights_softmax_attention(&x, &w_q, &w_k, 1.0, true).unwrap();
        let want = 1.0 / (1.0 + (i as f64) * (-gamma).exp()); // e^g/(e^g + i-1), i here 1-based = 8
        let got = w.matrix.get(i, j);
        assert!(((got - want) / want).abs() < 1e-12, "got {got}, want {want}");
        assert!(got >= 1.0 - 7.0 * (-gamma).exp());
    }

    #[test]
    fn softmax_rows_are_stochastic_on_seeded_inputs() {
        let mut rng = SeedRng::new(8);
        for trial in 0..100 {
            let (d, n) = (1 + rng.index(4), 1 + rng.index(10));
            let x = seq(&mut rng, d, n);
            let w_q = rng.normal_matrix(3, d, 1.0);
            let w_k = rng.normal_matrix(3, d, 1.0);
            let causal = trial % 2 == 0;
            let w =
                weights_softmax_attention(&x, &w_q, &w_k, (d as f64).sqrt(), causal).unwrap();
            for i in 0..n {
                let limit = if causal { i + 1 } else { n };
                let sum: f64 = (0..limit).map(|j| w.matrix.get(i, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-12, "trial {trial} row {i} sums to {sum}");
                for j in 0..n {
                    let a = w.matrix.get(i, j);
                    assert!((0.0..=1.0).contains(&a));
                    if causal && j > i {
                        assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_attention_orthonormal_tokens_give_identity() {
        let x = SequenceBatch::new(RealMatrix::identity(4)).unwrap();
        let w =
            weights_linear_attention(&x, &FeatureMap::Identity, &FeatureMap::Identity, false)
                .unwrap();
        assert!(w.matrix.sub(&RealMatrix::identity(4)).max_abs() < 1e-15);
    }

    #[test]
    fn linear_attention_constant_features_pool_everything() {
        // phi = psi = 1 (width 1): all-ones weights, i.e. sum pooling
        let mut rng = SeedRng::new(12);
        let x = seq(&mut rng, 3, 5);
        let one = FeatureMap::Constant { values: vec![1.0] };
        let w = weights_linear_attention(&x, &one, &one, false).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((w.matrix.get(i, j) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_attention_on_onehot_positions_equals_positional_table() {
        let mut rng = SeedRng::new(16);
        let (n, r) = (5, 3);
        let phi_table = rng.normal_matrix(n, r, 1.0);
        let psi_table = rng.normal_matrix(n, r, 1.0);
        // tokens are one-hot positions, feature maps read table rows
        let x = SequenceBatch::new(RealMatrix::identity(n)).unwrap();
        let w_content = weights_linear_attention(
            &x,
            &FeatureMap::Linear { matrix: phi_table.transpose() },
            &FeatureMap::Linear { matrix: psi_table.transpose() },
            true,
        )
        .unwrap();
        let gen = WeightGenerator::PositionalTable {
            phi: phi_table.clone(),
            psi: psi_table.clone(),
            causal: true,
        };
        let w_table = gen.positional_weights(n).unwrap();
        assert!(w_content.matrix.sub(&w_table.matrix).max_abs() < 1e-12);
    }

    #[test]
    fn factorized_identity_weights_reduce_to_value_map() {
        let mut rng = SeedRng::new(20);
        let x = seq(&mut rng, 3, 4);
        let v = rng.normal_matrix(2, 3, 1.0);
        let y = apply_factorized(&weights_mlp(4), &v, &x).unwrap();
        assert!(y.sub(&v.matmul(x.matrix())).max_abs() < 1e-13);
    }

    #[test]
    fn factorized_single_head_probe_form() {
        // On X = [e1, 0, ...] a single head produces y_1 = a V e1, y_2 = b V e1.
        let mut rng = SeedRng::new(24);
        let n = 4;
        let table_phi = rng.normal_matrix(n, 2, 1.0);
        let table_psi = rng.normal_matrix(n, 2, 1.0);
        let gen = WeightGenerator::PositionalTable {
            phi: table_phi.clone(),
            psi: table_psi.clone(),
            causal: true,
        };
        let weights = gen.positional_weights(n).unwrap();
        let v = rng.normal_matrix(2, 2, 1.0);
        let mut cols = vec![vec![0.0, 0.0]; n];
        cols[0] = vec![1.0, 0.0];
        let x = SequenceBatch::from_columns(&cols).unwrap();
        let y = apply_factorized(&weights, &v, &x).unwrap();
        let ve1: Vec<f64> = v.col(0);
        let a = weights.matrix.get(0, 0);
        let b = weights.matrix.get(1, 0);
        for r in 0..2 {
            assert!((y.get(r, 0) - a * ve1[r]).abs() < 1e-13);
            assert!((y.get(r, 1) - b * ve1[r]).abs() < 1e-13);
        }
    }

    #[test]
    fn factorized_path_matches_tensor_path_on_seeded_cases() {
        let mut rng = SeedRng::new(28);
        for trial in 0..100 {
            let (d, p) = (1 + rng.index(4), 1 + rng.index(4));
            let n = 1 + rng.index(10);
            let x = seq(&mut rng, d, n);
            let v = rng.normal_matrix(p, d, 1.0);
            let w_q = rng.normal_matrix(2, d, 1.0);
            let w_k = rng.normal_matrix(2, d, 1.0);
            let weights = weights_softmax_attention(&x, &w_q, &w_k, 1.0, true).unwrap();
            let fast = apply_factorized(&weights, &v, &x).unwrap();
            let tensor = scalar_weights_to_tensor(&weights, &v).unwrap();
            let slow = apply_tensor(&tensor, &x).unwrap();
            let rel = fast.sub(&slow).frobenius_norm() / slow.frobenius_norm().max(1e-30);
            assert!(rel <= 1e-12, "trial {trial}: {rel:.3e}");
        }
    }

    #[test]
    fn fast_linear_attention_single_token() {
        let mut rng = SeedRng::new(32);
        let x = seq(&mut rng, 3, 1);
        let v = rng.normal_matrix(2, 3, 1.0);
        let y =
            apply_linear_attention_fast(&x, &FeatureMap::Identity, &FeatureMap::Identity, &v)
                .unwrap();
        let x0 = x.token(0);
        let weight: f64 = x0.iter().map(|a| a * a).sum();
        let want: Vec<f64> = v.matvec(&x0).iter().map(|c| weight * c).collect();
        for r in 0..2 {
            assert!((y.get(r, 0) - want[r]).abs() < 1e-13);
        }
    }

    #[test]
    fn fast_linear_attention_matches_materialized_path() {
        let mut rng = SeedRng::new(36);
        for trial in 0..100 {
            let (d, p, r) = (1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4));
            let n = 1 + rng.index(12);
            let x = seq(&mut rng, d, n);
            let v = rng.normal_matrix(p, d, 1.0);
            let phi = FeatureMap::Linear { matrix: rng.normal_matrix(r, d, 1.0) };
            let psi = FeatureMap::Linear { matrix: rng.normal_matrix(r, d, 1.0) };
            let fast = apply_linear_attention_fast(&x, &phi, &psi, &v).unwrap();
            let weights = weights_linear_attention(&x, &phi, &psi, false).unwrap();
            let slow = apply_factorized(&weights, &v, &x).unwrap();
            let rel = fast.sub(&slow).frobenius_norm() / slow.frobenius_norm().max(1e-30);
            assert!(rel <= 1e-10, "trial {trial}: {rel:.3e}");
        }
    }

    #[test]
    fn fast_linear_attention_zero_features_zero_output() {
        let mut rng = SeedRng::new(40);
        let x = seq(&mut rng, 3, 4);
        let v = rng.normal_matrix(2, 3, 1.0);
        let zero = FeatureMap::Constant { values: vec![0.0, 0.0, 0.0] };
        let y = apply_linear_attention_fast(&x, &zero, &FeatureMap::Identity, &v).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn kan_constant_pair_is_global_pool() {
        let mut rng = SeedRng::new(44);
        let x = seq(&mut rng, 3, 5);
        let v = rng.normal_matrix(2, 3, 1.0);
        let pairs =
            vec![(ScalarBasis::Const { value: 1.0 }, ScalarBasis::Const { value: 1.0 })];
        let y = apply_kan(&x, &pairs, &v).unwrap();
        let vx = v.matmul(x.matrix());
        let pooled: Vec<f64> = (0..2).map(|r| (0..5).map(|j| vx.get(r, j)).sum()).collect();
        for i in 0..5 {
            for r in 0..2 {
                assert!((y.get(r, i) - pooled[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kan_single_token_collapses_to_scalar_weight() {
        let mut rng = SeedRng::new(48);
        let x = seq(&mut rng, 2, 1);
        let v = rng.normal_matrix(2, 2, 1.0);
        let pairs = vec![
            (
                ScalarBasis::Coordinate { index: 0 },
                ScalarBasis::Tanh { weights: vec![1.0, -0.5], bias: 0.2 },
            ),
            (
                ScalarBasis::Polynomial { weights: vec![0.3, 0.7], bias: 0.0, coeffs: vec![0.0, 1.0, 0.5] },
                ScalarBasis::Coordinate { index: 1 },
            ),
        ];
        let y = apply_kan(&x, &pairs, &v).unwrap();
        let x0 = x.token(0);
        let weight: f64 = pairs
            .iter()
            .map(|(g, h)| g.evaluate(&x0).unwrap() * h.evaluate(&x0).unwrap())
            .sum();
        let want = v.matvec(&x0);
        for r in 0..2 {
            assert!((y.get(r, 0) - weight * want[r]).abs() < 1e-13);
        }
    }

    #[test]
    fn kan_channel_form_equals_double_sum() {
        let mut rng = SeedRng::new(52);
        for trial in 0..20 {
            let (d, p, n) = (2 + rng.index(2), 1 + rng.index(3), 1 + rng.index(8));
            let x = seq(&mut rng, d, n);
            let v = rng.normal_matrix(p, d, 1.0);
            let pairs: Vec<(ScalarBasis, ScalarBasis)> = (0..2)
                .map(|_| {
                    (
                        ScalarBasis::Tanh {
                            weights: (0..d).map(|_| rng.normal()).collect(),
                            bias: rng.normal(),
                        },
                        ScalarBasis::Polynomial {
                            weights: (0..d).map(|_| rng.normal()).collect(),
                            bias: rng.normal(),
                            coeffs: vec![rng.normal(), rng.normal(), rng.normal()],
                        },
                    )
                })
                .collect();
            let channels = apply_kan(&x, &pairs, &v).unwrap();
            let weights = weights_kan(&x, &pairs).unwrap();
            let double_sum = apply_factorized(&weights, &v, &x).unwrap();
            let rel = channels.sub(&double_sum).frobenius_norm()
                / double_sum.frobenius_norm().max(1e-30);
            assert!(rel <= 1e-12, "trial {trial}: {rel:.3e}");
        }
    }

    #[test]
    fn kan_linear_functionals_reduce_to_linear_attention() {
        // g_m, h_m linear functionals == rank-r feature maps
        let mut rng = SeedRng::new(56);
        let (d, p, n, r) = (3, 2, 6, 2);
        let x = seq(&mut rng, d, n);
        let v = rng.normal_matrix(p, d, 1.0);
        let phi_rows = rng.normal_matrix(r, d, 1.0);
        let psi_rows = rng.normal_matrix(r, d, 1.0);
        let pairs: Vec<(ScalarBasis, ScalarBasis)> = (0..r)
            .map(|m| {
                (
                    ScalarBasis::Polynomial {
                        weights: phi_rows.row(m).to_vec(),
                        bias: 0.0,
                        coeffs: vec![0.0, 1.0],
                    },
                    ScalarBasis::Polynomial {
                        weights: psi_rows.row(m).to_vec(),
                        bias: 0.0,
                        coeffs: vec![0.0, 1.0],
                    },
                )
            })
            .collect();
        let via_kan = apply_kan(&x, &pairs, &v).unwrap();
        let via_linear = apply_linear_attention_fast(
            &x,
            &FeatureMap::Linear { matrix: phi_rows },
            &FeatureMap::Linear { matrix: psi_rows },
            &v,
        )
        .unwrap();
        assert!(via_kan.sub(&via_linear).max_abs() < 1e-12);
    }

    #[test]
    fn multihead_single_head_equals_factorized() {
        let mut rng = SeedRng::new(60);
        let (d, p, n) = (3, 2, 5);
        let x = seq(&mut rng, d, n);
        let v = rng.normal_matrix(p, d, 1.0);
        let gen = WeightGenerator::SoftmaxAttention {
            w_q: rng.normal_matrix(2, d, 1.0),
            w_k: rng.normal_matrix(2, d, 1.0),
            scale: (d as f64).sqrt(),
            causal: true,
        };
        let model = MultiHeadModel::new(vec![FactorizedHead {
            value: v.clone(),
            generator: gen.clone(),
        }])
        .unwrap();
        let via_model = apply_multihead(&model, &x).unwrap();
        let via_direct = apply_factorized(&gen.weights(&x).unwrap(), &v, &x).unwrap();
        assert!(via_model.sub(&via_direct).max_abs() < 1e-14);
    }

    #[test]
    fn multihead_opposite_values_cancel() {
        let mut rng = SeedRng::new(64);
        let (d, p, n) = (3, 2, 5);
        let x = seq(&mut rng, d, n);
        let v = rng.normal_matrix(p, d, 1.0);
        let gen = WeightGenerator::PositionalTable {
            phi: rng.normal_matrix(n, 2, 1.0),
            psi: rng.normal_matrix(n, 2, 1.0),
            causal: true,
        };
        let model = MultiHeadModel::new(vec![
            FactorizedHead { value: v.clone(), generator: gen.clone() },
            FactorizedHead { value: v.scaled(-1.0), generator: gen },
        ])
        .unwrap();
        let y = apply_multihead(&model, &x).unwrap();
        assert!(y.max_abs() < 1e-13);
    }

    #[test]
    fn concat_with_output_matrix_equals_reparameterized_sum() {
        let mut rng = SeedRng::new(68);
        let (d, p, head_dim, n, h_count) = (3, 2, 2, 6, 3);
        let x = seq(&mut rng, d, n);
        let heads: Vec<(RealMatrix, WeightGenerator)> = (0..h_count)
            .map(|_| {
                (
                    rng.normal_matrix(head_dim, d, 1.0),
                    WeightGenerator::PositionalTable {
                        phi: rng.normal_matrix(n, 2, 1.0),
                        psi: rng.normal_matrix(n, 2, 1.0),
                        causal: true,
                    },
                )
            })
            .collect();
        let w_o = rng.normal_matrix(p, head_dim * h_count, 1.0);
        let concat = apply_multihead_concat(&heads, &w_o, &x).unwrap();
        // reparameterize: V^(h) = W_O^(h) V_h
        let sum_heads: Vec<FactorizedHead> = heads
            .iter()
            .enumerate()
            .map(|(h, (value, generator))| {
                let block = RealMatrix::from_fn(p, head_dim, |r, c| {
                    w_o.get(r, h * head_dim + c)
                });
                FactorizedHead { value: block.matmul(value), generator: generator.clone() }
            })
            .collect();
        let summed = apply_multihead(&MultiHeadModel::new(sum_heads).unwrap(), &x).unwrap();
        let rel = concat.sub(&summed).frobenius_norm() / summed.frobenius_norm().max(1e-30);
        assert!(rel <= 1e-12, "concat/sum gap {rel:.3e}");
    }

    #[test]
    fn model_config_roundtrips_losslessly() {
        let mut rng = SeedRng::new(72);
        let n = 4;
        let model = MultiHeadModel::new(vec![FactorizedHead {
            value: rng.normal_matrix(2, 3, 1.0),
            generator: WeightGenerator::PositionalTable {
                phi: rng.normal_matrix(n, 2, 1.0),
                psi: rng.normal_matrix(n, 2, 1.0),
                causal: true,
            },
        }])
        .unwrap();
        let dir = std::env::temp_dir().join("seqop_model_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let back = MultiHeadModel::load(&path).unwrap();
        assert_eq!(model, back);
        // a second save is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seeded_value_init_is_deterministic() {
        let cfg = ModelConfig {
            head_count: 2,
            seed: 99,
            heads: (0..2)
                .map(|_| HeadConfig {
                    value: ValueInit::ScaledUniform { rows: 2, cols: 3 },
                    generator: WeightGenerator::Identity,
                })
                .collect(),
        };
        let m1 = cfg.build().unwrap();
        let m2 = cfg.build().unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1.heads[0].value, m1.heads[1].value);
    }
}
