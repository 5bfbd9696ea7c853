//! Structured-dynamics models: linear time-invariant state recurrences, their
//! convolution unroll (computational duality), selective input-dependent
//! scans, and the tanh RNN used for Jacobian analysis.
//!
//! All scans start from h_0 = 0; the lag-operator view W(tau) = C A^tau B
//! presumes a zero initial state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{impulse_family, SequenceBatch};
use crate::linalg::RealMatrix;

/// A discrete linear time-invariant system (transition A, input map B,
/// output map C) with state dimension m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLti", into = "RawLti")]
pub struct LtiSystem {
    transition: RealMatrix, // m x m
    input_map: RealMatrix,  // m x d
    output_map: RealMatrix, // p x m
}

#[derive(Serialize, Deserialize)]
struct RawLti {
    state_dim: usize,
    in_dim: usize,
    out_dim: usize,
    transition: RealMatrix,
    input_map: RealMatrix,
    output_map: RealMatrix,
}

impl TryFrom<RawLti> for LtiSystem {
    type Error = Error;
    fn try_from(raw: RawLti) -> Result<Self> {
        let sys = LtiSystem::new(raw.transition, raw.input_map, raw.output_map)?;
        if sys.state_dim() != raw.state_dim
            || sys.in_dim() != raw.in_dim
            || sys.out_dim() != raw.out_dim
        {
            return Err(Error::ShapeError(format!(
                "declared dims (m={}, d={}, p={}) disagree with matrices (m={}, d={}, p={})",
                raw.state_dim,
                raw.in_dim,
                raw.out_dim,
                sys.state_dim(),
                sys.in_dim(),
                sys.out_dim()
            )));
        }
        Ok(sys)
    }
}

impl From<LtiSystem> for RawLti {
    fn from(sys: LtiSystem) -> Self {
        RawLti {
            state_dim: sys.state_dim(),
            in_dim: sys.in_dim(),
            out_dim: sys.out_dim(),
            transition: sys.transition,
            input_map: sys.input_map,
            output_map: sys.output_map,
        }
    }
}

impl LtiSystem {
    pub fn new(
        transition: RealMatrix,
        input_map: RealMatrix,
        output_map: RealMatrix,
    ) -> Result<Self> {
        if !transition.is_square() {
            return Err(Error::ShapeError("transition must be square".into()));
        }
        let m = transition.rows();
        if input_map.rows() != m {
            return Err(Error::ShapeError(format!(
                "input map has {} rows, state dim is {m}",
                input_map.rows()
            )));
        }
        if output_map.cols() != m {
            return Err(Error::ShapeError(format!(
                "output map has {} cols, state dim is {m}",
                output_map.cols()
            )));
        }
        for (name, mat) in
            [("transition", &transition), ("input map", &input_map), ("output map", &output_map)]
        {
            if !mat.is_finite() {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        Ok(LtiSystem { transition, input_map, output_map })
    }

    pub fn state_dim(&self) -> usize {
        self.transition.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.input_map.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.output_map.rows()
    }

    pub fn transition(&self) -> &RealMatrix {
        &self.transition
    }

    pub fn input_map(&self) -> &RealMatrix {
        &self.input_map
    }

    pub fn output_map(&self) -> &RealMatrix {
        &self.output_map
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Rule producing the per-position transition matrix from the token there.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionRule {
    Constant { matrix: RealMatrix },
    /// A_k = diag(sigmoid(W x_k + b)).
    DiagonalGated { weights: RealMatrix, bias: Vec<f64> },
    /// A_k = base + sum_c x_k[c] * slope_c.
    LinearInInput { base: RealMatrix, slopes: Vec<RealMatrix> },
}

/// Rule producing a per-position (non-square) map from the token there.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectionRule {
    Constant { matrix: RealMatrix },
    /// base + sum_c x[c] * slope_c.
    LinearInInput { base: RealMatrix, slopes: Vec<RealMatrix> },
}

impl TransitionRule {
    pub fn evaluate(&self, x: &[f64]) -> Result<RealMatrix> {
        match self {
            TransitionRule::Constant { matrix } => Ok(matrix.clone()),
            TransitionRule::DiagonalGated { weights, bias } => {
                if weights.cols() != x.len() || weights.rows() != bias.len() {
                    return Err(Error::ShapeError("diagonal gate shape mismatch".into()));
                }
                let pre = weights.matvec(x);
                let m = bias.len();
                let mut out = RealMatrix::zeros(m, m);
                for i in 0..m {
                    out.set(i, i, sigmoid(pre[i] + bias[i]));
                }
                Ok(out)
            }
            TransitionRule::LinearInInput { base, slopes } => linear_in_input(base, slopes, x),
        }
    }
}

impl ProjectionRule {
    pub fn evaluate(&self, x: &[f64]) -> Result<RealMatrix> {
        match self {
            ProjectionRule::Constant { matrix } => Ok(matrix.clone()),
            ProjectionRule::LinearInInput { base, slopes } => linear_in_input(base, slopes, x),
        }
    }
}

fn linear_in_input(base: &RealMatrix, slopes: &[RealMatrix], x: &[f64]) -> Result<RealMatrix> {
    if slopes.len() != x.len() {
        return Err(Error::ShapeError(format!(
            "{} slope matrices for input dim {}",
            slopes.len(),
            x.len()
        )));
    }
    let mut out = base.clone();
    for (slope, xv) in slopes.iter().zip(x) {
        if (slope.rows(), slope.cols()) != (base.rows(), base.cols()) {
            return Err(Error::ShapeError("slope shape differs from base".into()));
        }
        out = out.add(&slope.scaled(*xv));
    }
    if !out.is_finite() {
        return Err(Error::InvalidInput("rule produced non-finite matrix".into()));
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// A selective (input-dependent) system: rules for A_k(x_k), B_j(x_j), C_i(x_i).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectiveSystem {
    pub transition_rule: TransitionRule,
    pub input_rule: ProjectionRule,
    pub output_rule: ProjectionRule,
}

impl SelectiveSystem {
    /// Constant-rule system equivalent to `sys`.
    pub fn constant(sys: &LtiSystem) -> Self {
        SelectiveSystem {
            transition_rule: TransitionRule::Constant { matrix: sys.transition().clone() },
            input_rule: ProjectionRule::Constant { matrix: sys.input_map().clone() },
            output_rule: ProjectionRule::Constant { matrix: sys.output_map().clone() },
        }
    }

    /// Evaluate all three rules along the sequence.
    pub fn step_maps(
        &self,
        x: &SequenceBatch,
    ) -> Result<(Vec<RealMatrix>, Vec<RealMatrix>, Vec<RealMatrix>)> {
        let n = x.len();
        let mut transitions = Vec::with_capacity(n);
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        for k in 0..n {
            let xk = x.token(k);
            transitions.push(self.transition_rule.evaluate(&xk)?);
            inputs.push(self.input_rule.evaluate(&xk)?);
            outputs.push(self.output_rule.evaluate(&xk)?);
        }
        Ok((transitions, inputs, outputs))
    }
}

/// Sequential recurrence: h_i = A h_{i-1} + B x_i, y_i = C h_i, h_0 = 0.
pub fn lti_scan(sys: &LtiSystem, x: &SequenceBatch) -> Result<RealMatrix> {
    if sys.in_dim() != x.dim() {
        return Err(Error::ShapeError(format!(
            "system expects d={}, sequence has d={}",
            sys.in_dim(),
            x.dim()
        )));
    }
    let n = x.len();
    let p = sys.out_dim();
    let mut h = vec![0.0; sys.state_dim()];
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        let ah = sys.transition().matvec(&h);
        let bx = sys.input_map().matvec(&x.token(i));
        h = ah.iter().zip(&bx).map(|(a, b)| a + b).collect();
        let yi = sys.output_map().matvec(&h);
        for r in 0..p {
            y.set(r, i, yi[r]);
        }
    }
    Ok(y)
}

/// Convolution unroll of the same map: y_i = sum_{j<=i} W(i-j) x_j with
/// W from the impulse family. Direct O(n^2) summation, no FFT.
pub fn lti_convolve(sys: &LtiSystem, x: &SequenceBatch) -> Result<RealMatrix> {
    if sys.in_dim() != x.dim() {
        return Err(Error::ShapeError(format!(
            "system expects d={}, sequence has d={}",
            sys.in_dim(),
            x.dim()
        )));
    }
    let n = x.len();
    let p = sys.out_dim();
    let family = impulse_family(sys, n)?;
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        for j in 0..=i {
            let contrib = family.operators[i - j].matvec(&x.token(j));
            for r in 0..p {
                y.set(r, i, y.get(r, i) + contrib[r]);
            }
        }
    }
    Ok(y)
}

/// Input-dependent scan: h_i = A_i(x_i) h_{i-1} + B_i(x_i) x_i, y_i = C_i(x_i) h_i.
pub fn selective_scan(sys: &SelectiveSystem, x: &SequenceBatch) -> Result<RealMatrix> {
    let (transitions, inputs, outputs) = sys.step_maps(x)?;
    let n = x.len();
    let m = transitions[0].rows();
    if inputs[0].cols() != x.dim() {
        return Err(Error::ShapeError("input rule dimension mismatch".into()));
    }
    let p = outputs[0].rows();
    let mut h = vec![0.0; m];
    let mut y = RealMatrix::zeros(p, n);
    for i in 0..n {
        let ah = transitions[i].matvec(&h);
        let bx = inputs[i].matvec(&x.token(i));
        h = ah.iter().zip(&bx).map(|(a, b)| a + b).collect();
        let yi = outputs[i].matvec(&h);
        for r in 0..p {
            y.set(r, i, yi[r]);
        }
    }
    Ok(y)
}

/// tanh RNN forward pass; the hidden trajectory is retained for Jacobians.
pub struct RnnTrajectory {
    pub outputs: RealMatrix,   // p x n
    pub hidden: Vec<Vec<f64>>, // hidden[t] = post-activation state after step t
}

pub fn rnn_tanh_forward(
    recur: &RealMatrix,   // m x m
    input: &RealMatrix,   // m x d
    readout: &RealMatrix, // p x m
    x: &SequenceBatch,
) -> Result<RnnTrajectory> {
    if !recur.is_square() || recur.rows() != input.rows() || readout.cols() != recur.rows() {
        return Err(Error::ShapeError("rnn parameter shapes disagree".into()));
    }
    if input.cols() != x.dim() {
        return Err(Error::ShapeError(format!(
            "rnn expects d={}, sequence has d={}",
            input.cols(),
            x.dim()
        )));
    }
    let n = x.len();
    let m = recur.rows();
    let p = readout.rows();
    let mut h = vec![0.0; m];
    let mut hidden = Vec::with_capacity(n);
    let mut y = RealMatrix::zeros(p, n);
    for t in 0..n {
        let wh = recur.matvec(&h);
        let ux = input.matvec(&x.token(t));
        h = wh.iter().zip(&ux).map(|(a, b)| (a + b).tanh()).collect();
        let yt = readout.matvec(&h);
        for r in 0..p {
            y.set(r, t, yt[r]);
        }
        hidden.push(h.clone());
    }
    Ok(RnnTrajectory { outputs: y, hidden })
}
