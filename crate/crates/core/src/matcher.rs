//! Correspondence identification between two object graphs and the
//! overlap decision built on it.
//!
//! `S` is the cosine similarity of the two embedding sets. The consensus
//! term `D` compares a random node signature pushed through `S` before and
//! after a permutation-equivariant encoder; it vanishes when `S` is a true
//! relabelling between identical graphs. Scores `S + D` are thresholded at
//! `τ` and resolved one-to-one with the Hungarian method.

use serde::{Deserialize, Serialize};

use crate::encoder::{GraphEncoder, GraphStructure};
use crate::hungarian::max_weight_partial_assignment;
use crate::nn::{Binding, ForwardCtx};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Logistic sharpness of the training surrogate.
pub const LOSS_SHARPNESS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Columns of the random signature matrix `J`.
    pub r: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            r: 16,
            tau: 0.65,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    #[serde(with = "matrix_json")]
    pub similarity: Tensor,
    #[serde(with = "matrix_json")]
    pub difference: Tensor,
    #[serde(with = "matrix_json")]
    pub refined: Tensor,
    #[serde(with = "matrix_json")]
    pub assignment: Tensor,
    pub overlap: bool,
}

impl CorrespondenceResult {
    /// Matched `(ego, teammate)` index pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let cols = self.assignment.cols();
        self.assignment
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(k, _)| (k / cols, k % cols))
            .collect()
    }
}

/// 2-D tensors as `{"rows", "cols", "data": [[...], ...]}`; the explicit
/// shape keeps `0 × m` matrices round-trippable.
pub mod matrix_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    #[derive(Serialize, Deserialize)]
    struct Shaped {
        rows: usize,
        cols: usize,
        data: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        Shaped {
            rows: t.rows(),
            cols: t.cols(),
            data: t.to_rows(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let m = Shaped::deserialize(d)?;
        if m.data.len() != m.rows || m.data.iter().any(|r| r.len() != m.cols) {
            return Err(serde::de::Error::custom("matrix rows/cols disagree with data"));
        }
        Tensor::new(vec![m.rows, m.cols], m.data.concat()).map_err(serde::de::Error::custom)
    }
}

/// Cosine similarity `S = norm(H) · norm(H')ᵀ`.
pub fn similarity(tape: &mut Tape, ego: Var, mate: Var) -> Result<Var> {
    let (a, b) = (tape.shape(ego).to_vec(), tape.shape(mate).to_vec());
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(TensorError::Shape {
            op: "similarity",
            lhs: a,
            rhs: b,
        });
    }
    let ne = tape.row_normalize(ego)?;
    let nm = tape.row_normalize(mate)?;
    tape.matmul_nt(ne, nm)
}

/// Consensus difference `D` (`n × m`).
///
/// With `O = Ψ(J, A)` and `O' = Ψ(SᵀJ, A')`, the residual `Δ = SᵀO − O'`
/// has one row per teammate node; `D_ij = −mean_k Δ_jk²`, so a column whose
/// neighbourhood signature cannot be explained by `S` is penalised for every
/// ego node, and `Δ = 0` gives `D = 0` exactly.
pub fn consensus_difference(
    tape: &mut Tape,
    b: &Binding,
    encoder: &GraphEncoder,
    s: Var,
    signature: Var,
    ego: &GraphStructure,
    mate: &GraphStructure,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (n, m) = (ego.len(), mate.len());
    if tape.shape(s) != [n, m] || tape.shape(signature)[0] != n {
        return Err(TensorError::Shape {
            op: "consensus_difference",
            lhs: tape.shape(s).to_vec(),
            rhs: vec![n, m],
        });
    }
    let width = encoder.config.width as f64;
    let ego_out = encoder.forward(tape, b, signature, ego, ctx)?;
    let moved = tape.matmul_tn(s, signature)?;
    let mate_out = encoder.forward(tape, b, moved, mate, ctx)?;
    let transported = tape.matmul_tn(s, ego_out)?;
    let delta = tape.sub(transported, mate_out)?;
    let sq = tape.mul(delta, delta)?;
    let per_col = tape.row_sum(sq)?;
    let per_col = tape.scale(per_col, -1.0 / width);
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
    tape.matmul_nt(ones, per_col)
}

/// `S + D`, with `D` shrunk by `1/(1+‖D‖∞)` when `‖D‖∞ > 1`.
pub fn combined_scores(tape: &mut Tape, s: Var, d: Var) -> Result<Var> {
    let d = tape.max_abs_rescale(d);
    tape.add(s, d)
}

/// `Ŝ_ij = 1` iff `scores_ij ≥ τ`.
pub fn refine_threshold(scores: &Tensor, tau: f64) -> Tensor {
    let data = scores
        .data()
        .iter()
        .map(|&v| if v >= tau { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(scores.shape().to_vec(), data).expect("same shape")
}

/// One-to-one assignment maximising Σ scores over cells with `Ŝ = 1`.
pub fn assign(refined: &Tensor, scores: &Tensor) -> Tensor {
    let (n, m) = (refined.rows(), refined.cols());
    let allowed: Vec<bool> = refined.data().iter().map(|v| *v == 1.0).collect();
    let pairs = max_weight_partial_assignment(scores.data(), n, m, &allowed);
    let mut y = vec![0.0; n * m];
    for (i, j) in pairs {
        y[i * m + j] = 1.0;
    }
    Tensor::new(vec![n, m], y).expect("n×m")
}

/// True iff at least one correspondence was assigned.
pub fn detect_overlap(assignment: &Tensor) -> bool {
    assignment.data().iter().sum::<f64>() >= 1.0
}

/// Thresholding, assignment and overlap decision on precomputed `S` and `D`.
pub fn decide(similarity: Tensor, difference: Tensor, tau: f64) -> CorrespondenceResult {
    let scores = score_values(&similarity, &difference);
    let refined = refine_threshold(&scores, tau);
    let assignment = assign(&refined, &scores);
    let overlap = detect_overlap(&assignment);
    CorrespondenceResult {
        similarity,
        difference,
        refined,
        assignment,
        overlap,
    }
}

/// Value-level counterpart of [`combined_scores`].
pub fn score_values(similarity: &Tensor, difference: &Tensor) -> Tensor {
    let peak = difference.max_abs();
    let factor = if peak > 1.0 { 1.0 / (1.0 + peak) } else { 1.0 };
    let data = similarity
        .data()
        .iter()
        .zip(difference.data())
        .map(|(s, d)| s + d * factor)
        .collect();
    Tensor::new(similarity.shape().to_vec(), data).expect("same shape")
}

/// Mean squared error between `σ(β(scores − τ))` and the ground truth.
pub fn high_loss(tape: &mut Tape, scores: Var, tau: f64, truth: &Tensor) -> Result<Var> {
    if tape.shape(scores) != truth.shape() {
        return Err(TensorError::Shape {
            op: "high_loss",
            lhs: tape.shape(scores).to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let shifted = tape.add_scalar(scores, -tau);
    let sharp = tape.scale(shifted, LOSS_SHARPNESS);
    let p = tape.sigmoid(sharp);
    let y = tape.constant(truth.clone());
    let diff = tape.sub(p, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Evaluation-only loss on the hard indicator: mean of `(Ŝ − Y*)²`.
pub fn hard_high_loss(refined: &Tensor, truth: &Tensor) -> f64 {
    let n = refined.numel().max(1) as f64;
    refined
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}
