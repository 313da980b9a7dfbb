//! Position-aware cross-attention network for the teammate's egocentric
//! pose.
//!
//! Ego node embeddings (plus learned per-index position embeddings) query
//! the teammate's embeddings through `L` cross-attention blocks. The ego
//! stream is then pooled with self-attention gate scores and regressed to a
//! translation and a unit quaternion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{chordal_rotation_loss, RelativePose};
use crate::nn::{Binding, ForwardCtx, LayerNormParams, Mlp, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("{nodes} nodes exceed the position-embedding capacity of {limit}")]
    Capacity { nodes: usize, limit: usize },
    #[error("teammate graph is empty; pose estimation requires a detected overlap")]
    EmptyTeammate,
    #[error("ego graph is empty")]
    EmptyEgo,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PoseError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_nodes: usize,
    /// Metres per unit of the raw translation output.
    pub position_scale: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 4,
            layers: 4,
            max_nodes: 64,
            position_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub mlp: Mlp,
    pub norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct PoseNetwork {
    pub config: PoseConfig,
    pub position_table: ParamId,
    pub layers: Vec<CrossLayer>,
    pub gate: GateParams,
    pub head: Mlp,
}

/// Forward outputs kept on the tape for losses and inspection.
#[derive(Clone, Copy, Debug)]
pub struct PoseOutputs {
    pub position: Var,
    pub orientation: Var,
    pub gate: Var,
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLossBreakdown {
    pub position: f64,
    pub rotation: f64,
    pub total: f64,
}

impl PoseNetwork {
    pub fn new(params: &mut ParamSet, prefix: &str, config: PoseConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.width;
        if d == 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(TensorError::Parameter {
                op: "pose",
                msg: format!("width {d} must be a positive multiple of heads {}", config.heads),
            }
            .into());
        }
        let position_table = params.glorot(format!("{prefix}.positions"), config.max_nodes, d, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.cross{l}");
                CrossLayer {
                    query: params.glorot(format!("{p}.query"), d, d, rng),
                    key: params.glorot(format!("{p}.key"), d, d, rng),
                    value: params.glorot(format!("{p}.value"), d, d, rng),
                    mlp: Mlp::new(params, &format!("{p}.mlp"), &[d, d, d], rng),
                    norm: LayerNormParams::new(params, &format!("{p}.norm"), d),
                }
            })
            .collect();
        let gate = GateParams {
            query: params.glorot(format!("{prefix}.gate.query"), d, d, rng),
            key: params.glorot(format!("{prefix}.gate.key"), d, d, rng),
            value: params.glorot(format!("{prefix}.gate.value"), d, d, rng),
            mlp: Mlp::new(params, &format!("{prefix}.gate.mlp"), &[d, d, 1], rng),
        };
        let head = Mlp::new(params, &format!("{prefix}.head"), &[d, d, 7], rng);
        Ok(Self {
            config,
            position_table,
            layers,
            gate,
            head,
        })
    }

    /// `Ĥ_i = H_i + U[i, :]`.
    pub fn positional_encode(&self, tape: &mut Tape, b: &Binding, h: Var) -> Result<Var> {
        positional_encode(tape, h, b[self.position_table])
    }

    /// `L` cross-attention blocks; ego queries, teammate keys and values.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        b: &Binding,
        ego: Var,
        mate: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if tape.shape(mate)[0] == 0 {
            return Err(PoseError::EmptyTeammate);
        }
        if tape.shape(ego)[0] == 0 {
            return Err(PoseError::EmptyEgo);
        }
        let dh = self.config.width / self.config.heads;
        let mut h = ego;
        for layer in &self.layers {
            let q = tape.matmul(h, b[layer.query])?;
            let k = tape.matmul(mate, b[layer.key])?;
            let v = tape.matmul(mate, b[layer.value])?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for m in 0..self.config.heads {
                let qm = tape.slice_cols(q, m * dh, dh)?;
                let km = tape.slice_cols(k, m * dh, dh)?;
                let vm = tape.slice_cols(v, m * dh, dh)?;
                let logits = tape.matmul_nt(qm, km)?;
                let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(logits)?;
                let attn = ctx.attn_dropout(tape, attn)?;
                heads.push(tape.matmul(attn, vm)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let update = layer.mlp.forward(tape, b, cat, ctx)?;
            let sum = tape.add(h, update)?;
            h = layer.norm.forward(tape, b, sum)?;
        }
        Ok(h)
    }

    /// Self-attention gate scores `g` (`n × 1`, sums to one) and the pooled
    /// embedding `gᵀ H_out` (`1 × d`).
    pub fn gate_pool(&self, tape: &mut Tape, b: &Binding, h: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let d = self.config.width as f64;
        let q = tape.matmul(h, b[self.gate.query])?;
        let k = tape.matmul(h, b[self.gate.key])?;
        let v = tape.matmul(h, b[self.gate.value])?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, 1.0 / d.sqrt());
        let attn = tape.softmax_rows(logits)?;
        let weighted = tape.matmul(attn, v)?;
        let scores = self.gate.mlp.forward(tape, b, weighted, ctx)?;
        let row = tape.transpose(scores)?;
        let g = tape.softmax_rows(row)?;
        let pooled = tape.matmul(g, h)?;
        let g = tape.transpose(g)?;
        Ok((g, pooled))
    }

    /// Head MLP to `(p̂, q̂)`; the quaternion is normalised, with the
    /// identity substituted for a zero output.
    pub fn pose_head(&self, tape: &mut Tape, b: &Binding, pooled: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let raw = self.head.forward(tape, b, pooled, ctx)?;
        let p = tape.slice_cols(raw, 0, 3)?;
        let p = tape.scale(p, self.config.position_scale);
        let q = tape.slice_cols(raw, 3, 4)?;
        let q = if tape.value(q).data().iter().all(|v| *v == 0.0) {
            tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0])?)
        } else {
            tape.row_normalize(q)?
        };
        Ok((p, q))
    }

    /// Full low-level forward pass on high-level embeddings of both graphs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        ego: Var,
        mate: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<PoseOutputs> {
        let ego_hat = self.positional_encode(tape, b, ego)?;
        let mate_hat = self.positional_encode(tape, b, mate)?;
        let h_out = self.cross_attend(tape, b, ego_hat, mate_hat, ctx)?;
        let (gate, pooled) = self.gate_pool(tape, b, h_out, ctx)?;
        let (position, orientation) = self.pose_head(tape, b, pooled, ctx)?;
        Ok(PoseOutputs {
            position,
            orientation,
            gate,
            pooled,
        })
    }

    /// Inference on precomputed embeddings.
    pub fn predict(&self, params: &ParamSet, ego: &Tensor, mate: &Tensor) -> Result<RelativePose> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let e = tape.constant(ego.clone());
        let m = tape.constant(mate.clone());
        let out = self.forward(&mut tape, &b, e, m, &mut ForwardCtx::inference())?;
        Ok(read_pose(&tape, &out))
    }
}

pub fn read_pose(tape: &Tape, out: &PoseOutputs) -> RelativePose {
    let p = tape.value(out.position).data();
    let q = tape.value(out.orientation).data();
    RelativePose::new([p[0], p[1], p[2]], [q[0], q[1], q[2], q[3]])
}

/// Adds the first `n` rows of the position table to `h` (`n × d`).
pub fn positional_encode(tape: &mut Tape, h: Var, table: Var) -> Result<Var> {
    let n = tape.shape(h)[0];
    let limit = tape.shape(table)[0];
    if n > limit {
        return Err(PoseError::Capacity { nodes: n, limit });
    }
    let rows = tape.slice_rows(table, 0, n)?;
    Ok(tape.add(h, rows)?)
}

/// `‖p̂ − p‖² + 2e²(4 − e²)` with `e² = ‖q̂ − q‖²`, recorded on the tape.
/// Returns `(total, position, rotation)`.
pub fn low_loss(
    tape: &mut Tape,
    position: Var,
    orientation: Var,
    truth: &RelativePose,
) -> Result<(Var, Var, Var)> {
    let p = tape.constant(Tensor::new(vec![1, 3], truth.position.to_vec())?);
    let q = tape.constant(Tensor::new(vec![1, 4], truth.orientation.to_vec())?);
    let dp = tape.sub(position, p)?;
    let dp2 = tape.mul(dp, dp)?;
    let l_pos = tape.sum(dp2);
    let dq = tape.sub(orientation, q)?;
    let dq2 = tape.mul(dq, dq)?;
    let e2 = tape.sum(dq2);
    let e4 = tape.mul(e2, e2)?;
    let a = tape.scale(e2, 8.0);
    let c = tape.scale(e4, -2.0);
    let l_rot = tape.add(a, c)?;
    let total = tape.add(l_pos, l_rot)?;
    Ok((total, l_pos, l_rot))
}

/// Value-level low-level loss.
pub fn low_loss_values(predicted: &RelativePose, truth: &RelativePose) -> PoseLossBreakdown {
    let position: f64 = predicted
        .position
        .iter()
        .zip(&truth.position)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let rotation = chordal_rotation_loss(&predicted.orientation, &truth.orientation);
    PoseLossBreakdown {
        position,
        rotation,
        total: position + rotation,
    }
}

/// Rotation error reported per instance; same form as the rotation loss.
pub fn rotation_error_metric(predicted: &RelativePose, truth: &RelativePose) -> f64 {
    chordal_rotation_loss(&predicted.orientation, &truth.orientation)
}
