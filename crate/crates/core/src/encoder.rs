//! Edge-aware multi-head graph attention encoder.
//!
//! Per layer, node `i` attends over its Delaunay neighbours and itself with
//! logits `q_iᵀ(k_j + w_e·A_ij) / √d_head`. Head outputs are concatenated,
//! added to the residual `h_i W_h` and layer-normalised.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::SceneGraph;
use crate::nn::{Binding, ForwardCtx, LayerNormParams, Linear, ParamId, ParamSet};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.input_width == 0 {
            return Err(TensorError::Parameter {
                op: "encoder",
                msg: format!(
                    "width {} must be a positive multiple of heads {} (input {})",
                    self.width, self.heads, self.input_width
                ),
            });
        }
        Ok(())
    }
}

/// Adjacency plus the additive attention mask (0 on `N(i) ∪ {i}`, −∞ elsewhere).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStructure {
    pub adjacency: Tensor,
    pub mask: Tensor,
}

impl GraphStructure {
    pub fn from_graph(graph: &SceneGraph) -> Self {
        let n = graph.len();
        let mut mask = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            mask[i * n + i] = 0.0;
        }
        for &(i, j) in graph.edges() {
            mask[i * n + j] = 0.0;
            mask[j * n + i] = 0.0;
        }
        Self {
            adjacency: graph.adjacency().clone(),
            mask: Tensor::new(vec![n, n], mask).expect("n×n"),
        }
    }

    pub fn len(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// Maps the scalar edge distance to a key-width vector, one slice per head.
    pub edge: ParamId,
    pub residual: ParamId,
    pub norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
}

impl GraphEncoder {
    pub fn new(params: &mut ParamSet, prefix: &str, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let input = Linear::new(params, &format!("{prefix}.input"), config.input_width, d, true, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                EncoderLayer {
                    query: params.glorot(format!("{p}.query"), d, d, rng),
                    key: params.glorot(format!("{p}.key"), d, d, rng),
                    value: params.glorot(format!("{p}.value"), d, d, rng),
                    edge: params.glorot(format!("{p}.edge"), 1, d, rng),
                    residual: params.glorot(format!("{p}.residual"), d, d, rng),
                    norm: LayerNormParams::new(params, &format!("{p}.norm"), d),
                }
            })
            .collect();
        Ok(Self { config, input, layers })
    }

    /// Runs the encoder on node inputs `x` (`n × input_width`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        x: Var,
        graph: &GraphStructure,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let n = graph.len();
        if tape.shape(x) != [n, self.config.input_width] {
            return Err(TensorError::Shape {
                op: "encode",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![n, self.config.input_width],
            });
        }
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, self.config.width])));
        }
        let adjacency = tape.constant(graph.adjacency.clone());
        let mask = tape.constant(graph.mask.clone());
        let mut h = self.input.forward(tape, b, x)?;
        for layer in &self.layers {
            h = self.layer_forward(tape, b, layer, h, adjacency, mask, ctx)?;
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        layer: &EncoderLayer,
        h: Var,
        adjacency: Var,
        mask: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let dh = self.config.head_width();
        let (q, k, v) = project_qkv(tape, b, layer, h)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for m in 0..self.config.heads {
            let qm = tape.slice_cols(q, m * dh, dh)?;
            let km = tape.slice_cols(k, m * dh, dh)?;
            let vm = tape.slice_cols(v, m * dh, dh)?;
            let em = tape.slice_cols(b[layer.edge], m * dh, dh)?;
            let alpha = edge_aware_attention(tape, qm, km, em, adjacency, mask)?;
            let alpha = ctx.attn_dropout(tape, alpha)?;
            heads.push(tape.matmul(alpha, vm)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let res = tape.matmul(h, b[layer.residual])?;
        let sum = tape.add(res, cat)?;
        layer.norm.forward(tape, b, sum)
    }

    /// Inference-mode embeddings for a scene graph.
    pub fn encode(&self, params: &ParamSet, graph: &SceneGraph) -> Result<Tensor> {
        if graph.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.width]));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(graph.features());
        let structure = GraphStructure::from_graph(graph);
        let out = self.forward(&mut tape, &b, x, &structure, &mut ForwardCtx::inference())?;
        Ok(tape.value(out).clone())
    }
}

/// Query, key and value projections `h W_q`, `h W_k`, `h W_v` for all heads.
pub fn project_qkv(tape: &mut Tape, b: &Binding, layer: &EncoderLayer, h: Var) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(h, b[layer.query])?;
    let k = tape.matmul(h, b[layer.key])?;
    let v = tape.matmul(h, b[layer.value])?;
    Ok((q, k, v))
}

/// Attention coefficients for one head. `edge` is the `1 × d_head` slice of
/// the distance projection; `mask` is 0 on attended pairs and −∞ elsewhere.
pub fn edge_aware_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    edge: Var,
    adjacency: Var,
    mask: Var,
) -> Result<Var> {
    let dh = tape.shape(q)[1];
    let content = tape.matmul_nt(q, k)?;
    // q_iᵀ w_e A_ij = (q_i · w_e) A_ij
    let qe = tape.matmul_nt(q, edge)?;
    let geometric = tape.mul_col(adjacency, qe)?;
    let logits = tape.add(content, geometric)?;
    let scaled = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let masked = tape.add(scaled, mask)?;
    tape.softmax_rows(masked)
}
