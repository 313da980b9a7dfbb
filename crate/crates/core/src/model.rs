//! The full two-level model and its checkpoint format.
//!
//! High level: a graph encoder produces node embeddings, a second (narrow)
//! encoder provides the consensus term, and the matcher turns both into
//! correspondences and an overlap decision. Low level: the pose network runs
//! on the high-level embeddings only when overlap is detected.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::encoder::{EncoderConfig, GraphEncoder, GraphStructure};
use crate::geometry::RelativePose;
use crate::graph::SceneGraph;
use crate::matcher::{combined_scores, consensus_difference, decide, similarity, CorrespondenceResult};
use crate::nn::{Binding, ForwardCtx, ParamSet};
use crate::pose::{PoseConfig, PoseError, PoseNetwork};
use crate::synth::derive_seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NOPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("graph has {nodes} nodes; the model supports at most {limit}")]
    Capacity { nodes: usize, limit: usize },
    #[error("graph feature width {got} does not match the model's {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Evaluation-time ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Include the consensus term `D`.
    pub consensus: bool,
    /// Estimate pose only when overlap is detected.
    pub gating: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            consensus: true,
            gating: true,
        }
    }
}

/// Tape handles of one high-level forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HighOutputs {
    pub ego: Var,
    pub mate: Var,
    pub similarity: Var,
    pub difference: Option<Var>,
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub correspondence: CorrespondenceResult,
    pub pose: Option<RelativePose>,
}

impl Inference {
    /// `{"overlap": bool, "p": [x, y, z], "q": [w, x, y, z]}`, pose fields
    /// only when a pose was estimated; `q` has `w ≥ 0`.
    pub fn pose_json(&self) -> PoseJson {
        let pose = self.pose.map(|p| p.canonical());
        PoseJson {
            overlap: self.correspondence.overlap,
            p: pose.map(|p| p.position),
            q: pose.map(|p| p.orientation),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub overlap: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
}

/// Inference-time embeddings and score matrices for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub ego: Tensor,
    pub mate: Tensor,
    pub similarity: Tensor,
    pub difference: Tensor,
}

#[derive(Clone, Debug)]
pub struct NopeModel {
    pub config: RunConfig,
    pub params: ParamSet,
    pub encoder: GraphEncoder,
    pub consensus: GraphEncoder,
    pub pose: PoseNetwork,
    /// Fixed random node signature, `max_nodes × r`.
    pub signature: Tensor,
    pub step: u64,
}

impl NopeModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config
            .validate()
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417));
        let mut params = ParamSet::new();
        let encoder = GraphEncoder::new(
            &mut params,
            "encoder",
            EncoderConfig {
                input_width: config.feature_width,
                width: config.width,
                heads: config.heads,
                layers: config.high_layers,
            },
            &mut rng,
        )?;
        let consensus = GraphEncoder::new(
            &mut params,
            "consensus",
            EncoderConfig {
                input_width: config.signature_width,
                width: config.consensus_width,
                heads: config.heads,
                layers: config.high_layers,
            },
            &mut rng,
        )?;
        let pose = PoseNetwork::new(
            &mut params,
            "pose",
            PoseConfig {
                width: config.width,
                heads: config.heads,
                layers: config.low_layers,
                max_nodes: config.max_nodes,
                position_scale: config.position_scale,
            },
            &mut rng,
        )?;
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5161));
        let signature = Tensor::new(
            vec![config.max_nodes, config.signature_width],
            (0..config.max_nodes * config.signature_width)
                .map(|_| srng.gen_range(-1.0..=1.0))
                .collect(),
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            consensus,
            pose,
            signature,
            step: 0,
        })
    }

    /// Parameters of the correspondence level (trained in phase 1).
    pub fn is_high_level(&self, index: usize) -> bool {
        let name = &self.params.iter().nth(index).expect("index").0;
        name.starts_with("encoder.") || name.starts_with("consensus.")
    }

    pub fn check_graph(&self, graph: &SceneGraph) -> Result<()> {
        if graph.len() > self.config.max_nodes {
            return Err(ModelError::Capacity {
                nodes: graph.len(),
                limit: self.config.max_nodes,
            });
        }
        if !graph.is_empty() && graph.feature_width() != self.config.feature_width {
            return Err(ModelError::FeatureWidth {
                got: graph.feature_width(),
                expected: self.config.feature_width,
            });
        }
        Ok(())
    }

    fn node_inputs(&self, graph: &SceneGraph) -> Tensor {
        if graph.is_empty() {
            Tensor::zeros(&[0, self.config.feature_width])
        } else {
            graph.features()
        }
    }

    fn signature_rows(&self, n: usize) -> Tensor {
        let r = self.config.signature_width;
        Tensor::new(vec![n, r], self.signature.data()[..n * r].to_vec()).expect("rows")
    }

    /// Embeddings, `S`, optional `D` and combined scores on a tape.
    #[allow(clippy::too_many_arguments)]
    pub fn high_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        ego: &SceneGraph,
        mate: &SceneGraph,
        ego_struct: &GraphStructure,
        mate_struct: &GraphStructure,
        ctx: &mut ForwardCtx,
        use_consensus: bool,
    ) -> Result<HighOutputs> {
        self.check_graph(ego)?;
        self.check_graph(mate)?;
        let fe = tape.constant(self.node_inputs(ego));
        let fm = tape.constant(self.node_inputs(mate));
        let he = self.encoder.forward(tape, b, fe, ego_struct, ctx)?;
        let hm = self.encoder.forward(tape, b, fm, mate_struct, ctx)?;
        let s = similarity(tape, he, hm)?;
        let (difference, scores) = if use_consensus && !ego.is_empty() && !mate.is_empty() {
            let j = tape.constant(self.signature_rows(ego.len()));
            let d = consensus_difference(
                tape,
                b,
                &self.consensus,
                s,
                j,
                ego_struct,
                mate_struct,
                &mut ForwardCtx::inference(),
            )?;
            (Some(d), combined_scores(tape, s, d)?)
        } else {
            (None, s)
        };
        Ok(HighOutputs {
            ego: he,
            mate: hm,
            similarity: s,
            difference,
            scores,
        })
    }

    /// Inference-mode embeddings, `S` and `D` (zeros when consensus is off).
    pub fn score_pair(&self, ego: &SceneGraph, mate: &SceneGraph, use_consensus: bool) -> Result<PairScores> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (es, ms) = (GraphStructure::from_graph(ego), GraphStructure::from_graph(mate));
        let out = self.high_forward(
            &mut tape,
            &b,
            ego,
            mate,
            &es,
            &ms,
            &mut ForwardCtx::inference(),
            use_consensus,
        )?;
        let similarity = tape.value(out.similarity).clone();
        let difference = match out.difference {
            Some(d) => tape.value(d).clone(),
            None => Tensor::zeros(similarity.shape()),
        };
        Ok(PairScores {
            ego: tape.value(out.ego).clone(),
            mate: tape.value(out.mate).clone(),
            similarity,
            difference,
        })
    }

    /// Pose from precomputed embeddings.
    pub fn estimate_pose(&self, ego: &Tensor, mate: &Tensor) -> Result<RelativePose> {
        Ok(self.pose.predict(&self.params, ego, mate)?)
    }

    /// Full pipeline for one pair at threshold `tau`.
    pub fn infer(&self, ego: &SceneGraph, mate: &SceneGraph, tau: f64, switches: Switches) -> Result<Inference> {
        let scores = self.score_pair(ego, mate, switches.consensus)?;
        self.infer_from_scores(&scores, tau, switches)
    }

    pub fn infer_from_scores(&self, scores: &PairScores, tau: f64, switches: Switches) -> Result<Inference> {
        let correspondence = decide(scores.similarity.clone(), scores.difference.clone(), tau);
        let wants_pose = correspondence.overlap || !switches.gating;
        let pose = if wants_pose && scores.ego.rows() > 0 && scores.mate.rows() > 0 {
            Some(self.estimate_pose(&scores.ego, &scores.mate)?)
        } else {
            None
        };
        Ok(Inference { correspondence, pose })
    }

    /// Named arrays in checkpoint order: parameters, then the signature.
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        v.push(("signature".into(), &self.signature));
        v
    }

    /// Versioned little-endian checkpoint.
    ///
    /// `"NOPECKPT"`, version u32, config text (u32 length + UTF-8), step u64,
    /// array count u32, then per array: name (u16 length + UTF-8), rank u8,
    /// dims as u32, values as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let arrays = self.arrays();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let config = RunConfig::parse_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(&config)?;
        model.step = u64::from_le_bytes(r.take(8)?.try_into().expect("8"));
        let count = r.u32()? as usize;
        let expected = model.params.len() + 1;
        if count != expected {
            return Err(ModelError::Checkpoint(format!("{count} arrays, expected {expected}")));
        }
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2")) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect();
            let slot = if name == "signature" {
                &mut model.signature
            } else {
                let id = model
                    .params
                    .find(&name)
                    .ok_or_else(|| ModelError::Checkpoint(format!("unknown array `{name}`")))?;
                model.params.get_mut(id)
            };
            if slot.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "array `{name}` has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + k {
            return Err(ModelError::Checkpoint(format!("truncated at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}
