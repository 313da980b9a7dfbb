//! Binary scene-graph packet, format version 1.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NOPE"
//! 4       1     version (1)
//! 5       2     node count n, u16 LE
//! 7       2     feature width d_f, u16 LE
//! 9       4     quantisation scale, f32 LE
//! 13      4     quantisation offset, f32 LE
//! 17      ...   n records: x, y, z as f32 LE, then d_f feature bytes
//! ```
//!
//! A feature byte `b` decodes to `offset + b · scale`. Edges are not sent;
//! the receiver rebuilds the Delaunay graph from the positions.

use thiserror::Error;

use crate::graph::{build_graph, GraphError, ObjectNode, SceneGraph};

pub const MAGIC: [u8; 4] = *b"NOPE";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic at offset 0: {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at offset 4")]
    BadVersion { found: u8 },
    #[error("packet truncated at offset {offset}: need {needed} bytes, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{extra} trailing bytes after offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("node {node} has a non-finite feature or position")]
    NonFinite { node: usize },
    #[error("{0} nodes exceed the u16 node count")]
    TooManyNodes(usize),
    #[error("feature width {0} exceeds the u16 field")]
    FeatureWidth(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exact encoded length: `17 + n · (12 + d_f)`.
pub fn packet_size(graph: &SceneGraph) -> usize {
    HEADER_LEN + graph.len() * (12 + graph.feature_width())
}

/// Largest `f32` not above `v`.
fn f32_floor(v: f64) -> f32 {
    let f = v as f32;
    if f as f64 > v {
        f.next_down()
    } else {
        f
    }
}

/// Smallest `f32` not below `v`.
fn f32_ceil(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) < v {
        f.next_up()
    } else {
        f
    }
}

/// Global affine 8-bit quantiser `(scale, offset)` covering all features.
/// Both are rounded outward in `f32` so every value stays in range.
pub fn quantizer(graph: &SceneGraph) -> (f32, f32) {
    let (lo, hi) = graph
        .nodes()
        .iter()
        .flat_map(|n| n.feature.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !lo.is_finite() {
        return (0.0, 0.0);
    }
    let offset = f32_floor(lo);
    let scale = f32_ceil((hi - offset as f64) / 255.0);
    (scale, offset)
}

pub fn encode(graph: &SceneGraph) -> Result<Vec<u8>, WireError> {
    let n = graph.len();
    let df = graph.feature_width();
    if n > u16::MAX as usize {
        return Err(WireError::TooManyNodes(n));
    }
    if df > u16::MAX as usize {
        return Err(WireError::FeatureWidth(df));
    }
    for (k, node) in graph.nodes().iter().enumerate() {
        if node.feature.iter().chain(&node.position).any(|v| !v.is_finite()) {
            return Err(WireError::NonFinite { node: k });
        }
    }
    let (scale, offset) = quantizer(graph);
    let mut out = Vec::with_capacity(packet_size(graph));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(df as u16).to_le_bytes());
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend_from_slice(&offset.to_le_bytes());
    for node in graph.nodes() {
        for p in node.position {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        for v in &node.feature {
            let q = if scale > 0.0 {
                ((v - offset as f64) / scale as f64).round().clamp(0.0, 255.0)
            } else {
                0.0
            };
            out.push(q as u8);
        }
    }
    debug_assert_eq!(out.len(), packet_size(graph));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], WireError> {
        if self.bytes.len() < self.pos + k {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: k,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a packet; node ids are the record indices.
pub fn decode(bytes: &[u8]) -> Result<SceneGraph, WireError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| WireError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(WireError::BadMagic { found: magic.to_vec() });
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(WireError::BadVersion { found: version });
    }
    let n = c.u16()? as usize;
    let df = c.u16()? as usize;
    let scale = c.f32()? as f64;
    let offset = c.f32()? as f64;
    let mut nodes = Vec::with_capacity(n);
    for k in 0..n {
        let position = [c.f32()? as f64, c.f32()? as f64, c.f32()? as f64];
        if position.iter().any(|v| !v.is_finite()) {
            return Err(WireError::NonFinite { node: k });
        }
        let feature = c.take(df)?.iter().map(|b| offset + *b as f64 * scale).collect();
        nodes.push(ObjectNode::new(k as u32, position, feature));
    }
    if c.pos != bytes.len() {
        return Err(WireError::Trailing {
            offset: c.pos,
            extra: bytes.len() - c.pos,
        });
    }
    Ok(build_graph(nodes)?)
}

/// Copy of `graph` with positions rounded to `f32`, as a receiver sees them.
pub fn f32_positions(graph: &SceneGraph) -> Result<SceneGraph, GraphError> {
    build_graph(
        graph
            .nodes()
            .iter()
            .map(|n| {
                let mut m = n.clone();
                m.position = n.position.map(|v| v as f32 as f64);
                m
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_is_header_only() {
        let bytes = encode(&SceneGraph::empty()).unwrap();
        assert_eq!(bytes.len(), 17);
        assert_eq!(&bytes[..5], b"NOPE\x01");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn size_formula_for_one_node() {
        let g = build_graph(vec![ObjectNode::new(0, [1.0, 2.0, 3.0], vec![0.5; 32])]).unwrap();
        assert_eq!(packet_size(&g), 61);
        assert_eq!(encode(&g).unwrap().len(), 61);
    }

    #[test]
    fn parse_errors_name_offsets() {
        let g = build_graph(vec![ObjectNode::new(0, [1.0, 2.0, 3.0], vec![0.5, -1.0])]).unwrap();
        let bytes = encode(&g).unwrap();
        assert!(matches!(decode(b"NOPX\x01"), Err(WireError::BadMagic { .. })));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(WireError::BadVersion { found: 2 })));
        assert!(matches!(
            decode(&bytes[..20]),
            Err(WireError::Truncated { offset: 17, needed: 4, available: 3 })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(WireError::Truncated { offset: 29, needed: 2, available: 1 })
        ));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let g = build_graph(vec![ObjectNode::new(0, [0.0; 3], vec![f64::NAN])]).unwrap();
        assert!(matches!(encode(&g), Err(WireError::NonFinite { node: 0 })));
    }
}
