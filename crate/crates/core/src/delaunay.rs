//! Ground-plane Delaunay edges for object graphs.
//!
//! Positions are camera-frame `[x, y, z]` with `y` pointing up, so the
//! triangulation runs on `(x, z)`. Coincident projections are separated by a
//! deterministic 1e-9 m offset derived from the node id.

use std::collections::BTreeSet;

use delaunator::{triangulate, Point};

pub const DUPLICATE_JITTER: f64 = 1e-9;

/// Unordered node-index pair stored as `(low, high)`.
pub type Edge = (usize, usize);

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Projects onto the ground plane, nudging exact duplicates apart.
pub fn project(positions: &[[f64; 3]], ids: &[u32]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(positions.len());
    for (k, p) in positions.iter().enumerate() {
        let mut q = [p[0], p[2]];
        let mut salt = ids.get(k).copied().unwrap_or(k as u32) as u64;
        let mut attempt = 1.0;
        while out.iter().any(|o| (o[0] - q[0]).abs() <= 1e-12 && (o[1] - q[1]).abs() <= 1e-12) {
            salt = splitmix(salt);
            let angle = (salt >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
            q = [
                p[0] + attempt * DUPLICATE_JITTER * angle.cos(),
                p[2] + attempt * DUPLICATE_JITTER * angle.sin(),
            ];
            attempt += 1.0;
        }
        out.push(q);
    }
    out
}

/// Delaunay edges of the ground-plane projection, ids taken as indices.
pub fn delaunay_edges(positions: &[[f64; 3]]) -> BTreeSet<Edge> {
    let ids: Vec<u32> = (0..positions.len() as u32).collect();
    delaunay_edges_keyed(positions, &ids)
}

/// As [`delaunay_edges`], with duplicate jitter keyed by `ids`.
pub fn delaunay_edges_keyed(positions: &[[f64; 3]], ids: &[u32]) -> BTreeSet<Edge> {
    let n = positions.len();
    let mut edges = BTreeSet::new();
    match n {
        0 | 1 => return edges,
        2 => {
            edges.insert((0, 1));
            return edges;
        }
        _ => {}
    }
    let plane = project(positions, ids);
    let points: Vec<Point> = plane.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
    let tri = triangulate(&points);
    if tri.triangles.is_empty() {
        return collinear_chain(&plane);
    }
    for t in tri.triangles.chunks(3) {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges
}

/// Consecutive pairs along the line through collinear points.
fn collinear_chain(plane: &[[f64; 2]]) -> BTreeSet<Edge> {
    let (first, far) = plane
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, p)| (i, (p[0] - plane[0][0]).hypot(p[1] - plane[0][1])))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let dir = if far > 0.0 {
        [
            (plane[first][0] - plane[0][0]) / far,
            (plane[first][1] - plane[0][1]) / far,
        ]
    } else {
        [1.0, 0.0]
    };
    let mut order: Vec<usize> = (0..plane.len()).collect();
    let key = |i: usize| plane[i][0] * dir[0] + plane[i][1] * dir[1];
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    order
        .windows(2)
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
        .collect()
}

/// True when `d` lies strictly inside the circumcircle of `a, b, c`.
pub fn in_circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let det = (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        - (bdx * bdx + bdy * bdy) * (adx * cdy - cdx * ady)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady);
    if orient > 0.0 {
        det > 0.0
    } else {
        det < 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert!(delaunay_edges(&[]).is_empty());
        assert!(delaunay_edges(&[[1.0, 0.0, 2.0]]).is_empty());
        let two = delaunay_edges(&[[0.0, 0.0, 0.0], [1.0, 5.0, 1.0]]);
        assert_eq!(two.into_iter().collect::<Vec<_>>(), vec![(0, 1)]);
        let tri = delaunay_edges(&[[0.0, 0.0, 0.0], [4.0, 1.0, 0.0], [0.0, 2.0, 3.0]]);
        assert_eq!(tri.len(), 3);
    }

    #[test]
    fn collinear_points_form_a_chain() {
        let pts = [[3.0, 0.0, 3.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [2.0, 2.0, 2.0]];
        let edges: Vec<_> = delaunay_edges(&pts).into_iter().collect();
        assert_eq!(edges, vec![(0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn stacked_points_are_separated() {
        // same ground position, different heights
        let pts = [[0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 5.0]];
        let plane = project(&pts, &[0, 1, 2, 3]);
        assert_ne!(plane[0], plane[1]);
        assert!((plane[1][0] - plane[0][0]).hypot(plane[1][1] - plane[0][1]) < 1e-8);
        let edges = delaunay_edges(&pts);
        assert!(edges.iter().any(|&(a, b)| (a, b) == (0, 1)));
        assert_eq!(project(&pts, &[0, 1, 2, 3]), plane);
    }

    #[test]
    fn circumcircle_predicate() {
        let (a, b, c) = ([0.0, 0.0], [2.0, 0.0], [0.0, 2.0]);
        assert!(in_circumcircle(a, b, c, [1.0, 1.0]));
        assert!(in_circumcircle(a, c, b, [1.0, 1.0]));
        assert!(!in_circumcircle(a, b, c, [3.0, 3.0]));
    }
}
