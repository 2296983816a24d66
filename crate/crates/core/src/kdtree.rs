//! Deterministic kd-tree for nearest-neighbor queries.
//!
//! Ties (equal squared distances) resolve to the smallest original point
//! index, so query results are a pure function of the point set and query,
//! independent of tree layout.

use alloc::vec::Vec;

use crate::vec3::Vec3;

#[derive(Debug, Clone)]
pub struct KdTree {
    /// Points in tree order (median-partitioned).
    pts: Vec<Vec3>,
    /// Original index of each tree-ordered point.
    idx: Vec<u32>,
}

impl KdTree {
    /// Build from a point slice (empty input yields an empty tree).
    pub fn build(points: &[Vec3]) -> KdTree {
        let mut pts = points.to_vec();
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        if !pts.is_empty() {
            build_rec(&mut pts, &mut idx, 0);
        }
        KdTree { pts, idx }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Nearest point to the query: (original index, squared distance).
    /// None only for an empty tree.
    pub fn nearest(&self, q: Vec3) -> Option<(u32, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, self.pts.len(), 0, q, &mut best);
        Some(best)
    }

    /// Up to k nearest points as (original index, squared distance), sorted
    /// ascending by (squared distance, original index). Shorter than k only
    /// when the tree holds fewer than k points.
    pub fn nearest_k(&self, q: Vec3, k: usize) -> Vec<(u32, f64)> {
        if k == 0 || self.pts.is_empty() {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k.min(self.pts.len()) + 1);
        self.search_k(0, self.pts.len(), 0, q, k, &mut best);
        best.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn search_k(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        q: Vec3,
        k: usize,
        best: &mut Vec<(f64, u32)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[mid];
        let cand = (q.dist2(p), self.idx[mid]);
        if best.len() < k || cand < *best.last().expect("nonempty when full") {
            let pos = best.partition_point(|b| *b < cand);
            best.insert(pos, cand);
            best.truncate(k);
        }
        let delta = q.axis(axis) - p.axis(axis);
        let next_axis = (axis + 1) % 3;
        let (first, second) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(first.0, first.1, next_axis, q, k, best);
        // A far-side point at exactly the worst distance can still win its
        // index tie, so equality must not prune.
        let worst = if best.len() == k {
            best.last().expect("len k").0
        } else {
            f64::INFINITY
        };
        if delta * delta <= worst {
            self.search_k(second.0, second.1, next_axis, q, k, best);
        }
    }

    fn search(&self, lo: usize, hi: usize, axis: usize, q: Vec3, best: &mut (u32, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[mid];
        let d2 = q.dist2(p);
        let cand = (self.idx[mid], d2);
        if d2 < best.1 || (d2 == best.1 && cand.0 < best.0) {
            *best = cand;
        }
        let delta = q.axis(axis) - p.axis(axis);
        let next_axis = (axis + 1) % 3;
        let (first, second) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(first.0, first.1, next_axis, q, best);
        if delta * delta <= best.1 {
            self.search(second.0, second.1, next_axis, q, best);
        }
    }
}

fn build_rec(pts: &mut [Vec3], idx: &mut [u32], axis: usize) {
    if pts.len() <= 1 {
        return;
    }
    let mid = pts.len() / 2;
    // Total order (coordinate, original index) makes the partition unique.
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        pts[a]
            .axis(axis)
            .partial_cmp(&pts[b].axis(axis))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(idx[a].cmp(&idx[b]))
    });
    let pts_copy: Vec<Vec3> = order.iter().map(|&i| pts[i]).collect();
    let idx_copy: Vec<u32> = order.iter().map(|&i| idx[i]).collect();
    pts.copy_from_slice(&pts_copy);
    idx.copy_from_slice(&idx_copy);
    let next = (axis + 1) % 3;
    let (l, r) = pts.split_at_mut(mid);
    let (li, ri) = idx.split_at_mut(mid);
    build_rec(l, li, next);
    build_rec(&mut r[1..], &mut ri[1..], next);
}
