//! Marching tetrahedra over signed densities, differentiable through the
//! edge-crossing positions.
//!
//! Topology (which edges cross) is a discrete function of the sign
//! configuration and carries no gradient; the crossing positions are rational
//! in the densities and do. Every emitted vertex records its provenance (the
//! grid-point pair and density pair that produced it) so an optimizer can
//! rebuild just those crossings on a tape.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::grid::{RegularGrid, TetSet};
use crate::tape::{Tape, VarId};
use crate::vec3::Vec3;

/// Sign of a density against the iso-threshold: +1 iff sigma > s, else -1
/// (the surface itself counts as inside).
#[inline]
pub fn classify(sigma: f64, s: f64) -> i8 {
    if sigma > s {
        1
    } else {
        -1
    }
}

/// Crossing point of the linear density interpolant on an edge, with a flag
/// that is false when the degenerate midpoint fallback was taken.
#[derive(Debug, Clone, Copy)]
pub struct Crossing {
    pub pos: Vec3,
    pub differentiable: bool,
}

/// Iso-crossing of the segment (v_a, v_b) carrying densities (sigma_a,
/// sigma_b) against threshold s: with sigma' = sigma - s,
/// (v_a sigma'_b - v_b sigma'_a) / (sigma'_b - sigma'_a).
/// Callers must ensure the classifications differ; a denominator below
/// 1e-12 falls back to the midpoint (flagged non-differentiable).
pub fn crossing(va: Vec3, vb: Vec3, sigma_a: f64, sigma_b: f64, s: f64) -> Crossing {
    debug_assert_ne!(classify(sigma_a, s), classify(sigma_b, s));
    let sa = sigma_a - s;
    let sb = sigma_b - s;
    let den = sb - sa;
    if libm::fabs(den) < 1e-12 {
        return Crossing {
            pos: (va + vb) * 0.5,
            differentiable: false,
        };
    }
    Crossing {
        pos: (va * sb - vb * sa) / den,
        differentiable: true,
    }
}

/// Tape form of [`crossing`]: densities are tape variables, positions are
/// constants, so gradients flow from vertex coordinates into the densities.
/// Returns the coordinate variables plus the differentiability flag.
pub fn crossing_taped(
    t: &mut Tape,
    va: Vec3,
    vb: Vec3,
    sigma_a: VarId,
    sigma_b: VarId,
    s: f64,
) -> ([VarId; 3], bool) {
    let sa = t.addc(sigma_a, -s);
    let sb = t.addc(sigma_b, -s);
    let den = t.sub(sb, sa);
    if libm::fabs(t.val(den)) < 1e-12 {
        let m = (va + vb) * 0.5;
        return (
            [t.leaf(m.x), t.leaf(m.y), t.leaf(m.z)],
            false,
        );
    }
    let mut out = [VarId(0); 3];
    for k in 0..3 {
        let num_a = t.mulc(sb, va.axis(k));
        let num_b = t.mulc(sa, vb.axis(k));
        let num = t.sub(num_a, num_b);
        out[k] = t.div(num, den);
    }
    (out, true)
}

/// Which grid edge a mesh vertex came from, and the densities that placed it.
#[derive(Debug, Clone, Copy)]
pub struct VertexProvenance {
    pub a: u32,
    pub b: u32,
    pub sigma_a: f64,
    pub sigma_b: f64,
}

/// Triangle mesh with per-vertex provenance (present for every vertex when
/// produced by marching).
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub provenance: Vec<VertexProvenance>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (p0, p1, p2) = (
            self.positions[a as usize],
            self.positions[b as usize],
            self.positions[c as usize],
        );
        (p1 - p0).cross(p2 - p0).norm() * 0.5
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let (p0, p1, p2) = (
            self.positions[a as usize],
            self.positions[b as usize],
            self.positions[c as usize],
        );
        (p1 - p0).cross(p2 - p0).normalized()
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        (self.positions[a as usize] + self.positions[b as usize] + self.positions[c as usize])
            / 3.0
    }
}

const ZERO_AREA_TOLERANCE: f64 = 1e-12;

/// March a tetrahedron soup: `tets` index into `points`/`densities`. Shared
/// crossing vertices are deduplicated by their (sorted) grid-point edge key;
/// faces are oriented with normals pointing toward the sigma > s side
/// (outward when densities are an SDF with negative interior).
pub fn march(points: &[Vec3], densities: &[f64], tets: &[[u32; 4]], s: f64) -> Mesh {
    assert_eq!(
        points.len(),
        densities.len(),
        "densities must align with points"
    );
    let mut b = MarchBuilder {
        points,
        densities,
        s,
        edge_to_vertex: BTreeMap::new(),
        positions: Vec::new(),
        provenance: Vec::new(),
        faces: Vec::new(),
    };

    for tet in tets {
        let mut neg: Vec<usize> = Vec::with_capacity(4);
        let mut pos: Vec<usize> = Vec::with_capacity(4);
        for i in 0..4 {
            if classify(densities[tet[i] as usize], s) < 0 {
                neg.push(i)
            } else {
                pos.push(i)
            }
        }
        if neg.is_empty() || pos.is_empty() {
            continue;
        }
        let centroid = |set: &[usize]| -> Vec3 {
            let mut c = Vec3::ZERO;
            for &i in set {
                c += points[tet[i] as usize];
            }
            c / set.len() as f64
        };
        let toward_positive = centroid(&pos) - centroid(&neg);
        match neg.len() {
            1 | 3 => {
                let (lone, others) = if neg.len() == 1 {
                    (neg[0], &pos)
                } else {
                    (pos[0], &neg)
                };
                let v: [u32; 3] =
                    core::array::from_fn(|i| b.vertex_on_edge(tet[lone], tet[others[i]]));
                b.emit(v, toward_positive);
            }
            2 => {
                // Quad across the four mixed-sign edges, in cyclic order;
                // split on the q0-q2 diagonal.
                let q0 = b.vertex_on_edge(tet[neg[0]], tet[pos[0]]);
                let q1 = b.vertex_on_edge(tet[neg[0]], tet[pos[1]]);
                let q2 = b.vertex_on_edge(tet[neg[1]], tet[pos[1]]);
                let q3 = b.vertex_on_edge(tet[neg[1]], tet[pos[0]]);
                b.emit([q0, q1, q2], toward_positive);
                b.emit([q0, q2, q3], toward_positive);
            }
            _ => unreachable!(),
        }
    }

    compact(b.positions, b.provenance, b.faces)
}

struct MarchBuilder<'a> {
    points: &'a [Vec3],
    densities: &'a [f64],
    s: f64,
    edge_to_vertex: BTreeMap<(u32, u32), u32>,
    positions: Vec<Vec3>,
    provenance: Vec<VertexProvenance>,
    faces: Vec<[u32; 3]>,
}

impl MarchBuilder<'_> {
    /// Deduplicated crossing vertex for the (sorted) grid edge.
    fn vertex_on_edge(&mut self, ga: u32, gb: u32) -> u32 {
        let key = (ga.min(gb), ga.max(gb));
        if let Some(&v) = self.edge_to_vertex.get(&key) {
            return v;
        }
        let (ka, kb) = key;
        let c = crossing(
            self.points[ka as usize],
            self.points[kb as usize],
            self.densities[ka as usize],
            self.densities[kb as usize],
            self.s,
        );
        let v = self.positions.len() as u32;
        self.positions.push(c.pos);
        self.provenance.push(VertexProvenance {
            a: ka,
            b: kb,
            sigma_a: self.densities[ka as usize],
            sigma_b: self.densities[kb as usize],
        });
        self.edge_to_vertex.insert(key, v);
        v
    }

    /// Push a triangle oriented so its normal points toward the positive
    /// side; drops faces at or below the zero-area tolerance.
    fn emit(&mut self, tri: [u32; 3], toward_positive: Vec3) {
        let (p0, p1, p2) = (
            self.positions[tri[0] as usize],
            self.positions[tri[1] as usize],
            self.positions[tri[2] as usize],
        );
        let n = (p1 - p0).cross(p2 - p0);
        if n.norm() * 0.5 <= ZERO_AREA_TOLERANCE {
            return;
        }
        if n.dot(toward_positive) < 0.0 {
            self.faces.push([tri[0], tri[2], tri[1]]);
        } else {
            self.faces.push(tri);
        }
    }
}

/// Drop vertices referenced by no face, preserving order.
fn compact(positions: Vec<Vec3>, provenance: Vec<VertexProvenance>, faces: Vec<[u32; 3]>) -> Mesh {
    let mut used = alloc::vec![false; positions.len()];
    for f in &faces {
        for &v in f {
            used[v as usize] = true;
        }
    }
    let mut remap = alloc::vec![u32::MAX; positions.len()];
    let mut mesh = Mesh::default();
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = mesh.positions.len() as u32;
            mesh.positions.push(positions[i]);
            mesh.provenance.push(provenance[i]);
        }
    }
    mesh.faces = faces
        .into_iter()
        .map(|f| core::array::from_fn(|i| remap[f[i] as usize]))
        .collect();
    mesh
}

/// Convenience: march a regular grid's tet split.
pub fn march_grid(grid: &RegularGrid, tets: &TetSet, s: f64) -> Mesh {
    march(&grid.points, &grid.densities, &tets.tets, s)
}

/// Synthetic icosphere: subdivided icosahedron projected onto the sphere.
/// Faces wind counterclockwise seen from outside; provenance is empty (the
/// mesh was not produced by marching).
pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> Mesh {
    let phi = (1.0 + libm::sqrt(5.0)) * 0.5;
    let base = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut positions: Vec<Vec3> = base
        .iter()
        .map(|&(x, y, z)| Vec3 { x, y, z }.normalized())
        .collect();
    let mut faces: Vec<[u32; 3]> = alloc::vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let m =
                        ((positions[a as usize] + positions[b as usize]) * 0.5).normalized();
                    positions.push(m);
                    positions.len() as u32 - 1
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push(mid);
        }
        faces = next_faces;
    }
    Mesh {
        positions: positions
            .into_iter()
            .map(|p| center + p * radius)
            .collect(),
        faces,
        provenance: Vec::new(),
    }
}
