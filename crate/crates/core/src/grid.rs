//! Regular sampling lattice and the cube → five-tetrahedra decomposition.
//!
//! Cubes are split with a checkerboard parity: adjacent cubes use mirrored
//! tables so the diagonals induced on a shared face agree, which keeps
//! marched surfaces crack-free across cube boundaries.

use alloc::vec::Vec;

use crate::field::Field;
use crate::vec3::{Aabb, Vec3};
use crate::{Error, Result};

/// Lattice of N^3 points spanning the bbox, with one density per point.
/// Point (i, j, k) lives at index `i + N*(j + N*k)`.
#[derive(Debug, Clone)]
pub struct RegularGrid {
    pub n: usize,
    pub bbox: Aabb,
    pub points: Vec<Vec3>,
    pub densities: Vec<f64>,
}

impl RegularGrid {
    #[inline]
    pub fn point_index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.n && j < self.n && k < self.n);
        i + self.n * (j + self.n * k)
    }
}

/// Exact lattice position: b_min + idx/(N-1) * (b_max - b_min) per axis.
#[inline]
pub fn lattice_point(bbox: &Aabb, n: usize, i: usize, j: usize, k: usize) -> Vec3 {
    let f = |idx: usize, lo: f64, hi: f64| lo + (idx as f64 / (n - 1) as f64) * (hi - lo);
    Vec3 {
        x: f(i, bbox.min.x, bbox.max.x),
        y: f(j, bbox.min.y, bbox.max.y),
        z: f(k, bbox.min.z, bbox.max.z),
    }
}

/// Evaluate the field's density at every lattice point of an N^3 grid over
/// the field bbox. Rejects N < 2.
pub fn build_grid(field: &Field, n: usize) -> Result<RegularGrid> {
    if n < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    let bbox = field.bbox;
    let mut points = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                points.push(lattice_point(&bbox, n, i, j, k));
            }
        }
    }
    let mut scratch = crate::field::FieldScratch::default();
    let densities = points
        .iter()
        .map(|&p| field.sigma_with_scratch(p, &mut scratch))
        .collect();
    Ok(RegularGrid {
        n,
        bbox,
        points,
        densities,
    })
}

/// Five tetrahedra of the unit cube, even parity. Corner numbering: bit 0 =
/// +x, bit 1 = +y, bit 2 = +z. Orderings chosen so every signed volume is
/// positive; the central tet {0,3,6,5} has volume 1/3, the four corner tets
/// 1/6 each.
pub const EVEN_TETS: [[u8; 4]; 5] = [
    [0, 3, 6, 5],
    [1, 0, 5, 3],
    [2, 3, 6, 0],
    [4, 5, 0, 6],
    [7, 6, 3, 5],
];

/// Odd parity: the even table mirrored in x (corner c -> c ^ 1), which flips
/// each face's diagonal so neighbors agree on shared faces.
pub const ODD_TETS: [[u8; 4]; 5] = [
    [1, 2, 4, 7],
    [0, 1, 2, 4],
    [3, 2, 1, 7],
    [5, 4, 7, 1],
    [6, 7, 4, 2],
];

/// Tetrahedra as point-index quadruples plus the per-cube parity bits.
#[derive(Debug, Clone)]
pub struct TetSet {
    pub tets: Vec<[u32; 4]>,
    pub parity: Vec<bool>,
}

/// Split every cube of the grid into five tetrahedra with checkerboard
/// parity (cube (i,j,k) is odd iff i+j+k is odd). Yields 5*(N-1)^3 tets.
pub fn split_tets(grid: &RegularGrid) -> TetSet {
    let n = grid.n;
    let cells = n - 1;
    let mut tets = Vec::with_capacity(5 * cells * cells * cells);
    let mut parity = Vec::with_capacity(cells * cells * cells);
    for k in 0..cells {
        for j in 0..cells {
            for i in 0..cells {
                let odd = (i + j + k) % 2 == 1;
                parity.push(odd);
                let table = if odd { &ODD_TETS } else { &EVEN_TETS };
                let corner = |c: u8| -> u32 {
                    let di = (c & 1) as usize;
                    let dj = ((c >> 1) & 1) as usize;
                    let dk = ((c >> 2) & 1) as usize;
                    grid.point_index(i + di, j + dj, k + dk) as u32
                };
                for t in table {
                    tets.push([corner(t[0]), corner(t[1]), corner(t[2]), corner(t[3])]);
                }
            }
        }
    }
    TetSet { tets, parity }
}

/// Signed volume of a tetrahedron (positive for the orientation used by the
/// split tables).
pub fn signed_volume(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    (b - a).dot((c - a).cross(d - a)) / 6.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticRadiance, AnalyticSdf, Field};
    use crate::vec3::vec3;
    use alloc::collections::BTreeSet;

    fn sphere_field() -> Field {
        Field::analytic(
            Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5)),
            AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap(),
            AnalyticRadiance::Constant([1.0, 0.0, 0.0]),
        )
    }

    #[test]
    fn two_point_grid_is_the_bbox_corners() {
        let g = build_grid(&sphere_field(), 2).unwrap();
        assert_eq!(g.points.len(), 8);
        let expect = [
            vec3(-1.5, -1.5, -1.5),
            vec3(1.5, -1.5, -1.5),
            vec3(-1.5, 1.5, -1.5),
            vec3(1.5, 1.5, -1.5),
            vec3(-1.5, -1.5, 1.5),
            vec3(1.5, -1.5, 1.5),
            vec3(-1.5, 1.5, 1.5),
            vec3(1.5, 1.5, 1.5),
        ];
        for (p, e) in g.points.iter().zip(expect) {
            assert_eq!(*p, e);
        }
    }

    #[test]
    fn corner_density_equals_field_at_bbox_min_exactly() {
        let f = sphere_field();
        let g = build_grid(&f, 64).unwrap();
        assert_eq!(g.densities[0].to_bits(), f.sigma(f.bbox.min).to_bits());
    }

    #[test]
    fn grid_reevaluation_is_bit_identical() {
        let f = sphere_field();
        let a = build_grid(&f, 17).unwrap();
        let b = build_grid(&f, 17).unwrap();
        for (x, y) in a.densities.iter().zip(&b.densities) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn resolution_below_two_is_rejected() {
        assert!(build_grid(&sphere_field(), 1).is_err());
        assert!(build_grid(&sphere_field(), 0).is_err());
    }

    #[test]
    fn tet_counts_are_five_per_cube() {
        let f = sphere_field();
        for (n, cubes) in [(2usize, 1usize), (3, 8), (4, 27)] {
            let g = build_grid(&f, n).unwrap();
            let ts = split_tets(&g);
            assert_eq!(ts.tets.len(), 5 * cubes);
            assert_eq!(ts.parity.len(), cubes);
        }
    }

    #[test]
    fn tets_have_positive_volume_and_partition_each_cube() {
        let f = sphere_field();
        let g = build_grid(&f, 3).unwrap();
        let ts = split_tets(&g);
        let cell = 1.5; // bbox edge 3.0 over 2 cells
        for cube in 0..8 {
            let mut total = 0.0;
            for t in &ts.tets[cube * 5..cube * 5 + 5] {
                let v = signed_volume(
                    g.points[t[0] as usize],
                    g.points[t[1] as usize],
                    g.points[t[2] as usize],
                    g.points[t[3] as usize],
                );
                assert!(v > 0.0, "non-positive tet volume {v} in cube {cube}");
                total += v;
            }
            let expect = cell * cell * cell;
            assert!(
                (total - expect).abs() < 1e-12 * expect,
                "cube {cube} volume {total} vs {expect}"
            );
        }
    }

    /// For every interior face of an N=4 grid, the two incident cubes must
    /// induce the same face diagonal, else marching would produce cracks.
    #[test]
    fn neighbor_cubes_agree_on_shared_face_diagonals() {
        let f = sphere_field();
        let g = build_grid(&f, 4).unwrap();
        let ts = split_tets(&g);
        let n = g.n;
        let cells = n - 1;
        let cube_tets = |ci: usize, cj: usize, ck: usize| -> &[[u32; 4]] {
            let c = ci + cells * (cj + cells * ck);
            &ts.tets[c * 5..c * 5 + 5]
        };
        let coords = |idx: u32| -> (usize, usize, usize) {
            let i = idx as usize % n;
            let j = (idx as usize / n) % n;
            let k = idx as usize / (n * n);
            (i, j, k)
        };
        // The diagonal a cube induces on one of its faces: the unique tet
        // edge whose endpoints both lie on the face and differ in both
        // in-face axes.
        let face_diagonal = |tets: &[[u32; 4]], axis: usize, plane: usize| -> BTreeSet<(u32, u32)> {
            let mut diags = BTreeSet::new();
            for t in tets {
                for a in 0..4 {
                    for b in a + 1..4 {
                        let (pa, pb) = (t[a], t[b]);
                        let ca = [coords(pa).0, coords(pa).1, coords(pa).2];
                        let cb = [coords(pb).0, coords(pb).1, coords(pb).2];
                        if ca[axis] != plane || cb[axis] != plane {
                            continue;
                        }
                        let others: Vec<usize> = (0..3).filter(|&x| x != axis).collect();
                        if ca[others[0]] != cb[others[0]] && ca[others[1]] != cb[others[1]] {
                            diags.insert((pa.min(pb), pa.max(pb)));
                        }
                    }
                }
            }
            diags
        };
        for ck in 0..cells {
            for cj in 0..cells {
                for ci in 0..cells {
                    // +x, +y, +z neighbors.
                    for (axis, ni, nj, nk) in [
                        (0usize, ci + 1, cj, ck),
                        (1, ci, cj + 1, ck),
                        (2, ci, cj, ck + 1),
                    ] {
                        if ni >= cells || nj >= cells || nk >= cells {
                            continue;
                        }
                        let plane = match axis {
                            0 => ci + 1,
                            1 => cj + 1,
                            _ => ck + 1,
                        };
                        let da = face_diagonal(cube_tets(ci, cj, ck), axis, plane);
                        let db = face_diagonal(cube_tets(ni, nj, nk), axis, plane);
                        assert_eq!(da.len(), 1, "cube must cut each face exactly once");
                        assert_eq!(
                            da, db,
                            "face diagonal mismatch across cubes ({ci},{cj},{ck})/+{axis}"
                        );
                    }
                }
            }
        }
    }
}
