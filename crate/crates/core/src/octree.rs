//! Seed-adaptive octree over edit regions and its conversion to an irregular
//! tetrahedral grid.
//!
//! A node subdivides iff it holds at least K seed vertices and is above the
//! maximum depth, so refinement tracks the edited surface instead of filling
//! the volume. All cube geometry derives from integer dyadic coordinates
//! (cell index at the node's depth), which makes corner deduplication across
//! depths exact and keeps construction bit-deterministic.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::field::{Field, FieldScratch};
use crate::grid::{EVEN_TETS, ODD_TETS};
use crate::march::{march, Mesh};
use crate::vec3::{Aabb, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct OctreeNode {
    pub depth: u8,
    /// Cell coordinates at this node's depth (root is (0,0,0) at depth 0).
    pub coords: [u32; 3],
    pub seed_count: u32,
    pub children: Option<[u32; 8]>,
}

#[derive(Debug, Clone)]
pub struct Octree {
    /// Root cube (always cubical; covers the requested bbox).
    pub root: Aabb,
    pub k: usize,
    pub l_max: usize,
    pub nodes: Vec<OctreeNode>,
    /// Leaf node indices in Morton (depth-first, octant-ordered) order.
    pub leaves: Vec<u32>,
    /// Seeds that fell outside the bbox and were clamped in.
    pub clamped_seeds: usize,
}

impl Octree {
    pub fn max_leaf_depth(&self) -> usize {
        self.leaves
            .iter()
            .map(|&l| self.nodes[l as usize].depth as usize)
            .max()
            .unwrap_or(0)
    }

    /// Edge length of a cube at the given depth.
    pub fn cube_edge(&self, depth: usize) -> f64 {
        (self.root.max.x - self.root.min.x) / (1u64 << depth) as f64
    }

    /// Exact dyadic position of an integer corner at the given depth.
    #[inline]
    pub fn corner_position(&self, depth: usize, c: [u64; 3]) -> Vec3 {
        let scale = (1u64 << depth) as f64;
        Vec3 {
            x: self.root.min.x + (c[0] as f64 / scale) * (self.root.max.x - self.root.min.x),
            y: self.root.min.y + (c[1] as f64 / scale) * (self.root.max.y - self.root.min.y),
            z: self.root.min.z + (c[2] as f64 / scale) * (self.root.max.z - self.root.min.z),
        }
    }

    /// Axis-aligned cube of a node.
    pub fn node_cube(&self, node: &OctreeNode) -> Aabb {
        let d = node.depth as usize;
        let lo = self.corner_position(
            d,
            [
                node.coords[0] as u64,
                node.coords[1] as u64,
                node.coords[2] as u64,
            ],
        );
        let hi = self.corner_position(
            d,
            [
                node.coords[0] as u64 + 1,
                node.coords[1] as u64 + 1,
                node.coords[2] as u64 + 1,
            ],
        );
        Aabb { min: lo, max: hi }
    }

    /// Leaf containing a point (points outside the root clamp to it).
    pub fn locate(&self, p: Vec3) -> u32 {
        let mut idx = 0u32;
        loop {
            let node = &self.nodes[idx as usize];
            let Some(children) = node.children else {
                return idx;
            };
            let cube = self.node_cube(node);
            let c = cube.center();
            let oct = (usize::from(p.x >= c.x))
                | (usize::from(p.y >= c.y) << 1)
                | (usize::from(p.z >= c.z) << 2);
            idx = children[oct];
        }
    }
}

/// Cubical root for a seed set: the tight bounding box inflated by 5%,
/// expanded to a cube, so crossings near the seeds never clip.
pub fn seed_root_cube(seeds: &[Vec3]) -> Result<Aabb> {
    let tight = Aabb::from_points(seeds).ok_or(Error::EmptyPointSet)?;
    let inflated = tight.inflated(0.05);
    let c = inflated.center();
    let e = inflated.extent();
    let mut half = (e.x.max(e.y).max(e.z)) * 0.5;
    if half < 1e-9 {
        half = 0.5;
    }
    Ok(Aabb {
        min: c - Vec3::splat(half),
        max: c + Vec3::splat(half),
    })
}

/// Build the octree: subdivide any node holding >= k seeds until depth
/// l_max. Seeds outside the bbox are clamped (counted in the result).
pub fn build_octree(seeds: &[Vec3], k: usize, l_max: usize, bbox: Aabb) -> Result<Octree> {
    if seeds.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if k < 1 {
        return Err(Error::invalid("occupancy threshold K must be >= 1"));
    }
    if l_max > 24 {
        return Err(Error::invalid("octree depth beyond 24 is not supported"));
    }
    // Cubical cover of the requested bbox.
    let c = bbox.center();
    let e = bbox.extent();
    let half = (e.x.max(e.y).max(e.z)) * 0.5;
    if !(half > 0.0) {
        return Err(Error::invalid("octree bbox must have positive extent"));
    }
    let root = Aabb {
        min: c - Vec3::splat(half),
        max: c + Vec3::splat(half),
    };

    let mut clamped = 0usize;
    let points: Vec<Vec3> = seeds
        .iter()
        .map(|&p| {
            let q = root.clamp(p);
            if q != p {
                clamped += 1;
            }
            q
        })
        .collect();

    let mut tree = Octree {
        root,
        k,
        l_max,
        nodes: Vec::new(),
        leaves: Vec::new(),
        clamped_seeds: clamped,
    };
    tree.nodes.push(OctreeNode {
        depth: 0,
        coords: [0, 0, 0],
        seed_count: points.len() as u32,
        children: None,
    });
    let all: Vec<u32> = (0..points.len() as u32).collect();
    subdivide(&mut tree, 0, all, &points);

    // Morton order: depth-first with children visited in octant order.
    let mut stack = alloc::vec![0u32];
    while let Some(idx) = stack.pop() {
        match tree.nodes[idx as usize].children {
            Some(children) => {
                for &ch in children.iter().rev() {
                    stack.push(ch);
                }
            }
            None => tree.leaves.push(idx),
        }
    }
    Ok(tree)
}

fn subdivide(tree: &mut Octree, node_idx: u32, seed_ids: Vec<u32>, points: &[Vec3]) {
    let (depth, coords) = {
        let n = &tree.nodes[node_idx as usize];
        (n.depth as usize, n.coords)
    };
    if seed_ids.len() < tree.k || depth >= tree.l_max {
        return;
    }
    let cube = tree.node_cube(&tree.nodes[node_idx as usize]);
    let center = cube.center();
    let mut buckets: [Vec<u32>; 8] = Default::default();
    for id in seed_ids {
        let p = points[id as usize];
        let oct = (usize::from(p.x >= center.x))
            | (usize::from(p.y >= center.y) << 1)
            | (usize::from(p.z >= center.z) << 2);
        buckets[oct].push(id);
    }
    let mut children = [0u32; 8];
    for (oct, bucket) in buckets.iter().enumerate() {
        let child_coords = [
            coords[0] * 2 + (oct & 1) as u32,
            coords[1] * 2 + ((oct >> 1) & 1) as u32,
            coords[2] * 2 + ((oct >> 2) & 1) as u32,
        ];
        let idx = tree.nodes.len() as u32;
        tree.nodes.push(OctreeNode {
            depth: (depth + 1) as u8,
            coords: child_coords,
            seed_count: bucket.len() as u32,
            children: None,
        });
        children[oct] = idx;
    }
    tree.nodes[node_idx as usize].children = Some(children);
    for (oct, bucket) in buckets.into_iter().enumerate() {
        if !bucket.is_empty() {
            subdivide(tree, children[oct], bucket, points);
        }
    }
}

/// The edit kinds that drive the seed policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Add,
    Remove,
    Deform,
    Recolor,
}

/// Seed vertices for the octree by edit kind: additions refine around the
/// target mesh, removals around the source, everything else around both.
pub fn seed_policy(kind: EditKind, source: &Mesh, target: &Mesh) -> Result<Vec<Vec3>> {
    let need = |m: &Mesh, what: &str| -> Result<()> {
        if m.positions.is_empty() {
            Err(Error::invalid(alloc::format!("{what} mesh has no vertices")))
        } else {
            Ok(())
        }
    };
    match kind {
        EditKind::Add => {
            need(target, "target")?;
            Ok(target.positions.clone())
        }
        EditKind::Remove => {
            need(source, "source")?;
            Ok(source.positions.clone())
        }
        EditKind::Deform | EditKind::Recolor => {
            need(source, "source")?;
            need(target, "target")?;
            let mut out = source.positions.clone();
            out.extend_from_slice(&target.positions);
            Ok(out)
        }
    }
}

/// Leaf cubes lowered to a tetrahedral grid: corners deduplicated exactly via
/// their integer dyadic coordinates, densities evaluated once per unique
/// corner, five tets per leaf with checkerboard parity at the leaf's depth.
#[derive(Debug, Clone)]
pub struct IrregularGrid {
    pub corners: Vec<Vec3>,
    pub densities: Vec<f64>,
    /// Per leaf (Morton order), its 8 corner indices in octant order.
    pub leaf_corners: Vec<[u32; 8]>,
    pub tets: Vec<[u32; 4]>,
}

pub fn leaves_to_grid(octree: &Octree, field: &Field) -> IrregularGrid {
    let finest = octree.l_max;
    let mut corner_ids: BTreeMap<(u64, u64, u64), u32> = BTreeMap::new();
    let mut corners: Vec<Vec3> = Vec::new();
    let mut leaf_corners = Vec::with_capacity(octree.leaves.len());
    let mut tets = Vec::with_capacity(octree.leaves.len() * 5);

    for &leaf in &octree.leaves {
        let node = &octree.nodes[leaf as usize];
        let d = node.depth as usize;
        let shift = (finest - d) as u64;
        let mut ids = [0u32; 8];
        for (oct, id) in ids.iter_mut().enumerate() {
            let key = (
                ((node.coords[0] as u64 + (oct as u64 & 1)) << shift),
                ((node.coords[1] as u64 + ((oct as u64 >> 1) & 1)) << shift),
                ((node.coords[2] as u64 + ((oct as u64 >> 2) & 1)) << shift),
            );
            *id = *corner_ids.entry(key).or_insert_with(|| {
                let idx = corners.len() as u32;
                corners.push(octree.corner_position(finest, [key.0, key.1, key.2]));
                idx
            });
        }
        leaf_corners.push(ids);
        let odd = (node.coords[0] + node.coords[1] + node.coords[2]) % 2 == 1;
        let table = if odd { &ODD_TETS } else { &EVEN_TETS };
        for t in table {
            tets.push([
                ids[t[0] as usize],
                ids[t[1] as usize],
                ids[t[2] as usize],
                ids[t[3] as usize],
            ]);
        }
    }

    let mut scratch = FieldScratch::default();
    let densities = corners
        .iter()
        .map(|&p| field.sigma_with_scratch(p, &mut scratch))
        .collect();
    IrregularGrid {
        corners,
        densities,
        leaf_corners,
        tets,
    }
}

/// March the octree's irregular grid against threshold s.
pub fn extract_octree_mesh(field: &Field, octree: &Octree, s: f64) -> Mesh {
    let grid = leaves_to_grid(octree, field);
    march(&grid.corners, &grid.densities, &grid.tets, s)
}

/// One-line build summary: leaf/corner counts, crack edges, max depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeDiagnostics {
    pub leaf_count: usize,
    pub corner_count: usize,
    pub crack_edges: usize,
    pub max_depth: usize,
}

impl core::fmt::Display for OctreeDiagnostics {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "octree leaves={} corners={} crack_edges={} max_depth={}",
            self.leaf_count, self.corner_count, self.crack_edges, self.max_depth
        )
    }
}

/// Diagnose a build and its extraction. Crack edges are mesh edges bordering
/// a number of faces other than two; T-junctions between depth levels are
/// the expected source.
pub fn diagnostics(octree: &Octree, grid: &IrregularGrid, mesh: &Mesh) -> OctreeDiagnostics {
    let mut edge_count: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let crack_edges = edge_count.values().filter(|&&c| c != 2).count();
    OctreeDiagnostics {
        leaf_count: octree.leaves.len(),
        corner_count: grid.corners.len(),
        crack_edges,
        max_depth: octree.max_leaf_depth(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticRadiance, AnalyticSdf, Field};
    use crate::grid::{build_grid, split_tets};
    use crate::march::march_grid;
    use crate::vec3::vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_field() -> Field {
        Field::analytic(
            Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5)),
            AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap(),
            AnalyticRadiance::Constant([1.0, 0.0, 0.0]),
        )
    }

    fn cube_bbox() -> Aabb {
        Aabb::new(vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0))
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                vec3(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn below_threshold_seed_count_keeps_the_root_only() {
        let seeds = random_points(31, 1);
        let t = build_octree(&seeds, 32, 5, cube_bbox()).unwrap();
        assert_eq!(t.leaves.len(), 1);
        assert_eq!(t.max_leaf_depth(), 0);
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn single_point_with_k1_subdivides_to_max_depth() {
        let seeds = [vec3(0.3, 0.3, 0.3)];
        let l_max = 4;
        let t = build_octree(&seeds, 1, l_max, cube_bbox()).unwrap();
        assert_eq!(t.max_leaf_depth(), l_max);
        // One occupied chain: each level adds 8 leaves, 7 of which stay
        // empty, so the leaf count is 7 * l_max + 1.
        assert_eq!(t.leaves.len(), 7 * l_max + 1);
        // The point's leaf is at the maximum depth.
        let leaf = t.locate(vec3(0.3, 0.3, 0.3));
        assert_eq!(t.nodes[leaf as usize].depth as usize, l_max);
    }

    /// Independent reference recursion (no arena, no clamping, direct
    /// counting) for the leaf count of a seed set.
    fn oracle_leaf_count(
        points: &[Vec3],
        min: Vec3,
        edge: f64,
        depth: usize,
        k: usize,
        l_max: usize,
    ) -> usize {
        if points.len() < k || depth >= l_max {
            return 1;
        }
        let half = edge * 0.5;
        let c = min + Vec3::splat(half);
        let mut total = 0;
        for oct in 0..8usize {
            let sub: Vec<Vec3> = points
                .iter()
                .copied()
                .filter(|p| {
                    (p.x >= c.x) == ((oct & 1) == 1)
                        && (p.y >= c.y) == (((oct >> 1) & 1) == 1)
                        && (p.z >= c.z) == (((oct >> 2) & 1) == 1)
                })
                .collect();
            let sub_min = vec3(
                min.x + if oct & 1 == 1 { half } else { 0.0 },
                min.y + if (oct >> 1) & 1 == 1 { half } else { 0.0 },
                min.z + if (oct >> 2) & 1 == 1 { half } else { 0.0 },
            );
            total += oracle_leaf_count(&sub, sub_min, half, depth + 1, k, l_max);
        }
        total
    }

    #[test]
    fn leaf_count_matches_reference_recursion_oracle() {
        let seeds = random_points(10_000, 7);
        let t = build_octree(&seeds, 32, 5, cube_bbox()).unwrap();
        let expect = oracle_leaf_count(&seeds, vec3(-1.0, -1.0, -1.0), 2.0, 0, 32, 5);
        assert_eq!(t.leaves.len(), expect);
    }

    #[test]
    fn out_of_bbox_seeds_are_clamped_and_counted() {
        let seeds = [vec3(0.0, 0.0, 0.0), vec3(5.0, 0.0, 0.0), vec3(0.0, -9.0, 2.0)];
        let t = build_octree(&seeds, 10, 3, cube_bbox()).unwrap();
        assert_eq!(t.clamped_seeds, 2);
        assert_eq!(t.leaves.len(), 1);
    }

    #[test]
    fn empty_seed_set_is_rejected() {
        assert!(matches!(
            build_octree(&[], 4, 3, cube_bbox()),
            Err(Error::EmptyPointSet)
        ));
    }

    #[test]
    fn seed_policy_selects_vertices_by_kind() {
        let mut source = Mesh::default();
        source.positions = random_points(5, 3);
        let mut target = Mesh::default();
        target.positions = random_points(7, 4);

        let add = seed_policy(EditKind::Add, &source, &target).unwrap();
        assert_eq!(add.len(), 7);
        assert_eq!(add, target.positions);

        let remove = seed_policy(EditKind::Remove, &source, &target).unwrap();
        assert_eq!(remove.len(), 5);
        assert_eq!(remove, source.positions);

        // Union is a multiset: disjoint meshes contribute every vertex.
        let deform = seed_policy(EditKind::Deform, &source, &target).unwrap();
        assert_eq!(deform.len(), 12);

        // Identical meshes double up; the octree sees the same vertex set.
        let same = seed_policy(EditKind::Recolor, &source, &source).unwrap();
        assert_eq!(same.len(), 10);

        let empty = Mesh::default();
        assert!(seed_policy(EditKind::Add, &source, &empty).is_err());
        assert!(seed_policy(EditKind::Remove, &empty, &target).is_err());
        assert!(seed_policy(EditKind::Deform, &source, &empty).is_err());
    }

    #[test]
    fn root_only_octree_lowers_to_eight_corners_five_tets() {
        let f = sphere_field();
        let t = build_octree(&[Vec3::ZERO], 5, 3, f.bbox).unwrap();
        assert_eq!(t.leaves.len(), 1);
        let g = leaves_to_grid(&t, &f);
        assert_eq!(g.corners.len(), 8);
        assert_eq!(g.tets.len(), 5);
        assert_eq!(g.leaf_corners.len(), 1);
    }

    #[test]
    fn sibling_leaves_share_face_corners() {
        // One split: 8 siblings, 27 unique corners total; any face-adjacent
        // pair shares 4, so a pair unions to 12.
        let f = sphere_field();
        let seeds = random_points(64, 9);
        let t = build_octree(&seeds, 1, 1, f.bbox).unwrap();
        assert_eq!(t.leaves.len(), 8);
        let g = leaves_to_grid(&t, &f);
        assert_eq!(g.corners.len(), 27);
        let mut pair: alloc::collections::BTreeSet<u32> = alloc::collections::BTreeSet::new();
        pair.extend(g.leaf_corners[0]);
        pair.extend(g.leaf_corners[1]);
        assert!(pair.len() <= 12);
    }

    #[test]
    fn shared_corners_are_evaluated_exactly_once() {
        let f = sphere_field();
        let seeds = random_points(500, 11);
        let t = build_octree(&seeds, 16, 3, f.bbox).unwrap();
        f.reset_sigma_eval_count();
        let g = leaves_to_grid(&t, &f);
        assert_eq!(
            f.sigma_eval_count() as usize,
            g.corners.len(),
            "every unique corner must be evaluated exactly once"
        );
        assert!(g.corners.len() <= 8 * t.leaves.len());
        // No two corners within the quantization tolerance.
        let tol = 1e-9 * f.bbox.diagonal();
        for i in 0..g.corners.len() {
            for j in i + 1..g.corners.len() {
                assert!(g.corners[i].dist(g.corners[j]) > tol);
            }
        }
    }

    fn sphere_surface_seeds() -> Vec<Vec3> {
        // Vertices of the sphere's own regular-grid extraction.
        let f = sphere_field();
        let g = build_grid(&f, 64).unwrap();
        let ts = split_tets(&g);
        march_grid(&g, &ts, 0.0).positions
    }

    #[test]
    fn octree_extraction_tracks_the_sphere_surface() {
        let f = sphere_field();
        let seeds = sphere_surface_seeds();
        let t = build_octree(&seeds, 64, 6, seed_root_cube(&seeds).unwrap()).unwrap();
        let mesh = extract_octree_mesh(&f, &t, 0.0);
        assert!(!mesh.is_empty());
        let finest_diag = t.cube_edge(t.max_leaf_depth()) * libm::sqrt(3.0);
        for p in &mesh.positions {
            assert!(
                libm::fabs(p.norm() - 1.0) < 2.0 * finest_diag,
                "vertex {:?} deviates by {} (tol {})",
                p,
                libm::fabs(p.norm() - 1.0),
                2.0 * finest_diag
            );
        }
    }

    #[test]
    fn entirely_positive_field_extracts_an_empty_mesh() {
        let f = sphere_field();
        let seeds = sphere_surface_seeds();
        let t = build_octree(&seeds, 64, 4, f.bbox).unwrap();
        // Threshold far below every density classifies all corners positive.
        let mesh = extract_octree_mesh(&f, &t, -10.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn fully_refined_octree_matches_regular_grid_extraction() {
        // Seed every finest cell so the whole volume refines to depth 4;
        // the octree grid is then exactly the N=17 regular lattice and the
        // extraction must agree to 1e-9 (in fact bit-exactly).
        let f = sphere_field();
        let depth = 4usize;
        let cells = 1usize << depth;
        let mut seeds = Vec::new();
        for k in 0..cells {
            for j in 0..cells {
                for i in 0..cells {
                    let frac = |idx: usize| (idx as f64 + 0.5) / cells as f64;
                    seeds.push(vec3(
                        -1.5 + 3.0 * frac(i),
                        -1.5 + 3.0 * frac(j),
                        -1.5 + 3.0 * frac(k),
                    ));
                }
            }
        }
        let t = build_octree(&seeds, 1, depth, f.bbox).unwrap();
        assert_eq!(t.leaves.len(), cells * cells * cells);
        let octree_mesh = extract_octree_mesh(&f, &t, 0.0);

        let g = build_grid(&f, cells + 1).unwrap();
        let ts = split_tets(&g);
        let regular_mesh = march_grid(&g, &ts, 0.0);

        assert_eq!(octree_mesh.positions.len(), regular_mesh.positions.len());
        assert_eq!(octree_mesh.faces.len(), regular_mesh.faces.len());
        let sort_key = |p: &Vec3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let mut a: Vec<Vec3> = octree_mesh.positions.clone();
        let mut b: Vec<Vec3> = regular_mesh.positions.clone();
        a.sort_by_key(sort_key);
        b.sort_by_key(sort_key);
        for (p, q) in a.iter().zip(&b) {
            assert!(p.dist(*q) < 1e-9, "{:?} vs {:?}", p, q);
        }
    }

    #[test]
    fn surface_octree_uses_far_fewer_corners_than_the_full_grid() {
        // Depth-6 refinement needs ~K seeds per finest surface patch; sample
        // the sphere densely enough that the surface actually refines. The
        // octree spans the field bbox so its corner count is comparable to
        // the full 65^3 lattice over the same cube.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 500_000;
        let mut seeds = Vec::with_capacity(n);
        for _ in 0..n {
            let d = vec3(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized();
            if d == Vec3::ZERO {
                continue;
            }
            seeds.push(d);
        }
        let f = sphere_field();
        let t = build_octree(&seeds, 64, 6, f.bbox).unwrap();
        assert_eq!(t.max_leaf_depth(), 6, "surface must refine to full depth");
        let g = leaves_to_grid(&t, &f);
        let full = 65usize * 65 * 65;
        assert!(
            (g.corners.len() as f64) < 0.15 * full as f64,
            "{} corners vs full-grid {}",
            g.corners.len(),
            full
        );
    }

    #[test]
    fn identical_seeds_build_bit_identical_trees_and_meshes() {
        let f = sphere_field();
        let seeds = sphere_surface_seeds();
        let run = || {
            let t = build_octree(&seeds, 32, 5, f.bbox).unwrap();
            let mesh = extract_octree_mesh(&f, &t, 0.0);
            (t, mesh)
        };
        let (ta, ma) = run();
        let (tb, mb) = run();
        assert_eq!(ta.leaves, tb.leaves);
        assert_eq!(ta.nodes.len(), tb.nodes.len());
        assert_eq!(ma.faces, mb.faces);
        assert_eq!(ma.positions.len(), mb.positions.len());
        for (p, q) in ma.positions.iter().zip(&mb.positions) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
            assert_eq!(p.z.to_bits(), q.z.to_bits());
        }
    }

    #[test]
    fn extracted_vertices_lie_inside_leaf_cubes() {
        let f = sphere_field();
        let seeds = sphere_surface_seeds();
        let t = build_octree(&seeds, 64, 5, seed_root_cube(&seeds).unwrap()).unwrap();
        let mesh = extract_octree_mesh(&f, &t, 0.0);
        let eps = 1e-9 * t.root.diagonal();
        for p in &mesh.positions {
            let leaf = t.locate(*p);
            let cube = t.node_cube(&t.nodes[leaf as usize]);
            let grown = Aabb {
                min: cube.min - Vec3::splat(eps),
                max: cube.max + Vec3::splat(eps),
            };
            assert!(grown.contains(*p), "vertex {:?} outside its leaf cube", p);
        }
    }

    #[test]
    fn diagnostics_summarize_a_build() {
        let f = sphere_field();
        let seeds = sphere_surface_seeds();
        let t = build_octree(&seeds, 64, 5, seed_root_cube(&seeds).unwrap()).unwrap();
        let g = leaves_to_grid(&t, &f);
        let mesh = march(&g.corners, &g.densities, &g.tets, 0.0);
        let d = diagnostics(&t, &g, &mesh);
        assert_eq!(d.leaf_count, t.leaves.len());
        assert_eq!(d.corner_count, g.corners.len());
        assert!(d.max_depth <= 5);
        let line = alloc::format!("{d}");
        assert!(line.contains("leaves=") && line.contains("crack_edges="));
    }
}
