//! Back-propagation of mesh edits into field parameters.
//!
//! Geometry edits are fitted by a Chamfer + Eikonal objective differentiated
//! through marching tetrahedra on a seed-adaptive octree, coarse-to-fine over
//! a list of octree depths. Color edits are fitted afterwards by an L2
//! objective on per-vertex colors differentiated through frozen ray plans.
//! The two passes are strictly separate: [`optimize_geometry`] updates only
//! density parameters and [`optimize_color`] only radiance parameters; each
//! leaves the other set bit-identical.
//!
//! The Chamfer gradient is assembled in two stages. A small tape treats the
//! active grid-corner densities as leaves and differentiates the loss through
//! edge crossings and barycentric surface samples, yielding one scalar
//! adjoint per corner. A second tape then routes those adjoints (plus the
//! Eikonal stencil coefficients) through the density MLP in chunks, one
//! backward pass per chunk. This keeps every tape small regardless of how
//! many parameters or samples a step touches.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{default_rig, plan_colors, taped_vertex_color, Camera, ColoredMesh};
use crate::field::{Field, FieldScratch};
use crate::kdtree::KdTree;
use crate::march::{crossing_taped, march, Mesh};
use crate::net::AdamState;
use crate::octree::{build_octree, leaves_to_grid, seed_policy, seed_root_cube};
use crate::tape::{spatial_gradient, Tape, VarId};
use crate::vec3::{Aabb, Vec3};
use crate::{Error, Result};

pub use crate::octree::EditKind;

/// Positions of a recolor target may differ from the source by at most this
/// much per coordinate.
pub const RECOLOR_POSITION_TOL: f64 = 1e-9;

/// Data sets at least this large get a spatial index for nearest-neighbor
/// queries; smaller ones use a linear scan.
const LINEAR_SCAN_MAX: usize = 256;

/// Density VJP requests routed through the MLP per backward pass.
const VJP_CHUNK: usize = 512;

/// Node budget per color-tape chunk before a backward pass is flushed.
const COLOR_TAPE_BUDGET: usize = 400_000;

// --- task -------------------------------------------------------------------

/// An edit job: the extracted source mesh and the user-edited target, both
/// with per-vertex colors, plus the kind of edit which drives octree seeding
/// and pass selection.
#[derive(Debug, Clone)]
pub struct EditTask {
    pub kind: EditKind,
    pub source: ColoredMesh,
    pub target: ColoredMesh,
}

fn check_colored(m: &ColoredMesh, what: &str) -> Result<()> {
    if m.mesh.positions.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let n = m.mesh.positions.len();
    if m.colors.len() != n || m.visibility.len() != n || m.edited_mask.len() != n {
        return Err(Error::invalid(alloc::format!(
            "{what} mesh carries {} vertices but {} colors / {} visibility / {} mask entries",
            n,
            m.colors.len(),
            m.visibility.len(),
            m.edited_mask.len()
        )));
    }
    Ok(())
}

fn meshes_differ(a: &Mesh, b: &Mesh) -> bool {
    a.positions.len() != b.positions.len()
        || a.faces != b.faces
        || a.positions.iter().zip(&b.positions).any(|(p, q)| p != q)
}

impl EditTask {
    /// Validate and build a task. Recolor targets must keep every vertex
    /// position within [`RECOLOR_POSITION_TOL`] of the source; all other
    /// kinds must change at least one vertex or face.
    pub fn new(kind: EditKind, source: ColoredMesh, target: ColoredMesh) -> Result<EditTask> {
        check_colored(&source, "source")?;
        check_colored(&target, "target")?;
        match kind {
            EditKind::Recolor => {
                if source.mesh.positions.len() != target.mesh.positions.len() {
                    return Err(Error::invalid(
                        "recolor target must keep the source vertex count",
                    ));
                }
                let congruent = source
                    .mesh
                    .positions
                    .iter()
                    .zip(&target.mesh.positions)
                    .all(|(p, q)| {
                        libm::fabs(p.x - q.x) <= RECOLOR_POSITION_TOL
                            && libm::fabs(p.y - q.y) <= RECOLOR_POSITION_TOL
                            && libm::fabs(p.z - q.z) <= RECOLOR_POSITION_TOL
                    });
                if !congruent {
                    return Err(Error::invalid(
                        "recolor target moved vertices; use a deform edit for geometry changes",
                    ));
                }
            }
            EditKind::Add | EditKind::Remove | EditKind::Deform => {
                if !meshes_differ(&source.mesh, &target.mesh) {
                    return Err(Error::invalid(
                        "geometry edit is a no-op: target equals source",
                    ));
                }
            }
        }
        Ok(EditTask {
            kind,
            source,
            target,
        })
    }
}

// --- configs ----------------------------------------------------------------

/// Geometry-pass settings. `levels` are octree depths visited coarse to
/// fine; every level runs `steps_per_level` optimizer steps.
#[derive(Debug, Clone)]
pub struct GeomConfig {
    pub levels: Vec<usize>,
    pub steps_per_level: usize,
    pub lr: f64,
    pub w_chamfer: f64,
    pub w_eikonal: f64,
    pub samples_per_mesh: usize,
    /// Octree occupancy threshold: a node subdivides while it holds at least
    /// this many seed vertices.
    pub octree_k: usize,
    /// Iso-level of the extracted surface.
    pub iso: f64,
    /// The Eikonal term's value is averaged over every surface sample; its
    /// gradient is estimated from this many of them per step (unbiased, and
    /// exact once the count reaches the sample count).
    pub eikonal_grad_samples: usize,
    pub seed: u64,
}

impl Default for GeomConfig {
    fn default() -> GeomConfig {
        GeomConfig {
            levels: vec![7, 8, 9],
            steps_per_level: 300,
            lr: 1e-3,
            w_chamfer: 1.0,
            w_eikonal: 1e-4,
            samples_per_mesh: 4096,
            octree_k: 64,
            iso: 0.0,
            eikonal_grad_samples: 256,
            seed: 0,
        }
    }
}

impl GeomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("at least one octree level is required"));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("octree levels must be strictly increasing"));
        }
        if self.steps_per_level < 1 {
            return Err(Error::invalid("steps_per_level must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(self.w_chamfer >= 0.0 && self.w_chamfer.is_finite())
            || !(self.w_eikonal >= 0.0 && self.w_eikonal.is_finite())
        {
            return Err(Error::invalid("loss weights must be non-negative and finite"));
        }
        if self.samples_per_mesh < 1 {
            return Err(Error::invalid("samples_per_mesh must be at least 1"));
        }
        if self.octree_k < 1 {
            return Err(Error::invalid("octree occupancy threshold must be at least 1"));
        }
        if !self.iso.is_finite() {
            return Err(Error::invalid("iso level must be finite"));
        }
        if self.eikonal_grad_samples < 1 {
            return Err(Error::invalid("eikonal_grad_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Color-pass settings.
#[derive(Debug, Clone)]
pub struct ColorConfig {
    pub steps: usize,
    pub lr: f64,
    pub w_color: f64,
    /// Minimum fraction of every batch drawn from edited vertices.
    pub oversample_frac: f64,
    /// Extra cameras placed around the edited region, on top of the default
    /// rig.
    pub n_aug_cameras: usize,
    /// Vertices sampled per step.
    pub batch: usize,
    /// Quadrature samples per vertex-color ray.
    pub n_ray_samples: usize,
    /// Fraction of each ray's quadrature mass kept in the frozen plan; 1
    /// reproduces full extraction bit-for-bit.
    pub keep_mass: f64,
    pub seed: u64,
}

impl Default for ColorConfig {
    fn default() -> ColorConfig {
        ColorConfig {
            steps: 500,
            lr: 1e-3,
            w_color: 0.2,
            oversample_frac: 0.25,
            n_aug_cameras: 30,
            batch: 1024,
            n_ray_samples: 128,
            keep_mass: 1.0,
            seed: 0,
        }
    }
}

impl ColorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(self.w_color >= 0.0 && self.w_color.is_finite()) {
            return Err(Error::invalid("w_color must be non-negative and finite"));
        }
        if !(0.0..=1.0).contains(&self.oversample_frac) {
            return Err(Error::invalid("oversample_frac must lie in [0, 1]"));
        }
        if self.batch < 4 {
            return Err(Error::invalid("batch must be at least 4"));
        }
        if self.n_ray_samples < 2 {
            return Err(Error::invalid("n_ray_samples must be at least 2"));
        }
        if !(self.keep_mass > 0.0 && self.keep_mass <= 1.0) {
            return Err(Error::invalid("keep_mass must lie in (0, 1]"));
        }
        Ok(())
    }
}

// --- progress & reports ------------------------------------------------------

/// Per-step geometry progress; `total` is the weighted sum of the two terms.
#[derive(Debug, Clone, Copy)]
pub struct GeomProgress {
    pub level: usize,
    pub step: usize,
    pub chamfer: f64,
    pub eikonal: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct GeomReport {
    /// Chamfer at the first and last step with a non-empty extraction; None
    /// when every step came up empty.
    pub initial_chamfer: Option<f64>,
    pub final_chamfer: Option<f64>,
    pub steps_run: usize,
    pub empty_steps: usize,
}

/// Per-step color progress. `batch_visible` counts batch vertices that any
/// camera sees; only those carry loss terms.
#[derive(Debug, Clone, Copy)]
pub struct ColorProgress {
    pub step: usize,
    pub loss: f64,
    pub batch_visible: usize,
    pub batch_edited: usize,
}

#[derive(Debug, Clone)]
pub struct ColorReport {
    /// Weighted loss at the first and last step with a visible batch vertex.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps_run: usize,
    pub cameras_used: usize,
    /// Fraction of all drawn batch slots that landed on edited vertices.
    pub edited_fraction: f64,
    /// True when the task has no edited vertices and batches fell back to
    /// plain uniform sampling.
    pub uniform_fallback: bool,
}

// --- surface sampling ---------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct SurfaceSample {
    point: Vec3,
    verts: [u32; 3],
    bary: [f64; 3],
}

/// Area-weighted face sampling with per-sample barycentrics. A mesh whose
/// total area vanishes (isolated vertices, degenerate faces) falls back to
/// cycling the vertex positions themselves, expressed as barycentric samples
/// of a single repeated vertex so gradients still flow through provenance.
fn sample_surface_detailed(
    mesh: &Mesh,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SurfaceSample>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if mesh.positions.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cum.push(total);
    }
    let mut out = Vec::with_capacity(n);
    if mesh.faces.is_empty() || total <= 1e-12 {
        for k in 0..n {
            let i = (k % mesh.positions.len()) as u32;
            out.push(SurfaceSample {
                point: mesh.positions[i as usize],
                verts: [i, i, i],
                bary: [1.0, 0.0, 0.0],
            });
        }
        return Ok(out);
    }
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let f = cum.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.faces[f];
        let (mut u1, mut u2) = (rng.random::<f64>(), rng.random::<f64>());
        if u1 + u2 > 1.0 {
            u1 = 1.0 - u1;
            u2 = 1.0 - u2;
        }
        let bary = [1.0 - u1 - u2, u1, u2];
        let p0 = mesh.positions[a as usize];
        let p1 = mesh.positions[b as usize];
        let p2 = mesh.positions[c as usize];
        out.push(SurfaceSample {
            point: p0 * bary[0] + p1 * bary[1] + p2 * bary[2],
            verts: [a, b, c],
            bary,
        });
    }
    Ok(out)
}

/// `n` points drawn uniformly by area from the mesh surface, deterministic
/// for a given generator state. Zero-area meshes yield their vertex
/// positions, cycled.
pub fn sample_surface(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    Ok(sample_surface_detailed(mesh, n, rng)?
        .into_iter()
        .map(|s| s.point)
        .collect())
}

// --- chamfer ------------------------------------------------------------------

fn build_index(data: &[Vec3]) -> Option<KdTree> {
    if data.len() >= LINEAR_SCAN_MAX {
        Some(KdTree::build(data))
    } else {
        None
    }
}

fn nearest_in(data: &[Vec3], tree: Option<&KdTree>, q: Vec3) -> (u32, f64) {
    if let Some(t) = tree {
        return t.nearest(q).expect("tree built from a non-empty set");
    }
    let mut best = (0u32, f64::INFINITY);
    for (i, &p) in data.iter().enumerate() {
        let d = p - q;
        let d2 = d.dot(d);
        if d2 < best.1 {
            best = (i as u32, d2);
        }
    }
    best
}

fn nn_sum(queries: &[Vec3], data: &[Vec3]) -> f64 {
    let tree = build_index(data);
    let mut acc = 0.0;
    for &q in queries {
        acc += nearest_in(data, tree.as_ref(), q).1;
    }
    acc
}

/// Chamfer distance: the sum over both point sets of each point's squared
/// distance to its nearest neighbor in the other set. Exactly symmetric in
/// its arguments; zero iff the two sets are equal as sets. Ties between
/// equidistant neighbors resolve to the lower index.
pub fn chamfer(s1: &[Vec3], s2: &[Vec3]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(nn_sum(s1, s2) + nn_sum(s2, s1))
}

// --- eikonal -------------------------------------------------------------------

fn eikonal_terms(field: &Field, points: &[Vec3], h: f64) -> (f64, Vec<Vec3>) {
    if points.is_empty() {
        return (0.0, Vec::new());
    }
    let scratch = RefCell::new(FieldScratch::default());
    let f = |q: Vec3| field.sigma_with_scratch(q, &mut scratch.borrow_mut());
    let mut acc = 0.0;
    let mut grads = Vec::with_capacity(points.len());
    for &p in points {
        let g = spatial_gradient(&f, p, h);
        let d = g.norm() - 1.0;
        acc += d * d;
        grads.push(g);
    }
    (acc / points.len() as f64, grads)
}

fn eikonal_h(field: &Field) -> f64 {
    1e-3 * field.bbox.diagonal()
}

/// Mean squared deviation of the density gradient norm from one, with the
/// gradient taken by central differences at h = 1e-3 of the bbox diagonal.
/// An exact signed distance function scores zero. Empty input scores zero.
pub fn eikonal(field: &Field, points: &[Vec3]) -> f64 {
    eikonal_terms(field, points, eikonal_h(field)).0
}

/// Derivative coefficients of the mean Eikonal penalty over `points` with
/// respect to the density values at the difference stencils of the picked
/// points, appended to `requests`. Stencil positions are treated as
/// constants: the term regularizes the field, not the sample placement.
fn eikonal_requests(
    points: &[Vec3],
    grads: &[Vec3],
    picks: &[usize],
    w: f64,
    h: f64,
    requests: &mut Vec<(Vec3, f64)>,
) {
    let m = picks.len() as f64;
    let dirs = [
        Vec3 { x: h, y: 0.0, z: 0.0 },
        Vec3 { x: 0.0, y: h, z: 0.0 },
        Vec3 { x: 0.0, y: 0.0, z: h },
    ];
    for &i in picks {
        let g = grads[i];
        let gn = g.norm();
        if gn < 1e-12 {
            continue;
        }
        let base = w * (gn - 1.0) / (gn * h * m);
        for k in 0..3 {
            let c = base * g.axis(k);
            if c != 0.0 {
                requests.push((points[i] + dirs[k], c));
                requests.push((points[i] - dirs[k], -c));
            }
        }
    }
}

/// Route accumulated density-value derivatives into the density parameters:
/// for each `(position, coefficient)` request the density is re-evaluated on
/// a tape and `coefficient` is used as its output seed. Chunked so tapes stay
/// small.
fn apply_sigma_vjp(
    field: &Field,
    requests: &[(Vec3, f64)],
    grads: &mut [f64],
    scratch: &mut FieldScratch,
) {
    let mut tape = Tape::new();
    for chunk in requests.chunks(VJP_CHUNK) {
        tape.clear();
        let block = field
            .bind_sigma(&mut tape)
            .expect("density model must be trainable");
        let seeds: Vec<(VarId, f64)> = chunk
            .iter()
            .map(|&(p, c)| (field.sigma_taped(&mut tape, block, p, scratch), c))
            .collect();
        let adj = tape.backward_seeded(&seeds);
        for (g, a) in grads.iter_mut().zip(adj.block(block)) {
            *g += *a;
        }
    }
}

// --- geometry pass --------------------------------------------------------------

/// Result of a single geometry-loss evaluation. `grads` follows the layout of
/// [`Field::density_params`]; `empty` marks an extraction without crossings,
/// in which case the losses are meaningless and no gradient exists.
#[derive(Debug, Clone)]
pub struct GeomEval {
    pub chamfer: f64,
    pub eikonal: f64,
    pub grads: Option<Vec<f64>>,
    pub empty: bool,
}

fn corner_leaf(
    tape: &mut Tape,
    vars: &mut BTreeMap<u32, VarId>,
    densities: &[f64],
    corner: u32,
) -> VarId {
    if let Some(&v) = vars.get(&corner) {
        return v;
    }
    let v = tape.leaf(densities[corner as usize]);
    vars.insert(corner, v);
    v
}

/// One full loss evaluation at the field's current parameters: re-evaluate
/// corner densities, march, sample both meshes, and measure Chamfer +
/// Eikonal. With `want_grad` the same quantities are differentiated into the
/// density parameters. Everything random derives from `step_key`, so a
/// repeat call at equal parameters reproduces the value bit-for-bit.
pub fn eval_geometry_step(
    field: &Field,
    corners: &[Vec3],
    tets: &[[u32; 4]],
    target: &Mesh,
    cfg: &GeomConfig,
    step_key: u64,
    want_grad: bool,
) -> Result<GeomEval> {
    let mut scratch = FieldScratch::default();
    let densities: Vec<f64> = corners
        .iter()
        .map(|&p| field.sigma_with_scratch(p, &mut scratch))
        .collect();
    let mesh = march(corners, &densities, tets, cfg.iso);
    if mesh.is_empty() {
        return Ok(GeomEval {
            chamfer: 0.0,
            eikonal: 0.0,
            grads: None,
            empty: true,
        });
    }

    // Both meshes consume identical generator streams: when the target
    // coincides with the extraction the drawn points coincide too and the
    // Chamfer term is exactly zero.
    let mut rng_target = ChaCha8Rng::seed_from_u64(step_key);
    let mut rng_current = ChaCha8Rng::seed_from_u64(step_key);
    let target_pts = sample_surface(target, cfg.samples_per_mesh, &mut rng_target)?;
    let current = sample_surface_detailed(&mesh, cfg.samples_per_mesh, &mut rng_current)?;
    let current_pts: Vec<Vec3> = current.iter().map(|s| s.point).collect();

    let target_tree = build_index(&target_pts);
    let current_tree = build_index(&current_pts);
    let mut chamfer_value = 0.0;
    let mut pair_t2c = Vec::new();
    for &x in &target_pts {
        let (j, d2) = nearest_in(&current_pts, current_tree.as_ref(), x);
        chamfer_value += d2;
        if want_grad {
            pair_t2c.push(j);
        }
    }
    let mut pair_c2t = Vec::new();
    for &y in &current_pts {
        let (i, d2) = nearest_in(&target_pts, target_tree.as_ref(), y);
        chamfer_value += d2;
        if want_grad {
            pair_c2t.push(i);
        }
    }

    let h = eikonal_h(field);
    let (eik_value, point_grads) = eikonal_terms(field, &current_pts, h);
    if !want_grad {
        return Ok(GeomEval {
            chamfer: chamfer_value,
            eikonal: eik_value,
            grads: None,
            empty: false,
        });
    }

    // Stage 1: adjoints of the weighted Chamfer with respect to the active
    // corner densities, through crossings and barycentric sample points.
    let mut tape = Tape::new();
    let mut corner_vars: BTreeMap<u32, VarId> = BTreeMap::new();
    let mut vert_vars: Vec<Option<[VarId; 3]>> = vec![None; mesh.positions.len()];
    let mut sample_vars = Vec::with_capacity(current.len());
    for s in &current {
        let mut vv = [[VarId(0); 3]; 3];
        for (slot, &v) in s.verts.iter().enumerate() {
            if vert_vars[v as usize].is_none() {
                let prov = mesh.provenance[v as usize];
                let sa = corner_leaf(&mut tape, &mut corner_vars, &densities, prov.a);
                let sb = corner_leaf(&mut tape, &mut corner_vars, &densities, prov.b);
                let (vars, _) = crossing_taped(
                    &mut tape,
                    corners[prov.a as usize],
                    corners[prov.b as usize],
                    sa,
                    sb,
                    cfg.iso,
                );
                vert_vars[v as usize] = Some(vars);
            }
            vv[slot] = vert_vars[v as usize].expect("taped above");
        }
        let mut point = [VarId(0); 3];
        for k in 0..3 {
            let mut acc = tape.mulc(vv[0][k], s.bary[0]);
            acc = tape.madd_c(acc, vv[1][k], s.bary[1]);
            acc = tape.madd_c(acc, vv[2][k], s.bary[2]);
            point[k] = acc;
        }
        sample_vars.push(point);
    }
    let mut total: Option<VarId> = None;
    for (ti, &x) in target_pts.iter().enumerate() {
        let term = tape.dist2_to_const(sample_vars[pair_t2c[ti] as usize], x);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    for (j, &sv) in sample_vars.iter().enumerate() {
        let term = tape.dist2_to_const(sv, target_pts[pair_c2t[j] as usize]);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    let total = total.expect("sample sets are non-empty");
    let adj = tape.backward_seeded(&[(total, cfg.w_chamfer)]);

    let mut requests: Vec<(Vec3, f64)> = Vec::new();
    for (&corner, &var) in &corner_vars {
        let a = adj.of(var);
        if a != 0.0 {
            requests.push((corners[corner as usize], a));
        }
    }
    if cfg.w_eikonal > 0.0 {
        let picks: Vec<usize> = if cfg.eikonal_grad_samples >= current_pts.len() {
            (0..current_pts.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(step_key ^ 0x45696b_6f6e616c);
            (0..cfg.eikonal_grad_samples)
                .map(|_| rng.random_range(0..current_pts.len()))
                .collect()
        };
        eikonal_requests(
            &current_pts,
            &point_grads,
            &picks,
            cfg.w_eikonal,
            h,
            &mut requests,
        );
    }

    // Stage 2: route the per-position coefficients into the parameters.
    let mut grads = vec![0.0; field.density_params().len()];
    apply_sigma_vjp(field, &requests, &mut grads, &mut scratch);
    Ok(GeomEval {
        chamfer: chamfer_value,
        eikonal: eik_value,
        grads: Some(grads),
        empty: false,
    })
}

fn mix_seed(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn step_key(seed: u64, level_index: usize, step: usize) -> u64 {
    mix_seed(
        seed ^ (level_index as u64).wrapping_mul(0x9E3779B97F4A7C15)
            ^ (step as u64).wrapping_mul(0xD1B54A32D192ED03),
    )
}

/// Fit the density field so its extracted surface matches the edit target.
///
/// For every depth in `cfg.levels` an octree is built once from the task's
/// seed policy; each step then re-extracts the surface from the current
/// densities, samples both the target and the extraction, and takes one Adam
/// step on the density parameters against the weighted Chamfer + Eikonal
/// loss. Radiance parameters are never touched. The field keeps whatever
/// progress was made if the run aborts because the extraction came up empty
/// three steps in a row.
pub fn optimize_geometry(
    field: &mut Field,
    task: &EditTask,
    cfg: &GeomConfig,
    mut progress: impl FnMut(&GeomProgress),
) -> Result<GeomReport> {
    cfg.validate()?;
    if task.kind == EditKind::Recolor {
        return Err(Error::invalid(
            "recolor edits keep geometry fixed; run optimize_color instead",
        ));
    }
    if !field.sigma_trainable() {
        return Err(Error::invalid(
            "density model has no trainable parameters",
        ));
    }
    let seeds = seed_policy(task.kind, &task.source.mesh, &task.target.mesh)?;
    let root = seed_root_cube(&seeds)?;
    let mut params = field.density_params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut report = GeomReport {
        initial_chamfer: None,
        final_chamfer: None,
        steps_run: 0,
        empty_steps: 0,
    };
    let mut empty_streak = 0usize;
    let mut global_step = 0usize;
    for (li, &level) in cfg.levels.iter().enumerate() {
        let octree = build_octree(&seeds, cfg.octree_k, level, root)?;
        let grid = leaves_to_grid(&octree, field);
        for _ in 0..cfg.steps_per_level {
            let key = step_key(cfg.seed, li, global_step);
            let eval =
                eval_geometry_step(field, &grid.corners, &grid.tets, &task.target.mesh, cfg, key, true)?;
            global_step += 1;
            report.steps_run = global_step;
            if eval.empty {
                report.empty_steps += 1;
                empty_streak += 1;
                if empty_streak >= 3 {
                    return Err(Error::OptimizationAborted(alloc::format!(
                        "extraction was empty for 3 consecutive steps at depth {level} \
                         (step {global_step}): the density field has collapsed"
                    )));
                }
                continue;
            }
            empty_streak = 0;
            if report.initial_chamfer.is_none() {
                report.initial_chamfer = Some(eval.chamfer);
            }
            report.final_chamfer = Some(eval.chamfer);
            adam.update(&mut params, eval.grads.as_ref().expect("gradients requested"));
            field.set_density_params(&params)?;
            progress(&GeomProgress {
                level,
                step: global_step,
                chamfer: eval.chamfer,
                eikonal: eval.eikonal,
                total: cfg.w_chamfer * eval.chamfer + cfg.w_eikonal * eval.eikonal,
            });
        }
    }
    Ok(report)
}

// --- color pass -------------------------------------------------------------------

/// Mean over vertices of the channel-summed squared color difference. A
/// single vertex of pure red against pure black scores exactly 1.
pub fn color_l2(t1: &[[f64; 3]], t2: &[[f64; 3]]) -> Result<f64> {
    if t1.len() != t2.len() {
        return Err(Error::DimensionMismatch {
            expected: t1.len(),
            got: t2.len(),
        });
    }
    if t1.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut acc = 0.0;
    for (a, b) in t1.iter().zip(t2) {
        for k in 0..3 {
            let d = a[k] - b[k];
            acc += d * d;
        }
    }
    Ok(acc / t1.len() as f64)
}

/// Draw a vertex batch in which at least `ceil(frac * batch)` slots come from
/// edited vertices (with replacement); the remainder is uniform over all
/// vertices. Without any edited vertex the whole batch is uniform and the
/// returned flag is true so callers can warn.
pub fn oversample_edited(
    edited_mask: &[bool],
    batch: usize,
    frac: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, bool)> {
    if edited_mask.is_empty() {
        return Err(Error::invalid("edited mask must cover at least one vertex"));
    }
    if batch < 4 {
        return Err(Error::invalid("batch must be at least 4"));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid("oversample fraction must lie in [0, 1]"));
    }
    let n = edited_mask.len();
    let edited: Vec<u32> = (0..n as u32).filter(|&i| edited_mask[i as usize]).collect();
    let mut out = Vec::with_capacity(batch);
    if edited.is_empty() {
        for _ in 0..batch {
            out.push(rng.random_range(0..n) as u32);
        }
        return Ok((out, true));
    }
    let forced = (libm::ceil(frac * batch as f64) as usize).min(batch);
    for _ in 0..forced {
        out.push(edited[rng.random_range(0..edited.len())]);
    }
    for _ in forced..batch {
        out.push(rng.random_range(0..n) as u32);
    }
    Ok((out, false))
}

/// `n` cameras on random directions around `centroid`, at a distance drawn
/// uniformly from [1.2, 2.0] times the bbox diagonal, each looking at the
/// centroid. The minimum distance already clears any point of the bbox, so
/// every origin lies outside it.
pub fn augment_cameras(
    centroid: Vec3,
    bbox: &Aabb,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Camera> {
    let diag = bbox.diagonal();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = 2.0 * rng.random::<f64>() - 1.0;
        let phi = 2.0 * core::f64::consts::PI * rng.random::<f64>();
        let r = libm::sqrt((1.0 - z * z).max(0.0));
        let dir = Vec3 {
            x: r * libm::cos(phi),
            y: r * libm::sin(phi),
            z,
        };
        let radius = (1.2 + 0.8 * rng.random::<f64>()) * diag;
        out.push(Camera::looking_at(centroid + dir * radius, centroid));
    }
    out
}

/// Fit the radiance field so extracted vertex colors match the recolor
/// target.
///
/// Cameras are the default rig plus `cfg.n_aug_cameras` augmented ones aimed
/// at the edited centroid. Ray plans are frozen once (the density is fixed
/// during this pass), then each step draws an edited-oversampled vertex
/// batch, recomputes the batch's colors through the plan, and takes one Adam
/// step on the radiance parameters against the weighted per-vertex L2 loss.
/// Density parameters are never touched. Vertices no camera sees carry no
/// loss; if the task has edited vertices but none is visible the run aborts.
pub fn optimize_color(
    field: &mut Field,
    task: &EditTask,
    cfg: &ColorConfig,
    mut progress: impl FnMut(&ColorProgress),
) -> Result<ColorReport> {
    cfg.validate()?;
    if task.kind != EditKind::Recolor {
        return Err(Error::invalid(
            "geometry edits retrain the density; run optimize_geometry instead",
        ));
    }
    if !field.radiance_trainable() {
        return Err(Error::invalid(
            "radiance model has no trainable parameters",
        ));
    }
    let mesh = &task.source.mesh;
    let n = mesh.positions.len();
    let edited: Vec<bool> = (0..n)
        .map(|i| task.target.edited_mask[i] || task.target.colors[i] != task.source.colors[i])
        .collect();
    let edited_any = edited.iter().any(|&e| e);

    let centroid = {
        let mut acc = Vec3::ZERO;
        let mut count = 0usize;
        for (i, &p) in mesh.positions.iter().enumerate() {
            if !edited_any || edited[i] {
                acc = acc + p;
                count += 1;
            }
        }
        acc * (1.0 / count as f64)
    };
    let mut rng_cams = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0xCA3E_1A5));
    let mut cameras = default_rig(&field.bbox);
    cameras.extend(augment_cameras(
        centroid,
        &field.bbox,
        cfg.n_aug_cameras,
        &mut rng_cams,
    ));
    let plan = plan_colors(field, mesh, &cameras, cfg.n_ray_samples, cfg.keep_mass)?;
    if edited_any && (0..n).all(|i| !edited[i] || plan.visibility[i] == 0) {
        return Err(Error::OptimizationAborted(
            "no edited vertex is visible from any camera; nothing constrains the recolor".into(),
        ));
    }

    let mut params = field.radiance_params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut grads = vec![0.0; params.len()];
    let mut tape = Tape::new();
    let mut scratch = FieldScratch::default();
    let mut report = ColorReport {
        initial_loss: None,
        final_loss: None,
        steps_run: 0,
        cameras_used: cameras.len(),
        edited_fraction: 0.0,
        uniform_fallback: !edited_any,
    };
    let mut edited_slots = 0usize;
    let mut total_slots = 0usize;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_key(cfg.seed, usize::MAX, step));
        let (batch, _) = oversample_edited(&edited, cfg.batch, cfg.oversample_frac, &mut rng)?;
        let batch_edited = batch.iter().filter(|&&v| edited[v as usize]).count();
        edited_slots += batch_edited;
        total_slots += batch.len();
        report.steps_run = step + 1;
        let visible: Vec<u32> = batch
            .iter()
            .copied()
            .filter(|&v| plan.visibility[v as usize] > 0)
            .collect();
        if visible.is_empty() {
            continue;
        }
        let inv_n = 1.0 / visible.len() as f64;
        grads.fill(0.0);
        let mut loss = 0.0;
        // Chunked tapes: each chunk binds the current parameters once and
        // runs one backward pass for all its vertices.
        let mut idx = 0usize;
        while idx < visible.len() {
            tape.clear();
            let block = field
                .bind_radiance(&mut tape)
                .expect("radiance model must be trainable");
            let mut seeds: Vec<(VarId, f64)> = Vec::new();
            let mut in_chunk = 0usize;
            while idx < visible.len() && (in_chunk == 0 || tape.len() < COLOR_TAPE_BUDGET) {
                let v = visible[idx] as usize;
                let vars = taped_vertex_color(field, &plan, v, &mut tape, block, &mut scratch)
                    .expect("vertex is visible in the plan");
                for k in 0..3 {
                    let r = tape.val(vars[k]) - task.target.colors[v][k];
                    loss += r * r * inv_n;
                    seeds.push((vars[k], cfg.w_color * 2.0 * r * inv_n));
                }
                idx += 1;
                in_chunk += 1;
            }
            let adj = tape.backward_seeded(&seeds);
            for (g, a) in grads.iter_mut().zip(adj.block(block)) {
                *g += *a;
            }
        }
        loss *= cfg.w_color;
        adam.update(&mut params, &grads);
        field.set_radiance_params(&params)?;
        if report.initial_loss.is_none() {
            report.initial_loss = Some(loss);
        }
        report.final_loss = Some(loss);
        progress(&ColorProgress {
            step: step + 1,
            loss,
            batch_visible: visible.len(),
            batch_edited,
        });
    }
    report.edited_fraction = if total_slots > 0 {
        edited_slots as f64 / total_slots as f64
    } else {
        0.0
    };
    Ok(report)
}
