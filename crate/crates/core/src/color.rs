//! Visibility-aware extraction of vertex colors from a field: area-weighted
//! vertex normals, a normal-based front test per camera, an expected-depth
//! occlusion test, per-camera ray integration, and a multi-view average.
//!
//! Per-view vertex colors are transmittance-weighted radiance integrals along
//! the camera-to-vertex ray, so a view that merely grazes the geometry
//! contributes an attenuated color; the depth test removes occluded views but
//! deliberately keeps grazing ones. Cameras are processed in index order and
//! every reduction is sequential, so extraction is reproducible bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::field::{integrate_ray_radiance, ray_weights, Field, FieldScratch, Ray};
use crate::kdtree::KdTree;
use crate::march::Mesh;
use crate::tape::{ParamBlock, Tape, VarId};
use crate::vec3::{Aabb, Vec3};
use crate::Result;

/// Far limit for camera rays; the quadrature clips to the field bbox anyway.
pub const RAY_T_FAR: f64 = 1e12;

/// Minimum quadrature mass for a ray to report an expected depth at all.
pub const MIN_DEPTH_MASS: f64 = 1e-3;

/// Default tolerance between expected depth and vertex distance.
pub const DEFAULT_DEPTH_EPS: f64 = 0.2;

// --- cameras -----------------------------------------------------------------

/// Pinhole camera. `origin` must lie strictly outside the field bbox when the
/// camera is used for extraction or rendering.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub origin: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub resolution: (u32, u32),
}

impl Camera {
    /// Camera at `origin` aimed at `look_at` with a 45 degree vertical field
    /// of view, 64x64 resolution, and an up vector chosen off the view axis.
    pub fn looking_at(origin: Vec3, look_at: Vec3) -> Camera {
        let f = (look_at - origin).normalized();
        let up = if f.y.abs() > 0.99 {
            Vec3 { x: 1.0, y: 0.0, z: 0.0 }
        } else {
            Vec3 { x: 0.0, y: 1.0, z: 0.0 }
        };
        Camera {
            origin,
            look_at,
            up,
            fov_deg: 45.0,
            resolution: (64, 64),
        }
    }

    /// Right-handed orthonormal view basis (right, up, forward). Falls back to
    /// a fixed axis when `up` is parallel to the view direction.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.origin).normalized();
        let mut right = forward.cross(self.up);
        if right.norm2() < 1e-24 {
            right = forward.cross(Vec3 { x: 0.0, y: 1.0, z: 0.0 });
        }
        if right.norm2() < 1e-24 {
            right = forward.cross(Vec3 { x: 1.0, y: 0.0, z: 0.0 });
        }
        let right = right.normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }

    /// Ray through the center of pixel (px, py); py counts down from the top
    /// image row.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Result<Ray> {
        let (w, h) = self.resolution;
        if px >= w || py >= h {
            return Err(Error::invalid("pixel outside camera resolution"));
        }
        let (right, up, forward) = self.basis();
        let half = libm::tan(self.fov_deg.to_radians() * 0.5);
        let aspect = w as f64 / h as f64;
        let u = ((px as f64 + 0.5) / w as f64) * 2.0 - 1.0;
        let v = 1.0 - ((py as f64 + 0.5) / h as f64) * 2.0;
        let dir = (forward + right * (u * half * aspect) + up * (v * half)).normalized();
        Ray::new(self.origin, dir, 0.0, RAY_T_FAR)
    }
}

/// Sixteen cameras on a sphere of radius 1.5x the bbox diagonal aimed at the
/// bbox center: the twelve icosahedron vertex directions plus four
/// tetrahedral directions that break the icosahedron's mirror symmetries.
pub fn default_rig(bbox: &Aabb) -> Vec<Camera> {
    let phi = (1.0 + libm::sqrt(5.0)) * 0.5;
    let t = 1.0 / libm::sqrt(3.0);
    let dirs = [
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
        (t, t, t),
        (t, -t, -t),
        (-t, t, -t),
        (-t, -t, t),
    ];
    let center = bbox.center();
    let radius = 1.5 * bbox.diagonal();
    dirs.iter()
        .map(|&(x, y, z)| {
            let d = Vec3 { x, y, z }.normalized();
            Camera::looking_at(center + d * radius, center)
        })
        .collect()
}

// --- colored meshes ----------------------------------------------------------

/// A mesh with per-vertex colors, the number of cameras that contributed to
/// each color, and a per-vertex flag consumed by downstream edits.
/// `visibility == 0` marks a fallback-filled color (copied from the nearest
/// visible vertex).
#[derive(Debug, Clone, Default)]
pub struct ColoredMesh {
    pub mesh: Mesh,
    pub colors: Vec<[f64; 3]>,
    pub visibility: Vec<u32>,
    pub edited_mask: Vec<bool>,
}

// --- filters -----------------------------------------------------------------

/// Area-weighted vertex normals: the raw triangle cross products sum before
/// normalization, which weights each face by its area. Vertices on no face
/// get a zero normal, which the front test treats as never front-facing.
pub fn vertex_normals(mesh: &Mesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::ZERO; mesh.positions.len()];
    for f in &mesh.faces {
        let p0 = mesh.positions[f[0] as usize];
        let p1 = mesh.positions[f[1] as usize];
        let p2 = mesh.positions[f[2] as usize];
        let n = (p1 - p0).cross(p2 - p0);
        for &vi in f {
            acc[vi as usize] = acc[vi as usize] + n;
        }
    }
    for n in &mut acc {
        *n = n.normalized();
    }
    acc
}

/// Indices of vertices whose normal faces the camera origin `o`: keep i iff
/// n_i . (p_i - o) < 0, strictly. Zero-normal vertices are never kept.
pub fn front_filter(mesh: &Mesh, normals: &[Vec3], o: Vec3) -> Vec<u32> {
    assert_eq!(
        normals.len(),
        mesh.positions.len(),
        "one normal per vertex"
    );
    mesh.positions
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let n = normals[*i];
            n.norm2() > 0.0 && n.dot(**p - o) < 0.0
        })
        .map(|(i, _)| i as u32)
        .collect()
}

/// Expected depth along a ray: the weight-averaged sample position
/// sum(w t) / sum(w), or None when the total mass is at most
/// [`MIN_DEPTH_MASS`] (an effectively empty, occluder-free ray).
pub fn expected_depth(field: &Field, ray: &Ray, n_samples: usize) -> Option<f64> {
    let q = ray_weights(field, ray, n_samples);
    let wsum = q.weight_sum();
    if wsum <= MIN_DEPTH_MASS {
        return None;
    }
    let mut acc = 0.0;
    for (t, w) in q.samples.iter().zip(&q.weights) {
        acc += t * w;
    }
    Some(acc / wsum)
}

/// Occlusion test over a front-filtered index set: keep each vertex whose
/// expected depth along the camera ray exists and matches the vertex distance
/// within `eps`.
pub fn depth_filter(
    field: &Field,
    mesh: &Mesh,
    front: &[u32],
    o: Vec3,
    eps: f64,
    n_samples: usize,
) -> Vec<u32> {
    let mut kept = Vec::new();
    for &vi in front {
        let d = mesh.positions[vi as usize] - o;
        let dist = d.norm();
        if dist < 1e-12 {
            continue;
        }
        let ray = match Ray::new(o, d / dist, 0.0, RAY_T_FAR) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if let Some(depth) = expected_depth(field, &ray, n_samples) {
            if (depth - dist).abs() <= eps {
                kept.push(vi);
            }
        }
    }
    kept
}

// --- extraction --------------------------------------------------------------

fn validate_cameras(field: &Field, cameras: &[Camera]) -> Result<()> {
    if cameras.is_empty() {
        return Err(Error::invalid("at least one camera is required"));
    }
    for c in cameras {
        if field.bbox.contains(c.origin) {
            return Err(Error::CameraInsideBbox(c.origin.to_array()));
        }
    }
    Ok(())
}

/// Extract per-vertex colors: for each camera in index order, integrate the
/// radiance along the origin-to-vertex ray of every vertex that survives the
/// front and depth tests, then average per vertex over the cameras that saw
/// it. Vertices no camera saw copy the color of the nearest visible vertex
/// and keep visibility 0; if nothing is visible at all, colors fall back to
/// mid gray.
pub fn extract_colors(
    field: &Field,
    mesh: &Mesh,
    cameras: &[Camera],
    n_samples: usize,
) -> Result<ColoredMesh> {
    validate_cameras(field, cameras)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let nv = mesh.positions.len();
    let normals = vertex_normals(mesh);
    let mut sums = vec![[0.0f64; 3]; nv];
    let mut counts = vec![0u32; nv];
    for cam in cameras {
        let front = front_filter(mesh, &normals, cam.origin);
        let kept = depth_filter(field, mesh, &front, cam.origin, DEFAULT_DEPTH_EPS, n_samples);
        for &vi in &kept {
            let d = mesh.positions[vi as usize] - cam.origin;
            let dist = d.norm();
            let ray = Ray::new(cam.origin, d / dist, 0.0, RAY_T_FAR)?;
            let c = integrate_ray_radiance(field, &ray, n_samples);
            for k in 0..3 {
                sums[vi as usize][k] += c[k];
            }
            counts[vi as usize] += 1;
        }
    }
    let mut colors = vec![[0.0f64; 3]; nv];
    for i in 0..nv {
        if counts[i] > 0 {
            let inv = 1.0 / counts[i] as f64;
            for k in 0..3 {
                colors[i][k] = (sums[i][k] * inv).clamp(0.0, 1.0);
            }
        }
    }
    let visible: Vec<u32> = (0..nv as u32).filter(|&i| counts[i as usize] > 0).collect();
    if visible.len() < nv {
        if visible.is_empty() {
            for c in &mut colors {
                *c = [0.5; 3];
            }
        } else {
            let pts: Vec<Vec3> = visible
                .iter()
                .map(|&i| mesh.positions[i as usize])
                .collect();
            let kd = KdTree::build(&pts);
            for i in 0..nv {
                if counts[i] == 0 {
                    let (j, _) = kd
                        .nearest(mesh.positions[i])
                        .expect("tree built from a non-empty visible set");
                    colors[i] = colors[visible[j as usize] as usize];
                }
            }
        }
    }
    Ok(ColoredMesh {
        mesh: mesh.clone(),
        colors,
        visibility: counts,
        edited_mask: vec![false; nv],
    })
}

// --- frozen plans for the color optimizer ------------------------------------

/// One retained quadrature sample of a planned color ray. The weight is
/// normalized by the ray's full weight sum, so an untruncated ray's weights
/// add to one.
#[derive(Debug, Clone, Copy)]
pub struct RaySample {
    pub pos: Vec3,
    pub weight: f64,
}

/// A camera-to-vertex color ray with its quadrature samples frozen.
#[derive(Debug, Clone)]
pub struct RayPlan {
    pub dir: Vec3,
    pub samples: Vec<RaySample>,
}

/// Frozen color-extraction plan: per vertex, the visible camera rays with
/// their quadrature weights precomputed. The plan stays valid while the
/// density is fixed; radiance parameters may change freely, which is exactly
/// the color-fit setting. A planned color depends only on radiance
/// parameters, so its density-parameter gradient is zero by construction.
#[derive(Debug, Clone, Default)]
pub struct ColorPlan {
    rays: Vec<RayPlan>,
    ranges: Vec<(u32, u32)>,
    pub visibility: Vec<u32>,
}

impl ColorPlan {
    pub fn vertex_count(&self) -> usize {
        self.ranges.len()
    }

    /// The planned rays for one vertex, in camera index order.
    pub fn vertex_rays(&self, vertex: usize) -> &[RayPlan] {
        let (start, len) = self.ranges[vertex];
        &self.rays[start as usize..(start + len) as usize]
    }
}

fn truncate_samples(samples: &[f64], weights: &[f64], ray: &Ray, keep_mass: f64) -> Vec<RaySample> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut threshold = 0.0;
    if keep_mass < 1.0 {
        let mut sorted: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("weights are finite"));
        let mut acc = 0.0;
        for w in sorted {
            threshold = w;
            acc += w;
            if acc >= keep_mass * total {
                break;
            }
        }
    }
    // Stored weights are normalized by the full ray total, mirroring the
    // weighted-average form of extraction term for term.
    let inv = 1.0 / total;
    samples
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0 && **w >= threshold)
        .map(|(t, w)| RaySample {
            pos: ray.at(*t),
            weight: *w * inv,
        })
        .collect()
}

/// Build a color plan with the same filtering as [`extract_colors`].
/// `keep_mass` in (0, 1] drops each ray's lightest samples once the kept
/// weight reaches that fraction of the ray total; 1 keeps every
/// positive-weight sample, making the planned forward value reproduce
/// [`extract_colors`] exactly.
pub fn plan_colors(
    field: &Field,
    mesh: &Mesh,
    cameras: &[Camera],
    n_samples: usize,
    keep_mass: f64,
) -> Result<ColorPlan> {
    validate_cameras(field, cameras)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if !(keep_mass > 0.0 && keep_mass <= 1.0) {
        return Err(Error::invalid("keep_mass must lie in (0, 1]"));
    }
    let nv = mesh.positions.len();
    let normals = vertex_normals(mesh);
    let mut per_vertex: Vec<Vec<RayPlan>> = vec![Vec::new(); nv];
    for cam in cameras {
        let front = front_filter(mesh, &normals, cam.origin);
        let kept = depth_filter(field, mesh, &front, cam.origin, DEFAULT_DEPTH_EPS, n_samples);
        for &vi in &kept {
            let d = mesh.positions[vi as usize] - cam.origin;
            let dist = d.norm();
            let ray = Ray::new(cam.origin, d / dist, 0.0, RAY_T_FAR)?;
            let q = ray_weights(field, &ray, n_samples);
            per_vertex[vi as usize].push(RayPlan {
                dir: ray.dir,
                samples: truncate_samples(&q.samples, &q.weights, &ray, keep_mass),
            });
        }
    }
    let mut plan = ColorPlan {
        rays: Vec::new(),
        ranges: Vec::with_capacity(nv),
        visibility: Vec::with_capacity(nv),
    };
    for rays in per_vertex {
        let start = plan.rays.len() as u32;
        let len = rays.len() as u32;
        plan.ranges.push((start, len));
        plan.visibility.push(len);
        plan.rays.extend(rays);
    }
    Ok(plan)
}

/// Re-evaluate one planned vertex color on a tape against the current
/// radiance parameters of `field` (which must be neural and bound to
/// `block`). Returns None for vertices no camera sees. Accumulation mirrors
/// [`extract_colors`] term for term, so at `keep_mass = 1` the forward values
/// agree bit for bit.
pub fn taped_vertex_color(
    field: &Field,
    plan: &ColorPlan,
    vertex: usize,
    tape: &mut Tape,
    block: ParamBlock,
    scratch: &mut FieldScratch,
) -> Option<[VarId; 3]> {
    let rays = plan.vertex_rays(vertex);
    if rays.is_empty() {
        return None;
    }
    let inv = 1.0 / rays.len() as f64;
    let mut vertex_acc: Option<[VarId; 3]> = None;
    for ray in rays {
        let mut ray_acc: Option<[VarId; 3]> = None;
        for s in &ray.samples {
            let c = field.radiance_taped(tape, block, s.pos, ray.dir, scratch);
            let term = [
                tape.mulc(c[0], s.weight),
                tape.mulc(c[1], s.weight),
                tape.mulc(c[2], s.weight),
            ];
            ray_acc = Some(match ray_acc {
                None => term,
                Some(a) => [
                    tape.add(a[0], term[0]),
                    tape.add(a[1], term[1]),
                    tape.add(a[2], term[2]),
                ],
            });
        }
        if let Some(r) = ray_acc {
            vertex_acc = Some(match vertex_acc {
                None => r,
                Some(a) => [
                    tape.add(a[0], r[0]),
                    tape.add(a[1], r[1]),
                    tape.add(a[2], r[2]),
                ],
            });
        }
    }
    vertex_acc.map(|a| [tape.mulc(a[0], inv), tape.mulc(a[1], inv), tape.mulc(a[2], inv)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticRadiance, AnalyticSdf, NeuralRadiance, RadianceModel, SigmaModel};
    use crate::march::icosphere;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_quad() -> Mesh {
        Mesh {
            positions: alloc::vec![
                Vec3 { x: -0.4, y: -0.4, z: 0.0 },
                Vec3 { x: 0.4, y: -0.4, z: 0.0 },
                Vec3 { x: 0.4, y: 0.4, z: 0.0 },
                Vec3 { x: -0.4, y: 0.4, z: 0.0 },
            ],
            faces: alloc::vec![[0, 1, 2], [0, 2, 3]],
            provenance: Vec::new(),
        }
    }

    fn cube_bbox(half: f64) -> Aabb {
        Aabb::new(Vec3::splat(-half), Vec3::splat(half))
    }

    fn plane_field(radiance: AnalyticRadiance) -> Field {
        Field::analytic(
            cube_bbox(1.5),
            AnalyticSdf::plane(Vec3 { x: 0.0, y: 0.0, z: 1.0 }, 0.0).unwrap(),
            radiance,
        )
    }

    fn sphere_field(radius: f64) -> Field {
        Field::analytic(
            cube_bbox(1.5),
            AnalyticSdf::sphere(Vec3::ZERO, radius).unwrap(),
            AnalyticRadiance::Constant([1.0, 0.0, 0.0]),
        )
    }

    #[test]
    fn quad_normals_are_exactly_plus_z() {
        let normals = vertex_normals(&unit_quad());
        for n in normals {
            assert_eq!(n.to_array(), [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn icosphere_normals_align_with_radial_directions() {
        let m = icosphere(Vec3::ZERO, 1.0, 2);
        let normals = vertex_normals(&m);
        for (p, n) in m.positions.iter().zip(&normals) {
            assert!(n.dot(p.normalized()) > 0.99);
        }
    }

    #[test]
    fn isolated_vertex_gets_zero_normal_and_is_never_front_facing() {
        let mut m = unit_quad();
        m.positions.push(Vec3 { x: 5.0, y: 5.0, z: 5.0 });
        let normals = vertex_normals(&m);
        assert_eq!(normals[4].to_array(), [0.0, 0.0, 0.0]);
        let kept = front_filter(&m, &normals, Vec3 { x: 5.0, y: 5.0, z: 9.0 });
        assert!(!kept.contains(&4));
    }

    #[test]
    fn front_filter_keeps_the_camera_facing_cap_of_a_sphere() {
        let m = icosphere(Vec3::ZERO, 1.0, 2);
        let normals = vertex_normals(&m);
        let kept = front_filter(&m, &normals, Vec3 { x: 0.0, y: 0.0, z: 3.0 });
        assert!(!kept.is_empty());
        assert!(kept.len() < m.positions.len());
        // A unit sphere seen from (0,0,3) is front-facing exactly where
        // z > 1/3; mesh normals move that boundary only slightly.
        for &vi in &kept {
            assert!(m.positions[vi as usize].z > 0.25);
        }
        for (i, p) in m.positions.iter().enumerate() {
            if p.z > 0.45 {
                assert!(kept.contains(&(i as u32)), "vertex {i} at z={} must be kept", p.z);
            }
        }
    }

    #[test]
    fn front_filter_on_a_quad_depends_on_the_camera_side() {
        let m = unit_quad();
        let normals = vertex_normals(&m);
        let above = front_filter(&m, &normals, Vec3 { x: 0.0, y: 0.0, z: 3.0 });
        assert_eq!(above, alloc::vec![0, 1, 2, 3]);
        let below = front_filter(&m, &normals, Vec3 { x: 0.0, y: 0.0, z: -3.0 });
        assert!(below.is_empty());
    }

    #[test]
    fn expected_depth_of_a_wall_matches_the_hit_distance() {
        let f = Field::analytic(
            cube_bbox(1.5),
            AnalyticSdf::plane(Vec3 { x: 0.0, y: 0.0, z: 1.0 }, 1.0).unwrap(),
            AnalyticRadiance::Constant([0.5, 0.5, 0.5]),
        );
        let ray = Ray::new(
            Vec3 { x: 0.0, y: 0.0, z: 3.0 },
            Vec3 { x: 0.0, y: 0.0, z: -1.0 },
            0.0,
            RAY_T_FAR,
        )
        .unwrap();
        let n = 256;
        let spacing = 3.0 / n as f64;
        let d = expected_depth(&f, &ray, n).expect("wall must report a depth");
        assert!((d - 2.0).abs() < 2.0 * spacing, "depth {d} too far from 2");
    }

    #[test]
    fn expected_depth_is_absent_on_empty_rays() {
        let f = sphere_field(0.5);
        let miss_bbox = Ray::new(
            Vec3 { x: 0.0, y: 0.0, z: 3.0 },
            Vec3 { x: 1.0, y: 0.0, z: 0.0 },
            0.0,
            RAY_T_FAR,
        )
        .unwrap();
        assert!(expected_depth(&f, &miss_bbox, 128).is_none());
        let through_empty_corner = Ray::new(
            Vec3 { x: 1.4, y: 1.4, z: 3.0 },
            Vec3 { x: 0.0, y: 0.0, z: -1.0 },
            0.0,
            RAY_T_FAR,
        )
        .unwrap();
        assert!(expected_depth(&f, &through_empty_corner, 128).is_none());
    }

    #[test]
    fn expected_depth_of_a_sphere_front_hit_is_the_ray_sphere_distance() {
        let f = sphere_field(1.0);
        let ray = Ray::new(
            Vec3 { x: 0.0, y: 0.0, z: 3.0 },
            Vec3 { x: 0.0, y: 0.0, z: -1.0 },
            0.0,
            RAY_T_FAR,
        )
        .unwrap();
        let n = 256;
        let spacing = 3.0 / n as f64;
        let d = expected_depth(&f, &ray, n).expect("sphere must report a depth");
        assert!((d - 2.0).abs() < 2.0 * spacing, "depth {d} too far from 2");
    }

    #[test]
    fn depth_filter_removes_occluded_inner_sphere_vertices() {
        let f = sphere_field(1.0);
        let outer = icosphere(Vec3::ZERO, 1.0, 2);
        let inner = icosphere(Vec3::ZERO, 0.5, 1);
        let n_outer = outer.positions.len() as u32;
        let mut mesh = outer;
        mesh.positions.extend_from_slice(&inner.positions);
        mesh.faces
            .extend(inner.faces.iter().map(|f| [f[0] + n_outer, f[1] + n_outer, f[2] + n_outer]));
        let o = Vec3 { x: 0.0, y: 0.0, z: 3.0 };
        let normals = vertex_normals(&mesh);
        let front = front_filter(&mesh, &normals, o);
        assert!(
            front.iter().any(|&vi| vi >= n_outer),
            "some inner vertices must be front-facing before the depth test"
        );
        let kept = depth_filter(&f, &mesh, &front, o, DEFAULT_DEPTH_EPS, 512);
        for &vi in &kept {
            assert!(vi < n_outer, "inner vertex {vi} must be removed as occluded");
        }
        for (i, p) in mesh.positions.iter().enumerate().take(n_outer as usize) {
            if p.z > 0.7 {
                assert!(
                    kept.contains(&(i as u32)),
                    "unoccluded outer vertex {i} must be kept"
                );
            }
        }
    }

    #[test]
    fn depth_filter_keeps_every_front_vertex_of_an_unoccluded_plane() {
        let f = plane_field(AnalyticRadiance::Constant([0.5, 0.5, 0.5]));
        let m = unit_quad();
        let o = Vec3 { x: 0.3, y: -0.2, z: 2.5 };
        let normals = vertex_normals(&m);
        let front = front_filter(&m, &normals, o);
        let kept = depth_filter(&f, &m, &front, o, DEFAULT_DEPTH_EPS, 256);
        assert_eq!(kept, front);
    }

    #[test]
    fn filters_only_remove_vertices() {
        let f = sphere_field(1.0);
        let m = icosphere(Vec3::ZERO, 1.0, 2);
        let normals = vertex_normals(&m);
        for cam in default_rig(&f.bbox).iter().take(3) {
            let front = front_filter(&m, &normals, cam.origin);
            let kept = depth_filter(&f, &m, &front, cam.origin, DEFAULT_DEPTH_EPS, 128);
            assert!(front.len() <= m.positions.len());
            assert!(kept.len() <= front.len());
            assert!(kept.iter().all(|vi| front.contains(vi)));
            assert!(front.windows(2).all(|w| w[0] < w[1]));
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn constant_red_field_colors_every_visible_vertex_red() {
        let f = plane_field(AnalyticRadiance::Constant([1.0, 0.0, 0.0]));
        let m = unit_quad();
        let rig = default_rig(&f.bbox);
        let cm = extract_colors(&f, &m, &rig, 128).unwrap();
        for (i, c) in cm.colors.iter().enumerate() {
            assert!(cm.visibility[i] > 0, "quad vertex {i} must be visible");
            assert!((c[0] - 1.0).abs() < 1e-2, "red channel {} off", c[0]);
            assert!(c[1].abs() < 1e-2 && c[2].abs() < 1e-2);
        }
    }

    #[test]
    fn direction_map_color_is_the_mean_of_the_two_per_view_renders() {
        let f = plane_field(AnalyticRadiance::DirectionMap);
        let m = unit_quad();
        let cams = [
            Camera::looking_at(Vec3 { x: 3.0, y: 0.0, z: 2.0 }, Vec3::ZERO),
            Camera::looking_at(Vec3 { x: -3.0, y: 0.0, z: 2.0 }, Vec3::ZERO),
        ];
        let cm = extract_colors(&f, &m, &cams, 256).unwrap();
        for (i, p) in m.positions.iter().enumerate() {
            assert_eq!(cm.visibility[i], 2);
            // The plane is fully opaque and the radiance depends only on the
            // ray direction, so each view renders (d + 1) / 2 exactly.
            let mut oracle = [0.0f64; 3];
            for cam in &cams {
                let d = (*p - cam.origin).normalized();
                for (k, o) in oracle.iter_mut().enumerate() {
                    *o += (d.axis(k) + 1.0) * 0.25;
                }
            }
            for k in 0..3 {
                assert!(
                    (cm.colors[i][k] - oracle[k]).abs() < 1e-3,
                    "vertex {i} channel {k}: {} vs {}",
                    cm.colors[i][k],
                    oracle[k]
                );
            }
        }
    }

    #[test]
    fn checkered_sphere_colors_match_direct_surface_evaluation() {
        // A sharpened sphere keeps grazing views fully opaque much closer to
        // the silhouette; vertices with any camera in the ambiguous angular
        // window (partially transparent or near the front-facing boundary)
        // are excluded, as are vertices near a checker cell boundary, where
        // quadrature samples straddle two colors.
        let checker = AnalyticRadiance::Checker {
            cell: 1.0,
            a: [0.9, 0.1, 0.1],
            b: [0.1, 0.1, 0.9],
        };
        let f = Field::analytic(
            cube_bbox(1.5),
            AnalyticSdf::Scaled {
                inner: Box::new(AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap()),
                factor: 20.0,
            },
            checker.clone(),
        );
        let m = icosphere(Vec3::ZERO, 1.0, 2);
        // Ring radius 3 puts the front-facing boundary of a unit sphere at
        // cos angle 1/3, just below the full-opacity threshold (~0.42 at this
        // sharpness), so the exclusion window below can cover both.
        let radius = 3.0;
        let cams: Vec<Camera> = (0..8)
            .map(|j| {
                let a = core::f64::consts::TAU * j as f64 / 8.0;
                Camera::looking_at(
                    Vec3 { x: radius * libm::cos(a), y: radius * libm::sin(a), z: 0.0 },
                    Vec3::ZERO,
                )
            })
            .collect();
        let n = 512;
        let cm = extract_colors(&f, &m, &cams, n).unwrap();
        let mut qualifying = 0usize;
        for (i, p) in m.positions.iter().enumerate() {
            let boundary_margin = [p.x, p.y, p.z]
                .iter()
                .map(|v| (v - libm::round(*v)).abs())
                .fold(f64::INFINITY, f64::min);
            if boundary_margin < 0.12 {
                continue;
            }
            let angles: Vec<f64> = cams
                .iter()
                .map(|c| p.normalized().dot(c.origin.normalized()))
                .collect();
            if angles.iter().any(|&a| a > 0.28 && a < 0.43) {
                continue;
            }
            if cm.visibility[i] == 0 {
                continue;
            }
            qualifying += 1;
            let oracle = checker.eval(*p, Vec3 { x: 0.0, y: 0.0, z: -1.0 });
            for k in 0..3 {
                assert!(
                    (cm.colors[i][k] - oracle[k]).abs() < 3e-2,
                    "vertex {i} channel {k}: {} vs {}",
                    cm.colors[i][k],
                    oracle[k]
                );
            }
        }
        assert!(
            qualifying > m.positions.len() / 6,
            "only {qualifying} of {} vertices qualified",
            m.positions.len()
        );
    }

    #[test]
    fn invisible_vertices_copy_the_nearest_visible_color() {
        // Cameras only above the quad: the far-away extra patch below the
        // plane faces downward, is never visible, and must inherit a color.
        let f = plane_field(AnalyticRadiance::Constant([0.2, 0.9, 0.4]));
        let mut m = unit_quad();
        let base = m.positions.len() as u32;
        m.positions.extend_from_slice(&[
            Vec3 { x: 0.0, y: 0.0, z: -1.0 },
            Vec3 { x: 0.3, y: 0.0, z: -1.0 },
            Vec3 { x: 0.0, y: 0.3, z: -1.0 },
        ]);
        m.faces.push([base, base + 2, base + 1]);
        let cams = [
            Camera::looking_at(Vec3 { x: 0.0, y: 0.0, z: 3.0 }, Vec3::ZERO),
            Camera::looking_at(Vec3 { x: 1.0, y: 1.0, z: 3.0 }, Vec3::ZERO),
        ];
        let cm = extract_colors(&f, &m, &cams, 128).unwrap();
        for i in 0..4 {
            assert!(cm.visibility[i] > 0);
        }
        for i in 4..7 {
            assert_eq!(cm.visibility[i], 0, "downward patch must be invisible");
            // Nearest visible vertex by distance, ties to the lowest index.
            let donor = (0..4)
                .min_by(|&a, &b| {
                    m.positions[a]
                        .dist2(m.positions[i])
                        .partial_cmp(&m.positions[b].dist2(m.positions[i]))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(cm.colors[i], cm.colors[donor], "fallback must copy vertex {donor}");
        }
    }

    #[test]
    fn adding_a_blind_camera_changes_nothing() {
        let f = plane_field(AnalyticRadiance::Constant([0.7, 0.3, 0.1]));
        let m = unit_quad();
        let cams = alloc::vec![
            Camera::looking_at(Vec3 { x: 0.5, y: 0.5, z: 3.0 }, Vec3::ZERO),
            Camera::looking_at(Vec3 { x: -0.5, y: 0.5, z: 3.0 }, Vec3::ZERO),
        ];
        let mut extended = cams.clone();
        extended.push(Camera::looking_at(Vec3 { x: 0.0, y: 0.0, z: -3.0 }, Vec3::ZERO));
        let a = extract_colors(&f, &m, &cams, 64).unwrap();
        let b = extract_colors(&f, &m, &extended, 64).unwrap();
        assert_eq!(a.visibility, b.visibility);
        for (ca, cb) in a.colors.iter().zip(&b.colors) {
            for k in 0..3 {
                assert_eq!(ca[k].to_bits(), cb[k].to_bits());
            }
        }
    }

    #[test]
    fn extraction_rejects_bad_inputs() {
        let f = plane_field(AnalyticRadiance::Constant([0.5; 3]));
        let m = unit_quad();
        assert!(matches!(
            extract_colors(&f, &m, &[], 64),
            Err(Error::InvalidArgument(_))
        ));
        let inside = Camera::looking_at(Vec3::ZERO, Vec3 { x: 1.0, y: 0.0, z: 0.0 });
        assert!(matches!(
            extract_colors(&f, &m, &[inside], 64),
            Err(Error::CameraInsideBbox(_))
        ));
        let empty = Mesh::default();
        let cam = Camera::looking_at(Vec3 { x: 0.0, y: 0.0, z: 3.0 }, Vec3::ZERO);
        assert!(matches!(
            extract_colors(&f, &empty, &[cam], 64),
            Err(Error::EmptyMesh)
        ));
        assert!(plan_colors(&f, &m, &[cam], 64, 0.0).is_err());
        assert!(plan_colors(&f, &m, &[cam], 64, 1.5).is_err());
    }

    #[test]
    fn planned_colors_reproduce_extraction_and_their_gradients_match_fd() {
        let bbox = cube_bbox(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let radiance = NeuralRadiance::residual(
            bbox,
            Some(AnalyticRadiance::Constant([0.4, 0.5, 0.6])),
            &[8],
            2,
            &mut rng,
        );
        let mut f = Field::new(
            bbox,
            SigmaModel::Analytic(
                AnalyticSdf::plane(Vec3 { x: 0.0, y: 0.0, z: 1.0 }, 0.0).unwrap(),
            ),
            RadianceModel::Neural(radiance),
        );
        // Move off the zero-residual point so the test does not run at a
        // special parameter value.
        let mut params = f.radiance_params();
        for (j, p) in params.iter_mut().enumerate() {
            *p += 0.05 * libm::sin(1.0 + j as f64);
        }
        f.set_radiance_params(&params).unwrap();

        let m = unit_quad();
        let cams = [
            Camera::looking_at(Vec3 { x: 0.8, y: 0.3, z: 2.6 }, Vec3::ZERO),
            Camera::looking_at(Vec3 { x: -0.9, y: -0.4, z: 2.4 }, Vec3::ZERO),
        ];
        let n = 64;
        let cm = extract_colors(&f, &m, &cams, n).unwrap();
        let plan = plan_colors(&f, &m, &cams, n, 1.0).unwrap();
        assert_eq!(plan.visibility, cm.visibility);

        let mut scratch = FieldScratch::default();
        for vi in 0..m.positions.len() {
            let mut tape = Tape::new();
            let block = f.bind_radiance(&mut tape).expect("neural radiance");
            let c = taped_vertex_color(&f, &plan, vi, &mut tape, block, &mut scratch)
                .expect("all quad vertices are visible");
            for k in 0..3 {
                assert_eq!(
                    tape.val(c[k]).to_bits(),
                    cm.colors[vi][k].to_bits(),
                    "planned forward value must reproduce extraction"
                );
            }
        }

        // Finite differences of the full extraction pipeline against the
        // taped gradient of vertex 0.
        let mut tape = Tape::new();
        let block = f.bind_radiance(&mut tape).expect("neural radiance");
        let c = taped_vertex_color(&f, &plan, 0, &mut tape, block, &mut scratch).unwrap();
        let h = 1e-4;
        let picks = [0usize, 1, params.len() / 3, params.len() / 2, params.len() - 1];
        for k in 0..3 {
            let grads = tape.backward(c[k], 1.0, block);
            assert!(grads.iter().any(|g| g.abs() > 1e-9), "gradient must not vanish");
            for &j in &picks {
                let mut hi = params.clone();
                hi[j] += h;
                let mut lo = params.clone();
                lo[j] -= h;
                let mut fh = f.clone();
                fh.set_radiance_params(&hi).unwrap();
                let ch = extract_colors(&fh, &m, &cams, n).unwrap().colors[0][k];
                let mut fl = f.clone();
                fl.set_radiance_params(&lo).unwrap();
                let cl = extract_colors(&fl, &m, &cams, n).unwrap().colors[0][k];
                let fd = (ch - cl) / (2.0 * h);
                let scale = grads[j].abs().max(fd.abs()).max(1e-7);
                assert!(
                    (grads[j] - fd).abs() / scale < 1e-3,
                    "channel {k} param {j}: tape {} vs fd {}",
                    grads[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn keep_mass_truncation_preserves_almost_all_color() {
        let f = plane_field(AnalyticRadiance::Constant([0.9, 0.2, 0.5]));
        let m = unit_quad();
        let cams = [Camera::looking_at(Vec3 { x: 0.0, y: 0.0, z: 3.0 }, Vec3::ZERO)];
        let full = plan_colors(&f, &m, &cams, 256, 1.0).unwrap();
        let cut = plan_colors(&f, &m, &cams, 256, 0.999).unwrap();
        let full_rays = full.vertex_rays(0);
        let cut_rays = cut.vertex_rays(0);
        assert!(cut_rays[0].samples.len() < full_rays[0].samples.len());
        let mass = |rays: &[RayPlan]| -> f64 {
            rays[0].samples.iter().map(|s| s.weight).sum()
        };
        assert!(mass(cut_rays) >= 0.999 * mass(full_rays));
    }

    #[test]
    fn default_rig_is_sixteen_distinct_outside_cameras() {
        let bbox = cube_bbox(1.5);
        let rig = default_rig(&bbox);
        assert_eq!(rig.len(), 16);
        let radius = 1.5 * bbox.diagonal();
        for c in &rig {
            assert!(!bbox.contains(c.origin));
            assert!(((c.origin - bbox.center()).norm() - radius).abs() < 1e-9);
            assert_eq!(c.look_at.to_array(), bbox.center().to_array());
        }
        for i in 0..rig.len() {
            for j in i + 1..rig.len() {
                let di = (rig[i].origin - bbox.center()).normalized();
                let dj = (rig[j].origin - bbox.center()).normalized();
                assert!(di.dot(dj) < 0.9999, "cameras {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn pixel_rays_are_centered_and_bounded() {
        let mut cam = Camera::looking_at(Vec3 { x: 0.0, y: 0.0, z: 5.0 }, Vec3::ZERO);
        cam.resolution = (63, 63);
        let (_, _, forward) = cam.basis();
        let center = cam.pixel_ray(31, 31).unwrap();
        assert!((center.dir - forward).norm() < 1e-12);
        let c00 = cam.pixel_ray(0, 0).unwrap();
        let c62 = cam.pixel_ray(62, 62).unwrap();
        assert!((c00.dir + c62.dir).cross(forward).norm() < 1e-12);
        assert!(c00.dir.dot(forward) > libm::cos(cam.fov_deg.to_radians()));
        assert!(cam.pixel_ray(63, 0).is_err());
    }
}
