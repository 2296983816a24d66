//! Implicit fields: a paired density (signed-distance-like) scalar and a
//! view-dependent radiance, over a bounding box. Fields are either analytic
//! (exact SDF primitives with procedural radiance, used as oracles and as the
//! frozen base of residual fields) or neural (an MLP atop an optional
//! analytic base).
//!
//! The density convention is NeuS-like: negative inside, positive outside,
//! iso-surface at threshold s (default 0). Ray quadrature converts density to
//! opacity through a logistic CDF with fixed sharpness, producing weights
//! that peak at the first front-facing crossing.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::net::{decode_block, encode_block, Activation, MlpNet, PosEnc, CHECKPOINT_MAGIC};
use crate::tape::{logistic, ParamBlock, Tape, VarId};
use crate::vec3::{Aabb, Vec3};
use crate::{Error, Result};

/// Logistic sharpness used by the density-to-opacity conversion.
pub const S_LOGISTIC: f64 = 64.0;

// --- analytic primitives ---------------------------------------------------

#[derive(Debug, Clone)]
pub enum AnalyticSdf {
    Sphere { center: Vec3, radius: f64 },
    BoxSdf { center: Vec3, half: Vec3 },
    /// Ring in the plane z = center.z around the z axis through center.
    Torus { center: Vec3, major: f64, minor: f64 },
    Plane { normal: Vec3, offset: f64 },
    Union(Box<AnalyticSdf>, Box<AnalyticSdf>),
    Difference(Box<AnalyticSdf>, Box<AnalyticSdf>),
    /// factor * inner: deliberately not a unit-gradient SDF when factor != 1.
    Scaled { inner: Box<AnalyticSdf>, factor: f64 },
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64) -> Result<AnalyticSdf> {
        if radius <= 0.0 {
            return Err(Error::invalid("sphere radius must be positive"));
        }
        Ok(AnalyticSdf::Sphere { center, radius })
    }

    pub fn torus(center: Vec3, major: f64, minor: f64) -> Result<AnalyticSdf> {
        if major <= 0.0 || minor <= 0.0 || minor >= major {
            return Err(Error::invalid("torus needs 0 < minor < major"));
        }
        Ok(AnalyticSdf::Torus {
            center,
            major,
            minor,
        })
    }

    pub fn boxsdf(center: Vec3, half: Vec3) -> Result<AnalyticSdf> {
        if half.x <= 0.0 || half.y <= 0.0 || half.z <= 0.0 {
            return Err(Error::invalid("box half extents must be positive"));
        }
        Ok(AnalyticSdf::BoxSdf { center, half })
    }

    pub fn plane(normal: Vec3, offset: f64) -> Result<AnalyticSdf> {
        if (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("plane normal must be unit length"));
        }
        Ok(AnalyticSdf::Plane { normal, offset })
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => (p - *center).norm() - radius,
            AnalyticSdf::BoxSdf { center, half } => {
                let d = p - *center;
                let q = Vec3 {
                    x: libm::fabs(d.x) - half.x,
                    y: libm::fabs(d.y) - half.y,
                    z: libm::fabs(d.z) - half.z,
                };
                let outside = q.max_by_component(Vec3::ZERO).norm();
                let inside = {
                    let m = q.x.max(q.y).max(q.z);
                    if m < 0.0 {
                        m
                    } else {
                        0.0
                    }
                };
                outside + inside
            }
            AnalyticSdf::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - *center;
                let ring = libm::sqrt(d.x * d.x + d.y * d.y) - major;
                libm::sqrt(ring * ring + d.z * d.z) - minor
            }
            AnalyticSdf::Plane { normal, offset } => normal.dot(p) - offset,
            AnalyticSdf::Union(a, b) => a.eval(p).min(b.eval(p)),
            AnalyticSdf::Difference(a, b) => a.eval(p).max(-b.eval(p)),
            AnalyticSdf::Scaled { inner, factor } => factor * inner.eval(p),
        }
    }
}

/// Procedural radiance used by analytic scenes and as residual-field bases.
#[derive(Debug, Clone)]
pub enum AnalyticRadiance {
    Constant([f64; 3]),
    /// 3-D checkerboard with cells of edge `cell`, alternating a/b.
    Checker {
        cell: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
    /// View-direction visualization: c = (d + 1) / 2 componentwise.
    DirectionMap,
}

impl AnalyticRadiance {
    pub fn eval(&self, p: Vec3, d: Vec3) -> [f64; 3] {
        match self {
            AnalyticRadiance::Constant(c) => *c,
            AnalyticRadiance::Checker { cell, a, b } => {
                let k = libm::floor(p.x / cell) + libm::floor(p.y / cell) + libm::floor(p.z / cell);
                if (k as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            AnalyticRadiance::DirectionMap => {
                [(d.x + 1.0) * 0.5, (d.y + 1.0) * 0.5, (d.z + 1.0) * 0.5]
            }
        }
    }
}

// --- neural models ----------------------------------------------------------

/// Density model: optional analytic base plus an MLP residual over positional
/// encoding features. With a zero-initialized output layer the model starts
/// exactly at the base.
#[derive(Debug, Clone)]
pub struct NeuralSigma {
    pub base: Option<AnalyticSdf>,
    pub net: MlpNet,
    pub pe: PosEnc,
}

impl NeuralSigma {
    pub fn residual(
        bbox: Aabb,
        base: Option<AnalyticSdf>,
        hidden: &[usize],
        octaves: usize,
        rng: &mut impl rand::Rng,
    ) -> NeuralSigma {
        let pe = PosEnc::new(bbox, octaves);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(pe.feature_count());
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = MlpNet::new(&dims, Activation::Softplus, Activation::Linear, rng)
            .zero_output_layer();
        NeuralSigma { base, net, pe }
    }
}

/// Radiance model: rgb = sigmoid(logit(base rgb) + net(x, d)). The net's
/// output layer is linear; the sigmoid is applied here so an optional
/// analytic base can be injected in logit space (zero residual reproduces the
/// base exactly, and gradients never die at the bounds).
#[derive(Debug, Clone)]
pub struct NeuralRadiance {
    pub base: Option<AnalyticRadiance>,
    pub net: MlpNet,
    pub pe: PosEnc,
}

impl NeuralRadiance {
    pub fn residual(
        bbox: Aabb,
        base: Option<AnalyticRadiance>,
        hidden: &[usize],
        octaves: usize,
        rng: &mut impl rand::Rng,
    ) -> NeuralRadiance {
        let pe = PosEnc::new(bbox, octaves);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(pe.feature_count() + 3);
        dims.extend_from_slice(hidden);
        dims.push(3);
        let net = MlpNet::new(&dims, Activation::Softplus, Activation::Linear, rng)
            .zero_output_layer();
        NeuralRadiance { base, net, pe }
    }
}

fn logit(b: f64) -> f64 {
    let c = b.clamp(1e-4, 1.0 - 1e-4);
    libm::log(c / (1.0 - c))
}

#[derive(Debug, Clone)]
pub enum SigmaModel {
    Analytic(AnalyticSdf),
    Neural(NeuralSigma),
}

#[derive(Debug, Clone)]
pub enum RadianceModel {
    Analytic(AnalyticRadiance),
    Neural(NeuralRadiance),
}

/// The implicit field: density + radiance over a bounding box.
///
/// `sigma_eval_count` instruments density evaluations (used by octree tests
/// to prove each unique grid corner is evaluated exactly once).
#[derive(Debug)]
pub struct Field {
    pub bbox: Aabb,
    pub sigma_model: SigmaModel,
    pub radiance_model: RadianceModel,
    sigma_eval_count: AtomicU64,
}

impl Clone for Field {
    fn clone(&self) -> Field {
        Field {
            bbox: self.bbox,
            sigma_model: self.sigma_model.clone(),
            radiance_model: self.radiance_model.clone(),
            sigma_eval_count: AtomicU64::new(0),
        }
    }
}

impl Field {
    pub fn new(bbox: Aabb, sigma_model: SigmaModel, radiance_model: RadianceModel) -> Field {
        Field {
            bbox,
            sigma_model,
            radiance_model,
            sigma_eval_count: AtomicU64::new(0),
        }
    }

    pub fn analytic(bbox: Aabb, sdf: AnalyticSdf, radiance: AnalyticRadiance) -> Field {
        Field::new(
            bbox,
            SigmaModel::Analytic(sdf),
            RadianceModel::Analytic(radiance),
        )
    }

    pub fn sigma_eval_count(&self) -> u64 {
        self.sigma_eval_count.load(Ordering::Relaxed)
    }

    pub fn reset_sigma_eval_count(&self) {
        self.sigma_eval_count.store(0, Ordering::Relaxed);
    }

    /// Density at a point.
    pub fn sigma(&self, p: Vec3) -> f64 {
        self.sigma_eval_count.fetch_add(1, Ordering::Relaxed);
        match &self.sigma_model {
            SigmaModel::Analytic(s) => s.eval(p),
            SigmaModel::Neural(n) => {
                let base = n.base.as_ref().map_or(0.0, |b| b.eval(p));
                let mut feats = Vec::with_capacity(n.pe.feature_count());
                n.pe.features_into(p, &mut feats);
                base + n.net.eval(&feats)[0]
            }
        }
    }

    /// Density with caller-provided scratch buffers (hot loops).
    pub fn sigma_with_scratch(&self, p: Vec3, scratch: &mut FieldScratch) -> f64 {
        self.sigma_eval_count.fetch_add(1, Ordering::Relaxed);
        match &self.sigma_model {
            SigmaModel::Analytic(s) => s.eval(p),
            SigmaModel::Neural(n) => {
                let base = n.base.as_ref().map_or(0.0, |b| b.eval(p));
                n.pe.features_into(p, &mut scratch.feats);
                n.net
                    .eval_into(&scratch.feats, &mut scratch.eval, &mut scratch.out);
                base + scratch.out[0]
            }
        }
    }

    /// Radiance at a point seen from direction `d` (unit, pointing from the
    /// camera into the scene). Components always in [0, 1].
    pub fn radiance(&self, p: Vec3, d: Vec3) -> [f64; 3] {
        match &self.radiance_model {
            RadianceModel::Analytic(r) => r.eval(p, d),
            RadianceModel::Neural(n) => {
                let mut feats = Vec::with_capacity(n.pe.feature_count() + 3);
                n.pe.features_into(p, &mut feats);
                feats.extend_from_slice(&[d.x, d.y, d.z]);
                let out = n.net.eval(&feats);
                let base = n
                    .base
                    .as_ref()
                    .map_or([0.0; 3], |b| b.eval(p, d));
                let mut rgb = [0.0; 3];
                for k in 0..3 {
                    let l = n.base.as_ref().map_or(0.0, |_| logit(base[k]));
                    rgb[k] = logistic(l + out[k]);
                }
                rgb
            }
        }
    }

    pub fn sigma_trainable(&self) -> bool {
        matches!(self.sigma_model, SigmaModel::Neural(_))
    }

    pub fn radiance_trainable(&self) -> bool {
        matches!(self.radiance_model, RadianceModel::Neural(_))
    }

    pub fn density_params(&self) -> Vec<f64> {
        match &self.sigma_model {
            SigmaModel::Neural(n) => n.net.params_flat(),
            SigmaModel::Analytic(_) => Vec::new(),
        }
    }

    pub fn set_density_params(&mut self, params: &[f64]) -> Result<()> {
        match &mut self.sigma_model {
            SigmaModel::Neural(n) => n.net.set_params_flat(params),
            SigmaModel::Analytic(_) => Err(Error::invalid(
                "analytic density has no trainable parameters",
            )),
        }
    }

    pub fn radiance_params(&self) -> Vec<f64> {
        match &self.radiance_model {
            RadianceModel::Neural(n) => n.net.params_flat(),
            RadianceModel::Analytic(_) => Vec::new(),
        }
    }

    pub fn set_radiance_params(&mut self, params: &[f64]) -> Result<()> {
        match &mut self.radiance_model {
            RadianceModel::Neural(n) => n.net.set_params_flat(params),
            RadianceModel::Analytic(_) => Err(Error::invalid(
                "analytic radiance has no trainable parameters",
            )),
        }
    }

    /// Bind the density net parameters on a tape (once per tape); None for
    /// analytic density.
    pub fn bind_sigma(&self, tape: &mut Tape) -> Option<ParamBlock> {
        match &self.sigma_model {
            SigmaModel::Neural(n) => Some(tape.param_block(&n.net.params_flat())),
            SigmaModel::Analytic(_) => None,
        }
    }

    /// Taped density eval against a bound parameter block. The analytic base
    /// enters as a constant leaf; gradients flow only into the net.
    pub fn sigma_taped(
        &self,
        tape: &mut Tape,
        block: ParamBlock,
        p: Vec3,
        scratch: &mut FieldScratch,
    ) -> VarId {
        match &self.sigma_model {
            SigmaModel::Analytic(_) => {
                // Callers must not request a taped eval of a frozen field.
                unreachable!("sigma_taped requires a neural density model")
            }
            SigmaModel::Neural(n) => {
                self.sigma_eval_count.fetch_add(1, Ordering::Relaxed);
                n.pe.features_into(p, &mut scratch.feats);
                let out = n.net.eval_taped(tape, block, &scratch.feats)[0];
                match &n.base {
                    Some(b) => tape.addc(out, b.eval(p)),
                    None => out,
                }
            }
        }
    }

    pub fn bind_radiance(&self, tape: &mut Tape) -> Option<ParamBlock> {
        match &self.radiance_model {
            RadianceModel::Neural(n) => Some(tape.param_block(&n.net.params_flat())),
            RadianceModel::Analytic(_) => None,
        }
    }

    /// Taped radiance eval; see [`Field::radiance`] for the model.
    pub fn radiance_taped(
        &self,
        tape: &mut Tape,
        block: ParamBlock,
        p: Vec3,
        d: Vec3,
        scratch: &mut FieldScratch,
    ) -> [VarId; 3] {
        match &self.radiance_model {
            RadianceModel::Analytic(_) => {
                unreachable!("radiance_taped requires a neural radiance model")
            }
            RadianceModel::Neural(n) => {
                n.pe.features_into(p, &mut scratch.feats);
                scratch.feats.extend_from_slice(&[d.x, d.y, d.z]);
                let out = n.net.eval_taped(tape, block, &scratch.feats);
                let base = n.base.as_ref().map(|b| b.eval(p, d));
                let mut rgb = [VarId(0); 3];
                for k in 0..3 {
                    let pre = match &base {
                        Some(b) => tape.addc(out[k], logit(b[k])),
                        None => out[k],
                    };
                    rgb[k] = tape.sigmoid(pre);
                }
                rgb
            }
        }
    }
}

#[derive(Default)]
pub struct FieldScratch {
    feats: Vec<f64>,
    eval: crate::net::EvalScratch,
    out: Vec<f64>,
}

// --- rays and quadrature -----------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Ray> {
        if (dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        if !(t_near < t_far) {
            return Err(Error::invalid("ray needs t_near < t_far"));
        }
        Ok(Ray {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Discrete volume-rendering quadrature along one ray.
#[derive(Debug, Clone)]
pub struct QuadratureWeights {
    pub samples: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl QuadratureWeights {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the heaviest sample, ties to the lower index.
    pub fn argmax_weight(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if best.map_or(true, |(_, bw)| w > bw) {
                best = Some((i, w));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Deterministic midpoint-stratified samples of [lo, hi].
fn midpoint_samples(lo: f64, hi: f64, n: usize, out: &mut Vec<f64>) {
    out.clear();
    let step = (hi - lo) / n as f64;
    for i in 0..n {
        out.push(lo + (i as f64 + 0.5) * step);
    }
}

/// Density-to-weight conversion along a ray (logistic-CDF opacity).
///
/// Samples are midpoint-stratified over the intersection of [t_near, t_far]
/// with the field bbox; a ray missing the bbox yields all-zero weights.
/// Opacity alpha_i = max(0, (Phi(sigma_i) - Phi(sigma_{i+1})) / Phi(sigma_i))
/// with Phi the logistic CDF at sharpness [`S_LOGISTIC`]; weights are
/// transmittance-composited and sum to at most 1.
pub fn ray_weights(field: &Field, ray: &Ray, n_samples: usize) -> QuadratureWeights {
    ray_weights_mapped(field, ray, n_samples, &|p| p)
}

/// [`ray_weights`] with every sample position passed through `map` before the
/// density query. The identity map reproduces `ray_weights` bit for bit; a
/// warp's inverse map renders the field in deformed coordinates.
pub(crate) fn ray_weights_mapped<F: Fn(Vec3) -> Vec3>(
    field: &Field,
    ray: &Ray,
    n_samples: usize,
    map: &F,
) -> QuadratureWeights {
    assert!(n_samples >= 2, "need at least 2 samples");
    let segment = field
        .bbox
        .ray_interval(ray.origin, ray.dir)
        .map(|(a, b)| (a.max(ray.t_near), b.min(ray.t_far)))
        .filter(|(a, b)| a < b);

    let mut q = QuadratureWeights {
        samples: Vec::with_capacity(n_samples),
        weights: Vec::with_capacity(n_samples),
        transmittance: Vec::with_capacity(n_samples),
    };
    let Some((lo, hi)) = segment else {
        midpoint_samples(ray.t_near, ray.t_far, n_samples, &mut q.samples);
        q.weights.resize(n_samples, 0.0);
        q.transmittance.resize(n_samples, 1.0);
        return q;
    };

    midpoint_samples(lo, hi, n_samples, &mut q.samples);
    let mut scratch = FieldScratch::default();
    let sigmas: Vec<f64> = q
        .samples
        .iter()
        .map(|&t| field.sigma_with_scratch(map(ray.at(t)), &mut scratch))
        .collect();

    let mut t_acc = 1.0f64;
    for i in 0..n_samples {
        q.transmittance.push(t_acc);
        let alpha = if i + 1 < n_samples {
            let phi_i = logistic(S_LOGISTIC * sigmas[i]);
            let phi_n = logistic(S_LOGISTIC * sigmas[i + 1]);
            if phi_i > 0.0 {
                ((phi_i - phi_n) / phi_i).max(0.0)
            } else {
                0.0
            }
        } else {
            0.0
        };
        q.weights.push(t_acc * alpha);
        t_acc *= 1.0 - alpha;
    }
    q
}

/// Volume-rendered color along a ray: sum of w_i * c(r(t_i), d), plus the
/// background composited with the residual transmittance.
pub fn render_ray(field: &Field, ray: &Ray, n_samples: usize, background: [f64; 3]) -> [f64; 3] {
    render_ray_mapped(field, ray, n_samples, background, &|p| p)
}

/// [`render_ray`] with every sample position passed through `map` before the
/// density and radiance queries (view direction stays the ray direction).
/// The identity map reproduces `render_ray` bit for bit.
pub(crate) fn render_ray_mapped<F: Fn(Vec3) -> Vec3>(
    field: &Field,
    ray: &Ray,
    n_samples: usize,
    background: [f64; 3],
    map: &F,
) -> [f64; 3] {
    let q = ray_weights_mapped(field, ray, n_samples, map);
    let mut rgb = [0.0f64; 3];
    let mut wsum = 0.0;
    for (i, &w) in q.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        wsum += w;
        let c = field.radiance(map(ray.at(q.samples[i])), ray.dir);
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
    }
    let resid = 1.0 - wsum;
    for k in 0..3 {
        rgb[k] += resid * background[k];
    }
    rgb
}

/// Normalized surface color along a ray: the quadrature-weighted average of
/// the radiance, sum(w_i c_i) / sum(w_i). This is the form used for vertex
/// colors, where no background exists: a constant radiance comes back exactly,
/// however grazing the ray. A ray with no weight mass returns black.
pub fn integrate_ray_radiance(field: &Field, ray: &Ray, n_samples: usize) -> [f64; 3] {
    let q = ray_weights(field, ray, n_samples);
    let total = q.weight_sum();
    let mut rgb = [0.0f64; 3];
    if total <= 0.0 {
        return rgb;
    }
    let inv = 1.0 / total;
    for (i, &w) in q.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let nw = w * inv;
        let c = field.radiance(ray.at(q.samples[i]), ray.dir);
        for k in 0..3 {
            rgb[k] += nw * c[k];
        }
    }
    rgb
}

// --- field checkpoints -------------------------------------------------------

/// Encode a density + radiance net pair as a checkpoint byte image:
/// magic "TFG1", then two self-describing net blocks.
pub fn encode_field_checkpoint(density: &MlpNet, radiance: &MlpNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    encode_block(density, &mut out);
    encode_block(radiance, &mut out);
    out
}

/// Decode a checkpoint byte image into (density net, radiance net).
/// Activations are assigned by role: hidden softplus, linear outputs (the
/// radiance sigmoid is applied at the field level).
pub fn decode_field_checkpoint(bytes: &[u8]) -> Result<(MlpNet, MlpNet)> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(String::from(
            "bad magic: not a TFG1 checkpoint",
        )));
    }
    let mut off = 4;
    let density = decode_block(bytes, &mut off, Activation::Softplus, Activation::Linear)?;
    let radiance = decode_block(bytes, &mut off, Activation::Softplus, Activation::Linear)?;
    if off != bytes.len() {
        return Err(Error::CheckpointFormat(String::from(
            "trailing bytes after radiance block",
        )));
    }
    Ok((density, radiance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec3::vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere_field() -> Field {
        Field::analytic(
            Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5)),
            AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap(),
            AnalyticRadiance::Constant([1.0, 0.0, 0.0]),
        )
    }

    #[test]
    fn sphere_sdf_center_and_outside_values() {
        let f = unit_sphere_field();
        assert_eq!(f.sigma(Vec3::ZERO), -1.0);
        assert_eq!(f.sigma(vec3(2.0, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn non_positive_radius_is_rejected() {
        assert!(AnalyticSdf::sphere(Vec3::ZERO, 0.0).is_err());
        assert!(AnalyticSdf::sphere(Vec3::ZERO, -1.0).is_err());
        assert!(AnalyticSdf::torus(Vec3::ZERO, 1.0, 1.5).is_err());
    }

    #[test]
    fn union_equals_min_of_members_at_random_points() {
        let a = AnalyticSdf::sphere(vec3(-0.4, 0.0, 0.0), 0.7).unwrap();
        let b = AnalyticSdf::boxsdf(vec3(0.5, 0.1, -0.2), vec3(0.4, 0.3, 0.6)).unwrap();
        let u = AnalyticSdf::Union(Box::new(a.clone()), Box::new(b.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = vec3(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            // Oracle: evaluate each member independently and take the min.
            let expect = a.eval(p).min(b.eval(p));
            assert_eq!(u.eval(p), expect);
        }
    }

    #[test]
    fn exact_sdfs_have_unit_gradient_away_from_medial_axis() {
        let shapes = [
            AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap(),
            AnalyticSdf::boxsdf(Vec3::ZERO, vec3(0.6, 0.8, 0.5)).unwrap(),
            AnalyticSdf::torus(Vec3::ZERO, 0.8, 0.25).unwrap(),
            AnalyticSdf::plane(vec3(0.0, 0.0, 1.0), 0.1).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &shapes {
            let mut checked = 0;
            while checked < 50 {
                let p = vec3(
                    rng.random_range(-1.4..1.4),
                    rng.random_range(-1.4..1.4),
                    rng.random_range(-1.4..1.4),
                );
                // Keep points near the surface and away from the medial axis
                // (centers/planes of symmetry), where SDFs are non-smooth.
                let d = s.eval(p);
                if d.abs() > 0.35 {
                    continue;
                }
                let g = crate::tape::spatial_gradient(|q| s.eval(q), p, 1e-5);
                assert!(
                    (g.norm() - 1.0).abs() < 5e-3,
                    "gradient norm {} at {:?}",
                    g.norm(),
                    p
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn ray_through_empty_space_is_transparent() {
        let f = unit_sphere_field();
        let ray = Ray::new(vec3(-3.0, 1.4, 0.0), vec3(1.0, 0.0, 0.0), 0.0, 8.0).unwrap();
        let q = ray_weights(&f, &ray, 64);
        assert!(q.weight_sum() < 1e-3, "sum = {}", q.weight_sum());
    }

    #[test]
    fn head_on_sphere_hit_peaks_at_analytic_distance() {
        let f = unit_sphere_field();
        let ray = Ray::new(vec3(0.0, 0.0, 3.0), vec3(0.0, 0.0, -1.0), 0.0, 6.0).unwrap();
        let n = 64;
        let q = ray_weights(&f, &ray, n);
        let peak_t = q.samples[q.argmax_weight().unwrap()];
        // Analytic hit: |o| - r = 2. One sample spacing over the bbox span.
        let spacing = q.samples[1] - q.samples[0];
        assert!(
            (peak_t - 2.0).abs() <= spacing,
            "peak at {peak_t}, spacing {spacing}"
        );
    }

    #[test]
    fn weight_mass_self_converges_when_doubling_samples() {
        let f = unit_sphere_field();
        let ray = Ray::new(vec3(0.4, -0.2, 3.0), vec3(0.0, 0.0, -1.0), 0.0, 6.0).unwrap();
        let w64 = ray_weights(&f, &ray, 64).weight_sum();
        let w128 = ray_weights(&f, &ray, 128).weight_sum();
        assert!((w64 - w128).abs() < 1e-2, "w64={w64} w128={w128}");
    }

    #[test]
    fn weights_nonnegative_and_sum_bounded_over_random_rays() {
        let f = unit_sphere_field();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let o = vec3(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                3.0,
            );
            let target = vec3(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            let dir = (target - o).normalized();
            let ray = Ray::new(o, dir, 0.0, 10.0).unwrap();
            let q = ray_weights(&f, &ray, 48);
            assert!(q.weights.iter().all(|&w| w >= 0.0));
            let s = q.weight_sum();
            assert!((0.0..=1.0 + 1e-6).contains(&s), "sum {s}");
        }
    }

    #[test]
    fn ray_missing_bbox_has_all_zero_weights() {
        let f = unit_sphere_field();
        let ray = Ray::new(vec3(0.0, 5.0, 3.0), vec3(1.0, 0.0, 0.0), 0.0, 10.0).unwrap();
        let q = ray_weights(&f, &ray, 16);
        assert_eq!(q.samples.len(), 16);
        assert!(q.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn constant_red_sphere_renders_red() {
        let f = unit_sphere_field();
        let ray = Ray::new(vec3(0.0, 0.0, 3.0), vec3(0.0, 0.0, -1.0), 0.0, 6.0).unwrap();
        let c = render_ray(&f, &ray, 64, [0.0; 3]);
        assert!((c[0] - 1.0).abs() < 1e-2, "r = {}", c[0]);
        assert!(c[1].abs() < 1e-2 && c[2].abs() < 1e-2);
    }

    #[test]
    fn missing_ray_returns_background_exactly() {
        let f = unit_sphere_field();
        let bg = [0.125, 0.25, 0.5];
        let ray = Ray::new(vec3(0.0, 5.0, 3.0), vec3(1.0, 0.0, 0.0), 0.0, 10.0).unwrap();
        assert_eq!(render_ray(&f, &ray, 32, bg), bg);
    }

    #[test]
    fn checkered_sphere_matches_oversampled_quadrature() {
        let f = Field::analytic(
            Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5)),
            AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap(),
            AnalyticRadiance::Checker {
                cell: 0.4,
                a: [0.9, 0.1, 0.1],
                b: [0.1, 0.2, 0.9],
            },
        );
        // Pixel rays of a coarse camera grid looking down -z. The integrand is
        // discontinuous (checker), so the sample count must resolve the
        // logistic weight band; 512 gives ~20 samples across it.
        let o = vec3(0.0, 0.0, 3.0);
        for iy in 0..5 {
            for ix in 0..5 {
                let px = -0.6 + 0.3 * ix as f64;
                let py = -0.6 + 0.3 * iy as f64;
                let dir = (vec3(px, py, 0.8) - o).normalized();
                let ray = Ray::new(o, dir, 0.0, 8.0).unwrap();
                let c = render_ray(&f, &ray, 512, [0.0; 3]);
                let dense = render_ray(&f, &ray, 5120, [0.0; 3]);
                for k in 0..3 {
                    assert!(
                        (c[k] - dense[k]).abs() < 2e-2,
                        "pixel ({ix},{iy}) channel {k}: {} vs dense {}",
                        c[k],
                        dense[k]
                    );
                }
            }
        }
    }

    #[test]
    fn render_is_linear_in_radiance_for_frozen_sigma() {
        let bbox = Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5));
        let sdf = AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap();
        let c1 = [0.8, 0.1, 0.3];
        let c2 = [0.2, 0.7, 0.5];
        let (a, b) = (0.6, 0.4);
        let mix = [
            a * c1[0] + b * c2[0],
            a * c1[1] + b * c2[1],
            a * c1[2] + b * c2[2],
        ];
        let mk = |c: [f64; 3]| Field::analytic(bbox, sdf.clone(), AnalyticRadiance::Constant(c));
        let ray = Ray::new(vec3(0.2, 0.1, 3.0), vec3(0.0, 0.0, -1.0), 0.0, 6.0).unwrap();
        let r1 = render_ray(&mk(c1), &ray, 64, [0.0; 3]);
        let r2 = render_ray(&mk(c2), &ray, 64, [0.0; 3]);
        let rm = render_ray(&mk(mix), &ray, 64, [0.0; 3]);
        for k in 0..3 {
            assert!((rm[k] - (a * r1[k] + b * r2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_field_reproduces_its_analytic_base() {
        let bbox = Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = AnalyticSdf::sphere(Vec3::ZERO, 1.0).unwrap();
        let ns = NeuralSigma::residual(bbox, Some(base.clone()), &[16, 16], 4, &mut rng);
        let f = Field::new(
            bbox,
            SigmaModel::Neural(ns),
            RadianceModel::Analytic(AnalyticRadiance::Constant([0.5; 3])),
        );
        for p in [vec3(0.3, -0.7, 0.2), vec3(1.2, 1.2, -1.2), Vec3::ZERO] {
            assert_eq!(f.sigma(p), base.eval(p), "residual must start at base");
        }
    }

    #[test]
    fn neural_radiance_stays_in_unit_interval() {
        let bbox = Aabb::new(vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut nr = NeuralRadiance::residual(
            bbox,
            Some(AnalyticRadiance::Checker {
                cell: 0.3,
                a: [0.9, 0.2, 0.1],
                b: [0.1, 0.8, 0.9],
            }),
            &[8],
            2,
            &mut rng,
        );
        // Crank the output layer to extreme values to stress the bounds.
        for w in nr.net.layers.last_mut().unwrap().w.iter_mut() {
            *w = 37.0;
        }
        let f = Field::new(
            bbox,
            SigmaModel::Analytic(AnalyticSdf::sphere(Vec3::ZERO, 0.5).unwrap()),
            RadianceModel::Neural(nr),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let p = vec3(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let d = vec3(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized();
            let c = f.radiance(p, d);
            for k in 0..3 {
                assert!((0.0..=1.0).contains(&c[k]));
            }
        }
    }

    #[test]
    fn mlp_sigma_is_finite_across_the_inflated_bbox() {
        let bbox = Aabb::new(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut ns = NeuralSigma::residual(bbox, None, &[16, 16], 6, &mut rng);
        // Non-zero output layer: a live random net.
        for w in ns.net.layers.last_mut().unwrap().w.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let f = Field::new(
            bbox,
            SigmaModel::Neural(ns),
            RadianceModel::Analytic(AnalyticRadiance::Constant([0.5; 3])),
        );
        let inflated = bbox.inflated(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let p = vec3(
                rng.random_range(inflated.min.x..inflated.max.x),
                rng.random_range(inflated.min.y..inflated.max.y),
                rng.random_range(inflated.min.z..inflated.max.z),
            );
            assert!(f.sigma(p).is_finite());
        }
    }

    #[test]
    fn field_checkpoint_round_trips_both_nets_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let density = MlpNet::new(
            &[39, 32, 32, 1],
            Activation::Softplus,
            Activation::Linear,
            &mut rng,
        );
        let radiance = MlpNet::new(
            &[42, 32, 3],
            Activation::Softplus,
            Activation::Linear,
            &mut rng,
        );
        let bytes = encode_field_checkpoint(&density, &radiance);
        assert_eq!(&bytes[..4], b"TFG1");
        let (d2, r2) = decode_field_checkpoint(&bytes).unwrap();
        assert_eq!(density.params_flat(), d2.params_flat());
        assert_eq!(radiance.params_flat(), r2.params_flat());
        assert!(decode_field_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_field_checkpoint(b"NOPE").is_err());
    }

    #[test]
    fn sigma_eval_counter_counts_evaluations() {
        let f = unit_sphere_field();
        f.reset_sigma_eval_count();
        for i in 0..17 {
            f.sigma(vec3(i as f64 * 0.1, 0.0, 0.0));
        }
        assert_eq!(f.sigma_eval_count(), 17);
    }
}
