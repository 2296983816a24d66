//! Image synthesis from a field, plus warp fields that render an edited
//! (deformed) surface without retraining: the deformation is carried by
//! per-vertex translations of a source mesh onto a same-topology target,
//! and samples are pulled back through the approximate inverse warp before
//! every field query.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::color::Camera;
use crate::error::Error;
use crate::field::{render_ray_mapped, Field};
use crate::Result;
use crate::kdtree::KdTree;
use crate::march::Mesh;
use crate::vec3::{Aabb, Vec3};

/// Number of source vertices blended per warp query.
const WARP_NEIGHBORS: usize = 8;
/// Squared distance under which a query point is treated as sitting exactly
/// on a source vertex and takes that vertex's translation verbatim.
const EXACT_HIT_D2: f64 = 1e-24;
/// The warp is clamped to zero beyond this fraction of the source bbox
/// diagonal away from the nearest surface vertex.
const WARP_CUTOFF_FRAC: f64 = 0.1;

// --- images --------------------------------------------------------------

/// Row-major RGB image with the origin at the top-left pixel. Components are
/// linear-light values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    /// Black image of the given size.
    pub fn new(width: u32, height: u32) -> Image {
        Image {
            width,
            height,
            pixels: alloc::vec![[0.0; 3]; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize) * (self.width as usize) + (x as usize)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[self.offset(x, y)]
    }
}

/// Linear-light component to an 8-bit sRGB-encoded byte (IEC 61966-2-1
/// transfer curve, rounded to nearest).
pub fn linear_to_srgb_u8(v: f64) -> u8 {
    let v = if v < 0.0 {
        0.0
    } else if v > 1.0 {
        1.0
    } else {
        v
    };
    let s = if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * libm::pow(v, 1.0 / 2.4) - 0.055
    };
    (s * 255.0 + 0.5) as u8
}

/// Volume-render the field through a pinhole camera: one [`render_ray`]
/// (`crate::field::render_ray`) per pixel, composited over `background`.
/// Components are clamped into [0, 1] after compositing.
pub fn render_image(
    field: &Field,
    camera: &Camera,
    n_samples: usize,
    background: [f64; 3],
) -> Result<Image> {
    render_mapped(field, camera, n_samples, background, &|p| p)
}

/// [`render_image`] of the warped field: every quadrature sample position is
/// pulled back through the warp's approximate inverse before the density and
/// radiance queries, so the image shows the deformed (target) configuration.
/// An identity warp reproduces [`render_image`] bit for bit.
pub fn render_warped(
    field: &Field,
    warp: &WarpField,
    camera: &Camera,
    n_samples: usize,
    background: [f64; 3],
) -> Result<Image> {
    render_mapped(field, camera, n_samples, background, &|p| warp.inverse(p))
}

fn render_mapped<F: Fn(Vec3) -> Vec3>(
    field: &Field,
    camera: &Camera,
    n_samples: usize,
    background: [f64; 3],
    map: &F,
) -> Result<Image> {
    let (w, h) = camera.resolution;
    if w == 0 || h == 0 {
        return Err(Error::invalid("camera resolution must be nonzero"));
    }
    if n_samples < 2 {
        return Err(Error::invalid("need at least 2 ray samples"));
    }
    let mut img = Image::new(w, h);
    for py in 0..h {
        for px in 0..w {
            let ray = camera.pixel_ray(px, py)?;
            let c = render_ray_mapped(field, &ray, n_samples, background, map);
            let o = img.offset(px, py);
            for k in 0..3 {
                img.pixels[o][k] = c[k].clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

// --- warp fields ----------------------------------------------------------

/// Displacement field anchored at the vertices of a source mesh, built from a
/// same-topology target: vertex i carries the translation
/// `target[i] - source[i]`. Off-vertex queries blend the
/// [`WARP_NEIGHBORS`] nearest source vertices with inverse-distance weights;
/// queries farther than 10% of the source bbox diagonal from the surface get
/// a zero translation. Zero translations everywhere make both [`forward`]
/// (`WarpField::forward`) and [`inverse`] (`WarpField::inverse`) exact
/// identity maps.
#[derive(Debug, Clone)]
pub struct WarpField {
    translations: Vec<Vec3>,
    kd: KdTree,
    cutoff_d2: f64,
}

/// Build a warp from a source mesh and its deformed target. The meshes must
/// share topology: equal vertex counts and an identical face list.
pub fn build_warp(source: &Mesh, target: &Mesh) -> Result<WarpField> {
    if source.positions.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if source.positions.len() != target.positions.len() {
        return Err(Error::TopologyMismatch(format!(
            "vertex counts differ: source {} vs target {}",
            source.positions.len(),
            target.positions.len()
        )));
    }
    if source.faces != target.faces {
        return Err(Error::TopologyMismatch(String::from(
            "face lists differ",
        )));
    }
    let translations: Vec<Vec3> = source
        .positions
        .iter()
        .zip(&target.positions)
        .map(|(&s, &t)| t - s)
        .collect();
    let bbox = Aabb::from_points(&source.positions).expect("nonempty positions");
    let cutoff = WARP_CUTOFF_FRAC * bbox.diagonal();
    Ok(WarpField {
        translations,
        kd: KdTree::build(&source.positions),
        cutoff_d2: cutoff * cutoff,
    })
}

impl WarpField {
    /// Interpolated translation at `x`: inverse-distance blend of the nearest
    /// source vertices' translations. An exact vertex hit returns that
    /// vertex's translation; a query beyond the cutoff distance from the
    /// surface returns zero.
    pub fn translation(&self, x: Vec3) -> Vec3 {
        let near = self.kd.nearest_k(x, WARP_NEIGHBORS);
        let Some(&(i0, d0)) = near.first() else {
            return Vec3::ZERO;
        };
        if d0 > self.cutoff_d2 {
            return Vec3::ZERO;
        }
        if d0 < EXACT_HIT_D2 {
            return self.translations[i0 as usize];
        }
        let mut acc = Vec3::ZERO;
        let mut wsum = 0.0;
        for &(i, d2) in &near {
            let w = 1.0 / libm::sqrt(d2);
            acc = acc + self.translations[i as usize] * w;
            wsum += w;
        }
        acc * (1.0 / wsum)
    }

    /// Source-to-target map: `x + translation(x)`. Source vertices land on
    /// their target counterparts.
    pub fn forward(&self, x: Vec3) -> Vec3 {
        x + self.translation(x)
    }

    /// Small-deformation approximate inverse: the forward translation queried
    /// at the sample point itself, negated. Used to pull deformed-space
    /// sample positions back into the field's source coordinates.
    pub fn inverse(&self, x: Vec3) -> Vec3 {
        x - self.translation(x)
    }
}
