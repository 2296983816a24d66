//! JSON run configuration. Every field has a default, so `{}` is a valid
//! config; unknown keys are rejected with the offending key named in the
//! error. `schema_version` guards against stale configs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tetraforge_core::color::Camera;
use tetraforge_core::field::{AnalyticRadiance, AnalyticSdf};
use tetraforge_core::vec3::{Aabb, Vec3};

use crate::fail::{io_fail, CliResult, Fail};

pub const SCHEMA_VERSION: u32 = 1;

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::from_array(a)
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub bbox: BboxConfig,
    pub scene: SceneConfig,
    pub grid: GridConfig,
    pub extract: ExtractConfig,
    pub octree: OctreeConfig,
    pub geometry: GeometryConfig,
    pub color: ColorConfig,
    pub colorize: ColorizeConfig,
    pub render: RenderConfig,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            bbox: BboxConfig::default(),
            scene: SceneConfig::default(),
            grid: GridConfig::default(),
            extract: ExtractConfig::default(),
            octree: OctreeConfig::default(),
            geometry: GeometryConfig::default(),
            color: ColorConfig::default(),
            colorize: ColorizeConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = fs::read_to_string(path).map_err(|e| io_fail("read config", path, e))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Fail::usage(format!("config error in {}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Fail::usage(format!(
                "unsupported schema_version {} in {} (expected {SCHEMA_VERSION})",
                cfg.schema_version,
                path.display()
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct BboxConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for BboxConfig {
    fn default() -> BboxConfig {
        BboxConfig {
            min: [-1.5; 3],
            max: [1.5; 3],
        }
    }
}

impl BboxConfig {
    pub fn build(&self) -> CliResult<Aabb> {
        for k in 0..3 {
            if !(self.min[k] < self.max[k]) {
                return Err(Fail::usage(
                    "bbox.min must be strictly below bbox.max on every axis",
                ));
            }
        }
        Ok(Aabb::new(v3(self.min), v3(self.max)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    /// Fixed analytic density and radiance; nothing trainable.
    Analytic,
    /// MLP residuals on top of the analytic base shapes; editable.
    Neural,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub mode: SceneMode,
    /// Analytic density (analytic mode) or the density net's base (neural).
    pub sdf: SdfSpec,
    /// Analytic radiance (analytic mode) or the radiance net's base (neural).
    pub radiance: RadianceSpec,
    /// Neural mode: initial net weights; fresh seeded nets when absent.
    pub checkpoint: Option<String>,
    /// Neural mode: hidden layer widths.
    pub hidden: Vec<usize>,
    /// Neural mode: positional-encoding octaves.
    pub octaves: usize,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            mode: SceneMode::Analytic,
            sdf: SdfSpec::default(),
            radiance: RadianceSpec::default(),
            checkpoint: None,
            hidden: vec![16, 16],
            octaves: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, tag = "shape", rename_all = "snake_case")]
pub enum SdfSpec {
    Sphere { center: [f64; 3], radius: f64 },
    Plane { normal: [f64; 3], offset: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
    Torus { center: [f64; 3], major: f64, minor: f64 },
}

impl Default for SdfSpec {
    fn default() -> SdfSpec {
        SdfSpec::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }
    }
}

impl SdfSpec {
    pub fn build(&self) -> CliResult<AnalyticSdf> {
        let sdf = match *self {
            SdfSpec::Sphere { center, radius } => AnalyticSdf::sphere(v3(center), radius),
            SdfSpec::Plane { normal, offset } => AnalyticSdf::plane(v3(normal), offset),
            SdfSpec::Box { center, half } => AnalyticSdf::boxsdf(v3(center), v3(half)),
            SdfSpec::Torus {
                center,
                major,
                minor,
            } => AnalyticSdf::torus(v3(center), major, minor),
        };
        sdf.map_err(|e| Fail::usage(format!("scene.sdf: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum RadianceSpec {
    Constant { rgb: [f64; 3] },
    Checker { cell: f64, a: [f64; 3], b: [f64; 3] },
    DirectionMap,
}

impl Default for RadianceSpec {
    fn default() -> RadianceSpec {
        RadianceSpec::Constant { rgb: [0.8; 3] }
    }
}

impl RadianceSpec {
    pub fn build(&self) -> AnalyticRadiance {
        match *self {
            RadianceSpec::Constant { rgb } => AnalyticRadiance::Constant(rgb),
            RadianceSpec::Checker { cell, a, b } => AnalyticRadiance::Checker { cell, a, b },
            RadianceSpec::DirectionMap => AnalyticRadiance::DirectionMap,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Lattice points per axis of the regular marching grid (minimum 2).
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> GridConfig {
        GridConfig { n: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMethod {
    Grid,
    Octree,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub method: ExtractMethod,
    /// Octree method: points per axis of the coarse bootstrap lattice whose
    /// surface vertices seed the octree.
    pub seed_n: usize,
}

impl Default for ExtractConfig {
    fn default() -> ExtractConfig {
        ExtractConfig {
            method: ExtractMethod::Grid,
            seed_n: 16,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OctreeConfig {
    /// Occupancy threshold: a node subdivides while it holds at least this
    /// many seed vertices.
    pub k: usize,
    /// Maximum subdivision depth.
    pub l_max: usize,
    /// Depths visited coarse-to-fine by the geometry edit.
    pub levels: Vec<usize>,
}

impl Default for OctreeConfig {
    fn default() -> OctreeConfig {
        OctreeConfig {
            k: 64,
            l_max: 9,
            levels: vec![7, 8, 9],
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub lr: f64,
    pub w_chamfer: f64,
    pub w_eikonal: f64,
    pub steps_per_level: usize,
    /// Surface samples per mesh per step.
    pub samples: usize,
    pub eikonal_grad_samples: usize,
    /// Iso-level of the extracted surface.
    pub iso: f64,
}

impl Default for GeometryConfig {
    fn default() -> GeometryConfig {
        GeometryConfig {
            lr: 1e-3,
            w_chamfer: 1.0,
            w_eikonal: 1e-4,
            steps_per_level: 300,
            samples: 4096,
            eikonal_grad_samples: 256,
            iso: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorConfig {
    pub lr: f64,
    pub w_color: f64,
    pub oversample_frac: f64,
    pub n_aug_cameras: usize,
    pub steps: usize,
    pub batch: usize,
    pub n_ray_samples: usize,
    pub keep_mass: f64,
}

impl Default for ColorConfig {
    fn default() -> ColorConfig {
        ColorConfig {
            lr: 1e-3,
            w_color: 0.2,
            oversample_frac: 0.25,
            n_aug_cameras: 30,
            steps: 500,
            batch: 1024,
            n_ray_samples: 128,
            keep_mass: 1.0,
        }
    }
}

/// Color-baking settings, used by the colorize command and to rebuild the
/// source colors an edit-color target is compared against.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorizeConfig {
    /// Cameras taken from the front of the 16-camera default rig.
    pub n_cameras: usize,
    /// Quadrature samples per color ray.
    pub n_samples: usize,
}

impl Default for ColorizeConfig {
    fn default() -> ColorizeConfig {
        ColorizeConfig {
            n_cameras: 16,
            n_samples: 64,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub resolution: [u32; 2],
    pub n_samples: usize,
    pub background: [f64; 3],
    pub camera: CameraConfig,
}

impl Default for RenderConfig {
    fn default() -> RenderConfig {
        RenderConfig {
            resolution: [128, 128],
            n_samples: 64,
            background: [0.0; 3],
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub origin: [f64; 3],
    pub look_at: [f64; 3],
    pub fov_deg: f64,
    /// Up vector; chosen off the view axis automatically when absent.
    pub up: Option<[f64; 3]>,
}

impl Default for CameraConfig {
    fn default() -> CameraConfig {
        CameraConfig {
            origin: [0.0, 0.0, 8.0],
            look_at: [0.0; 3],
            fov_deg: 45.0,
            up: None,
        }
    }
}

impl CameraConfig {
    pub fn build(&self, resolution: [u32; 2]) -> CliResult<Camera> {
        let origin = v3(self.origin);
        let look_at = v3(self.look_at);
        if (look_at - origin).norm2() <= 0.0 {
            return Err(Fail::usage("render.camera origin and look_at coincide"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Fail::usage("render.camera fov_deg must lie in (0, 180)"));
        }
        let mut cam = Camera::looking_at(origin, look_at);
        cam.fov_deg = self.fov_deg;
        cam.resolution = (resolution[0], resolution[1]);
        if let Some(up) = self.up {
            cam.up = v3(up);
        }
        Ok(cam)
    }
}
