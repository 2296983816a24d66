//! Field assembly from the configured scene, plus checkpoint persistence.
//! A neural scene is an MLP residual pair on top of the configured analytic
//! base shapes; fresh nets have a zeroed output layer, so an un-edited neural
//! field reproduces its base exactly. Checkpoints carry only the net weights;
//! the surrounding structure (bbox, bases, encoding) always comes from the
//! config, and a weight file that does not fit that structure is rejected.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tetraforge_core::field::{
    decode_field_checkpoint, encode_field_checkpoint, Field, NeuralRadiance, NeuralSigma,
    RadianceModel, SigmaModel,
};
use tetraforge_core::net::MlpNet;

use crate::config::{Config, SceneMode};
use crate::fail::{io_fail, CliResult, Fail};

/// Distinct stream for net initialization so it never collides with the
/// optimizers' sampling streams.
const NET_INIT_SALT: u64 = 0x6E65_745F_696E_6974;

/// Build the field described by the config. `ckpt_override` (the command's
/// `--ckpt`) takes precedence over `scene.checkpoint`.
pub fn build_field(cfg: &Config, ckpt_override: Option<&Path>) -> CliResult<Field> {
    let bbox = cfg.bbox.build()?;
    let scene = &cfg.scene;
    match scene.mode {
        SceneMode::Analytic => {
            if ckpt_override.is_some() {
                return Err(Fail::usage(
                    "an analytic scene has no weights; --ckpt requires scene.mode = \"neural\"",
                ));
            }
            Ok(Field::analytic(bbox, scene.sdf.build()?, scene.radiance.build()))
        }
        SceneMode::Neural => {
            if scene.hidden.is_empty() {
                return Err(Fail::usage("scene.hidden needs at least one layer width"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NET_INIT_SALT);
            let mut sigma = NeuralSigma::residual(
                bbox,
                Some(scene.sdf.build()?),
                &scene.hidden,
                scene.octaves,
                &mut rng,
            );
            let mut radiance = NeuralRadiance::residual(
                bbox,
                Some(scene.radiance.build()),
                &scene.hidden,
                scene.octaves,
                &mut rng,
            );
            let ckpt_path = ckpt_override
                .map(|p| p.to_path_buf())
                .or_else(|| scene.checkpoint.as_ref().map(Into::into));
            if let Some(path) = ckpt_path {
                let bytes = fs::read(&path).map_err(|e| io_fail("read checkpoint", &path, e))?;
                let (dnet, rnet) = decode_field_checkpoint(&bytes)
                    .map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?;
                check_compatible("density", &dnet, &sigma.net, &path)?;
                check_compatible("radiance", &rnet, &radiance.net, &path)?;
                sigma.net = dnet;
                radiance.net = rnet;
            }
            Ok(Field::new(
                bbox,
                SigmaModel::Neural(sigma),
                RadianceModel::Neural(radiance),
            ))
        }
    }
}

fn check_compatible(which: &str, got: &MlpNet, want: &MlpNet, path: &Path) -> CliResult<()> {
    if got.in_dim() != want.in_dim()
        || got.out_dim() != want.out_dim()
        || got.param_count() != want.param_count()
    {
        return Err(Fail::usage(format!(
            "{}: {which} net ({} -> {}, {} params) does not fit the configured scene \
             ({} -> {}, {} params); check hidden/octaves",
            path.display(),
            got.in_dim(),
            got.out_dim(),
            got.param_count(),
            want.in_dim(),
            want.out_dim(),
            want.param_count(),
        )));
    }
    Ok(())
}

/// Serialize the field's nets. Only neural fields have weights to save.
pub fn write_checkpoint(field: &Field, path: &Path) -> CliResult<()> {
    let (d, r) = match (&field.sigma_model, &field.radiance_model) {
        (SigmaModel::Neural(s), RadianceModel::Neural(r)) => (&s.net, &r.net),
        _ => {
            return Err(Fail::usage(
                "field has no trainable weights to checkpoint",
            ))
        }
    };
    fs::write(path, encode_field_checkpoint(d, r)).map_err(|e| io_fail("write checkpoint", path, e))
}
