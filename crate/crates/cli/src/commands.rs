//! The five pipeline commands. Each returns the machine-readable summary
//! printed on stdout; progress and notes go to stderr as `key=value` lines.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tetraforge_core::color::{default_rig, extract_colors, ColoredMesh};
use tetraforge_core::edit::{
    optimize_color, optimize_geometry, ColorConfig, EditKind, EditTask, GeomConfig,
};
use tetraforge_core::field::Field;
use tetraforge_core::grid::{build_grid, split_tets};
use tetraforge_core::march::{march_grid, Mesh};
use tetraforge_core::octree::{build_octree, extract_octree_mesh, seed_root_cube};
use tetraforge_core::render::{
    build_warp, linear_to_srgb_u8, render_image, render_warped, Image,
};

use crate::config::{Config, ExtractMethod};
use crate::fail::{io_fail, CliResult, Fail};
use crate::meshio::{read_mesh, write_obj};
use crate::scene::{build_field, write_checkpoint};

/// March the configured field: on a regular lattice of `grid.n` cells, or on
/// an octree seeded by the vertices of a coarse bootstrap extraction.
fn extract_mesh(field: &Field, cfg: &Config) -> CliResult<Mesh> {
    let full = |n: usize| -> CliResult<Mesh> {
        let grid = build_grid(field, n)?;
        let tets = split_tets(&grid);
        Ok(march_grid(&grid, &tets, cfg.geometry.iso))
    };
    match cfg.extract.method {
        ExtractMethod::Grid => full(cfg.grid.n),
        ExtractMethod::Octree => {
            let coarse = full(cfg.extract.seed_n)?;
            if coarse.is_empty() {
                return Ok(coarse);
            }
            let root = seed_root_cube(&coarse.positions)?;
            let octree = build_octree(&coarse.positions, cfg.octree.k, cfg.octree.l_max, root)?;
            Ok(extract_octree_mesh(field, &octree, cfg.geometry.iso))
        }
    }
}

fn plain_colored(mesh: Mesh) -> ColoredMesh {
    let n = mesh.positions.len();
    ColoredMesh {
        colors: vec![[0.5; 3]; n],
        visibility: vec![1; n],
        edited_mask: vec![false; n],
        mesh,
    }
}

fn same_geometry(a: &Mesh, b: &Mesh) -> bool {
    a.positions == b.positions && a.faces == b.faces
}

fn geom_config(cfg: &Config) -> GeomConfig {
    GeomConfig {
        levels: cfg.octree.levels.clone(),
        steps_per_level: cfg.geometry.steps_per_level,
        lr: cfg.geometry.lr,
        w_chamfer: cfg.geometry.w_chamfer,
        w_eikonal: cfg.geometry.w_eikonal,
        samples_per_mesh: cfg.geometry.samples,
        octree_k: cfg.octree.k,
        iso: cfg.geometry.iso,
        eikonal_grad_samples: cfg.geometry.eikonal_grad_samples,
        seed: cfg.seed,
    }
}

fn color_config(cfg: &Config) -> ColorConfig {
    ColorConfig {
        steps: cfg.color.steps,
        lr: cfg.color.lr,
        w_color: cfg.color.w_color,
        oversample_frac: cfg.color.oversample_frac,
        n_aug_cameras: cfg.color.n_aug_cameras,
        batch: cfg.color.batch,
        n_ray_samples: cfg.color.n_ray_samples,
        keep_mass: cfg.color.keep_mass,
        seed: cfg.seed,
    }
}

pub fn cmd_extract(cfg: &Config, out: &Path) -> CliResult<Value> {
    let field = build_field(cfg, None)?;
    let mesh = extract_mesh(&field, cfg)?;
    if mesh.is_empty() {
        eprintln!("warning: empty mesh (the field has no iso-surface crossings)");
    }
    write_obj(out, &mesh, None)?;
    eprintln!("vertices={} faces={}", mesh.positions.len(), mesh.faces.len());
    Ok(json!({
        "command": "extract",
        "vertices": mesh.positions.len(),
        "faces": mesh.faces.len(),
        "empty": mesh.is_empty(),
        "out": out.display().to_string(),
    }))
}

/// Bake per-vertex colors under the `colorize` settings. Shared by the
/// colorize command and by edit-color's source, so a colorized OBJ fed back
/// unchanged compares bitwise equal and is detected as a no-op.
fn baked_colors(field: &Field, mesh: &Mesh, cfg: &Config) -> CliResult<ColoredMesh> {
    let rig = default_rig(&field.bbox);
    if cfg.colorize.n_cameras == 0 {
        return Err(Fail::usage("colorize.n_cameras must be at least 1"));
    }
    if cfg.colorize.n_cameras > rig.len() {
        return Err(Fail::usage(format!(
            "colorize.n_cameras exceeds the {}-camera rig",
            rig.len()
        )));
    }
    let cams = &rig[..cfg.colorize.n_cameras];
    Ok(extract_colors(field, mesh, cams, cfg.colorize.n_samples)?)
}

pub fn cmd_colorize(cfg: &Config, mesh_path: &Path, out: &Path) -> CliResult<Value> {
    let field = build_field(cfg, None)?;
    let parsed = read_mesh(mesh_path)?;
    let colored = baked_colors(&field, &parsed.mesh, cfg)?;
    write_obj(out, &colored.mesh, Some(&colored.colors))?;

    let visible = colored.visibility.iter().filter(|&&v| v > 0).count();
    let fallback = colored.visibility.len() - visible;
    let max_vis = colored.visibility.iter().copied().max().unwrap_or(0);
    let histogram: Vec<[u64; 2]> = (0..=max_vis)
        .filter_map(|v| {
            let n = colored.visibility.iter().filter(|&&x| x == v).count();
            (n > 0).then_some([v as u64, n as u64])
        })
        .collect();
    let stats = json!({
        "vertices": colored.visibility.len(),
        "visible": visible,
        "fallback_filled": fallback,
        "visibility_histogram": histogram,
    });
    let mut stats_path = OsString::from(out.as_os_str());
    stats_path.push(".stats.json");
    let stats_path = PathBuf::from(stats_path);
    fs::write(&stats_path, format!("{stats}\n"))
        .map_err(|e| io_fail("write stats", &stats_path, e))?;
    eprintln!("vertices={} visible={visible} fallback={fallback}", colored.visibility.len());
    Ok(json!({
        "command": "colorize",
        "vertices": colored.visibility.len(),
        "visible": visible,
        "fallback_filled": fallback,
        "out": out.display().to_string(),
        "stats": stats_path.display().to_string(),
    }))
}

pub fn cmd_edit_geom(
    cfg: &Config,
    target_path: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> CliResult<Value> {
    let mut field = build_field(cfg, ckpt)?;
    if !field.sigma_trainable() {
        return Err(Fail::usage(
            "geometry edits retrain density weights; scene.mode must be \"neural\"",
        ));
    }
    let source = extract_mesh(&field, cfg)?;
    let target = read_mesh(target_path)?;
    if same_geometry(&source, &target.mesh) {
        eprintln!("note: no-op edit (target equals the extracted source); weights unchanged");
        write_checkpoint(&field, out)?;
        return Ok(json!({
            "command": "edit-geom",
            "no_op": true,
            "out": out.display().to_string(),
        }));
    }
    let task = EditTask::new(
        EditKind::Deform,
        plain_colored(source),
        target.into_colored(),
    )?;
    let report = optimize_geometry(&mut field, &task, &geom_config(cfg), |p| {
        eprintln!(
            "level={} step={} chamfer={:.6e} eikonal={:.6e} total={:.6e}",
            p.level, p.step, p.chamfer, p.eikonal, p.total
        );
    })?;
    write_checkpoint(&field, out)?;
    Ok(json!({
        "command": "edit-geom",
        "no_op": false,
        "initial_chamfer": report.initial_chamfer,
        "final_chamfer": report.final_chamfer,
        "steps_run": report.steps_run,
        "empty_steps": report.empty_steps,
        "out": out.display().to_string(),
    }))
}

pub fn cmd_edit_color(
    cfg: &Config,
    target_path: &Path,
    ckpt: Option<&Path>,
    out: &Path,
) -> CliResult<Value> {
    let mut field = build_field(cfg, ckpt)?;
    if !field.radiance_trainable() {
        return Err(Fail::usage(
            "color edits retrain radiance weights; scene.mode must be \"neural\"",
        ));
    }
    let mesh = extract_mesh(&field, cfg)?;
    let source = baked_colors(&field, &mesh, cfg)?;
    let target = read_mesh(target_path)?;
    if !target.has_colors() {
        return Err(Fail::usage(
            "color edit target carries no vertex colors (need `v x y z r g b` lines)",
        ));
    }
    let target_colors = target.colors.clone().expect("checked");
    if same_geometry(&source.mesh, &target.mesh) && source.colors == target_colors {
        eprintln!("note: no-op edit (target colors equal the extracted ones); weights unchanged");
        write_checkpoint(&field, out)?;
        return Ok(json!({
            "command": "edit-color",
            "no_op": true,
            "out": out.display().to_string(),
        }));
    }
    let task = EditTask::new(EditKind::Recolor, source, target.into_colored())?;
    let report = optimize_color(&mut field, &task, &color_config(cfg), |p| {
        eprintln!(
            "step={} loss={:.6e} visible={} edited={}",
            p.step, p.loss, p.batch_visible, p.batch_edited
        );
    })?;
    write_checkpoint(&field, out)?;
    Ok(json!({
        "command": "edit-color",
        "no_op": false,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "steps_run": report.steps_run,
        "cameras_used": report.cameras_used,
        "edited_fraction": report.edited_fraction,
        "uniform_fallback": report.uniform_fallback,
        "out": out.display().to_string(),
    }))
}

pub fn cmd_render(
    cfg: &Config,
    ckpt: Option<&Path>,
    warp: Option<(&Path, &Path)>,
    out: &Path,
) -> CliResult<Value> {
    let field = build_field(cfg, ckpt)?;
    let camera = cfg.render.camera.build(cfg.render.resolution)?;
    let img = match warp {
        None => render_image(&field, &camera, cfg.render.n_samples, cfg.render.background)?,
        Some((src, tgt)) => {
            let source = read_mesh(src)?.mesh;
            let target = read_mesh(tgt)?.mesh;
            let warp = build_warp(&source, &target)?;
            render_warped(
                &field,
                &warp,
                &camera,
                cfg.render.n_samples,
                cfg.render.background,
            )?
        }
    };
    write_png(out, &img)?;
    eprintln!("width={} height={}", img.width, img.height);
    Ok(json!({
        "command": "render",
        "width": img.width,
        "height": img.height,
        "warped": warp.is_some(),
        "out": out.display().to_string(),
    }))
}

fn write_png(path: &Path, img: &Image) -> CliResult<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() * 3);
    for p in &img.pixels {
        for &c in p {
            buf.push(linear_to_srgb_u8(c));
        }
    }
    image::save_buffer(
        path,
        &buf,
        img.width,
        img.height,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Fail::usage(format!("cannot write png {}: {e}", path.display())))
}
