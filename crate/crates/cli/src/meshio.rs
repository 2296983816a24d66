//! Mesh persistence: OBJ read/write with the 6-number vertex-color extension
//! (`v x y z r g b`), plus ascii PLY import for meshes coming back from
//! external editors. Floats are written in shortest round-trip form, so a
//! write/parse cycle reproduces coordinates bit for bit and identical meshes
//! produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tetraforge_core::color::ColoredMesh;
use tetraforge_core::march::Mesh;
use tetraforge_core::vec3::vec3;

use crate::fail::{io_fail, CliResult, Fail};

#[derive(Debug, Clone)]
pub struct ParsedMesh {
    pub mesh: Mesh,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl ParsedMesh {
    pub fn has_colors(&self) -> bool {
        self.colors.is_some()
    }

    /// Promote to the edit pipeline's colored form; colorless meshes get
    /// mid-gray, full visibility, and a clear edited mask.
    pub fn into_colored(self) -> ColoredMesh {
        let n = self.mesh.positions.len();
        ColoredMesh {
            colors: self.colors.unwrap_or_else(|| vec![[0.5; 3]; n]),
            visibility: vec![1; n],
            edited_mask: vec![false; n],
            mesh: self.mesh,
        }
    }
}

pub fn read_mesh(path: &Path) -> CliResult<ParsedMesh> {
    let text = fs::read_to_string(path).map_err(|e| io_fail("read mesh", path, e))?;
    let ply = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ply"))
        .unwrap_or(false);
    let parsed = if ply { parse_ply(&text) } else { parse_obj(&text) };
    parsed.map_err(|f| Fail::usage(format!("{}: {}", path.display(), f.msg)))
}

pub fn write_obj(path: &Path, mesh: &Mesh, colors: Option<&[[f64; 3]]>) -> CliResult<()> {
    fs::write(path, obj_string(mesh, colors)).map_err(|e| io_fail("write mesh", path, e))
}

pub fn obj_string(mesh: &Mesh, colors: Option<&[[f64; 3]]>) -> String {
    let mut out = String::new();
    out.push_str("# tetraforge mesh\n");
    for (i, p) in mesh.positions.iter().enumerate() {
        match colors {
            Some(c) => {
                let [r, g, b] = c[i];
                let _ = writeln!(out, "v {} {} {} {} {} {}", p.x, p.y, p.z, r, g, b);
            }
            None => {
                let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
            }
        }
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

fn parse_floats(tokens: &[&str], line_no: usize) -> CliResult<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Fail::usage(format!("line {line_no}: bad number {t:?}")))
        })
        .collect()
}

pub fn parse_obj(text: &str) -> CliResult<ParsedMesh> {
    let mut positions = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut any_plain = false;
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        let mut tokens = line.split_whitespace();
        let Some(key) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match key {
            "v" => {
                let nums = parse_floats(&rest, line_no)?;
                match nums.len() {
                    3 => {
                        any_plain = true;
                        positions.push(vec3(nums[0], nums[1], nums[2]));
                    }
                    6 => {
                        positions.push(vec3(nums[0], nums[1], nums[2]));
                        colors.push([nums[3], nums[4], nums[5]]);
                    }
                    n => {
                        return Err(Fail::usage(format!(
                            "line {line_no}: vertex needs 3 coordinates or 3+3 with colors, got {n}"
                        )))
                    }
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Fail::usage(format!(
                        "line {line_no}: only triangle faces are supported, got {} corners",
                        rest.len()
                    )));
                }
                let mut f = [0u32; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let vref = tok.split('/').next().unwrap_or("");
                    let one_based: i64 = vref.parse().map_err(|_| {
                        Fail::usage(format!("line {line_no}: bad face index {tok:?}"))
                    })?;
                    if one_based < 1 {
                        return Err(Fail::usage(format!(
                            "line {line_no}: face indices must be positive (1-based)"
                        )));
                    }
                    f[k] = (one_based - 1) as u32;
                }
                faces.push(f);
            }
            // Normals, texcoords, grouping, and material statements carry no
            // geometry we track.
            _ => {}
        }
    }

    if !colors.is_empty() && any_plain {
        return Err(Fail::usage(
            "vertex color lines mixed with colorless ones; color all vertices or none",
        ));
    }
    let nv = positions.len() as u32;
    for f in &faces {
        if f.iter().any(|&i| i >= nv) {
            return Err(Fail::usage(format!(
                "face references vertex {} but only {nv} vertices exist",
                f.iter().max().unwrap() + 1
            )));
        }
    }
    Ok(ParsedMesh {
        mesh: Mesh {
            positions,
            faces,
            provenance: Vec::new(),
        },
        colors: if colors.is_empty() { None } else { Some(colors) },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    Uchar,
    Other,
}

pub fn parse_ply(text: &str) -> CliResult<ParsedMesh> {
    let mut lines = text.lines().enumerate();
    let header_err = |msg: &str| Fail::usage(format!("ply header: {msg}"));

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(header_err("missing ply magic")),
    }

    let mut n_vertices: Option<usize> = None;
    let mut n_faces = 0usize;
    // (name, scalar kind) per vertex property, in declaration order.
    let mut vprops: Vec<(String, PlyScalar)> = Vec::new();
    let mut in_element: Option<&'static str> = None;
    let mut format_seen = false;

    for (_, raw) in lines.by_ref() {
        let line = raw.trim();
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["comment", ..] | [] => {}
            ["format", kind, _version] => {
                if *kind != "ascii" {
                    return Err(header_err("only ascii PLY is supported"));
                }
                format_seen = true;
            }
            ["element", "vertex", n] => {
                n_vertices = Some(
                    n.parse()
                        .map_err(|_| header_err("bad vertex count"))?,
                );
                in_element = Some("vertex");
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| header_err("bad face count"))?;
                in_element = Some("face");
            }
            ["element", ..] => {
                in_element = Some("other");
            }
            ["property", "list", _, _, _] => {
                if in_element != Some("face") {
                    return Err(header_err("list property outside face element"));
                }
            }
            ["property", ty, name] => {
                if in_element == Some("vertex") {
                    let kind = if matches!(*ty, "uchar" | "uint8") {
                        PlyScalar::Uchar
                    } else {
                        PlyScalar::Other
                    };
                    vprops.push(((*name).to_string(), kind));
                }
            }
            ["end_header"] => break,
            _ => return Err(header_err(&format!("unrecognized line {line:?}"))),
        }
    }
    if !format_seen {
        return Err(header_err("missing format line"));
    }
    let n_vertices = n_vertices.ok_or_else(|| header_err("missing vertex element"))?;

    let col = |name: &str| vprops.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(header_err("vertex element lacks x/y/z properties")),
    };
    let color_cols = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => match (col("r"), col("g"), col("b")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        },
    };

    let mut positions = Vec::with_capacity(n_vertices);
    let mut colors = Vec::new();
    for i in 0..n_vertices {
        let (idx, raw) = lines
            .next()
            .ok_or_else(|| Fail::usage(format!("ply: missing vertex row {i}")))?;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < vprops.len() {
            return Err(Fail::usage(format!(
                "line {}: vertex row has {} values, header declares {}",
                idx + 1,
                toks.len(),
                vprops.len()
            )));
        }
        let nums = parse_floats(&toks, idx + 1)?;
        positions.push(vec3(nums[xi], nums[yi], nums[zi]));
        if let Some([r, g, b]) = color_cols {
            let decode = |ci: usize| {
                if vprops[ci].1 == PlyScalar::Uchar {
                    nums[ci] / 255.0
                } else {
                    nums[ci]
                }
            };
            colors.push([decode(r), decode(g), decode(b)]);
        }
    }

    let mut faces = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let (idx, raw) = lines
            .next()
            .ok_or_else(|| Fail::usage(format!("ply: missing face row {i}")))?;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let line_no = idx + 1;
        if toks.first() != Some(&"3") {
            return Err(Fail::usage(format!(
                "line {line_no}: only triangle faces are supported"
            )));
        }
        if toks.len() < 4 {
            return Err(Fail::usage(format!("line {line_no}: short face row")));
        }
        let mut f = [0u32; 3];
        for k in 0..3 {
            let v: u64 = toks[k + 1]
                .parse()
                .map_err(|_| Fail::usage(format!("line {line_no}: bad face index")))?;
            if v >= n_vertices as u64 {
                return Err(Fail::usage(format!(
                    "line {line_no}: face references vertex {v} of {n_vertices}"
                )));
            }
            f[k] = v as u32;
        }
        faces.push(f);
    }

    Ok(ParsedMesh {
        mesh: Mesh {
            positions,
            faces,
            provenance: Vec::new(),
        },
        colors: if colors.is_empty() { None } else { Some(colors) },
    })
}
