//! Import of the reference 3DGS PLY export (binary little-endian).
//!
//! Stored values are pre-activation: opacity is a logit, scales are logs and
//! color is the degree-0 spherical-harmonic coefficient. Higher-order SH
//! coefficients (`f_rest_*`) and normals are skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{GaussianPrimitive, GaussianScene};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, s)| s.size()).sum()
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Ply("missing end_header".into()))?;
    let mut body = end + END.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(Error::Ply("malformed end_header line".into()));
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("non-ASCII header".into()))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::Ply("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Ply(format!("unsupported encoding `{fmt}`")));
                }
                format_ok = true;
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(Error::Ply("list properties are not supported".into()));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                let scalar =
                    Scalar::parse(ty).ok_or_else(|| Error::Ply(format!("unknown type `{ty}`")))?;
                el.props.push((name.to_string(), scalar));
            }
            _ => return Err(Error::Ply(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(Error::Ply("missing format line".into()));
    }
    Ok((elements, body))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn import_ply_3dgs(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_3dgs(&bytes)
}

pub fn parse_ply_3dgs(bytes: &[u8]) -> Result<GaussianScene> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut primitives = Vec::new();
    for el in &elements {
        let stride = el.stride();
        let size = stride * el.count;
        if bytes.len() < offset + size {
            return Err(Error::Ply(format!("truncated `{}` data", el.name)));
        }
        if el.name == "vertex" {
            let mut slots = [(0usize, Scalar::F32); 14];
            for (k, want) in REQUIRED.iter().enumerate() {
                let mut off = 0;
                let mut found = None;
                for (name, ty) in &el.props {
                    if name == want {
                        found = Some((off, *ty));
                        break;
                    }
                    off += ty.size();
                }
                slots[k] = found.ok_or_else(|| Error::Ply(format!("missing property `{want}`")))?;
            }
            for i in 0..el.count {
                let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
                let v: Vec<f64> = slots.iter().map(|(off, ty)| ty.read(&row[*off..])).collect();
                if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::InvalidPrimitive {
                        index: i,
                        message: format!("non-finite `{}`", REQUIRED[k]),
                    });
                }
                let mut p = GaussianPrimitive {
                    mu: [v[0], v[1], v[2]],
                    q: [v[7], v[8], v[9], v[10]],
                    s: [v[4].exp(), v[5].exp(), v[6].exp()],
                    eta: sigmoid(v[3]),
                    rgb: [
                        (0.5 + SH_C0 * v[11]).clamp(0.0, 1.0),
                        (0.5 + SH_C0 * v[12]).clamp(0.0, 1.0),
                        (0.5 + SH_C0 * v[13]).clamp(0.0, 1.0),
                    ],
                };
                p.check(i)?;
                p.normalize_rotation();
                primitives.push(p);
            }
        }
        offset += size;
    }
    if !elements.iter().any(|e| e.name == "vertex") {
        return Err(Error::Ply("no vertex element".into()));
    }
    Ok(GaussianScene::new(primitives))
}

/// Writes a scene in the reference 3DGS layout (inverse activations, degree-0 SH only).
/// Opacities are clamped to `[1e-6, 1 - 1e-6]` so the logit stays finite.
pub fn export_ply_3dgs(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.len()
    )
    .expect("vec write");
    let order = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    for name in order {
        writeln!(out, "property float {name}").expect("vec write");
    }
    out.extend_from_slice(b"end_header\n");
    for p in &scene.primitives {
        let eta = p.eta.clamp(1e-6, 1.0 - 1e-6);
        let vals = [
            p.mu[0],
            p.mu[1],
            p.mu[2],
            (p.rgb[0] - 0.5) / SH_C0,
            (p.rgb[1] - 0.5) / SH_C0,
            (p.rgb[2] - 0.5) / SH_C0,
            (eta / (1.0 - eta)).ln(),
            p.s[0].ln(),
            p.s[1].ln(),
            p.s[2].ln(),
            p.q[0],
            p.q[1],
            p.q[2],
            p.q[3],
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
