//! Binary little-endian 3DGS PLY with degree-0 spherical harmonics.
//!
//! Stored fields are pre-activation: color through the SH DC basis constant, opacity as a
//! logit, scale as a log. The writer searches the neighboring f32 values of each inverse
//! so that reading the file reproduces the cloud bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{PartLabel, Splat, SplatCloud};

/// Zeroth-order real spherical harmonic, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.28209479177387814;
/// Stored opacity logits are clamped to this magnitude.
const LOGIT_LIMIT: f64 = 16.0;
/// How many f32 steps either side of the inverse the writer inspects.
const NUDGE_RADIUS: u32 = 64;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

fn err(reason: impl Into<String>) -> Error {
    Error::format("PLY", reason)
}

fn color_of(raw: f32) -> f32 {
    (SH_C0 * f64::from(raw) + 0.5).clamp(0.0, 1.0) as f32
}

fn opacity_of(raw: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(raw)).exp())) as f32
}

fn scale_of(raw: f32) -> f32 {
    f64::from(raw).exp() as f32
}

fn next_up(v: f32) -> f32 {
    if v.is_nan() || v == f32::INFINITY {
        return v;
    }
    if v == 0.0 {
        return f32::from_bits(1);
    }
    let bits = v.to_bits();
    f32::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(v: f32) -> f32 {
    -next_up(-v)
}

/// Raw value near `guess` whose activation is exactly `target`; falls back to the
/// candidate with the closest activation.
fn invert(target: f32, guess: f64, forward: fn(f32) -> f32) -> f32 {
    let start = guess as f32;
    if forward(start) == target {
        return start;
    }
    let mut best = start;
    let mut best_err = (f64::from(forward(start)) - f64::from(target)).abs();
    let (mut up, mut down) = (start, start);
    for _ in 0..NUDGE_RADIUS {
        up = next_up(up);
        down = next_down(down);
        for c in [up, down] {
            let v = forward(c);
            if v == target {
                return c;
            }
            let e = (f64::from(v) - f64::from(target)).abs();
            if e < best_err {
                best = c;
                best_err = e;
            }
        }
    }
    best
}

fn logit(o: f32) -> f64 {
    let o = f64::from(o);
    if o <= 0.0 {
        -LOGIT_LIMIT
    } else if o >= 1.0 {
        LOGIT_LIMIT
    } else {
        (o / (1.0 - o)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
    }
}

fn raw_fields(s: &Splat) -> [f32; 11] {
    let c = s.color();
    let sc = s.scale();
    let r = s.rotation();
    let dc = |k: usize| invert(c[k], (f64::from(c[k]) - 0.5) / SH_C0, color_of);
    let op = {
        let guess = logit(s.opacity());
        let raw = invert(s.opacity(), guess, opacity_of);
        raw.clamp(-LOGIT_LIMIT as f32, LOGIT_LIMIT as f32)
    };
    let ls = |k: usize| invert(sc[k], f64::from(sc[k]).ln(), scale_of);
    [dc(0), dc(1), dc(2), op, ls(0), ls(1), ls(2), r[0], r[1], r[2], r[3]]
}

pub fn encode_ply(cloud: &SplatCloud) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    for p in PROPERTIES {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for (s, n) in cloud.splats().iter().zip(cloud.normals()) {
        let raw = raw_fields(s);
        let values = s
            .position()
            .into_iter()
            .chain(n.iter().copied())
            .chain(raw);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header {
    count: usize,
    /// Byte offset of each required property inside one vertex record.
    offsets: [usize; 17],
    stride: usize,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| err("no `end_header` line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| err("header is not UTF-8"))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(err("missing `ply` magic line"));
    }

    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => format = Some(f.to_string()),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(err("duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| err(format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", name, _] => return Err(err(format!("unsupported element `{name}`"))),
            ["property", "list", ..] => return Err(err("list properties are not supported")),
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            _ => return Err(err(format!("unrecognized header line `{line}`"))),
        }
    }
    match format.as_deref() {
        Some("binary_little_endian") => {}
        Some("ascii") => return Err(err("ASCII PLY is not supported")),
        Some(f) => return Err(err(format!("unsupported format `{f}`"))),
        None => return Err(err("missing `format` line")),
    }
    let count = count.ok_or_else(|| err("missing vertex element"))?;

    let mut offsets = [usize::MAX; 17];
    for (k, (ty, name)) in props.iter().enumerate() {
        let slot = PROPERTIES.iter().position(|p| p == name);
        match slot {
            Some(i) => {
                if ty != "float" && ty != "float32" {
                    return Err(err(format!("property `{name}` has type `{ty}`, expected float")));
                }
                if offsets[i] != usize::MAX {
                    return Err(err(format!("duplicate property `{name}`")));
                }
                offsets[i] = k * 4;
            }
            None if name.starts_with("f_rest_") => {
                return Err(err("higher-order spherical harmonics (`f_rest_*`) are not supported"))
            }
            None => return Err(err(format!("unexpected property `{name}`"))),
        }
    }
    if let Some(i) = offsets.iter().position(|&o| o == usize::MAX) {
        return Err(err(format!("missing property `{}`", PROPERTIES[i])));
    }
    Ok(Header {
        count,
        offsets,
        stride: props.len() * 4,
        body_start: end + END.len(),
    })
}

pub fn decode_ply(bytes: &[u8]) -> Result<SplatCloud> {
    let h = parse_header(bytes)?;
    let body = &bytes[h.body_start..];
    let expected = h
        .count
        .checked_mul(h.stride)
        .ok_or_else(|| err("vertex count overflows"))?;
    if body.len() != expected {
        return Err(err(format!(
            "body holds {} bytes, expected {expected} for {} vertices",
            body.len(),
            h.count
        )));
    }
    let mut splats = Vec::with_capacity(h.count);
    let mut normals = Vec::with_capacity(h.count);
    for (n, rec) in body.chunks_exact(h.stride).enumerate() {
        let f: [f32; 17] = std::array::from_fn(|i| {
            let o = h.offsets[i];
            f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]])
        });
        if let Some(i) = (0..17).filter(|&i| !(3..6).contains(&i)).find(|&i| !f[i].is_finite()) {
            return Err(err(format!("vertex {n}: non-finite `{}`", PROPERTIES[i])));
        }
        let splat = Splat::new(
            [f[0], f[1], f[2]],
            [f[13], f[14], f[15], f[16]],
            [scale_of(f[10]), scale_of(f[11]), scale_of(f[12])],
            opacity_of(f[9]),
            [color_of(f[6]), color_of(f[7]), color_of(f[8])],
        )
        .map_err(|e| err(format!("vertex {n}: {e}")))?;
        splats.push(splat);
        normals.push([f[3], f[4], f[5]]);
    }
    SplatCloud::with_normals(PartLabel::Full, splats, normals)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<SplatCloud> {
    decode_ply(&super::read_bytes(path.as_ref())?)
}

pub fn write_ply(cloud: &SplatCloud, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_ply(cloud))
}
