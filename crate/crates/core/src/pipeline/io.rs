//! Point-cloud files: ASCII PLY and raw little-endian `f32` triples.
//!
//! The raw format is an 8-byte little-endian point count followed by
//! `x y z` as little-endian `f32` for each point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    AsciiPly,
    #[default]
    BinaryF32,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::AsciiPly => "ply",
            CloudFormat::BinaryF32 => "bin",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii-ply" => Ok(CloudFormat::AsciiPly),
            "binary-f32" => Ok(CloudFormat::BinaryF32),
            other => Err(Error::invalid("format", format!("unknown format {other:?}"))),
        }
    }
}

/// Encodes a cloud in memory. Coordinates are stored as `f32`.
pub fn encode_point_cloud(points: &[Point], format: CloudFormat) -> Vec<u8> {
    match format {
        CloudFormat::AsciiPly => {
            let mut s = format!(
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
                points.len()
            );
            for p in points {
                let _ = writeln!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
            }
            s.into_bytes()
        }
        CloudFormat::BinaryF32 => {
            let mut buf = Vec::with_capacity(8 + 12 * points.len());
            buf.extend_from_slice(&(points.len() as u64).to_le_bytes());
            for p in points {
                for c in [p.x, p.y, p.z] {
                    buf.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            buf
        }
    }
}

pub fn write_point_cloud(path: &Path, points: &[Point], format: CloudFormat) -> Result<()> {
    fs::write(path, encode_point_cloud(points, format)).map_err(|e| Error::io(path, e))
}

/// Reads either format; PLY files are recognised by their magic line.
pub fn read_point_cloud(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
        parse_ply(&bytes).map_err(fail)
    } else {
        parse_raw(&bytes).map_err(fail)
    }
}

fn parse_raw(bytes: &[u8]) -> std::result::Result<Vec<Point>, String> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|h| h.try_into().ok())
        .ok_or("missing 8-byte point count")?;
    let n = u64::from_le_bytes(header) as usize;
    let body = &bytes[8..];
    if n.checked_mul(12) != Some(body.len()) {
        return Err(format!("count {n} needs {} payload bytes, found {}", n.saturating_mul(12), body.len()));
    }
    Ok(body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(4), f(8))
        })
        .collect())
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Supports `ascii 1.0` and `binary_little_endian 1.0` with a vertex element
/// whose scalar properties include `x`, `y` and `z`; other elements must
/// follow the vertices.
fn parse_ply(bytes: &[u8]) -> std::result::Result<Vec<Point>, String> {
    let end = find_subslice(bytes, b"end_header").ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let body_start = bytes[end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| end + p + 1)
        .ok_or("truncated header")?;
    let mut binary = false;
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, String)> = Vec::new();
    for line in header.lines().map(str::trim) {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => return Err(format!("unsupported format {other}")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format!("bad vertex count {n}"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err("list properties on vertices".into()),
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let n = count.ok_or("no vertex element")?;
    let axis = |a: &str| {
        props
            .iter()
            .position(|(_, name)| name == a)
            .ok_or_else(|| format!("missing property {a}"))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let body = &bytes[body_start..];
    if binary {
        let sizes = props
            .iter()
            .map(|(ty, _)| scalar_size(ty).ok_or_else(|| format!("unsupported type {ty}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stride: usize = sizes.iter().sum();
        if body.len() < n * stride {
            return Err(format!("{n} vertices need {} bytes, found {}", n * stride, body.len()));
        }
        let offsets: Vec<usize> = sizes.iter().scan(0, |o, s| { let r = *o; *o += s; Some(r) }).collect();
        let read = |row: &[u8], k: usize| -> f64 {
            let b = &row[offsets[k]..offsets[k] + sizes[k]];
            match props[k].0.as_str() {
                "float" | "float32" => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                "double" | "float64" => f64::from_le_bytes(b.try_into().unwrap()),
                _ => f64::NAN,
            }
        };
        for k in [ix, iy, iz] {
            if !matches!(props[k].0.as_str(), "float" | "float32" | "double" | "float64") {
                return Err(format!("coordinate {} has non-float type {}", props[k].1, props[k].0));
            }
        }
        Ok(body
            .chunks_exact(stride)
            .take(n)
            .map(|row| Point::new(read(row, ix), read(row, iy), read(row, iz)))
            .collect())
    } else {
        let text = std::str::from_utf8(body).map_err(|_| "body is not UTF-8")?;
        let mut out = Vec::with_capacity(n);
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).take(n).enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() < props.len() {
                return Err(format!("vertex {i}: {} values, expected {}", vals.len(), props.len()));
            }
            let v = |k: usize| vals[k].parse::<f64>().map_err(|_| format!("vertex {i}: bad number {:?}", vals[k]));
            out.push(Point::new(v(ix)?, v(iy)?, v(iz)?));
        }
        if out.len() != n {
            return Err(format!("header declares {n} vertices, found {}", out.len()));
        }
        Ok(out)
    }
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}
