//! Binary little-endian PLY for activated Gaussians, one `double` per
//! property.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::workbench::dataset::write_atomic;

pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

fn row(g: &Gaussian) -> [f64; 14] {
    let mut r = [0.0; 14];
    r[..3].copy_from_slice(&g.position);
    r[3..6].copy_from_slice(&g.color);
    r[6] = g.opacity;
    r[7..10].copy_from_slice(&g.scale);
    r[10..].copy_from_slice(&g.rotation);
    r
}

pub fn ply_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.count()).into_bytes();
    for p in PROPERTIES {
        out.extend_from_slice(format!("property double {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in cloud.iter() {
        for v in row(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let bad = |m: &str| Error::Format(format!("ply: {m}"));
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("no end_header"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(bad("expected binary little-endian PLY"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("missing vertex count"))?;
    for p in PROPERTIES {
        if lines.next() != Some(&format!("property double {p}")) {
            return Err(bad(&format!("expected double property {p}")));
        }
    }
    let body = &bytes[end..];
    if body.len() != count * 14 * 8 {
        return Err(bad("body size does not match the vertex count"));
    }
    let mut gs = Vec::with_capacity(count);
    for rec in body.chunks_exact(14 * 8) {
        let v: Vec<f64> = rec
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let g = Gaussian {
            position: [v[0], v[1], v[2]],
            color: [v[3], v[4], v[5]],
            opacity: v[6],
            scale: [v[7], v[8], v[9]],
            rotation: [v[10], v[11], v[12], v[13]],
        };
        g.validate()?;
        gs.push(g);
    }
    Ok(GaussianCloud::new(gs))
}

pub fn export_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    for g in cloud.iter() {
        g.validate()?;
    }
    write_atomic(path, &ply_bytes(cloud))
}

pub fn import_ply(path: &Path) -> Result<GaussianCloud> {
    parse_ply(&std::fs::read(path)?)
}
