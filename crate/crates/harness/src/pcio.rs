//! Labelled point-cloud files.
//!
//! Text (`PCSEG v1`):
//!
//! ```text
//! PCSEG v1 <point_count> <class_count>
//! x y z r g b label
//! ```
//!
//! one point per line, six fractional digits, colors in `[0, 1]`.
//!
//! Binary (`PCSB`, little-endian): the magic, `u32` count, `u32` classes,
//! then per point `3 × f32` position, `3 × f32` color and a `u16` label.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use codecforge_core::point::{Point3, PointCloud};

use crate::error::{HarnessError, Result};

pub const TEXT_MAGIC: &str = "PCSEG";
pub const TEXT_VERSION: &str = "v1";
pub const BINARY_MAGIC: &[u8; 4] = b"PCSB";

const BINARY_RECORD: usize = 6 * 4 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl Format {
    /// `.pcsb` is binary; anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pcsb") => Self::Binary,
            _ => Self::Text,
        }
    }
}

fn labels_of(cloud: &PointCloud) -> Result<&[usize]> {
    Ok(cloud.labels()?)
}

fn color_at(cloud: &PointCloud, i: usize) -> Point3 {
    cloud.colors.as_ref().map_or([0.0; 3], |c| c[i])
}

/// Writes the text format. Clouds without colors are written black.
pub fn write_text(cloud: &PointCloud, out: &mut impl Write) -> Result<()> {
    let labels = labels_of(cloud)?;
    let io = |e| HarnessError::io("<text writer>", e);
    writeln!(out, "{TEXT_MAGIC} {TEXT_VERSION} {} {}", cloud.len(), cloud.num_classes).map_err(io)?;
    for (i, p) in cloud.coords.iter().enumerate() {
        let c = color_at(cloud, i);
        writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
            p[0], p[1], p[2], c[0], c[1], c[2], labels[i]
        )
        .map_err(io)?;
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    match fields.as_slice() {
        [TEXT_MAGIC, TEXT_VERSION, n, c] => {
            let n = n
                .parse()
                .map_err(|_| HarnessError::parse(1, format!("bad point count `{n}`")))?;
            let c: usize = c
                .parse()
                .map_err(|_| HarnessError::parse(1, format!("bad class count `{c}`")))?;
            if c == 0 {
                return Err(HarnessError::parse(1, "class count must be positive"));
            }
            Ok((n, c))
        }
        [TEXT_MAGIC, v, ..] if *v != TEXT_VERSION => {
            Err(HarnessError::parse(1, format!("unsupported version `{v}`, expected {TEXT_VERSION}")))
        }
        _ => Err(HarnessError::parse(
            1,
            format!("expected `{TEXT_MAGIC} {TEXT_VERSION} <point_count> <class_count>`"),
        )),
    }
}

pub fn read_text(input: impl BufRead) -> Result<PointCloud> {
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| HarnessError::io("<text reader>", e))?,
        None => return Err(HarnessError::parse(1, "empty file")),
    };
    let (n, classes) = parse_header(&header)?;
    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| HarnessError::io("<text reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if coords.len() == n {
            return Err(HarnessError::parse(
                lineno,
                format!("header declares {n} points but the body has more"),
            ));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(HarnessError::parse(lineno, format!("expected 7 fields, found {}", fields.len())));
        }
        let mut vals = [0.0; 6];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| HarnessError::parse(lineno, format!("bad number `{f}`")))?;
        }
        let label: usize = fields[6]
            .parse()
            .map_err(|_| HarnessError::parse(lineno, format!("bad label `{}`", fields[6])))?;
        if label >= classes {
            return Err(HarnessError::parse(
                lineno,
                format!("label {label} outside 0..{classes}"),
            ));
        }
        coords.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
        labels.push(label);
    }
    if coords.len() != n {
        return Err(HarnessError::parse(
            coords.len() + 2,
            format!("header declares {n} points, body has {}", coords.len()),
        ));
    }
    Ok(PointCloud::new(coords, Some(colors), Some(labels), classes)?)
}

pub fn write_binary(cloud: &PointCloud, out: &mut impl Write) -> Result<()> {
    let labels = labels_of(cloud)?;
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| HarnessError::Config(format!("{what} {v} does not fit the binary format")))
    };
    if cloud.num_classes > usize::from(u16::MAX) + 1 {
        return Err(HarnessError::Config(format!(
            "{} classes do not fit u16 labels",
            cloud.num_classes
        )));
    }
    let mut buf = Vec::with_capacity(12 + cloud.len() * BINARY_RECORD);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&narrow(cloud.len(), "point count")?.to_le_bytes());
    buf.extend_from_slice(&narrow(cloud.num_classes, "class count")?.to_le_bytes());
    for (i, p) in cloud.coords.iter().enumerate() {
        for v in p.iter().chain(&color_at(cloud, i)) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(labels[i] as u16).to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| HarnessError::io("<binary writer>", e))
}

/// Binary parse errors report the 1-based record number in `line`.
pub fn read_binary(mut input: impl Read) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| HarnessError::io("<binary reader>", e))?;
    if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
        return Err(HarnessError::parse(0, "missing PCSB header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (n, classes) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != n * BINARY_RECORD {
        return Err(HarnessError::parse(
            0,
            format!(
                "header declares {n} points ({} bytes), body has {} bytes",
                n * BINARY_RECORD,
                body.len()
            ),
        ));
    }
    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in body.chunks_exact(BINARY_RECORD).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let label = u16::from_le_bytes([rec[24], rec[25]]) as usize;
        if label >= classes {
            return Err(HarnessError::parse(i + 1, format!("label {label} outside 0..{classes}")));
        }
        coords.push([f(0), f(1), f(2)]);
        colors.push([f(3), f(4), f(5)]);
        labels.push(label);
    }
    Ok(PointCloud::new(coords, Some(colors), Some(labels), classes)?)
}

pub fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    match Format::from_path(path) {
        Format::Text => write_text(cloud, &mut buf)?,
        Format::Binary => write_binary(cloud, &mut buf)?,
    }
    fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
}

/// Loads either format, recognized by its leading magic bytes.
pub fn load(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let parsed = if bytes.starts_with(BINARY_MAGIC) {
        read_binary(bytes.as_slice())
    } else {
        read_text(BufReader::new(bytes.as_slice()))
    };
    parsed.map_err(|e| match e {
        HarnessError::Parse { line, message } => HarnessError::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
