//! Segmented point clouds, segmentation masks and feature correspondences, with
//! their on-disk formats.
//!
//! Formats:
//! - point cloud CSV: `x,y,z,label` per line
//! - KITTI `.bin` (`f32` x, y, z, intensity) plus a SemanticKITTI `.label`
//!   file (`u32`, lower 16 bits = class)
//! - mask: binary PGM (`P5`), pixel value = class id
//! - correspondences CSV: `u1,v1,u2,v2` per line
//!
//! CSV files accept `#` comments and blank lines.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: no points")]
    EmptyCloud { path: PathBuf },
    #[error("{cloud}: {points} points but {labels} labels")]
    LengthMismatch { cloud: PathBuf, points: usize, labels: usize },
    #[error("{path}: {len} bytes is not a multiple of the {record}-byte record size")]
    TruncatedFile { path: PathBuf, len: usize, record: usize },
    #[error("{path}: not a binary PGM (magic {magic:?})")]
    BadMagic { path: PathBuf, magic: String },
    #[error("{path}: bad PGM header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: expected {expected} pixel bytes, found {found}")]
    TruncatedPixels { path: PathBuf, expected: usize, found: usize },
}

impl LoadError {
    pub fn path(&self) -> &Path {
        match self {
            LoadError::Io { path, .. }
            | LoadError::Parse { path, .. }
            | LoadError::EmptyCloud { path }
            | LoadError::TruncatedFile { path, .. }
            | LoadError::BadMagic { path, .. }
            | LoadError::BadHeader { path, .. }
            | LoadError::TruncatedPixels { path, .. } => path,
            LoadError::LengthMismatch { cloud, .. } => cloud,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, LoadError> {
    fs::read(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn read_text(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), LoadError> {
    fs::write(path, text).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

/// Non-comment, non-blank lines with their 1-based line numbers.
pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line))
        }
    })
}

pub(crate) fn split_fields(line: &str, expected: usize) -> Result<Vec<&str>, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != expected {
        return Err(format!("expected {expected} comma-separated fields, found {}", fields.len()));
    }
    Ok(fields)
}

pub(crate) fn parse_f64(field: &str) -> Result<f64, String> {
    let v: f64 = field.parse().map_err(|_| format!("invalid number '{field}'"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value '{field}'"));
    }
    Ok(v)
}

/// Parses a sensor coordinate at 32-bit precision, widened to `f64`.
fn parse_f32(field: &str) -> Result<f64, String> {
    let v: f32 = field.parse().map_err(|_| format!("invalid number '{field}'"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value '{field}'"));
    }
    Ok(v as f64)
}

/// Formats a value with 9 significant digits.
pub(crate) fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// A LIDAR scan with one class id per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<u32>,
    pub frame_id: i64,
}

impl SemanticPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, labels: Vec<u32>, frame_id: i64) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        Self { points, labels, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn parse_point_cloud_csv(text: &str, path: &Path) -> Result<SemanticPointCloud, LoadError> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (line, content) in data_lines(text) {
        let perr = |message: String| LoadError::Parse { path: path.to_path_buf(), line, message };
        let f = split_fields(content, 4).map_err(perr)?;
        let xyz = [parse_f32(f[0]), parse_f32(f[1]), parse_f32(f[2])];
        let mut c = [0.0; 3];
        for (dst, src) in c.iter_mut().zip(xyz) {
            *dst = src.map_err(perr)?;
        }
        let label: u32 = f[3].parse().map_err(|_| perr(format!("invalid label '{}'", f[3])))?;
        points.push(Vector3::new(c[0], c[1], c[2]));
        labels.push(label);
    }
    if points.is_empty() {
        return Err(LoadError::EmptyCloud { path: path.to_path_buf() });
    }
    Ok(SemanticPointCloud { points, labels, frame_id: 0 })
}

/// Loads `x,y,z,label` rows. Coordinates are read at 32-bit precision.
pub fn load_point_cloud_csv(path: impl AsRef<Path>) -> Result<SemanticPointCloud, LoadError> {
    let path = path.as_ref();
    parse_point_cloud_csv(&read_text(path)?, path)
}

pub fn point_cloud_to_csv(cloud: &SemanticPointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    out.push_str("# x,y,z,label\n");
    for (p, l) in cloud.points.iter().zip(&cloud.labels) {
        out.push_str(&format!("{},{},{},{}\n", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.z), l));
    }
    out
}

pub fn save_point_cloud_csv(cloud: &SemanticPointCloud, path: impl AsRef<Path>) -> Result<(), LoadError> {
    write_text(path.as_ref(), &point_cloud_to_csv(cloud))
}

/// Loads a KITTI velodyne scan with its SemanticKITTI label file. Intensity is
/// dropped and labels keep only their lower 16 bits.
pub fn load_kitti_bin_with_labels(
    bin_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<SemanticPointCloud, LoadError> {
    let (bin_path, label_path) = (bin_path.as_ref(), label_path.as_ref());
    let bin = read_bytes(bin_path)?;
    let lab = read_bytes(label_path)?;
    decode_kitti(&bin, &lab, bin_path, label_path)
}

pub fn decode_kitti(bin: &[u8], lab: &[u8], bin_path: &Path, label_path: &Path) -> Result<SemanticPointCloud, LoadError> {
    const POINT_RECORD: usize = 16;
    const LABEL_RECORD: usize = 4;
    if !bin.len().is_multiple_of(POINT_RECORD) {
        return Err(LoadError::TruncatedFile { path: bin_path.to_path_buf(), len: bin.len(), record: POINT_RECORD });
    }
    if !lab.len().is_multiple_of(LABEL_RECORD) {
        return Err(LoadError::TruncatedFile { path: label_path.to_path_buf(), len: lab.len(), record: LABEL_RECORD });
    }
    let (n_points, n_labels) = (bin.len() / POINT_RECORD, lab.len() / LABEL_RECORD);
    if n_points != n_labels {
        return Err(LoadError::LengthMismatch { cloud: bin_path.to_path_buf(), points: n_points, labels: n_labels });
    }
    if n_points == 0 {
        return Err(LoadError::EmptyCloud { path: bin_path.to_path_buf() });
    }
    let f32_at = |b: &[u8], i: usize| f32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]) as f64;
    let mut points = Vec::with_capacity(n_points);
    for rec in bin.chunks_exact(POINT_RECORD) {
        let p = Vector3::new(f32_at(rec, 0), f32_at(rec, 4), f32_at(rec, 8));
        if !p.iter().all(|c| c.is_finite()) {
            return Err(LoadError::Parse {
                path: bin_path.to_path_buf(),
                line: points.len(),
                message: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }
    let labels = lab
        .chunks_exact(LABEL_RECORD)
        .map(|r| u32::from_le_bytes([r[0], r[1], r[2], r[3]]) & 0xFFFF)
        .collect();
    Ok(SemanticPointCloud { points, labels, frame_id: 0 })
}

/// Keeps the points labelled `class_id`, preserving order.
pub fn filter_by_class(cloud: &SemanticPointCloud, class_id: u32) -> SemanticPointCloud {
    let (points, labels) = cloud
        .points
        .iter()
        .zip(&cloud.labels)
        .filter(|(_, &l)| l == class_id)
        .map(|(p, l)| (*p, *l))
        .unzip();
    SemanticPointCloud { points, labels, frame_id: cloud.frame_id }
}

/// Per-pixel class ids in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u8>,
    pub frame_id: i64,
}

impl SemanticMask {
    pub fn new(width: u32, height: u32, classes: Vec<u8>) -> Self {
        assert_eq!(classes.len(), width as usize * height as usize, "mask grid size");
        Self { width, height, classes, frame_id: 0 }
    }

    pub fn filled(width: u32, height: u32, class: u8) -> Self {
        Self::new(width, height, vec![class; width as usize * height as usize])
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.classes[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, class: u8) {
        let w = self.width as usize;
        self.classes[v as usize * w + u as usize] = class;
    }

    pub fn count_class(&self, class_id: u32) -> usize {
        self.classes.iter().filter(|&&c| c as u32 == class_id).count()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.classes);
        out
    }
}

fn is_pgm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<SemanticMask, LoadError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(LoadError::BadMagic { path: path.to_path_buf(), magic });
    }
    let header = |reason: &str| LoadError::BadHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each header token
        loop {
            match bytes.get(pos) {
                Some(&b) if is_pgm_space(b) => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(header("unexpected end of header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(header("expected a decimal number"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header("non-ascii header"))?;
        *field = token.parse().map_err(|_| header("number out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(&b) if is_pgm_space(b) => pos += 1,
        _ => return Err(header("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(header("invalid dimensions"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(header("maxval must be in 1..=255"));
    }
    let expected = (width * height) as usize;
    let found = bytes.len() - pos;
    if found < expected {
        return Err(LoadError::TruncatedPixels { path: path.to_path_buf(), expected, found });
    }
    Ok(SemanticMask::new(width as u32, height as u32, bytes[pos..pos + expected].to_vec()))
}

pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<SemanticMask, LoadError> {
    let path = path.as_ref();
    decode_pgm(&read_bytes(path)?, path)
}

pub fn save_mask_pgm(mask: &SemanticMask, path: impl AsRef<Path>) -> Result<(), LoadError> {
    let path = path.as_ref();
    fs::write(path, mask.to_pgm()).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

/// Pixel tracks from the older frame to the newer one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCorrespondences {
    pub pairs: Vec<(Vector2<f64>, Vector2<f64>)>,
}

impl FeatureCorrespondences {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Whether every coordinate lies within the image rectangle grown by 10%
    /// on each side.
    pub fn within_image(&self, width: u32, height: u32) -> bool {
        let (mw, mh) = (0.1 * width as f64, 0.1 * height as f64);
        let ok = |p: &Vector2<f64>| {
            p.x >= -mw && p.x <= width as f64 + mw && p.y >= -mh && p.y <= height as f64 + mh
        };
        self.pairs.iter().all(|(a, b)| ok(a) && ok(b))
    }
}

pub fn parse_correspondences_csv(text: &str, path: &Path) -> Result<FeatureCorrespondences, LoadError> {
    let mut pairs = Vec::new();
    for (line, content) in data_lines(text) {
        let perr = |message: String| LoadError::Parse { path: path.to_path_buf(), line, message };
        let f = split_fields(content, 4).map_err(perr)?;
        let mut c = [0.0; 4];
        for (dst, src) in c.iter_mut().zip(&f) {
            *dst = parse_f64(src).map_err(perr)?;
        }
        pairs.push((Vector2::new(c[0], c[1]), Vector2::new(c[2], c[3])));
    }
    Ok(FeatureCorrespondences { pairs })
}

pub fn load_correspondences_csv(path: impl AsRef<Path>) -> Result<FeatureCorrespondences, LoadError> {
    let path = path.as_ref();
    parse_correspondences_csv(&read_text(path)?, path)
}

pub fn correspondences_to_csv(corr: &FeatureCorrespondences) -> String {
    let mut out = String::from("# u1,v1,u2,v2\n");
    for (a, b) in &corr.pairs {
        out.push_str(&format!("{},{},{},{}\n", a.x, a.y, b.x, b.y));
    }
    out
}

pub fn save_correspondences_csv(corr: &FeatureCorrespondences, path: impl AsRef<Path>) -> Result<(), LoadError> {
    write_text(path.as_ref(), &correspondences_to_csv(corr))
}
