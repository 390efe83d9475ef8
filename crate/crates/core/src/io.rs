//! On-disk formats: binary heatmaps and feature grids, PGM, parameter
//! checkpoints, JSONL detection files and dataset manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, AnnotationRecord, Protocol};
use crate::ema::ParameterState;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::geometry::BoundingBox;
use crate::heatmap::Heatmap;

pub const MANIFEST_FILE: &str = "manifest.json";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits `bytes` into a JSON header line and the payload that follows it.
fn split_header<'a, H: DeserializeOwned>(path: &Path, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing JSON header line"))?;
    let header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    Ok((header, &bytes[newline + 1..]))
}

fn decode_f32(path: &Path, payload: &[u8], expected: usize) -> Result<Vec<f32>> {
    if payload.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", expected * 4, payload.len()),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_with_header<H: Serialize>(header: &H, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapHeader {
    width: usize,
    height: usize,
}

pub fn encode_heatmap(h: &Heatmap) -> Vec<u8> {
    let header = HeatmapHeader {
        width: h.width(),
        height: h.height(),
    };
    encode_with_header(&header, h.values().iter().copied())
}

/// Reads a heatmap in the binary format or as 8/16-bit PGM (`P5` or `P2`).
pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        return parse_pgm(path, &bytes);
    }
    let (header, payload): (HeatmapHeader, _) = split_header(path, &bytes)?;
    let values = decode_f32(path, payload, header.width * header.height)?;
    Heatmap::new(header.width, header.height, values).map_err(|e| Error::format(path, e.to_string()))
}

/// PGM with samples scaled by `1 / maxval`.
pub fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<Heatmap> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let samples: Vec<usize> = if bytes.starts_with(b"P5") {
        // Exactly one whitespace byte separates the header from the raster.
        let raster = bytes.get(pos + 1..).unwrap_or(&[]);
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if raster.len() < need {
            return Err(Error::format(path, format!("PGM raster holds {} of {need} bytes", raster.len())));
        }
        if wide {
            raster[..need]
                .chunks_exact(2)
                .map(|c| usize::from(u16::from_be_bytes([c[0], c[1]])))
                .collect()
        } else {
            raster[..need].iter().map(|&b| usize::from(b)).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| Error::format(path, "PGM body is not ASCII"))?;
        let samples = text
            .split_ascii_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("bad PGM sample: {e}")))?;
        if samples.len() != n {
            return Err(Error::format(path, format!("PGM has {} of {n} samples", samples.len())));
        }
        samples
    };
    if let Some(s) = samples.iter().find(|&&s| s > maxval) {
        return Err(Error::format(path, format!("PGM sample {s} exceeds maxval {maxval}")));
    }
    let values = samples.into_iter().map(|s| s as f32 / maxval as f32).collect();
    Heatmap::new(width, height, values).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    grid_w: usize,
    grid_h: usize,
    channels: usize,
}

pub fn encode_feature_grid(g: &FeatureGrid) -> Vec<u8> {
    let header = FeatureHeader {
        grid_w: g.grid_w(),
        grid_h: g.grid_h(),
        channels: g.channels(),
    };
    encode_with_header(&header, g.values().iter().copied())
}

pub fn read_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, payload): (FeatureHeader, _) = split_header(path, &bytes)?;
    let values = decode_f32(path, payload, h.grid_w * h.grid_h * h.channels)?;
    FeatureGrid::new(h.grid_w, h.grid_h, h.channels, values).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    theta: usize,
    norm_mean: usize,
    norm_var: usize,
}

/// JSON header with the three vector lengths, then theta, mean and
/// variance as little-endian `f32`. Values are rounded to single precision.
pub fn encode_checkpoint(p: &ParameterState) -> Vec<u8> {
    let header = CheckpointHeader {
        theta: p.theta.len(),
        norm_mean: p.norm_mean.len(),
        norm_var: p.norm_var.len(),
    };
    let values = p.theta.iter().chain(&p.norm_mean).chain(&p.norm_var).map(|&v| v as f32);
    encode_with_header(&header, values)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterState> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, payload): (CheckpointHeader, _) = split_header(path, &bytes)?;
    let values: Vec<f64> = decode_f32(path, payload, h.theta + h.norm_mean + h.norm_var)?
        .into_iter()
        .map(f64::from)
        .collect();
    let (theta, rest) = values.split_at(h.theta);
    let (mean, var) = rest.split_at(h.norm_mean);
    ParameterState::new(theta.to_vec(), mean.to_vec(), var.to_vec()).map_err(|e| Error::format(path, e.to_string()))
}

/// One JSON value per line; blank lines are skipped. Errors name the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Jsonl {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn encode_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Ground-truth line. A line without `box` registers a lesion-free image.
/// Other fields (score, source) are ignored, so detection files with
/// ground-truth boxes are accepted as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub annotation: Annotation,
    /// Feature-grid payload, relative to the manifest's directory.
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary_image_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    pub records: Vec<ManifestEntry>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads every record of the manifest at `path` with its payloads.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<AnnotationRecord>)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let records = manifest
        .records
        .iter()
        .map(|e| {
            Ok(AnnotationRecord {
                image_id: e.image_id.clone(),
                annotation: e.annotation.clone(),
                features: read_feature_grid(base.join(&e.features))?,
                heatmap: e.heatmap.as_ref().map(|h| read_heatmap(base.join(h))).transpose()?,
                classifier_score: e.classifier_score,
                auxiliary_image_id: e.auxiliary_image_id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, records))
}

/// Files queued in memory and committed together. Each file is written
/// atomically; if any write fails the files already committed are removed.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            if let Err(e) = write_atomic(&path, &bytes) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
            written.push(path);
        }
        Ok(written)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Path of `target` relative to directory `base`, both resolved on disk.
pub fn relative_to(target: &Path, base: &Path) -> Result<PathBuf> {
    let target = fs::canonicalize(target).map_err(|e| Error::io(target, e))?;
    let base = fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
    Ok(pathdiff::diff_paths(&target, &base).unwrap_or(target))
}
