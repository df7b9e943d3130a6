//! On-disk sequence container and dataset manifest.
//!
//! A sequence `name` lives in three files next to each other:
//! `name.bin` (little-endian f32, frame-major), `name.json` (metadata sidecar)
//! and, when ground truth exists, `name.mask.bin` (one byte per pixel, 0 or 1).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{GeneratedSequence, NoiseConfig, Sequence, Split, TargetTrack};
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub name: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub dtype: String,
    pub has_mask: bool,
    pub snr: Option<f64>,
    pub tracks: Vec<TargetTrack>,
    pub noise: Option<NoiseConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    #[serde(default)]
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn names(&self, split: Option<Split>) -> Vec<&str> {
        self.sequences
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Paths of the three files of sequence `name` inside `dir`.
pub fn sequence_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.bin")),
        dir.join(format!("{name}.json")),
        dir.join(format!("{name}.mask.bin")),
    )
}

fn valid_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::InvalidArgument(format!(
            "invalid sequence name {name:?}"
        )));
    }
    Ok(())
}

/// Writes `seq` into `dir`; returns the paths written.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<Vec<PathBuf>> {
    valid_name(&seq.name)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [t, h, w] = seq.dims();
    let (bin, json, mask) = sequence_paths(dir, &seq.name);
    let bytes: Vec<u8> = seq
        .frames
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let mut written = vec![bin];
    if let Some(m) = &seq.masks {
        let bytes: Vec<u8> = m.data().iter().map(|&v| u8::from(v > 0.5)).collect();
        fs::write(&mask, bytes).map_err(|e| Error::io(&mask, e))?;
        written.push(mask);
    }
    let side = Sidecar {
        version: CONTAINER_VERSION,
        name: seq.name.clone(),
        t,
        h,
        w,
        dtype: "f32".into(),
        has_mask: seq.masks.is_some(),
        snr: seq.snr,
        tracks: seq.tracks.clone(),
        noise: seq.noise.clone(),
    };
    fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&json, e))?;
    written.push(json);
    Ok(written)
}

/// Resolves `path` (the `.bin`, `.json`, or extension-less stem) to
/// `(dir, name)`.
pub fn split_sequence_path(path: &Path) -> Result<(PathBuf, String)> {
    let file = path.file_name().and_then(|f| f.to_str()).ok_or_else(|| {
        Error::InvalidArgument(format!("not a sequence path: {}", path.display()))
    })?;
    let name = file
        .strip_suffix(".mask.bin")
        .or_else(|| file.strip_suffix(".bin"))
        .or_else(|| file.strip_suffix(".json"))
        .unwrap_or(file);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name.to_string()))
}

pub fn read_sequence_at(path: &Path) -> Result<Sequence> {
    let (dir, name) = split_sequence_path(path)?;
    read_sequence(&dir, &name)
}

pub fn read_sequence(dir: &Path, name: &str) -> Result<Sequence> {
    valid_name(name)?;
    let (bin, json, mask) = sequence_paths(dir, name);
    let raw = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let side: Sidecar =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&json, e.to_string()))?;
    if side.version != CONTAINER_VERSION {
        return Err(Error::format(
            &json,
            format!("unsupported container version {}", side.version),
        ));
    }
    if side.dtype != "f32" {
        return Err(Error::format(
            &json,
            format!("unsupported dtype {:?}", side.dtype),
        ));
    }
    let n = side.t * side.h * side.w;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != 4 * n {
        return Err(Error::format(
            &bin,
            format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let frames = Tensor::new(vec![side.t, side.h, side.w], data)?;
    if !frames.is_finite() {
        return Err(Error::format(&bin, "non-finite gray value"));
    }
    let mut seq = Sequence::new(side.name.clone(), frames)?;
    if side.has_mask {
        let bytes = fs::read(&mask).map_err(|e| Error::io(&mask, e))?;
        if bytes.len() != n {
            return Err(Error::format(
                &mask,
                format!("expected {n} bytes, found {}", bytes.len()),
            ));
        }
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::format(&mask, "mask bytes must be 0 or 1"));
        }
        let m = Tensor::new(
            vec![side.t, side.h, side.w],
            bytes.iter().map(|&b| b as f64).collect(),
        )?;
        seq = seq.with_masks(m)?;
    }
    seq.tracks = side.tracks;
    seq.noise = side.noise;
    seq.snr = side.snr;
    Ok(seq)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != CONTAINER_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    Ok(m)
}

/// Writes all sequences and the manifest; returns every path written.
pub fn write_dataset(dir: &Path, seqs: &[GeneratedSequence]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for g in seqs {
        written.extend(write_sequence(dir, &g.sequence)?);
    }
    let manifest = Manifest {
        version: CONTAINER_VERSION,
        sequences: seqs
            .iter()
            .map(|g| ManifestEntry {
                name: g.sequence.name.clone(),
                split: g.split,
                group: g.group.clone(),
            })
            .collect(),
    };
    written.push(write_manifest(dir, &manifest)?);
    Ok(written)
}

/// Reads every sequence listed in the manifest of `dir`, optionally only one
/// split.
pub fn read_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<Sequence>> {
    let m = read_manifest(dir)?;
    m.names(split)
        .into_iter()
        .map(|n| read_sequence(dir, n))
        .collect()
}

/// Min-max scaled 8-bit rendering of a whole sequence, for viewing only.
pub fn to_u8(frames: &Tensor) -> Vec<u8> {
    let lo = frames.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = frames
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    frames
        .data()
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect()
}
