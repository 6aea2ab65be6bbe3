//! Raw-mode ingestion: per-frame complex CSI plus pose labels to the
//! canonical corpus.
//!
//! ```text
//! src/manifest.json                       format "graphpose-raw-csi"
//! src/<subject>/<environment>/<action>/<name>.csi
//! src/<subject>/<environment>/<action>/<name>.pose
//! ```
//!
//! A `.csi` file holds `T` frames back to back, each `A·S` interleaved
//! little-endian float32 `(re, im)` pairs, antenna-major. A `.pose` file holds
//! `J·3` little-endian float32 coordinates in the manifest's units.

use std::fs;
use std::path::{Path, PathBuf};

use super::corpus::{read_manifest_as, write_corpus};
use super::{preprocess_window, CsiSample, DataError, DatasetIndex, Manifest, Pose, PoseUnits, RawCsiFrame};

pub const RAW_FORMAT: &str = "graphpose-raw-csi";

fn files_with(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn read_window(path: &Path, m: &Manifest) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let frame_bytes = m.antennas * m.subcarriers * 8;
    if bytes.len() != frame_bytes * m.frames {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes ({} frames), found {}", frame_bytes * m.frames, m.frames, bytes.len()),
        });
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .enumerate()
        .map(|(t, c)| RawCsiFrame::from_interleaved_f32(m.antennas, m.subcarriers, c, t as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let window = preprocess_window(&frames).map_err(|e| DataError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(window.amplitude.iter().map(|&v| v as f32).collect())
}

fn read_pose(path: &Path, m: &Manifest) -> Result<Pose, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() != m.joints * 12 {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes of pose, found {}", m.joints * 12, bytes.len()),
        });
    }
    let scale = m.units.to_mm();
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 * scale)
        .collect();
    Ok(Pose::from_flat(&flat))
}

/// Preprocesses a raw tree into a canonical corpus (poses in mm) under `out`.
pub fn ingest_raw(src: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let src = src.as_ref();
    let raw = read_manifest_as(src, RAW_FORMAT)?;
    let mut samples = Vec::new();
    for (subject, sdir) in subdirs(src)? {
        for (environment, edir) in subdirs(&sdir)? {
            for (action, adir) in subdirs(&edir)? {
                for csi in files_with(&adir, "csi")? {
                    let pose_path = csi.with_extension("pose");
                    if !pose_path.is_file() {
                        return Err(DataError::Malformed {
                            path: csi.clone(),
                            reason: format!("no label file {}", pose_path.display()),
                        });
                    }
                    let sample = CsiSample {
                        antennas: raw.antennas,
                        subcarriers: raw.subcarriers,
                        frames: raw.frames,
                        z: read_window(&csi, &raw)?,
                        pose: read_pose(&pose_path, &raw)?,
                        subject_id: subject.clone(),
                        environment_id: environment.clone(),
                        action_id: action.clone(),
                    };
                    sample.validate(raw.joints).map_err(|e| DataError::Malformed {
                        path: csi.clone(),
                        reason: e.to_string(),
                    })?;
                    samples.push(sample);
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(DataError::Malformed {
            path: src.to_path_buf(),
            reason: "no .csi files found".into(),
        });
    }
    let mut manifest = Manifest::new(raw.antennas, raw.subcarriers, raw.frames, raw.joints, PoseUnits::Mm);
    manifest.subjects = raw.subjects;
    manifest.environments = raw.environments;
    manifest.actions = raw.actions;
    write_corpus(out, manifest, &samples)
}

/// Re-exports an existing canonical corpus under `out` with poses in mm.
pub fn ingest_canonical(src: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let index = super::load_mmfi(src)?;
    let samples = index.load_all()?;
    let m = index.manifest();
    let mut manifest = m.clone();
    manifest.units = PoseUnits::Mm;
    write_corpus(out, manifest, &samples)
}
