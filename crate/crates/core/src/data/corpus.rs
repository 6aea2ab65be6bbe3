//! On-disk corpus layout.
//!
//! ```text
//! root/manifest.json
//! root/<subject>/<environment>/<action>/<idx>.bin
//! ```
//!
//! A sample file is little-endian: magic `GPFI`, `u32` version, `u32` dims
//! `A S T J`, then `A·S·T` float32 values of `z` and `J·3` float32 pose
//! coordinates, both row-major. Pose units are declared by the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Pose};

pub const SAMPLE_MAGIC: &[u8; 4] = b"GPFI";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 4 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseUnits {
    Mm,
    M,
}

impl PoseUnits {
    pub fn to_mm(self) -> f64 {
        match self {
            Self::Mm => 1.0,
            Self::M => 1000.0,
        }
    }
}

/// Parameters of the synthetic CSI map, recorded so a corpus can be
/// regenerated or audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMap {
    pub seed: u64,
    pub noise_sigma: f64,
    pub wavelength_mm: f64,
    /// `(J, 3)` unit projection directions.
    pub directions: Vec<[f64; 3]>,
    /// `(A, S, J)` mixing weights.
    pub weights: Vec<f64>,
    /// `(A, S, T, J)` phase offsets.
    pub phases: Vec<f64>,
    /// `(E, A, S)` static per-environment offsets.
    pub environment_offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub antennas: usize,
    pub subcarriers: usize,
    pub frames: usize,
    pub joints: usize,
    pub units: PoseUnits,
    pub subjects: Vec<String>,
    pub environments: Vec<String>,
    #[serde(default)]
    pub actions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthMap>,
}

impl Manifest {
    pub const FORMAT: &'static str = "graphpose-corpus";

    pub fn new(antennas: usize, subcarriers: usize, frames: usize, joints: usize, units: PoseUnits) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: SAMPLE_VERSION,
            antennas,
            subcarriers,
            frames,
            joints,
            units,
            subjects: Vec::new(),
            environments: Vec::new(),
            actions: Vec::new(),
            synth: None,
        }
    }

    pub fn window_len(&self) -> usize {
        self.antennas * self.subcarriers * self.frames
    }
}

/// One preprocessed window with its pose label (millimeters).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub antennas: usize,
    pub subcarriers: usize,
    pub frames: usize,
    /// Row-major `(A, S, T)`.
    pub z: Vec<f32>,
    pub pose: Pose,
    pub subject_id: String,
    pub environment_id: String,
    pub action_id: String,
}

impl CsiSample {
    pub fn validate(&self, joints: usize) -> Result<(), DataError> {
        if self.z.len() != self.antennas * self.subcarriers * self.frames {
            return Err(DataError::Shape(format!(
                "sample z has {} entries, expected {}x{}x{}",
                self.z.len(),
                self.antennas,
                self.subcarriers,
                self.frames
            )));
        }
        if self.pose.num_joints() != joints {
            return Err(DataError::Shape(format!(
                "pose has {} joints, expected {joints}",
                self.pose.num_joints()
            )));
        }
        if !self.z.iter().all(|x| x.is_finite()) || !self.pose.is_finite() {
            return Err(DataError::NonFinite("sample tensor or pose".into()));
        }
        Ok(())
    }

    /// Relative path of this sample under a corpus root.
    pub fn relative_path(&self, idx: usize) -> PathBuf {
        PathBuf::from(&self.subject_id)
            .join(&self.environment_id)
            .join(&self.action_id)
            .join(format!("{idx:06}.bin"))
    }
}

/// Encodes a sample. Pose coordinates are divided by `units.to_mm()`.
pub fn encode_sample(sample: &CsiSample, units: PoseUnits) -> Vec<u8> {
    let j = sample.pose.num_joints();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (sample.z.len() + 3 * j));
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    for d in [sample.antennas, sample.subcarriers, sample.frames, j] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &sample.z {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let scale = units.to_mm();
    for x in sample.pose.to_flat() {
        out.extend_from_slice(&((x / scale) as f32).to_le_bytes());
    }
    out
}

/// Parsed sample body: `(dims, z, pose in mm)`.
pub fn decode_sample(bytes: &[u8], units: PoseUnits) -> Result<([usize; 4], Vec<f32>, Pose), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file too short for header ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != SAMPLE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dims = [word(8), word(12), word(16), word(20)].map(|d| d as usize);
    let nz = dims[0] * dims[1] * dims[2];
    let np = dims[3] * 3;
    let expected = HEADER_LEN + 4 * (nz + np);
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if floats.iter().any(|x| !x.is_finite()) {
        return Err("non-finite value".into());
    }
    let scale = units.to_mm();
    let pose: Vec<f64> = floats[nz..].iter().map(|&x| x as f64 * scale).collect();
    Ok((dims, floats[..nz].to_vec(), Pose::from_flat(&pose)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// Path relative to the corpus root.
    pub locator: PathBuf,
    pub subject_id: String,
    pub environment_id: String,
    pub action_id: String,
}

/// Immutable list of samples in a corpus.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    root: PathBuf,
    manifest: Manifest,
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(root: PathBuf, manifest: Manifest, entries: Vec<IndexEntry>) -> Self {
        Self {
            root,
            manifest,
            entries,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A new index over the same corpus restricted to `keep` (positions into
    /// this index).
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            manifest: self.manifest.clone(),
            entries: keep.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }

    pub fn counts_by_subject(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.subject_id.clone()).or_default() += 1;
        }
        out
    }

    pub fn counts_by_environment(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.environment_id.clone()).or_default() += 1;
        }
        out
    }

    pub fn load(&self, i: usize) -> Result<CsiSample, DataError> {
        let entry = &self.entries[i];
        let path = self.root.join(&entry.locator);
        let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        let (dims, z, pose) =
            decode_sample(&bytes, self.manifest.units).map_err(|reason| DataError::Malformed { path: path.clone(), reason })?;
        let m = &self.manifest;
        if dims != [m.antennas, m.subcarriers, m.frames, m.joints] {
            return Err(DataError::Malformed {
                path,
                reason: format!(
                    "dims {dims:?} differ from manifest ({}, {}, {}, {})",
                    m.antennas, m.subcarriers, m.frames, m.joints
                ),
            });
        }
        Ok(CsiSample {
            antennas: dims[0],
            subcarriers: dims[1],
            frames: dims[2],
            z,
            pose,
            subject_id: entry.subject_id.clone(),
            environment_id: entry.environment_id.clone(),
            action_id: entry.action_id.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<CsiSample>, DataError> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DataError> {
    read_manifest_as(root, Manifest::FORMAT)
}

pub(crate) fn read_manifest_as(root: &Path, format: &str) -> Result<Manifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(DataError::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != format {
        return Err(DataError::Malformed {
            path,
            reason: format!("format is {:?}, expected {format:?}", manifest.format),
        });
    }
    Ok(manifest)
}

/// Indexes a canonical corpus tree, validating every sample file.
///
/// Subject, environment and action ids come from the directory names.
pub fn load_mmfi(root: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let mut entries = Vec::new();
    for (subject, sdir) in sorted_dirs(root)? {
        for (environment, edir) in sorted_dirs(&sdir)? {
            for (action, adir) in sorted_dirs(&edir)? {
                let mut files: Vec<PathBuf> = fs::read_dir(&adir)
                    .map_err(|e| DataError::io(&adir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                    .collect();
                files.sort();
                for path in files {
                    let locator = path.strip_prefix(root).expect("walked under root").to_path_buf();
                    entries.push(IndexEntry {
                        locator,
                        subject_id: subject.clone(),
                        environment_id: environment.clone(),
                        action_id: action.clone(),
                    });
                }
            }
        }
    }
    let index = DatasetIndex::new(root.to_path_buf(), manifest, entries);
    for i in 0..index.len() {
        index.load(i)?;
    }
    Ok(index)
}

/// Writes samples and the manifest under `root`, returning the index.
///
/// Subjects, environments and actions in the manifest are filled from the
/// samples when left empty.
pub fn write_corpus(root: impl AsRef<Path>, mut manifest: Manifest, samples: &[CsiSample]) -> Result<DatasetIndex, DataError> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let collect = |f: fn(&CsiSample) -> &String| {
        let mut v: Vec<String> = samples.iter().map(|s| f(s).clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    if manifest.subjects.is_empty() {
        manifest.subjects = collect(|s| &s.subject_id);
    }
    if manifest.environments.is_empty() {
        manifest.environments = collect(|s| &s.environment_id);
    }
    if manifest.actions.is_empty() {
        manifest.actions = collect(|s| &s.action_id);
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate(manifest.joints)?;
        let locator = s.relative_path(i);
        let path = root.join(&locator);
        let dir = path.parent().expect("sample path has parent");
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        fs::write(&path, encode_sample(s, manifest.units)).map_err(|e| DataError::io(&path, e))?;
        entries.push(IndexEntry {
            locator,
            subject_id: s.subject_id.clone(),
            environment_id: s.environment_id.clone(),
            action_id: s.action_id.clone(),
        });
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(DatasetIndex::new(root.to_path_buf(), manifest, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: &str, env: &str, seed: f32) -> CsiSample {
        CsiSample {
            antennas: 2,
            subcarriers: 3,
            frames: 2,
            z: (0..12).map(|i| i as f32 * seed).collect(),
            pose: Pose::from_flat(&(0..6).map(|i| i as f64 + seed as f64).collect::<Vec<_>>()),
            subject_id: subject.into(),
            environment_id: env.into(),
            action_id: "A01".into(),
        }
    }

    fn manifest() -> Manifest {
        Manifest::new(2, 3, 2, 2, PoseUnits::Mm)
    }

    #[test]
    fn four_sample_tree_indexes_four_entries() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            sample("S01", "E01", 1.0),
            sample("S01", "E02", 2.0),
            sample("S02", "E01", 3.0),
            sample("S02", "E02", 4.0),
        ];
        write_corpus(dir.path(), manifest(), &samples).unwrap();
        let index = load_mmfi(dir.path()).unwrap();
        assert_eq!(index.len(), 4);
        assert_eq!(index.counts_by_subject()["S02"], 2);
        assert_eq!(index.counts_by_environment()["E01"], 2);
        assert_eq!(index.manifest().subjects, vec!["S01", "S02"]);
        let back = index.load_all().unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn corrupted_file_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let idx = write_corpus(dir.path(), manifest(), &[sample("S01", "E01", 1.0), sample("S02", "E01", 1.0)]).unwrap();
        let victim = dir.path().join(&idx.entries()[1].locator);
        let mut bytes = fs::read(&victim).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&victim, bytes).unwrap();
        match load_mmfi(dir.path()) {
            Err(DataError::Malformed { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_and_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_mmfi(dir.path()), Err(DataError::MissingManifest(_))));

        write_corpus(dir.path(), manifest(), &[sample("S01", "E01", 1.0)]).unwrap();
        let mut m = manifest();
        m.subcarriers = 4;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_mmfi(dir.path()), Err(DataError::Malformed { .. })));
    }

    #[test]
    fn meters_are_converted_to_millimeters() {
        let s = sample("S01", "E01", 1.0);
        let bytes = encode_sample(&s, PoseUnits::M);
        let (_, _, pose) = decode_sample(&bytes, PoseUnits::M).unwrap();
        for (a, b) in pose.to_flat().iter().zip(s.pose.to_flat()) {
            assert!((a - b).abs() < 1e-3);
        }
        let (_, _, raw) = decode_sample(&bytes, PoseUnits::Mm).unwrap();
        assert!((raw.joints()[1][0] - 0.004).abs() < 1e-6);
    }
}
