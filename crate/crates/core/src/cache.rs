//! Single-file container for offline agent knowledge and for prompt/gate
//! snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TAKC" | version u16 | payload bytes (f32 LE) ... | manifest JSON
//!        | manifest_len u64 | manifest_crc u32 | "TAKC"
//! ```
//!
//! Every manifest entry carries its payload offset, length and CRC32, so a
//! reader locates any record in O(1) once the manifest is loaded.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentModality, AgentRegistry, KnowledgeSource, RosterLayout};
use crate::error::{invalid, Error, Result};
use crate::model::VisualTokenSequence;

pub const MAGIC: &[u8; 4] = b"TAKC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 6;
const TRAILER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    FeatureStack,
    ClassFeatures,
    ScoreVector,
    AttentionMap,
    PromptMatrix,
    Parameter,
}

impl PayloadKind {
    /// Agent modality this kind belongs to; `None` for snapshot kinds.
    pub fn modality(self) -> Option<AgentModality> {
        match self {
            PayloadKind::FeatureStack => Some(AgentModality::Vision),
            PayloadKind::ClassFeatures => Some(AgentModality::Language),
            PayloadKind::AttentionMap => Some(AgentModality::T2i),
            PayloadKind::ScoreVector => Some(AgentModality::I2t),
            PayloadKind::PromptMatrix | PayloadKind::Parameter => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub agent_id: String,
    pub dataset_id: String,
    pub split: String,
    pub key: u64,
}

impl RecordKey {
    pub fn new(agent_id: &str, dataset_id: &str, split: &str, key: u64) -> Self {
        Self {
            agent_id: agent_id.into(),
            dataset_id: dataset_id.into(),
            split: split.into(),
            key,
        }
    }
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/{}", self.agent_id, self.dataset_id, self.split, self.key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeCacheRecord {
    pub key: RecordKey,
    pub kind: PayloadKind,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    /// Fingerprint of the agent descriptor that produced the record.
    pub fingerprint: u64,
}

impl KnowledgeCacheRecord {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.values.len() {
            return Err(invalid(format!(
                "record {}: shape {:?} holds {n} values, got {}",
                self.key,
                self.shape,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("record {}: non-finite value", self.key)));
        }
        Ok(())
    }

    pub fn from_matrix(key: RecordKey, kind: PayloadKind, m: &Array2<f64>, fingerprint: u64) -> Self {
        Self {
            key,
            kind,
            shape: vec![m.nrows(), m.ncols()],
            values: m.iter().map(|&v| v as f32).collect(),
            fingerprint,
        }
    }

    pub fn from_vector(key: RecordKey, kind: PayloadKind, v: &Array1<f64>, fingerprint: u64) -> Self {
        Self {
            key,
            kind,
            shape: vec![v.len()],
            values: v.iter().map(|&x| x as f32).collect(),
            fingerprint,
        }
    }

    /// Payload as a matrix; 1-D payloads become a single row.
    pub fn matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(invalid(format!("record {} is not 1-D or 2-D", self.key))),
        };
        Ok(Array2::from_shape_vec((r, c), self.values.iter().map(|&v| v as f64).collect())
            .expect("shape validated"))
    }

    pub fn vector(&self) -> Array1<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub key: RecordKey,
    pub kind: PayloadKind,
    pub shape: Vec<usize>,
    pub fingerprint: u64,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u16,
    pub seed_fingerprint: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub records: Vec<ManifestEntry>,
}

/// Serialize `records` into container bytes.
pub fn encode_cache(
    records: &[KnowledgeCacheRecord],
    seed_fingerprint: u64,
    meta: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        if !seen.insert(&rec.key) {
            return Err(invalid(format!("duplicate key {}", rec.key)));
        }
        let offset = out.len() as u64;
        let start = out.len();
        for v in &rec.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            key: rec.key.clone(),
            kind: rec.kind,
            shape: rec.shape.clone(),
            fingerprint: rec.fingerprint,
            offset,
            length: (out.len() - start) as u64,
            crc: crc32fast::hash(&out[start..]),
        });
    }
    let manifest = CacheManifest {
        version: VERSION,
        seed_fingerprint,
        meta,
        records: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.extend_from_slice(&json);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(MAGIC);
    Ok(out)
}

/// Write a container file. Rejects duplicate keys before touching the disk.
pub fn write_cache(
    path: &Path,
    records: &[KnowledgeCacheRecord],
    seed_fingerprint: u64,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_cache(records, seed_fingerprint, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("takc.tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// An opened container. Immutable, so it can be shared between threads.
#[derive(Debug, Clone)]
pub struct CacheReader {
    bytes: Vec<u8>,
    manifest: CacheManifest,
    index: HashMap<RecordKey, usize>,
    path: PathBuf,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Corruption(format!("{}: {what}", path.display()))
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(std::fs::read(path)?, path)
    }

    pub fn from_bytes(bytes: Vec<u8>, path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN + TRAILER_LEN || &bytes[..4] != MAGIC || &bytes[bytes.len() - 4..] != MAGIC {
            return Err(corrupt(path, "bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let t = bytes.len() - TRAILER_LEN;
        let len = u64::from_le_bytes(bytes[t..t + 8].try_into().expect("8 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[t + 8..t + 12].try_into().expect("4 bytes"));
        if len > t - HEADER_LEN {
            return Err(corrupt(path, "manifest length out of range"));
        }
        let json = &bytes[t - len..t];
        if crc32fast::hash(json) != crc {
            return Err(corrupt(path, "manifest checksum mismatch"));
        }
        let manifest: CacheManifest = serde_json::from_slice(json).map_err(|e| corrupt(path, e))?;
        let payload_end = (t - len) as u64;
        let mut index = HashMap::with_capacity(manifest.records.len());
        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.records.len());
        for (i, e) in manifest.records.iter().enumerate() {
            if e.offset < HEADER_LEN as u64 || e.offset + e.length > payload_end {
                return Err(corrupt(path, format!("record {} out of bounds", e.key)));
            }
            if index.insert(e.key.clone(), i).is_some() {
                return Err(corrupt(path, format!("duplicate key {}", e.key)));
            }
            spans.push((e.offset, e.offset + e.length));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(corrupt(path, "overlapping records"));
        }
        Ok(Self {
            bytes,
            manifest,
            index,
            path: path.to_path_buf(),
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn entry(&self, key: &RecordKey) -> Result<&ManifestEntry> {
        self.index
            .get(key)
            .map(|&i| &self.manifest.records[i])
            .ok_or_else(|| Error::Lookup(format!("no record {key}")))
    }

    /// Read and checksum one record.
    pub fn get(&self, key: &RecordKey) -> Result<KnowledgeCacheRecord> {
        let e = self.entry(key)?;
        let raw = &self.bytes[e.offset as usize..(e.offset + e.length) as usize];
        if crc32fast::hash(raw) != e.crc {
            return Err(corrupt(&self.path, format!("checksum mismatch in {key}")));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let rec = KnowledgeCacheRecord {
            key: e.key.clone(),
            kind: e.kind,
            shape: e.shape.clone(),
            values,
            fingerprint: e.fingerprint,
        };
        rec.validate().map_err(|err| corrupt(&self.path, err))?;
        Ok(rec)
    }

    pub fn records(&self) -> Result<Vec<KnowledgeCacheRecord>> {
        self.manifest.records.iter().map(|e| self.get(&e.key)).collect()
    }
}

pub fn read_cache(path: &Path, key: &RecordKey) -> Result<KnowledgeCacheRecord> {
    CacheReader::open(path)?.get(key)
}

/// What a knowledge cache for one dataset must hold.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheCoverage {
    pub dataset_id: String,
    pub num_classes: usize,
    /// Patch tokens per image (the attention-map width).
    pub patches: usize,
    pub sample_ids: Vec<u64>,
    /// Fingerprint of the data generator; stored as the manifest's seed fingerprint.
    pub fingerprint: u64,
}

pub const SAMPLE_SPLIT: &str = "train";
pub const CLASS_SPLIT: &str = "classes";

/// Expected `(key, kind, shape)` of every record for `registry` over `coverage`.
pub fn expected_records(registry: &AgentRegistry, cov: &CacheCoverage) -> Vec<(RecordKey, PayloadKind, Vec<usize>)> {
    let mut out = Vec::new();
    for a in &registry.agents {
        let sample_key = |id| RecordKey::new(&a.agent_id, &cov.dataset_id, SAMPLE_SPLIT, id);
        match a.modality {
            AgentModality::Vision => {
                for &id in &cov.sample_ids {
                    out.push((sample_key(id), PayloadKind::FeatureStack, vec![a.layers, a.width]));
                }
            }
            AgentModality::Language => out.push((
                RecordKey::new(&a.agent_id, &cov.dataset_id, CLASS_SPLIT, 0),
                PayloadKind::ClassFeatures,
                vec![cov.num_classes, a.width],
            )),
            AgentModality::T2i => {
                for &id in &cov.sample_ids {
                    out.push((sample_key(id), PayloadKind::AttentionMap, vec![cov.num_classes, cov.patches]));
                }
            }
            AgentModality::I2t => {
                for &id in &cov.sample_ids {
                    out.push((sample_key(id), PayloadKind::ScoreVector, vec![cov.num_classes]));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum CacheIssue {
    Unreadable { detail: String },
    Corrupt { key: String },
    Stale { key: String },
    ShapeDrift { key: String, expected: Vec<usize>, found: Vec<usize> },
    KindMismatch { key: String },
    Missing { key: String },
    UnknownAgent { agent_id: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<CacheIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Check a cache against a registry and the records it should cover.
/// Never fails: every problem becomes an entry of the report.
pub fn validate_cache(path: &Path, registry: &AgentRegistry, coverage: &CacheCoverage) -> ValidationReport {
    let mut report = ValidationReport::default();
    let reader = match CacheReader::open(path) {
        Ok(r) => r,
        Err(e) => {
            report.issues.push(CacheIssue::Unreadable { detail: e.to_string() });
            return report;
        }
    };
    let known: HashMap<&str, u64> = registry
        .agents
        .iter()
        .map(|a| (a.agent_id.as_str(), a.fingerprint()))
        .collect();
    if reader.manifest.seed_fingerprint != coverage.fingerprint {
        report.issues.push(CacheIssue::Stale {
            key: coverage.dataset_id.clone(),
        });
    }
    let mut unknown = HashSet::new();
    for e in &reader.manifest.records {
        if !known.contains_key(e.key.agent_id.as_str()) && unknown.insert(e.key.agent_id.clone()) {
            report.issues.push(CacheIssue::UnknownAgent {
                agent_id: e.key.agent_id.clone(),
            });
        }
    }
    for (key, kind, shape) in expected_records(registry, coverage) {
        let name = key.to_string();
        let Ok(e) = reader.entry(&key) else {
            report.issues.push(CacheIssue::Missing { key: name });
            continue;
        };
        if known[key.agent_id.as_str()] != e.fingerprint {
            report.issues.push(CacheIssue::Stale { key: name.clone() });
        }
        if e.kind != kind {
            report.issues.push(CacheIssue::KindMismatch { key: name.clone() });
        }
        if e.shape != shape {
            report.issues.push(CacheIssue::ShapeDrift {
                key: name.clone(),
                expected: shape,
                found: e.shape.clone(),
            });
        }
        if reader.get(&key).is_err() {
            report.issues.push(CacheIssue::Corrupt { key: name });
        }
    }
    report
}

/// Agent knowledge served from a validated cache.
pub struct CachedKnowledge {
    reader: CacheReader,
    layout: RosterLayout,
    dataset_id: String,
    class_features: Vec<Array2<f64>>,
}

impl CachedKnowledge {
    /// Validates the cache first; any issue is a validation error.
    pub fn open(path: &Path, registry: &AgentRegistry, coverage: &CacheCoverage) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let report = validate_cache(path, registry, coverage);
        if let Some(first) = report.issues.first() {
            return Err(Error::Validation(format!(
                "cache {} has {} issue(s), first: {}",
                path.display(),
                report.issues.len(),
                serde_json::to_string(first).expect("issue serializes")
            )));
        }
        let reader = CacheReader::open(path)?;
        let by = |m| registry.by_modality(m);
        let layout = RosterLayout {
            vision: by(AgentModality::Vision)
                .map(|a| (a.agent_id.clone(), a.width, a.layers))
                .collect(),
            language: by(AgentModality::Language).map(|a| (a.agent_id.clone(), a.width)).collect(),
            t2i: by(AgentModality::T2i).map(|a| a.agent_id.clone()).collect(),
            i2t: by(AgentModality::I2t).map(|a| a.agent_id.clone()).collect(),
            num_classes: coverage.num_classes,
        };
        let class_features = layout
            .language
            .iter()
            .map(|(id, _)| reader.get(&RecordKey::new(id, &coverage.dataset_id, CLASS_SPLIT, 0))?.matrix())
            .collect::<Result<_>>()?;
        Ok(Self {
            reader,
            layout,
            dataset_id: coverage.dataset_id.clone(),
            class_features,
        })
    }

    fn sample(&self, agent_id: &str, image: &VisualTokenSequence) -> Result<KnowledgeCacheRecord> {
        self.reader
            .get(&RecordKey::new(agent_id, &self.dataset_id, SAMPLE_SPLIT, image.sample_id))
    }
}

impl KnowledgeSource for CachedKnowledge {
    fn layout(&self) -> &RosterLayout {
        &self.layout
    }

    fn vision_stack(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>> {
        self.sample(&self.layout.vision[agent].0, image)?.matrix()
    }

    fn class_features(&self, agent: usize) -> Result<Array2<f64>> {
        Ok(self.class_features[agent].clone())
    }

    fn attention_map(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>> {
        self.sample(&self.layout.t2i[agent], image)?.matrix()
    }

    fn i2t_vector(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array1<f64>> {
        Ok(self.sample(&self.layout.i2t[agent], image)?.vector())
    }

    fn check(&self, images: &[&VisualTokenSequence]) -> Result<()> {
        let ids = self
            .layout
            .vision
            .iter()
            .map(|v| &v.0)
            .chain(&self.layout.t2i)
            .chain(&self.layout.i2t);
        for id in ids {
            for im in images {
                let key = RecordKey::new(id, &self.dataset_id, SAMPLE_SPLIT, im.sample_id);
                if !self.reader.contains(&key) {
                    return Err(Error::Validation(format!("cache has no record {key}")));
                }
            }
        }
        Ok(())
    }
}

/// Records of every agent in `knowledge` over `images`, in registry order.
pub fn extract_records(
    knowledge: &dyn KnowledgeSource,
    registry: &AgentRegistry,
    dataset_id: &str,
    images: &[&VisualTokenSequence],
) -> Result<Vec<KnowledgeCacheRecord>> {
    let layout = knowledge.layout();
    let pos = |ids: Vec<&String>, id: &str| ids.iter().position(|x| *x == id).expect("agent in layout");
    let mut out = Vec::new();
    for a in &registry.agents {
        let fp = a.fingerprint();
        let id = a.agent_id.as_str();
        let key = |img: &VisualTokenSequence| RecordKey::new(id, dataset_id, SAMPLE_SPLIT, img.sample_id);
        match a.modality {
            AgentModality::Vision => {
                let i = pos(layout.vision.iter().map(|v| &v.0).collect(), id);
                for img in images {
                    let m = knowledge.vision_stack(i, img)?;
                    out.push(KnowledgeCacheRecord::from_matrix(key(img), PayloadKind::FeatureStack, &m, fp));
                }
            }
            AgentModality::Language => {
                let i = pos(layout.language.iter().map(|v| &v.0).collect(), id);
                let m = knowledge.class_features(i)?;
                let k = RecordKey::new(id, dataset_id, CLASS_SPLIT, 0);
                out.push(KnowledgeCacheRecord::from_matrix(k, PayloadKind::ClassFeatures, &m, fp));
            }
            AgentModality::T2i => {
                let i = pos(layout.t2i.iter().collect(), id);
                for img in images {
                    let m = knowledge.attention_map(i, img)?;
                    out.push(KnowledgeCacheRecord::from_matrix(key(img), PayloadKind::AttentionMap, &m, fp));
                }
            }
            AgentModality::I2t => {
                let i = pos(layout.i2t.iter().collect(), id);
                for img in images {
                    let v = knowledge.i2t_vector(i, img)?;
                    out.push(KnowledgeCacheRecord::from_vector(key(img), PayloadKind::ScoreVector, &v, fp));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn rec(agent: &str, key: u64, values: Vec<f32>) -> KnowledgeCacheRecord {
        KnowledgeCacheRecord {
            key: RecordKey::new(agent, "ds", "train", key),
            kind: PayloadKind::ScoreVector,
            shape: vec![values.len()],
            values,
            fingerprint: 9,
        }
    }

    #[test]
    fn zero_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.takc");
        write_cache(&p, &[], 1, BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(&bytes[bytes.len() - 4..], MAGIC);
        let r = CacheReader::open(&p).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.manifest().seed_fingerprint, 1);
    }

    #[test]
    fn single_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.takc");
        let r = rec("a", 3, vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7]);
        write_cache(&p, std::slice::from_ref(&r), 0, BTreeMap::new()).unwrap();
        let back = read_cache(&p, &r.key).unwrap();
        assert_eq!(back, r);
        let bits: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn hundred_random_records() {
        let mut rng = seed::rng(4, "cache-test");
        let kinds = [
            PayloadKind::FeatureStack,
            PayloadKind::ClassFeatures,
            PayloadKind::ScoreVector,
            PayloadKind::AttentionMap,
        ];
        let recs: Vec<_> = (0..100)
            .map(|i| {
                let r = rng.random_range(1..5);
                let c = rng.random_range(1..9);
                KnowledgeCacheRecord {
                    key: RecordKey::new(&format!("agent{}", i % 7), "ds", "train", i),
                    kind: kinds[i as usize % 4],
                    shape: vec![r, c],
                    values: (0..r * c).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
                    fingerprint: rng.random(),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("many.takc");
        write_cache(&p, &recs, 0, BTreeMap::new()).unwrap();
        let reader = CacheReader::open(&p).unwrap();
        for r in &recs {
            assert_eq!(&reader.get(&r.key).unwrap(), r);
        }
        assert_eq!(reader.records().unwrap(), recs);
    }

    #[test]
    fn duplicate_key_rejected_and_missing_key_is_lookup() {
        let r = rec("a", 1, vec![1.0]);
        assert!(matches!(encode_cache(&[r.clone(), r.clone()], 0, BTreeMap::new()), Err(Error::InvalidInput(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.takc");
        write_cache(&p, &[r], 0, BTreeMap::new()).unwrap();
        let missing = RecordKey::new("a", "ds", "train", 2);
        assert!(matches!(read_cache(&p, &missing), Err(Error::Lookup(_))));
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let r = rec("a", 1, vec![1.0, 2.0]);
        let mut bytes = encode_cache(std::slice::from_ref(&r), 0, BTreeMap::new()).unwrap();
        bytes[HEADER_LEN] ^= 0x40;
        let reader = CacheReader::from_bytes(bytes, Path::new("mem")).unwrap();
        assert!(matches!(reader.get(&r.key), Err(Error::Corruption(_))));

        let mut bytes = encode_cache(&[r], 0, BTreeMap::new()).unwrap();
        let n = bytes.len();
        bytes[n - TRAILER_LEN - 3] ^= 1;
        assert!(matches!(CacheReader::from_bytes(bytes, Path::new("mem")), Err(Error::Corruption(_))));
    }
}
