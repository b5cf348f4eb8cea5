//! Canonical manifest format, ingestion, caption statistics, blend
//! composition, and specialist QA merging.
//!
//! A manifest is a JSONL file (one [`SampleRecord`] per line, sorted by id)
//! plus a `<file>.lineage.json` sidecar carrying the digest chain back to the
//! round-0 ingest. Manifests are immutable values after load; every operation
//! here produces a new value or file, never an in-place mutation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json at {path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty input: manifest has no records")]
    EmptyInput,
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("unknown sample ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("blend target {requested} exceeds source size {available} for {path}")]
    BlendTargetTooLarge {
        path: String,
        requested: u64,
        available: u64,
    },
    #[error("invalid blend spec: {0}")]
    InvalidBlendSpec(String),
    #[error("missing lineage sidecar for {0}")]
    MissingLineage(String),
    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("records not unique or misordered: {0}")]
    InvalidManifest(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionStatus {
    Generated,
    Carried,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Specialist {
    Spatial,
    Grounding,
    Ocr,
}

impl Specialist {
    /// Merge order within a round: spatial, then grounding, then ocr.
    pub fn rank(self) -> u8 {
        match self {
            Specialist::Spatial => 0,
            Specialist::Grounding => 1,
            Specialist::Ocr => 2,
        }
    }
}

impl fmt::Display for Specialist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Specialist::Spatial => write!(f, "spatial"),
            Specialist::Grounding => write!(f, "grounding"),
            Specialist::Ocr => write!(f, "ocr"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub round: u32,
    pub prompt_id: String,
    pub model_id: String,
    pub text: String,
    pub status: CaptionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QATurn {
    pub specialist: Specialist,
    pub question: String,
    pub answer: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    pub source_dataset: String,
    pub recaptionable: bool,
    pub original_text: String,
    pub captions: Vec<CaptionEntry>,
    pub qa_turns: Vec<QATurn>,
}

impl SampleRecord {
    /// The caption in effect at `round`: the latest non-failed entry with
    /// round <= `round`, falling back to the original text.
    pub fn effective_caption(&self, round: u32) -> &str {
        self.captions
            .iter()
            .rev()
            .find(|c| c.round <= round && c.status != CaptionStatus::Failed)
            .map(|c| c.text.as_str())
            .unwrap_or(&self.original_text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub count: u64,
    pub mean_words: f64,
    pub std_words: f64,
    pub failed: u64,
}

impl CaptionStats {
    /// Renders the Avg #Words convention, e.g. "11.9 ± 9.0".
    pub fn render(&self) -> String {
        format!("{:.1} \u{00b1} {:.1}", self.mean_words, self.std_words)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub round: u32,
    pub parent_digest: String,
    pub prompt_mix_id: String,
    pub model_id: String,
    pub seed: u64,
    pub stats: CaptionStats,
}

impl LineageRecord {
    pub fn root(seed: u64) -> Self {
        LineageRecord {
            round: 0,
            parent_digest: String::new(),
            prompt_mix_id: String::new(),
            model_id: String::new(),
            seed,
            stats: CaptionStats::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub records: Vec<SampleRecord>,
    pub lineage: LineageRecord,
}

impl Manifest {
    pub fn new(mut records: Vec<SampleRecord>, lineage: LineageRecord) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Manifest {
            schema_version: SCHEMA_VERSION,
            records,
            lineage,
        })
    }

    /// Canonical on-disk bytes: one JSON record per line, sorted by id.
    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in &self.records {
            out.extend_from_slice(serde_json::to_string(rec).expect("record json").as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// SHA-256 hex digest of the canonical JSONL bytes.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_jsonl_bytes())
    }

    pub fn record_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content-derived sample id: SHA-256 of image_ref ++ 0x00 ++ original_text,
/// truncated to 32 hex chars.
pub fn sample_id(image_ref: &str, original_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(image_ref.as_bytes());
    h.update([0u8]);
    h.update(original_text.as_bytes());
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect::<String>()[..32].to_string()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(hex_digest(&bytes))
}

fn lineage_path(manifest_path: &Path) -> std::path::PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".lineage.json");
    std::path::PathBuf::from(s)
}

/// Writes the JSONL file and its lineage sidecar; returns the file digest.
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<String> {
    let bytes = m.to_jsonl_bytes();
    fs::write(path, &bytes).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let sidecar = serde_json::json!({
        "schema_version": m.schema_version,
        "round": m.lineage.round,
        "parent_digest": m.lineage.parent_digest,
        "prompt_mix_id": m.lineage.prompt_mix_id,
        "model_id": m.lineage.model_id,
        "seed": m.lineage.seed,
        "stats": m.lineage.stats,
    });
    let side_path = lineage_path(path);
    fs::write(
        &side_path,
        serde_json::to_string_pretty(&sidecar).expect("lineage json") + "\n",
    )
    .map_err(|e| CorpusError::Io {
        path: side_path.display().to_string(),
        source: e,
    })?;
    Ok(hex_digest(&bytes))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source: e,
        })?;
        records.push(rec);
    }
    let side_path = lineage_path(path);
    let side_bytes =
        fs::read(&side_path).map_err(|_| CorpusError::MissingLineage(path.display().to_string()))?;
    #[derive(Deserialize)]
    struct Sidecar {
        schema_version: u32,
        round: u32,
        parent_digest: String,
        prompt_mix_id: String,
        model_id: String,
        seed: u64,
        stats: CaptionStats,
    }
    let sc: Sidecar = serde_json::from_slice(&side_bytes).map_err(|e| CorpusError::Json {
        path: side_path.display().to_string(),
        line: 0,
        source: e,
    })?;
    if sc.schema_version != SCHEMA_VERSION {
        return Err(CorpusError::SchemaMismatch {
            found: sc.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let lineage = LineageRecord {
        round: sc.round,
        parent_digest: sc.parent_digest,
        prompt_mix_id: sc.prompt_mix_id,
        model_id: sc.model_id,
        seed: sc.seed,
        stats: sc.stats,
    };
    Manifest::new(records, lineage)
}

/// Checks that recomputing the parent file digest reproduces
/// `child.lineage.parent_digest`.
pub fn verify_parent(child: &Manifest, parent_path: &Path) -> Result<bool> {
    Ok(file_digest(parent_path)? == child.lineage.parent_digest)
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: Manifest,
    pub skipped: u64,
}

#[derive(Deserialize)]
struct PairRow {
    image_ref: Option<String>,
    #[serde(default)]
    text: String,
}

/// Ingests an image-text pair file (JSONL with `image_ref` and `text`) into a
/// round-0 manifest of recaptionable records.
pub fn ingest_pairs<R: Read>(source: R, dataset_tag: &str, seed: u64) -> Result<IngestOutcome> {
    let reader = BufReader::new(source);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0u64;
    for line in reader.lines() {
        let line = line.map_err(|e| CorpusError::Io {
            path: "<pairs>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PairRow = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let Some(image_ref) = row.image_ref else {
            skipped += 1;
            continue;
        };
        let id = sample_id(&image_ref, &row.text);
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        records.push(SampleRecord {
            id,
            image_ref,
            source_dataset: dataset_tag.to_string(),
            recaptionable: true,
            original_text: row.text,
            captions: Vec::new(),
            qa_turns: Vec::new(),
        });
    }
    let mut manifest = Manifest::new(records, LineageRecord::root(seed))?;
    manifest.lineage.stats = compute_caption_stats(&manifest, 0).unwrap_or_default();
    Ok(IngestOutcome { manifest, skipped })
}

#[derive(Deserialize)]
struct InterleavedRow {
    #[serde(default)]
    image_refs: Vec<String>,
    #[serde(default)]
    texts: Vec<String>,
}

/// Ingests an interleaved document file (JSONL with `image_refs` and `texts`
/// arrays). One record per image, never recaptioned; the document's text
/// segments are joined with a single space.
pub fn ingest_interleaved<R: Read>(
    source: R,
    dataset_tag: &str,
    seed: u64,
) -> Result<IngestOutcome> {
    let reader = BufReader::new(source);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0u64;
    for line in reader.lines() {
        let line = line.map_err(|e| CorpusError::Io {
            path: "<interleaved>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: InterleavedRow = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if row.image_refs.is_empty() {
            skipped += 1;
            continue;
        }
        let joined = row.texts.join(" ");
        for image_ref in row.image_refs {
            let id = sample_id(&image_ref, &joined);
            if !seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateId(id));
            }
            records.push(SampleRecord {
                id,
                image_ref,
                source_dataset: dataset_tag.to_string(),
                recaptionable: false,
                original_text: joined.clone(),
                captions: Vec::new(),
                qa_turns: Vec::new(),
            });
        }
    }
    let mut manifest = Manifest::new(records, LineageRecord::root(seed))?;
    manifest.lineage.stats = compute_caption_stats(&manifest, 0).unwrap_or_default();
    Ok(IngestOutcome { manifest, skipped })
}

/// Maximal whitespace-separated token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Mean and sample std of effective caption word counts at `round`, plus the
/// number of failed entries at that round.
pub fn compute_caption_stats(manifest: &Manifest, round: u32) -> Result<CaptionStats> {
    if manifest.records.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let counts: Vec<f64> = manifest
        .records
        .iter()
        .map(|r| word_count(r.effective_caption(round)) as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let std = if counts.len() <= 1 {
        0.0
    } else {
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
        var.sqrt()
    };
    let failed = manifest
        .records
        .iter()
        .flat_map(|r| r.captions.iter())
        .filter(|c| c.round == round && c.status == CaptionStatus::Failed)
        .count() as u64;
    Ok(CaptionStats {
        count: counts.len() as u64,
        mean_words: mean,
        std_words: std,
        failed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendEntry {
    pub path: String,
    #[serde(default)]
    pub count: Option<u64>,
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendSpec {
    pub entries: Vec<BlendEntry>,
    pub seed: u64,
}

impl BlendSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| CorpusError::Json {
            path: path.display().to_string(),
            line: 0,
            source: e,
        })
    }
}

fn entry_rng(seed: u64, entry_index: usize) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"blend");
    h.update(seed.to_le_bytes());
    h.update((entry_index as u64).to_le_bytes());
    let d = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&d);
    ChaCha20Rng::from_seed(key)
}

/// Deterministic seeded sample without replacement per entry. An entry may
/// give an absolute `count` or a `weight` (fraction of its source size).
pub fn compose_blend(spec: &BlendSpec) -> Result<Manifest> {
    let mut out: Vec<SampleRecord> = Vec::new();
    let mut ids = HashSet::new();
    for (i, entry) in spec.entries.iter().enumerate() {
        let src = read_manifest(Path::new(&entry.path))?;
        let available = src.records.len() as u64;
        let target = match (entry.count, entry.weight) {
            (Some(c), None) => {
                if c == 0 {
                    return Err(CorpusError::InvalidBlendSpec(format!(
                        "target count must be positive for {}",
                        entry.path
                    )));
                }
                c
            }
            (None, Some(w)) => {
                if !(w.is_finite() && w > 0.0) {
                    return Err(CorpusError::InvalidBlendSpec(format!(
                        "weight must be positive and finite for {}",
                        entry.path
                    )));
                }
                ((w * available as f64).round() as u64).max(1)
            }
            _ => {
                return Err(CorpusError::InvalidBlendSpec(format!(
                    "exactly one of count/weight required for {}",
                    entry.path
                )))
            }
        };
        if target > available {
            return Err(CorpusError::BlendTargetTooLarge {
                path: entry.path.clone(),
                requested: target,
                available,
            });
        }
        let mut rng = entry_rng(spec.seed, i);
        let mut chosen: Vec<usize> =
            index_sample(&mut rng, available as usize, target as usize).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let mut rec = src.records[idx].clone();
            if ids.contains(&rec.id) {
                let tag = entry.tag.as_deref().unwrap_or(&rec.source_dataset);
                let prefixed = format!("{tag}:{}", rec.id);
                if ids.contains(&prefixed) {
                    return Err(CorpusError::DuplicateId(prefixed));
                }
                rec.id = prefixed;
            }
            ids.insert(rec.id.clone());
            out.push(rec);
        }
    }
    let mut lineage = LineageRecord::root(spec.seed);
    lineage.model_id = "blend".to_string();
    let mut manifest = Manifest::new(out, lineage)?;
    manifest.lineage.stats = compute_caption_stats(&manifest, 0).unwrap_or_default();
    Ok(manifest)
}

#[derive(Debug)]
pub struct AppendOutcome {
    pub manifest: Manifest,
    pub skipped_duplicates: u64,
}

/// Appends validated specialist turns, keeping caption history untouched.
/// Turns end up sorted by (round, specialist) within each record.
pub fn append_qa_turns(manifest: &Manifest, annotations: &[(String, QATurn)]) -> Result<AppendOutcome> {
    let index: HashMap<String, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    let mut unknown: Vec<String> = annotations
        .iter()
        .filter(|(id, _)| !index.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(CorpusError::UnknownIds(unknown));
    }
    let mut out = manifest.clone();
    let mut seen: HashSet<(String, Specialist, u32, String)> = out
        .records
        .iter()
        .flat_map(|r| {
            r.qa_turns
                .iter()
                .map(|t| (r.id.clone(), t.specialist, t.round, t.question.clone()))
        })
        .collect();
    let mut skipped = 0u64;
    for (id, turn) in annotations {
        let key = (id.clone(), turn.specialist, turn.round, turn.question.clone());
        if !seen.insert(key) {
            skipped += 1;
            continue;
        }
        out.records[index[id]].qa_turns.push(turn.clone());
    }
    for rec in &mut out.records {
        rec.qa_turns
            .sort_by(|a, b| (a.round, a.specialist.rank()).cmp(&(b.round, b.specialist.rank())));
    }
    Ok(AppendOutcome {
        manifest: out,
        skipped_duplicates: skipped,
    })
}
