//! Recaption and specialist prompt catalog, the seeded prompt-mixture
//! selector, and caption merge policies.
//!
//! The catalog ships as a checked-in JSON asset; each template's bytes are
//! verified against its committed SHA-256 on load so any drift from the
//! registered texts fails fast.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Specialist;
use crate::seeded;

pub const IMAGE_PLACEHOLDER: &str = "<image>";

const CATALOG_JSON: &str = include_str!("../assets/prompt_catalog.json");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("catalog integrity failure for {prompt_id}: expected sha256 {expected}, got {actual}")]
    CatalogDrift {
        prompt_id: String,
        expected: String,
        actual: String,
    },
    #[error("catalog parse error: {0}")]
    CatalogParse(#[from] serde_json::Error),
    #[error("template {0} must contain exactly one {IMAGE_PLACEHOLDER} placeholder")]
    BadPlaceholder(String),
    #[error("prompt mixture is empty")]
    EmptyMixture,
    #[error("mixture references unknown prompt id {0}")]
    UnknownPromptId(String),
    #[error("mixture weight for {0} must be positive and finite")]
    BadWeight(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    Simple,
    LongV1,
    LongV2,
    LongV3,
    Spatial,
    Grounding,
    Ocr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prompt_id: String,
    pub role_text: String,
    pub family: PromptFamily,
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogEntry {
    prompt_id: String,
    family: PromptFamily,
    text: String,
    sha256: String,
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogFile {
    prompts: Vec<CatalogEntry>,
    default_mixture: Vec<MixtureEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub prompt_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PromptBank {
    pub templates: Vec<PromptTemplate>,
    pub mixture: Vec<MixtureEntry>,
}

fn sha256_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl PromptBank {
    /// Loads the embedded catalog, verifying every template hash, and uses
    /// the catalog's default mixture (uniform over the long prompt variants).
    pub fn default_catalog() -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(CATALOG_JSON)?;
        let mut templates = Vec::new();
        for e in file.prompts {
            let actual = sha256_hex(&e.text);
            if actual != e.sha256 {
                return Err(PromptError::CatalogDrift {
                    prompt_id: e.prompt_id,
                    expected: e.sha256,
                    actual,
                });
            }
            if e.text.matches(IMAGE_PLACEHOLDER).count() != 1 {
                return Err(PromptError::BadPlaceholder(e.prompt_id));
            }
            templates.push(PromptTemplate {
                prompt_id: e.prompt_id,
                role_text: e.text,
                family: e.family,
            });
        }
        let bank = PromptBank {
            templates,
            mixture: file.default_mixture,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.mixture {
            if self.template(&m.prompt_id).is_none() {
                return Err(PromptError::UnknownPromptId(m.prompt_id.clone()));
            }
            if !(m.weight.is_finite() && m.weight > 0.0) {
                return Err(PromptError::BadWeight(m.prompt_id.clone()));
            }
        }
        Ok(())
    }

    pub fn template(&self, prompt_id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.prompt_id == prompt_id)
    }

    /// Stable identifier for the mixture contents, used in lineage records.
    pub fn mixture_id(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.mixture {
            h.update(m.prompt_id.as_bytes());
            h.update([0u8]);
            h.update(m.weight.to_le_bytes());
        }
        let d = h.finalize();
        format!("mix-{}", &d.iter().map(|b| format!("{b:02x}")).collect::<String>()[..12])
    }
}

/// Weighted prompt choice driven by a counter-based hash of
/// (seed, sample_id, round); independent of call order and concurrency.
pub fn select_prompt<'a>(
    bank: &'a PromptBank,
    sample_id: &str,
    round: u32,
    seed: u64,
) -> Result<&'a PromptTemplate> {
    if bank.mixture.is_empty() {
        return Err(PromptError::EmptyMixture);
    }
    bank.validate()?;
    let total: f64 = bank.mixture.iter().map(|m| m.weight).sum();
    let u = seeded::unit("prompt-select", seed, &[sample_id, &round.to_string()]) * total;
    let mut acc = 0.0;
    for m in &bank.mixture {
        acc += m.weight;
        if u < acc {
            return Ok(bank.template(&m.prompt_id).expect("validated"));
        }
    }
    // Float accumulation can land exactly on the total; take the last entry.
    let last = bank.mixture.last().unwrap();
    Ok(bank.template(&last.prompt_id).expect("validated"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    RecaptionOnly,
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePolicy {
    pub mode: MergeMode,
    pub separator: String,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy {
            mode: MergeMode::Concatenated,
            separator: "\n".to_string(),
        }
    }
}

/// Combines the original human text with a synthetic caption. Under the
/// concatenated policy the original always survives verbatim as a prefix;
/// an empty synthetic caption falls back to the original in either mode.
pub fn merge_captions(original: &str, synthetic: &str, policy: &MergePolicy) -> String {
    if synthetic.is_empty() {
        return original.to_string();
    }
    match policy.mode {
        MergeMode::RecaptionOnly => synthetic.to_string(),
        MergeMode::Concatenated => {
            if original.is_empty() {
                synthetic.to_string()
            } else {
                format!("{original}{}{synthetic}", policy.separator)
            }
        }
    }
}

/// Returns the task-oriented specialist prompt. The spatial specialist
/// alternates evenly (seeded per sample) between its two templates.
pub fn specialist_prompt(
    bank: &PromptBank,
    kind: Specialist,
    sample_id: &str,
    seed: u64,
) -> Result<PromptTemplate> {
    let prompt_id = match kind {
        Specialist::Spatial => {
            if seeded::hash64("spatial-template", seed, &[sample_id]) & 1 == 0 {
                "spatial_v1"
            } else {
                "spatial_v2"
            }
        }
        Specialist::Grounding => "grounding",
        Specialist::Ocr => "ocr",
    };
    bank.template(prompt_id)
        .cloned()
        .ok_or_else(|| PromptError::UnknownPromptId(prompt_id.to_string()))
}
