//! Pairwise LLM-judge protocol: caption pairs across rounds, order
//! randomization, verdict parsing, and winrate aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Manifest;
use crate::prompts::{PromptFamily, PromptTemplate};
use crate::recaption::{
    dispatch_batch, EndpointConfig, InferenceBackend, InferenceRequest, ResponseStatus,
};
use crate::seeded;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("caption must be non-empty")]
    EmptyCaption,
    #[error("no verdicts with a parseable outcome")]
    AllInvalid,
    #[error("no eligible records for rounds {0} vs {1}")]
    NoEligibleRecords(u32, u32),
    #[error("judge batch aborted: {failed}/{total} permanent failures")]
    Aborted { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, JudgeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentedOrder {
    CandidateFirst,
    BaselineFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub sample_id: String,
    pub candidate_round: u32,
    pub baseline_round: u32,
    pub outcome: Outcome,
    pub presented_order: PresentedOrder,
    pub raw_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    pub seed: u64,
    pub judge_model_id: String,
    pub endpoint: EndpointConfig,
}

fn default_sample_size() -> usize {
    5000
}

/// Builds the single-request pairwise comparison prompt. The candidate is
/// rendered as label "A" under CandidateFirst and "B" under BaselineFirst.
pub fn build_judge_prompt(
    image_ref: &str,
    sample_id: &str,
    candidate: &str,
    baseline: &str,
    order: PresentedOrder,
    judge_model_id: &str,
) -> Result<InferenceRequest> {
    if candidate.is_empty() || baseline.is_empty() {
        return Err(JudgeError::EmptyCaption);
    }
    let (a, b) = match order {
        PresentedOrder::CandidateFirst => (candidate, baseline),
        PresentedOrder::BaselineFirst => (baseline, candidate),
    };
    let role_text = format!(
        "<image> You are comparing two captions written for this image.\n\
         Caption A: {a}\n\
         Caption B: {b}\n\
         Which caption describes the image better? \
         Reply with exactly one of \"A\", \"B\", or \"TIE\"."
    );
    Ok(InferenceRequest {
        sample_id: sample_id.to_string(),
        model_id: judge_model_id.to_string(),
        prompt: PromptTemplate {
            prompt_id: "judge_pairwise".to_string(),
            role_text,
            family: PromptFamily::Simple,
        },
        image_ref: image_ref.to_string(),
        max_new_tokens: 8,
        temperature: 0.0,
    })
}

/// Case-insensitive first-token match of A/B/TIE, de-flipped to a
/// candidate-relative outcome. Anything else is invalid.
pub fn parse_verdict(raw: &str, order: PresentedOrder) -> Outcome {
    let token: String = raw
        .trim()
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    match (token.as_str(), order) {
        ("A", PresentedOrder::CandidateFirst) => Outcome::Win,
        ("A", PresentedOrder::BaselineFirst) => Outcome::Loss,
        ("B", PresentedOrder::CandidateFirst) => Outcome::Loss,
        ("B", PresentedOrder::BaselineFirst) => Outcome::Win,
        ("TIE", _) => Outcome::Tie,
        _ => Outcome::Invalid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateReport {
    pub n: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub invalid: usize,
    pub winrate: f64,
    pub rounds_compared: [u32; 2],
    pub judge_model_id: String,
}

/// winrate = (wins + 0.5 * ties) / (wins + losses + ties); invalid verdicts
/// are excluded from the denominator and reported separately.
pub fn compute_winrate(verdicts: &[JudgeVerdict]) -> Result<WinrateReport> {
    let wins = verdicts.iter().filter(|v| v.outcome == Outcome::Win).count();
    let losses = verdicts.iter().filter(|v| v.outcome == Outcome::Loss).count();
    let ties = verdicts.iter().filter(|v| v.outcome == Outcome::Tie).count();
    let invalid = verdicts.iter().filter(|v| v.outcome == Outcome::Invalid).count();
    let valid = wins + losses + ties;
    if valid == 0 {
        return Err(JudgeError::AllInvalid);
    }
    let (candidate_round, baseline_round) = verdicts
        .first()
        .map(|v| (v.candidate_round, v.baseline_round))
        .unwrap_or((0, 0));
    Ok(WinrateReport {
        n: verdicts.len(),
        wins,
        losses,
        ties,
        invalid,
        winrate: (wins as f64 + 0.5 * ties as f64) / valid as f64,
        rounds_compared: [baseline_round, candidate_round],
        judge_model_id: String::new(),
    })
}

fn round_present(rec: &crate::corpus::SampleRecord, round: u32) -> bool {
    if round == 0 {
        !rec.original_text.is_empty()
    } else {
        rec.captions.iter().any(|c| c.round == round) && !rec.effective_caption(round).is_empty()
    }
}

/// Judges a seeded sample of records comparing captions at `round_b`
/// (candidate) against `round_a` (baseline). Deterministic under the stub
/// for fixed (manifest, seed).
pub fn evaluate_rounds(
    manifest: &Manifest,
    round_a: u32,
    round_b: u32,
    cfg: &JudgeConfig,
    backend: &dyn InferenceBackend,
) -> Result<WinrateReport> {
    let eligible: Vec<&crate::corpus::SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| round_present(r, round_a) && round_present(r, round_b))
        .collect();
    if eligible.is_empty() {
        return Err(JudgeError::NoEligibleRecords(round_a, round_b));
    }
    let n = cfg.sample_size.min(eligible.len());
    let mut h = Sha256::new();
    h.update(b"judge-sample");
    h.update(cfg.seed.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    let mut rng = ChaCha20Rng::from_seed(key);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n).into_vec();
    chosen.sort_unstable();

    let mut orders = std::collections::HashMap::new();
    let mut requests = Vec::new();
    for &idx in &chosen {
        let rec = eligible[idx];
        let order = if seeded::hash64("judge-flip", cfg.seed, &[&rec.id]) & 1 == 0 {
            PresentedOrder::CandidateFirst
        } else {
            PresentedOrder::BaselineFirst
        };
        orders.insert(rec.id.clone(), order);
        requests.push(build_judge_prompt(
            &rec.image_ref,
            &rec.id,
            rec.effective_caption(round_b),
            rec.effective_caption(round_a),
            order,
            &cfg.judge_model_id,
        )?);
    }
    let total = requests.len();
    let responses = dispatch_batch(requests, &cfg.endpoint, backend);
    let permanent = responses
        .values()
        .filter(|r| r.status == ResponseStatus::PermanentError)
        .count();
    if total > 0 && permanent as f64 / total as f64 > 0.2 {
        return Err(JudgeError::Aborted {
            failed: permanent,
            total,
        });
    }
    let verdicts: Vec<JudgeVerdict> = responses
        .values()
        .map(|resp| {
            let order = orders[&resp.sample_id];
            let outcome = if resp.status == ResponseStatus::Ok {
                parse_verdict(&resp.text, order)
            } else {
                Outcome::Invalid
            };
            JudgeVerdict {
                sample_id: resp.sample_id.clone(),
                candidate_round: round_b,
                baseline_round: round_a,
                outcome,
                presented_order: order,
                raw_text: resp.text.clone(),
            }
        })
        .collect();
    let mut report = compute_winrate(&verdicts)?;
    report.judge_model_id = cfg.judge_model_id.clone();
    report.rounds_compared = [round_a, round_b];
    Ok(report)
}
