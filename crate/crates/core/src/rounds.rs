//! Multi-round self-augmentation orchestration: runs recaption rounds,
//! records per-round statistics, detects saturation of caption-length
//! growth, and emits a digest-chained round ledger.
//!
//! Rounds are strictly sequential; each consumes the previous round's
//! manifest and its output is written before the next begins, so a loop can
//! resume from any checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    compute_caption_stats, write_manifest, CaptionStats, CorpusError, Manifest,
};
use crate::prompts::{MergePolicy, PromptBank};
use crate::recaption::{
    recaption_batch, BatchOptions, EndpointConfig, FailureRecord, InferenceBackend,
    RecaptionError,
};

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("saturation series entry {0} is not positive")]
    NonPositiveEntry(f64),
    #[error(transparent)]
    Recaption(#[from] RecaptionError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid loop config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, LoopError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub stats: CaptionStats,
    pub winrate_vs_prev: Option<f64>,
    pub manifest_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub max_rounds: u32,
    #[serde(default = "default_epsilon")]
    pub saturation_epsilon: f64,
    #[serde(default = "default_min_rounds")]
    pub min_rounds_before_check: u32,
    #[serde(default = "default_fraction")]
    pub recaption_fraction: f64,
}

fn default_epsilon() -> f64 {
    0.05
}
fn default_min_rounds() -> u32 {
    2
}
fn default_fraction() -> f64 {
    1.0
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_rounds: 4,
            saturation_epsilon: default_epsilon(),
            min_rounds_before_check: default_min_rounds(),
            recaption_fraction: default_fraction(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds < 1 {
            return Err(LoopError::BadConfig("max_rounds must be >= 1".into()));
        }
        if self.saturation_epsilon <= 0.0 {
            return Err(LoopError::BadConfig("saturation_epsilon must be > 0".into()));
        }
        if !(self.recaption_fraction > 0.0 && self.recaption_fraction <= 1.0) {
            return Err(LoopError::BadConfig(
                "recaption_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Returns the smallest round r >= min_rounds whose relative mean-length
/// growth over the previous round falls below epsilon; None if growth never
/// drops below epsilon (or the series is too short to tell).
pub fn detect_saturation(
    series: &[f64],
    epsilon: f64,
    min_rounds: usize,
) -> Result<Option<usize>> {
    if series.len() < 2 {
        return Ok(None);
    }
    for &v in series {
        if v <= 0.0 {
            return Err(LoopError::NonPositiveEntry(v));
        }
    }
    let start = min_rounds.max(1);
    for r in start..series.len() {
        let growth = (series[r] - series[r - 1]) / series[r - 1];
        if growth < epsilon {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// Everything a round needs besides the manifest itself.
pub struct RoundDeps<'a> {
    pub bank: &'a PromptBank,
    pub policy: &'a MergePolicy,
    pub endpoint: &'a EndpointConfig,
    pub backend: &'a dyn InferenceBackend,
    pub model_id: String,
    pub seed: u64,
    pub fraction: f64,
    pub failure_abort_threshold: f64,
}

impl RoundDeps<'_> {
    fn batch_options(&self, round: u32, parent_digest: String) -> BatchOptions {
        let mut opts = BatchOptions::new(round, self.seed, &self.model_id);
        opts.fraction = self.fraction;
        opts.failure_abort_threshold = self.failure_abort_threshold;
        opts.parent_digest = parent_digest;
        opts
    }
}

/// Executes one recaption round and returns the new manifest with its
/// ledger entry. The parent digest is taken from the input manifest's
/// canonical bytes, which equal its on-disk bytes.
pub fn run_round(
    manifest: &Manifest,
    round: u32,
    deps: &RoundDeps<'_>,
) -> Result<(Manifest, RoundRecord)> {
    let parent_digest = manifest.digest();
    let opts = deps.batch_options(round, parent_digest);
    let out = recaption_batch(manifest, deps.bank, deps.policy, deps.endpoint, deps.backend, &opts)?;
    let record = RoundRecord {
        round,
        stats: out.manifest.lineage.stats.clone(),
        winrate_vs_prev: None,
        manifest_digest: out.manifest.digest(),
    };
    Ok((out.manifest, record))
}

#[derive(Debug)]
pub enum LoopStatus {
    /// All rounds ran; saturation fired at the given round if Some.
    Completed { saturated_at: Option<u32> },
    /// A round aborted; the ledger holds completed rounds only.
    Aborted {
        at_round: u32,
        error: String,
        report: Vec<FailureRecord>,
    },
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub final_manifest: Manifest,
    pub ledger: Vec<RoundRecord>,
    pub status: LoopStatus,
}

/// Runs rounds (lineage round + 1)..=max_rounds, stopping early on
/// saturation. When `out_dir` is given, each round's manifest and the ledger
/// are written as they complete (checkpointing).
pub fn run_loop(
    manifest: Manifest,
    cfg: &LoopConfig,
    deps: &RoundDeps<'_>,
    out_dir: Option<&Path>,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    let mut ledger = vec![RoundRecord {
        round: manifest.lineage.round,
        stats: compute_caption_stats(&manifest, manifest.lineage.round)?,
        winrate_vs_prev: None,
        manifest_digest: manifest.digest(),
    }];
    let mut current = manifest;
    let mut saturated_at = None;
    let first_round = current.lineage.round + 1;
    for round in first_round..=cfg.max_rounds {
        let (next, record) = match run_round(&current, round, deps) {
            Ok(v) => v,
            Err(LoopError::Recaption(RecaptionError::Aborted {
                failed,
                total,
                threshold,
                report,
            })) => {
                if let Some(dir) = out_dir {
                    write_ledger(&ledger, dir)?;
                }
                return Ok(LoopOutcome {
                    final_manifest: current,
                    ledger,
                    status: LoopStatus::Aborted {
                        at_round: round,
                        error: format!(
                            "{failed}/{total} permanent failures exceeded threshold {threshold}"
                        ),
                        report,
                    },
                });
            }
            Err(e) => return Err(e),
        };
        if let Some(dir) = out_dir {
            write_manifest(&next, &dir.join(format!("round_{round:02}.jsonl")))?;
        }
        ledger.push(record);
        current = next;
        if let Some(dir) = out_dir {
            write_ledger(&ledger, dir)?;
        }
        let series: Vec<f64> = ledger.iter().map(|r| r.stats.mean_words).collect();
        if let Some(r) = detect_saturation(
            &series,
            cfg.saturation_epsilon,
            cfg.min_rounds_before_check as usize,
        )? {
            saturated_at = Some(ledger[r].round);
            break;
        }
    }
    Ok(LoopOutcome {
        final_manifest: current,
        ledger,
        status: LoopStatus::Completed { saturated_at },
    })
}

pub fn write_ledger(ledger: &[RoundRecord], dir: &Path) -> Result<()> {
    let path = dir.join("ledger.json");
    let json = serde_json::to_string_pretty(ledger).expect("ledger json");
    std::fs::write(&path, json + "\n").map_err(|e| {
        LoopError::Corpus(CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

/// Renders the ledger as a small table with an "Avg #Words" column in
/// "mean ± std" form.
pub fn render_ledger(ledger: &[RoundRecord]) -> String {
    let mut out = String::from("round  count  avg_words        failed\n");
    for r in ledger {
        out.push_str(&format!(
            "{:<6} {:<6} {:<16} {}\n",
            r.round,
            r.stats.count,
            r.stats.render(),
            r.stats.failed
        ));
    }
    out
}
