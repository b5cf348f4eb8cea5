//! Pipeline entry point: every stage as a subcommand, strict config
//! parsing, reproducibility flags, and a machine-readable run summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use capforge::config::{ConfigError, PipelineConfig};
use capforge::corpus::{
    self, append_qa_turns, compose_blend, compute_caption_stats, file_digest, read_manifest,
    write_manifest, BlendSpec, QATurn, Specialist,
};
use capforge::grounding::{
    filter_boxes, filter_image, read_grit_records, split_by_length, validate_specialist_turn,
};
use capforge::judge::{evaluate_rounds, JudgeConfig};
use capforge::prompts::PromptBank;
use capforge::recaption::{
    recaption_batch, BatchOptions, EndpointConfig, HttpEndpoint, InferenceBackend, StubEndpoint,
    StubScript,
};
use capforge::rounds::{render_ledger, run_loop, LoopStatus, RoundDeps};
use capforge::spatialqa::{generate_scene_qa, Scene3D};

#[derive(Parser)]
#[command(name = "capforge", version, about = "Caption dataset augmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config seed for this run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate config and inputs, write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Where to write the run summary JSON.
    #[arg(long, global = true, default_value = "run.json")]
    summary: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config JSON (strict schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inference endpoint: a base URL or `stub:<script.json>`.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a source dataset into a round-0 manifest.
    Ingest {
        /// Image-text pair JSONL (recaptionable records).
        #[arg(long, conflicts_with = "interleaved")]
        pairs: Option<PathBuf>,
        /// Interleaved document JSONL (pass-through records).
        #[arg(long)]
        interleaved: Option<PathBuf>,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption word statistics for a manifest at a round.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        round: u32,
    },
    /// Run a single recaption round.
    Recaption {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        round: u32,
        #[arg(long)]
        fraction: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Run the multi-round self-augment loop with saturation stopping.
    Loop {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Synthesize spatial-relation QA from 3D scenes.
    SpatialQa {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Filter a grounding corpus and split it by caption length.
    GritFilter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_short: PathBuf,
        #[arg(long)]
        out_long: PathBuf,
        #[arg(long)]
        drop_report: Option<PathBuf>,
        #[arg(long, default_value_t = 0.70)]
        max_area: f64,
        #[arg(long, default_value_t = 3)]
        max_same_category: usize,
        #[arg(long, default_value_t = 60)]
        word_threshold: usize,
    },
    /// Pairwise-judge captions from two rounds and report the winrate.
    Judge {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        round_a: u32,
        #[arg(long)]
        round_b: u32,
        #[arg(long, default_value_t = 5000)]
        sample_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Compose a seeded blend of manifests.
    Blend {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge specialist annotation files into a manifest as QA turns.
    MergeSpecialists {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        spatial: Option<PathBuf>,
        #[arg(long)]
        grounding: Option<PathBuf>,
        #[arg(long)]
        ocr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Usage or config problem: exit 2.
    Usage(String),
    /// Runtime failure: exit 1.
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}
runtime_from!(
    capforge::corpus::CorpusError,
    capforge::recaption::RecaptionError,
    capforge::rounds::LoopError,
    capforge::judge::JudgeError,
    capforge::spatialqa::SpatialError,
    capforge::prompts::PromptError,
    std::io::Error
);

#[derive(serde::Serialize)]
struct RunSummary {
    subcommand: String,
    seed: u64,
    inputs_digests: BTreeMap<String, String>,
    outputs_digests: BTreeMap<String, String>,
    wall_ms: u64,
}

struct RunContext {
    subcommand: String,
    seed: u64,
    dry_run: bool,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunContext {
    fn write_summary(&self, path: &Path) -> Result<(), CliError> {
        let digest_map = |paths: &[PathBuf]| -> BTreeMap<String, String> {
            paths
                .iter()
                .filter_map(|p| {
                    file_digest(p)
                        .ok()
                        .map(|d| (p.display().to_string(), d))
                })
                .collect()
        };
        let summary = RunSummary {
            subcommand: self.subcommand.clone(),
            seed: self.seed,
            inputs_digests: digest_map(&self.inputs),
            outputs_digests: digest_map(&self.outputs),
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        std::fs::write(
            path,
            serde_json::to_string_pretty(&summary).expect("summary json") + "\n",
        )?;
        Ok(())
    }
}

fn load_config(arg: &ConfigArg, seed_override: Option<u64>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &arg.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn make_backend(
    endpoint_arg: Option<&str>,
    cfg: &mut EndpointConfig,
) -> Result<Box<dyn InferenceBackend>, CliError> {
    match endpoint_arg {
        Some(spec) if spec.starts_with("stub:") => {
            let path = &spec["stub:".len()..];
            let script = StubScript::from_file(Path::new(path))?;
            Ok(Box::new(StubEndpoint::new(script)))
        }
        Some(url) => {
            cfg.base_url = url.to_string();
            Ok(Box::new(HttpEndpoint::new(cfg.clone())))
        }
        None if !cfg.base_url.is_empty() => Ok(Box::new(HttpEndpoint::new(cfg.clone()))),
        None => Err(CliError::Usage(
            "no endpoint configured: pass --endpoint <url|stub:script.json> or set endpoint.base_url"
                .to_string(),
        )),
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = std::fs::File::create(path)?;
    for item in items {
        writeln!(out, "{}", serde_json::to_string(item).expect("jsonl item"))?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct AnnotationRow {
    id: String,
    question: String,
    answer: String,
    #[serde(default)]
    round: u32,
    #[serde(default = "default_dim")]
    width: u32,
    #[serde(default = "default_dim")]
    height: u32,
}

fn default_dim() -> u32 {
    100_000
}

fn read_annotations(
    path: &Path,
    kind: Specialist,
) -> Result<(Vec<(String, QATurn)>, usize), CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut turns = Vec::new();
    let mut rejected = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: AnnotationRow = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        match validate_specialist_turn(kind, &row.question, &row.answer, row.width, row.height, row.round)
        {
            Some(turn) => turns.push((row.id, turn)),
            None => rejected += 1,
        }
    }
    Ok((turns, rejected))
}

fn run(cli: &Cli, ctx: &mut RunContext) -> Result<u8, CliError> {
    match &cli.command {
        Command::Ingest {
            pairs,
            interleaved,
            tag,
            out,
        } => {
            let seed = cli.seed.unwrap_or(0);
            ctx.seed = seed;
            let outcome = match (pairs, interleaved) {
                (Some(path), None) => {
                    ctx.inputs.push(path.clone());
                    let file = std::fs::File::open(path)?;
                    corpus::ingest_pairs(file, tag, seed)?
                }
                (None, Some(path)) => {
                    ctx.inputs.push(path.clone());
                    let file = std::fs::File::open(path)?;
                    corpus::ingest_interleaved(file, tag, seed)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "exactly one of --pairs/--interleaved is required".to_string(),
                    ))
                }
            };
            eprintln!(
                "ingested {} records ({} rows skipped)",
                outcome.manifest.records.len(),
                outcome.skipped
            );
            if !ctx.dry_run {
                write_manifest(&outcome.manifest, out)?;
                ctx.outputs.push(out.clone());
            }
            Ok(0)
        }
        Command::Stats { manifest, round } => {
            ctx.inputs.push(manifest.clone());
            let m = read_manifest(manifest)?;
            let stats = compute_caption_stats(&m, *round)?;
            println!(
                "{}",
                serde_json::json!({
                    "round": round,
                    "stats": stats,
                    "avg_words": stats.render(),
                })
            );
            Ok(0)
        }
        Command::Recaption {
            manifest,
            out,
            round,
            fraction,
            cfg,
        } => {
            let pipeline = load_config(cfg, cli.seed)?;
            ctx.seed = pipeline.seed;
            ctx.inputs.push(manifest.clone());
            let mut endpoint = pipeline.endpoint.clone();
            let backend = make_backend(cfg.endpoint.as_deref(), &mut endpoint)?;
            let input = read_manifest(manifest)?;
            if ctx.dry_run {
                return Ok(0);
            }
            let bank = PromptBank::default_catalog()?;
            let mut opts = BatchOptions::new(*round, pipeline.seed, &pipeline.model_id);
            opts.fraction = fraction.unwrap_or(pipeline.loop_cfg.recaption_fraction);
            opts.parent_digest = file_digest(manifest)?;
            match recaption_batch(&input, &bank, &pipeline.merge, &endpoint, backend.as_ref(), &opts)
            {
                Ok(batch) => {
                    write_manifest(&batch.manifest, out)?;
                    ctx.outputs.push(out.clone());
                    if !batch.failures.is_empty() {
                        let report = out.with_extension("failures.jsonl");
                        write_jsonl(&report, &batch.failures)?;
                        ctx.outputs.push(report);
                    }
                    Ok(0)
                }
                Err(capforge::recaption::RecaptionError::Aborted {
                    failed,
                    total,
                    report,
                    ..
                }) => {
                    let report_path = out.with_extension("failures.jsonl");
                    write_jsonl(&report_path, &report)?;
                    ctx.outputs.push(report_path);
                    eprintln!("round aborted: {failed}/{total} permanent failures");
                    Ok(1)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Loop {
            manifest,
            out_dir,
            cfg,
        } => {
            let pipeline = load_config(cfg, cli.seed)?;
            ctx.seed = pipeline.seed;
            let input_path = manifest
                .clone()
                .or_else(|| pipeline.paths.input.clone().map(PathBuf::from))
                .ok_or_else(|| CliError::Usage("no input manifest (--manifest or paths.input)".into()))?;
            let dir = out_dir
                .clone()
                .or_else(|| pipeline.paths.output.clone().map(PathBuf::from))
                .ok_or_else(|| CliError::Usage("no output dir (--out-dir or paths.output)".into()))?;
            ctx.inputs.push(input_path.clone());
            let mut endpoint = pipeline.endpoint.clone();
            let backend = make_backend(cfg.endpoint.as_deref(), &mut endpoint)?;
            let input = read_manifest(&input_path)?;
            if ctx.dry_run {
                return Ok(0);
            }
            std::fs::create_dir_all(&dir)?;
            let bank = PromptBank::default_catalog()?;
            let deps = RoundDeps {
                bank: &bank,
                policy: &pipeline.merge,
                endpoint: &endpoint,
                backend: backend.as_ref(),
                model_id: pipeline.model_id.clone(),
                seed: pipeline.seed,
                fraction: pipeline.loop_cfg.recaption_fraction,
                failure_abort_threshold: 0.2,
            };
            let outcome = run_loop(input, &pipeline.loop_cfg, &deps, Some(&dir))?;
            ctx.outputs.push(dir.join("ledger.json"));
            for record in &outcome.ledger[1..] {
                ctx.outputs
                    .push(dir.join(format!("round_{:02}.jsonl", record.round)));
            }
            eprint!("{}", render_ledger(&outcome.ledger));
            match outcome.status {
                LoopStatus::Completed { saturated_at } => {
                    if let Some(r) = saturated_at {
                        eprintln!("saturated at round {r}");
                    }
                    Ok(0)
                }
                LoopStatus::Aborted { at_round, error, report } => {
                    let report_path = dir.join(format!("round_{at_round:02}.failures.jsonl"));
                    write_jsonl(&report_path, &report)?;
                    eprintln!("loop aborted at round {at_round}: {error}");
                    Ok(1)
                }
            }
        }
        Command::SpatialQa { scenes, n, out, cfg } => {
            let pipeline = load_config(cfg, cli.seed)?;
            ctx.seed = pipeline.seed;
            ctx.inputs.push(scenes.clone());
            let text = std::fs::read_to_string(scenes)?;
            let parsed = Scene3D::load_many(&text)?;
            if ctx.dry_run {
                return Ok(0);
            }
            let mut examples = Vec::new();
            for scene in &parsed {
                examples.extend(generate_scene_qa(scene, *n, pipeline.seed, &pipeline.margins)?);
            }
            match out {
                Some(path) => {
                    write_jsonl(path, &examples)?;
                    ctx.outputs.push(path.clone());
                }
                None => {
                    for e in &examples {
                        println!("{}", serde_json::to_string(e).expect("example json"));
                    }
                }
            }
            Ok(0)
        }
        Command::GritFilter {
            input,
            out_short,
            out_long,
            drop_report,
            max_area,
            max_same_category,
            word_threshold,
        } => {
            if !(*max_area > 0.0 && *max_area <= 1.0) {
                return Err(CliError::Usage(format!(
                    "--max-area must be in (0, 1], got {max_area}"
                )));
            }
            if *max_same_category < 1 {
                return Err(CliError::Usage("--max-same-category must be >= 1".into()));
            }
            if *word_threshold < 1 {
                return Err(CliError::Usage("--word-threshold must be >= 1".into()));
            }
            ctx.inputs.push(input.clone());
            let file = std::fs::File::open(input)?;
            let (records, malformed) = read_grit_records(file)?;
            if ctx.dry_run {
                return Ok(0);
            }
            let mut kept = Vec::new();
            let mut drops: Vec<serde_json::Value> = Vec::new();
            for rec in &records {
                let boxed = filter_boxes(rec, *max_area);
                match filter_image(&boxed, *max_same_category) {
                    Some(r) => kept.push(r),
                    None => drops.push(serde_json::json!({
                        "id": rec.id,
                        "reason": "category_count",
                    })),
                }
            }
            let (short, long) = split_by_length(kept, *word_threshold);
            write_jsonl(out_short, &short)?;
            write_jsonl(out_long, &long)?;
            ctx.outputs.push(out_short.clone());
            ctx.outputs.push(out_long.clone());
            if let Some(path) = drop_report {
                write_jsonl(path, &drops)?;
                ctx.outputs.push(path.clone());
            }
            eprintln!(
                "kept {} short + {} long, dropped {} records, {} malformed rows",
                short.len(),
                long.len(),
                drops.len(),
                malformed
            );
            Ok(0)
        }
        Command::Judge {
            manifest,
            round_a,
            round_b,
            sample_size,
            out,
            cfg,
        } => {
            let pipeline = load_config(cfg, cli.seed)?;
            ctx.seed = pipeline.seed;
            ctx.inputs.push(manifest.clone());
            let mut endpoint = pipeline.endpoint.clone();
            let backend = make_backend(cfg.endpoint.as_deref(), &mut endpoint)?;
            let m = read_manifest(manifest)?;
            if ctx.dry_run {
                return Ok(0);
            }
            let judge_cfg = JudgeConfig {
                sample_size: *sample_size,
                seed: pipeline.seed,
                judge_model_id: pipeline.model_id.clone(),
                endpoint,
            };
            let report = evaluate_rounds(&m, *round_a, *round_b, &judge_cfg, backend.as_ref())?;
            let json = serde_json::to_string_pretty(&report).expect("report json");
            match out {
                Some(path) => {
                    std::fs::write(path, json + "\n")?;
                    ctx.outputs.push(path.clone());
                }
                None => println!("{json}"),
            }
            Ok(0)
        }
        Command::Blend { spec, out } => {
            ctx.inputs.push(spec.clone());
            let mut blend = BlendSpec::from_file(spec)?;
            if let Some(seed) = cli.seed {
                blend.seed = seed;
            }
            ctx.seed = blend.seed;
            if ctx.dry_run {
                // Validate entries are readable and targets feasible.
                compose_blend(&blend)?;
                return Ok(0);
            }
            let manifest = compose_blend(&blend)?;
            write_manifest(&manifest, out)?;
            ctx.outputs.push(out.clone());
            Ok(0)
        }
        Command::MergeSpecialists {
            manifest,
            spatial,
            grounding,
            ocr,
            out,
        } => {
            ctx.inputs.push(manifest.clone());
            let input = read_manifest(manifest)?;
            let mut annotations = Vec::new();
            let mut rejected = 0usize;
            // Fixed merge order: spatial, then grounding, then ocr.
            for (path, kind) in [
                (spatial, Specialist::Spatial),
                (grounding, Specialist::Grounding),
                (ocr, Specialist::Ocr),
            ] {
                if let Some(path) = path {
                    ctx.inputs.push(path.clone());
                    let (turns, bad) = read_annotations(path, kind)?;
                    rejected += bad;
                    annotations.extend(turns);
                }
            }
            if ctx.dry_run {
                return Ok(0);
            }
            let outcome = append_qa_turns(&input, &annotations)?;
            let mut merged = outcome.manifest;
            merged.lineage.parent_digest = file_digest(manifest)?;
            write_manifest(&merged, out)?;
            ctx.outputs.push(out.clone());
            eprintln!(
                "appended {} turns ({} duplicates skipped, {} rejected by validation)",
                annotations.len() as u64 - outcome.skipped_duplicates,
                outcome.skipped_duplicates,
                rejected
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let subcommand = match &cli.command {
        Command::Ingest { .. } => "ingest",
        Command::Stats { .. } => "stats",
        Command::Recaption { .. } => "recaption",
        Command::Loop { .. } => "loop",
        Command::SpatialQa { .. } => "spatial-qa",
        Command::GritFilter { .. } => "grit-filter",
        Command::Judge { .. } => "judge",
        Command::Blend { .. } => "blend",
        Command::MergeSpecialists { .. } => "merge-specialists",
    };
    let mut ctx = RunContext {
        subcommand: subcommand.to_string(),
        seed: cli.seed.unwrap_or(0),
        dry_run: cli.dry_run,
        started: Instant::now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match run(&cli, &mut ctx) {
        Ok(code) => {
            if !cli.dry_run {
                if let Err(CliError::Runtime(e)) = ctx.write_summary(&cli.summary) {
                    eprintln!("warning: could not write run summary: {e}");
                }
            }
            ExitCode::from(code)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
