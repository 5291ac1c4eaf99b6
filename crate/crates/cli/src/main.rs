use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use dvar_core::config::{Ablation, RunConfig};
use dvar_core::harness::{self, load_kb, load_manifest, render_summary, stratified_subset, Pipeline};
use dvar_core::knowledge::{self, KbError, KbIndex};

const DEFAULT_CONFIG: &str = "dvar.toml";

/// Video authenticity detection through adversarial hypothesis debate.
#[derive(Debug, Parser)]
#[command(name = "dvar", version)]
struct Cli {
    /// Log filter for the error stream (e.g. `info`, `dvar_core=debug`).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify one video and print the verdict line.
    Detect(DetectArgs),
    /// Run a labelled manifest and write a report directory.
    Bench(BenchArgs),
    /// Knowledge-base lifecycle.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Re-render the summary tables of a finished run.
    Report {
        /// Run directory (the `--out` of a bench run).
        run_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Frame directory (with meta.json) or video file.
    source: PathBuf,
    /// Run configuration file.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: PathBuf,
    /// Directory for the full verdict record and extracted frames.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Video id; defaults to the source's file name.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// JSONL manifest of {id, source, label, generator}.
    manifest: PathBuf,
    /// Run configuration file.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: PathBuf,
    /// Output directory; the report goes to <out>/report.
    #[arg(long, default_value = "dvar-run")]
    out: PathBuf,
    /// Run a stratified subset of this fraction of each (generator, label) cell.
    #[arg(long, value_name = "F")]
    subset_fraction: Option<f64>,
    /// Seed for subsetting; defaults to the config seed.
    #[arg(long, value_name = "N", requires = "subset_fraction")]
    seed: Option<u64>,
    /// Component configuration: evidence-only, debate, cost or full.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Diagnose misclassified entries into <out>/report/kb_candidates.jsonl.
    #[arg(long)]
    diagnose: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("expected evidence-only, debate, cost or full, got `{s}`"))
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Create a knowledge base from candidate files, replacing any existing one.
    Build {
        kb_file: PathBuf,
        /// Candidate JSONL files.
        #[arg(long, required = true, num_args = 1..)]
        from: Vec<PathBuf>,
        /// Freeze after building.
        #[arg(long)]
        freeze: bool,
    },
    /// Add candidate entries to an unfrozen knowledge base.
    Add {
        kb_file: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        from: Vec<PathBuf>,
    },
    /// Remove near-duplicate entries.
    Dedupe { kb_file: PathBuf },
    /// Mark entries as verified so retrieval returns them.
    Verify {
        kb_file: PathBuf,
        /// Entry ids to verify.
        #[arg(required = true)]
        entry_ids: Vec<String>,
    },
    /// Freeze the knowledge base and print its version.
    Freeze { kb_file: PathBuf },
    /// Print entry counts as JSON.
    Stats { kb_file: PathBuf },
}

/// Error with its exit code: 1 for runtime failures, 2 for usage or
/// configuration problems.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let filter = EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let result = match cli.command {
        Command::Detect(args) => detect(args),
        Command::Bench(args) => bench(args),
        Command::Kb(cmd) => kb(cmd),
        Command::Report { run_dir } => report(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(usage(anyhow!("config file {} not found", path.display())));
    }
    RunConfig::load(path).map_err(usage)
}

fn load_frozen_kb(config: &RunConfig) -> Result<KbIndex, Failure> {
    let kb = load_kb(config).map_err(usage)?;
    if !kb.is_frozen() {
        return Err(usage(anyhow!(
            "knowledge base {} is not frozen; run `dvar kb freeze` first",
            config.kb_path.as_deref().unwrap_or(Path::new("")).display()
        )));
    }
    Ok(kb)
}

fn detect(args: DetectArgs) -> Outcome {
    if !args.source.exists() {
        return Err(usage(anyhow!("source {} not found", args.source.display())));
    }
    let config = load_config(&args.config)?;
    let kb = load_frozen_kb(&config)?;
    let provider = config.build_provider().map_err(usage)?;
    let id = match args.id {
        Some(id) => id,
        None => args
            .source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| usage(anyhow!("cannot derive a video id from {}", args.source.display())))?,
    };
    let scratch = std::env::temp_dir().join(format!("dvar-frames-{}", std::process::id()));
    let work_dir = args.out.as_ref().map(|o| o.join("frames")).unwrap_or_else(|| scratch.clone());
    let pipeline = Pipeline::new(&config, provider.as_ref(), &kb, &work_dir).map_err(usage)?;
    let result = pipeline.detect(&id, &args.source);
    if scratch.exists() {
        let _ = fs::remove_dir_all(&scratch);
    }
    let record = result.map_err(runtime)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
        let path = out.join(format!("{id}.json"));
        fs::write(&path, record.to_json() + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }
    println!("{}", record.verdict.to_line());
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    if !args.manifest.is_file() {
        return Err(usage(anyhow!("manifest {} not found", args.manifest.display())));
    }
    let mut config = load_config(&args.config)?;
    if let Some(a) = args.ablation {
        a.apply(&mut config);
    }
    let mut entries = load_manifest(&args.manifest).map_err(usage)?;
    if let Some(fraction) = args.subset_fraction {
        entries = stratified_subset(&entries, fraction, args.seed.unwrap_or(config.seed)).map_err(usage)?;
    }
    let kb = load_frozen_kb(&config)?;
    let provider = config.build_provider().map_err(usage)?;
    let pipeline = Pipeline::new(&config, provider.as_ref(), &kb, args.out.join("frames")).map_err(usage)?;
    let summary = pipeline.run_benchmark(&entries, &args.out, args.diagnose).map_err(runtime)?;
    print!("{}", render_summary(&summary));
    if summary.succeeded == 0 && summary.entries > 0 {
        return Err(runtime(anyhow!(
            "every entry failed; see {}",
            args.out.join("report/errors.jsonl").display()
        )));
    }
    Ok(())
}

fn kb_failure(e: KbError) -> Failure {
    match e {
        KbError::File { .. } => usage(e),
        other => runtime(other),
    }
}

fn read_all_candidates(files: &[PathBuf]) -> Result<Vec<knowledge::KbCandidate>, Failure> {
    let now = Utc::now();
    let mut out = Vec::new();
    for f in files {
        if !f.is_file() {
            return Err(usage(anyhow!("candidate file {} not found", f.display())));
        }
        out.extend(knowledge::read_candidates(f, now).map_err(kb_failure)?);
    }
    Ok(out)
}

/// Adds candidates, skipping duplicates and invalid records with a warning.
fn add_candidates(kb: &mut KbIndex, candidates: Vec<knowledge::KbCandidate>) -> Result<(usize, usize), Failure> {
    let (mut added, mut skipped) = (0, 0);
    for c in candidates {
        match kb.add_entry(c) {
            Ok(_) => added += 1,
            Err(e @ KbError::Frozen(_)) => return Err(runtime(e)),
            Err(e) => {
                tracing::warn!(error = %e, "candidate skipped");
                skipped += 1;
            }
        }
    }
    Ok((added, skipped))
}

fn load_kb_file(path: &Path) -> Result<KbIndex, Failure> {
    if !path.is_file() {
        return Err(usage(anyhow!("knowledge base {} not found", path.display())));
    }
    KbIndex::load(path).map_err(kb_failure)
}

fn save_kb(kb: &KbIndex, path: &Path) -> Outcome {
    kb.save(path).map_err(runtime)
}

fn kb(cmd: KbCommand) -> Outcome {
    match cmd {
        KbCommand::Build { kb_file, from, freeze } => {
            let candidates = read_all_candidates(&from)?;
            let mut kb = KbIndex::default();
            let (added, skipped) = add_candidates(&mut kb, candidates)?;
            if freeze {
                kb.freeze().map_err(runtime)?;
            }
            save_kb(&kb, &kb_file)?;
            println!("{}", serde_json::json!({"added": added, "skipped": skipped, "version": kb.version(), "frozen": kb.is_frozen()}));
        }
        KbCommand::Add { kb_file, from } => {
            let mut kb = load_kb_file(&kb_file)?;
            if kb.is_frozen() {
                return Err(runtime(anyhow!("knowledge base {} is frozen", kb_file.display())));
            }
            let candidates = read_all_candidates(&from)?;
            let (added, skipped) = add_candidates(&mut kb, candidates)?;
            save_kb(&kb, &kb_file)?;
            println!("{}", serde_json::json!({"added": added, "skipped": skipped, "version": kb.version()}));
        }
        KbCommand::Dedupe { kb_file } => {
            let mut kb = load_kb_file(&kb_file)?;
            let removed = kb.dedupe().map_err(runtime)?;
            save_kb(&kb, &kb_file)?;
            println!("{}", serde_json::json!({"removed": removed, "version": kb.version()}));
        }
        KbCommand::Verify { kb_file, entry_ids } => {
            let mut kb = load_kb_file(&kb_file)?;
            for id in &entry_ids {
                kb.verify(id).map_err(runtime)?;
            }
            save_kb(&kb, &kb_file)?;
            println!("{}", serde_json::json!({"verified": entry_ids, "version": kb.version()}));
        }
        KbCommand::Freeze { kb_file } => {
            let mut kb = load_kb_file(&kb_file)?;
            let version = kb.freeze().map_err(runtime)?;
            save_kb(&kb, &kb_file)?;
            println!("{version}");
        }
        KbCommand::Stats { kb_file } => {
            let kb = load_kb_file(&kb_file)?;
            println!("{}", serde_json::to_string_pretty(&kb.stats()).map_err(runtime)?);
        }
    }
    Ok(())
}

fn report(run_dir: &Path) -> Outcome {
    if !run_dir.is_dir() {
        return Err(usage(anyhow!("run directory {} not found", run_dir.display())));
    }
    let summary = harness::load_summary(run_dir).map_err(runtime)?;
    print!("{}", render_summary(&summary));
    Ok(())
}
