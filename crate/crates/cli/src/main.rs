//! `facade`: drive the renovation pipeline from the shell.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use facade_core::dataset::{build_dataset, DEFAULT_MATCH_THRESHOLD};
use facade_core::fixtures::{write_component_corpus, write_pair_corpus, write_sketch_corpus};
use facade_core::SketchMeta;
use facade_service::batch::{run_batch, BatchMode};
use facade_service::config::{CompositorChoice, DefaultBackends, GuidanceChoice};
use facade_service::{PipelineConfig, PipelineRun, PipelineService, RunState};

#[derive(Parser)]
#[command(
    name = "facade",
    version,
    about = "Sketch-based facade renovation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run from a sketch and drive it as far as it can go.
    Run(RunArgs),
    /// Continue a stored run, optionally approving its plan or retrying a failure.
    Resume(ResumeArgs),
    /// Build the two-turn training set from a pairs corpus.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Auto-approved runs over a whole corpus, one report row per sketch.
    Batch(BatchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write synthetic corpora for trying things out.
    Fixtures {
        #[command(subcommand)]
        command: FixtureCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Stub,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compositor {
    Stub,
    Feather,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Reconstruct,
    Generate,
}

/// Flags that override fields of the run config.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Guidance server URL, required with `--backend http`.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, value_enum)]
    compositor: Option<Compositor>,
    #[arg(long, env = "FACADE_SEED")]
    seed: Option<u64>,
    /// Per backend call, seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                serde_json::from_slice(&fs::read(p).with_context(|| p.display().to_string())?)
                    .with_context(|| format!("{}: not a pipeline config", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        match (self.backend, &self.endpoint) {
            (Some(Backend::Http), Some(e)) => {
                cfg.guidance = GuidanceChoice::Http {
                    endpoint: e.clone(),
                }
            }
            (Some(Backend::Http), None) => bail!("--backend http needs --endpoint"),
            (Some(Backend::Stub), _) => cfg.guidance = GuidanceChoice::Stub,
            (None, Some(e)) => {
                cfg.guidance = GuidanceChoice::Http {
                    endpoint: e.clone(),
                }
            }
            (None, None) => {}
        }
        if let Some(c) = self.compositor {
            cfg.compositor = match c {
                Compositor::Stub => CompositorChoice::Stub,
                Compositor::Feather => CompositorChoice::Feather,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.timeout {
            cfg.timeout_s = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    sketch: PathBuf,
    /// Sketch metadata JSON; defaults to `<sketch>.json` when present.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, default_value = "")]
    brief: String,
    /// Approve the proposed plan without stopping.
    #[arg(long)]
    auto_approve: bool,
    /// Directory for the run's artifacts and `run.json`.
    #[arg(long)]
    out: PathBuf,
    /// Persist the run so it can be resumed. Without it the run lives in memory.
    #[arg(long, env = "FACADE_STORE")]
    store: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    run: String,
    #[arg(long, env = "FACADE_STORE")]
    store: PathBuf,
    /// Approve a PLANNED run before continuing.
    #[arg(long)]
    approve: bool,
    /// Reset a FAILED run to its last good state before continuing.
    #[arg(long)]
    retry: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build {
        #[arg(long)]
        pairs: PathBuf,
        /// Component corpus with `manifest.json`, validated alongside.
        #[arg(long)]
        components: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
        match_threshold: f64,
    },
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Without a store, runs are lost on exit.
    #[arg(long, env = "FACADE_STORE")]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// `<pair>/{before,after}.{png,json}` plus `meta.json`.
    Pairs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Flat `*.png` sketches with `<stem>.json` metadata.
    Sketches {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Door and window sketches with `manifest.json`.
    Components {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 107)]
        doors: usize,
        #[arg(long, default_value_t = 164)]
        windows: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn open_service(store: Option<&Path>) -> Result<PipelineService> {
    Ok(match store {
        Some(root) => {
            fs::create_dir_all(root).with_context(|| root.display().to_string())?;
            PipelineService::open(root, Arc::new(DefaultBackends))?
        }
        None => PipelineService::in_memory(),
    })
}

fn extension(media_type: &str) -> &'static str {
    match media_type {
        "image/png" => "png",
        "application/json" => "json",
        _ => "txt",
    }
}

/// Copy every artifact of the run into `out`, plus the run record itself.
fn export(svc: &PipelineService, run: &PipelineRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    for name in run.artifacts.keys() {
        let (r, bytes) = svc.artifact(&run.run_id, name)?;
        fs::write(
            out.join(format!("{name}.{}", extension(&r.media_type))),
            bytes,
        )?;
    }
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(run)?)?;
    Ok(())
}

fn report(run: &PipelineRun, out: &Path, resumable: bool) -> ExitCode {
    println!("run {} {}", run.run_id, run.state);
    match run.state {
        RunState::Rendered => {
            let fidelity = run.fidelity.unwrap_or(0.0);
            let flag = if run.flagged == Some(true) {
                " (flagged)"
            } else {
                ""
            };
            println!("fidelity {fidelity:.4}{flag}");
            println!("artifacts in {}", out.display());
            ExitCode::SUCCESS
        }
        RunState::Planned => {
            if let Some(plan) = &run.plan {
                println!(
                    "{} proposed modifications, see {}",
                    plan.mods.len(),
                    out.join("plan.json").display()
                );
            }
            if resumable {
                println!(
                    "approve with: facade resume --run {} --approve --out DIR",
                    run.run_id
                );
            } else {
                println!("pass --auto-approve, or --store to resume later");
            }
            ExitCode::SUCCESS
        }
        _ => {
            if let Some(f) = &run.failure {
                eprintln!("failed after {}: {}", f.from, f.cause);
            }
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = a.config.resolve()?;
    cfg.auto_approve |= a.auto_approve;
    let png = fs::read(&a.sketch).with_context(|| a.sketch.display().to_string())?;
    let meta_path = a
        .meta
        .clone()
        .or_else(|| Some(a.sketch.with_extension("json")).filter(|p| p.exists()));
    let meta = match meta_path {
        Some(p) => serde_json::from_slice(&fs::read(&p)?)
            .with_context(|| format!("{}: not sketch metadata", p.display()))?,
        None => SketchMeta::new(a.sketch.file_stem().unwrap_or_default().to_string_lossy()),
    };
    let svc = open_service(a.store.as_deref())?;
    let run = svc.create_run(&png, meta, &a.brief, Some(cfg))?;
    let run = svc.drive(&run.run_id)?;
    export(&svc, &run, &a.out)?;
    Ok(report(&run, &a.out, a.store.is_some()))
}

fn cmd_resume(a: ResumeArgs) -> Result<ExitCode> {
    if !a.store.join(facade_service::store::EVENTS_FILE).exists() {
        bail!("no run store at {}", a.store.display());
    }
    let svc = open_service(Some(&a.store))?;
    let mut run = svc.get(&a.run)?;
    if a.retry && run.state == RunState::Failed {
        run = svc.reset(&a.run)?;
    }
    if a.approve && run.state == RunState::Planned {
        svc.approve(&a.run)?;
    }
    let run = svc.drive(&a.run)?;
    export(&svc, &run, &a.out)?;
    Ok(report(&run, &a.out, true))
}

fn cmd_dataset(c: DatasetCommand) -> Result<ExitCode> {
    let DatasetCommand::Build {
        pairs,
        components,
        out,
        match_threshold,
    } = c;
    let s = build_dataset(&pairs, components.as_deref(), &out, match_threshold)?;
    println!(
        "{} pairs, {} lines -> {}",
        s.pairs,
        s.lines,
        s.train_file.display()
    );
    if let Some(m) = &s.manifest {
        println!(
            "components: door {}, window {}",
            m.counts.door, m.counts.window
        );
        for v in &m.violations {
            eprintln!("manifest: {}", serde_json::to_string(v)?);
        }
        if !m.is_valid() {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_batch(a: BatchArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let mode = match a.mode {
        Mode::Reconstruct => BatchMode::Reconstruct,
        Mode::Generate => BatchMode::Generate,
    };
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let r = run_batch(&a.corpus, mode, &cfg, jobs)?;
    println!("{r}");
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_vec_pretty(&r)?).with_context(|| p.display().to_string())?;
    }
    // Item failures are reported in the table; a preservation failure is a bug.
    Ok(if r.preservation_failures() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    if a.store.is_none() {
        tracing::warn!("no --store given, runs are kept in memory only");
    }
    let svc = Arc::new(open_service(a.store.as_deref())?);
    let addr = SocketAddr::new(a.host, a.port);
    tokio::runtime::Runtime::new()?.block_on(facade_service::http::serve(addr, svc))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixtures(c: FixtureCommand) -> Result<ExitCode> {
    match c {
        FixtureCommand::Pairs { out, count, seed } => {
            let ids = write_pair_corpus(&out, count, seed)?;
            println!("{} pairs in {}", ids.len(), out.display());
        }
        FixtureCommand::Sketches { out, count, seed } => {
            let pngs = write_sketch_corpus(&out, count, seed)?;
            println!("{} sketches in {}", pngs.len(), out.display());
        }
        FixtureCommand::Components {
            out,
            doors,
            windows,
            seed,
        } => {
            let m = write_component_corpus(&out, doors, windows, seed)?;
            println!("{} components in {}", m.entries.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Dataset { command } => cmd_dataset(command),
        Command::Batch(a) => cmd_batch(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Fixtures { command } => cmd_fixtures(command),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
