use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use synthscene::catalog::{load_default_scannet_parameters, CountsFile, SceneDistribution};
use synthscene::decoder::Model;
use synthscene::gradcheck::{run_gradcheck, GradcheckConfig};
use synthscene::pipeline::{
    evaluate_losses, generate_dataset, mean_report, rematch, write_reports, AssetSelector, CandidatePool,
    CloudFormat, Dataset, PipelineConfig, CONFIG_FILE,
};
use synthscene::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "synthscene", version, about = "Synthetic paired point-cloud scenes and pretext losses")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Fit a scene distribution from occurrence counts.
    Fit(FitArgs),
    /// Generate a dataset of scene pairs.
    Generate(GenerateArgs),
    /// Recompute the matches of one stored pair.
    Match(MatchArgs),
    /// Evaluate the pretext losses on a dataset.
    Losses(LossesArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a model checkpoint for a dataset's model configuration.
    InitCheckpoint(InitArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Counts JSON; the bundled ScanNetV2 parameters when omitted.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Overrides the exploration rate.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Master seed.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, short)]
    output: PathBuf,
    /// Base configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene distribution JSON; the bundled parameters when omitted.
    #[arg(long)]
    distribution: Option<PathBuf>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    n_objects_per_scene: Option<usize>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed points per scene.
    #[arg(long)]
    seeds: Option<usize>,
    /// Matching distance threshold.
    #[arg(long)]
    theta: Option<f64>,
    /// `foreground` or `fps`.
    #[arg(long, value_parser = parse_pool)]
    candidate_pool: Option<CandidatePool>,
    /// Disable occlusion.
    #[arg(long)]
    no_occlusion: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_pts: Option<f64>,
    #[arg(long)]
    lambda_rec: Option<f64>,
    #[arg(long)]
    grid_side: Option<usize>,
    #[arg(long)]
    grid_extent: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `binary-f32` or `ascii-ply`.
    #[arg(long)]
    format: Option<CloudFormat>,
    /// Directory of `<category>/*.ply|*.bin` assets.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Suppress per-pair progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct MatchArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Pair index.
    #[arg(long)]
    pair: usize,
    /// Defaults to the dataset's threshold.
    #[arg(long)]
    theta: Option<f64>,
    /// Defaults to the dataset's pool.
    #[arg(long, value_parser = parse_pool)]
    candidate_pool: Option<CandidatePool>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LossesArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Model checkpoint; a seeded initialization when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines report, one line per batch; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Full per-tensor report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    /// Dataset directory or configuration JSON providing the model shape.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// All-zero parameters.
    #[arg(long, conflicts_with = "seed")]
    zero: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_pool(s: &str) -> std::result::Result<CandidatePool, String> {
    match s {
        "foreground" => Ok(CandidatePool::Foreground),
        "fps" => Ok(CandidatePool::Fps),
        other => Err(format!("unknown candidate pool {other:?}, expected foreground or fps")),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn fit(args: FitArgs) -> Result<()> {
    let mut dist = match &args.counts {
        Some(path) => CountsFile::load(path)?.fit()?,
        None => load_default_scannet_parameters(),
    };
    if let Some(eps) = args.epsilon {
        dist = dist.with_epsilon(eps)?;
    }
    write_output(args.output.as_deref(), &(dist.to_json_string() + "\n"))
}

fn generate(args: GenerateArgs, exec: Execution) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    config.seed = args.seed;
    macro_rules! set {
        ($($field:ident).+ = $value:expr) => {
            if let Some(v) = $value {
                config.$($field).+ = v;
            }
        };
    }
    set!(n_scenes = args.n_scenes);
    set!(n_objects_per_scene = args.n_objects_per_scene);
    set!(points_per_object = args.points_per_object);
    set!(epsilon = args.epsilon);
    set!(seeds = args.seeds);
    set!(theta = args.theta);
    set!(candidate_pool = args.candidate_pool);
    set!(tau = args.tau);
    set!(lambda_pts = args.lambda_pts);
    set!(lambda_rec = args.lambda_rec);
    set!(model.grid_side = args.grid_side);
    set!(model.grid_extent = args.grid_extent);
    set!(batch_size = args.batch_size);
    set!(format = args.format);
    if args.no_occlusion {
        config.occlusion = false;
    }
    if let Some(path) = args.assets {
        config.assets = AssetSelector::Directory { path };
    }
    config.validate()?;
    let dist = match &args.distribution {
        Some(path) => SceneDistribution::load(path)?,
        None => load_default_scannet_parameters(),
    };

    let done = AtomicUsize::new(0);
    let total = config.n_scenes;
    let quiet = args.quiet;
    let progress = move |_: usize| {
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        if !quiet {
            eprintln!("pair {n}/{total}");
        }
    };
    let summary = generate_dataset(&config, &dist, &args.output, exec, &progress)?;
    write_output(None, &to_json(&summary))
}

fn match_pair(args: MatchArgs, exec: Execution) -> Result<()> {
    let dataset = Dataset::open(&args.dataset)?;
    if args.pair >= dataset.pairs.len() {
        return Err(Error::InvalidParameter {
            path: "pair".into(),
            reason: format!("index {} but the dataset has {} pairs", args.pair, dataset.pairs.len()),
        });
    }
    let theta = args.theta.unwrap_or(dataset.config.theta);
    let pool = args.candidate_pool.unwrap_or(dataset.config.candidate_pool);
    let matches = rematch(&dataset, args.pair, theta, pool, exec)?;
    write_output(args.output.as_deref(), &to_json(&matches))
}

fn losses(args: LossesArgs, exec: Execution) -> Result<()> {
    let reports = evaluate_losses(&args.dataset, args.checkpoint.as_deref(), exec)?;
    match &args.report {
        Some(path) => write_reports(path, &reports)?,
        None => {
            let lines: String = reports
                .iter()
                .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
                .collect();
            write_output(None, &lines)?;
        }
    }
    if let Some(mean) = mean_report(&reports) {
        eprintln!(
            "{} batches: l_obj {:.6} l_pts {:.6} l_rec_coarse {:.6} l_rec_detail {:.6} l_overall {:.6}",
            reports.len(),
            mean.l_obj,
            mean.l_pts,
            mean.l_rec_coarse,
            mean.l_rec_detail,
            mean.l_overall
        );
    }
    Ok(())
}

/// Returns whether the check passed.
fn gradcheck(args: GradcheckArgs, exec: Execution) -> Result<bool> {
    let mut cfg = GradcheckConfig::default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(step) = args.step {
        cfg.step = step;
    }
    if let Some(tol) = args.tolerance {
        cfg.tolerance = tol;
    }
    let report = run_gradcheck(&cfg, exec)?;
    for c in &report.checks {
        eprintln!("{:<10} {:<28} rel {:.3e}  abs {:.3e}", c.term, c.tensor, c.max_rel_error, c.max_abs_error);
    }
    println!(
        "{}: {} parameters, max relative error {:.3e} (tolerance {:.1e}), {} pinned coordinates",
        if report.passed { "PASS" } else { "FAIL" },
        report.parameters,
        report.max_rel_error,
        report.tolerance,
        report.pinned_coordinates
    );
    if let Some(path) = &args.report {
        write_output(Some(path), &to_json(&report))?;
    }
    Ok(report.passed)
}

fn init_checkpoint(args: InitArgs) -> Result<()> {
    let path = if args.config.is_dir() {
        args.config.join(CONFIG_FILE)
    } else {
        args.config.clone()
    };
    let config = PipelineConfig::load(&path)?;
    let model = if args.zero {
        Model::zeros(&config.model)?
    } else {
        Model::init(&config.model, args.seed)?
    };
    model.to_tensors().save(&args.output)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let outcome = match cli.command {
        Command::Fit(a) => fit(a).map(|_| true),
        Command::Generate(a) => generate(a, exec).map(|_| true),
        Command::Match(a) => match_pair(a, exec).map(|_| true),
        Command::Losses(a) => losses(a, exec).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, exec),
        Command::InitCheckpoint(a) => init_checkpoint(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 2 } else { 1 })
        }
    }
}
