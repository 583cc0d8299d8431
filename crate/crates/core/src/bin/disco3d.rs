//! Command-line surface: scene generation, training runs, evaluation and
//! confidence export. Exit codes: 0 success, 2 input/validation error,
//! 3 numerical failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use disco3d::eval::{
    classify_points, evaluate, export_confidence, match_clip, match_hungarian, ClassifyMode, ExportFormat,
    DEFAULT_MIN_SHARE,
};
use disco3d::fieldset::{generate_synthetic_scene, load_fieldset, save_fieldset, FieldSet, GeneratorSpec};
use disco3d::guidance::load_query_file;
use disco3d::prototypes::match_prototypes_to_catalog;
use disco3d::trainer::{load_checkpoint, run_with_progress, save_checkpoint, write_telemetry_csv, RunConfig};
use disco3d::{Error, QuerySet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "disco3d", version, about = "Sub-concept discovery on 3D feature fields")]
struct Cli {
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Mode {
    /// Query-free unsupervised segmentation.
    Uss,
    /// One binary relevant/irrelevant segmentation per query.
    Ovseg,
    /// Sub-concept discovery under one or more queries.
    Ovsd,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Matching {
    Clip,
    Hungarian,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum PointMode {
    Direct,
    Render,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic field file (plus catalog sidecar) from a TOML spec.
    Gen {
        /// Generator spec (TOML).
        spec: PathBuf,
        /// Output field file.
        out: PathBuf,
        /// Override the spec's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a projector and prototype bank on a field file.
    Run(RunArgs),
    /// Evaluate a checkpoint against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Export per-point labels and confidences without evaluating.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Input field file.
    field: PathBuf,
    /// Output checkpoint.
    #[arg(long, short)]
    out: PathBuf,
    /// JSON query file (forbidden in uss mode).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Run configuration (TOML); defaults are the stock hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Segmentation regime; inferred from query presence when omitted.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Telemetry CSV path.
    #[arg(long)]
    telemetry: Option<PathBuf>,
    /// Suppress the per-epoch loss lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Field file with ground-truth labels.
    field: PathBuf,
    /// Matching regime linking prototypes to classes.
    #[arg(long = "match", value_enum, default_value = "hungarian")]
    matching: Matching,
    /// JSON metric report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Point classification path.
    #[arg(long, value_enum, default_value = "direct")]
    points: PointMode,
    /// Back-projection radius for render mode.
    #[arg(long, default_value_t = 0.5)]
    match_radius: f64,
    /// Minimum point share below which a prototype counts as unused.
    #[arg(long, default_value_t = DEFAULT_MIN_SHARE)]
    min_share: f64,
    /// Also export labeled points as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also export labeled points as PLY.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Field file.
    field: PathBuf,
    #[arg(long, value_enum, default_value = "direct")]
    points: PointMode,
    #[arg(long, default_value_t = 0.5)]
    match_radius: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    ply: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DISCO_LOG")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // Ignore the error if a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(command: Command) -> disco3d::Result<()> {
    match command {
        Command::Gen { spec, out, seed } => cmd_gen(&spec, &out, seed),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn cmd_gen(spec_path: &Path, out: &Path, seed: Option<u64>) -> disco3d::Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let mut spec: GeneratorSpec =
        toml::from_str(&text).map_err(|e| Error::Validation(format!("generator spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let fieldset = generate_synthetic_scene(&spec)?;
    save_fieldset(&fieldset, out)?;
    println!(
        "wrote {} samples ({} rays, {} viewpoints, {} classes) to {}",
        fieldset.samples.len(),
        fieldset.rays.len(),
        fieldset.viewpoints.len(),
        fieldset.catalog.len(),
        out.display()
    );
    Ok(())
}

/// Resolve the regime against query presence and reshape the prototype
/// budget accordingly.
fn resolve_mode(
    mode: Option<Mode>,
    queryset: &QuerySet,
    config: &mut RunConfig,
) -> disco3d::Result<Mode> {
    let mode = mode.unwrap_or(if queryset.is_empty() { Mode::Uss } else { Mode::Ovsd });
    match mode {
        Mode::Uss => {
            if !queryset.is_empty() {
                return Err(Error::Usage("uss mode does not accept a query file".into()));
            }
            // The whole prototype budget is unsupervised.
            config.n_rel += config.n_irr;
            config.n_irr = 0;
        }
        Mode::Ovseg => {
            if queryset.is_empty() {
                return Err(Error::Usage("ovseg mode requires a query file".into()));
            }
            if queryset.queries.iter().any(|q| q.relevant_indices.len() != 1) {
                return Err(Error::Usage(
                    "ovseg mode uses exactly one relevant prototype per query".into(),
                ));
            }
            config.n_rel = queryset.required_n_rel();
        }
        Mode::Ovsd => {
            if queryset.is_empty() {
                return Err(Error::Usage("ovsd mode requires a query file".into()));
            }
            config.n_rel = queryset.required_n_rel();
        }
    }
    Ok(mode)
}

fn cmd_run(args: RunArgs) -> disco3d::Result<()> {
    let fieldset = load_fieldset(&args.field)?;
    let mut config = match &args.config {
        Some(p) => RunConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let queryset = match &args.queries {
        Some(p) => load_query_file(p, &fieldset.catalog, config.tau_default)?,
        None => QuerySet::empty(),
    };
    let mode = resolve_mode(args.mode, &queryset, &mut config)?;
    log::info!(
        "mode {mode:?}: {} relevant + {} irrelevant prototypes, {} epochs",
        config.n_rel,
        config.n_irr,
        config.epochs
    );

    let quiet = args.quiet;
    let output = run_with_progress(&fieldset, &queryset, &config, |row| {
        if !quiet {
            println!(
                "epoch {:4}  total {:+.6}  proj {:+.6}  irr {:.6}  proto {:.6}  beta {:.3}  lr {:.3e}  used {:2}  {:.1}ms",
                row.epoch, row.total, row.l_proj, row.l_irr, row.l_proto, row.beta, row.lr, row.used_prototypes, row.ms
            );
        }
    })?;
    save_checkpoint(&output, &args.out)?;
    if let Some(t) = &args.telemetry {
        write_telemetry_csv(&output.telemetry, t)?;
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

/// Evaluated points: the labeled samples when ground truth exists.
fn eval_points(fieldset: &FieldSet) -> (Vec<usize>, Vec<Option<u32>>) {
    let points: Vec<usize> = (0..fieldset.samples.len())
        .filter(|&i| fieldset.samples[i].gt_label.is_some())
        .collect();
    if points.is_empty() {
        let all: Vec<usize> = (0..fieldset.samples.len()).collect();
        let gt = vec![None; all.len()];
        (all, gt)
    } else {
        let gt = points.iter().map(|&i| fieldset.samples[i].gt_label).collect();
        (points, gt)
    }
}

fn classify_mode(points: PointMode, match_radius: f64) -> ClassifyMode {
    match points {
        PointMode::Direct => ClassifyMode::Direct,
        PointMode::Render => ClassifyMode::Render { match_radius },
    }
}

fn cmd_eval(args: EvalArgs) -> disco3d::Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let fieldset = load_fieldset(&args.field)?;
    let (points, gt) = eval_points(&fieldset);
    if gt.iter().all(|g| g.is_none()) {
        return Err(Error::Usage(
            "evaluation requires ground-truth labels in the field file".into(),
        ));
    }
    let n_gt = if fieldset.catalog.is_empty() {
        gt.iter().flatten().map(|&g| g as usize + 1).max().unwrap_or(0)
    } else {
        fieldset.catalog.len()
    };

    let mut result = classify_points(
        &fieldset,
        &points,
        &checkpoint.params,
        &checkpoint.bank,
        classify_mode(args.points, args.match_radius),
    )?;
    result.matched_ids = match args.matching {
        Matching::Hungarian => match_hungarian(&result, &gt, n_gt, args.min_share)?,
        Matching::Clip => {
            if fieldset.catalog.is_empty() {
                return Err(Error::Usage(
                    "clip matching requires a class catalog sidecar".into(),
                ));
            }
            match_clip(&result, &checkpoint.bank, &fieldset.catalog, args.min_share)?
        }
    };
    let report = evaluate(&result, &gt, n_gt, args.min_share)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("report serialization: {e}")))?;
    match &args.report {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    println!(
        "PQ {:.4} (SQ {:.4} RQ {:.4})  mIoU {:.4}  mAcc {:.4}",
        report.pq, report.sq, report.rq, report.miou_rel, report.macc_rel
    );
    if !fieldset.catalog.is_empty() {
        if let Ok(matches) = match_prototypes_to_catalog(&checkpoint.bank, &fieldset.catalog) {
            for m in matches {
                match m.class_id {
                    Some(id) => log::info!(
                        "prototype {} -> class {} ({})",
                        m.prototype,
                        id,
                        fieldset.catalog.classes[id as usize].name
                    ),
                    None => log::info!("prototype {} unused", m.prototype),
                }
            }
        }
    }
    if let Some(p) = &args.csv {
        export_confidence(&result, p, ExportFormat::Csv)?;
    }
    if let Some(p) = &args.ply {
        export_confidence(&result, p, ExportFormat::Ply)?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> disco3d::Result<()> {
    if args.csv.is_none() && args.ply.is_none() {
        return Err(Error::Usage("export needs --csv and/or --ply".into()));
    }
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let fieldset = load_fieldset(&args.field)?;
    let points: Vec<usize> = (0..fieldset.samples.len()).collect();
    let result = classify_points(
        &fieldset,
        &points,
        &checkpoint.params,
        &checkpoint.bank,
        classify_mode(args.points, args.match_radius),
    )?;
    if let Some(p) = &args.csv {
        export_confidence(&result, p, ExportFormat::Csv)?;
    }
    if let Some(p) = &args.ply {
        export_confidence(&result, p, ExportFormat::Ply)?;
    }
    println!("exported {} points", result.n_points());
    Ok(())
}
