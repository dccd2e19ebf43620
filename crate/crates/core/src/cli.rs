//! `occkit` command line.
//!
//! Exit codes: 0 success, 1 a check failed (`selfcheck`), 2 usage, format
//! or validation error. Outputs are written atomically, so a failing
//! command never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::augment::{cutout, CutoutSpec};
use crate::det2occ::{boxes_to_probgrid, ConversionConfig, DEFAULT_THRESHOLD};
use crate::ensemble::{max_prob_fuse, vote_fuse, weighted_average, EnsembleWeights, Strategy};
use crate::error::{OccError, Result};
use crate::grid::{ClassTable, GridSpec, ProbGrid};
use crate::io::{self, GridPayload, RunConfig};
use crate::metrics::{evaluate_with, EvalOptions};
use crate::selfcheck::{self, SelfcheckOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (OCCK format v1)");

#[derive(Debug, Parser)]
#[command(name = "occkit", version = LONG_VERSION, about = "Semantic voxel-occupancy toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked per-class IoU and mIoU of a prediction against ground truth.
    Eval(EvalArgs),
    /// Fuse occupancy grids, optionally with detection boxes.
    Ensemble(EnsembleArgs),
    /// Convert detection boxes to an occupancy probability grid.
    Det2occ(Det2OccArgs),
    /// Cut random rectangular holes into an image set.
    Cutout(CutoutArgs),
    /// Run the built-in gradient and property suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted labels or probabilities (argmax is taken).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// JSON report destination.
    #[arg(long)]
    pub report: PathBuf,
    /// Score classes absent from prediction and ground truth as 0 instead
    /// of leaving them out of the mean.
    #[arg(long)]
    pub strict_zero: bool,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// One per input, then one for the detections when `--boxes` is given.
    /// Uniform by default.
    #[arg(long, num_args = 1..)]
    pub weights: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Detection boxes (JSONL) converted on the input geometry and fused
    /// as one more model.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Lattice spacing for the detection conversion.
    #[arg(long)]
    pub t: Option<f64>,
    /// Per-class detection thresholds (JSON number, array or name map).
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Run configuration; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct Det2OccArgs {
    #[arg(long)]
    pub boxes: PathBuf,
    /// `default` for the 200x200x16 challenge geometry, or a JSON file.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Run configuration; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CutoutArgs {
    /// Image set (OCCK payload kind 5).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub holes: usize,
    /// Hole side as a fraction of the image side.
    #[arg(long, default_value_t = 0.25)]
    pub size: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub fill: u8,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Single-seed gradient check; finishes in a few seconds.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Weighted,
    Max,
    Vote,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Weighted => Strategy::Weighted,
            StrategyArg::Max => Strategy::Max,
            StrategyArg::Vote => Strategy::Vote,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    DiceGrad,
}

/// Class names for reports: the challenge table for 18-class grids,
/// generic names otherwise.
pub fn classes_for(spec: &GridSpec) -> ClassTable {
    if spec.num_classes() == ClassTable::challenge().len() {
        ClassTable::challenge()
    } else {
        ClassTable::for_spec(spec)
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn conversion_config(
    spec: &GridSpec,
    config: &RunConfig,
    t: Option<f64>,
    thresholds: Option<&Path>,
) -> Result<ConversionConfig> {
    let spacing = t.unwrap_or(config.det2occ.spacing_t);
    let thresholds = match thresholds {
        Some(p) => {
            let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
            io::parse_thresholds(&value, spec, &classes_for(spec))?
        }
        None => config
            .det2occ
            .thresholds
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_THRESHOLD; spec.num_semantic()]),
    };
    let cfg = ConversionConfig::new(thresholds, spacing)?;
    cfg.check_against(spec)?;
    Ok(cfg)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let pred = match io::read_grid(&args.pred)? {
        GridPayload::Labels(g) => g,
        GridPayload::Probs(p) => p.argmax(),
        GridPayload::Mask(_) => {
            return Err(OccError::invalid("prediction", "a mask file is not a prediction"))
        }
    };
    let gt = io::read_labels(&args.gt)?;
    let mask = io::read_mask(&args.mask)?;
    let report = evaluate_with(
        &pred,
        &gt,
        &mask,
        EvalOptions {
            strict_zero: args.strict_zero,
        },
    )?;
    let json = serde_json::to_string_pretty(&report.to_json(&classes_for(gt.spec())))?;
    io::write_atomic(&args.report, json.as_bytes())?;
    match report.miou {
        Some(m) => writeln!(out, "mIoU: {m:.4}")?,
        None => writeln!(out, "mIoU: undefined (no semantic class present)")?,
    }
    Ok(())
}

fn read_all_probs(paths: &[PathBuf]) -> Result<Vec<ProbGrid>> {
    thread::scope(|s| {
        let handles: Vec<_> = paths
            .iter()
            .map(|p| s.spawn(move || io::read_probs(p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("reader thread panicked"))
            .collect()
    })
}

pub fn cmd_pipeline_ensemble(args: &EnsembleArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let strategy = args.strategy.map(Strategy::from).unwrap_or(config.ensemble.strategy);
    let mut grids = read_all_probs(&args.inputs)?;
    let spec = *grids[0].spec();

    if let Some(boxes_path) = &args.boxes {
        let cfg = conversion_config(&spec, &config, args.t, args.thresholds.as_deref())?;
        let boxes = io::read_boxes(boxes_path, spec.num_classes())?;
        grids.push(boxes_to_probgrid(&boxes, &spec, &cfg)?);
    }
    let weights = match args.weights.clone().or_else(|| config.ensemble.weights.clone()) {
        Some(w) => EnsembleWeights::new(w)?,
        None => EnsembleWeights::uniform(grids.len())?,
    };
    if weights.len() != grids.len() {
        return Err(OccError::invalid(
            "weights",
            format!(
                "{} weights for {} inputs{}",
                weights.len(),
                args.inputs.len(),
                if args.boxes.is_some() { " plus detections" } else { "" }
            ),
        ));
    }

    match strategy {
        Strategy::Weighted => io::write_grid(&args.output, &weighted_average(&grids, &weights)?)?,
        Strategy::Max => io::write_grid(&args.output, &max_prob_fuse(&grids)?)?,
        Strategy::Vote => io::write_grid(&args.output, &vote_fuse(&grids)?)?,
    }
    writeln!(
        out,
        "fused {} grids ({strategy:?}) into {}",
        grids.len(),
        args.output.display()
    )?;
    Ok(())
}

fn parse_spec_arg(arg: &str) -> Result<GridSpec> {
    if arg == "default" {
        return Ok(GridSpec::challenge());
    }
    Ok(serde_json::from_str(&fs::read_to_string(arg)?)?)
}

pub fn cmd_det2occ(args: &Det2OccArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let spec = parse_spec_arg(&args.spec)?;
    let cfg = conversion_config(&spec, &config, args.t, args.thresholds.as_deref())?;
    let boxes = io::read_boxes(&args.boxes, spec.num_classes())?;
    let grid = boxes_to_probgrid(&boxes, &spec, &cfg)?;
    io::write_grid(&args.output, &grid)?;
    writeln!(out, "converted {} boxes into {}", boxes.len(), args.output.display())?;
    Ok(())
}

pub fn cmd_cutout(args: &CutoutArgs, out: &mut dyn Write) -> Result<()> {
    let imgs = io::read_images(&args.input)?;
    let (_, h, w, _) = imgs.dims();
    let spec = CutoutSpec::relative(h, w, args.holes, args.size, args.fill, args.seed)?;
    io::write_images(&args.output, &cutout(&imgs, &spec))?;
    writeln!(
        out,
        "{} hole(s) of {}x{} per image into {}",
        spec.num_holes,
        spec.hole_h,
        spec.hole_w,
        args.output.display()
    )?;
    Ok(())
}

pub fn cmd_selfcheck(args: &SelfcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let opts = SelfcheckOptions {
        quick: args.quick,
        inject_dice_fault: args.inject_fault == Some(Fault::DiceGrad),
    };
    Ok(selfcheck::run(&opts, out)?.passed())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return if code == 0 { EXIT_OK } else { EXIT_ERROR };
        }
    };
    let result = match &cli.command {
        Command::Eval(a) => cmd_eval(a, out).map(|_| true),
        Command::Ensemble(a) => cmd_pipeline_ensemble(a, out).map(|_| true),
        Command::Det2occ(a) => cmd_det2occ(a, out).map(|_| true),
        Command::Cutout(a) => cmd_cutout(a, out).map(|_| true),
        Command::Selfcheck(a) => cmd_selfcheck(a, out),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            let _ = writeln!(err, "occkit: {e}");
            EXIT_ERROR
        }
    }
}
