use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dhr_cli::commands;
use dhr_cli::config::{apply_overrides, Overrides, PipelineConfig};

/// Mask rebalancing for weakly-supervised segmentation: recovers minor
/// classes absorbed by their neighbors and re-splits class regions using two
/// feature fields.
#[derive(Parser)]
#[command(name = "dhr", version, about)]
struct Cli {
    /// TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PipelineFlags {
    /// Entropic regularization strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Marginal violation tolerance of the transport solver.
    #[arg(long = "ot-tol")]
    ot_tol: Option<f64>,
    /// Iteration cap of the transport solver.
    #[arg(long = "ot-max-iter")]
    ot_max_iter: Option<usize>,
    /// Column-marginal mode: mass_proportional or uniform.
    #[arg(long = "col-marginal")]
    col_marginal: Option<String>,
    /// Relative floor on the column marginal.
    #[arg(long = "col-floor")]
    col_floor: Option<f64>,
    /// Gate with the raw coupling instead of per-pixel distributions.
    #[arg(long = "raw-plan", default_value_t = false)]
    raw_plan: bool,
    /// Vanished-class area threshold.
    #[arg(long = "theta-v")]
    theta_v: Option<f64>,
    /// Background mode: one_minus_max or fixed.
    #[arg(long = "bg-mode")]
    bg_mode: Option<String>,
    /// Background score in fixed mode.
    #[arg(long = "bg-score")]
    bg_score: Option<f64>,
    /// Centroid-correlation threshold for grouping.
    #[arg(long)]
    tau: Option<f64>,
    /// Literal elementwise-product reading of the group indicator.
    #[arg(long = "literal-product", default_value_t = false)]
    literal_product: bool,
    /// Boundary refiner for the final output: identity or pamr.
    #[arg(long)]
    refiner: Option<String>,
    /// Boundary refiner inside seed computation: identity or pamr.
    #[arg(long = "seed-refiner")]
    seed_refiner: Option<String>,
    #[arg(long = "pamr-iters")]
    pamr_iters: Option<usize>,
    /// Comma-separated dilation radii, e.g. 1,2,4,8.
    #[arg(long = "pamr-dilations")]
    pamr_dilations: Option<String>,
    #[arg(long = "pamr-sigma")]
    pamr_sigma: Option<f64>,
    /// Worker count (DHR_THREADS overrides).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Default)]
struct SynthFlags {
    /// RNG seed for the generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size as HxW, e.g. 64x64.
    #[arg(long)]
    grid: Option<String>,
    /// Super-class count range, e.g. 2-3.
    #[arg(long = "n-super")]
    n_super: Option<String>,
    /// Classes-per-super range, e.g. 1-3.
    #[arg(long = "classes-per-super")]
    classes_per_super: Option<String>,
    /// Minor area fraction range, e.g. 0.03-0.08.
    #[arg(long = "minor-area-frac")]
    minor_area_frac: Option<String>,
    #[arg(long = "noise-sigma")]
    noise_sigma: Option<f64>,
    #[arg(long = "cam-blur")]
    cam_blur: Option<usize>,
    #[arg(long = "absorb-prob")]
    absorb_prob: Option<f64>,
    #[arg(long = "feature-dim-us")]
    feature_dim_us: Option<usize>,
    #[arg(long = "feature-dim-ws")]
    feature_dim_ws: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Refine every scene in a directory.
    Refine {
        /// Directory of scene subdirectories.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for refined masks and provenance.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory (defaults to the prediction directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mask filename inside each prediction scene directory.
        #[arg(long = "pred-name", default_value = "m_dh.png")]
        pred_name: String,
        /// Mask filename inside each ground-truth scene directory.
        #[arg(long = "gt-name", default_value = "gt.png")]
        gt_name: String,
        /// Chebyshev adjacency radius.
        #[arg(long, default_value_t = 1)]
        radius: usize,
    },
    /// Generate a synthetic scene suite.
    Synth {
        #[arg(short = 'n', long, default_value_t = 50)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Time the transport solver on random instances.
    OtBench {
        /// Comma-separated sizes, e.g. 1x1,64x4,1024x21.
        #[arg(long, default_value = "1x1,64x4,1024x21,4096x21")]
        sizes: String,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Adjacency statistics over ground-truth masks.
    Adjacency {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        radius: usize,
    },
}

fn pipeline_overrides(flags: &PipelineFlags) -> Overrides {
    Overrides {
        lambda: flags.lambda,
        ot_tol: flags.ot_tol,
        ot_max_iter: flags.ot_max_iter,
        col_marginal: flags.col_marginal.clone(),
        col_floor: flags.col_floor,
        raw_plan: flags.raw_plan,
        theta_v: flags.theta_v,
        bg_mode: flags.bg_mode.clone(),
        bg_score: flags.bg_score,
        tau: flags.tau,
        literal_product: flags.literal_product,
        refiner: flags.refiner.clone(),
        seed_refiner: flags.seed_refiner.clone(),
        pamr_iters: flags.pamr_iters,
        pamr_dilations: flags.pamr_dilations.clone(),
        pamr_sigma: flags.pamr_sigma,
        workers: flags.workers,
        ..Overrides::default()
    }
}

fn synth_overrides(flags: &SynthFlags) -> Overrides {
    Overrides {
        synth_seed: flags.seed,
        grid: flags.grid.clone(),
        n_super: flags.n_super.clone(),
        classes_per_super: flags.classes_per_super.clone(),
        minor_area_frac: flags.minor_area_frac.clone(),
        noise_sigma: flags.noise_sigma,
        cam_blur: flags.cam_blur,
        absorb_prob: flags.absorb_prob,
        feature_dim_us: flags.feature_dim_us,
        feature_dim_ws: flags.feature_dim_ws,
        ..Overrides::default()
    }
}

fn load_config(path: Option<&PathBuf>, overrides: &Overrides) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Refine { input, out, pipeline } => {
            let cfg = load_config(cli.config.as_ref(), &pipeline_overrides(pipeline)).map_err(usage_error)?;
            cfg.build_dhr().map_err(usage_error)?;
            commands::cmd_refine(input, out, &cfg)
        }
        Command::Eval { pred, gt, out, pred_name, gt_name, radius } => {
            if *radius < 1 {
                return Err(usage_error(anyhow::anyhow!("radius must be >= 1")));
            }
            commands::cmd_eval(pred, gt, out.as_deref(), pred_name, gt_name, *radius)
        }
        Command::Synth { count, out, synth } => {
            let cfg = load_config(cli.config.as_ref(), &synth_overrides(synth)).map_err(usage_error)?;
            cfg.synth.validate().map_err(|e| usage_error(e.into()))?;
            commands::cmd_synth(&cfg, *count, out)
        }
        Command::OtBench { sizes, pipeline } => {
            let cfg = load_config(cli.config.as_ref(), &pipeline_overrides(pipeline)).map_err(usage_error)?;
            cfg.ot.validate().map_err(|e| usage_error(e.into()))?;
            let (_, code) = commands::cmd_ot_bench(sizes, &cfg)?;
            Ok(code)
        }
        Command::Adjacency { input, radius } => {
            if *radius < 1 {
                return Err(usage_error(anyhow::anyhow!("radius must be >= 1")));
            }
            let (_, code) = commands::cmd_adjacency(input, *radius)?;
            Ok(code)
        }
    }
}

/// Marker attached to configuration errors so main exits with code 2.
#[derive(Debug)]
struct UsageErrorMarker;

impl std::fmt::Display for UsageErrorMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error")
    }
}

fn usage_error(err: anyhow::Error) -> anyhow::Error {
    err.context(UsageErrorMarker)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageErrorMarker>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
