//! `calidet` command line: edge tooling, synthetic worlds and datasets, toy training,
//! self-calibration and evaluation sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "calidet", version, about = "Run-time calibration of object-relation priors")]
struct Cli {
    /// Root seed. Overrides CALIDET_SEED and any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, transform and compare edge matrices.
    #[command(subcommand)]
    Edges(EdgesCmd),
    /// Synthetic worlds.
    #[command(subcommand)]
    World(WorldCmd),
    /// Dataset generation, remapping and splitting.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train the calibration model.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Self-calibrate a prior from a detector's own predictions.
    #[command(subcommand)]
    Selfcal(SelfcalCmd),
    /// Evaluate a detector under injected priors.
    #[command(subcommand)]
    Eval(EvalCmd),
}

fn positive() -> clap::builder::RangedU64ValueParser<usize> {
    clap::builder::RangedU64ValueParser::new().range(1..)
}

#[derive(Subcommand, Debug)]
enum EdgesCmd {
    /// Edge of a COCO-format annotation file.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flat prior over `k` classes.
    Flat {
        #[arg(long, value_parser = positive())]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flip every off-diagonal entry.
    Flip {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference from the flat prior.
    Delta {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean absolute difference with percentiles.
    Compare { a: PathBuf, b: PathBuf },
    /// Draw one prior from the training-time sampler.
    Sample {
        #[arg(long)]
        ex: PathBuf,
        #[arg(long)]
        eb: PathBuf,
        #[arg(long)]
        et: PathBuf,
        #[arg(long, default_value_t = 0.16)]
        sigma: f64,
        /// Sources to choose from.
        #[arg(long, value_delimiter = ',', default_value = "sample,batch,train")]
        sources: Vec<Source>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an edge as CSV with class ids as headers.
    Csv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Sample,
    Batch,
    Train,
}

#[derive(Subcommand, Debug)]
enum WorldCmd {
    /// Seeded mixture-of-scenes world.
    Gen {
        #[arg(long, value_parser = positive())]
        k: usize,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        target_iou: Option<f64>,
        #[arg(long)]
        fp_rate: Option<f64>,
        #[arg(long)]
        base_present: Option<f64>,
        #[arg(long)]
        base_absent: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same scenes under a different scene mixture.
    Reweight {
        #[arg(long)]
        world: PathBuf,
        /// One weight per scene; normalized before use.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Generate images from a world as a COCO-format file.
    Gen {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move a dataset into another taxonomy.
    Remap {
        #[arg(long)]
        annotations: PathBuf,
        /// JSON list of `{"source", "target"}` pairs.
        #[arg(long)]
        mapping: PathBuf,
        /// Target taxonomy ids; defaults to the mapping's targets.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        /// Write the filter report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cut a dataset into equal, non-overlapping subsets.
    Split {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    /// Toy training on a synthetic world.
    Toy {
        /// JSON training config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable the logit manipulation loss and train under the training prior only.
        #[arg(long)]
        ablation: bool,
        /// Per-epoch metrics as JSON lines.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum SelfcalCmd {
    /// Iterate the calibration on one subset.
    Run(SelfcalArgs),
}

#[derive(Args, Debug)]
struct SelfcalArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Images to calibrate on; generated from the world when absent.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Scene weights of the deployment world used for generated images.
    #[arg(long, value_delimiter = ',')]
    scene_weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 256)]
    subset_size: usize,
    #[arg(long, default_value_t = 4.0)]
    eta: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    floor: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, value_enum, default_value = "column")]
    z_axis: Axis,
    /// Use running statistics with this decay.
    #[arg(long)]
    running_decay: Option<f64>,
    /// Starting prior; defaults to the world reference.
    #[arg(long)]
    et: Option<PathBuf>,
    /// Skip AP evaluation of each iteration.
    #[arg(long)]
    no_eval: bool,
    /// Per-iteration trace as JSON lines.
    #[arg(long)]
    trace: PathBuf,
    /// Final calibrated prior.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Axis {
    Column,
    Row,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// AP under each standard prior.
    Sweep {
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "ebar,e0,et,ex")]
        priors: Vec<String>,
        /// Training prior; defaults to the world reference.
        #[arg(long)]
        et: Option<PathBuf>,
        /// Subset size for the batch prior.
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Training prior against per-subset statistics, for several subset sizes.
    Subsets {
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        sizes: Vec<usize>,
        #[arg(long)]
        et: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Plain-text table.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    max_detections: Option<usize>,
    /// Also report small/medium/large AP.
    #[arg(long)]
    area_ranges: bool,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[arg(long, value_enum, default_value = "sim")]
    detector: DetectorKind,
    /// World file; drives the simulated detector.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Fixed predictions as JSON lines, for the oracle detector.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Service endpoint, for the http detector.
    #[arg(long)]
    url: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DetectorKind {
    /// Simulated detector of the world.
    Sim,
    /// Replays fixed predictions whatever the prior.
    Oracle,
    Http,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                calidet::ErrorKind::Usage => 1,
                calidet::ErrorKind::Data => 2,
                calidet::ErrorKind::Numeric => 3,
            })
        }
    }
}
