use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Geo-supervised domain adaptation for semantic segmentation.
#[derive(Debug, Parser)]
#[command(name = "geomt", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode `lon_m lat_m` pairs into sinusoidal location vectors.
    Encode(EncodeArgs),
    /// Write a synthetic geo-tagged dataset.
    GenData(GenDataArgs),
    /// Train on a dataset and write history, checkpoints and a config echo.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out labels of unlabeled domains.
    Eval(EvalArgs),
    /// Run a grid of training configurations on one dataset.
    Ablate(AblateArgs),
    /// Print trainable parameter counts for a configuration.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Text file with one `lon_m lat_m` pair per line (`-` for stdin).
    pub input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 20000.0)]
    pub base_frequency: f64,
    /// Half-width of the uniform noise added to each axis, in meters.
    #[arg(long, default_value_t = 0.0)]
    pub noise_radius_m: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Centering origin as `lon,lat` in meters.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true)]
    pub origin: Option<(f64, f64)>,
}

fn parse_origin(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `lon,lat`")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration; only its `[synthetic]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub source_domains: Option<usize>,
    #[arg(long)]
    pub target_domains: Option<usize>,
    #[arg(long)]
    pub patches_per_domain: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Spread of per-domain radiometric gain and offset (0 disables the shift).
    #[arg(long)]
    pub shift_magnitude: Option<f64>,
    #[arg(long)]
    pub other_fraction: Option<f64>,
    #[arg(long)]
    pub box_half_width_m: Option<f64>,
    #[arg(long)]
    pub region_half_width_m: Option<f64>,
    #[arg(long)]
    pub pixel_noise: Option<f64>,
    /// Tie class layout to patch location.
    #[arg(long)]
    pub geo_informative: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory; overrides `paths.data`.
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out label directory; defaults to `<data>/eval_labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Directory for `iou.csv`; the table is printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fold labels above this value into "other".
    #[arg(long)]
    pub merge_labels_above: Option<u8>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Grid file with `[base]` and `[[cells]]`.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub grid: Option<PathBuf>,
    /// Built-in grid; `standard` covers noise, frequency, feature tap, time and component axes.
    #[arg(long, value_parser = ["standard"])]
    pub preset: Option<String>,
    /// Base run configuration the cells are applied to.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `max_epochs` (and cap `patience`) for every cell.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print the resolved grid as TOML and exit.
    #[arg(long)]
    pub print_grid: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use 256-pixel inputs and ResNet-like encoder widths.
    #[arg(long)]
    pub full_scale: bool,
}

/// Exit status classes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<geomt::Error> for Failure {
    fn from(e: geomt::Error) -> Self {
        match e {
            geomt::Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<geomt::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Params(a) => commands::params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
