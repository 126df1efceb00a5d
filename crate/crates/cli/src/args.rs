use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neundiff::density::{DEFAULT_BLUR_SIGMA, DEFAULT_FRAME_SIZE};
use neundiff::detection::{AutoThreshold, Connectivity, DEFAULT_MIN_BLOB_AREA, DEFAULT_THRESHOLD};
use neundiff::diffusion::{
    Boundary, Stencil, DEFAULT_DIAG_WEIGHT, DEFAULT_ITERATIONS, DEFAULT_LAMBDA, MAX_RATE,
};
use neundiff::metrics::DEFAULT_RADIUS;
use neundiff::raster::GrayMode;
use serde::de::DeserializeOwned;

#[derive(Debug, Parser)]
#[command(
    name = "neundiff",
    version,
    about = "Cell centre detection in histology rasters"
)]
pub struct Cli {
    /// Worker threads for the diffusion solver (default: all cores).
    #[arg(long, global = true, env = "NEUNDIFF_THREADS")]
    pub threads: Option<usize>,

    /// Print per-stage wall-clock times to stderr.
    #[arg(long, global = true)]
    pub timing: bool,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Perona-Malik diffusion and write the smoothed raster.
    Diffuse(DiffuseArgs),
    /// Detect cell centres; writes PREFIX.json and PREFIX.csv.
    Detect(DetectArgs),
    /// Rater agreement and detection statistics for point sets.
    Eval(EvalArgs),
    /// Bin points into a density map; writes PREFIX.png, PREFIX.csv and PREFIX.json.
    Density(DensityArgs),
    /// Generate a synthetic raster; writes PREFIX.png, PREFIX.csv and PREFIX.json.
    Synth(SynthArgs),
}

/// Accepts enum values by their JSON spelling.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn connectivity(s: &str) -> Result<Connectivity, String> {
    let n: u8 = s
        .parse()
        .map_err(|_| format!("expected 4 or 8, got {s:?}"))?;
    Connectivity::try_from(n).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct DiffusionArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Time step; defaults to spacing²/7.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, alias = "n-iters", default_value_t = DEFAULT_ITERATIONS)]
    pub n_iters: u32,
    /// dirichlet | neumann
    #[arg(long, default_value = "dirichlet", value_parser = serde_enum::<Boundary>)]
    pub boundary: Boundary,
    #[arg(long, alias = "diag-weight", default_value_t = DEFAULT_DIAG_WEIGHT)]
    pub diag_weight: f64,
    /// Grid spacing h.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    /// consistent | unnormalized
    #[arg(long, default_value = "consistent", value_parser = serde_enum::<Stencil>)]
    pub stencil: Stencil,
}

impl DiffusionArgs {
    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(self.spacing * self.spacing * MAX_RATE)
    }
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// luminance | r | g | b
    #[arg(long, alias = "gray-mode", default_value = "luminance", value_parser = serde_enum::<GrayMode>)]
    pub gray_mode: GrayMode,
    /// JSON run configuration; its fields override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct DiffuseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub diffusion: DiffusionArgs,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output prefix.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub diffusion: DiffusionArgs,
    #[arg(long, alias = "intensity-threshold", default_value_t = DEFAULT_THRESHOLD)]
    pub intensity_threshold: f64,
    #[arg(long, alias = "min-blob-area", default_value_t = DEFAULT_MIN_BLOB_AREA)]
    pub min_blob_area: usize,
    /// 4 | 8
    #[arg(long, default_value = "8", value_parser = connectivity)]
    pub connectivity: Connectivity,
    /// Compute the threshold from the diffused raster instead (otsu).
    #[arg(long, alias = "auto-threshold", value_parser = serde_enum::<AutoThreshold>)]
    pub auto_threshold: Option<AutoThreshold>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct EvalArgs {
    /// Annotation CSVs of two or more raters.
    #[arg(long, num_args = 1..)]
    pub raters: Vec<PathBuf>,
    /// Method output; enables the expert/method ratio and, with --truth,
    /// detection statistics.
    #[arg(long)]
    pub detected: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    pub radius: f64,
    /// Report path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct DensityArgs {
    #[arg(long)]
    pub points: PathBuf,
    /// Source raster width; taken from --like when omitted.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Raster whose dimensions define the mesh extent.
    #[arg(long)]
    pub like: Option<PathBuf>,
    #[arg(long, alias = "frame-size", default_value_t = DEFAULT_FRAME_SIZE)]
    pub frame_size: usize,
    #[arg(long, alias = "blur-sigma", default_value_t = DEFAULT_BLUR_SIGMA)]
    pub blur_sigma: f64,
    /// Source pixel size in µm, for the frame area in the report.
    #[arg(long, alias = "um-per-px")]
    pub um_per_px: Option<f64>,
    /// Output prefix.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct SynthArgs {
    /// Output prefix.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, alias = "n-cells", default_value_t = 100)]
    pub n_cells: usize,
    #[arg(long, alias = "diameter-min", default_value_t = 9.0)]
    pub diameter_min: f64,
    #[arg(long, alias = "diameter-max", default_value_t = 30.0)]
    pub diameter_max: f64,
    #[arg(long, alias = "center-min", default_value_t = 30.0)]
    pub center_min: f64,
    #[arg(long, alias = "center-max", default_value_t = 110.0)]
    pub center_max: f64,
    #[arg(long, default_value_t = 230.0)]
    pub background: f64,
    #[arg(long, alias = "touching-fraction", default_value_t = 0.2)]
    pub touching_fraction: f64,
    #[arg(long, alias = "noise-amplitude", default_value_t = 15.0)]
    pub noise_amplitude: f64,
    #[arg(long, alias = "speckle-count", default_value_t = 30)]
    pub speckle_count: usize,
    #[arg(long, alias = "speckle-radius-min", default_value_t = 0.5)]
    pub speckle_radius_min: f64,
    #[arg(long, alias = "speckle-radius-max", default_value_t = 1.5)]
    pub speckle_radius_max: f64,
    #[arg(long, alias = "speckle-min", default_value_t = 40.0)]
    pub speckle_min: f64,
    #[arg(long, alias = "speckle-max", default_value_t = 110.0)]
    pub speckle_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
