use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Non-ergodic ground-motion model toolkit for Fourier amplitude residuals.
#[derive(Debug, Parser)]
#[command(name = "negmm", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Pipeline configuration (JSON); command-line flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent per-frequency jobs (needs the `parallel` feature to exceed 1).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Inputs shared by commands that read a flatfile.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Flatfile CSV with one `res_f<freq>` column per frequency.
    #[arg(long)]
    pub flatfile: Option<PathBuf>,
    /// JSON `{"freqs": [...], "c7": [...]}`.
    #[arg(long)]
    pub c7: Option<PathBuf>,
    /// Grid as JSON: a cell grid `{origin, dx, dy, nx, ny}` or a grid spec with a `kind` tag.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Region polygons as JSON; the built-in California pair otherwise.
    #[arg(long)]
    pub polygons: Option<PathBuf>,
    /// UTM zone such as `11N`.
    #[arg(long)]
    pub zone: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SamplerArgs {
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerChoice>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerChoice {
    Gibbs,
    Nuts,
    Laplace,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the whole pipeline and write a model bundle.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Bundle directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail with exit code 3 when a fit misses the convergence gate.
        #[arg(long)]
        strict: bool,
    },
    /// Read a flatfile, project and segment it, and report counts.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for the report, grid and segment triplets.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one regression phase at the listed frequencies.
    Fit {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Comma-separated frequencies (Hz); all flatfile frequencies when omitted.
        #[arg(long, value_delimiter = ',')]
        freqs: Vec<f64>,
        /// Smoothed hyperparameters (JSON, from `smooth`), required for phase 2.
        #[arg(long)]
        hyper: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smooth phase-one hyperparameters across frequency.
    Smooth {
        /// `fits.json` written by `fit --phase 1`, or the directory holding it.
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict scenarios from a model bundle.
    Predict {
        /// Scenario JSON: one object or a list, with geographic `eq`, `sta` and optional `cls`.
        #[arg(long)]
        scenario: PathBuf,
        /// Model bundle directory.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated frequencies; every bundled frequency when omitted.
        #[arg(long, value_delimiter = ',')]
        freqs: Vec<f64>,
        /// Use the prior for the source term instead of conditioning on nearby events.
        #[arg(long)]
        no_condition_event: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map a coefficient's conditioned mean and sd over a lattice.
    Map {
        #[arg(long)]
        model: PathBuf,
        /// dc1e, dc1a or c_ca.
        #[arg(long)]
        term: String,
        #[arg(long)]
        freq: f64,
        /// lon_min,lat_min,lon_max,lat_max
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bbox: Vec<f64>,
        #[arg(long, default_value_t = 5.0)]
        res_km: f64,
        /// `.csv` writes a table; anything else writes GeoJSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit inter-frequency correlation models to a bundle's phase-two terms.
    Correlate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "dc1e,dc1a,dc1b,c_ca")]
        terms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw correlated cross-frequency samples of a non-ergodic term.
    SampleSpectra {
        #[arg(long)]
        model: PathBuf,
        /// dc1e, dc1a, dc1b or c_ca.
        #[arg(long)]
        term: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Use the published reference coefficients instead of the bundle's fit.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Earthquake-grouped k-fold cross-validation at one frequency.
    Crossval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        freq: Option<f64>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Pin hyperparameters to this bundle's smoothed values instead of fitting phase one first.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        no_condition_event: bool,
        /// `.csv` writes per-fold rows; anything else writes the JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic flatfile, c7 table and ground truth.
    Synth {
        /// Synthetic spec JSON; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}
