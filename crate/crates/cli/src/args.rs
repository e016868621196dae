use std::path::PathBuf;

use cast_core::forest::Estimand;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cast", version, about = "Causal treatment-effect trajectories for censored survival data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with known effects.
    Simulate(SimulateArgs),
    /// Propensity model, trimming and per-horizon effect estimates.
    Fit(FitArgs),
    /// Fuse per-horizon estimates into quadratic and spline trajectories.
    Trajectory(TrajectoryArgs),
    /// Run refutation tests against a cohort.
    Refute(RefuteArgs),
    /// Attribute one horizon's conditional effects to covariates.
    Explain(ExplainArgs),
    /// simulate -> fit -> trajectory -> refute -> explain in one directory.
    RunAll(RunAllArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write gnuplot script stubs next to the plot data.
    #[arg(long)]
    pub gnuplot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimandArg {
    Sp,
    Rmst,
    Both,
}

impl EstimandArg {
    pub fn estimands(self) -> Vec<Estimand> {
        match self {
            EstimandArg::Sp => vec![Estimand::Sp],
            EstimandArg::Rmst => vec![Estimand::Rmst],
            EstimandArg::Both => vec![Estimand::Sp, Estimand::Rmst],
        }
    }
}

/// Pipeline settings; anything unset falls back to `--config`, then to the
/// library defaults.
#[derive(Debug, Clone, Args)]
pub struct EstimationArgs {
    /// TOML file with pipeline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `start:stop:step` or a comma-separated list, in months.
    #[arg(long)]
    pub horizons: Option<String>,
    #[arg(long, value_enum)]
    pub estimand: Option<EstimandArg>,
    /// Trees in each effect forest.
    #[arg(long)]
    pub trees: Option<usize>,
    /// Trees in each outcome-regression forest.
    #[arg(long)]
    pub nuisance_trees: Option<usize>,
    #[arg(long)]
    pub trim_low: Option<f64>,
    #[arg(long)]
    pub trim_high: Option<f64>,
    /// Skip out-of-bag tuning of the effect forests.
    #[arg(long)]
    pub no_tune: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CohortArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Column schema (`name = kind` per line); defaults to `schema.cfg` beside the cohort.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario TOML; defaults to the built-in radcure-like scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Override the cohort size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Replace the effect with zero at every time.
    #[arg(long)]
    pub null: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: CohortArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// `horizon, ate, se[, estimand]` or `months, ate_sp, se_sp, ate_rmst, se_rmst`.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Estimand of a long-format file without an `estimand` column.
    #[arg(long, value_enum, default_value = "sp")]
    pub estimand: EstimandArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestArg {
    Dummy,
    Negative,
    Confounder,
    Noise,
    All,
}

#[derive(Debug, Args)]
pub struct RefuteArgs {
    #[command(flatten)]
    pub input: CohortArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub tests: Vec<TestArg>,
    /// Repetitions of the dummy-outcome test.
    #[arg(long)]
    pub reps: Option<usize>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Directory written by `cast fit`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    pub horizon: f64,
    #[arg(long, value_enum, default_value = "sp")]
    pub estimand: EstimandArg,
    /// Explain at most this many held-out subjects, evenly spaced.
    #[arg(long, default_value_t = 200)]
    pub subjects: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 50)]
    pub subjects: usize,
    #[arg(long, default_value_t = 200)]
    pub shap_iterations: usize,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    pub common: Common,
}
