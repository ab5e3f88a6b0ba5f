//! `bregmanot` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bregmanot", version, about = "Entropic optimal transport solvers built on KL projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every solver.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Entropic regularization strength.
    #[arg(long, default_value_t = 1e-2)]
    pub gamma: f64,
    /// Stopping tolerance on residuals and iterate change.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Run the projections on logarithms (for small gamma).
    #[arg(long)]
    pub log_domain: bool,
    /// Directory receiving the output files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; `BREGMANOT_THREADS` overrides this flag.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Strategy {
    Recompute,
    Cached,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Mode {
    Auto,
    Bregman,
    Dykstra,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-marginal entropic transport.
    Sinkhorn {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fixed-support barycenter of histograms (CSV vectors) or images (PGM).
    Barycenter {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Cost matrix for CSV inputs; PGM inputs use the squared distance on the unit square.
        #[arg(long)]
        cost: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-marginal coupling of histograms on a shared 1-D grid with the barycentric cost.
    Multimarginal {
        #[arg(long, value_delimiter = ',', required = true)]
        marginals: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Generalized incompressible flow on [0, 1].
    EulerFlow {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// identity, fold, shift or invert.
        #[arg(long, default_value = "invert")]
        map: String,
        #[arg(long, value_enum, default_value_t = Strategy::Recompute)]
        strategy: Strategy,
        #[command(flatten)]
        common: Common,
    },
    /// Transport of a prescribed fraction of mass.
    Partial {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        /// Mass to transport; defaults to 0.7 times the smaller total mass.
        #[arg(long)]
        mass: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Transport with an entry-wise upper bound on the plan.
    Capacity {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        /// Scalar bound applied to every entry.
        #[arg(long, conflicts_with = "theta_file")]
        theta: Option<f64>,
        /// Matrix of bounds.
        #[arg(long)]
        theta_file: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Partial transport between several histograms on a shared 1-D grid.
    PartialMm {
        #[arg(long, value_delimiter = ',', required = true)]
        marginals: Vec<PathBuf>,
        #[arg(long)]
        mass: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Martingale transport, either from files or the lognormal test case.
    Martingale {
        #[arg(long)]
        lognormal: bool,
        #[arg(long, default_value_t = 0.04)]
        sigma0sq: f64,
        #[arg(long, default_value_t = 0.32)]
        sigma1sq: f64,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, required_unless_present = "lognormal")]
        x: Option<PathBuf>,
        #[arg(long, required_unless_present = "lognormal")]
        y: Option<PathBuf>,
        #[arg(long, required_unless_present = "lognormal")]
        p: Option<PathBuf>,
        #[arg(long, required_unless_present = "lognormal")]
        q: Option<PathBuf>,
        #[arg(long, required_unless_present = "lognormal")]
        cost: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction from partial Radon measurements.
    Radon {
        /// Sinogram CSV, one row per angle.
        #[arg(long, required_unless_present = "image")]
        sinogram: Option<PathBuf>,
        /// Image whose sinogram is simulated.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        angles: usize,
        /// Template image; without it only the least-squares inverse is computed.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        lambda1: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Product-space solve over marginal, bound and mass constraints.
    Lifted {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        /// Adds a total-mass constraint and turns the marginals into upper bounds.
        #[arg(long)]
        mass: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Auto)]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(report) => {
            println!("{}", report.json);
            if report.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(bregmanot::Error::MaxIterExceeded { iterations, residual }) => {
            eprintln!("error: no convergence after {iterations} iterations (residual {residual:.3e})");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
