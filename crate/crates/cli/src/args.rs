use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "spadapt", version, about = "Spectral adapters over the SVD of a frozen weight")]
pub struct Cli {
    /// Overrides every seed in the resolved configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`, or `<manifest dir>/replay` for replay).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Numerical tolerance; meaning depends on the subcommand.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseMethod {
    Spectral,
    Fedavg,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Subspace,
    RankRecovery,
    LossCompare,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// SVD of a matrix container into u, s, v containers.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "decomposition")]
        name: String,
    },
    /// Least-squares fine-tuning `Y ≈ X Wᵀ` with an optional adapter.
    Train {
        #[arg(long)]
        base: PathBuf,
        /// N x m inputs.
        #[arg(long)]
        inputs: PathBuf,
        /// N x n targets.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adapted weight of an adapter container.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Fuses the adapters of a plan file.
    Fuse {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum, default_value = "spectral")]
        method: FuseMethod,
        /// One m x p activation batch per entry.
        #[arg(long, value_delimiter = ',')]
        activations: Vec<PathBuf>,
        /// One m x p probe batch per entry, for the deviation report.
        #[arg(long, value_delimiter = ',')]
        probes: Vec<PathBuf>,
        #[arg(long)]
        ridge: Option<f64>,
    },
    /// Trainable parameter counts and reachable budgets.
    Budget {
        /// Kinds to list (default all).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Defaults to `n`.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_rank: usize,
        /// One OFT generator per block.
        #[arg(long)]
        oft_unshared: bool,
        #[arg(long, default_value_t = 50)]
        lidb_a: usize,
        #[arg(long, default_value_t = 100)]
        lidb_b: usize,
    },
    /// Empirical rank capacity with a minimum-rank certificate.
    Rankcap {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        rank: usize,
        /// Matrix container; a random Gaussian n x m base otherwise.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        m: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Analytic against finite-difference gradients.
    Gradcheck {
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 9)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Desk-scale experiments.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// SVD wall-clock and memory per size.
    BenchSvd {
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also time the randomized SVD at this rank.
        #[arg(long)]
        randomized_rank: Option<usize>,
    },
    /// Re-runs a manifest and compares output digests.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}
