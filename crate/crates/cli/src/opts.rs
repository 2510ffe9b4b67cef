use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tastecf",
    version,
    about = "Taste-group collaborative filtering for implicit feedback"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Split an interaction file into train/validation/test by timestamp
    Split(SplitArgs),
    /// Learn a taste hierarchy from training interactions
    Train(TrainArgs),
    /// List a model level's groups, optionally with their top items
    Inspect(InspectArgs),
    /// Write top-N recommendations for users
    Recommend(RecommendArgs),
    /// Evaluate ranking quality on a held-out test file
    Evaluate(EvaluateArgs),
    /// Generate synthetic interactions with planted tastes
    Synth(SynthArgs),
}

/// Interaction files are delimiter-separated text (comma or tab,
/// auto-detected from the header); these flags pick the columns by name.
#[derive(Args, Clone)]
pub struct ColumnArgs {
    /// Header name of the user column
    #[arg(long, default_value = "user")]
    pub user_col: String,
    /// Header name of the item column
    #[arg(long, default_value = "item")]
    pub item_col: String,
    /// Header name of the timestamp column (integer seconds)
    #[arg(long, default_value = "timestamp")]
    pub time_col: String,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Interaction file to split
    #[arg(long)]
    pub input: PathBuf,
    /// Output prefix; writes <prefix>.train, <prefix>.valid, <prefix>.test
    #[arg(long)]
    pub output: PathBuf,
    /// Train,validation,test fractions (must sum to 1)
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub ratios: String,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training interaction file
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the model file
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the learning report (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Close islands at this many variables
    #[arg(long, default_value_t = 8)]
    pub max_island_size: usize,
    /// EM iteration cap per fit
    #[arg(long, default_value_t = 100)]
    pub em_iters: usize,
    /// Relative log-likelihood improvement below which EM stops
    #[arg(long, default_value_t = 1e-4)]
    pub em_tol: f64,
    /// Random restarts per island fit
    #[arg(long, default_value_t = 3)]
    pub em_restarts: usize,
    /// Stop stacking once a level has at most this many latents
    #[arg(long, default_value_t = 1)]
    pub min_top_vars: usize,
    /// Seed for all randomness
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Model file to inspect
    #[arg(long)]
    pub model: PathBuf,
    /// Hierarchy level whose groups to list
    #[arg(long)]
    pub level: u32,
    /// Training interactions; adds per-group item preferences when given
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Items to list per group
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    /// Output path (stdout when omitted)
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args)]
pub struct RecommendArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Training interaction file (evidence and history)
    #[arg(long)]
    pub train: PathBuf,
    /// Hierarchy level whose groups to use
    #[arg(long)]
    pub level: u32,
    /// Recommendations per user
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    /// History window in seconds, or "none" for the full history
    #[arg(long, default_value = "none")]
    pub window: String,
    /// Comma-separated user keys (all training users when omitted);
    /// unknown keys get cold-start recommendations from prior memberships
    #[arg(long)]
    pub users: Option<String>,
    /// Where to write the recommendations
    #[arg(long)]
    pub output: PathBuf,
    /// Also write per-user membership vectors here
    #[arg(long)]
    pub memberships_out: Option<PathBuf>,
    /// Also write the group preference matrix here
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
    /// Worker threads for scoring
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Training interaction file
    #[arg(long)]
    pub train: PathBuf,
    /// Test interaction file
    #[arg(long)]
    pub test: PathBuf,
    /// Hierarchy level whose groups to use
    #[arg(long)]
    pub level: u32,
    /// Comma-separated NDCG cutoffs
    #[arg(long, default_value = "5,10,20")]
    pub cutoffs: String,
    /// Extra recommenders to evaluate (popularity, user-knn); repeatable
    #[arg(long = "baseline", value_name = "BASELINE")]
    pub baselines: Vec<String>,
    /// Neighbor count for the user-knn baseline
    #[arg(long, default_value_t = 20)]
    pub knn_k: usize,
    /// History window in seconds, or "none" for the full history
    #[arg(long, default_value = "none")]
    pub window: String,
    /// Output path (stdout when omitted)
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Worker threads for scoring
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    #[arg(long, default_value_t = 80)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub tastes: usize,
    #[arg(long, default_value_t = 10)]
    pub items_per_taste: usize,
    /// Probability a user holds each taste
    #[arg(long, default_value_t = 0.3)]
    pub taste_prob: f64,
    /// Consumption probability for items of a held taste
    #[arg(long, default_value_t = 0.8)]
    pub consume_prob_in: f64,
    /// Consumption probability for all other items
    #[arg(long, default_value_t = 0.02)]
    pub consume_prob_out: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Where to write the interaction file
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the ground-truth file
    #[arg(long)]
    pub truth: PathBuf,
}
