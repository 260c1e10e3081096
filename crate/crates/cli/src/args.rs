//! Command-line surface.

use std::path::PathBuf;

use bivlgm::prompts::{AdjectiveGroup, LesionClass};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "bivlgm",
    version,
    about = "Bi-level vision-language graph matching on synthetic lesion data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Convergence statistics of Sinkhorn normalization on random matrices.
    SinkhornBench(BenchArgs),
    /// Permutation recovery of the matching module on noisy copies.
    MatchDemo(MatchArgs),
    /// Renders the severity prompt for a lesion spec or a stored sample.
    Prompt(PromptArgs),
    /// Trains on a synthetic dataset and writes the run manifest and tables.
    TrainSynthetic(TrainArgs),
    /// Paired Dice-only, graph-matching and contrastive runs per seed.
    CompareContrastive(CompareArgs),
    /// Metrics for stored samples that carry predictions.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per component.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Directory for `gradcheck.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Directory for `sinkhorn.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Nodes per graph.
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    /// Feature width.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Half-width of the uniform perturbation added to the copy.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Directory for `match.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Lesion levels such as `EX:high,HE:mid`.
    #[arg(long, conflicts_with = "sample", required_unless_present = "sample")]
    pub spec: Option<String>,
    /// Stored sample whose ground-truth mask defines the levels.
    #[arg(long)]
    pub sample: Option<PathBuf>,
    /// Template 1-5; drawn from the seed when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub template: Option<u8>,
    /// Adjective group for one class, e.g. `EX=severity`; repeatable.
    #[arg(long = "group", value_parser = parse_group)]
    pub groups: Vec<(LesionClass, AdjectiveGroup)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub t1: Option<f64>,
    #[arg(long)]
    pub t2: Option<f64>,
}

/// Training options shared by `train-synthetic` and `compare-contrastive`.
/// Flags override the JSON config, which overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of alternating rounds.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub t1: Option<f64>,
    #[arg(long)]
    pub t2: Option<f64>,
    /// Weight of the word-level term in the encoder objective.
    #[arg(long)]
    pub lambda_a: Option<f64>,
    /// Weight of the sentence-level term in the encoder objective.
    #[arg(long)]
    pub lambda_b: Option<f64>,
    /// Weight of the Dice term in the segmenter objective.
    #[arg(long)]
    pub lambda_c: Option<f64>,
    /// Weight of the word-level term in the segmenter objective.
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Weight of the sentence-level term in the segmenter objective.
    #[arg(long)]
    pub lambda_e: Option<f64>,
    /// Severity template 1-5.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub template: Option<u8>,
    /// Adjective group for one class, e.g. `EX=severity`; repeatable.
    #[arg(long = "group", value_parser = parse_group)]
    pub groups: Vec<(LesionClass, AdjectiveGroup)>,
    /// Identity sentence-level ground truth even for equal profiles.
    #[arg(long, value_name = "BOOL")]
    pub strict_diagonal: Option<bool>,
    /// Loss family: dice, full or contrastive.
    #[arg(long)]
    pub losses: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "bivlgm-out")]
    pub out: PathBuf,
    /// Also write held-out samples with predicted masks.
    #[arg(long)]
    pub save_predictions: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of consecutive seeds starting at the configured seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Output directory.
    #[arg(long, default_value = "bivlgm-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sample files, or directories scanned for `*.bvlg`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory for `eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_group(s: &str) -> Result<(LesionClass, AdjectiveGroup), String> {
    let (cls, group) = s
        .split_once('=')
        .ok_or_else(|| format!("expected CLASS=GROUP, got {s:?}"))?;
    Ok((
        cls.trim().parse().map_err(|e| format!("{e}"))?,
        group.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn group_flag_parses() {
        assert_eq!(
            parse_group("EX=severity").unwrap(),
            (LesionClass::HardExudates, AdjectiveGroup::Severity)
        );
        assert!(parse_group("EX").is_err());
        assert!(parse_group("XX=amount").is_err());
    }
}
