//! `eim`: design generation, expert synthesis, reward learning, policy
//! training and rendering from one binary.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on domain errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod svg;

#[derive(Debug, Parser)]
#[command(
    name = "eim",
    version,
    about = "Expert-imitating macro placement workbench"
)]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print reports as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic netlist.
    GenDesign(GenDesignArgs),
    /// Synthesize expert layouts and the learning dataset.
    GenExpert(GenExpertArgs),
    /// Train an EIM-D or EIM-P reward model.
    TrainReward(TrainRewardArgs),
    /// Reward accuracy of a checkpoint on a dataset.
    EvalReward(EvalRewardArgs),
    /// Train a placement policy with PPO.
    TrainPolicy(TrainPolicyArgs),
    /// Evaluate a policy checkpoint, the uniform policy, or saved layouts.
    EvalPolicy(EvalPolicyArgs),
    /// Render a layout as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenDesignArgs {
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub macros: Option<usize>,
    #[arg(long)]
    pub nets: Option<usize>,
    #[arg(long)]
    pub min_size: Option<usize>,
    #[arg(long)]
    pub max_size: Option<usize>,
    #[arg(long)]
    pub min_degree: Option<usize>,
    #[arg(long)]
    pub max_degree: Option<usize>,
    #[arg(long)]
    pub terminal_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenExpertArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    /// Number of expert layouts.
    #[arg(long)]
    pub count: Option<usize>,
    /// Distractors per validation tuple.
    #[arg(long)]
    pub m: Option<usize>,
    /// Preference tuples per expert step.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Demo,
    Pref,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderArg {
    Dense,
    /// Shared convolution kernels; see `--kernel`.
    Conv,
}

#[derive(Debug, Args)]
pub struct TrainRewardArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Hidden units (dense) or filters (conv).
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    /// Odd conv kernel width; implies `--encoder conv`. Default 5.
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The dataset's own validation tuples.
    Validation,
    /// Fresh validation tuples over every layout in the dataset.
    All,
}

#[derive(Debug, Args)]
pub struct EvalRewardArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    /// Distractors per tuple for `--split all`.
    #[arg(long)]
    pub m: Option<usize>,
    /// Distractor sampling seed for `--split all`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RewardArg {
    Hpwl,
    EimD,
    EimP,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long, value_enum)]
    pub reward: RewardArg,
    /// Required for learned rewards.
    #[arg(long)]
    pub reward_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub updates: Option<usize>,
    /// Rollout episodes per update.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub minibatch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub gae_lambda: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[arg(long)]
    pub standardize: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("subject").required(true).args(["checkpoint", "layouts", "uniform"])))]
pub struct EvalPolicyArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `.layout.json` files.
    #[arg(long)]
    pub layouts: Option<PathBuf>,
    /// Evaluate the uniform-random policy.
    #[arg(long)]
    pub uniform: bool,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t as usize)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
