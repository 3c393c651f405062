use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scorefuse::experiment::{
    apply_overrides, render_report_csv, run_experiment, Command as RunCommand, DatasetSource,
    EvalTargets, ExperimentConfig, Overrides,
};
use scorefuse::fusion::FusionConfig;
use scorefuse::policy::GrpoConfig;
use scorefuse::reward::{RewardConfig, TrajectoryMode};
use scorefuse::synth::{FeatureSpec, ModelSpec, SynthConfig};

#[derive(Parser)]
#[command(name = "scorefuse", version, about = "Score-level fusion experiments: fuse, evaluate, sweep, search, train")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (JSON); without it a built-in synthetic scene is used
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// One seed for synthesis, trials, and reward draws
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports and artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Top-k for anchored fusion (also applied to the reward's fusion)
    #[arg(long, global = true)]
    k: Option<usize>,

    /// False accept rate target, a fraction in (0,1]
    #[arg(long, global = true)]
    far: Option<f64>,

    /// False positive identification rate target, a fraction in (0,1]
    #[arg(long, global = true)]
    fpir: Option<f64>,

    /// Number of gallery-removal trials for the open-set protocol
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Fraction of gallery subjects removed per trial
    #[arg(long = "trial-fraction", global = true)]
    trial_fraction: Option<f64>,

    /// Trajectory format: cot (reason then act) or da (direct answer)
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TrajectoryMode>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Synthesize a dataset and write its manifest and score files
    Generate,
    /// Fuse the configured model subset and report retrieval metrics
    Eval,
    /// One report row per fusion method
    CompareFusion,
    /// Overall-vs-k curve for anchored top-k fusion
    SweepTopk,
    /// Exhaustive subset-and-anchor search over all models
    GridSearch,
    /// Per-query best-candidate selection upper bound
    Oracle,
    /// Train the selection policy, then report untrained vs trained metrics
    TrainPolicy,
    /// Evaluate a saved policy document
    EvalPolicy,
}

impl Cmd {
    fn run_command(self) -> RunCommand {
        match self {
            Cmd::Generate => RunCommand::Generate,
            Cmd::Eval => RunCommand::Eval,
            Cmd::CompareFusion => RunCommand::CompareFusion,
            Cmd::SweepTopk => RunCommand::SweepTopk,
            Cmd::GridSearch => RunCommand::GridSearch,
            Cmd::Oracle => RunCommand::Oracle,
            Cmd::TrainPolicy => RunCommand::TrainPolicy,
            Cmd::EvalPolicy => RunCommand::EvalPolicy,
        }
    }
}

fn parse_mode(s: &str) -> Result<TrajectoryMode, String> {
    match s {
        "cot" => Ok(TrajectoryMode::Cot),
        "da" => Ok(TrajectoryMode::Da),
        other => Err(format!("unknown mode {other:?}, expected cot or da")),
    }
}

/// Demo scene used when no config is supplied: a sharp model that only works
/// when its gating attribute is active, a steady mid-grade model, and noise.
fn builtin_config() -> ExperimentConfig {
    let model = |name: &str, mm: f64, ms: f64, nm: f64, ns: f64| ModelSpec {
        name: name.into(),
        match_mean: mm,
        match_spread: ms,
        nonmatch_mean: nm,
        nonmatch_spread: ns,
        gate_feature: None,
        gated_match_mean: None,
    };
    ExperimentConfig {
        dataset: DatasetSource::Synth(SynthConfig {
            n_subjects: 20,
            queries_per_subject: 2,
            gallery_per_subject: 2,
            models: vec![
                ModelSpec {
                    gate_feature: Some(0),
                    gated_match_mean: Some(0.1),
                    ..model("face", 0.9, 0.04, 0.1, 0.04)
                },
                model("gait", 0.65, 0.1, 0.35, 0.1),
                model("texture", 0.55, 0.14, 0.45, 0.14),
            ],
            features: vec![FeatureSpec { name: "face_visible".into(), active_probability: 0.5 }],
            seed: 0,
            ..SynthConfig::default()
        }),
        fusion: FusionConfig::default(),
        reward: RewardConfig::default(),
        grpo: GrpoConfig::default(),
        eval: EvalTargets { far: 0.05, fpir: 0.05, n_trials: 5, ..EvalTargets::default() },
        sweep_ks: vec![1, 5, 10, 20, 40],
        policy_path: None,
        out_dir: PathBuf::from("out"),
    }
}

fn run(cli: &Cli) -> scorefuse::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => builtin_config(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        k: cli.k,
        far: cli.far,
        fpir: cli.fpir,
        trials: cli.trials,
        trial_fraction: cli.trial_fraction,
        mode: cli.mode,
    };
    apply_overrides(&mut cfg, &overrides);

    let report = run_experiment(&cfg, cli.command.run_command())?;
    let mut text = String::new();
    if let Some(w) = &report.winner {
        text.push_str(&format!(
            "winner: {} (subset [{}], anchor {})\n",
            w.label,
            w.subset.join(", "),
            w.anchor
        ));
    }
    if !report.rows.is_empty() {
        text.push_str(&render_report_csv(&report));
    }
    text.push_str(&format!("outputs in {}\n", cfg.out_dir.display()));
    // tolerate a closed pipe (e.g. piping into `head`)
    let _ = io::Write::write_all(&mut io::stdout(), text.as_bytes());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
