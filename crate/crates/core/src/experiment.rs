//! Experiment runner behind the CLI: resolves a config document, dispatches
//! one of the eight commands, and writes self-describing report files whose
//! bytes are identical across reruns of the same config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset, Dataset, SelectionMask};
use crate::error::{Error, Result};
use crate::fusion::{act_fuse_dataset, fuse_dataset, FusionConfig, FusionMethod};
use crate::metrics::{build_nonmated_trials, evaluate_report, MetricReport, NonMatedTrial};
use crate::policy::{greedy_selection_mask, load_policy, save_policy, train_policy, GrpoConfig, Policy};
use crate::reward::{RewardConfig, TrajectoryMode};
use crate::selector::{grid_search_all, per_sample_oracle, pick_winner, CombinationCandidate};
use crate::synth::{generate, SynthConfig};

/// Where the scores come from: an on-disk manifest or a seeded generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synth(SynthConfig),
}

/// Evaluation targets shared by every metric-producing command.
///
/// `subset`/`anchor` name the models fused by `eval` and `compare-fusion`;
/// absent, every model participates and the first one anchors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTargets {
    pub far: f64,
    pub fpir: f64,
    pub trial_fraction: f64,
    pub n_trials: usize,
    pub base_seed: u64,
    pub subset: Option<Vec<String>>,
    pub anchor: Option<String>,
}

impl Default for EvalTargets {
    fn default() -> Self {
        EvalTargets {
            far: 0.01,
            fpir: 0.01,
            trial_fraction: 0.2,
            n_trials: 10,
            base_seed: 0,
            subset: None,
            anchor: None,
        }
    }
}

impl EvalTargets {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("eval.far", self.far), ("eval.fpir", self.fpir)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1], got {v}")));
            }
        }
        if !(self.trial_fraction > 0.0 && self.trial_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval.trial_fraction must be in (0,1), got {}",
                self.trial_fraction
            )));
        }
        if self.n_trials == 0 {
            return Err(Error::Config("eval.n_trials must be at least 1".into()));
        }
        Ok(())
    }
}

fn default_sweep_ks() -> Vec<usize> {
    vec![1, 5, 10, 20, 40]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Full description of one run; the report embeds a copy, so every output
/// names its own seeds and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub eval: EvalTargets,
    #[serde(default = "default_sweep_ks")]
    pub sweep_ks: Vec<usize>,
    /// Trained policy document consumed by `eval-policy`.
    #[serde(default)]
    pub policy_path: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, e.line(), format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synth(sc) = &self.dataset {
            sc.validate()?;
        }
        self.eval.validate()?;
        self.reward.validate()?;
        self.grpo.validate()?;
        if self.sweep_ks.is_empty() {
            return Err(Error::Config("sweep_ks must list at least one k".into()));
        }
        Ok(())
    }
}

/// The eight runnable commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Generate,
    Eval,
    CompareFusion,
    SweepTopk,
    GridSearch,
    Oracle,
    TrainPolicy,
    EvalPolicy,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Generate,
        Command::Eval,
        Command::CompareFusion,
        Command::SweepTopk,
        Command::GridSearch,
        Command::Oracle,
        Command::TrainPolicy,
        Command::EvalPolicy,
    ];
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Command::Generate => "generate",
            Command::Eval => "eval",
            Command::CompareFusion => "compare-fusion",
            Command::SweepTopk => "sweep-topk",
            Command::GridSearch => "grid-search",
            Command::Oracle => "oracle",
            Command::TrainPolicy => "train-policy",
            Command::EvalPolicy => "eval-policy",
        };
        f.write_str(name)
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

/// Command-line flag values layered over a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub far: Option<f64>,
    pub fpir: Option<f64>,
    pub trials: Option<usize>,
    pub trial_fraction: Option<f64>,
    pub mode: Option<TrajectoryMode>,
}

/// Apply flag overrides. `--seed` is one knob for every stream: synthesis,
/// non-mated trials, and the reward's trial and mask draws; `--k`, `--far`,
/// `--fpir`, `--trials`, and `--trial-fraction` keep the fusion/eval configs
/// and the reward config in agreement.
pub fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) {
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    if let Some(k) = ov.k {
        cfg.fusion.k = k;
        cfg.reward.k = k;
    }
    if let Some(far) = ov.far {
        cfg.eval.far = far;
        cfg.reward.far_target = far;
    }
    if let Some(fpir) = ov.fpir {
        cfg.eval.fpir = fpir;
        cfg.reward.fpir_target = fpir;
    }
    if let Some(n) = ov.trials {
        cfg.eval.n_trials = n;
        cfg.reward.n_trials = n;
    }
    if let Some(f) = ov.trial_fraction {
        cfg.eval.trial_fraction = f;
        cfg.reward.trial_fraction = f;
    }
    if let Some(mode) = ov.mode {
        cfg.grpo.mode = mode;
    }
    if let Some(seed) = ov.seed {
        if let DatasetSource::Synth(sc) = &mut cfg.dataset {
            sc.seed = seed;
        }
        cfg.eval.base_seed = seed;
        cfg.reward.trial_base_seed = seed;
        cfg.reward.mask_seed = seed;
    }
}

/// One labeled metric row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub metrics: MetricReport,
}

/// Grid-search outcome, in copy-paste form for a follow-up `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerInfo {
    pub label: String,
    pub subset: Vec<String>,
    pub anchor: String,
}

/// Everything a run produced, embedded config included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub winner: Option<WinnerInfo>,
    pub rows: Vec<ReportRow>,
    pub config: ExperimentConfig,
}

// Paths created by the current run, unwound on failure so a failed run
// leaves no partial outputs behind.
enum Created {
    File(PathBuf),
    Dir(PathBuf),
}

fn ensure_dir(path: &Path, created: &mut Vec<Created>) -> Result<()> {
    if !path.exists() {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        created.push(Created::Dir(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str, created: &mut Vec<Created>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    created.push(Created::File(path.to_path_buf()));
    Ok(())
}

fn unwind(created: &[Created]) {
    for item in created.iter().rev() {
        let _ = match item {
            Created::File(p) => std::fs::remove_file(p),
            Created::Dir(p) => std::fs::remove_dir_all(p),
        };
    }
}

fn load_source(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Manifest(path) => load_dataset(path),
        DatasetSource::Synth(sc) => generate(sc),
    }
}

fn model_index(d: &Dataset, name: &str) -> Result<usize> {
    d.model_index(name)
        .ok_or_else(|| Error::Config(format!("eval names unknown model {name:?}")))
}

// Uniform mask from the eval targets: named subset and anchor, or every
// model anchored at the subset's first entry.
fn eval_mask(cfg: &ExperimentConfig, d: &Dataset) -> Result<SelectionMask> {
    let subset: Vec<usize> = match &cfg.eval.subset {
        Some(names) => names.iter().map(|n| model_index(d, n)).collect::<Result<_>>()?,
        None => (0..d.n_models()).collect(),
    };
    if subset.is_empty() {
        return Err(Error::Config("eval.subset must name at least one model".into()));
    }
    let anchor = match &cfg.eval.anchor {
        Some(name) => model_index(d, name)?,
        None => subset[0],
    };
    if !subset.contains(&anchor) {
        return Err(Error::Config("eval.anchor must be part of the fused subset".into()));
    }
    SelectionMask::uniform(d.n_queries(), d.n_models(), &subset, anchor)
}

fn trials_for(cfg: &ExperimentConfig, d: &Dataset) -> Result<Vec<NonMatedTrial>> {
    build_nonmated_trials(
        &d.query_labels,
        &d.gallery_labels,
        cfg.eval.trial_fraction,
        cfg.eval.n_trials,
        cfg.eval.base_seed,
    )
}

fn report_for_mask(
    cfg: &ExperimentConfig,
    d: &Dataset,
    mask: &SelectionMask,
    fusion: &FusionConfig,
    trials: &[NonMatedTrial],
) -> Result<MetricReport> {
    let fused = fuse_dataset(d, mask, fusion)?;
    evaluate_report(
        &fused,
        &d.query_labels,
        &d.gallery_labels,
        cfg.eval.far,
        cfg.eval.fpir,
        trials,
    )
}

fn candidate_label(cand: &CombinationCandidate, names: &[String]) -> String {
    let subset: Vec<&str> = cand.subset().iter().map(|&m| names[m].as_str()).collect();
    format!("{}@{}", subset.join("+"), names[cand.anchor()])
}

// Policy evaluation shared by train-policy and eval-policy: fuse the greedy
// per-query selections with the configured depth, judge with eval targets.
fn policy_report(
    cfg: &ExperimentConfig,
    d: &Dataset,
    policy: &Policy,
    trials: &[NonMatedTrial],
) -> Result<MetricReport> {
    let mask = greedy_selection_mask(policy, d, &cfg.grpo)?;
    let fused = act_fuse_dataset(d, &mask, cfg.fusion.k, cfg.fusion.sigma_epsilon)?;
    evaluate_report(
        &fused,
        &d.query_labels,
        &d.gallery_labels,
        cfg.eval.far,
        cfg.eval.fpir,
        trials,
    )
}

fn csv_field(label: &str) -> String {
    if label.contains(',') || label.contains('"') || label.contains('\n') {
        format!("\"{}\"", label.replace('"', "\"\""))
    } else {
        label.to_string()
    }
}

/// Flat table form of a report: one row per labeled result, 6 decimals.
pub fn render_report_csv(report: &RunReport) -> String {
    let mut out = String::from("label,rank1,map,tar,fnir_mean,fnir_std,overall\n");
    for row in &report.rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            csv_field(&row.label),
            m.rank1,
            m.map,
            m.tar,
            m.fnir_mean,
            m.fnir_std,
            m.overall
        ));
    }
    out
}

/// Structured form of a report.
pub fn render_report_json(report: &RunReport) -> Result<String> {
    let mut body = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    body.push('\n');
    Ok(body)
}

/// Write `report.json` and, when there are metric rows, `report.csv`.
/// Re-emitting identical results produces byte-identical files.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut created = Vec::new();
    match emit_report_tracked(report, dir, &mut created) {
        Ok(paths) => Ok(paths),
        Err(e) => {
            unwind(&created);
            Err(e)
        }
    }
}

fn emit_report_tracked(report: &RunReport, dir: &Path, created: &mut Vec<Created>) -> Result<Vec<PathBuf>> {
    ensure_dir(dir, created)?;
    let mut paths = Vec::new();
    let json_path = dir.join("report.json");
    write_text(&json_path, &render_report_json(report)?, created)?;
    paths.push(json_path);
    if !report.rows.is_empty() {
        let csv_path = dir.join("report.csv");
        write_text(&csv_path, &render_report_csv(report), created)?;
        paths.push(csv_path);
    }
    Ok(paths)
}

/// Run one command against a resolved config, writing report files (and any
/// command-specific artifacts) under `cfg.out_dir`. On failure every path
/// this run created is removed.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command) -> Result<RunReport> {
    cfg.validate()?;
    let mut created = Vec::new();
    match run_inner(cfg, command, &mut created) {
        Ok(report) => Ok(report),
        Err(e) => {
            unwind(&created);
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, command: Command, created: &mut Vec<Created>) -> Result<RunReport> {
    let mut report = RunReport {
        command: command.to_string(),
        winner: None,
        rows: Vec::new(),
        config: cfg.clone(),
    };

    match command {
        Command::Generate => {
            let DatasetSource::Synth(sc) = &cfg.dataset else {
                return Err(Error::Config(
                    "generate needs a synth dataset source, not a manifest".into(),
                ));
            };
            let d = generate(sc)?;
            let dir = cfg.out_dir.join("dataset");
            ensure_dir(&cfg.out_dir, created)?;
            let fresh = !dir.exists();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            if fresh {
                created.push(Created::Dir(dir.clone()));
            }
            save_dataset(&d, &dir)?;
        }
        Command::Eval => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let mask = eval_mask(cfg, &d)?;
            let metrics = report_for_mask(cfg, &d, &mask, &cfg.fusion, &trials)?;
            report.rows.push(ReportRow { label: cfg.fusion.method.to_string(), metrics });
        }
        Command::CompareFusion => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let mask = eval_mask(cfg, &d)?;
            for method in [
                FusionMethod::Act,
                FusionMethod::Min,
                FusionMethod::Max,
                FusionMethod::Zscore,
                FusionMethod::Minmax,
                FusionMethod::WeightedSum,
            ] {
                let fusion = FusionConfig { method, ..cfg.fusion.clone() };
                let metrics = report_for_mask(cfg, &d, &mask, &fusion, &trials)?;
                report.rows.push(ReportRow { label: method.to_string(), metrics });
            }
        }
        Command::SweepTopk => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let mask = eval_mask(cfg, &d)?;
            let mut ks = cfg.sweep_ks.clone();
            ks.sort_unstable();
            ks.dedup();
            for k in ks {
                let fusion = FusionConfig { method: FusionMethod::Act, k, ..cfg.fusion.clone() };
                let metrics = report_for_mask(cfg, &d, &mask, &fusion, &trials)?;
                report.rows.push(ReportRow { label: format!("k={k}"), metrics });
            }
        }
        Command::GridSearch => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let rows = grid_search_all(
                &d,
                cfg.fusion.k,
                cfg.eval.far,
                cfg.eval.fpir,
                &trials,
                cfg.fusion.sigma_epsilon,
            )?;
            let best = pick_winner(&rows);
            let (cand, _) = &rows[best];
            report.winner = Some(WinnerInfo {
                label: candidate_label(cand, &d.model_names),
                subset: cand.subset().iter().map(|&m| d.model_names[m].clone()).collect(),
                anchor: d.model_names[cand.anchor()].clone(),
            });
            for (cand, metrics) in rows {
                report.rows.push(ReportRow {
                    label: candidate_label(&cand, &d.model_names),
                    metrics,
                });
            }
        }
        Command::Oracle => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let mask = per_sample_oracle(&d, cfg.fusion.k, cfg.fusion.sigma_epsilon)?;
            let fused = act_fuse_dataset(&d, &mask, cfg.fusion.k, cfg.fusion.sigma_epsilon)?;
            let metrics = evaluate_report(
                &fused,
                &d.query_labels,
                &d.gallery_labels,
                cfg.eval.far,
                cfg.eval.fpir,
                &trials,
            )?;
            report.rows.push(ReportRow { label: "oracle".into(), metrics });
        }
        Command::TrainPolicy => {
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            // init and train streams both hang off the base seed
            let init_seed = cfg.eval.base_seed;
            let train_seed = cfg.eval.base_seed.wrapping_add(1);
            let dim = d.query_features.as_ref().map(|f| f[0].len()).unwrap_or(0);
            let untrained = Policy::new(d.model_names.clone(), dim, init_seed)?;
            let (trained, history) = train_policy(&d, &cfg.reward, &cfg.grpo, init_seed, train_seed)?;

            let metrics = policy_report(cfg, &d, &untrained, &trials)?;
            report.rows.push(ReportRow { label: "untrained".into(), metrics });
            let metrics = policy_report(cfg, &d, &trained, &trials)?;
            report.rows.push(ReportRow { label: "trained".into(), metrics });

            ensure_dir(&cfg.out_dir, created)?;
            let policy_path = cfg.out_dir.join("policy.json");
            save_policy(&trained, &policy_path)?;
            created.push(Created::File(policy_path));
            let mut lines = String::new();
            for h in &history {
                lines.push_str(&serde_json::to_string(h).map_err(|e| {
                    Error::Contract(format!("diagnostics serialization failed: {e}"))
                })?);
                lines.push('\n');
            }
            write_text(&cfg.out_dir.join("diagnostics.ndjson"), &lines, created)?;
        }
        Command::EvalPolicy => {
            let Some(path) = &cfg.policy_path else {
                return Err(Error::Config("eval-policy needs policy_path".into()));
            };
            let d = load_source(cfg)?;
            let trials = trials_for(cfg, &d)?;
            let policy = load_policy(path)?;
            let metrics = policy_report(cfg, &d, &policy, &trials)?;
            report.rows.push(ReportRow { label: "policy".into(), metrics });
        }
    }

    emit_report_tracked(&report, &cfg.out_dir, created)?;
    Ok(report)
}
