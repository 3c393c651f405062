//! Trajectory rewards for the selection agent: format compliance, tool
//! success rate, answer accuracy, and a metric-based reward that scores the
//! agent's model combination on the whole training set through a seeded,
//! gamma-augmented selection mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SelectionMask};
use crate::error::{Error, Result};
use crate::fusion::{act_fuse_dataset, DEFAULT_SIGMA_EPSILON};
use crate::metrics::{build_nonmated_trials, evaluate_report};
use crate::selector::CombinationCandidate;

/// Whether trajectories must carry explicit reasoning per turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMode {
    /// Reason before act: every turn needs a think block.
    Cot,
    /// Direct answer: no think requirement.
    Da,
}

/// What a single turn did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnAction {
    ToolCall,
    Answer,
    Malformed,
}

/// One turn of an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub has_think: bool,
    pub action: TurnAction,
}

/// One tool invocation: consulting a model by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub model_name: String,
    pub succeeded: bool,
}

/// Structured record of one simulated agent episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryTranscript {
    pub mode: TrajectoryMode,
    pub turns: Vec<Turn>,
    pub tool_calls: Vec<ToolCall>,
    pub final_answer: Option<String>,
}

impl TrajectoryTranscript {
    /// Check the structural invariants: turn budget and no repeated model
    /// among successful calls.
    pub fn validate(&self, turn_limit: usize) -> Result<()> {
        if self.turns.len() > turn_limit {
            return Err(Error::Contract(format!(
                "{} turns exceed the limit of {turn_limit}",
                self.turns.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for call in self.tool_calls.iter().filter(|c| c.succeeded) {
            if !seen.insert(call.model_name.as_str()) {
                return Err(Error::Contract(format!(
                    "model {:?} consulted more than once",
                    call.model_name
                )));
            }
        }
        Ok(())
    }
}

/// Weights, augmentation parameters, and evaluation targets for the reward
/// stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Probability that a query row keeps the agent's exact combination.
    pub gamma: f64,
    /// Entry probability for resampled rows.
    pub bernoulli_p: f64,
    pub w_format: f64,
    pub w_tool: f64,
    pub w_acc: f64,
    pub w_metric: f64,
    /// Top-k for the metric reward's fusion.
    pub k: usize,
    pub far_target: f64,
    pub fpir_target: f64,
    pub trial_fraction: f64,
    pub n_trials: usize,
    pub trial_base_seed: u64,
    /// Seed for the mask augmentation draw.
    pub mask_seed: u64,
    pub sigma_epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 0.8,
            bernoulli_p: 0.5,
            w_format: 1.0,
            w_tool: 1.0,
            w_acc: 1.0,
            w_metric: 1.0,
            k: 10,
            far_target: 0.01,
            fpir_target: 0.01,
            trial_fraction: 0.2,
            n_trials: 10,
            trial_base_seed: 0,
            mask_seed: 0,
            sigma_epsilon: DEFAULT_SIGMA_EPSILON,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("reward.gamma must be in [0,1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return Err(Error::Config(format!(
                "reward.bernoulli_p must be in [0,1], got {}",
                self.bernoulli_p
            )));
        }
        for (name, v) in [
            ("w_format", self.w_format),
            ("w_tool", self.w_tool),
            ("w_acc", self.w_acc),
            ("w_metric", self.w_metric),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("reward.{name} must be a nonnegative real, got {v}")));
            }
        }
        for (name, v) in [("far_target", self.far_target), ("fpir_target", self.fpir_target)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("reward.{name} must be in (0,1], got {v}")));
            }
        }
        if !(self.trial_fraction > 0.0 && self.trial_fraction < 1.0) {
            return Err(Error::Config(format!(
                "reward.trial_fraction must be in (0,1), got {}",
                self.trial_fraction
            )));
        }
        if self.n_trials == 0 {
            return Err(Error::Config("reward.n_trials must be at least 1".into()));
        }
        if !(self.sigma_epsilon > 0.0 && self.sigma_epsilon.is_finite()) {
            return Err(Error::Config("reward.sigma_epsilon must be a positive real".into()));
        }
        Ok(())
    }
}

/// Per-turn format compliance, averaged over turns.
///
/// In CoT mode a turn scores 1 iff it has a think block and exactly one
/// well-formed action; DA mode drops the think requirement. An empty
/// transcript scores 0.
pub fn format_reward(t: &TrajectoryTranscript) -> f64 {
    if t.turns.is_empty() {
        return 0.0;
    }
    let score: f64 = t
        .turns
        .iter()
        .map(|turn| {
            let action_ok = matches!(turn.action, TurnAction::ToolCall | TurnAction::Answer);
            let ok = match t.mode {
                TrajectoryMode::Cot => turn.has_think && action_ok,
                TrajectoryMode::Da => action_ok,
            };
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    score / t.turns.len() as f64
}

/// Fraction of tool calls that succeeded; 0 when no call was made.
pub fn tool_success_reward(t: &TrajectoryTranscript) -> f64 {
    if t.tool_calls.is_empty() {
        return 0.0;
    }
    let ok = t.tool_calls.iter().filter(|c| c.succeeded).count();
    ok as f64 / t.tool_calls.len() as f64
}

/// 1 iff the answer matches the true subject id exactly; missing answers
/// score 0.
pub fn accuracy_reward(answer: Option<&str>, truth: &str) -> f64 {
    match answer {
        Some(a) if a == truth => 1.0,
        _ => 0.0,
    }
}

/// Expand one (subset, anchor) combination into a per-query mask.
///
/// Each row keeps the combination with probability `gamma`; otherwise every
/// entry is an independent Bernoulli(p) draw. The anchor column is forced
/// true in every row, so no row is empty. Bit-reproducible for a fixed seed.
pub fn augment_selection_mask(
    m_oi: &CombinationCandidate,
    n_queries: usize,
    n_models: usize,
    gamma: f64,
    p: f64,
    seed: u64,
) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0,1], got {gamma}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("bernoulli p must be in [0,1], got {p}")));
    }
    let mut template = vec![false; n_models];
    for &m in m_oi.subset() {
        if m >= n_models {
            return Err(Error::Contract(format!(
                "combination references model {m}, dataset has {n_models}"
            )));
        }
        template[m] = true;
    }
    let anchor = m_oi.anchor();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Vec::with_capacity(n_queries * n_models);
    for _ in 0..n_queries {
        if rng.random::<f64>() < gamma {
            mask.extend_from_slice(&template);
        } else {
            let start = mask.len();
            for _ in 0..n_models {
                mask.push(rng.random::<f64>() < p);
            }
            mask[start + anchor] = true;
        }
    }
    SelectionMask::new(n_queries, n_models, mask, vec![anchor; n_queries])
}

/// Overall score (rank1 + mAP + TAR - mean FNIR) of ACT fusion under the
/// given mask; fractions throughout, so the value lies in [-1, 3].
pub fn metric_based_reward(d: &Dataset, mask: &SelectionMask, cfg: &RewardConfig) -> Result<f64> {
    cfg.validate()?;
    let fused = act_fuse_dataset(d, mask, cfg.k, cfg.sigma_epsilon)?;
    let trials = build_nonmated_trials(
        &d.query_labels,
        &d.gallery_labels,
        cfg.trial_fraction,
        cfg.n_trials,
        cfg.trial_base_seed,
    )?;
    let report = evaluate_report(
        &fused,
        &d.query_labels,
        &d.gallery_labels,
        cfg.far_target,
        cfg.fpir_target,
        &trials,
    )?;
    Ok(report.overall)
}

/// Weighted sum of the four rewards for one trajectory.
///
/// The metric reward scores the combination formed by the trajectory's
/// successful tool calls (first call is the anchor), expanded with
/// [`augment_selection_mask`] under `cfg.mask_seed`. A trajectory with no
/// successful call contributes 0 metric reward: it consulted nothing, so
/// there is no combination to score.
pub fn total_reward(
    t: &TrajectoryTranscript,
    answer_truth: &str,
    d: &Dataset,
    cfg: &RewardConfig,
) -> Result<f64> {
    cfg.validate()?;
    let r_format = format_reward(t);
    let r_tool = tool_success_reward(t);
    let r_acc = accuracy_reward(t.final_answer.as_deref(), answer_truth);

    let mut subset = Vec::new();
    for call in t.tool_calls.iter().filter(|c| c.succeeded) {
        let m = d.model_index(&call.model_name).ok_or_else(|| {
            Error::Contract(format!("trajectory consulted unknown model {:?}", call.model_name))
        })?;
        if !subset.contains(&m) {
            subset.push(m);
        }
    }
    let r_metric = if subset.is_empty() {
        0.0
    } else {
        let anchor = subset[0];
        let candidate = CombinationCandidate::new(subset, anchor)?;
        let mask = augment_selection_mask(
            &candidate,
            d.n_queries(),
            d.n_models(),
            cfg.gamma,
            cfg.bernoulli_p,
            cfg.mask_seed,
        )?;
        metric_based_reward(d, &mask, cfg)?
    };

    Ok(cfg.w_format * r_format + cfg.w_tool * r_tool + cfg.w_acc * r_acc + cfg.w_metric * r_metric)
}
