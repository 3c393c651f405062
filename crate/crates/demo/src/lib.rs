//! In-memory experiment entry points for the browser page. Each operation
//! takes a JSON request and returns a JSON reply; errors come back as
//! `{"error": "..."}` so the page can surface them without exceptions.
//!
//! The same functions compile natively for testing and to wasm for the page
//! (see `wasm.rs` for the exported shims).

use serde::{Deserialize, Serialize};

use scorefuse::dataset::{Dataset, FusedScores, SelectionMask};
use scorefuse::fusion::{act_fuse_dataset, baseline_fuse, FusionMethod, DEFAULT_SIGMA_EPSILON};
use scorefuse::metrics::{build_nonmated_trials, evaluate_report, MetricReport, NonMatedTrial};
use scorefuse::selector::{grid_search_all, pick_winner, CombinationCandidate};
use scorefuse::synth::{generate, SynthConfig};
use scorefuse::Result;

/// One browser request: a synthetic scene plus evaluation targets.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRequest {
    pub synth: SynthConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_rate")]
    pub far: f64,
    #[serde(default = "default_rate")]
    pub fpir: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_fraction")]
    pub trial_fraction: f64,
    #[serde(default)]
    pub trial_seed: u64,
    /// Swept k values; only the sweep operation reads this.
    #[serde(default)]
    pub ks: Vec<usize>,
}

fn default_k() -> usize {
    10
}
fn default_rate() -> f64 {
    0.05
}
fn default_trials() -> usize {
    5
}
fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Serialize)]
pub struct Row {
    pub label: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Debug, Serialize)]
pub struct Table {
    pub rows: Vec<Row>,
}

#[derive(Debug, Serialize)]
pub struct SearchReply {
    pub winner: String,
    pub rows: Vec<Row>,
}

struct Scene {
    d: Dataset,
    trials: Vec<NonMatedTrial>,
}

impl DemoRequest {
    fn build(&self) -> Result<Scene> {
        let d = generate(&self.synth)?;
        let trials = build_nonmated_trials(
            &d.query_labels,
            &d.gallery_labels,
            self.trial_fraction,
            self.trials,
            self.trial_seed,
        )?;
        Ok(Scene { d, trials })
    }

    fn eval(&self, scene: &Scene, fused: &FusedScores) -> Result<MetricReport> {
        evaluate_report(
            fused,
            &scene.d.query_labels,
            &scene.d.gallery_labels,
            self.far,
            self.fpir,
            &scene.trials,
        )
    }
}

/// Fuse with the anchored top-k method and each baseline; one row per method.
pub fn compare_methods(req: &DemoRequest) -> Result<Table> {
    let scene = req.build()?;
    let mask = SelectionMask::all_models(scene.d.n_queries(), scene.d.n_models(), 0)?;
    let mut rows = Vec::new();
    let fused = act_fuse_dataset(&scene.d, &mask, req.k, DEFAULT_SIGMA_EPSILON)?;
    rows.push(Row { label: "act".into(), metrics: req.eval(&scene, &fused)? });
    for method in [
        FusionMethod::Min,
        FusionMethod::Max,
        FusionMethod::Zscore,
        FusionMethod::Minmax,
        FusionMethod::WeightedSum,
    ] {
        let fused = baseline_fuse(&scene.d, &mask, method, None, DEFAULT_SIGMA_EPSILON)?;
        rows.push(Row { label: method.to_string(), metrics: req.eval(&scene, &fused)? });
    }
    Ok(Table { rows })
}

/// Overall-vs-k curve for anchored top-k fusion over `ks` (deduplicated,
/// ascending; defaults to 1,2,4,...,64 when empty).
pub fn sweep_topk(req: &DemoRequest) -> Result<Table> {
    let scene = req.build()?;
    let mask = SelectionMask::all_models(scene.d.n_queries(), scene.d.n_models(), 0)?;
    let mut ks = if req.ks.is_empty() {
        vec![1, 2, 4, 8, 16, 32, 64]
    } else {
        req.ks.clone()
    };
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    for k in ks {
        let fused = act_fuse_dataset(&scene.d, &mask, k, DEFAULT_SIGMA_EPSILON)?;
        rows.push(Row { label: format!("k={k}"), metrics: req.eval(&scene, &fused)? });
    }
    Ok(Table { rows })
}

/// Score every subset-and-anchor combination; the winner leads the reply.
pub fn search_combinations(req: &DemoRequest) -> Result<SearchReply> {
    let scene = req.build()?;
    let results = grid_search_all(
        &scene.d,
        req.k,
        req.far,
        req.fpir,
        &scene.trials,
        DEFAULT_SIGMA_EPSILON,
    )?;
    let winner = pick_winner(&results);
    let label = |cand: &CombinationCandidate| {
        let names: Vec<&str> =
            cand.subset().iter().map(|&m| scene.d.model_names[m].as_str()).collect();
        format!("{}@{}", names.join("+"), scene.d.model_names[cand.anchor()])
    };
    Ok(SearchReply {
        winner: label(&results[winner].0),
        rows: results
            .iter()
            .map(|(cand, metrics)| Row { label: label(cand), metrics: metrics.clone() })
            .collect(),
    })
}

fn envelope<T: Serialize>(outcome: Result<T>) -> String {
    match outcome {
        Ok(v) => serde_json::to_string(&v)
            .unwrap_or_else(|e| format!("{{\"error\": {:?}}}", e.to_string())),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

fn parse(input: &str) -> Result<DemoRequest> {
    serde_json::from_str(input)
        .map_err(|e| scorefuse::Error::Validation(format!("invalid request: {e}")))
}

/// JSON-string front door for [`compare_methods`].
pub fn compare_methods_json(input: &str) -> String {
    envelope(parse(input).and_then(|req| compare_methods(&req)))
}

/// JSON-string front door for [`sweep_topk`].
pub fn sweep_topk_json(input: &str) -> String {
    envelope(parse(input).and_then(|req| sweep_topk(&req)))
}

/// JSON-string front door for [`search_combinations`].
pub fn search_combinations_json(input: &str) -> String {
    envelope(parse(input).and_then(|req| search_combinations(&req)))
}

#[cfg(target_arch = "wasm32")]
mod wasm;

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> String {
        serde_json::json!({
            "synth": {
                "n_subjects": 10,
                "queries_per_subject": 2,
                "gallery_per_subject": 2,
                "models": [
                    { "name": "face", "match_mean": 0.9, "match_spread": 0.04,
                      "nonmatch_mean": 0.1, "nonmatch_spread": 0.04,
                      "gate_feature": 0, "gated_match_mean": 0.1 },
                    { "name": "gait", "match_mean": 0.65, "match_spread": 0.1,
                      "nonmatch_mean": 0.35, "nonmatch_spread": 0.1 }
                ],
                "features": [ { "name": "face_visible", "active_probability": 0.5 } ],
                "score_min": 0.0,
                "score_max": 1.0,
                "seed": 3
            },
            "k": 5,
            "trials": 3
        })
        .to_string()
    }

    #[test]
    fn compare_lists_each_method_once() {
        let reply: serde_json::Value =
            serde_json::from_str(&compare_methods_json(&request())).unwrap();
        let labels: Vec<&str> = reply["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["label"].as_str().unwrap())
            .collect();
        assert_eq!(labels, ["act", "min", "max", "zscore", "minmax", "weighted_sum"]);
        for row in reply["rows"].as_array().unwrap() {
            assert!(row["overall"].is_number());
            assert!(row["rank1"].as_f64().unwrap() >= 0.0);
        }
    }

    #[test]
    fn sweep_orders_and_dedups_ks() {
        let mut req: serde_json::Value = serde_json::from_str(&request()).unwrap();
        req["ks"] = serde_json::json!([8, 1, 8, 4]);
        let reply: serde_json::Value =
            serde_json::from_str(&sweep_topk_json(&req.to_string())).unwrap();
        let labels: Vec<&str> = reply["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["label"].as_str().unwrap())
            .collect();
        assert_eq!(labels, ["k=1", "k=4", "k=8"]);
    }

    #[test]
    fn search_returns_winner_from_rows() {
        let reply: serde_json::Value =
            serde_json::from_str(&search_combinations_json(&request())).unwrap();
        let winner = reply["winner"].as_str().unwrap();
        let rows = reply["rows"].as_array().unwrap();
        // 2 models -> 4 combinations
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| r["label"].as_str().unwrap() == winner));
        // the winner's overall is the maximum
        let best = rows
            .iter()
            .map(|r| r["overall"].as_f64().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let winner_overall = rows
            .iter()
            .find(|r| r["label"].as_str().unwrap() == winner)
            .unwrap()["overall"]
            .as_f64()
            .unwrap();
        assert_eq!(winner_overall, best);
    }

    #[test]
    fn replies_are_deterministic() {
        assert_eq!(compare_methods_json(&request()), compare_methods_json(&request()));
        assert_eq!(sweep_topk_json(&request()), sweep_topk_json(&request()));
    }

    #[test]
    fn malformed_input_reports_an_error() {
        let reply: serde_json::Value = serde_json::from_str(&compare_methods_json("{")).unwrap();
        assert!(reply["error"].as_str().unwrap().contains("invalid request"));

        let mut req: serde_json::Value = serde_json::from_str(&request()).unwrap();
        req["far"] = serde_json::json!(7.0);
        let reply: serde_json::Value =
            serde_json::from_str(&compare_methods_json(&req.to_string())).unwrap();
        assert!(reply["error"].is_string());
    }
}
