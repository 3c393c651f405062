//! Acceptance gate: ten end-to-end criteria, each reported as one PASS/FAIL
//! line (run with `--nocapture` to see them). Metric criteria compare the
//! library against straight-line brute-force reimplementations written here,
//! independent of the library's internals.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scorefuse::dataset::{FusedScores, ScoreMatrix, SelectionMask};
use scorefuse::experiment::{
    run_experiment, Command, DatasetSource, EvalTargets, ExperimentConfig,
};
use scorefuse::fusion::{
    act_fuse_dataset, act_fuse_query, baseline_fuse, surrogate_anchor_fuse, FusionConfig,
    FusionMethod, DEFAULT_SIGMA_EPSILON,
};
use scorefuse::metrics::{
    build_nonmated_trials, evaluate_report, fnir_at_fpir, mean_average_precision, rank1_accuracy,
    tar_at_far, NonMatedTrial,
};
use scorefuse::policy::{
    greedy_trajectory, group_advantages, surrogate_gradient, surrogate_objective, train_policy,
    evaluate_greedy, GrpoConfig, Policy, TrajectoryItem,
};
use scorefuse::reward::{
    accuracy_reward, augment_selection_mask, format_reward, metric_based_reward,
    tool_success_reward, total_reward, RewardConfig, ToolCall, TrajectoryMode,
    TrajectoryTranscript, Turn, TurnAction,
};
use scorefuse::selector::{grid_search, per_sample_oracle, CombinationCandidate};
use scorefuse::synth::{generate, FeatureSpec, ModelSpec, SynthConfig};

const EPS: f64 = DEFAULT_SIGMA_EPSILON;

fn model(name: &str, mm: f64, ms: f64, nm: f64, ns: f64) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        match_mean: mm,
        match_spread: ms,
        nonmatch_mean: nm,
        nonmatch_spread: ns,
        gate_feature: None,
        gated_match_mean: None,
    }
}

fn gated_model(name: &str, mm: f64, ms: f64, nm: f64, ns: f64, feature: usize, idle_mean: f64) -> ModelSpec {
    ModelSpec {
        gate_feature: Some(feature),
        gated_match_mean: Some(idle_mean),
        ..model(name, mm, ms, nm, ns)
    }
}

// ---------------------------------------------------------------------------
// criterion 1: closed-form fusion identities and a brute-force cross-check

fn criterion_01_act_closed_form() {
    // single model, k = 0: no contributions survive, fused = s / 2
    let s = [0.9, 0.41, 0.07, 0.63];
    let fused = act_fuse_query(&[&s], 0, 0, EPS).unwrap();
    for (f, v) in fused.iter().zip(&s) {
        assert!((f - v / 2.0).abs() <= 1e-12);
    }

    // single constant model, any k: sigma = 0 zeroes every contribution
    let c = [0.4; 5];
    for k in [0, 1, 3, 64] {
        let fused = act_fuse_query(&[&c], 0, k, EPS).unwrap();
        for f in &fused {
            assert!((f - 0.2).abs() <= 1e-12);
        }
    }

    // two models: compare against a straight-line reimplementation
    let s0 = [0.9, 0.4, 0.2, 0.75];
    let s1 = [0.7, 0.6, 0.1, 0.55];
    let k = 2;
    let fused = act_fuse_query(&[&s0, &s1], 0, k, EPS).unwrap();

    let contribution = |s: &[f64]| -> Vec<f64> {
        let n = s.len() as f64;
        let mu = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        let z: Vec<f64> = if sigma < EPS {
            vec![0.0; s.len()]
        } else {
            s.iter().map(|v| (v - mu) / sigma).collect()
        };
        // indices of the k largest scores, ties to the lower index
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut c = vec![0.0; s.len()];
        for &g in order.iter().take(k) {
            c[g] = z[g] * s[g];
        }
        c
    };
    let c0 = contribution(&s0);
    let c1 = contribution(&s1);
    for g in 0..s0.len() {
        let expect = (s0[g] + c0[g] + c1[g]) / 3.0;
        assert!(
            (fused[g] - expect).abs() <= 1e-12,
            "index {g}: {} vs brute force {expect}",
            fused[g]
        );
    }
}

// ---------------------------------------------------------------------------
// criterion 2: anchored top-1 fusion sharpens the match/non-match margin

fn standardized_margin(f: &FusedScores, ql: &[String], gl: &[String]) -> f64 {
    let mut matches = Vec::new();
    let mut non_matches = Vec::new();
    let mut all = Vec::new();
    for q in 0..f.n_queries() {
        for g in 0..f.n_gallery() {
            let v = f.row(q)[g];
            all.push(v);
            if ql[q] == gl[g] {
                matches.push(v);
            } else {
                non_matches.push(v);
            }
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mu = mean(&all);
    let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64;
    (mean(&matches) - mean(&non_matches)) / var.sqrt()
}

fn criterion_02_margin_structure() {
    let d = generate(&SynthConfig {
        n_subjects: 16,
        queries_per_subject: 2,
        gallery_per_subject: 2,
        models: vec![
            model("informative", 0.9, 0.02, 0.1, 0.02),
            model("mediocre", 0.55, 0.15, 0.45, 0.15),
            model("noise", 0.5, 0.2, 0.5, 0.2),
        ],
        features: vec![],
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let mask = SelectionMask::all_models(d.n_queries(), d.n_models(), 0).unwrap();
    let fused = act_fuse_dataset(&d, &mask, 1, EPS).unwrap();
    let averaged = baseline_fuse(&d, &mask, FusionMethod::WeightedSum, None, EPS).unwrap();
    let act_margin = standardized_margin(&fused, &d.query_labels, &d.gallery_labels);
    let avg_margin = standardized_margin(&averaged, &d.query_labels, &d.gallery_labels);
    assert!(
        act_margin > avg_margin,
        "anchored top-1 margin {act_margin} must beat plain-average margin {avg_margin}"
    );
}

// ---------------------------------------------------------------------------
// criterion 3: metrics equal definition-level oracles on random instances

struct Instance {
    scores: FusedScores,
    query_labels: Vec<String>,
    gallery_labels: Vec<String>,
    trial: NonMatedTrial,
}

// Random instance with deliberate score ties; None when it cannot exercise
// all four metrics (no mated query, single-sided pair pool, empty trial).
fn random_instance(rng: &mut ChaCha8Rng) -> Option<Instance> {
    let nq = rng.random_range(2..=30);
    let ng = rng.random_range(3..=30);
    let pool = (ng / 2).max(3);
    let gallery_labels: Vec<String> =
        (0..ng).map(|_| format!("S{}", rng.random_range(0..pool))).collect();
    let query_labels: Vec<String> =
        (0..nq).map(|_| format!("S{}", rng.random_range(0..pool + 2))).collect();

    let mut data = Vec::with_capacity(nq * ng);
    for _ in 0..nq * ng {
        let u: f64 = rng.random();
        data.push(if rng.random::<f64>() < 0.5 { (u * 8.0).floor() / 8.0 } else { u });
    }
    let scores = FusedScores { matrix: ScoreMatrix::new(nq, ng, data).unwrap() };

    let mated = query_labels.iter().any(|q| gallery_labels.contains(q));
    let any_non_match = query_labels
        .iter()
        .any(|q| gallery_labels.iter().any(|g| g != q));
    if !mated || !any_non_match {
        return None;
    }
    let trial_seed = rng.random::<u64>();
    let trial = build_nonmated_trials(&query_labels, &gallery_labels, 0.34, 1, trial_seed)
        .ok()?
        .remove(0);
    if trial.mated_probes.is_empty() || trial.nonmated_probes.is_empty() {
        return None;
    }
    Some(Instance { scores, query_labels, gallery_labels, trial })
}

fn oracle_rank1(inst: &Instance) -> f64 {
    let mut mated = 0usize;
    let mut hits = 0usize;
    for q in 0..inst.scores.n_queries() {
        if !inst.gallery_labels.contains(&inst.query_labels[q]) {
            continue;
        }
        mated += 1;
        let row = inst.scores.row(q);
        let mut best = 0usize;
        for g in 1..row.len() {
            if row[g] > row[best] {
                best = g;
            }
        }
        if inst.gallery_labels[best] == inst.query_labels[q] {
            hits += 1;
        }
    }
    hits as f64 / mated as f64
}

fn oracle_map(inst: &Instance) -> f64 {
    let mut sum = 0.0;
    let mut mated = 0usize;
    for q in 0..inst.scores.n_queries() {
        let row = inst.scores.row(q);
        let mates: Vec<usize> = (0..row.len())
            .filter(|&g| inst.gallery_labels[g] == inst.query_labels[q])
            .collect();
        if mates.is_empty() {
            continue;
        }
        // rank by counting: strictly greater scores, plus equal scores at a
        // lower index, plus one
        let mut ranked: Vec<usize> = mates
            .iter()
            .map(|&g| {
                let mut rank = 1;
                for j in 0..row.len() {
                    if row[j] > row[g] || (row[j] == row[g] && j < g) {
                        rank += 1;
                    }
                }
                rank
            })
            .collect();
        ranked.sort_unstable();
        let mut ap = 0.0;
        for (i, rank) in ranked.iter().enumerate() {
            ap += (i + 1) as f64 / *rank as f64;
        }
        sum += ap / mates.len() as f64;
        mated += 1;
    }
    sum / mated as f64
}

fn oracle_tar(inst: &Instance, far_target: f64) -> f64 {
    let mut matches = Vec::new();
    let mut non_matches = Vec::new();
    for q in 0..inst.scores.n_queries() {
        for g in 0..inst.scores.n_gallery() {
            let v = inst.scores.row(q)[g];
            if inst.query_labels[q] == inst.gallery_labels[g] {
                matches.push(v);
            } else {
                non_matches.push(v);
            }
        }
    }
    let threshold = if far_target >= 1.0 {
        f64::NEG_INFINITY
    } else {
        // exhaustive scan: smallest candidate whose strictly-greater
        // fraction is within target
        let mut candidates = non_matches.clone();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut found = f64::NAN;
        for &t in &candidates {
            let greater = non_matches.iter().filter(|&&v| v > t).count();
            if greater as f64 / non_matches.len() as f64 <= far_target {
                found = t;
                break;
            }
        }
        found
    };
    matches.iter().filter(|&&v| v > threshold).count() as f64 / matches.len() as f64
}

fn oracle_fnir(inst: &Instance, fpir_target: f64) -> f64 {
    let trial = &inst.trial;
    let mut alarms = Vec::new();
    for &q in &trial.nonmated_probes {
        let row = inst.scores.row(q);
        let mut best = f64::NEG_INFINITY;
        for &g in &trial.kept_gallery {
            if row[g] > best {
                best = row[g];
            }
        }
        alarms.push(best);
    }
    let mut candidates = alarms.clone();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut threshold = candidates[candidates.len() - 1];
    for &t in &candidates {
        let greater = alarms.iter().filter(|&&v| v > t).count();
        if greater as f64 / alarms.len() as f64 <= fpir_target {
            threshold = t;
            break;
        }
    }

    let mut misses = 0usize;
    for &q in &trial.mated_probes {
        let row = inst.scores.row(q);
        let mut top = trial.kept_gallery[0];
        let mut best_mate = f64::NEG_INFINITY;
        for &g in &trial.kept_gallery {
            if row[g] > row[top] {
                top = g;
            }
            if inst.gallery_labels[g] == inst.query_labels[q] && row[g] > best_mate {
                best_mate = row[g];
            }
        }
        if inst.gallery_labels[top] != inst.query_labels[q] || best_mate <= threshold {
            misses += 1;
        }
    }
    misses as f64 / trial.mated_probes.len() as f64
}

fn criterion_03_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut done = 0;
    while done < 100 {
        let Some(inst) = random_instance(&mut rng) else { continue };
        let r1 = rank1_accuracy(&inst.scores, &inst.query_labels, &inst.gallery_labels).unwrap();
        assert_eq!(r1, oracle_rank1(&inst), "rank1 mismatch on instance {done}");

        let map = mean_average_precision(&inst.scores, &inst.query_labels, &inst.gallery_labels).unwrap();
        assert_eq!(map, oracle_map(&inst), "mAP mismatch on instance {done}");

        for far in [0.1, 1.0] {
            let tar = tar_at_far(&inst.scores, &inst.query_labels, &inst.gallery_labels, far).unwrap();
            assert_eq!(tar, oracle_tar(&inst, far), "TAR mismatch at far={far} on instance {done}");
        }

        let fnir = fnir_at_fpir(
            &inst.scores,
            &inst.query_labels,
            &inst.gallery_labels,
            &inst.trial,
            0.25,
        )
        .unwrap();
        assert_eq!(fnir, oracle_fnir(&inst, 0.25), "FNIR mismatch on instance {done}");
        done += 1;
    }
}

// ---------------------------------------------------------------------------
// criterion 4: thresholds move monotonically with their targets

fn criterion_04_threshold_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut done = 0;
    while done < 50 {
        let Some(inst) = random_instance(&mut rng) else { continue };
        let mut last_tar = -1.0;
        for far in [0.0, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0] {
            let tar = tar_at_far(&inst.scores, &inst.query_labels, &inst.gallery_labels, far).unwrap();
            assert!(tar >= last_tar, "TAR fell from {last_tar} to {tar} at far={far}");
            last_tar = tar;
        }
        let mut last_fnir = 2.0;
        for fpir in [0.0, 0.05, 0.1, 0.3, 0.6, 1.0] {
            let fnir = fnir_at_fpir(
                &inst.scores,
                &inst.query_labels,
                &inst.gallery_labels,
                &inst.trial,
                fpir,
            )
            .unwrap();
            assert!(fnir <= last_fnir, "FNIR rose from {last_fnir} to {fnir} at fpir={fpir}");
            last_fnir = fnir;
        }
        done += 1;
    }
}

// ---------------------------------------------------------------------------
// criterion 5: the ten-trial open-set protocol is bit-reproducible

fn criterion_05_trial_determinism() {
    let d = generate(&SynthConfig {
        n_subjects: 20,
        queries_per_subject: 2,
        gallery_per_subject: 2,
        models: vec![model("a", 0.8, 0.06, 0.2, 0.06), model("b", 0.6, 0.1, 0.4, 0.1)],
        features: vec![],
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let t1 = build_nonmated_trials(&d.query_labels, &d.gallery_labels, 0.2, 10, 7).unwrap();
    let t2 = build_nonmated_trials(&d.query_labels, &d.gallery_labels, 0.2, 10, 7).unwrap();
    assert_eq!(t1.len(), 10);
    assert_eq!(t1, t2, "trials must be bit-identical under one base seed");

    let mask = SelectionMask::all_models(d.n_queries(), d.n_models(), 0).unwrap();
    let fused = act_fuse_dataset(&d, &mask, 5, EPS).unwrap();
    let r1 = evaluate_report(&fused, &d.query_labels, &d.gallery_labels, 0.05, 0.05, &t1).unwrap();
    let r2 = evaluate_report(&fused, &d.query_labels, &d.gallery_labels, 0.05, 0.05, &t2).unwrap();
    assert_eq!(r1, r2, "mean and std over trials must rerun exactly");
    assert!(r1.fnir_std >= 0.0);
}

// ---------------------------------------------------------------------------
// criterion 6: the reward stack's ranges, additivity, and mask retention

fn criterion_06_reward_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..200 {
        let n_turns = rng.random_range(0..6);
        let turns: Vec<Turn> = (0..n_turns)
            .map(|_| Turn {
                has_think: rng.random::<f64>() < 0.5,
                action: match rng.random_range(0..3) {
                    0 => TurnAction::ToolCall,
                    1 => TurnAction::Answer,
                    _ => TurnAction::Malformed,
                },
            })
            .collect();
        let n_calls = rng.random_range(0..5);
        let tool_calls: Vec<ToolCall> = (0..n_calls)
            .map(|i| ToolCall { model_name: format!("m{i}"), succeeded: rng.random::<f64>() < 0.7 })
            .collect();
        let t = TrajectoryTranscript {
            mode: if rng.random::<f64>() < 0.5 { TrajectoryMode::Cot } else { TrajectoryMode::Da },
            turns,
            tool_calls,
            final_answer: None,
        };
        let rf = format_reward(&t);
        let rt = tool_success_reward(&t);
        assert!((0.0..=1.0).contains(&rf), "format reward {rf} out of range");
        assert!((0.0..=1.0).contains(&rt), "tool reward {rt} out of range");
    }

    assert_eq!(accuracy_reward(Some("S3"), "S3"), 1.0);
    assert_eq!(accuracy_reward(Some("S3"), "S4"), 0.0);
    assert_eq!(accuracy_reward(None, "S4"), 0.0);

    let d = generate(&SynthConfig {
        n_subjects: 12,
        queries_per_subject: 2,
        gallery_per_subject: 2,
        models: vec![model("good", 0.85, 0.04, 0.15, 0.04), model("bad", 0.5, 0.18, 0.5, 0.18)],
        features: vec![],
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let rc = RewardConfig {
        k: 4,
        far_target: 0.05,
        fpir_target: 0.05,
        trial_fraction: 0.25,
        n_trials: 4,
        ..RewardConfig::default()
    };
    for subset in [vec![0], vec![1], vec![0, 1]] {
        let anchor = subset[0];
        let cand = CombinationCandidate::new(subset, anchor).unwrap();
        let mask = augment_selection_mask(&cand, d.n_queries(), d.n_models(), 0.7, 0.5, 3).unwrap();
        let r = metric_based_reward(&d, &mask, &rc).unwrap();
        assert!((-1.0..=3.0).contains(&r), "metric reward {r} out of range");
    }

    // unit weights: the total is exactly the component sum
    let truth = d.query_labels[0].clone();
    let t = TrajectoryTranscript {
        mode: TrajectoryMode::Cot,
        turns: vec![
            Turn { has_think: true, action: TurnAction::ToolCall },
            Turn { has_think: false, action: TurnAction::Answer },
        ],
        tool_calls: vec![ToolCall { model_name: "good".into(), succeeded: true }],
        final_answer: Some(truth.clone()),
    };
    let cand = CombinationCandidate::new(vec![0], 0).unwrap();
    let mask =
        augment_selection_mask(&cand, d.n_queries(), d.n_models(), rc.gamma, rc.bernoulli_p, rc.mask_seed)
            .unwrap();
    let components = format_reward(&t)
        + tool_success_reward(&t)
        + accuracy_reward(t.final_answer.as_deref(), &truth)
        + metric_based_reward(&d, &mask, &rc).unwrap();
    let total = total_reward(&t, &truth, &d, &rc).unwrap();
    assert!((total - components).abs() <= 1e-12, "total {total} vs component sum {components}");

    // gamma = 1 keeps the combination on every row, exactly
    let cand = CombinationCandidate::new(vec![0, 3, 7], 0).unwrap();
    let kept = augment_selection_mask(&cand, 500, 12, 1.0, 0.5, 11).unwrap();
    for q in 0..500 {
        assert_eq!(kept.selected(q), vec![0, 3, 7]);
    }

    // gamma = 0.8: empirical retention within 3 sigma over 10,000 rows;
    // 12 models make template coincidences (p = 0.5^11) negligible
    let n_rows = 10_000;
    let mask = augment_selection_mask(&cand, n_rows, 12, 0.8, 0.5, 2024).unwrap();
    let kept = (0..n_rows).filter(|&q| mask.selected(q) == vec![0, 3, 7]).count();
    let fraction = kept as f64 / n_rows as f64;
    let sigma = (0.8 * 0.2 / n_rows as f64).sqrt();
    assert!(
        (fraction - 0.8).abs() <= 3.0 * sigma,
        "retention {fraction} outside 0.8 +/- {:.4}",
        3.0 * sigma
    );
}

// ---------------------------------------------------------------------------
// criterion 7: advantage normalization and the analytic policy gradient

fn criterion_07_advantages_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 6.0 - 1.0).collect();
        let a = group_advantages(&rewards).unwrap();
        let mean = a.iter().sum::<f64>() / n as f64;
        let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if a.iter().all(|&v| v == 0.0) {
            continue;
        }
        assert!(mean.abs() <= 1e-9, "advantage mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 1e-9, "advantage std {}", var.sqrt());
    }
    assert_eq!(group_advantages(&[2.5; 6]).unwrap(), vec![0.0; 6]);

    // finite differences on a toy policy, away from the sampling point
    let p = Policy::new(vec!["a".into(), "b".into(), "c".into()], 1, 21).unwrap();
    let old = p.params.clone();
    let mut theta = old.clone();
    theta.anchor[1][0] += 0.06;
    theta.continuation[0][1] -= 0.05;

    let mk = |calls: &[usize], adv: f64| {
        let names = ["a", "b", "c"];
        TrajectoryItem {
            features: vec![0.6],
            transcript: TrajectoryTranscript {
                mode: TrajectoryMode::Cot,
                turns: (0..calls.len() + 1)
                    .map(|i| Turn {
                        has_think: true,
                        action: if i < calls.len() { TurnAction::ToolCall } else { TurnAction::Answer },
                    })
                    .collect(),
                tool_calls: calls
                    .iter()
                    .map(|&m| ToolCall { model_name: names[m].into(), succeeded: true })
                    .collect(),
                final_answer: None,
            },
            advantage: adv,
        }
    };
    let items = vec![mk(&[0, 2], 1.1), mk(&[1], -0.4), mk(&[2, 0, 1], -0.7)];
    let cfg = GrpoConfig { clip_epsilon: 1e9, kl_beta: 0.04, ..GrpoConfig::default() };
    let grad = surrogate_gradient(&p, &theta, &old, &items, &cfg).unwrap();
    let h = 1e-5;
    for m in 0..3 {
        for j in 0..2 {
            for head in 0..2 {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                if head == 0 {
                    plus.anchor[m][j] += h;
                    minus.anchor[m][j] -= h;
                } else {
                    plus.continuation[m][j] += h;
                    minus.continuation[m][j] -= h;
                }
                let fd = (surrogate_objective(&p, &plus, &old, &items, &cfg).unwrap()
                    - surrogate_objective(&p, &minus, &old, &items, &cfg).unwrap())
                    / (2.0 * h);
                let an = if head == 0 { grad.anchor[m][j] } else { grad.continuation[m][j] };
                let rel = (fd - an).abs() / fd.abs().max(1e-6);
                assert!(rel <= 1e-4, "head {head} m={m} j={j}: {an} vs {fd} (rel {rel})");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 8: per-sample oracle >= grid winner >= all-models surrogate

fn criterion_08_selection_hierarchy() {
    let d = generate(&SynthConfig {
        n_subjects: 16,
        queries_per_subject: 2,
        gallery_per_subject: 2,
        models: vec![
            gated_model("gated", 0.9, 0.03, 0.1, 0.03, 0, 0.1),
            model("steady", 0.7, 0.08, 0.3, 0.08),
            model("noise", 0.5, 0.16, 0.5, 0.16),
        ],
        features: vec![FeatureSpec { name: "active".into(), active_probability: 0.5 }],
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let k = 5;
    let trials = build_nonmated_trials(&d.query_labels, &d.gallery_labels, 0.2, 5, 0).unwrap();
    let eval = |fused: &FusedScores| {
        evaluate_report(fused, &d.query_labels, &d.gallery_labels, 0.05, 0.05, &trials).unwrap()
    };

    let oracle_mask = per_sample_oracle(&d, k, EPS).unwrap();
    let oracle = eval(&act_fuse_dataset(&d, &oracle_mask, k, EPS).unwrap());
    let (_, grid) = grid_search(&d, k, 0.05, 0.05, &trials, EPS).unwrap();
    let all = SelectionMask::all_models(d.n_queries(), d.n_models(), 0).unwrap();
    let surrogate = eval(&surrogate_anchor_fuse(&d, &all, k, EPS).unwrap());

    assert!(
        oracle.overall >= grid.overall,
        "oracle {} must not trail the grid winner {}",
        oracle.overall,
        grid.overall
    );
    assert!(
        grid.overall >= surrogate.overall,
        "grid winner {} must not trail all-models surrogate fusion {}",
        grid.overall,
        surrogate.overall
    );
}

// ---------------------------------------------------------------------------
// criterion 9: 200 training steps specialize the anchor and lift the metric

fn criterion_09_policy_learning() {
    let d = generate(&SynthConfig {
        n_subjects: 20,
        queries_per_subject: 3,
        gallery_per_subject: 2,
        models: vec![
            gated_model("fr", 0.92, 0.03, 0.08, 0.03, 0, 0.08),
            model("gait", 0.52, 0.12, 0.48, 0.12),
            model("noise", 0.5, 0.15, 0.5, 0.15),
        ],
        features: vec![FeatureSpec { name: "face_visible".into(), active_probability: 0.5 }],
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let rc = RewardConfig {
        gamma: 1.0,
        k: 5,
        far_target: 0.05,
        fpir_target: 0.05,
        trial_fraction: 0.2,
        n_trials: 5,
        ..RewardConfig::default()
    };
    let cfg = GrpoConfig {
        group_size: 6,
        kl_beta: 0.04,
        clip_epsilon: 0.2,
        learning_rate: 0.3,
        steps: 200,
        turn_limit: 4,
        batch_size: 8,
        mode: TrajectoryMode::Cot,
    };
    let init_seed = 1;
    let untrained = Policy::new(d.model_names.clone(), 1, init_seed).unwrap();
    let (trained, history) = train_policy(&d, &rc, &cfg, init_seed, 2).unwrap();
    assert_eq!(history.len(), 200);

    let features = d.query_features.as_ref().unwrap();
    let visible: Vec<usize> = (0..d.n_queries()).filter(|&q| features[q][0] == 1.0).collect();
    assert!(!visible.is_empty());
    let fr_anchors = visible
        .iter()
        .filter(|&&q| {
            let t = greedy_trajectory(&trained, &features[q], &cfg).unwrap();
            t.tool_calls[0].model_name == "fr"
        })
        .count();
    let fraction = fr_anchors as f64 / visible.len() as f64;
    assert!(
        fraction >= 0.9,
        "face-visible anchor should be the face model >= 90% of the time, got {fraction}"
    );

    let before = evaluate_greedy(&untrained, &d, &cfg, &rc).unwrap();
    let after = evaluate_greedy(&trained, &d, &cfg, &rc).unwrap();
    assert!(
        after.overall - before.overall >= 0.2,
        "training lifted overall by {} (from {} to {})",
        after.overall - before.overall,
        before.overall,
        after.overall
    );
}

// ---------------------------------------------------------------------------
// criterion 10: the sweep yields a stable curve with a well-defined argmax

fn criterion_10_sweep_shape() {
    let dir = std::env::temp_dir().join(format!("acceptance_sweep_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Synth(SynthConfig {
            n_subjects: 20,
            queries_per_subject: 2,
            gallery_per_subject: 2,
            models: vec![
                model("sharp", 0.75, 0.1, 0.25, 0.1),
                model("broad", 0.62, 0.13, 0.38, 0.13),
                model("hazy", 0.55, 0.16, 0.45, 0.16),
            ],
            features: vec![],
            seed: 12,
            ..SynthConfig::default()
        }),
        fusion: FusionConfig::default(),
        reward: RewardConfig::default(),
        grpo: GrpoConfig::default(),
        eval: EvalTargets {
            far: 0.05,
            fpir: 0.05,
            trial_fraction: 0.2,
            n_trials: 5,
            ..EvalTargets::default()
        },
        sweep_ks: vec![1, 2, 4, 8, 16, 32],
        policy_path: None,
        out_dir: dir.clone(),
    };
    let report = run_experiment(&cfg, Command::SweepTopk).unwrap();
    assert_eq!(report.rows.len(), 6);
    let overalls: Vec<f64> = report.rows.iter().map(|r| r.metrics.overall).collect();
    let max = overalls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let at_max = overalls.iter().filter(|&&v| v == max).count();
    assert_eq!(at_max, 1, "argmax must be unique, curve: {overalls:?}");

    let csv = std::fs::read(dir.join("report.csv")).unwrap();
    let rerun = run_experiment(&cfg, Command::SweepTopk).unwrap();
    assert_eq!(std::fs::read(dir.join("report.csv")).unwrap(), csv, "rerun must be byte-identical");
    let rerun_overalls: Vec<f64> = rerun.rows.iter().map(|r| r.metrics.overall).collect();
    assert_eq!(overalls, rerun_overalls);
    std::fs::remove_dir_all(&dir).unwrap();
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Box<dyn Fn() + std::panic::UnwindSafe>)> = vec![
        ("01 act closed form", Box::new(criterion_01_act_closed_form)),
        ("02 margin structure", Box::new(criterion_02_margin_structure)),
        ("03 metric oracles", Box::new(criterion_03_metric_oracles)),
        ("04 threshold monotonicity", Box::new(criterion_04_threshold_monotonicity)),
        ("05 trial determinism", Box::new(criterion_05_trial_determinism)),
        ("06 reward stack", Box::new(criterion_06_reward_stack)),
        ("07 advantages and gradient", Box::new(criterion_07_advantages_and_gradient)),
        ("08 selection hierarchy", Box::new(criterion_08_selection_hierarchy)),
        ("09 policy learning", Box::new(criterion_09_policy_learning)),
        ("10 sweep shape", Box::new(criterion_10_sweep_shape)),
    ];
    let mut failures = Vec::new();
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run));
        match outcome {
            Ok(()) => println!("criterion {name}: PASS"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                println!("criterion {name}: FAIL ({msg})");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
