//! Randomized invariants over the fusion, metric, and reward layers.

use proptest::collection::vec;
use proptest::prelude::*;

use scorefuse::dataset::{FusedScores, ScoreMatrix, SelectionMask};
use scorefuse::fusion::act_fuse_query;
use scorefuse::metrics::{build_nonmated_trials, mean_average_precision, rank1_accuracy, tar_at_far};
use scorefuse::policy::group_advantages;
use scorefuse::reward::{augment_selection_mask, format_reward, tool_success_reward, ToolCall, TrajectoryMode, TrajectoryTranscript, Turn, TurnAction};
use scorefuse::selector::CombinationCandidate;

fn scores_strategy(max_models: usize, max_gallery: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_models, 2..=max_gallery).prop_flat_map(|(m, g)| {
        vec(vec(0.0f64..1.0, g..=g), m..=m)
    })
}

proptest! {
    // Fused output length always matches the gallery; all entries finite.
    #[test]
    fn fusion_output_is_finite(rows in scores_strategy(4, 12), k in 0usize..16) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let fused = act_fuse_query(&refs, 0, k, 1e-12).unwrap();
        prop_assert_eq!(fused.len(), rows[0].len());
        prop_assert!(fused.iter().all(|v| v.is_finite()));
    }

    // Scaling every model's scores by a positive factor scales the fused row
    // by the same factor: z-scores are scale-invariant and the contributions
    // are linear in the raw scores.
    #[test]
    fn fusion_is_positively_homogeneous(rows in scores_strategy(3, 10), k in 0usize..8, scale in 0.1f64..10.0) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let base = act_fuse_query(&refs, 0, k, 1e-12).unwrap();
        let scaled_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let refs2: Vec<&[f64]> = scaled_rows.iter().map(|r| r.as_slice()).collect();
        let scaled = act_fuse_query(&refs2, 0, k, 1e-12).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a * scale - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} * {scale} vs {b}");
        }
    }

    // Rank-1 and mAP are invariant to permuting the gallery columns.
    #[test]
    fn metrics_are_gallery_permutation_invariant(
        (nq, ng) in (2usize..8, 3usize..10),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..nq * ng).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let gl: Vec<String> = (0..ng).map(|g| format!("S{}", g % ((ng / 2).max(2)))).collect();
        let ql: Vec<String> = (0..nq).map(|q| format!("S{}", q % ((ng / 2).max(2) + 1))).collect();
        prop_assume!(ql.iter().any(|q| gl.contains(q)));

        let scores = FusedScores { matrix: ScoreMatrix::new(nq, ng, data.clone()).unwrap() };
        let r1 = rank1_accuracy(&scores, &ql, &gl).unwrap();
        let map = mean_average_precision(&scores, &ql, &gl).unwrap();

        let mut perm: Vec<usize> = (0..ng).collect();
        perm.shuffle(&mut rng);
        let mut pdata = vec![0.0; nq * ng];
        for q in 0..nq {
            for (new_g, &old_g) in perm.iter().enumerate() {
                pdata[q * ng + new_g] = data[q * ng + old_g];
            }
        }
        let pgl: Vec<String> = perm.iter().map(|&g| gl[g].clone()).collect();
        let pscores = FusedScores { matrix: ScoreMatrix::new(nq, ng, pdata).unwrap() };
        // ties can be broken toward a different column after permutation, so
        // only compare when scores in each row are distinct (they are, almost
        // surely, from the continuous draw)
        prop_assert!((rank1_accuracy(&pscores, &ql, &pgl).unwrap() - r1).abs() < 1e-12);
        prop_assert!((mean_average_precision(&pscores, &ql, &pgl).unwrap() - map).abs() < 1e-12);
    }

    // TAR is monotone in the FAR target for arbitrary score matrices.
    #[test]
    fn tar_is_monotone_in_far(
        (nq, ng) in (2usize..6, 3usize..8),
        seed in any::<u64>(),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..nq * ng).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let gl: Vec<String> = (0..ng).map(|g| format!("S{g}")).collect();
        let ql: Vec<String> = (0..nq).map(|q| format!("S{}", q % ng)).collect();
        let scores = FusedScores { matrix: ScoreMatrix::new(nq, ng, data).unwrap() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t_lo = tar_at_far(&scores, &ql, &gl, lo).unwrap();
        let t_hi = tar_at_far(&scores, &ql, &gl, hi).unwrap();
        prop_assert!(t_lo <= t_hi, "TAR({lo})={t_lo} > TAR({hi})={t_hi}");
    }

    // The open-set trial builder is a pure function of its arguments.
    #[test]
    fn trials_are_reproducible(n_subjects in 3usize..12, fraction in 0.1f64..0.9, seed in any::<u64>()) {
        let gl: Vec<String> = (0..n_subjects * 2).map(|g| format!("S{}", g / 2)).collect();
        let ql: Vec<String> = (0..n_subjects).map(|q| format!("S{q}")).collect();
        let n_remove = (fraction * n_subjects as f64).round() as usize;
        prop_assume!(n_remove >= 1 && n_remove < n_subjects);
        let t1 = build_nonmated_trials(&ql, &gl, fraction, 4, seed).unwrap();
        let t2 = build_nonmated_trials(&ql, &gl, fraction, 4, seed).unwrap();
        prop_assert_eq!(&t1, &t2);
        // removed subjects are distinct and sorted; kept plus removed covers
        // every subject
        for t in &t1 {
            prop_assert!(t.nonmated_subjects.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(t.nonmated_subjects.len(), n_remove);
        }
    }

    // Advantages always recentre to mean zero, and rescale to unit spread
    // unless the group is constant.
    #[test]
    fn advantages_normalize(rewards in vec(-2.0f64..4.0, 2..12)) {
        let a = group_advantages(&rewards).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if a.iter().any(|&v| v != 0.0) {
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    // Format and tool rewards stay in [0,1] for arbitrary transcripts.
    #[test]
    fn episode_rewards_bounded(
        turn_bits in vec((any::<bool>(), 0u8..3), 0..8),
        call_bits in vec(any::<bool>(), 0..6),
        da in any::<bool>(),
    ) {
        let t = TrajectoryTranscript {
            mode: if da { TrajectoryMode::Da } else { TrajectoryMode::Cot },
            turns: turn_bits
                .iter()
                .map(|&(think, a)| Turn {
                    has_think: think,
                    action: match a {
                        0 => TurnAction::ToolCall,
                        1 => TurnAction::Answer,
                        _ => TurnAction::Malformed,
                    },
                })
                .collect(),
            tool_calls: call_bits
                .iter()
                .enumerate()
                .map(|(i, &ok)| ToolCall { model_name: format!("m{i}"), succeeded: ok })
                .collect(),
            final_answer: None,
        };
        let rf = format_reward(&t);
        let rt = tool_success_reward(&t);
        prop_assert!((0.0..=1.0).contains(&rf));
        prop_assert!((0.0..=1.0).contains(&rt));
    }

    // Mask augmentation is reproducible and always keeps the anchor column.
    #[test]
    fn augmented_masks_keep_anchor(
        n_queries in 1usize..40,
        gamma in 0.0f64..=1.0,
        p in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let n_models = 5;
        let cand = CombinationCandidate::new(vec![1, 3], 3).unwrap();
        let m1 = augment_selection_mask(&cand, n_queries, n_models, gamma, p, seed).unwrap();
        let m2 = augment_selection_mask(&cand, n_queries, n_models, gamma, p, seed).unwrap();
        for q in 0..n_queries {
            prop_assert_eq!(m1.selected(q), m2.selected(q));
            prop_assert!(m1.selected(q).contains(&3), "anchor column dropped on row {q}");
            prop_assert_eq!(m1.anchor(q), 3);
        }
    }

    // An all-models mask round-trips through its accessors.
    #[test]
    fn all_models_mask_is_total(nq in 1usize..20, nm in 1usize..6, anchor_pick in any::<u16>()) {
        let anchor = anchor_pick as usize % nm;
        let m = SelectionMask::all_models(nq, nm, anchor).unwrap();
        for q in 0..nq {
            prop_assert_eq!(m.selected(q), (0..nm).collect::<Vec<_>>());
            prop_assert_eq!(m.anchor(q), anchor);
        }
    }
}
