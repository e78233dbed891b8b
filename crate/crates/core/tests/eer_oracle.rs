mod common;

use std::collections::HashMap;

use common::{eer_oracle, random_score_set};
use mvec::data::{Trial, TrialList};
use mvec::eval::{compute_eer, dimension_sweep, score_trials, ScoreSet};
use mvec::math::Prng;
use proptest::prelude::*;

fn map(s: &ScoreSet, f: impl Fn(f64) -> f64) -> ScoreSet {
    ScoreSet {
        target_scores: s.target_scores.iter().map(|&x| f(x)).collect(),
        nontarget_scores: s.nontarget_scores.iter().map(|&x| f(x)).collect(),
    }
}

#[test]
fn matches_brute_force_oracle_on_random_sets() {
    let mut rng = Prng::new(2024);
    for case in 0..200 {
        let s = random_score_set(&mut rng);
        let got = compute_eer(&s).unwrap().eer;
        let want = eer_oracle(&s);
        assert!(
            (got - want).abs() < 1e-9,
            "case {case}: {got} vs {want} for {s:?}"
        );
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn hand_case_against_oracle() {
    let s = ScoreSet {
        target_scores: vec![0.9, 0.8, 0.2],
        nontarget_scores: vec![0.7, 0.1, 0.05],
    };
    assert!((eer_oracle(&s) - 1.0 / 3.0).abs() < 1e-12);
    assert!((100.0 * compute_eer(&s).unwrap().eer - 33.3333).abs() < 1e-4);
}

#[test]
fn increasing_transforms_leave_eer_unchanged() {
    let mut rng = Prng::new(5);
    for _ in 0..100 {
        let s = random_score_set(&mut rng);
        let base = compute_eer(&s).unwrap().eer;
        let affine = compute_eer(&map(&s, |x| 3.5 * x - 2.0)).unwrap().eer;
        let cubic = compute_eer(&map(&s, |x| x * x * x + x)).unwrap().eer;
        assert!((base - affine).abs() < 1e-12);
        assert!((base - cubic).abs() < 1e-12);
    }
}

#[test]
fn swapping_lists_and_negating_is_symmetric() {
    let mut rng = Prng::new(6);
    for _ in 0..100 {
        let s = random_score_set(&mut rng);
        let swapped = ScoreSet {
            target_scores: s.nontarget_scores.iter().map(|x| -x).collect(),
            nontarget_scores: s.target_scores.iter().map(|x| -x).collect(),
        };
        let a = compute_eer(&s).unwrap().eer;
        let b = compute_eer(&swapped).unwrap().eer;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        assert!((b - eer_oracle(&swapped)).abs() < 1e-9);
    }
}

#[test]
fn single_system_full_dim_sweep_is_one_eer() {
    let mut rng = Prng::new(8);
    let emb: HashMap<u64, Vec<f64>> = (0..12u64)
        .map(|id| (id, (0..4).map(|_| rng.normal()).collect()))
        .collect();
    let trials = TrialList {
        trials: (0..11u64)
            .map(|i| Trial {
                enroll: i,
                test: i + 1,
                target: i % 2 == 0,
            })
            .collect(),
    };
    let report = dimension_sweep(&[("sys".to_string(), emb.clone())], &trials, &[4]).unwrap();
    assert_eq!(report.rows.len(), 1);
    let direct = compute_eer(&score_trials(&emb, &trials, 4).unwrap()).unwrap();
    assert_eq!(report.rows[0].eer_percent, 100.0 * direct.eer);

    let systems = vec![("a".to_string(), emb.clone()), ("b".to_string(), emb)];
    let report = dimension_sweep(&systems, &trials, &[1, 2, 4]).unwrap();
    assert_eq!(report.rows.len(), 6);
}

proptest! {
    #[test]
    fn eer_is_a_fraction(
        t in prop::collection::vec(-5.0f64..5.0, 1..30),
        n in prop::collection::vec(-5.0f64..5.0, 1..30),
    ) {
        let s = ScoreSet { target_scores: t, nontarget_scores: n };
        let r = compute_eer(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.eer));
        prop_assert!((r.eer - eer_oracle(&s)).abs() < 1e-9);
    }
}
