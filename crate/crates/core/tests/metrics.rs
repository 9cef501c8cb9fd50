mod common;

use common::brute_force_scores;
use perser::metrics::{aggregate, score, summarize, EpisodeReport, Scenario};
use perser::model::LabelSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flags_to_sets(rows: &[Vec<bool>]) -> Vec<LabelSet> {
    rows.iter().map(|r| LabelSet::new(r.clone()).unwrap()).collect()
}

fn random_rows(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    (0..n)
        .map(|_| {
            let density = rng.random_range(0.05..0.6);
            let mut row: Vec<bool> = (0..classes).map(|_| rng.random::<f64>() < density).collect();
            if !row.iter().any(|&b| b) {
                row[rng.random_range(0..classes)] = true;
            }
            row
        })
        .collect()
}

#[test]
fn score_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let gold = random_rows(n, 9, &mut rng);
        let preds = random_rows(n, 9, &mut rng);
        let s = score(&flags_to_sets(&preds), &flags_to_sets(&gold)).unwrap();
        let (ma, mi, ua) = brute_force_scores(&preds, &gold);
        assert_eq!(s.ma_f1, ma);
        assert_eq!(s.mi_f1, mi);
        assert_eq!(s.ua, ua);
    }
}

#[test]
fn worked_two_class_example() {
    let t = |a: bool, b: bool| vec![a, b];
    let gold = vec![t(true, false), t(true, false), t(false, true), t(true, true)];
    let preds = vec![t(true, false), t(false, true), t(false, true), t(true, false)];
    let (ma, mi, ua) = brute_force_scores(&preds, &gold);
    assert!((ma - 0.65).abs() < 1e-12);
    assert!((mi - 0.6667).abs() < 1e-4);
    assert!((ua - 0.625).abs() < 1e-12);
    let s = score(&flags_to_sets(&preds), &flags_to_sets(&gold)).unwrap();
    assert_eq!((s.ma_f1, s.mi_f1, s.ua), (ma, mi, ua));
}

#[test]
fn classes_absent_everywhere_do_not_count_toward_macro_f1() {
    let gold = flags_to_sets(&[vec![true, false, false], vec![true, false, false]]);
    let s = score(&gold, &gold).unwrap();
    assert_eq!(s.ma_f1, 1.0);
    assert_eq!(s.ua, 1.0);
}

#[test]
fn mismatched_class_counts_are_rejected() {
    let a = flags_to_sets(&[vec![true, false]]);
    let b = flags_to_sets(&[vec![true, false, false]]);
    assert!(score(&a, &b).is_err());
    assert!(score(&[], &[]).is_err());
}

fn report(method: &str, annotator: &str, seed: u64, shots: usize, v: f64) -> EpisodeReport {
    EpisodeReport {
        method: method.into(),
        scenario: Scenario::Seen,
        upstream: "synthetic".into(),
        annotator: annotator.into(),
        seed,
        shots,
        ma_f1: v,
        mi_f1: v,
        ua: v,
        config_digest: "x".into(),
    }
}

#[test]
fn summaries_group_by_method_and_shots_in_first_seen_order() {
    let reports = vec![
        report("b", "a1", 0, 2, 0.2),
        report("a", "a1", 0, 2, 0.4),
        report("b", "a1", 0, 4, 0.3),
        report("b", "a2", 0, 2, 0.6),
    ];
    let rows = summarize(&reports).unwrap();
    let keys: Vec<(String, usize)> = rows.iter().map(|r| (r.method.clone(), r.shots)).collect();
    assert_eq!(keys, [("b".into(), 2), ("a".into(), 2), ("b".into(), 4)]);
    assert!((rows[0].mean.mi_f1 - 0.4).abs() < 1e-15);
}

#[test]
fn mixed_methods_cannot_be_aggregated_directly() {
    assert!(aggregate(&[report("a", "x", 0, 2, 0.1), report("b", "x", 0, 2, 0.1)]).is_err());
    assert!(aggregate(&[]).is_err());
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (1usize..40).prop_flat_map(|n| {
        let row = prop::collection::vec(any::<bool>(), 9).prop_map(|mut r| {
            if !r.iter().any(|&b| b) {
                r[0] = true;
            }
            r
        });
        (prop::collection::vec(row.clone(), n), prop::collection::vec(row, n))
    })
}

proptest! {
    #[test]
    fn scores_are_bounded_and_order_free((preds, gold) in rows_strategy(), shift in 0usize..40) {
        let s = score(&flags_to_sets(&preds), &flags_to_sets(&gold)).unwrap();
        for v in [s.ma_f1, s.mi_f1, s.ua] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let k = shift % preds.len();
        let mut p2 = preds.clone();
        let mut g2 = gold.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        let r = score(&flags_to_sets(&p2), &flags_to_sets(&g2)).unwrap();
        prop_assert!((r.ma_f1 - s.ma_f1).abs() < 1e-12);
        prop_assert!((r.mi_f1 - s.mi_f1).abs() < 1e-12);
        prop_assert!((r.ua - s.ua).abs() < 1e-12);
    }

    #[test]
    fn relabelling_classes_leaves_scores_unchanged((preds, gold) in rows_strategy(), shift in 1usize..9) {
        let rot = |rows: &[Vec<bool>]| -> Vec<Vec<bool>> {
            rows.iter().map(|r| { let mut r = r.clone(); r.rotate_left(shift); r }).collect()
        };
        let s = score(&flags_to_sets(&preds), &flags_to_sets(&gold)).unwrap();
        let r = score(&flags_to_sets(&rot(&preds)), &flags_to_sets(&rot(&gold))).unwrap();
        prop_assert!((r.ma_f1 - s.ma_f1).abs() < 1e-12);
        prop_assert_eq!(r.mi_f1, s.mi_f1);
        prop_assert!((r.ua - s.ua).abs() < 1e-12);
    }

    #[test]
    fn aggregate_of_identical_seeds_is_the_annotator_mean(values in prop::collection::vec(0.0f64..1.0, 1..8), reps in 1usize..5) {
        let mut reports = Vec::new();
        for (i, v) in values.iter().enumerate() {
            for s in 0..reps {
                reports.push(report("m", &format!("a{i}"), s as u64, 8, *v));
            }
        }
        let row = aggregate(&reports).unwrap();
        let want = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((row.mean.mi_f1 - want).abs() < 1e-12);
        prop_assert_eq!(row.annotators, values.len());
    }
}
