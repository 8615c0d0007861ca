mod common;

use common::oracles;
use ircount::metrics::*;
use proptest::prelude::*;

#[test]
fn hand_computed_fixtures() {
    oracles::check_metric_fixtures().unwrap();
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(mae_mse(&[], &[]).is_err());
    assert!(mae_mse(&[1], &[1, 2]).is_err());
    assert!(aggregate_folds(&[], &[]).is_err());
    assert!(aggregate_folds(&[0.5], &[0.0]).is_err());
    assert!(ConfusionMatrix::new(4).balanced_accuracy().is_err());
}

#[test]
fn single_fold_has_zero_spread() {
    assert_eq!(aggregate_folds(&[0.37], &[120.0]).unwrap(), (0.37, 0.0));
}

#[test]
fn metrics_csv_layout() {
    let a = FoldMetrics::from_predictions(&[0, 1, 2, 3], &[0, 1, 1, 1], 4).unwrap();
    let b = FoldMetrics::from_predictions(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2], 4).unwrap();
    let mut buf = Vec::new();
    let agg = write_metrics_csv(&mut buf, &[(2, a), (3, b)], "abc").unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("row,test_session,n_test,bal_acc,bal_acc_std"));
    assert!(lines[1].starts_with("fold,2,4,"));
    assert!(lines[3].starts_with("aggregate,,10,"));
    assert!(lines.iter().skip(1).all(|l| l.ends_with(",abc")));
    assert!((agg.mae.0 - 0.75 * 0.4).abs() < 1e-12);
    assert_eq!(agg.n_test, 10);
}

fn oracle_bal_acc(labels: &[usize], preds: &[usize]) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..4 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !idx.is_empty() {
            recalls.push(idx.iter().filter(|&&i| preds[i] == c).count() as f64 / idx.len() as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn oracle_f1(labels: &[usize], preds: &[usize]) -> f64 {
    let n = labels.len() as f64;
    (0..4)
        .map(|c| {
            let tp = (0..labels.len()).filter(|&i| labels[i] == c && preds[i] == c).count() as f64;
            let fp = (0..labels.len()).filter(|&i| labels[i] != c && preds[i] == c).count() as f64;
            let fn_ = (0..labels.len()).filter(|&i| labels[i] == c && preds[i] != c).count() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            (tp + fn_) / n * f1
        })
        .sum()
}

fn pairs() -> impl Strategy<Value = Vec<(usize, usize)>> {
    proptest::collection::vec((0usize..4, 0usize..4), 1..200)
}

proptest! {
    #[test]
    fn matches_pairwise_oracle(p in pairs()) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = p.into_iter().unzip();
        let m = FoldMetrics::from_predictions(&labels, &preds, 4).unwrap();
        prop_assert!((m.bal_acc - oracle_bal_acc(&labels, &preds)).abs() < 1e-12);
        prop_assert!((m.f1_weighted - oracle_f1(&labels, &preds)).abs() < 1e-12);
        let hits = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert!((m.acc - hits as f64 / labels.len() as f64).abs() < 1e-12);
        prop_assert!(m.mse + 1e-12 >= m.mae * m.mae);
    }

    #[test]
    fn invariant_under_pair_permutation(p in pairs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut q = p.clone();
        q.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (l1, p1): (Vec<usize>, Vec<usize>) = p.into_iter().unzip();
        let (l2, p2): (Vec<usize>, Vec<usize>) = q.into_iter().unzip();
        let a = FoldMetrics::from_predictions(&l1, &p1, 4).unwrap();
        let b = FoldMetrics::from_predictions(&l2, &p2, 4).unwrap();
        prop_assert!((a.bal_acc - b.bal_acc).abs() < 1e-12);
        prop_assert!((a.f1_weighted - b.f1_weighted).abs() < 1e-12);
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
        prop_assert!((a.mse - b.mse).abs() < 1e-12);
    }

    #[test]
    fn balanced_sets_have_equal_accuracies(preds in proptest::collection::vec(0usize..4, 4..=4), reps in 1usize..20) {
        let labels: Vec<usize> = (0..4 * reps).map(|i| i % 4).collect();
        let preds: Vec<usize> = (0..4 * reps).map(|i| preds[(i / 4 + i) % 4]).collect();
        let m = FoldMetrics::from_predictions(&labels, &preds, 4).unwrap();
        prop_assert!((m.bal_acc - m.acc).abs() < 1e-12);
    }

    #[test]
    fn weighted_aggregate_oracle(v in proptest::collection::vec((0.0f64..1.0, 1u32..500), 1..8)) {
        let vals: Vec<f64> = v.iter().map(|x| x.0).collect();
        let w: Vec<f64> = v.iter().map(|x| x.1 as f64).collect();
        // expand each fold into unit-weight copies
        let flat: Vec<f64> = v.iter().flat_map(|&(m, n)| std::iter::repeat_n(m, n as usize)).collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        let (m, s) = aggregate_folds(&vals, &w).unwrap();
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((s - var.sqrt()).abs() < 1e-6);
    }
}
