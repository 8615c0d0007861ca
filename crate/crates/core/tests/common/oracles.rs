//! Brute-force Pareto oracle and hand-evaluated metric fixtures.

use ircount::explorer::pareto_indices;
use ircount::metrics::{aggregate_folds, mae_mse, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point `i` survives unless some other point is at least as cheap and as accurate and
/// strictly better in one of them; exact duplicates keep the smallest name.
pub fn brute_front(points: &[(u64, f64, String)]) -> Vec<usize> {
    let mut keep = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut dominated = false;
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let better = q.0 < p.0 || q.1 > p.1;
            let no_worse = q.0 <= p.0 && q.1 >= p.1;
            let twin = q.0 == p.0 && q.1 == p.1 && q.2 < p.2;
            if no_worse && (better || twin) {
                dominated = true;
                break;
            }
        }
        if !dominated {
            keep.push(i);
        }
    }
    keep.sort_by_key(|&i| points[i].0);
    keep
}

/// Random cloud with many cost and accuracy ties.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(u64, f64, String)> {
    (0..n)
        .map(|i| {
            (
                rng.random_range(0..200u64) * 10,
                rng.random_range(0..100) as f64 / 100.0,
                format!("m{:04}", rng.random_range(0..n.max(1) as u32) * 10_000 + i as u32),
            )
        })
        .collect()
}

pub fn check_pareto(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, n);
    let view: Vec<(u64, f64, &str)> = pts.iter().map(|(c, a, s)| (*c, *a, s.as_str())).collect();
    let got = pareto_indices(&view);
    let want = brute_front(&pts);
    if got == want {
        Ok(())
    } else {
        Err(format!("seed {seed}: {got:?} != {want:?}"))
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: {got} != {want}"))
    }
}

/// Hand-computed values for the confusion matrix, count error and fold aggregation.
pub fn check_metric_fixtures() -> Result<(), String> {
    let cm = ConfusionMatrix::from_rows(&[vec![2, 2], vec![0, 4]]).map_err(|e| e.to_string())?;
    close("bal_acc", cm.balanced_accuracy().map_err(|e| e.to_string())?, 0.75, 1e-12)?;
    close("acc", cm.accuracy().map_err(|e| e.to_string())?, 0.75, 1e-12)?;
    // F1_0 = 2/3, F1_1 = 0.8, equal support
    close("f1", cm.weighted_f1(), 0.5 * (2.0 / 3.0) + 0.5 * 0.8, 1e-12)?;
    close("f1 rounded", cm.weighted_f1(), 0.7333, 5e-5)?;
    let (mae, mse) = mae_mse(&[0, 1, 1, 1], &[0, 1, 2, 3]).map_err(|e| e.to_string())?;
    close("mae", mae, 0.75, 1e-12)?;
    close("mse", mse, 1.25, 1e-12)?;
    let (m, s) = aggregate_folds(&[0.4, 0.8], &[1.0, 3.0]).map_err(|e| e.to_string())?;
    close("mean", m, 0.7, 1e-12)?;
    close("std", s, 0.03f64.sqrt(), 1e-12)?;
    // a never-predicted class scores F1 0 with its support weight
    let cm = ConfusionMatrix::from_rows(&[vec![3, 0], vec![1, 0]]).map_err(|e| e.to_string())?;
    close("f1 missing class", cm.weighted_f1(), 0.75 * (2.0 * 0.75 / 1.75), 1e-12)?;
    Ok(())
}
