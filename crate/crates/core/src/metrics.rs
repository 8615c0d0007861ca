//! Counting metrics and test-size-weighted aggregation across folds.

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&y, &p) in labels.iter().zip(preds) {
            cm.add(y, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Invalid(format!(
                "class pair ({truth}, {pred}) outside [0, {})",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::Empty("confusion matrix".into()));
        }
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / n as f64)
    }

    /// Mean recall over the classes present in the ground truth.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let recalls: Vec<f64> = (0..self.k)
            .filter(|&c| self.support(c) > 0)
            .map(|c| self.get(c, c) as f64 / self.support(c) as f64)
            .collect();
        if recalls.is_empty() {
            return Err(Error::Empty("confusion matrix".into()));
        }
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Support-weighted per-class F1; a class with zero precision and recall scores 0.
    pub fn weighted_f1(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let mut f1 = 0.0;
        for c in 0..self.k {
            let support = self.support(c);
            let tp = self.get(c, c) as f64;
            if support == 0 || tp == 0.0 {
                continue;
            }
            let precision = tp / self.predicted(c) as f64;
            let recall = tp / support as f64;
            f1 += support as f64 / n as f64 * 2.0 * precision * recall / (precision + recall);
        }
        f1
    }
}

/// Mean absolute and mean squared count error.
pub fn mae_mse(preds: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::Shape("prediction and label lengths differ".into()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&p, &y) in preds.iter().zip(labels) {
        let d = p as f64 - y as f64;
        abs += d.abs();
        sq += d * d;
    }
    let n = preds.len() as f64;
    Ok((abs / n, sq / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub bal_acc: f64,
    pub acc: f64,
    pub f1_weighted: f64,
    pub mae: f64,
    pub mse: f64,
    pub n_test: u64,
}

impl FoldMetrics {
    pub fn from_predictions(labels: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        let cm = ConfusionMatrix::from_predictions(labels, preds, k)?;
        let (mae, mse) = mae_mse(preds, labels)?;
        Ok(Self {
            bal_acc: cm.balanced_accuracy()?,
            acc: cm.accuracy()?,
            f1_weighted: cm.weighted_f1(),
            mae,
            mse,
            n_test: labels.len() as u64,
        })
    }
}

/// Weighted mean and population standard deviation.
pub fn aggregate_folds(values: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("fold values".into()));
    }
    if values.len() != weights.len() {
        return Err(Error::Shape("one weight per fold required".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("total fold weight is zero".into()));
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    Ok((mean, var.sqrt()))
}

/// Mean ± std of every metric, weighted by test size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateMetrics {
    pub bal_acc: (f64, f64),
    pub acc: (f64, f64),
    pub f1_weighted: (f64, f64),
    pub mae: (f64, f64),
    pub mse: (f64, f64),
    pub n_test: u64,
}

pub fn aggregate(folds: &[FoldMetrics]) -> Result<AggregateMetrics> {
    let w: Vec<f64> = folds.iter().map(|f| f.n_test as f64).collect();
    let agg = |get: fn(&FoldMetrics) -> f64| {
        let v: Vec<f64> = folds.iter().map(get).collect();
        aggregate_folds(&v, &w)
    };
    Ok(AggregateMetrics {
        bal_acc: agg(|f| f.bal_acc)?,
        acc: agg(|f| f.acc)?,
        f1_weighted: agg(|f| f.f1_weighted)?,
        mae: agg(|f| f.mae)?,
        mse: agg(|f| f.mse)?,
        n_test: folds.iter().map(|f| f.n_test).sum(),
    })
}

/// Per-fold rows followed by one `aggregate` row (mean and population std).
pub fn write_metrics_csv<W: std::io::Write>(
    writer: W,
    folds: &[(u32, FoldMetrics)],
    digest: &str,
) -> Result<AggregateMetrics> {
    let metrics: Vec<FoldMetrics> = folds.iter().map(|f| f.1).collect();
    let agg = aggregate(&metrics)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "row",
        "test_session",
        "n_test",
        "bal_acc",
        "bal_acc_std",
        "acc",
        "acc_std",
        "f1_weighted",
        "f1_weighted_std",
        "mae",
        "mae_std",
        "mse",
        "mse_std",
        "config_digest",
    ])?;
    for (session, m) in folds {
        let v = [m.bal_acc, m.acc, m.f1_weighted, m.mae, m.mse];
        let mut row = vec![
            "fold".to_string(),
            session.to_string(),
            m.n_test.to_string(),
        ];
        for x in v {
            row.push(x.to_string());
            row.push(String::new());
        }
        row.push(digest.to_string());
        w.write_record(&row)?;
    }
    let mut row = vec![
        "aggregate".to_string(),
        String::new(),
        agg.n_test.to_string(),
    ];
    for (m, sd) in [agg.bal_acc, agg.acc, agg.f1_weighted, agg.mae, agg.mse] {
        row.push(m.to_string());
        row.push(sd.to_string());
    }
    row.push(digest.to_string());
    w.write_record(&row)?;
    w.flush()?;
    Ok(agg)
}
