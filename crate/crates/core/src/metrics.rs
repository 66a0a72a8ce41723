//! Accuracy, harmonic mean, neighbor purity and the metrics records written
//! by runs.
//!
//! `metrics.json` schema (version 1):
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "command": "adapt",
//!   "mode": "aware" | "agnostic",
//!   "acc_s": f64, "acc_t": f64, "h": f64,          // percentages
//!   "per_domain_accuracy": [f64, ...],              // index = domain id
//!   "domain_id_accuracy": f64 | null,               // agnostic mode only
//!   "accuracy_matrix": [[f64, ...], ...] | null,    // continual runs
//!   "epochs": [ { "phase", "epoch", "loss", "acc_s", "acc_t", "h",
//!                 "acc_n", "acc_np" }, ... ]
//! }
//! ```
//!
//! Per-epoch fields that do not apply to a phase are `null`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lsc::{knn, Banks};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Percentage of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::config("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// `2·a·b / (a + b)`; zero when either accuracy is zero.
pub fn harmonic_mean(acc_s: f64, acc_t: f64) -> f64 {
    if acc_s <= 0.0 || acc_t <= 0.0 {
        return 0.0;
    }
    2.0 * acc_s * acc_t / (acc_s + acc_t)
}

/// `Acc_n`: percentage of bank samples whose `k` nearest other samples all
/// carry the sample's predicted label. `Acc_np`: percentage of those whose
/// shared label is also correct (0 when there are none).
pub fn neighbor_purity(
    banks: &Banks,
    predicted: &[usize],
    truth: &[usize],
    k: usize,
) -> Result<(f64, f64)> {
    let n = banks.len();
    if predicted.len() != n || truth.len() != n {
        return Err(Error::shape(
            "one predicted and one true label per bank row",
        ));
    }
    if k == 0 || k >= n {
        return Err(Error::config(format!("k = {k} must satisfy 1 <= k < {n}")));
    }
    let ids: Vec<usize> = (0..n).collect();
    let neighbors = knn(banks, banks.features(), Some(&ids), k)?;
    let mut agree = 0usize;
    let mut correct = 0usize;
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.iter().all(|&j| predicted[j] == predicted[i]) {
            agree += 1;
            if predicted[i] == truth[i] {
                correct += 1;
            }
        }
    }
    let acc_n = 100.0 * agree as f64 / n as f64;
    let acc_np = if agree == 0 {
        0.0
    } else {
        100.0 * correct as f64 / agree as f64
    };
    Ok((acc_n, acc_np))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Aware,
    Agnostic,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aware" => Ok(EvalMode::Aware),
            "agnostic" => Ok(EvalMode::Agnostic),
            other => Err(Error::usage(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub acc_s: Option<f64>,
    pub acc_t: Option<f64>,
    pub h: Option<f64>,
    pub acc_n: Option<f64>,
    pub acc_np: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub command: String,
    pub mode: EvalMode,
    pub acc_s: f64,
    pub acc_t: f64,
    pub h: f64,
    pub per_domain_accuracy: Vec<f64>,
    pub domain_id_accuracy: Option<f64>,
    pub accuracy_matrix: Option<Vec<Vec<f64>>>,
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// `phase,epoch,loss,acc_s,acc_t,h,acc_n,acc_np`; empty cells for n/a.
pub fn write_epochs_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "phase,epoch,loss,acc_s,acc_t,h,acc_n,acc_np")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.phase,
            r.epoch,
            r.loss,
            opt(r.acc_s),
            opt(r.acc_t),
            opt(r.h),
            opt(r.acc_n),
            opt(r.acc_np)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Rows are adaptation steps (`before`, then one per target), columns are
/// domains (`source`, `target1`, ...).
pub fn write_accuracy_matrix_csv(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols = matrix.first().map_or(0, Vec::len);
    let mut header = vec!["step".to_string(), "source".to_string()];
    header.extend((1..cols).map(|j| format!("target{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in matrix.iter().enumerate() {
        let step = if i == 0 {
            "before".to_string()
        } else {
            format!("after_target{i}")
        };
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{step},{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_similarity, Matrix, Rng};
    use proptest::prelude::*;

    fn round1(x: f64) -> f64 {
        (x * 10.0).round() / 10.0
    }

    #[test]
    fn harmonic_mean_reported_pairs() {
        assert_eq!(round1(harmonic_mean(90.4, 85.0)), 87.6);
        assert_eq!(round1(harmonic_mean(99.6, 48.1)), 64.9);
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 75.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    fn clustered_banks() -> (Banks, Vec<usize>) {
        // two tight, far-apart clusters
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let eps = i as f64 * 1e-3;
            rows.push(vec![1.0, eps, 0.0]);
            labels.push(0);
            rows.push(vec![0.0, eps, 1.0]);
            labels.push(1);
        }
        let f = Matrix::from_rows(&rows).unwrap();
        let s = Matrix::filled(20, 2, 0.5);
        (Banks::new(f, s).unwrap(), labels)
    }

    #[test]
    fn purity_regimes() {
        let (banks, labels) = clustered_banks();
        assert_eq!(
            neighbor_purity(&banks, &labels, &labels, 3).unwrap(),
            (100.0, 100.0)
        );
        let all_zero = vec![0; 20];
        let all_one = vec![1; 20];
        assert_eq!(
            neighbor_purity(&banks, &all_zero, &all_one, 3).unwrap(),
            (100.0, 0.0)
        );
        assert!(matches!(
            neighbor_purity(&banks, &labels, &labels, 20),
            Err(Error::Config(_))
        ));
    }

    fn brute_purity(banks: &Banks, pred: &[usize], truth: &[usize], k: usize) -> (f64, f64) {
        let n = banks.len();
        let (mut agree, mut correct) = (0, 0);
        for i in 0..n {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        cosine_similarity(banks.features().row(i), banks.features().row(j))
                            .unwrap(),
                        j,
                    )
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if sims[..k].iter().all(|&(_, j)| pred[j] == pred[i]) {
                agree += 1;
                if pred[i] == truth[i] {
                    correct += 1;
                }
            }
        }
        let acc_n = 100.0 * agree as f64 / n as f64;
        let acc_np = if agree == 0 {
            0.0
        } else {
            100.0 * correct as f64 / agree as f64
        };
        (acc_n, acc_np)
    }

    #[test]
    fn purity_matches_brute_force() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let n = 8 + rng.below(30);
            let f = Matrix::uniform(n, 3, 1.0, &mut rng);
            let banks = Banks::new(f, Matrix::filled(n, 2, 0.5)).unwrap();
            let pred: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let k = 1 + rng.below(4);
            assert_eq!(
                neighbor_purity(&banks, &pred, &truth, k).unwrap(),
                brute_purity(&banks, &pred, &truth, k)
            );
        }
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_accuracy_matrix_csv(&[vec![99.0, 70.0, 60.0], vec![98.0, 90.0, 65.0]], &p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            s,
            "step,source,target1,target2\nbefore,99,70,60\nafter_target1,98,90,65\n"
        );
        let e = dir.path().join("e.csv");
        write_epochs_csv(
            &[EpochRecord {
                phase: "source".into(),
                epoch: 1,
                loss: 0.5,
                acc_s: Some(90.0),
                acc_t: None,
                h: None,
                acc_n: None,
                acc_np: None,
            }],
            &e,
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&e).unwrap().lines().nth(1).unwrap(),
            "source,1,0.5,90,,,,"
        );
    }

    proptest! {
        #[test]
        fn harmonic_mean_sandwich(a in 0.1f64..100.0, b in 0.1f64..100.0) {
            let h = harmonic_mean(a, b);
            prop_assert!((h - harmonic_mean(b, a)).abs() < 1e-12);
            prop_assert!(h >= a.min(b) - 1e-12);
            prop_assert!(h <= (a + b) / 2.0 + 1e-12);
        }
    }
}
