//! Precision, recall and F1 with per-label, micro, macro and
//! support-weighted averages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    /// Labels averaged over.
    pub labels: Vec<String>,
    pub micro: Scores,
    pub macro_avg: Scores,
    pub weighted: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub per_label: Vec<Scores>,
    /// `confusion[gold][pred]`
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
    pub accuracy: f64,
    pub all: Averages,
    /// Averages with one label left out, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluding: Option<(String, Averages)>,
}

impl EvalReport {
    fn averages(&self, keep: &[usize]) -> Averages {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &l in keep {
            let t = self.confusion[l][l];
            tp += t;
            fp += (0..self.labels.len()).map(|g| self.confusion[g][l]).sum::<usize>() - t;
            fn_ += self.confusion[l].iter().sum::<usize>() - t;
        }
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let support: usize = keep.iter().map(|&l| self.per_label[l].support).sum();
        let micro = Scores {
            precision: p,
            recall: r,
            f1: f1(p, r),
            support,
        };
        let n = keep.len().max(1) as f64;
        let mean = |f: fn(&Scores) -> f64| keep.iter().map(|&l| f(&self.per_label[l])).sum::<f64>() / n;
        let macro_avg = Scores {
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            f1: mean(|s| s.f1),
            support,
        };
        let wmean = |f: fn(&Scores) -> f64| {
            if support == 0 {
                0.0
            } else {
                keep.iter()
                    .map(|&l| f(&self.per_label[l]) * self.per_label[l].support as f64)
                    .sum::<f64>()
                    / support as f64
            }
        };
        let weighted = Scores {
            precision: wmean(|s| s.precision),
            recall: wmean(|s| s.recall),
            f1: wmean(|s| s.f1),
            support,
        };
        Averages {
            labels: keep.iter().map(|&l| self.labels[l].clone()).collect(),
            micro,
            macro_avg,
            weighted,
        }
    }

    /// Adds averages computed over every label except `label`. Per-label
    /// scores and the confusion matrix are unchanged.
    pub fn with_exclusion(mut self, label: Label) -> Self {
        let keep: Vec<usize> = (0..self.labels.len()).filter(|&l| l != label.0).collect();
        let avg = self.averages(&keep);
        self.excluding = Some((self.labels[label.0].clone(), avg));
        self
    }

    /// Plain-text table in percent.
    pub fn to_table(&self, title: &str) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(12);
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}",
            "label", "precision", "recall", "f1", "support"
        );
        let row = |out: &mut String, name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>8}",
                name,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.support
            );
        };
        for (name, s) in self.labels.iter().zip(&self.per_label) {
            row(&mut out, name, s);
        }
        let _ = writeln!(out);
        row(&mut out, "micro avg", &self.all.micro);
        row(&mut out, "macro avg", &self.all.macro_avg);
        row(&mut out, "weighted avg", &self.all.weighted);
        if let Some((name, avg)) = &self.excluding {
            let _ = writeln!(out);
            let _ = writeln!(out, "without {name}:");
            row(&mut out, "micro avg", &avg.micro);
            row(&mut out, "macro avg", &avg.macro_avg);
            row(&mut out, "weighted avg", &avg.weighted);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion (rows gold, columns predicted):");
        for (name, r) in self.labels.iter().zip(&self.confusion) {
            let cells: Vec<String> = r.iter().map(|c| format!("{c:>6}")).collect();
            let _ = writeln!(out, "{name:<width$}  {}", cells.join(""));
        }
        out
    }
}

/// Scores predicted against gold labels over the label inventory `labels`.
pub fn evaluate(pred: &[Label], gold: &[Label], labels: &[String]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let n = labels.len();
    if let Some(bad) = pred.iter().chain(gold).find(|l| l.0 >= n) {
        return Err(Error::Invalid(format!("label index {} outside {n} labels", bad.0)));
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for (p, g) in pred.iter().zip(gold) {
        confusion[g.0][p.0] += 1;
    }
    let per_label = (0..n)
        .map(|l| {
            let tp = confusion[l][l];
            let predicted: usize = (0..n).map(|g| confusion[g][l]).sum();
            let support: usize = confusion[l].iter().sum();
            let (p, r) = (ratio(tp, predicted), ratio(tp, support));
            Scores {
                precision: p,
                recall: r,
                f1: f1(p, r),
                support,
            }
        })
        .collect();
    let correct = (0..n).map(|l| confusion[l][l]).sum();
    let mut report = EvalReport {
        labels: labels.to_vec(),
        per_label,
        confusion,
        total: gold.len(),
        accuracy: ratio(correct, gold.len()),
        all: Averages {
            labels: Vec::new(),
            micro: Scores::default(),
            macro_avg: Scores::default(),
            weighted: Scores::default(),
        },
        excluding: None,
    };
    report.all = report.averages(&(0..n).collect::<Vec<_>>());
    Ok(report)
}

/// Support-weighted F1 over all labels.
pub fn weighted_f1(pred: &[Label], gold: &[Label], num_labels: usize) -> Result<f64> {
    let names: Vec<String> = (0..num_labels).map(|i| i.to_string()).collect();
    Ok(evaluate(pred, gold, &names)?.all.weighted.f1)
}
