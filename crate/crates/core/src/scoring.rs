// SPDX-License-Identifier: Apache-2.0

//! Score tables, per-class score statistics and the threshold decision rule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::NetworkState;

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    /// `None` marks an out-of-distribution sample.
    pub true_label: Option<usize>,
    pub argmax: usize,
    pub scores: Vec<f64>,
    pub correct: bool,
}

impl ScoreRow {
    pub fn new(true_label: Option<usize>, scores: Vec<f64>) -> Self {
        let argmax = argmax(&scores);
        Self {
            true_label,
            argmax,
            correct: true_label == Some(argmax),
            scores,
        }
    }

    pub fn top_score(&self) -> f64 {
        self.scores[self.argmax]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n_classes: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn from_scores(scores: &Array2<f64>, labels: Option<&[usize]>) -> Self {
        let rows = scores
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| ScoreRow::new(labels.map(|l| l[i]), r.to_vec()))
            .collect();
        Self {
            n_classes: scores.ncols(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn correct_rows(&self) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(|r| r.correct)
    }

    /// CSV with columns `true_label, argmax, correct, s_0 .. s_{C-1}`;
    /// OOD rows carry `true_label = -1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_label,argmax,correct");
        for c in 0..self.n_classes {
            let _ = write!(out, ",s_{c}");
        }
        out.push('\n');
        for r in &self.rows {
            match r.true_label {
                Some(l) => {
                    let _ = write!(out, "{l}");
                }
                None => out.push_str("-1"),
            }
            let _ = write!(out, ",{},{}", r.argmax, u8::from(r.correct));
            for s in &r.scores {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty score table".into()))?;
        let n_classes = header
            .split(',')
            .count()
            .checked_sub(3)
            .ok_or_else(|| Error::Format("score table header too short".into()))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("score table line {}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_classes + 3 {
                return Err(bad());
            }
            let label: i64 = fields[0].parse().map_err(|_| bad())?;
            let scores = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let row = ScoreRow::new(usize::try_from(label).ok(), scores);
            let argmax: usize = fields[1].parse().map_err(|_| bad())?;
            if argmax != row.argmax || fields[2] != if row.correct { "1" } else { "0" } {
                return Err(Error::Consistency(format!(
                    "score table line {}: stored argmax/correct disagree with scores",
                    i + 2
                )));
            }
            rows.push(row);
        }
        Ok(Self { n_classes, rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores every sample of `ds`. With `ood`, all rows are marked OOD.
pub fn build_score_table(net: &NetworkState, ds: &LabeledDataset, ood: bool) -> Result<ScoreTable> {
    if ds.is_empty() {
        return Ok(ScoreTable {
            n_classes: net.n_classes(),
            rows: Vec::new(),
        });
    }
    let scores = net.score_dataset(ds)?;
    Ok(ScoreTable::from_scores(
        &scores,
        (!ood).then(|| ds.labels()),
    ))
}

/// Mean and sample standard deviation of each class's own score over its
/// correctly classified rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n: Vec<usize>,
}

impl ClassStats {
    pub fn n_classes(&self) -> usize {
        self.mu.len()
    }
}

/// `(mu, sigma, n)` for one class of `table`.
pub fn class_stat(table: &ScoreTable, class: usize) -> Result<(f64, f64, usize)> {
    let own: Vec<f64> = table
        .correct_rows()
        .filter(|r| r.true_label == Some(class))
        .map(|r| r.scores[class])
        .collect();
    let n = own.len();
    if n < 2 {
        return Err(Error::InsufficientData { class, found: n });
    }
    let mean = own.iter().sum::<f64>() / n as f64;
    let var = own.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt(), n))
}

pub fn fit_class_stats(table: &ScoreTable) -> Result<ClassStats> {
    let mut stats = ClassStats {
        mu: Vec::with_capacity(table.n_classes),
        sigma: Vec::with_capacity(table.n_classes),
        n: Vec::with_capacity(table.n_classes),
    };
    for c in 0..table.n_classes {
        let (mu, sigma, n) = class_stat(table, c)?;
        stats.mu.push(mu);
        stats.sigma.push(sigma);
        stats.n.push(n);
    }
    Ok(stats)
}

/// Negative Z-score `(mu_c - s) / sigma_c`.
pub fn neg_z(stats: &ClassStats, class: usize, score: f64) -> Result<f64> {
    let sigma = stats.sigma[class];
    if sigma == 0.0 {
        return Err(Error::DegenerateScale { class });
    }
    Ok((stats.mu[class] - score) / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id(usize),
    Ood,
}

impl Decision {
    pub fn is_ood(self) -> bool {
        self == Decision::Ood
    }
}

/// Per-class thresholds `mu_c - eta * sigma_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub eta: f64,
    pub stats: ClassStats,
}

impl ThresholdPolicy {
    pub fn new(eta: f64, stats: ClassStats) -> Self {
        Self { eta, stats }
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.stats.mu[class] - self.eta * self.stats.sigma[class]
    }

    /// `Id(c*)` when the top score strictly exceeds its class threshold.
    pub fn decide(&self, scores: &[f64]) -> Decision {
        let c = argmax(scores);
        if scores[c] > self.threshold(c) {
            Decision::Id(c)
        } else {
            Decision::Ood
        }
    }
}

pub fn decide(policy: &ThresholdPolicy, scores: &[f64]) -> Decision {
    policy.decide(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: f64, sigma: f64) -> ClassStats {
        ClassStats {
            mu: vec![mu],
            sigma: vec![sigma],
            n: vec![10],
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn class_stats_use_correct_rows_only() {
        let rows = vec![
            ScoreRow::new(Some(0), vec![1.0, 0.0]),
            ScoreRow::new(Some(0), vec![2.0, 0.0]),
            ScoreRow::new(Some(0), vec![3.0, 0.0]),
            ScoreRow::new(Some(1), vec![0.0, 0.5]),
            ScoreRow::new(Some(1), vec![0.0, 0.7]),
        ];
        let table = ScoreTable { n_classes: 2, rows };
        let s = fit_class_stats(&table).unwrap();
        assert_eq!(s.mu[0], 2.0);
        assert_eq!(s.sigma[0], 1.0);

        let mut noisy = table.clone();
        noisy.rows.push(ScoreRow::new(Some(0), vec![0.1, 0.9]));
        noisy.rows.push(ScoreRow::new(None, vec![5.0, 0.0]));
        assert_eq!(fit_class_stats(&noisy).unwrap(), s);

        let mut thin = table;
        thin.rows.pop();
        assert!(matches!(
            fit_class_stats(&thin),
            Err(Error::InsufficientData { class: 1, found: 1 })
        ));
    }

    #[test]
    fn neg_z_cases() {
        assert_eq!(neg_z(&stats(10.0, 2.0), 0, 7.0).unwrap(), 1.5);
        assert_eq!(neg_z(&stats(10.0, 2.0), 0, 10.0).unwrap(), 0.0);
        assert!(matches!(
            neg_z(&stats(1.0, 0.0), 0, 1.0),
            Err(Error::DegenerateScale { class: 0 })
        ));
    }

    #[test]
    fn decision_rule() {
        let p = ThresholdPolicy::new(1.0, stats(0.9, 0.05));
        assert_eq!(p.decide(&[0.88]), Decision::Id(0));
        assert_eq!(p.decide(&[0.80]), Decision::Ood);
        let th = p.threshold(0);
        assert_eq!(p.decide(&[th]), Decision::Ood);
    }

    #[test]
    fn ood_tables_are_never_correct() {
        let scores = ndarray::array![[0.9, 0.1], [0.2, 0.3]];
        let t = ScoreTable::from_scores(&scores, None);
        assert!(t.rows.iter().all(|r| !r.correct && r.true_label.is_none()));
        let t = ScoreTable::from_scores(&scores, Some(&[0, 0]));
        assert_eq!(
            t.rows.iter().map(|r| r.correct).collect::<Vec<_>>(),
            vec![true, false]
        );
    }

    #[test]
    fn csv_round_trip() {
        let scores = ndarray::array![[0.9, 0.1], [0.2, 0.3], [-0.25, 1.0 / 3.0]];
        let mut t = ScoreTable::from_scores(&scores, Some(&[0, 0, 1]));
        t.rows[2].true_label = None;
        t.rows[2].correct = false;
        let text = t.to_csv();
        assert!(text.starts_with("true_label,argmax,correct,s_0,s_1\n"));
        assert_eq!(ScoreTable::from_csv(&text).unwrap(), t);
    }
}
