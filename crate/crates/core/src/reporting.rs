// SPDX-License-Identifier: Apache-2.0

//! Per-stage accuracies, seed aggregation with significance tests, and
//! CSV/JSON emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::ContinualState;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scoring::{build_score_table, Decision, ScoreTable, ThresholdPolicy};
use crate::stats::{holm_bonferroni, students_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `eta` pinned (1 reproduces the one-standard-deviation rule).
    FixedShels,
    /// Look-ahead search against the incoming OOD class.
    Cheating,
    /// Cross-validated estimate refreshed by running averages.
    Dynamic,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FixedShels, Method::Cheating, Method::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            Method::FixedShels => "fixed_shels",
            Method::Cheating => "cheating",
            Method::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_shels" | "shels" => Ok(Method::FixedShels),
            "cheating" | "cheat" => Ok(Method::Cheating),
            "dynamic" | "ours" => Ok(Method::Dynamic),
            other => Err(Error::Value(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub seed: u64,
    pub stage: usize,
    pub n_id_classes: usize,
    pub method: Method,
    pub acc_id: f64,
    pub acc_ood: f64,
    pub total: f64,
    pub gmean: f64,
    pub eta: f64,
}

impl StageReport {
    pub fn new(
        seed: u64,
        stage: usize,
        n_id_classes: usize,
        method: Method,
        acc_id: f64,
        acc_ood: f64,
        eta: f64,
    ) -> Self {
        Self {
            seed,
            stage,
            n_id_classes,
            method,
            acc_id,
            acc_ood,
            total: (acc_id + acc_ood) / 2.0,
            gmean: (acc_id * acc_ood).sqrt(),
            eta,
        }
    }
}

/// `acc_id`: fraction of labeled rows decided as their own class.
/// `acc_ood`: fraction of OOD rows rejected; 1 when there are none.
pub fn evaluate_tables(
    policy: &ThresholdPolicy,
    id_table: &ScoreTable,
    ood_table: &ScoreTable,
) -> (f64, f64) {
    let id_hits = id_table
        .rows
        .iter()
        .filter(|r| matches!(policy.decide(&r.scores), Decision::Id(c) if Some(c) == r.true_label))
        .count();
    let ood_hits = ood_table
        .rows
        .iter()
        .filter(|r| policy.decide(&r.scores).is_ood())
        .count();
    let frac = |hits: usize, n: usize, empty: f64| {
        if n == 0 {
            empty
        } else {
            hits as f64 / n as f64
        }
    };
    (
        frac(id_hits, id_table.len(), 0.0),
        frac(ood_hits, ood_table.len(), 1.0),
    )
}

/// ID accuracy on `id_test` and detection rate on `ood_eval` under the
/// state's current policy.
pub fn evaluate_stage(
    state: &ContinualState,
    id_test: &LabeledDataset,
    ood_eval: &LabeledDataset,
) -> Result<(f64, f64)> {
    let id_table = build_score_table(&state.net, id_test, false)?;
    let ood_table = build_score_table(&state.net, ood_eval, true)?;
    Ok(evaluate_tables(&state.policy, &id_table, &ood_table))
}

pub const CSV_HEADER: &str = "seed,stage,n_id_classes,method,acc_id,acc_ood,total,gmean,eta";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Value(format!("unknown format {other:?}"))),
        }
    }
}

pub fn reports_to_csv(reports: &[StageReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.seed,
            r.stage,
            r.n_id_classes,
            r.method.name(),
            r.acc_id,
            r.acc_ood,
            r.total,
            r.gmean,
            r.eta
        );
    }
    out
}

pub fn emit(reports: &[StageReport], path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        Format::Csv => reports_to_csv(reports),
        Format::Json => serde_json::to_string_pretty(reports)?,
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Orders rows by `(seed, stage, method)`.
pub fn sort_reports(reports: &mut [StageReport]) {
    reports.sort_by_key(|r| (r.seed, r.stage, r.method));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub stage: usize,
    pub n_id_classes: usize,
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Student's t against `fixed_shels` at the same stage and metric.
    pub p_unadjusted: Option<f64>,
    /// Holm-adjusted over all tests of the same method.
    pub p_adjusted: Option<f64>,
}

const AGG_METRICS: [&str; 5] = ["acc_id", "acc_ood", "total", "gmean", "eta"];

fn pick(r: &StageReport, metric: &str) -> f64 {
    match metric {
        "acc_id" => r.acc_id,
        "acc_ood" => r.acc_ood,
        "total" => r.total,
        "gmean" => r.gmean,
        _ => r.eta,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Mean and sample std over seeds per `(stage, method, metric)`.
pub fn aggregate(reports: &[StageReport]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(usize, Method), Vec<&StageReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.stage, r.method)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (&(stage, method), group) in &groups {
        for metric in AGG_METRICS {
            let values: Vec<f64> = group.iter().map(|r| pick(r, metric)).collect();
            let (mean, std) = mean_std(&values);
            let baseline = groups.get(&(stage, Method::FixedShels));
            let p_unadjusted = match baseline {
                Some(base)
                    if method != Method::FixedShels
                        && metric != "eta"
                        && base.len() >= 2
                        && values.len() >= 2 =>
                {
                    let b: Vec<f64> = base.iter().map(|r| pick(r, metric)).collect();
                    Some(students_t(&values, &b)?.p)
                }
                _ => None,
            };
            rows.push(AggregateRow {
                stage,
                n_id_classes: group[0].n_id_classes,
                method,
                metric: metric.to_string(),
                mean,
                std,
                n: values.len(),
                p_unadjusted,
                p_adjusted: None,
            });
        }
    }
    for method in Method::ALL {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].method == method && rows[i].p_unadjusted.is_some())
            .collect();
        let ps: Vec<f64> = idx
            .iter()
            .map(|&i| rows[i].p_unadjusted.expect("filtered"))
            .collect();
        for (&i, adj) in idx.iter().zip(holm_bonferroni(&ps)?) {
            rows[i].p_adjusted = Some(adj);
        }
    }
    Ok(rows)
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out =
        String::from("stage,n_id_classes,method,metric,mean,std,n,p_unadjusted,p_adjusted\n");
    let opt = |p: Option<f64>| p.map(|p| format!("{p:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{},{}",
            r.stage,
            r.n_id_classes,
            r.method.name(),
            r.metric,
            r.mean,
            r.std,
            r.n,
            opt(r.p_unadjusted),
            opt(r.p_adjusted)
        );
    }
    out
}
