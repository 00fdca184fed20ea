// SPDX-License-Identifier: Apache-2.0

//! Linear search for the threshold scale `eta`.
//!
//! Decisions are made in negative Z-score space: an ID row is accepted when
//! `z < eta`, an OOD row is detected when `z > eta`. Both accuracies are step
//! functions of `eta` that only change at observed `z` values, so evaluating
//! the midpoints between adjacent distinct values (plus one point beyond
//! each end) reaches every attainable `(acc_id, acc_ood)` pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{neg_z, ClassStats, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMetric {
    TotalAccuracy,
    GMean,
}

impl SearchMetric {
    pub fn name(self) -> &'static str {
        match self {
            SearchMetric::TotalAccuracy => "total",
            SearchMetric::GMean => "gmean",
        }
    }

    /// Unchecked version of [`metric_value`].
    pub fn eval(self, acc_id: f64, acc_ood: f64) -> f64 {
        match self {
            SearchMetric::TotalAccuracy => (acc_id + acc_ood) / 2.0,
            SearchMetric::GMean => (acc_id * acc_ood).sqrt(),
        }
    }
}

impl std::str::FromStr for SearchMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" | "total_accuracy" => Ok(SearchMetric::TotalAccuracy),
            "gmean" | "g_mean" => Ok(SearchMetric::GMean),
            other => Err(Error::Value(format!(
                "unknown metric {other:?} (expected total or gmean)"
            ))),
        }
    }
}

pub fn metric_value(kind: SearchMetric, acc_id: f64, acc_ood: f64) -> Result<f64> {
    for (name, v) in [("acc_id", acc_id), ("acc_ood", acc_ood)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Value(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(kind.eval(acc_id, acc_ood))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub eta_star: f64,
    pub metric_value: f64,
    pub acc_id: f64,
    pub acc_ood: f64,
    pub n_candidates: usize,
}

/// Which `eta` values the search evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateRule {
    /// Midpoints of adjacent distinct values plus `min - 1` and `max + 1`.
    #[default]
    Midpoints,
    /// The observed values themselves. With strict inequalities on both
    /// sides this loses the point sitting exactly at `eta`; kept to show
    /// that the oracle check notices.
    Observed,
}

fn sorted_finite(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!(
            "{what} contains non-finite value {v}"
        )));
    }
    let mut out = values.to_vec();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

pub fn candidate_etas(id_z: &[f64], ood_z: &[f64]) -> Result<Vec<f64>> {
    candidates_with(id_z, ood_z, CandidateRule::Midpoints)
}

fn candidates_with(id_z: &[f64], ood_z: &[f64], rule: CandidateRule) -> Result<Vec<f64>> {
    if id_z.is_empty() && ood_z.is_empty() {
        return Err(Error::Value("no Z-scores to build candidates from".into()));
    }
    let mut pooled = sorted_finite(id_z, "id Z-scores")?;
    pooled.extend(sorted_finite(ood_z, "ood Z-scores")?);
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    if rule == CandidateRule::Observed {
        return Ok(pooled);
    }
    let mut out = Vec::with_capacity(pooled.len() + 1);
    out.push(pooled[0] - 1.0);
    out.extend(pooled.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(pooled[pooled.len() - 1] + 1.0);
    Ok(out)
}

/// `(acc_id, acc_ood)` at `eta` against pre-sorted Z-score lists.
fn accuracies(sorted_id: &[f64], sorted_ood: &[f64], eta: f64) -> (f64, f64) {
    let id_ok = sorted_id.partition_point(|&z| z < eta);
    let ood_ok = sorted_ood.len() - sorted_ood.partition_point(|&z| z <= eta);
    (
        id_ok as f64 / sorted_id.len() as f64,
        ood_ok as f64 / sorted_ood.len() as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eta: f64,
    pub acc_id: f64,
    pub acc_ood: f64,
    pub metric: f64,
}

/// Accuracies and metric at every candidate, in increasing `eta`.
pub fn accuracy_curve(
    id_z: &[f64],
    ood_z: &[f64],
    metric: SearchMetric,
) -> Result<Vec<CurvePoint>> {
    curve_with(id_z, ood_z, metric, CandidateRule::Midpoints)
}

fn curve_with(
    id_z: &[f64],
    ood_z: &[f64],
    metric: SearchMetric,
    rule: CandidateRule,
) -> Result<Vec<CurvePoint>> {
    if id_z.is_empty() {
        return Err(Error::Value(
            "no correctly classified ID rows to search over".into(),
        ));
    }
    if ood_z.is_empty() {
        return Err(Error::Value("no OOD rows to search over".into()));
    }
    let sid = sorted_finite(id_z, "id Z-scores")?;
    let sood = sorted_finite(ood_z, "ood Z-scores")?;
    Ok(candidates_with(id_z, ood_z, rule)?
        .into_iter()
        .map(|eta| {
            let (acc_id, acc_ood) = accuracies(&sid, &sood, eta);
            CurvePoint {
                eta,
                acc_id,
                acc_ood,
                metric: metric.eval(acc_id, acc_ood),
            }
        })
        .collect())
}

/// Best candidate for raw Z-score lists; ties go to the smallest `eta`.
pub fn search_z(id_z: &[f64], ood_z: &[f64], metric: SearchMetric) -> Result<SearchResult> {
    search_z_with(id_z, ood_z, metric, CandidateRule::Midpoints)
}

pub fn search_z_with(
    id_z: &[f64],
    ood_z: &[f64],
    metric: SearchMetric,
    rule: CandidateRule,
) -> Result<SearchResult> {
    let curve = curve_with(id_z, ood_z, metric, rule)?;
    let n_candidates = curve.len();
    let best = curve
        .into_iter()
        .reduce(|best, p| if p.metric > best.metric { p } else { best })
        .expect("at least one candidate");
    Ok(SearchResult {
        eta_star: best.eta,
        metric_value: best.metric,
        acc_id: best.acc_id,
        acc_ood: best.acc_ood,
        n_candidates,
    })
}

/// Z-scores entering the search: each correct ID row against its own class,
/// each OOD row against its argmax class.
pub fn search_inputs(
    id_table: &ScoreTable,
    ood_table: &ScoreTable,
    stats: &ClassStats,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let id_z = id_table
        .correct_rows()
        .map(|r| {
            let c = r.true_label.expect("correct rows are labeled");
            neg_z(stats, c, r.scores[c])
        })
        .collect::<Result<Vec<_>>>()?;
    let ood_z = ood_table
        .rows
        .iter()
        .map(|r| neg_z(stats, r.argmax, r.top_score()))
        .collect::<Result<Vec<_>>>()?;
    Ok((id_z, ood_z))
}

/// Look-ahead search: the `eta` that would have best separated the given
/// ID and OOD tables under `stats`.
pub fn cheat_search(
    id_table: &ScoreTable,
    ood_table: &ScoreTable,
    stats: &ClassStats,
    metric: SearchMetric,
) -> Result<SearchResult> {
    let (id_z, ood_z) = search_inputs(id_table, ood_table, stats)?;
    search_z(&id_z, &ood_z, metric)
}
