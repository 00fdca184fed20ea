// SPDX-License-Identifier: Apache-2.0

//! Independent checks for the threshold search.
//!
//! [`dense_grid_max`] sweeps an evenly spaced grid of `eta` values and counts
//! accepted/rejected rows with a two-pointer merge; it shares no code with
//! the candidate construction in [`crate::search`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::error::Result;
use crate::model::NetworkState;
use crate::scoring::{fit_class_stats, ClassStats, ScoreRow, ScoreTable};
use crate::search::{search_inputs, search_z_with, CandidateRule, SearchMetric};

pub const DENSE_GRID_POINTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMax {
    pub metric: f64,
    pub eta: f64,
}

/// Maximum of `metric` over `points` evenly spaced `eta` values spanning
/// `[min z - 1, max z + 1]`.
pub fn dense_grid_max(id_z: &[f64], ood_z: &[f64], metric: SearchMetric, points: usize) -> GridMax {
    let mut id = id_z.to_vec();
    let mut ood = ood_z.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    let lo = id[0].min(ood[0]) - 1.0;
    let hi = id[id.len() - 1].max(ood[ood.len() - 1]) + 1.0;

    let (mut below_id, mut at_or_below_ood) = (0usize, 0usize);
    let mut best = GridMax {
        metric: f64::NEG_INFINITY,
        eta: lo,
    };
    for i in 0..points {
        let eta = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        while below_id < id.len() && id[below_id] < eta {
            below_id += 1;
        }
        while at_or_below_ood < ood.len() && ood[at_or_below_ood] <= eta {
            at_or_below_ood += 1;
        }
        let acc_id = below_id as f64 / id.len() as f64;
        let acc_ood = (ood.len() - at_or_below_ood) as f64 / ood.len() as f64;
        let m = metric.eval(acc_id, acc_ood);
        if m > best.metric {
            best = GridMax { metric: m, eta };
        }
    }
    best
}

/// A random ID/OOD score-table pair with stats fitted on the ID table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomCase {
    pub id_table: ScoreTable,
    pub ood_table: ScoreTable,
    pub stats: ClassStats,
}

/// Draws a case with `n_classes` classes and `n_id + n_ood` rows. ID rows
/// score high on their own class (most are classified correctly); OOD rows
/// score moderately on every class. Redraws until every class has two
/// correct rows with nonzero spread.
pub fn random_case(
    rng: &mut ChaCha8Rng,
    n_classes: usize,
    n_id: usize,
    n_ood: usize,
) -> RandomCase {
    loop {
        let spread: f64 = rng.random_range(0.05..0.3);
        let id_rows = (0..n_id)
            .map(|i| {
                let label = i % n_classes;
                let scores = (0..n_classes)
                    .map(|c| {
                        if c == label {
                            rng.random_range(0.5..1.0) - spread * rng.random::<f64>()
                        } else {
                            rng.random_range(-0.5..0.6)
                        }
                    })
                    .collect();
                ScoreRow::new(Some(label), scores)
            })
            .collect();
        let id_table = ScoreTable {
            n_classes,
            rows: id_rows,
        };
        let Ok(stats) = fit_class_stats(&id_table) else {
            continue;
        };
        if stats.sigma.contains(&0.0) {
            continue;
        }
        let ood_rows = (0..n_ood)
            .map(|_| {
                ScoreRow::new(
                    None,
                    (0..n_classes)
                        .map(|_| rng.random_range(-0.3..0.85))
                        .collect(),
                )
            })
            .collect();
        return RandomCase {
            id_table,
            ood_table: ScoreTable {
                n_classes,
                rows: ood_rows,
            },
            stats,
        };
    }
}

/// `count` cases with 2–6 classes and at most `max_rows` rows in total.
pub fn random_cases(seed: u64, count: usize, max_rows: usize) -> Vec<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n_classes = rng.random_range(2..=6);
            let n_ood = rng.random_range(1..=max_rows / 4);
            let n_id = rng.random_range(2 * n_classes..=max_rows - n_ood);
            random_case(&mut rng, n_classes, n_id, n_ood)
        })
        .collect()
}

/// A small network, its soft-freeze reference, and a labeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub net: NetworkState,
    pub reference: NetworkState,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Smallest `|pre-activation|` over every hidden unit and sample, and
/// whether every sample keeps a nonzero feature vector.
fn kink_margin(net: &NetworkState, x: &Array2<f64>) -> (f64, bool) {
    let mut a = x.clone();
    let mut margin = f64::INFINITY;
    for layer in &net.hidden {
        let z = a.dot(&layer.weights.t()) + &layer.bias;
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.mapv(|v| v.max(0.0));
    }
    let alive = a.rows().into_iter().all(|r| r.iter().any(|&v| v > 0.0));
    (margin, alive)
}

/// Draws a gradient-check case: 3–6 inputs, 1–3 hidden layers of width 3–7
/// (or `hidden`), 2–4 classes, 2–6 samples. Redraws until every ReLU input
/// is at least `1e-3` from its kink and no sample has all-zero features, so
/// the objective is smooth across the finite-difference stencil.
pub fn random_grad_case(rng: &mut ChaCha8Rng, hidden: Option<&[usize]>) -> Result<GradCase> {
    loop {
        let input = rng.random_range(3..=6);
        let widths: Vec<usize> = match hidden {
            Some(h) => h.to_vec(),
            None => (0..rng.random_range(1..=3))
                .map(|_| rng.random_range(3..=7))
                .collect(),
        };
        let classes = rng.random_range(2..=4);
        let seed: u64 = rng.random();
        let reference = NetworkState::new(input, &widths, classes, seed)?;
        let mut net = NetworkState::new(input, &widths, classes, seed.wrapping_add(1))?;
        for layer in &mut net.hidden {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        let batch = rng.random_range(2..=6);
        let x = Array2::from_shape_fn((batch, input), |_| rng.random_range(-1.0..1.0));
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let (margin, alive) = kink_margin(&net, &x);
        if margin >= 1e-3 && alive {
            return Ok(GradCase {
                net,
                reference,
                x,
                labels,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMismatch {
    pub index: usize,
    pub metric: SearchMetric,
    pub search_metric: f64,
    pub grid_metric: f64,
    pub id_z: Vec<f64>,
    pub ood_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchCheck {
    pub checked: usize,
    pub mismatches: Vec<CaseMismatch>,
}

/// Compares the search optimum with the dense-grid maximum for each case
/// and metric. Mismatch means `|search - grid| > tol`.
pub fn check_search(cases: &[RandomCase], rule: CandidateRule, tol: f64) -> Result<SearchCheck> {
    let mut out = SearchCheck::default();
    for (index, case) in cases.iter().enumerate() {
        let (id_z, ood_z) = search_inputs(&case.id_table, &case.ood_table, &case.stats)?;
        for metric in [SearchMetric::TotalAccuracy, SearchMetric::GMean] {
            let found = search_z_with(&id_z, &ood_z, metric, rule)?;
            let grid = dense_grid_max(&id_z, &ood_z, metric, DENSE_GRID_POINTS);
            out.checked += 1;
            if (found.metric_value - grid.metric).abs() > tol {
                out.mismatches.push(CaseMismatch {
                    index,
                    metric,
                    search_metric: found.metric_value,
                    grid_metric: grid.metric,
                    id_z: id_z.clone(),
                    ood_z: ood_z.clone(),
                });
            }
        }
    }
    Ok(out)
}
