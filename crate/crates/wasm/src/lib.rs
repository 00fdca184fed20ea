// SPDX-License-Identifier: Apache-2.0

//! Browser bindings for a small two-dimensional demo.
//!
//! [`Demo`] trains a cosine-head classifier on three Gaussian clusters in
//! the plane and keeps a fourth cluster aside as the novel class. The page
//! draws the accept/reject regions for a chosen `eta`, the ID/OOD accuracy
//! curve over `eta`, and adjusts p-values with Holm's method.

use contood::data::{make_synthetic, subset_classes, LabeledDataset, SyntheticSpec};
use contood::model::{fit, NetworkState, TrainConfig};
use contood::scoring::{build_score_table, fit_class_stats, Decision, ThresholdPolicy};
use contood::search::{accuracy_curve, search_inputs, search_z, SearchMetric};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

/// Half-width of the square the page draws.
pub const EXTENT: f64 = 6.0;

const MEANS: [[f64; 2]; 4] = [[-2.5, 2.0], [2.5, 2.0], [0.0, -2.5], [3.5, -3.5]];
const ID_CLASSES: [usize; 3] = [0, 1, 2];
const NOVEL: usize = 3;

#[wasm_bindgen]
pub struct Demo {
    net: NetworkState,
    policy: ThresholdPolicy,
    train: LabeledDataset,
    novel: LabeledDataset,
}

impl Demo {
    pub fn train(seed: u64, spread: f64) -> contood::Result<Demo> {
        let spec = SyntheticSpec {
            n_classes: MEANS.len(),
            dim: 2,
            cluster_means: MEANS.iter().map(|m| m.to_vec()).collect(),
            cluster_std: spread,
            samples_per_class: 150,
            seed,
        };
        let (all, _) = make_synthetic(&spec)?;
        let train = subset_classes(&all, &ID_CLASSES, true)?;
        let novel = subset_classes(&all, &[NOVEL], false)?;
        let mut net = NetworkState::new(2, &[32], ID_CLASSES.len(), seed)?;
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        fit(&mut net, &train, &cfg, None)?;
        let stats = fit_class_stats(&build_score_table(&net, &train, false)?)?;
        Ok(Demo {
            net,
            policy: ThresholdPolicy::new(1.0, stats),
            train,
            novel,
        })
    }

    fn z_lists(&self) -> contood::Result<(Vec<f64>, Vec<f64>)> {
        let id_table = build_score_table(&self.net, &self.train, false)?;
        let ood_table = build_score_table(&self.net, &self.novel, true)?;
        search_inputs(&id_table, &ood_table, &self.policy.stats)
    }

    /// Decision per cell of a `res × res` grid over the drawn square, row
    /// by row from the top: the accepted class, or -1 for rejected.
    pub fn field(&self, eta: f64, res: usize) -> contood::Result<Vec<i32>> {
        let step = 2.0 * EXTENT / res as f64;
        let grid = Array2::from_shape_fn((res * res, 2), |(i, k)| {
            let (row, col) = (i / res, i % res);
            if k == 0 {
                -EXTENT + (col as f64 + 0.5) * step
            } else {
                EXTENT - (row as f64 + 0.5) * step
            }
        });
        let (_, scores) = self.net.forward_batch(grid.view())?;
        let policy = ThresholdPolicy::new(eta, self.policy.stats.clone());
        Ok(scores
            .rows()
            .into_iter()
            .map(
                |s| match policy.decide(s.as_slice().expect("contiguous rows")) {
                    Decision::Id(c) => c as i32,
                    Decision::Ood => -1,
                },
            )
            .collect())
    }

    /// `[eta, acc_id, acc_ood, gmean]` per candidate, flattened.
    pub fn curve(&self) -> contood::Result<Vec<f64>> {
        let (id_z, ood_z) = self.z_lists()?;
        Ok(accuracy_curve(&id_z, &ood_z, SearchMetric::GMean)?
            .into_iter()
            .flat_map(|p| [p.eta, p.acc_id, p.acc_ood, p.metric])
            .collect())
    }

    pub fn best(&self) -> contood::Result<f64> {
        let (id_z, ood_z) = self.z_lists()?;
        Ok(search_z(&id_z, &ood_z, SearchMetric::GMean)?.eta_star)
    }
}

fn js_err(e: contood::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, spread: f64) -> Result<Demo, JsError> {
        Demo::train(u64::from(seed), spread).map_err(js_err)
    }

    #[wasm_bindgen(js_name = decisionField)]
    pub fn decision_field(&self, eta: f64, res: usize) -> Result<Vec<i32>, JsError> {
        self.field(eta, res).map_err(js_err)
    }

    #[wasm_bindgen(js_name = thresholdCurve)]
    pub fn threshold_curve(&self) -> Result<Vec<f64>, JsError> {
        self.curve().map_err(js_err)
    }

    #[wasm_bindgen(js_name = bestEta)]
    pub fn best_eta(&self) -> Result<f64, JsError> {
        self.best().map_err(js_err)
    }

    /// `[x, y, label]` per sample; the novel class is labeled 3.
    pub fn points(&self) -> Vec<f64> {
        let labeled = |ds: &LabeledDataset, fixed: Option<usize>| -> Vec<f64> {
            let x = ds.to_f64();
            x.rows()
                .into_iter()
                .zip(ds.labels())
                .flat_map(|(r, &l)| [r[0], r[1], fixed.unwrap_or(l) as f64])
                .collect()
        };
        let mut out = labeled(&self.train, None);
        out.extend(labeled(&self.novel, Some(NOVEL)));
        out
    }

    pub fn extent() -> f64 {
        EXTENT
    }
}

/// Holm step-down adjustment; NaN marks invalid input.
#[wasm_bindgen(js_name = holmBonferroni)]
pub fn holm_bonferroni(p_values: Vec<f64>) -> Vec<f64> {
    contood::stats::holm_bonferroni(&p_values).unwrap_or_else(|_| vec![f64::NAN; p_values.len()])
}
