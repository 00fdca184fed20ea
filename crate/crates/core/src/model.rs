// SPDX-License-Identifier: Apache-2.0

//! ReLU multilayer perceptron with a cosine-normalized output head.
//!
//! Class scores are cosines between the penultimate activations and each
//! head column, so they lie in `[-1, 1]` and are invariant to rescaling of
//! either operand. Training minimizes softmax cross-entropy over the scores
//! multiplied by [`TEMPERATURE`], plus a group-lasso penalty over the
//! incoming weights of every hidden neuron and, during accommodation, a
//! quadratic soft-freeze penalty tying weights to a reference network.
//!
//! Both penalties are applied as proximal steps after each momentum-SGD
//! update on the cross-entropy term. The quadratic prox is exact for any
//! `lambda_soft_freeze`, which keeps very stiff freezes (1e6) stable, and the
//! group prox produces exact zeros for pruned neurons.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Multiplier applied to cosine scores before the softmax.
pub const TEMPERATURE: f64 = 10.0;
/// Standard deviation of a freshly added head column.
pub const NEW_COLUMN_STD: f64 = 1e-2;
/// Finite-difference step used by [`gradient_check`] (fourth-order
/// central stencil).
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative gradient errors.
pub const GRAD_FLOOR: f64 = 1e-6;

const SCORE_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`; row `j` is the incoming-weight group of neuron `j`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub hidden: Vec<DenseLayer>,
    /// `k × C`: one column per known class.
    pub head: Array2<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_group_sparsity: f64,
    pub lambda_soft_freeze: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-2,
            momentum: 0.9,
            lambda_group_sparsity: 1e-4,
            lambda_soft_freeze: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Value("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Value("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Value(format!(
                "learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Value(format!(
                "momentum = {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.lambda_group_sparsity < 0.0 || self.lambda_soft_freeze < 0.0 {
            return Err(Error::Value("regularization strengths must be >= 0".into()));
        }
        Ok(())
    }
}

/// Regularized training objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub lambda_group: f64,
    pub lambda_freeze: f64,
    pub reference: Option<&'a NetworkState>,
}

impl<'a> Objective<'a> {
    pub fn plain() -> Self {
        Self {
            lambda_group: 0.0,
            lambda_freeze: 0.0,
            reference: None,
        }
    }

    pub fn from_config(cfg: &TrainConfig, reference: Option<&'a NetworkState>) -> Self {
        Self {
            lambda_group: cfg.lambda_group_sparsity,
            lambda_freeze: cfg.lambda_soft_freeze,
            reference,
        }
    }
}

/// Parameter-shaped container for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<DenseLayer>,
    pub head: Array2<f64>,
}

impl Gradients {
    fn zeros_like(net: &NetworkState) -> Self {
        Self {
            hidden: net
                .hidden
                .iter()
                .map(|l| DenseLayer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            head: Array2::zeros(net.head.raw_dim()),
        }
    }
}

struct Trace {
    /// `activations[0]` is the input, the last entry the feature matrix.
    activations: Vec<Array2<f64>>,
    feat_norm: Array1<f64>,
    feat_hat: Array2<f64>,
    col_norm: Array1<f64>,
    head_hat: Array2<f64>,
    scores: Array2<f64>,
}

fn normalize_rows(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut hat = m.clone();
    for (mut row, &n) in hat.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (norms, hat)
}

fn normalize_cols(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (norms, hat_t) = normalize_rows(&m.t().to_owned());
    (norms, hat_t.reversed_axes())
}

/// `(grad_hat - (grad_hat·hat) hat) / norm`, row by row; zero where `norm = 0`.
fn unnormalize_grad_rows(
    grad_hat: &Array2<f64>,
    hat: &Array2<f64>,
    norms: &Array1<f64>,
) -> Array2<f64> {
    let mut out = grad_hat.clone();
    Zip::from(out.rows_mut())
        .and(hat.rows())
        .and(norms)
        .for_each(|mut g, h, &n| {
            if n > 0.0 {
                let proj = g.dot(&h);
                g.scaled_add(-proj, &h);
                g /= n;
            } else {
                g.fill(0.0);
            }
        });
    out
}

fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = scores.nrows();
    let mut loss = 0.0;
    let mut d_scores = Array2::zeros(scores.raw_dim());
    for ((row, mut d), &y) in scores
        .rows()
        .into_iter()
        .zip(d_scores.rows_mut())
        .zip(labels)
    {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(TEMPERATURE * v));
        let sum: f64 = row.iter().map(|&v| (TEMPERATURE * v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - TEMPERATURE * row[y];
        for (j, (dj, &v)) in d.iter_mut().zip(row).enumerate() {
            let p = (TEMPERATURE * v - log_z).exp();
            *dj = TEMPERATURE * (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, d_scores)
}

impl NetworkState {
    /// He-initialized ReLU layers; head columns drawn with std `1/sqrt(k)`.
    pub fn new(
        input_dim: usize,
        hidden_sizes: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
            return Err(Error::Value(
                "need at least one hidden layer, all widths >= 1".into(),
            ));
        }
        if input_dim == 0 || n_classes == 0 {
            return Err(Error::Value("input_dim and n_classes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = input_dim;
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        for &width in hidden_sizes {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            hidden.push(DenseLayer {
                weights: Array2::from_shape_simple_fn((width, fan_in), || dist.sample(&mut rng)),
                bias: Array1::zeros(width),
            });
            fan_in = width;
        }
        let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
        let head = Array2::from_shape_simple_fn((fan_in, n_classes), || dist.sample(&mut rng));
        Ok(Self { hidden, head, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].weights.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.head.ncols()
    }

    fn trace(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.hidden.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.hidden {
            let prev = activations.last().expect("input pushed");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
        let (feat_norm, feat_hat) = normalize_rows(activations.last().expect("features"));
        let (col_norm, head_hat) = normalize_cols(&self.head);
        let scores = feat_hat.dot(&head_hat);
        Ok(Trace {
            activations,
            feat_norm,
            feat_hat,
            col_norm,
            head_hat,
            scores,
        })
    }

    /// Penultimate activations and cosine scores for one sample.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let (f, s) = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok((f.row(0).to_owned(), s.row(0).to_owned()))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut t = self.trace(x)?;
        let features = t.activations.pop().expect("features");
        Ok((features, t.scores))
    }

    /// Score matrix (`n × C`) for every sample of `ds`.
    pub fn score_dataset(&self, ds: &LabeledDataset) -> Result<Array2<f64>> {
        if ds.dim() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: ds.dim(),
            });
        }
        let mut out = Array2::zeros((ds.len(), self.n_classes()));
        let idx: Vec<usize> = (0..ds.len()).collect();
        for (chunk_no, chunk) in idx.chunks(SCORE_CHUNK).enumerate() {
            let (_, s) = self.forward_batch(ds.batch_f64(chunk).view())?;
            let start = chunk_no * SCORE_CHUNK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(&s);
        }
        Ok(out)
    }

    /// Fraction of samples whose argmax score equals the label.
    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let scores = self.score_dataset(ds)?;
        let hits = scores
            .rows()
            .into_iter()
            .zip(ds.labels())
            .filter(|(row, &l)| {
                crate::scoring::argmax(row.as_slice().expect("standard layout")) == l
            })
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    /// Appends a head column drawn from `N(0, NEW_COLUMN_STD²)`.
    pub fn add_class(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, NEW_COLUMN_STD).expect("positive std");
        let col = Array1::from_shape_simple_fn(self.feature_dim(), || dist.sample(&mut rng));
        self.head
            .push_column(col.view())
            .expect("column length equals feature dim");
    }

    /// Largest absolute difference over parameters present in both networks
    /// (head columns beyond the shorter head are ignored).
    pub fn max_abs_diff(&self, other: &NetworkState) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.hidden.iter().zip(&other.hidden) {
            Zip::from(&a.weights)
                .and(&b.weights)
                .for_each(|x, y| m = m.max((x - y).abs()));
            Zip::from(&a.bias)
                .and(&b.bias)
                .for_each(|x, y| m = m.max((x - y).abs()));
        }
        m.max(self.head_diff(other))
    }

    pub fn head_diff(&self, other: &NetworkState) -> f64 {
        let c = self.n_classes().min(other.n_classes());
        let a = self.head.slice(ndarray::s![.., ..c]);
        let b = other.head.slice(ndarray::s![.., ..c]);
        let mut m: f64 = 0.0;
        Zip::from(&a)
            .and(&b)
            .for_each(|x, y| m = m.max((x - y).abs()));
        m
    }

    /// Number of hidden neurons per layer whose incoming-weight norm is below `tol`.
    pub fn dead_groups(&self, tol: f64) -> usize {
        self.hidden
            .iter()
            .map(|l| {
                l.weights
                    .rows()
                    .into_iter()
                    .filter(|r| r.dot(r).sqrt() < tol)
                    .count()
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.head.len()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.n_classes()) {
            Some(&l) => Err(Error::Value(format!(
                "label {l} outside the {} classes of the network",
                self.n_classes()
            ))),
            None => Ok(()),
        }
    }

    fn check_reference(&self, reference: &NetworkState) -> Result<()> {
        let same_hidden = self.hidden.len() == reference.hidden.len()
            && self
                .hidden
                .iter()
                .zip(&reference.hidden)
                .all(|(a, b)| a.weights.dim() == b.weights.dim());
        if !same_hidden
            || reference.n_classes() > self.n_classes()
            || reference.feature_dim() != self.feature_dim()
        {
            return Err(Error::Value(
                "soft-freeze reference has incompatible shape".into(),
            ));
        }
        Ok(())
    }
}

/// Mean cross-entropy and its gradient.
fn data_loss_and_grad(
    net: &NetworkState,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    let t = net.trace(x)?;
    let (loss, d_scores) = cross_entropy(&t.scores, labels);

    let d_feat_hat = d_scores.dot(&t.head_hat.t());
    let d_head_hat = t.feat_hat.t().dot(&d_scores);
    let mut grads = Gradients::zeros_like(net);
    grads.head = unnormalize_grad_rows(
        &d_head_hat.reversed_axes(),
        &t.head_hat.t().to_owned(),
        &t.col_norm,
    )
    .reversed_axes();

    let mut d_act = unnormalize_grad_rows(&d_feat_hat, &t.feat_hat, &t.feat_norm);
    for (l, layer) in net.hidden.iter().enumerate().rev() {
        let out = &t.activations[l + 1];
        Zip::from(&mut d_act).and(out).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        grads.hidden[l].weights = d_act.t().dot(&t.activations[l]);
        grads.hidden[l].bias = d_act.sum_axis(Axis(0));
        if l > 0 {
            d_act = d_act.dot(&layer.weights);
        }
    }
    Ok((loss, grads))
}

fn group_penalty(net: &NetworkState) -> f64 {
    net.hidden
        .iter()
        .flat_map(|l| l.weights.rows().into_iter().map(|r| r.dot(&r).sqrt()))
        .sum()
}

fn freeze_penalty(net: &NetworkState, reference: &NetworkState) -> f64 {
    let sq = |a: &f64, b: &f64| (a - b) * (a - b);
    let mut total = 0.0;
    for (a, b) in net.hidden.iter().zip(&reference.hidden) {
        Zip::from(&a.weights)
            .and(&b.weights)
            .for_each(|x, y| total += sq(x, y));
        Zip::from(&a.bias)
            .and(&b.bias)
            .for_each(|x, y| total += sq(x, y));
    }
    let c = reference.n_classes();
    Zip::from(&net.head.slice(ndarray::s![.., ..c]))
        .and(&reference.head)
        .for_each(|x, y| total += sq(x, y));
    total
}

/// Full objective value: cross-entropy plus both penalties.
pub fn objective_value(
    net: &NetworkState,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    obj: &Objective<'_>,
) -> Result<f64> {
    net.check_labels(labels)?;
    let t = net.trace(x)?;
    let (mut loss, _) = cross_entropy(&t.scores, labels);
    loss += obj.lambda_group * group_penalty(net);
    if let Some(r) = obj.reference {
        loss += obj.lambda_freeze * freeze_penalty(net, r);
    }
    Ok(loss)
}

/// Analytic gradient of [`objective_value`]. The group norm uses the
/// subgradient 0 at the origin.
pub fn loss_and_grad(
    net: &NetworkState,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    obj: &Objective<'_>,
) -> Result<(f64, Gradients)> {
    net.check_labels(labels)?;
    let (mut loss, mut grads) = data_loss_and_grad(net, x, labels)?;
    if obj.lambda_group > 0.0 {
        loss += obj.lambda_group * group_penalty(net);
        for (g, layer) in grads.hidden.iter_mut().zip(&net.hidden) {
            Zip::from(g.weights.rows_mut())
                .and(layer.weights.rows())
                .for_each(|mut gr, wr| {
                    let n = wr.dot(&wr).sqrt();
                    if n > 0.0 {
                        gr.scaled_add(obj.lambda_group / n, &wr);
                    }
                });
        }
    }
    if let Some(r) = obj.reference {
        net.check_reference(r)?;
        let lam = obj.lambda_freeze;
        loss += lam * freeze_penalty(net, r);
        for ((g, a), b) in grads.hidden.iter_mut().zip(&net.hidden).zip(&r.hidden) {
            Zip::from(&mut g.weights)
                .and(&a.weights)
                .and(&b.weights)
                .for_each(|g, x, y| *g += 2.0 * lam * (x - y));
            Zip::from(&mut g.bias)
                .and(&a.bias)
                .and(&b.bias)
                .for_each(|g, x, y| *g += 2.0 * lam * (x - y));
        }
        let c = r.n_classes();
        Zip::from(&mut grads.head.slice_mut(ndarray::s![.., ..c]))
            .and(&net.head.slice(ndarray::s![.., ..c]))
            .and(&r.head)
            .for_each(|g, x, y| *g += 2.0 * lam * (x - y));
    }
    Ok((loss, grads))
}

/// One proximal momentum-SGD step. `velocity` accumulates cross-entropy
/// gradients only; both penalties enter through their proximal maps.
pub fn sgd_step(
    net: &mut NetworkState,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    obj: &Objective<'_>,
) {
    let update = |p: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>| {
        Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
            *v = momentum * *v + g;
            *p -= lr * *v;
        });
    };
    for ((layer, v), g) in net
        .hidden
        .iter_mut()
        .zip(&mut velocity.hidden)
        .zip(&grads.hidden)
    {
        update(&mut layer.weights, &mut v.weights, &g.weights);
        Zip::from(&mut layer.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, v, &g| {
                *v = momentum * *v + g;
                *p -= lr * *v;
            });
    }
    update(&mut net.head, &mut velocity.head, &grads.head);

    if let Some(r) = obj.reference {
        let a = 2.0 * lr * obj.lambda_freeze;
        if a > 0.0 {
            let shrink = |p: &mut f64, &q: &f64| *p = (*p + a * q) / (1.0 + a);
            for (layer, rl) in net.hidden.iter_mut().zip(&r.hidden) {
                Zip::from(&mut layer.weights)
                    .and(&rl.weights)
                    .for_each(shrink);
                Zip::from(&mut layer.bias).and(&rl.bias).for_each(shrink);
            }
            let c = r.n_classes();
            Zip::from(&mut net.head.slice_mut(ndarray::s![.., ..c]))
                .and(&r.head)
                .for_each(shrink);
        }
    }

    let tau = lr * obj.lambda_group;
    if tau > 0.0 {
        for layer in &mut net.hidden {
            for mut row in layer.weights.rows_mut() {
                let n = row.dot(&row).sqrt();
                let factor = if n > tau { 1.0 - tau / n } else { 0.0 };
                row *= factor;
            }
        }
    }
}

/// Trains in place and returns the mean training objective of every epoch.
pub fn fit(
    net: &mut NetworkState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    frozen_reference: Option<&NetworkState>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    net.check_labels(ds.labels())?;
    if ds.dim() != net.input_dim() {
        return Err(Error::Shape {
            expected: net.input_dim(),
            got: ds.dim(),
        });
    }
    if let Some(r) = frozen_reference {
        net.check_reference(r)?;
    }
    if ds.is_empty() {
        return Err(Error::Value("cannot train on an empty dataset".into()));
    }
    let obj = Objective::from_config(cfg, frozen_reference);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut velocity = Gradients::zeros_like(net);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = ds.batch_f64(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
            let (loss, grads) = data_loss_and_grad(net, x.view(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * batch.len() as f64;
            sgd_step(
                net,
                &grads,
                &mut velocity,
                cfg.learning_rate,
                cfg.momentum,
                &obj,
            );
        }
        let mut epoch_loss = total / ds.len() as f64 + obj.lambda_group * group_penalty(net);
        if let Some(r) = frozen_reference {
            epoch_loss += obj.lambda_freeze * freeze_penalty(net, r);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(epoch_loss);
    }
    Ok(history)
}

pub fn train(
    net: &NetworkState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    frozen_reference: Option<&NetworkState>,
) -> Result<NetworkState> {
    let mut out = net.clone();
    fit(&mut out, ds, cfg, frozen_reference)?;
    Ok(out)
}

/// Adds a head column for the class carried by `new_class_ds` and trains on
/// it with soft-freeze against the pre-accommodation network.
pub fn accommodate_class(
    net: &NetworkState,
    new_class_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<NetworkState> {
    let expected = net.n_classes();
    if new_class_ds.is_empty() {
        return Err(Error::Value("new class dataset is empty".into()));
    }
    if let Some(&l) = new_class_ds.labels().iter().find(|&&l| l != expected) {
        return Err(Error::Value(format!(
            "new class must be labeled {expected}, found {l}"
        )));
    }
    let reference = net.clone();
    let mut grown = net.clone();
    grown.add_class(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    fit(&mut grown, new_class_ds, cfg, Some(&reference))?;
    Ok(grown)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter group, max relative error)` per layer and the head.
    pub per_group: Vec<(String, f64)>,
}

#[derive(Clone, Copy)]
enum Param {
    Weight(usize, usize, usize),
    Bias(usize, usize),
    Head(usize, usize),
}

impl Param {
    fn get(self, net: &mut NetworkState) -> &mut f64 {
        match self {
            Param::Weight(l, i, j) => &mut net.hidden[l].weights[[i, j]],
            Param::Bias(l, i) => &mut net.hidden[l].bias[i],
            Param::Head(i, j) => &mut net.head[[i, j]],
        }
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Compares [`loss_and_grad`] with central finite differences of
/// [`objective_value`] over every parameter. `net` is restored before return.
pub fn gradient_check(
    net: &mut NetworkState,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    obj: &Objective<'_>,
) -> Result<GradCheck> {
    if labels.is_empty() || x.nrows() != labels.len() {
        return Err(Error::Value(
            "gradient check needs a nonempty, labeled batch".into(),
        ));
    }
    let (_, grads) = loss_and_grad(net, x, labels, obj)?;
    let mut per_group = Vec::new();

    let probe = |net: &mut NetworkState, at: Param| -> Result<f64> {
        let orig = *at.get(net);
        let mut at_offset = |k: f64| -> Result<f64> {
            *at.get(net) = orig + k * FD_STEP;
            objective_value(net, x, labels, obj)
        };
        let (m2, m1, p1, p2) = (
            at_offset(-2.0)?,
            at_offset(-1.0)?,
            at_offset(1.0)?,
            at_offset(2.0)?,
        );
        *at.get(net) = orig;
        Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * FD_STEP))
    };

    for l in 0..net.hidden.len() {
        let mut worst: f64 = 0.0;
        let (rows, cols) = net.hidden[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let n = probe(net, Param::Weight(l, i, j))?;
                worst = worst.max(rel_error(grads.hidden[l].weights[[i, j]], n));
            }
            let n = probe(net, Param::Bias(l, i))?;
            worst = worst.max(rel_error(grads.hidden[l].bias[i], n));
        }
        per_group.push((format!("hidden[{l}]"), worst));
    }
    let mut worst: f64 = 0.0;
    let (rows, cols) = net.head.dim();
    for i in 0..rows {
        for j in 0..cols {
            let n = probe(net, Param::Head(i, j))?;
            worst = worst.max(rel_error(grads.head[[i, j]], n));
        }
    }
    per_group.push(("head".to_string(), worst));

    let max_rel_error = per_group.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use ndarray::array;

    fn small_net(seed: u64) -> NetworkState {
        let mut net = NetworkState::new(4, &[6, 5], 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let dist = Normal::new(0.0, 0.1).unwrap();
        for l in &mut net.hidden {
            l.bias.mapv_inplace(|_| dist.sample(&mut rng));
        }
        net
    }

    fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_simple_fn((n, dim), || dist.sample(&mut rng));
        let y = (0..n).map(|i| i % classes).collect();
        (x, y)
    }

    #[test]
    fn cosine_score_cases() {
        let mut net = NetworkState::new(2, &[2], 2, 0).unwrap();
        net.hidden[0].weights = Array2::eye(2);
        net.hidden[0].bias = Array1::zeros(2);
        net.head = array![[3.0, 0.0], [4.0, 1.0]];
        let (f, s) = net.forward(array![3.0, 4.0].view()).unwrap();
        assert_eq!(f, array![3.0, 4.0]);
        assert!((s[0] - 1.0).abs() < 1e-12);

        net.head = array![[0.0, 1.0], [0.0, 0.0]];
        net.head[[0, 0]] = -4.0;
        net.head[[1, 0]] = 3.0;
        let (_, s) = net.forward(array![3.0, 4.0].view()).unwrap();
        assert!(s[0].abs() < 1e-12);

        let (_, s) = net.forward(array![0.0, 0.0].view()).unwrap();
        assert_eq!(s, array![0.0, 0.0]);

        assert!(matches!(
            net.forward(array![1.0].view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn scores_bounded_and_scale_invariant() {
        let net = small_net(3);
        let (x, _) = random_batch(20, 4, 3, 9);
        let (_, s) = net.forward_batch(x.view()).unwrap();
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(s.ncols(), 3);

        let mut scaled = net.clone();
        scaled.head.column_mut(1).mapv_inplace(|v| 7.0 * v);
        let (_, s2) = scaled.forward_batch(x.view()).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = small_net(1);
        let (x, y) = random_batch(8, 4, 3, 2);
        let reference = {
            let mut r = small_net(1);
            r.head.mapv_inplace(|v| v * 0.9);
            r
        };
        let obj = Objective {
            lambda_group: 1e-2,
            lambda_freeze: 0.5,
            reference: Some(&reference),
        };
        let before = net.clone();
        let check = gradient_check(&mut net, x.view(), &y, &obj).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        assert_eq!(net, before);

        // single sample, plain cross-entropy
        let check = gradient_check(
            &mut net,
            x.slice(ndarray::s![..1, ..]),
            &y[..1],
            &Objective::plain(),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let mut net = small_net(5);
        let (x, y) = random_batch(4, 4, 3, 6);
        let reference = net.clone();
        let obj = Objective {
            lambda_group: 1.0,
            lambda_freeze: 1.0,
            reference: Some(&reference),
        };
        let (_, g) = loss_and_grad(&net, x.view(), &y, &obj).unwrap();
        let mut v = Gradients::zeros_like(&net);
        let before = net.clone();
        sgd_step(&mut net, &g, &mut v, 0.0, 0.9, &obj);
        assert_eq!(net, before);
    }

    fn separable() -> LabeledDataset {
        let spec = SyntheticSpec {
            n_classes: 2,
            dim: 2,
            cluster_means: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            cluster_std: 0.05,
            samples_per_class: 100,
            seed: 4,
        };
        make_synthetic(&spec).unwrap().0
    }

    #[test]
    fn training_separates_clusters() {
        let ds = separable();
        let cfg = TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        };
        let net = NetworkState::new(2, &[16, 8], 2, 1).unwrap();
        let trained = train(&net, &ds, &cfg, None).unwrap();
        assert!(trained.accuracy(&ds).unwrap() >= 0.99);

        let again = train(&net, &ds, &cfg, None).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn first_epoch_lowers_loss() {
        let ds = separable();
        let cfg = TrainConfig {
            epochs: 1,
            lambda_group_sparsity: 0.0,
            lambda_soft_freeze: 0.0,
            ..TrainConfig::default()
        };
        let net = NetworkState::new(2, &[16, 8], 2, 2).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let x = ds.batch_f64(&idx);
        let before = objective_value(&net, x.view(), ds.labels(), &Objective::plain()).unwrap();
        let trained = train(&net, &ds, &cfg, None).unwrap();
        let after = objective_value(&trained, x.view(), ds.labels(), &Objective::plain()).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn stiff_freeze_pins_weights() {
        let ds = separable();
        let net = NetworkState::new(2, &[16, 8], 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lambda_soft_freeze: 1e6,
            ..TrainConfig::default()
        };
        let trained = train(&net, &ds, &cfg, Some(&net)).unwrap();
        assert!(trained.max_abs_diff(&net) < 1e-3);
    }

    #[test]
    fn accommodation_grows_head() {
        let ds = separable();
        let cfg = TrainConfig {
            epochs: 2,
            lambda_soft_freeze: 1e6,
            ..TrainConfig::default()
        };
        let net = NetworkState::new(2, &[16, 8], 2, 3).unwrap();
        let new_class = ds.select(&[0, 1, 2, 3]).with_label(2, 3).unwrap();
        let grown = accommodate_class(&net, &new_class, &cfg).unwrap();
        assert_eq!(grown.n_classes(), 3);
        assert!(grown.head_diff(&net) < 1e-3);

        let wrong = ds.select(&[0]).with_label(5, 6).unwrap();
        assert!(matches!(
            accommodate_class(&net, &wrong, &cfg),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let ds = separable().with_label(4, 5).unwrap();
        let net = NetworkState::new(2, &[4], 2, 0).unwrap();
        assert!(matches!(
            train(&net, &ds, &TrainConfig::default(), None),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn json_checkpoint_round_trips() {
        let net = small_net(8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.json");
        net.save_json(&p).unwrap();
        assert_eq!(NetworkState::load_json(&p).unwrap(), net);
    }
}
