// SPDX-License-Identifier: Apache-2.0

//! The continual protocol: leave-one-class-out estimation of `eta`, batch
//! novelty detection, look-ahead re-estimation with a running average,
//! class accommodation, and recomputation of every class's score statistics.
//!
//! One network trajectory serves all methods: each stage is evaluated under
//! the fixed, look-ahead and running-average `eta` before the novel class is
//! accommodated, so methods differ only in the threshold scale they use.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{choose_classes, subset_classes, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{accommodate_class, fit, NetworkState, TrainConfig};
use crate::reporting::{evaluate_tables, Method, StageReport};
use crate::scoring::{build_score_table, class_stat, fit_class_stats, ClassStats, ThresholdPolicy};
use crate::search::{cheat_search, SearchMetric, SearchResult};

/// How a new look-ahead estimate is folded into the running `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `running = (running + new) / 2`
    #[default]
    Pairwise,
    /// Mean of the initial estimate and every look-ahead estimate so far.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub metric: SearchMetric,
    /// Size of the detection batch drawn from each incoming class.
    pub batch_size: usize,
    /// A batch is flagged when at least this fraction of it is rejected.
    pub rho: f64,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub averaging: Averaging,
    pub fixed_eta: f64,
    pub methods: Vec<Method>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            metric: SearchMetric::GMean,
            batch_size: 32,
            rho: 0.5,
            train: TrainConfig::default(),
            hidden: vec![400, 128],
            seed: 0,
            averaging: Averaging::Pairwise,
            fixed_eta: 1.0,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Value(format!(
                "rho = {} must be in (0, 1]",
                self.rho
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Value("detection batch_size must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Value("no methods selected".into()));
        }
        self.train.validate()
    }

    fn train_cfg(&self, tag: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, tag),
            ..self.train.clone()
        }
    }

    fn uses(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// SplitMix64 finalizer over `seed + tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `estimate` into `running`; `folded` counts the estimates already
/// averaged into `running` (the initial one included).
pub fn fold_eta(running: f64, estimate: f64, averaging: Averaging, folded: usize) -> f64 {
    match averaging {
        Averaging::Pairwise => (running + estimate) / 2.0,
        Averaging::Cumulative => (running * folded as f64 + estimate) / (folded + 1) as f64,
    }
}

const TAG_MAIN: u64 = 1;
const TAG_LOOCV: u64 = 1_000;
const TAG_ACCOMMODATE: u64 = 2_000;
const TAG_DETECT: u64 = 3_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaRecord {
    pub stage: usize,
    /// Estimate produced at this stage (look-ahead search, or the pinned value).
    pub estimate: f64,
    /// `eta` in force after the update.
    pub running: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualState {
    pub net: NetworkState,
    pub policy: ThresholdPolicy,
    /// Original class id of every model class, in model index order.
    pub known_classes: Vec<usize>,
    /// Training data per known class, labeled with the model index.
    pub stored_train: Vec<LabeledDataset>,
    pub eta_history: Vec<EtaRecord>,
    pub warnings: Vec<String>,
    folded: usize,
}

impl ContinualState {
    /// Trains a fresh model on `id_train` (labels `0..C`) and fits its stats.
    pub fn initialize(
        id_train: &LabeledDataset,
        known_classes: Vec<usize>,
        eta: f64,
        cfg: &ProtocolConfig,
    ) -> Result<Self> {
        let c = known_classes.len();
        if id_train.n_classes() != c {
            return Err(Error::Consistency(format!(
                "{} known classes for a dataset with {} labels",
                c,
                id_train.n_classes()
            )));
        }
        let mut net = NetworkState::new(
            id_train.dim(),
            &cfg.hidden,
            c,
            derive_seed(cfg.seed, TAG_MAIN),
        )?;
        fit(&mut net, id_train, &cfg.train_cfg(TAG_MAIN), None)
            .map_err(|e| e.context("initial training"))?;
        let table = build_score_table(&net, id_train, false)?;
        let stats = fit_class_stats(&table).map_err(|e| e.context("initial class stats"))?;
        Ok(Self {
            net,
            policy: ThresholdPolicy::new(eta, stats),
            known_classes,
            stored_train: id_train.split_by_class(),
            eta_history: Vec::new(),
            warnings: Vec::new(),
            folded: 1,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.known_classes.len()
    }

    pub fn eta(&self) -> f64 {
        self.policy.eta
    }

    /// Resets the running `eta` to a fresh estimate.
    pub fn set_eta(&mut self, eta: f64) {
        self.policy.eta = eta;
        self.folded = 1;
    }

    fn stored_union(&self) -> Result<LabeledDataset> {
        let parts: Vec<&LabeledDataset> = self.stored_train.iter().collect();
        LabeledDataset::concat(&parts)?.with_n_classes(self.n_classes())
    }

    /// The `eta` that would best separate stored ID training data from
    /// `ood_train` under the current model and stats.
    pub fn lookahead(
        &self,
        ood_train: &LabeledDataset,
        metric: SearchMetric,
    ) -> Result<SearchResult> {
        let id_table = build_score_table(&self.net, &self.stored_union()?, false)?;
        let ood_table = build_score_table(&self.net, ood_train, true)?;
        cheat_search(&id_table, &ood_table, &self.policy.stats, metric)
    }

    fn fold_estimate(&mut self, estimate: f64, averaging: Averaging) -> f64 {
        let running = fold_eta(self.policy.eta, estimate, averaging, self.folded);
        self.folded += 1;
        self.policy.eta = running;
        running
    }

    /// Re-scores stored training data with the current network and refits
    /// every class's stats. `eta` and the network are untouched. A class
    /// left with fewer than two correct rows keeps its previous stats (a new
    /// class without previous stats takes the mean of the others).
    pub fn recompute_stats(&mut self) -> Result<()> {
        let table = build_score_table(&self.net, &self.stored_union()?, false)?;
        let old = self.policy.stats.clone();
        let c = self.n_classes();
        let mut fresh = ClassStats {
            mu: Vec::with_capacity(c),
            sigma: Vec::with_capacity(c),
            n: Vec::with_capacity(c),
        };
        for class in 0..c {
            match class_stat(&table, class) {
                Ok((mu, sigma, n)) => {
                    fresh.mu.push(mu);
                    fresh.sigma.push(sigma);
                    fresh.n.push(n);
                }
                Err(e) => {
                    let (mu, sigma, n) = if class < old.n_classes() {
                        (old.mu[class], old.sigma[class], old.n[class])
                    } else {
                        let k = old.n_classes() as f64;
                        (
                            old.mu.iter().sum::<f64>() / k,
                            old.sigma.iter().sum::<f64>() / k,
                            0,
                        )
                    };
                    self.warnings
                        .push(format!("class {class}: {e}; keeping previous stats"));
                    fresh.mu.push(mu);
                    fresh.sigma.push(sigma);
                    fresh.n.push(n);
                }
            }
        }
        self.policy.stats = fresh;
        Ok(())
    }

    /// Folds `estimate` into the running `eta` (when given), accommodates
    /// the class of `ood_train` as model class `C`, and refits all stats.
    pub fn accommodate(
        &mut self,
        stage: usize,
        estimate: Option<f64>,
        ood_train: &LabeledDataset,
        original_class: usize,
        cfg: &ProtocolConfig,
    ) -> Result<()> {
        let running = match estimate {
            Some(e) => self.fold_estimate(e, cfg.averaging),
            None => self.policy.eta,
        };
        self.eta_history.push(EtaRecord {
            stage,
            estimate: estimate.unwrap_or(running),
            running,
        });

        let c = self.n_classes();
        let relabeled = ood_train.with_label(c, c + 1)?;
        let train_cfg = cfg.train_cfg(TAG_ACCOMMODATE + stage as u64);
        self.net = accommodate_class(&self.net, &relabeled, &train_cfg)?;
        self.known_classes.push(original_class);
        self.stored_train = self
            .stored_train
            .iter()
            .map(|d| d.clone().with_n_classes(c + 1))
            .collect::<Result<_>>()?;
        self.stored_train.push(relabeled);
        self.recompute_stats()
    }
}

/// Look-ahead search on `ood_train`, running-average update, accommodation
/// and stats recomputation. Returns the look-ahead result.
pub fn on_detection(
    state: &mut ContinualState,
    stage: usize,
    ood_train: &LabeledDataset,
    original_class: usize,
    cfg: &ProtocolConfig,
) -> Result<SearchResult> {
    let found = state.lookahead(ood_train, cfg.metric)?;
    state.accommodate(stage, Some(found.eta_star), ood_train, original_class, cfg)?;
    Ok(found)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    AllId,
    ContainsOod(f64),
}

/// Fraction of `batch` rejected under the state's policy; the batch is
/// flagged when that fraction reaches `rho`.
pub fn detect_batch(state: &ContinualState, batch: &LabeledDataset, rho: f64) -> Result<Verdict> {
    if batch.is_empty() {
        return Err(Error::Value("detection batch is empty".into()));
    }
    let table = build_score_table(&state.net, batch, true)?;
    let flagged = table
        .rows
        .iter()
        .filter(|r| state.policy.decide(&r.scores).is_ood())
        .count();
    Ok(verdict_for(flagged as f64 / batch.len() as f64, rho))
}

pub fn verdict_for(flagged_fraction: f64, rho: f64) -> Verdict {
    if flagged_fraction >= rho {
        Verdict::ContainsOod(flagged_fraction)
    } else {
        Verdict::AllId
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub eta0: f64,
    pub per_class_etas: Vec<f64>,
    pub searches: Vec<SearchResult>,
}

/// Leave-one-class-out estimate: for each class, trains a fresh model on
/// the others and searches the `eta` that separates them from it.
pub fn loocv_eta(per_class: &[LabeledDataset], cfg: &ProtocolConfig) -> Result<LoocvResult> {
    let c = per_class.len();
    if c < 3 {
        return Err(Error::Value(format!(
            "leave-one-class-out needs >= 3 classes, got {c}"
        )));
    }
    let mut searches = Vec::with_capacity(c);
    for left_out in 0..c {
        let fold = || -> Result<SearchResult> {
            let kept: Vec<LabeledDataset> = (0..c)
                .filter(|&i| i != left_out)
                .enumerate()
                .map(|(j, i)| per_class[i].with_label(j, c - 1))
                .collect::<Result<_>>()?;
            let refs: Vec<&LabeledDataset> = kept.iter().collect();
            let train_set = LabeledDataset::concat(&refs)?;
            let tag = TAG_LOOCV + left_out as u64;
            let mut net = NetworkState::new(
                train_set.dim(),
                &cfg.hidden,
                c - 1,
                derive_seed(cfg.seed, tag),
            )?;
            fit(&mut net, &train_set, &cfg.train_cfg(tag), None)?;
            let id_table = build_score_table(&net, &train_set, false)?;
            let stats = fit_class_stats(&id_table)?;
            let ood_table = build_score_table(&net, &per_class[left_out], true)?;
            cheat_search(&id_table, &ood_table, &stats, cfg.metric)
        };
        searches.push(
            fold().map_err(|e| e.context(format!("loocv fold {left_out} (class left out)")))?,
        );
    }
    let per_class_etas: Vec<f64> = searches.iter().map(|s| s.eta_star).collect();
    Ok(LoocvResult {
        eta0: mean(&per_class_etas),
        per_class_etas,
        searches,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// A novel class with its original id and both splits (original labels).
#[derive(Debug, Clone, PartialEq)]
pub struct NovelClass {
    pub class_id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// In-distribution data relabeled to `0..C` plus the novel-class stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolData {
    pub id_classes: Vec<usize>,
    pub id_train: LabeledDataset,
    pub id_test: LabeledDataset,
    pub stream: Vec<NovelClass>,
}

/// Seeded class split of a full dataset: `n_id` ID classes, the rest streamed.
pub fn prepare(
    train: &LabeledDataset,
    test: &LabeledDataset,
    n_id: usize,
    seed: u64,
) -> Result<ProtocolData> {
    let (id_classes, ood_classes) = choose_classes(train.n_classes(), n_id, seed)?;
    let id_train = subset_classes(train, &id_classes, true)?;
    let id_test = subset_classes(test, &id_classes, true)?;
    let stream = ood_classes
        .iter()
        .map(|&c| {
            Ok(NovelClass {
                class_id: c,
                train: subset_classes(train, &[c], false)?,
                test: subset_classes(test, &[c], false)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolData {
        id_classes,
        id_train,
        id_test,
        stream,
    })
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub reports: Vec<StageReport>,
    pub loocv: Option<LoocvResult>,
    /// Look-ahead search per stage (empty when no method needs it).
    pub lookahead: Vec<SearchResult>,
    pub verdicts: Vec<Verdict>,
    pub state: ContinualState,
}

/// Runs the protocol for every method in `cfg.methods`.
///
/// Stage `k` evaluates ID accuracy on the test split of the `C + k` known
/// classes and detection on the training split of stream class `k`, then
/// accommodates that class. With an empty stream a single ID-only stage is
/// reported (`acc_ood = 1`).
pub fn run_protocol(
    id_train: &LabeledDataset,
    id_test: &LabeledDataset,
    id_classes: &[usize],
    stream: &[NovelClass],
    cfg: &ProtocolConfig,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let dynamic = cfg.uses(Method::Dynamic);
    let needs_lookahead = dynamic || cfg.uses(Method::Cheating);

    let loocv = if dynamic {
        Some(loocv_eta(&id_train.split_by_class(), cfg)?)
    } else {
        None
    };
    let start_eta = loocv.as_ref().map_or(cfg.fixed_eta, |l| l.eta0);
    let mut state = ContinualState::initialize(id_train, id_classes.to_vec(), start_eta, cfg)?;

    let mut id_eval = id_test.clone();
    let mut reports = Vec::new();
    let mut lookahead = Vec::new();
    let mut verdicts = Vec::new();

    let mut report_stage = |state: &ContinualState,
                            stage: usize,
                            id_eval: &LabeledDataset,
                            ood: Option<&LabeledDataset>,
                            look: Option<&SearchResult>|
     -> Result<()> {
        let id_table = build_score_table(&state.net, id_eval, false)?;
        let ood_table = match ood {
            Some(o) => build_score_table(&state.net, o, true)?,
            None => Default::default(),
        };
        for &method in &cfg.methods {
            let eta = match method {
                Method::FixedShels => cfg.fixed_eta,
                Method::Dynamic => state.eta(),
                Method::Cheating => look.map_or(start_eta, |l| l.eta_star),
            };
            let policy = ThresholdPolicy::new(eta, state.policy.stats.clone());
            let (acc_id, acc_ood) = evaluate_tables(&policy, &id_table, &ood_table);
            reports.push(StageReport::new(
                cfg.seed,
                stage,
                state.n_classes(),
                method,
                acc_id,
                acc_ood,
                eta,
            ));
        }
        Ok(())
    };

    if stream.is_empty() {
        report_stage(&state, 0, &id_eval, None, None)?;
    }

    for (stage, novel) in stream.iter().enumerate() {
        let mut step = || -> Result<()> {
            let look = if needs_lookahead {
                Some(state.lookahead(&novel.train, cfg.metric)?)
            } else {
                None
            };
            report_stage(&state, stage, &id_eval, Some(&novel.train), look.as_ref())?;

            let mut idx: Vec<usize> = (0..novel.train.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                TAG_DETECT + stage as u64,
            )));
            idx.truncate(cfg.batch_size);
            verdicts.push(detect_batch(&state, &novel.train.select(&idx), cfg.rho)?);

            let estimate = if dynamic {
                look.as_ref().map(|l| l.eta_star)
            } else {
                None
            };
            state.accommodate(stage, estimate, &novel.train, novel.class_id, cfg)?;
            if let Some(l) = look {
                lookahead.push(l);
            }

            let c = state.n_classes();
            let test = novel.test.with_label(c - 1, c)?;
            id_eval = LabeledDataset::concat(&[&id_eval, &test])?.with_n_classes(c)?;
            Ok(())
        };
        step().map_err(|e| e.context(format!("stage {stage} (novel class {})", novel.class_id)))?;
    }

    Ok(ProtocolOutcome {
        reports,
        loocv,
        lookahead,
        verdicts,
        state,
    })
}

/// The protocol with `eta` pinned: no cross-validation and no updates.
pub fn fixed_eta_baseline(
    id_train: &LabeledDataset,
    id_test: &LabeledDataset,
    id_classes: &[usize],
    stream: &[NovelClass],
    cfg: &ProtocolConfig,
    eta: f64,
) -> Result<ProtocolOutcome> {
    let cfg = ProtocolConfig {
        fixed_eta: eta,
        methods: vec![Method::FixedShels],
        ..cfg.clone()
    };
    run_protocol(id_train, id_test, id_classes, stream, &cfg)
}
