// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use contood::continual::{loocv_eta, prepare, run_protocol, ContinualState};
use contood::data::{
    load_cifar10_dir, load_mnist_dir, make_synthetic, subset_classes, LabeledDataset, SyntheticSpec,
};
use contood::model::{gradient_check, NetworkState, Objective};
use contood::oracle::{
    check_search, dense_grid_max, random_cases, random_grad_case, DENSE_GRID_POINTS,
};
use contood::reporting::{evaluate_tables, reports_to_csv, sort_reports, Format, StageReport};
use contood::scoring::{build_score_table, neg_z, Decision, ScoreTable, ThresholdPolicy};
use contood::search::{search_z_with, CandidateRule, SearchMetric};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Dataset, RunConfig, DATA_DIR_ENV};
use crate::CliError;

/// Synthetic stand-in: ten clusters 20 standard deviations apart.
fn synthetic(seed: u64) -> contood::Result<(LabeledDataset, LabeledDataset)> {
    make_synthetic(&SyntheticSpec::equidistant(10, 128, 20.0, 1.0, 250, seed))
}

fn load_real(dataset: Dataset, dir: &Path) -> contood::Result<(LabeledDataset, LabeledDataset)> {
    match dataset {
        Dataset::Mnist | Dataset::Fmnist => load_mnist_dir(dir, dataset.source()),
        Dataset::Cifar10 => load_cifar10_dir(dir),
        Dataset::Synthetic => unreachable!("synthetic data is generated per seed"),
    }
}

/// Calls `f` with the train/test pair of every seed (in parallel), keeping
/// seed order in the result.
fn per_seed<T: Send>(
    cfg: &RunConfig,
    f: impl Fn(u64, &LabeledDataset, &LabeledDataset) -> contood::Result<T> + Sync,
) -> Result<Vec<T>, CliError> {
    let seeds = cfg.seeds();
    let results: Vec<contood::Result<T>> = match cfg.dataset() {
        Dataset::Synthetic => seeds
            .par_iter()
            .map(|&seed| synthetic(seed).and_then(|(train, test)| f(seed, &train, &test)))
            .collect(),
        dataset => {
            let (train, test) = load_real(dataset, cfg.data_dir()?)?;
            seeds
                .par_iter()
                .map(|&seed| f(seed, &train, &test))
                .collect()
        }
    };
    results
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

fn write_output(path: Option<&Path>, body: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, body)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dataset: Dataset,
    pub seed: u64,
    pub known_classes: Vec<usize>,
    pub net: NetworkState,
    pub policy: ThresholdPolicy,
}

fn checkpoint_path(base: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    base.with_file_name(name)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let outcomes = per_seed(cfg, |seed, train, test| {
        let data = prepare(train, test, cfg.n_id(), seed)?;
        let out = run_protocol(
            &data.id_train,
            &data.id_test,
            &data.id_classes,
            &data.stream,
            &cfg.protocol(seed),
        )?;
        Ok((seed, out.reports, out.state))
    })?;

    let mut reports: Vec<StageReport> = Vec::new();
    let many = outcomes.len() > 1;
    for (seed, seed_reports, state) in outcomes {
        for w in &state.warnings {
            eprintln!("seed {seed}: {w}");
        }
        if let Some(base) = &cfg.checkpoint {
            save_checkpoint(
                &checkpoint_path(base, seed, many),
                cfg.dataset(),
                seed,
                state,
            )?;
        }
        reports.extend(seed_reports);
    }
    sort_reports(&mut reports);
    let body = match cfg.format() {
        Format::Csv => reports_to_csv(&reports),
        Format::Json => {
            serde_json::to_string_pretty(&reports).map_err(contood::Error::from)? + "\n"
        }
    };
    write_output(cfg.output.as_deref(), &body)
}

fn save_checkpoint(
    path: &Path,
    dataset: Dataset,
    seed: u64,
    state: ContinualState,
) -> Result<(), CliError> {
    let ck = Checkpoint {
        dataset,
        seed,
        known_classes: state.known_classes,
        net: state.net,
        policy: state.policy,
    };
    let body = serde_json::to_string(&ck).map_err(contood::Error::from)?;
    std::fs::write(path, body)
        .map_err(|e| CliError::Usage(format!("cannot write checkpoint {}: {e}", path.display())))
}

pub fn loocv(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = per_seed(cfg, |seed, train, test| {
        let data = prepare(train, test, cfg.n_id(), seed)?;
        let r = loocv_eta(&data.id_train.split_by_class(), &cfg.protocol(seed))?;
        Ok((seed, data.id_classes, r))
    })?;
    let mut body = String::from("seed,held_out,eta,metric\n");
    for (seed, classes, r) in rows {
        for (class, s) in classes.iter().zip(&r.searches) {
            let _ = writeln!(
                body,
                "{seed},{class},{:.6},{:.6}",
                s.eta_star, s.metric_value
            );
        }
        let _ = writeln!(body, "{seed},mean,{:.6},", r.eta0);
    }
    write_output(cfg.output.as_deref(), &body)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `run --checkpoint`
    checkpoint: PathBuf,
    /// Dataset directory (defaults to $CONTOOD_DATA_DIR)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Score with this eta instead of the stored one
    #[arg(long)]
    eta: Option<f64>,
    /// Score-table CSV path (stdout when absent)
    #[arg(long)]
    output: Option<PathBuf>,
}

fn score_rows(
    out: &mut String,
    split: &str,
    table: &ScoreTable,
    policy: &ThresholdPolicy,
    classes: &[usize],
    truth: &[usize],
) {
    for (row, &true_class) in table.rows.iter().zip(truth) {
        let c = row.argmax;
        let z = neg_z(&policy.stats, c, row.scores[c]).unwrap_or(f64::NAN);
        let decision = match policy.decide(&row.scores) {
            Decision::Id(_) => "id",
            Decision::Ood => "ood",
        };
        let _ = write!(
            out,
            "{split},{true_class},{},{:.6},{z:.6},{decision}",
            classes[c], row.scores[c]
        );
        for s in &row.scores {
            let _ = write!(out, ",{s:.6}");
        }
        out.push('\n');
    }
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.checkpoint).map_err(|e| {
        CliError::Usage(format!(
            "cannot read checkpoint {}: {e}",
            args.checkpoint.display()
        ))
    })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(contood::Error::from)?;
    let (_, test) = match ck.dataset {
        Dataset::Synthetic => synthetic(ck.seed)?,
        dataset => {
            let dir = args
                .data_dir
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "data_dir is required (--data-dir or {DATA_DIR_ENV})"
                    ))
                })?;
            load_real(dataset, &dir)?
        }
    };
    let mut policy = ck.policy;
    if let Some(eta) = args.eta {
        policy.eta = eta;
    }

    let id = subset_classes(&test, &ck.known_classes, true)?;
    let id_table = build_score_table(&ck.net, &id, false)?;
    let unknown: Vec<usize> = test
        .classes_present()
        .into_iter()
        .filter(|c| !ck.known_classes.contains(c))
        .collect();
    let (ood_table, ood_truth) = if unknown.is_empty() {
        (
            ScoreTable {
                n_classes: ck.net.n_classes(),
                rows: Vec::new(),
            },
            Vec::new(),
        )
    } else {
        let ood = subset_classes(&test, &unknown, false)?;
        (
            build_score_table(&ck.net, &ood, true)?,
            ood.labels().to_vec(),
        )
    };
    let (acc_id, acc_ood) = evaluate_tables(&policy, &id_table, &ood_table);

    let mut body = String::from("split,true_class,pred_class,top_score,neg_z,decision");
    for c in &ck.known_classes {
        let _ = write!(body, ",s{c}");
    }
    body.push('\n');
    let id_truth: Vec<usize> = id.labels().iter().map(|&l| ck.known_classes[l]).collect();
    score_rows(
        &mut body,
        "id",
        &id_table,
        &policy,
        &ck.known_classes,
        &id_truth,
    );
    score_rows(
        &mut body,
        "ood",
        &ood_table,
        &policy,
        &ck.known_classes,
        &ood_truth,
    );
    write_output(args.output.as_deref(), &body)?;
    eprintln!(
        "eta {:.4}: acc_id {acc_id:.4} over {} samples, acc_ood {acc_ood:.4} over {} samples",
        policy.eta,
        id_table.len(),
        ood_table.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SearchCheckArgs {
    /// Number of random score tables
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Maximum rows per table (ID + OOD)
    #[arg(long, default_value_t = 200)]
    max_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    /// Search only the observed values instead of midpoints (a known bug)
    #[arg(long)]
    inject_fault: bool,
    /// Where a failing table is written
    #[arg(long, default_value = "searchcheck_failure.json")]
    dump: PathBuf,
}

/// One ID and one OOD value in every relative order.
const MINIMAL: [(f64, f64); 3] = [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)];

pub fn searchcheck(args: &SearchCheckArgs) -> Result<(), CliError> {
    if args.max_rows < 8 {
        return Err(CliError::Usage("max_rows must be >= 8".into()));
    }
    let rule = if args.inject_fault {
        CandidateRule::Observed
    } else {
        CandidateRule::Midpoints
    };
    let cases = random_cases(args.seed, args.cases, args.max_rows);
    let report = check_search(&cases, rule, args.tolerance)?;
    if let Some(m) = report.mismatches.first() {
        let dump = serde_json::json!({ "mismatch": m, "case": cases[m.index] });
        std::fs::write(
            &args.dump,
            serde_json::to_string_pretty(&dump).map_err(contood::Error::from)?,
        )
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", args.dump.display())))?;
        return Err(CliError::Oracle(format!(
            "{} of {} searches disagree with the dense grid; first failing table written to {}",
            report.mismatches.len(),
            report.checked,
            args.dump.display()
        )));
    }
    for (id, ood) in MINIMAL {
        for metric in [SearchMetric::TotalAccuracy, SearchMetric::GMean] {
            let found = search_z_with(&[id], &[ood], metric, rule)?;
            let grid = dense_grid_max(&[id], &[ood], metric, DENSE_GRID_POINTS);
            if (found.metric_value - grid.metric).abs() > args.tolerance {
                return Err(CliError::Oracle(format!(
                    "1 ID ({id}) + 1 OOD ({ood}) {metric:?}: search {} vs grid {}",
                    found.metric_value, grid.metric
                )));
            }
        }
    }
    println!(
        "searchcheck: {} table searches and {} minimal searches match the dense grid",
        report.checked,
        2 * MINIMAL.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Number of random networks
    #[arg(long, default_value_t = 10)]
    nets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed hidden widths (random when absent)
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.05)]
    lambda_group: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_freeze: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub fn gradcheck(args: &GradCheckArgs) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    for i in 0..args.nets {
        let mut case = random_grad_case(&mut rng, args.hidden.as_deref())?;
        let hidden: Vec<usize> = case.net.hidden.iter().map(|l| l.bias.len()).collect();
        let obj = Objective {
            lambda_group: args.lambda_group,
            lambda_freeze: args.lambda_freeze,
            reference: Some(&case.reference),
        };
        let check = gradient_check(&mut case.net, case.x.view(), &case.labels, &obj)?;
        let (layer, err) = check
            .per_group
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .unwrap_or_default();
        println!("net {i} hidden {hidden:?}: max relative error {err:.2e} ({layer})");
        if check.max_rel_error >= args.tolerance {
            return Err(CliError::Oracle(format!(
                "net {i}: relative error {err:.2e} in {layer} exceeds {:.0e}",
                args.tolerance
            )));
        }
        worst = worst.max(check.max_rel_error);
    }
    println!(
        "gradcheck: {} nets, worst relative error {worst:.2e}",
        args.nets
    );
    Ok(())
}
