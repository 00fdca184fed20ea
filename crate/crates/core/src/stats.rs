// SPDX-License-Identifier: Apache-2.0

//! Two-sample Student's t-test and Holm–Bonferroni step-down adjustment.

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (mean, ss)
}

/// Pooled-variance two-sample t-test with a two-tailed p-value.
///
/// With zero pooled variance the result is `t = 0, p = 1` for equal means
/// and `t = ±inf, p = 0` otherwise.
pub fn students_t(group_a: &[f64], group_b: &[f64]) -> Result<TTest> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::Value(format!(
            "t-test needs >= 2 values per group, got {} and {}",
            group_a.len(),
            group_b.len()
        )));
    }
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let (ma, ssa) = mean_var(group_a);
    let (mb, ssb) = mean_var(group_b);
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    let diff = ma - mb;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: f64::INFINITY.copysign(diff),
                p: 0.0,
                df,
            }
        });
    }
    let t = diff / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}

/// Holm step-down adjusted p-values, returned in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Value(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max((m - rank) as f64 * p_values[i]);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}
