//! Standard non-compartmental PK summaries used to calibrate the prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkMetrics {
    /// Peak concentration divided by dose.
    pub cmax_per_dose: f64,
    pub tmax: f64,
    /// Trapezoidal AUC over the observed span divided by dose.
    pub auc_per_dose: f64,
}

/// Cohort-level percent coefficient of variation of each metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortCv {
    pub cmax_cv: f64,
    pub tmax_cv: f64,
    pub auc_cv: f64,
}

pub fn trapezoid_auc(times: &[f64], conc: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(conc.windows(2))
        .map(|(t, c)| 0.5 * (c[0] + c[1]) * (t[1] - t[0]))
        .sum()
}

pub fn compute_pk_metrics(times: &[f64], conc: &[f64], dose_amount: f64) -> Result<PkMetrics> {
    if times.len() < 2 || times.len() != conc.len() {
        return Err(Error::InsufficientData(format!(
            "PK metrics need at least two aligned points, got {} times and {} values",
            times.len(),
            conc.len()
        )));
    }
    if !(dose_amount > 0.0) {
        return Err(Error::validation(
            "dose must be positive for dose-normalised metrics",
        ));
    }
    // first occurrence of the maximum
    let (imax, cmax) =
        conc.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    Ok(PkMetrics {
        cmax_per_dose: cmax / dose_amount,
        tmax: times[imax],
        auc_per_dose: trapezoid_auc(times, conc) / dose_amount,
    })
}

fn percent_cv(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return 0.0;
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    100.0 * var.sqrt() / mean
}

pub fn cohort_cv(metrics: &[PkMetrics]) -> Result<CohortCv> {
    if metrics.is_empty() {
        return Err(Error::InsufficientData("cohort has no individuals".into()));
    }
    Ok(CohortCv {
        cmax_cv: percent_cv(metrics.iter().map(|m| m.cmax_per_dose)),
        tmax_cv: percent_cv(metrics.iter().map(|m| m.tmax)),
        auc_cv: percent_cv(metrics.iter().map(|m| m.auc_per_dose)),
    })
}
