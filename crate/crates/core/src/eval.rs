//! Forecast scoring, predictive checks, interval coverage and MMD.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{
    forecast_individual, quantile_sorted, synthesize_population, Dynamics, InferenceOptions,
};
use crate::io::study_to_json;
use crate::rng::{derive_u64, domain, stream, Rng};
use crate::study::{IndividualRecord, Study};

pub const LOG_FLOOR: f64 = 1e-6;
pub const DEFAULT_PREFIX_LEN: usize = 4;
pub const DEFAULT_VPC_BINS: usize = 8;
pub const VPC_PERCENTILES: [f64; 3] = [10.0, 50.0, 90.0];
pub const COVERAGE_LEVELS: [f64; 3] = [0.50, 0.80, 0.95];
pub const MMD_GRID_POINTS: usize = 32;

/// Root mean squared difference of natural logs, floored at `LOG_FLOOR`.
pub fn log_rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InsufficientData(
            "log-RMSE of an empty evaluation set".into(),
        ));
    }
    if pred.len() != obs.len() {
        return Err(Error::shape("log-RMSE", &[obs.len()], &[pred.len()]));
    }
    let ss: f64 = pred
        .iter()
        .zip(obs)
        .map(|(p, o)| (p.max(LOG_FLOOR).ln() - o.max(LOG_FLOOR).ln()).powi(2))
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical study JSON.
pub fn study_fingerprint(study: &Study) -> Result<String> {
    Ok(hex(&Sha256::digest(study_to_json(study)?.as_bytes())))
}

pub fn record_fingerprint(record: &IndividualRecord) -> String {
    let mut h = Sha256::new();
    h.update(record.id.as_bytes());
    h.update(record.dose.amount.to_le_bytes());
    h.update(record.dose.route.as_str().as_bytes());
    for (t, c) in record.times.iter().zip(&record.concentrations) {
        h.update(t.to_le_bytes());
        h.update(c.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Predictive law over the held-out future times of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub mean: Vec<f64>,
    /// `draws[time][sample]`
    pub draws: Vec<Vec<f64>>,
}

pub trait Forecaster: Sync {
    /// `context` never contains `target`.
    fn forecast(
        &self,
        context: &Study,
        target: &IndividualRecord,
        prefix_len: usize,
        seed: u64,
    ) -> Result<Forecast>;
}

/// Flow (or null-field) forecasts summarised by Monte-Carlo draws.
pub struct FlowForecaster<'a> {
    pub dynamics: Dynamics<'a>,
    pub n_samples: usize,
    pub options: InferenceOptions,
}

impl Forecaster for FlowForecaster<'_> {
    fn forecast(
        &self,
        context: &Study,
        target: &IndividualRecord,
        p: usize,
        seed: u64,
    ) -> Result<Forecast> {
        let mut rng = stream(seed, &[]);
        let set = forecast_individual(
            self.dynamics,
            context,
            &target.times[..p],
            &target.concentrations[..p],
            target.dose,
            &target.times[p..],
            self.n_samples,
            &self.options,
            &mut rng,
        )?;
        let by_time = set.by_time();
        Ok(Forecast {
            mean: set.summary.mean[p..].to_vec(),
            draws: by_time[p..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub study_id: String,
    pub subject: String,
    pub n_future: usize,
    pub log_rmse: f64,
    pub context_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub study_id: String,
    pub subjects: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub levels: Vec<f64>,
    pub fractions: Vec<f64>,
    pub n: usize,
}

impl Coverage {
    pub fn at(&self, level: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|&l| (l - level).abs() < 1e-12)
            .map(|i| self.fractions[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub prefix_len: usize,
    pub rows: Vec<SubjectScore>,
    pub skipped: usize,
    pub studies: Vec<StudyScore>,
    pub coverage: Coverage,
}

impl LooReport {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.log_rmse).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("study_id,subject,n_future,log_rmse\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.study_id, r.subject, r.n_future, r.log_rmse
            ));
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Fraction of observations inside each central interval of their draws.
pub fn interval_coverage(draws: &[Vec<f64>], observed: &[f64], levels: &[f64]) -> Result<Coverage> {
    if observed.is_empty() {
        return Err(Error::InsufficientData(
            "coverage of an empty evaluation set".into(),
        ));
    }
    if draws.len() != observed.len() {
        return Err(Error::shape("coverage", &[observed.len()], &[draws.len()]));
    }
    let mut inside = vec![0usize; levels.len()];
    let mut sorted = Vec::new();
    for (d, &o) in draws.iter().zip(observed) {
        if d.is_empty() {
            return Err(Error::InsufficientData(
                "point without predictive draws".into(),
            ));
        }
        sorted.clear();
        sorted.extend_from_slice(d);
        sorted.sort_by(f64::total_cmp);
        for (k, &l) in levels.iter().enumerate() {
            let lo = quantile_sorted(&sorted, 0.5 - l / 2.0);
            let hi = quantile_sorted(&sorted, 0.5 + l / 2.0);
            if lo <= o && o <= hi {
                inside[k] += 1;
            }
        }
    }
    let n = observed.len();
    Ok(Coverage {
        levels: levels.to_vec(),
        fractions: inside.iter().map(|&c| c as f64 / n as f64).collect(),
        n,
    })
}

/// Leave-one-subject-out forecasting: each eligible subject is removed from
/// its study, conditioned on its first `prefix_len` samples and scored on
/// the rest.
pub fn loo_forecast_eval(
    forecaster: &dyn Forecaster,
    studies: &[Study],
    prefix_len: usize,
    seed: u64,
) -> Result<LooReport> {
    if prefix_len == 0 {
        return Err(Error::validation("prefix length must be positive"));
    }
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for (si, s) in studies.iter().enumerate() {
        for (i, r) in s.individuals.iter().enumerate() {
            if r.len() > prefix_len && s.individuals.len() > 1 {
                jobs.push((si, i));
            } else {
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!(
            "{skipped} subjects skipped: not more than {prefix_len} observations or no context"
        );
    }
    if jobs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no subject has more than {prefix_len} observations"
        )));
    }
    let results: Vec<Result<(SubjectScore, Forecast)>> = jobs
        .par_iter()
        .map(|&(si, i)| {
            let study = &studies[si];
            let target = &study.individuals[i];
            let context = study.without(i);
            let fseed = derive_u64(seed, &[domain::EVAL, si as u64, i as u64]);
            let f = forecaster.forecast(&context, target, prefix_len, fseed)?;
            let obs = &target.concentrations[prefix_len..];
            let score = SubjectScore {
                study_id: study.study_id.clone(),
                subject: target.id.clone(),
                n_future: obs.len(),
                log_rmse: log_rmse(&f.mean, obs)?,
                context_hash: study_fingerprint(&context)?,
            };
            Ok((score, f))
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    let mut draws = Vec::new();
    let mut observed = Vec::new();
    for (res, &(si, i)) in results.into_iter().zip(&jobs) {
        let (score, f) = res?;
        draws.extend(f.draws);
        observed.extend_from_slice(&studies[si].individuals[i].concentrations[prefix_len..]);
        rows.push(score);
    }
    let mut study_scores = Vec::new();
    for s in studies {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.study_id == s.study_id)
            .map(|r| r.log_rmse)
            .collect();
        if !v.is_empty() {
            let (mean, sd) = mean_sd(&v);
            study_scores.push(StudyScore {
                study_id: s.study_id.clone(),
                subjects: v.len(),
                mean,
                sd,
            });
        }
    }
    let coverage = interval_coverage(&draws, &observed, &COVERAGE_LEVELS)?;
    Ok(LooReport {
        prefix_len,
        rows,
        skipped,
        studies: study_scores,
        coverage,
    })
}

/// Fraction of subjects where `a` scores strictly below `b`.
pub fn win_fraction(a: &LooReport, b: &LooReport) -> Result<f64> {
    if a.rows.len() != b.rows.len() || a.rows.is_empty() {
        return Err(Error::validation("score tables do not align"));
    }
    let wins = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| {
            if x.subject != y.subject || x.study_id != y.study_id {
                return Err(Error::validation("score tables do not align"));
            }
            Ok(usize::from(x.log_rmse < y.log_rmse))
        })
        .sum::<Result<usize>>()?;
    Ok(wins as f64 / a.rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpcBin {
    pub lower: f64,
    pub upper: f64,
    pub n_observed: usize,
    /// Simulated percentiles, ordered as `percentiles`.
    pub simulated: Vec<f64>,
    pub observed: Vec<f64>,
    /// Fraction of observations between the outer simulated percentiles.
    pub band_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpcTable {
    pub study_id: String,
    pub replicates: usize,
    pub percentiles: Vec<f64>,
    pub bins: Vec<VpcBin>,
    pub coverage: f64,
}

impl VpcTable {
    pub fn is_monotone(&self) -> bool {
        self.bins
            .iter()
            .all(|b| b.simulated.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("study_id,bin,lower,upper,n_observed");
        for p in &self.percentiles {
            s.push_str(&format!(",sim_p{p},obs_p{p}"));
        }
        s.push_str(",band_coverage\n");
        for (k, b) in self.bins.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}",
                self.study_id, k, b.lower, b.upper, b.n_observed
            ));
            for (x, y) in b.simulated.iter().zip(&b.observed) {
                s.push_str(&format!(",{x},{y}"));
            }
            s.push_str(&format!(",{}\n", b.band_coverage));
        }
        s
    }
}

/// Equal-count bin edges over `[0, max time]`; inner edges sit halfway
/// between neighbouring distinct times.
pub fn equal_count_edges(times: &[f64], bins: usize) -> Result<Vec<f64>> {
    if times.is_empty() || bins == 0 {
        return Err(Error::InsufficientData(
            "binning needs times and at least one bin".into(),
        ));
    }
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    let max = *t.last().expect("nonempty");
    let mut edges = vec![0.0];
    for k in 1..bins {
        let i = k * t.len() / bins;
        if i == 0 || i >= t.len() {
            continue;
        }
        let e = 0.5 * (t[i - 1] + t[i]);
        if e > *edges.last().expect("nonempty") && e < max {
            edges.push(e);
        }
    }
    edges.push(max);
    Ok(edges)
}

fn bin_of(edges: &[f64], t: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last).find(|&k| t <= edges[k + 1]).unwrap_or(last)
}

fn percentiles_of(values: &mut [f64], ps: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![f64::NAN; ps.len()];
    }
    values.sort_by(f64::total_cmp);
    ps.iter()
        .map(|p| quantile_sorted(values, p / 100.0))
        .collect()
}

/// Visual predictive check: each subject is resimulated `n_replicates`
/// times from the rest of the study at its own dose and sampling times.
pub fn vpc(
    dynamics: Dynamics,
    study: &Study,
    n_replicates: usize,
    percentiles: &[f64],
    bins: usize,
    opts: &InferenceOptions,
    rng: &mut Rng,
) -> Result<VpcTable> {
    if n_replicates < 100 {
        return Err(Error::validation("VPC needs at least 100 replicates"));
    }
    if percentiles.windows(2).any(|w| w[0] >= w[1])
        || percentiles.iter().any(|p| !(0.0..=100.0).contains(p))
    {
        return Err(Error::validation(
            "percentiles must be increasing within [0, 100]",
        ));
    }
    if study.individuals.len() < 2 {
        return Err(Error::InsufficientData(
            "VPC needs at least two subjects".into(),
        ));
    }
    let base: u64 = rng.random();
    let sims: Vec<Result<Vec<Vec<f64>>>> = study
        .individuals
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r_rng = stream(base, &[i as u64]);
            let set = synthesize_population(
                dynamics,
                &study.without(i),
                n_replicates,
                &r.times,
                Some(r.dose),
                opts,
                &mut r_rng,
            )?;
            Ok(set.samples)
        })
        .collect();
    let all_times: Vec<f64> = study
        .individuals
        .iter()
        .flat_map(|r| r.times.iter().copied())
        .collect();
    let edges = equal_count_edges(&all_times, bins)?;
    let nb = edges.len() - 1;
    let mut sim_vals = vec![Vec::new(); nb];
    let mut obs_vals = vec![Vec::new(); nb];
    for (r, sim) in study.individuals.iter().zip(sims) {
        let sim = sim?;
        for (j, (&t, &c)) in r.times.iter().zip(&r.concentrations).enumerate() {
            let b = bin_of(&edges, t);
            obs_vals[b].push(c);
            sim_vals[b].extend(sim.iter().map(|s| s[j]));
        }
    }
    let mut table_bins = Vec::with_capacity(nb);
    let mut inside = 0usize;
    let mut total = 0usize;
    for b in 0..nb {
        let simulated = percentiles_of(&mut sim_vals[b], percentiles);
        let observed_p = percentiles_of(&mut obs_vals[b].clone(), percentiles);
        let (lo, hi) = (simulated[0], simulated[simulated.len() - 1]);
        let hits = obs_vals[b].iter().filter(|&&c| lo <= c && c <= hi).count();
        inside += hits;
        total += obs_vals[b].len();
        let band_coverage = if obs_vals[b].is_empty() {
            f64::NAN
        } else {
            hits as f64 / obs_vals[b].len() as f64
        };
        table_bins.push(VpcBin {
            lower: edges[b],
            upper: edges[b + 1],
            n_observed: obs_vals[b].len(),
            simulated,
            observed: observed_p,
            band_coverage,
        });
    }
    Ok(VpcTable {
        study_id: study.study_id.clone(),
        replicates: n_replicates,
        percentiles: percentiles.to_vec(),
        bins: table_bins,
        coverage: inside as f64 / total as f64,
    })
}

/// Piecewise-linear interpolation, constant beyond the ends.
pub fn resample_linear(times: &[f64], values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if times.len() < 2 || times.len() != values.len() {
        return Err(Error::InsufficientData(
            "resampling needs at least two aligned points".into(),
        ));
    }
    let n = times.len();
    Ok(grid
        .iter()
        .map(|&g| {
            if g <= times[0] {
                return values[0];
            }
            if g >= times[n - 1] {
                return values[n - 1];
            }
            let k = times.partition_point(|&t| t <= g) - 1;
            let w = (g - times[k]) / (times[k + 1] - times[k]);
            values[k] + w * (values[k + 1] - values[k])
        })
        .collect())
}

/// `n` evenly spaced points on `[0, max]`.
pub fn uniform_grid(max: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| max * i as f64 / (n - 1).max(1) as f64)
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pooled RBF Gram matrix with the median-distance bandwidth.
struct Gram {
    k: Vec<f64>,
    n: usize,
}

impl Gram {
    fn new(points: &[&[f64]]) -> Self {
        let n = points.len();
        let mut d2 = vec![0.0; n * n];
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let d = sq_dist(points[i], points[j]);
                d2[i * n + j] = d;
                d2[j * n + i] = d;
                dists.push(d.sqrt());
            }
        }
        dists.sort_by(f64::total_cmp);
        let med = if dists.is_empty() {
            0.0
        } else {
            quantile_sorted(&dists, 0.5)
        };
        let h2 = if med > 0.0 { med * med } else { 1.0 };
        Self {
            k: d2.iter().map(|d| (-d / (2.0 * h2)).exp()).collect(),
            n,
        }
    }

    fn mmd2(&self, xs: &[usize], ys: &[usize]) -> f64 {
        let (m, n) = (xs.len() as f64, ys.len() as f64);
        let within = |s: &[usize]| {
            let mut acc = 0.0;
            for (a, &i) in s.iter().enumerate() {
                for &j in &s[a + 1..] {
                    acc += self.k[i * self.n + j];
                }
            }
            2.0 * acc
        };
        let mut cross = 0.0;
        for &i in xs {
            for &j in ys {
                cross += self.k[i * self.n + j];
            }
        }
        within(xs) / (m * (m - 1.0)) + within(ys) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
    }
}

/// Unbiased MMD² between two sets of equal-length vectors.
pub fn mmd2_vectors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let pts: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let g = Gram::new(&pts);
    let xs: Vec<usize> = (0..a.len()).collect();
    let ys: Vec<usize> = (a.len()..a.len() + b.len()).collect();
    Ok(g.mmd2(&xs, &ys))
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(
            "MMD needs at least two trajectories per set".into(),
        ));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::validation("MMD vectors must share one dimension"));
    }
    Ok(())
}

/// A trajectory on its own time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Resample both sets onto a shared uniform grid over `[0, latest time]`.
pub fn resample_sets(
    a: &[Trajectory],
    b: &[Trajectory],
    grid_points: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let max = a
        .iter()
        .chain(b)
        .filter_map(|t| t.times.last().copied())
        .fold(0.0_f64, f64::max);
    let grid = uniform_grid(max, grid_points);
    let f = |s: &[Trajectory]| {
        s.iter()
            .map(|t| resample_linear(&t.times, &t.values, &grid))
            .collect::<Result<Vec<_>>>()
    };
    Ok((f(a)?, f(b)?))
}

/// Unbiased RBF MMD² of two trajectory sets on a common grid.
pub fn mmd_rbf(a: &[Trajectory], b: &[Trajectory], grid_points: usize) -> Result<f64> {
    let (x, y) = resample_sets(a, b, grid_points)?;
    mmd2_vectors(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub mmd2: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Permutation test of equal laws; the bandwidth is fixed from the pooled
/// sample so relabelling only reindexes one Gram matrix.
pub fn mmd_permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    rng: &mut Rng,
) -> Result<MmdTest> {
    check_sets(a, b)?;
    let pts: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let g = Gram::new(&pts);
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let stat = g.mmd2(&idx[..a.len()], &idx[a.len()..]);
    let mut exceed = 0;
    for _ in 0..permutations {
        idx.shuffle(rng);
        if g.mmd2(&idx[..a.len()], &idx[a.len()..]) >= stat {
            exceed += 1;
        }
    }
    Ok(MmdTest {
        mmd2: stat,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}
