//! Sampling by integrating the masked vector field from the reference measure.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::reference_sample;
use crate::model::{
    cross_mask_for, normalize_study, FlowModel, ModelConfig, StudyBatch, TargetState,
};
use crate::rng::{domain, stream, Rng};
use crate::study::{DoseSpec, Study};

pub const DEFAULT_STEPS: usize = 100;
pub const SUMMARY_QUANTILES: [f64; 5] = [0.025, 0.10, 0.50, 0.90, 0.975];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub steps: usize,
    pub solver: Solver,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            solver: Solver::Euler,
        }
    }
}

/// A batch of states evaluated at one flow time.
pub trait VectorField: Sync {
    fn eval(&self, t: f64, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// `v ≡ 0`.
pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval(&self, _t: f64, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(states.iter().map(|s| vec![0.0; s.len()]).collect())
    }
}

/// The same velocity for every state and time; one row per state.
pub struct ConstantField(pub Vec<Vec<f64>>);

impl VectorField for ConstantField {
    fn eval(&self, _t: f64, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.0.len() != states.len() {
            return Err(Error::shape(
                "constant field",
                &[states.len()],
                &[self.0.len()],
            ));
        }
        Ok(self.0.clone())
    }
}

/// The learned field; `h^S` is computed once per flow time and shared by
/// every state, then states are decoded in parallel.
pub struct ModelField<'a> {
    pub model: &'a FlowModel,
    pub batch: &'a StudyBatch,
    /// One target per state.
    pub targets: &'a [TargetState],
}

impl VectorField for ModelField<'_> {
    fn eval(&self, t: f64, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.targets.len() != states.len() {
            return Err(Error::shape(
                "targets per state",
                &[states.len()],
                &[self.targets.len()],
            ));
        }
        let h_s = self.model.encode_context(self.batch, t)?;
        let len = self.targets.first().map_or(0, |t| t.len());
        let cross = cross_mask_for(self.batch, len);
        states
            .par_iter()
            .zip(self.targets)
            .map(|(z, target)| {
                if target.len() == len {
                    self.model
                        .field_with_context(self.batch, &cross, &h_s, target, z, t)
                } else {
                    let c = cross_mask_for(self.batch, target.len());
                    self.model
                        .field_with_context(self.batch, &c, &h_s, target, z, t)
                }
            })
            .collect()
    }
}

fn axpy(z: &[Vec<f64>], k: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    z.iter()
        .zip(k)
        .map(|(a, b)| a.iter().zip(b).map(|(x, v)| x + h * v).collect())
        .collect()
}

/// Fixed-step integration of `dz/dt = v(z, t)` over `[0, 1]`.
pub fn integrate_flow(
    field: &dyn VectorField,
    z0: Vec<Vec<f64>>,
    opts: &InferenceOptions,
) -> Result<Vec<Vec<f64>>> {
    if opts.steps == 0 {
        return Err(Error::validation("integration needs at least one step"));
    }
    let dt = 1.0 / opts.steps as f64;
    let mut z = z0;
    for step in 0..opts.steps {
        let t = step as f64 * dt;
        z = match opts.solver {
            Solver::Euler => {
                let k = field.eval(t, &z)?;
                axpy(&z, &k, dt)
            }
            Solver::Rk4 => {
                let k1 = field.eval(t, &z)?;
                let k2 = field.eval(t + 0.5 * dt, &axpy(&z, &k1, 0.5 * dt))?;
                let k3 = field.eval(t + 0.5 * dt, &axpy(&z, &k2, 0.5 * dt))?;
                let k4 = field.eval(t + dt, &axpy(&z, &k3, dt))?;
                z.iter()
                    .enumerate()
                    .map(|(s, zs)| {
                        (0..zs.len())
                            .map(|j| {
                                zs[j]
                                    + dt / 6.0
                                        * (k1[s][j] + 2.0 * k2[s][j] + 2.0 * k3[s][j] + k4[s][j])
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: step + 1 });
        }
    }
    Ok(z)
}

/// Either the learned field or the null field (GP reference only).
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    Learned(&'a FlowModel),
    Null(&'a ModelConfig),
}

impl Dynamics<'_> {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Dynamics::Learned(m) => &m.config,
            Dynamics::Null(c) => c,
        }
    }

    fn integrate(
        &self,
        batch: &StudyBatch,
        targets: &[TargetState],
        z0: Vec<Vec<f64>>,
        opts: &InferenceOptions,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Dynamics::Learned(model) => integrate_flow(
                &ModelField {
                    model,
                    batch,
                    targets,
                },
                z0,
                opts,
            ),
            Dynamics::Null(_) => integrate_flow(&ZeroField, z0, opts),
        }
    }
}

/// Pointwise mean and quantiles of a sample set, one entry per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub quantile_levels: Vec<f64>,
    /// `quantiles[level][time]`
    pub quantiles: Vec<Vec<f64>>,
}

impl PredictiveSummary {
    pub fn quantile(&self, level: f64) -> Option<&[f64]> {
        self.quantile_levels
            .iter()
            .position(|&l| (l - level).abs() < 1e-12)
            .map(|i| self.quantiles[i].as_slice())
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn summarize(times: &[f64], samples: &[Vec<f64>], levels: &[f64]) -> Result<PredictiveSummary> {
    if samples.is_empty() {
        return Err(Error::validation("cannot summarise an empty sample set"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; times.len()];
    let mut quantiles = vec![vec![0.0; times.len()]; levels.len()];
    let mut column = Vec::with_capacity(samples.len());
    for j in 0..times.len() {
        column.clear();
        column.extend(samples.iter().map(|s| s[j]));
        mean[j] = column.iter().sum::<f64>() / n;
        column.sort_by(f64::total_cmp);
        for (l, &q) in levels.iter().enumerate() {
            quantiles[l][j] = quantile_sorted(&column, q);
        }
    }
    Ok(PredictiveSummary {
        times: times.to_vec(),
        mean,
        quantile_levels: levels.to_vec(),
        quantiles,
    })
}

/// Trajectories in original units, `samples[sample][time]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub times: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub doses: Vec<DoseSpec>,
    pub summary: PredictiveSummary,
}

impl SampleSet {
    /// `samples[time][sample]`, the layout of prediction files.
    pub fn by_time(&self) -> Vec<Vec<f64>> {
        (0..self.times.len())
            .map(|j| self.samples.iter().map(|s| s[j]).collect())
            .collect()
    }
}

/// Prediction file: per-query-time sample arrays plus the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub study_id: String,
    pub subject: Option<String>,
    pub times: Vec<f64>,
    pub samples_by_time: Vec<Vec<f64>>,
    pub summary: PredictiveSummary,
}

impl PredictionOutput {
    pub fn new(study_id: &str, subject: Option<&str>, set: &SampleSet) -> Self {
        Self {
            study_id: study_id.to_string(),
            subject: subject.map(str::to_string),
            times: set.times.clone(),
            samples_by_time: set.by_time(),
            summary: set.summary.clone(),
        }
    }
}

fn check_times(times: &[f64], what: &str) -> Result<()> {
    if times.is_empty() {
        return Err(Error::validation(format!("{what} times are empty")));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(Error::validation(format!(
            "{what} times must be nonnegative and strictly increasing"
        )));
    }
    Ok(())
}

/// `p = 0` samples for virtual subjects on `query_times` (hours). Doses are
/// drawn uniformly from the context unless `dose` is given.
pub fn synthesize_population(
    dynamics: Dynamics,
    study: &Study,
    n_samples: usize,
    query_times: &[f64],
    dose: Option<DoseSpec>,
    opts: &InferenceOptions,
    rng: &mut Rng,
) -> Result<SampleSet> {
    check_times(query_times, "query")?;
    if n_samples == 0 {
        return Err(Error::validation("number of samples must be positive"));
    }
    let cfg = dynamics.config();
    let kernel = cfg.kernel()?;
    let batch = normalize_study(study)?;
    let tn: Vec<f64> = query_times
        .iter()
        .map(|&t| batch.scales.norm_time(t))
        .collect();
    let base: u64 = rng.random();
    let draws: Vec<Result<(DoseSpec, TargetState, Vec<f64>)>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut r = stream(base, &[domain::INFER, s as u64]);
            let d = match dose {
                Some(d) => d,
                None => study.individuals[r.random_range(0..study.individuals.len())].dose,
            };
            let target =
                TargetState::new(tn.clone(), 0, batch.scales.norm_dose(d.amount), d.route)?;
            let z0 = reference_sample(None, &tn, &kernel, cfg.gp_jitter, &mut r)?;
            Ok((d, target, z0))
        })
        .collect();
    let mut doses = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    let mut z0 = Vec::with_capacity(n_samples);
    for d in draws {
        let (a, b, c) = d?;
        doses.push(a);
        targets.push(b);
        z0.push(c);
    }
    let z1 = dynamics.integrate(&batch, &targets, z0, opts)?;
    let samples: Vec<Vec<f64>> = z1
        .iter()
        .map(|z| {
            z.iter()
                .map(|&v| batch.scales.denorm_conc(v).max(0.0))
                .collect()
        })
        .collect();
    let summary = summarize(query_times, &samples, &SUMMARY_QUANTILES)?;
    Ok(SampleSet {
        times: query_times.to_vec(),
        samples,
        doses,
        summary,
    })
}

/// Forecast the continuation of an observed prefix. Output times are the
/// prefix times followed by `future_times`; prefix slots hold the observed
/// values exactly.
#[allow(clippy::too_many_arguments)]
pub fn forecast_individual(
    dynamics: Dynamics,
    context: &Study,
    prefix_times: &[f64],
    prefix_values: &[f64],
    dose: DoseSpec,
    future_times: &[f64],
    n_samples: usize,
    opts: &InferenceOptions,
    rng: &mut Rng,
) -> Result<SampleSet> {
    check_times(prefix_times, "prefix")?;
    check_times(future_times, "future")?;
    if prefix_values.len() != prefix_times.len() {
        return Err(Error::shape(
            "prefix values",
            &[prefix_times.len()],
            &[prefix_values.len()],
        ));
    }
    if future_times[0] <= *prefix_times.last().expect("nonempty") {
        return Err(Error::validation(
            "future times must follow the last prefix time",
        ));
    }
    if n_samples == 0 {
        return Err(Error::validation("number of samples must be positive"));
    }
    let cfg = dynamics.config();
    let kernel = cfg.kernel()?;
    let batch = normalize_study(context)?;
    let sc = batch.scales;
    let p = prefix_times.len();
    let mut times = prefix_times.to_vec();
    times.extend_from_slice(future_times);
    let tn: Vec<f64> = times.iter().map(|&t| sc.norm_time(t)).collect();
    let yp: Vec<f64> = prefix_values.iter().map(|&c| sc.norm_conc(c)).collect();
    let target = TargetState::new(tn.clone(), p, sc.norm_dose(dose.amount), dose.route)?;
    let post = crate::gp::gp_posterior(&tn[..p], &yp, &kernel, cfg.gp_jitter)?;
    let base: u64 = rng.random();
    let z0: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut r = stream(base, &[domain::INFER, s as u64]);
            let raw = crate::gp::gp_posterior_sample(&post, &tn[p..], &mut r)?;
            let mut z = yp.clone();
            z.extend(raw.into_iter().map(crate::gp::softplus));
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let targets = vec![target; n_samples];
    let z1 = dynamics.integrate(&batch, &targets, z0, opts)?;
    let samples: Vec<Vec<f64>> = z1
        .iter()
        .map(|z| {
            let mut out = prefix_values.to_vec();
            out.extend(z[p..].iter().map(|&v| sc.denorm_conc(v).max(0.0)));
            out
        })
        .collect();
    let summary = summarize(&times, &samples, &SUMMARY_QUANTILES)?;
    Ok(SampleSet {
        times,
        samples,
        doses: vec![dose; n_samples],
        summary,
    })
}

/// Reference-only forecast helper kept for symmetry with synthesis: the
/// source law of the forecasting flow on the future grid.
pub fn reference_forecast_source(
    config: &ModelConfig,
    prefix_times: &[f64],
    prefix_values: &[f64],
    future_times: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    reference_sample(
        Some((prefix_times, prefix_values)),
        future_times,
        &config.kernel()?,
        config.gp_jitter,
        rng,
    )
}
