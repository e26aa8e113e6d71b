//! Hierarchical generative model of pharmacokinetic studies.
//!
//! A study draws its configuration from a [`MetaStudyPrior`]; each individual
//! then draws OU means around the study-level log means, simulates
//! time-varying kinetic parameters, integrates the compartment model and is
//! observed sparsely with proportional noise.

pub mod metrics;
pub mod observe;
pub mod ode;
pub mod ou;
pub mod prior;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::study::{DoseSpec, IndividualRecord, Study};

pub use metrics::{cohort_cv, compute_pk_metrics, CohortCv, PkMetrics};
pub use observe::{
    apply_observation_noise, characteristic_times, interpolate_linear, sample_observation_times,
};
pub use ode::{solve_pk_ode, DenseTrajectory, KineticPaths};
pub use ou::{sample_ou_path, OUSpec};
pub use prior::{sample_study_config, HyperDraw, MetaStudyPrior, StudyConfig};

/// Fresh parameter draws attempted per individual before a failure surfaces.
pub const MAX_SIMULATION_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectKinetics {
    pub log_volume: OUSpec,
    pub log_absorption: OUSpec,
    pub log_elimination: OUSpec,
    /// `(log k_plus, log k_minus)` per peripheral compartment.
    pub peripherals: Vec<(OUSpec, OUSpec)>,
}

fn individual_spec(h: &HyperDraw, rng: &mut Rng) -> Result<OUSpec> {
    let mu = if h.log_std > 0.0 {
        Normal::new(h.log_mean, h.log_std)
            .map_err(|e| Error::validation(e.to_string()))?
            .sample(rng)
    } else {
        h.log_mean
    };
    OUSpec::new(mu, 1.0 / h.tscl, h.tmag)
}

/// Individual OU specs: `mu ~ N(study log-mean, study log-std²)`,
/// `lambda = 1 / tscl`, `sigma = tmag`.
pub fn sample_subject_kinetics(config: &StudyConfig, rng: &mut Rng) -> Result<SubjectKinetics> {
    let log_volume = individual_spec(&config.volume, rng)?;
    let log_absorption = individual_spec(&config.absorption, rng)?;
    let log_elimination = individual_spec(&config.elimination, rng)?;
    let peripherals = config
        .peripheral_in
        .iter()
        .zip(&config.peripheral_out)
        .map(|(hin, hout)| Ok((individual_spec(hin, rng)?, individual_spec(hout, rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectKinetics {
        log_volume,
        log_absorption,
        log_elimination,
        peripherals,
    })
}

fn exp_path(spec: &OUSpec, grid: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    Ok(sample_ou_path(spec, grid, rng)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

pub fn sample_kinetic_paths(
    kin: &SubjectKinetics,
    grid: &[f64],
    rng: &mut Rng,
) -> Result<KineticPaths> {
    let volume = exp_path(&kin.log_volume, grid, rng)?;
    let absorption = exp_path(&kin.log_absorption, grid, rng)?;
    let elimination = exp_path(&kin.log_elimination, grid, rng)?;
    let mut peripheral_in = Vec::with_capacity(kin.peripherals.len());
    let mut peripheral_out = Vec::with_capacity(kin.peripherals.len());
    for (kp, km) in &kin.peripherals {
        peripheral_in.push(exp_path(kp, grid, rng)?);
        peripheral_out.push(exp_path(km, grid, rng)?);
    }
    Ok(KineticPaths {
        volume,
        absorption,
        elimination,
        peripheral_in,
        peripheral_out,
    })
}

/// One simulated individual: dense noise-free curve plus its observation.
#[derive(Debug, Clone)]
pub struct SimulatedIndividual {
    pub record: IndividualRecord,
    pub dense: DenseTrajectory,
}

/// Simulate a dense curve for a fresh individual of the study described by
/// `config`, retrying parameter draws that make the solver fail.
pub fn simulate_dense(
    config: &StudyConfig,
    dose: DoseSpec,
    rng: &mut Rng,
) -> Result<DenseTrajectory> {
    let mut last_err = None;
    for _ in 0..MAX_SIMULATION_ATTEMPTS {
        let kin = sample_subject_kinetics(config, rng)?;
        let paths = sample_kinetic_paths(&kin, &config.grid, rng)?;
        match solve_pk_ode(&paths, dose, &config.grid) {
            Ok(traj) => return Ok(traj),
            Err(e @ Error::SimulationFailure { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

/// Observe a fresh individual at `times` (or at sampled times when `None`).
pub fn simulate_individual(
    config: &StudyConfig,
    id: String,
    dose: DoseSpec,
    times: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<SimulatedIndividual> {
    let dense = simulate_dense(config, dose, rng)?;
    let times = match times {
        Some(t) => t.to_vec(),
        None => {
            let (t_peak, t_half) = characteristic_times(&dense)?;
            sample_observation_times(t_peak, t_half, &config.grid, rng)
        }
    };
    let clean: Vec<f64> = times
        .iter()
        .map(|&t| interpolate_linear(&dense.grid, &dense.concentration, t))
        .collect();
    let concentrations = apply_observation_noise(&clean, config.ruv, rng);
    Ok(SimulatedIndividual {
        record: IndividualRecord {
            id,
            dose,
            times,
            concentrations,
        },
        dense,
    })
}

/// Simulate one study from `seed`, returning the drawn configuration too.
pub fn simulate_study_with_config(
    prior: &MetaStudyPrior,
    study_id: &str,
    seed: u64,
) -> Result<(Study, StudyConfig)> {
    prior.validate()?;
    let mut rng = rng::stream(seed, &[rng::domain::STUDY]);
    let config = sample_study_config(prior, &mut rng);
    let individuals = config
        .doses
        .iter()
        .enumerate()
        .map(|(i, &dose)| {
            simulate_individual(&config, format!("ind{i:02}"), dose, None, &mut rng)
                .map(|s| s.record)
        })
        .collect::<Result<Vec<_>>>()?;
    let study = Study {
        study_id: format!("{study_id}-{}", config.drug_id),
        seed,
        individuals,
    };
    Ok((study, config))
}

pub fn simulate_study(prior: &MetaStudyPrior, study_id: &str, seed: u64) -> Result<Study> {
    simulate_study_with_config(prior, study_id, seed).map(|(s, _)| s)
}

/// Seed of study `index` under `master_seed`.
pub fn study_seed(master_seed: u64, index: usize) -> u64 {
    rng::derive_u64(master_seed, &[rng::domain::STUDY, index as u64])
}

/// `count` independent studies; study `i` is seeded from `(master_seed, i)`
/// so the corpus does not depend on the worker count.
pub fn simulate_corpus(
    prior: &MetaStudyPrior,
    master_seed: u64,
    count: usize,
) -> Result<Vec<Study>> {
    prior.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| simulate_study(prior, &format!("study{i:05}"), study_seed(master_seed, i)))
        .collect()
}
