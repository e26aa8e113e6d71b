//! Hyperprior governing synthetic study generation, and the per-study
//! configuration drawn from it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::study::{DoseSpec, Route};

/// Closed real interval `[lo, hi]`.
pub type Interval = [f64; 2];

/// Closed integer interval `[lo, hi]`.
pub type CountInterval = [usize; 2];

/// Field names mirror the meta-study configuration table verbatim so that
/// configs can be copied across tools unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaStudyPrior {
    pub drug_id_options: Vec<String>,
    pub num_individuals_range: CountInterval,
    pub num_peripherals_range: CountInterval,
    pub solver_method: String,

    pub time_start: f64,
    pub time_stop: f64,
    pub time_num_steps: usize,

    pub log_k_a_mean_range: Interval,
    pub log_k_a_std_range: Interval,
    pub k_a_tmag_range: Interval,
    pub k_a_tscl_range: Interval,

    pub log_k_e_mean_range: Interval,
    pub log_k_e_std_range: Interval,
    pub k_e_tmag_range: Interval,
    pub k_e_tscl_range: Interval,

    #[serde(rename = "log_V_mean_range")]
    pub log_v_mean_range: Interval,
    #[serde(rename = "log_V_std_range")]
    pub log_v_std_range: Interval,
    #[serde(rename = "V_tmag_range")]
    pub v_tmag_range: Interval,
    #[serde(rename = "V_tscl_range")]
    pub v_tscl_range: Interval,

    pub log_k_1p_mean_range: Interval,
    pub log_k_1p_std_range: Interval,
    pub k_1p_tmag_range: Interval,
    pub k_1p_tscl_range: Interval,

    pub log_k_p1_mean_range: Interval,
    pub log_k_p1_std_range: Interval,
    pub k_p1_tmag_range: Interval,
    pub k_p1_tscl_range: Interval,

    pub rel_ruv_range: Interval,

    /// Log-uniform dose amount range (arbitrary units).
    #[serde(default = "default_dose_range")]
    pub dose_range: Interval,
    #[serde(default = "default_oral_probability")]
    pub oral_probability: f64,
}

fn default_dose_range() -> Interval {
    [1.0, 1000.0]
}

fn default_oral_probability() -> f64 {
    0.7
}

impl Default for MetaStudyPrior {
    fn default() -> Self {
        Self {
            drug_id_options: vec!["Drug_A".into(), "Drug_B".into(), "Drug_C".into()],
            num_individuals_range: [5, 10],
            num_peripherals_range: [1, 3],
            solver_method: "rk4".into(),
            time_start: 0.0,
            time_stop: 24.0,
            time_num_steps: 100,
            log_k_a_mean_range: [-1.0, 2.0],
            log_k_a_std_range: [0.15, 0.45],
            k_a_tmag_range: [0.01, 0.1],
            k_a_tscl_range: [1.0, 5.0],
            log_k_e_mean_range: [-5.0, 0.0],
            log_k_e_std_range: [0.15, 0.45],
            k_e_tmag_range: [0.01, 0.1],
            k_e_tscl_range: [1.0, 5.0],
            log_v_mean_range: [1.0, 7.0],
            log_v_std_range: [0.15, 0.45],
            v_tmag_range: [0.001, 0.01],
            v_tscl_range: [1.0, 5.0],
            log_k_1p_mean_range: [-4.0, 0.0],
            log_k_1p_std_range: [0.15, 0.45],
            k_1p_tmag_range: [0.01, 0.1],
            k_1p_tscl_range: [1.0, 5.0],
            log_k_p1_mean_range: [-4.0, -1.0],
            log_k_p1_std_range: [0.15, 0.45],
            k_p1_tmag_range: [0.01, 0.1],
            k_p1_tscl_range: [1.0, 5.0],
            rel_ruv_range: [0.01, 0.1],
            dose_range: default_dose_range(),
            oral_probability: default_oral_probability(),
        }
    }
}

/// The five kinetic parameters modelled as log-OU processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KineticParam {
    Volume,
    Absorption,
    Elimination,
    PeripheralIn,
    PeripheralOut,
}

/// Ranges of the study-level hyperparameters for one kinetic parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperRanges {
    pub log_mean: Interval,
    pub log_std: Interval,
    pub tmag: Interval,
    pub tscl: Interval,
}

impl MetaStudyPrior {
    pub fn hyper_ranges(&self, param: KineticParam) -> HyperRanges {
        let (log_mean, log_std, tmag, tscl) = match param {
            KineticParam::Volume => (
                self.log_v_mean_range,
                self.log_v_std_range,
                self.v_tmag_range,
                self.v_tscl_range,
            ),
            KineticParam::Absorption => (
                self.log_k_a_mean_range,
                self.log_k_a_std_range,
                self.k_a_tmag_range,
                self.k_a_tscl_range,
            ),
            KineticParam::Elimination => (
                self.log_k_e_mean_range,
                self.log_k_e_std_range,
                self.k_e_tmag_range,
                self.k_e_tscl_range,
            ),
            KineticParam::PeripheralIn => (
                self.log_k_1p_mean_range,
                self.log_k_1p_std_range,
                self.k_1p_tmag_range,
                self.k_1p_tscl_range,
            ),
            KineticParam::PeripheralOut => (
                self.log_k_p1_mean_range,
                self.log_k_p1_std_range,
                self.k_p1_tmag_range,
                self.k_p1_tscl_range,
            ),
        };
        HyperRanges {
            log_mean,
            log_std,
            tmag,
            tscl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail =
            |field: &str, msg: &str| Err(Error::validation(format!("prior `{field}`: {msg}")));
        let check = |field: &str, iv: Interval| -> Result<()> {
            if !(iv[0].is_finite() && iv[1].is_finite()) {
                return fail(field, "non-finite bound");
            }
            if iv[0] > iv[1] {
                return fail(field, "lower bound exceeds upper bound");
            }
            Ok(())
        };
        let count = |field: &str, iv: CountInterval| -> Result<()> {
            if iv[0] > iv[1] {
                return fail(field, "lower bound exceeds upper bound");
            }
            Ok(())
        };
        count("num_individuals_range", self.num_individuals_range)?;
        if self.num_individuals_range[0] == 0 {
            return fail(
                "num_individuals_range",
                "must allow at least one individual",
            );
        }
        count("num_peripherals_range", self.num_peripherals_range)?;
        if self.solver_method != "rk4" {
            return fail("solver_method", "only `rk4` is supported");
        }
        if self.drug_id_options.is_empty() {
            return fail("drug_id_options", "must list at least one drug id");
        }
        check("time", [self.time_start, self.time_stop])?;
        if self.time_stop <= self.time_start {
            return fail("time_stop", "must exceed time_start");
        }
        if self.time_num_steps < 2 {
            return fail("time_num_steps", "need at least two grid points");
        }
        for (name, param) in [
            ("V", KineticParam::Volume),
            ("k_a", KineticParam::Absorption),
            ("k_e", KineticParam::Elimination),
            ("k_1p", KineticParam::PeripheralIn),
            ("k_p1", KineticParam::PeripheralOut),
        ] {
            let r = self.hyper_ranges(param);
            check(&format!("log_{name}_mean_range"), r.log_mean)?;
            check(&format!("log_{name}_std_range"), r.log_std)?;
            check(&format!("{name}_tmag_range"), r.tmag)?;
            check(&format!("{name}_tscl_range"), r.tscl)?;
            if r.log_std[0] < 0.0 || r.tmag[0] < 0.0 {
                return fail(name, "std and tmag ranges must be nonnegative");
            }
            if r.tscl[0] <= 0.0 {
                return fail(name, "tscl range must be positive");
            }
        }
        check("rel_ruv_range", self.rel_ruv_range)?;
        if !(self.rel_ruv_range[0] >= 0.0 && self.rel_ruv_range[1] < 1.0) {
            return fail("rel_ruv_range", "must lie in [0, 1)");
        }
        check("dose_range", self.dose_range)?;
        if self.dose_range[0] <= 0.0 {
            return fail("dose_range", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.oral_probability) {
            return fail("oral_probability", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Uniform simulation grid `time_start..=time_stop` with `time_num_steps` points.
    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.time_start, self.time_stop, self.time_num_steps)
    }
}

pub fn uniform_grid(start: f64, stop: f64, points: usize) -> Vec<f64> {
    let step = (stop - start) / (points - 1) as f64;
    (0..points)
        .map(|i| {
            if i + 1 == points {
                stop
            } else {
                start + step * i as f64
            }
        })
        .collect()
}

/// Study-level hyperparameters of one kinetic parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDraw {
    pub log_mean: f64,
    pub log_std: f64,
    pub tmag: f64,
    pub tscl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub drug_id: String,
    pub num_individuals: usize,
    pub num_peripherals: usize,
    pub route: Route,
    pub doses: Vec<DoseSpec>,
    pub volume: HyperDraw,
    pub absorption: HyperDraw,
    pub elimination: HyperDraw,
    /// One entry per peripheral compartment.
    pub peripheral_in: Vec<HyperDraw>,
    pub peripheral_out: Vec<HyperDraw>,
    pub ruv: f64,
    pub grid: Vec<f64>,
}

fn uniform(rng: &mut Rng, iv: Interval) -> f64 {
    if iv[0] == iv[1] {
        iv[0]
    } else {
        rng.random_range(iv[0]..=iv[1])
    }
}

fn uniform_count(rng: &mut Rng, iv: CountInterval) -> usize {
    rng.random_range(iv[0]..=iv[1])
}

fn log_uniform(rng: &mut Rng, iv: Interval) -> f64 {
    uniform(rng, [iv[0].ln(), iv[1].ln()]).exp()
}

fn hyper_draw(rng: &mut Rng, r: HyperRanges) -> HyperDraw {
    HyperDraw {
        log_mean: uniform(rng, r.log_mean),
        log_std: uniform(rng, r.log_std),
        tmag: uniform(rng, r.tmag),
        tscl: uniform(rng, r.tscl),
    }
}

/// Draw one study configuration. Dose amount and route are drawn once and
/// shared by every individual of the study.
pub fn sample_study_config(prior: &MetaStudyPrior, rng: &mut Rng) -> StudyConfig {
    let drug_id = prior.drug_id_options[rng.random_range(0..prior.drug_id_options.len())].clone();
    let num_individuals = uniform_count(rng, prior.num_individuals_range);
    let num_peripherals = uniform_count(rng, prior.num_peripherals_range);
    let route = if rng.random_bool(prior.oral_probability) {
        Route::Oral
    } else {
        Route::Intravenous
    };
    let amount = log_uniform(rng, prior.dose_range);
    let doses = vec![DoseSpec { amount, route }; num_individuals];
    let volume = hyper_draw(rng, prior.hyper_ranges(KineticParam::Volume));
    let absorption = hyper_draw(rng, prior.hyper_ranges(KineticParam::Absorption));
    let elimination = hyper_draw(rng, prior.hyper_ranges(KineticParam::Elimination));
    let peripheral_in = (0..num_peripherals)
        .map(|_| hyper_draw(rng, prior.hyper_ranges(KineticParam::PeripheralIn)))
        .collect();
    let peripheral_out = (0..num_peripherals)
        .map(|_| hyper_draw(rng, prior.hyper_ranges(KineticParam::PeripheralOut)))
        .collect();
    let ruv = uniform(rng, prior.rel_ruv_range);
    StudyConfig {
        drug_id,
        num_individuals,
        num_peripherals,
        route,
        doses,
        volume,
        absorption,
        elimination,
        peripheral_in,
        peripheral_out,
        ruv,
        grid: prior.grid(),
    }
}
