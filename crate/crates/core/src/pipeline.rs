//! The desk-scale end-to-end experiment: simulate, train, evaluate.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    loo_forecast_eval, mmd_rbf, vpc, win_fraction, Coverage, FlowForecaster, LooReport, Trajectory,
    VpcTable, DEFAULT_PREFIX_LEN, DEFAULT_VPC_BINS, MMD_GRID_POINTS, VPC_PERCENTILES,
};
use crate::infer::{synthesize_population, Dynamics, InferenceOptions};
use crate::io::study_to_json;
use crate::model::{FlowModel, ModelConfig};
use crate::pksim::{simulate_corpus, MetaStudyPrior};
use crate::rng::{derive_u64, domain, stream};
use crate::study::Study;
use crate::train::{train, CheckpointPolicy, EpochRecord, TrainConfig};

/// Scale knobs of the toy run; `default()` is the gated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyOptions {
    pub train_studies: usize,
    pub test_studies: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prefix_len: usize,
    pub forecast_samples: usize,
    pub vpc_studies: usize,
    pub vpc_replicates: usize,
    pub vpc_bins: usize,
    pub inference: InferenceOptions,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            train_studies: 2000,
            test_studies: 20,
            model: ModelConfig::toy(),
            train: TrainConfig::toy(0),
            prefix_len: DEFAULT_PREFIX_LEN,
            forecast_samples: 50,
            vpc_studies: 2,
            vpc_replicates: 100,
            vpc_bins: DEFAULT_VPC_BINS,
            inference: InferenceOptions::default(),
        }
    }
}

impl ToyOptions {
    /// A few-second run with the same code path, for tests.
    pub fn smoke() -> Self {
        let mut train = TrainConfig::toy(0);
        train.epochs = 2;
        train.batch_size = 4;
        Self {
            train_studies: 8,
            test_studies: 2,
            model: ModelConfig::miniature(),
            train,
            prefix_len: DEFAULT_PREFIX_LEN,
            forecast_samples: 4,
            vpc_studies: 1,
            vpc_replicates: 100,
            vpc_bins: 4,
            inference: InferenceOptions {
                steps: 4,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hashes {
    pub train_corpus: String,
    pub test_corpus: String,
    pub loss_history: String,
    pub parameters: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub options: ToyOptions,
    pub loss_history: Vec<EpochRecord>,
    /// `1 − min(loss) / loss(epoch 1)`.
    pub loss_drop: f64,
    pub trained: LooReport,
    pub baseline: LooReport,
    /// Share of subjects where the trained model beats the null field.
    pub win_fraction: f64,
    pub coverage: Coverage,
    pub vpc: Vec<VpcTable>,
    pub vpc_monotone: bool,
    pub vpc_coverage: f64,
    pub mmd2_trained: f64,
    pub mmd2_baseline: f64,
    pub hashes: Hashes,
}

impl ToyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the pretty JSON report.
    pub fn digest(&self) -> Result<String> {
        Ok(sha_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn corpus_hash(studies: &[Study]) -> Result<String> {
    let mut h = Sha256::new();
    for s in studies {
        h.update(study_to_json(s)?.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn params_hash(model: &FlowModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        h.update(name.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn loss_drop(history: &[EpochRecord]) -> f64 {
    let Some(first) = history.first() else {
        return 0.0;
    };
    let min = history
        .iter()
        .map(|e| e.mean_loss)
        .fold(f64::INFINITY, f64::min);
    1.0 - min / first.mean_loss
}

/// Held-out studies come from a stream disjoint from the training corpus.
pub fn test_corpus(seed: u64, count: usize) -> Result<Vec<Study>> {
    let mut studies = simulate_corpus(
        &MetaStudyPrior::default(),
        derive_u64(seed, &[domain::EVAL]),
        count,
    )?;
    for (i, s) in studies.iter_mut().enumerate() {
        s.study_id = format!("test{i:05}");
    }
    Ok(studies)
}

/// Held-out trajectories against one synthesized trajectory per subject at
/// its own dose and sampling times.
fn fidelity(
    dynamics: Dynamics,
    studies: &[Study],
    opts: &InferenceOptions,
    seed: u64,
) -> Result<f64> {
    let mut real = Vec::new();
    let mut synth = Vec::new();
    for (si, s) in studies.iter().enumerate() {
        for (i, r) in s.individuals.iter().enumerate() {
            let mut rng = stream(seed, &[si as u64, i as u64]);
            let set = synthesize_population(
                dynamics,
                &s.without(i),
                1,
                &r.times,
                Some(r.dose),
                opts,
                &mut rng,
            )?;
            real.push(Trajectory {
                times: r.times.clone(),
                values: r.concentrations.clone(),
            });
            synth.push(Trajectory {
                times: r.times.clone(),
                values: set.samples[0].clone(),
            });
        }
    }
    mmd_rbf(&real, &synth, MMD_GRID_POINTS)
}

/// Simulate, train, and compare against the null field on held-out studies.
/// Writes checkpoints under `out` when given.
pub fn run_toy_pipeline_with(
    seed: u64,
    opts: &ToyOptions,
    out: Option<&Path>,
) -> Result<(ToyReport, FlowModel)> {
    opts.model.validate()?;
    let mut tcfg = opts.train.clone();
    tcfg.seed = seed;
    tcfg.validate()?;
    if opts.vpc_studies > opts.test_studies {
        return Err(Error::validation("more VPC studies than test studies"));
    }
    log::info!("simulating {} training studies", opts.train_studies);
    let corpus = simulate_corpus(&MetaStudyPrior::default(), seed, opts.train_studies)?;
    let tests = test_corpus(seed, opts.test_studies)?;
    let mut model = FlowModel::new(opts.model.clone(), seed)?;
    let policy = match out {
        Some(dir) => CheckpointPolicy::in_dir(dir),
        None => CheckpointPolicy::default(),
    };
    let history = train(&mut model, &corpus, &tcfg, &policy)?;
    log::info!("evaluating on {} held-out studies", tests.len());
    let eval_seed = derive_u64(seed, &[domain::EVAL, 1]);
    let learned = FlowForecaster {
        dynamics: Dynamics::Learned(&model),
        n_samples: opts.forecast_samples,
        options: opts.inference,
    };
    let null = FlowForecaster {
        dynamics: Dynamics::Null(&opts.model),
        ..learned
    };
    let trained = loo_forecast_eval(&learned, &tests, opts.prefix_len, eval_seed)?;
    let baseline = loo_forecast_eval(&null, &tests, opts.prefix_len, eval_seed)?;
    let wins = win_fraction(&trained, &baseline)?;
    let mut vrng = stream(seed, &[domain::EVAL, 2]);
    let vpc_tables = tests[..opts.vpc_studies]
        .iter()
        .map(|s| {
            vpc(
                Dynamics::Learned(&model),
                s,
                opts.vpc_replicates,
                &VPC_PERCENTILES,
                opts.vpc_bins,
                &opts.inference,
                &mut vrng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (inside, total) =
        vpc_tables
            .iter()
            .flat_map(|t| &t.bins)
            .fold((0.0, 0usize), |(a, n), b| {
                if b.n_observed == 0 {
                    (a, n)
                } else {
                    (a + b.band_coverage * b.n_observed as f64, n + b.n_observed)
                }
            });
    let fseed: u64 = stream(seed, &[domain::EVAL, 3]).random();
    let mmd2_trained = fidelity(Dynamics::Learned(&model), &tests, &opts.inference, fseed)?;
    let mmd2_baseline = fidelity(Dynamics::Null(&opts.model), &tests, &opts.inference, fseed)?;
    let hashes = Hashes {
        train_corpus: corpus_hash(&corpus)?,
        test_corpus: corpus_hash(&tests)?,
        loss_history: sha_hex(history.to_csv().as_bytes()),
        parameters: params_hash(&model),
    };
    let report = ToyReport {
        seed,
        options: ToyOptions {
            train: tcfg,
            ..opts.clone()
        },
        loss_drop: loss_drop(&history.epochs),
        loss_history: history.epochs,
        coverage: trained.coverage.clone(),
        trained,
        baseline,
        win_fraction: wins,
        vpc_monotone: vpc_tables.iter().all(VpcTable::is_monotone),
        vpc_coverage: if total == 0 {
            f64::NAN
        } else {
            inside / total as f64
        },
        vpc: vpc_tables,
        mmd2_trained,
        mmd2_baseline,
        hashes,
    };
    Ok((report, model))
}

pub fn run_toy_pipeline(seed: u64) -> Result<ToyReport> {
    Ok(run_toy_pipeline_with(seed, &ToyOptions::default(), None)?.0)
}
