use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use funkflow::eval::{
    loo_forecast_eval, mmd_rbf, vpc, FlowForecaster, LooReport, Trajectory, VpcTable,
    DEFAULT_VPC_BINS, MMD_GRID_POINTS, VPC_PERCENTILES,
};
use funkflow::infer::{
    forecast_individual, synthesize_population, Dynamics, InferenceOptions, PredictionOutput,
    Solver,
};
use funkflow::io::{
    load_checkpoint, load_json, load_studies, load_study, save_checkpoint, save_json, save_studies,
    write_text, RunConfig, TrainingMeta,
};
use funkflow::model::{gradient_check, FlowModel, ModelConfig};
use funkflow::pipeline::{run_toy_pipeline_with, ToyOptions};
use funkflow::pksim::{
    cohort_cv, compute_pk_metrics, simulate_corpus, CohortCv, MetaStudyPrior, PkMetrics,
};
use funkflow::rng::stream;
use funkflow::study::{DoseSpec, Route, Study};
use funkflow::train::{train, CheckpointPolicy};
use funkflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "funkflow",
    version,
    about = "Simulate, train and sample PK flow models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct Sampling {
    /// ODE steps over [0, 1]
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = SolverArg::Euler)]
    solver: SolverArg,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum SolverArg {
    Euler,
    Rk4,
}

impl Sampling {
    fn options(self) -> InferenceOptions {
        let solver = match self.solver {
            SolverArg::Euler => Solver::Euler,
            SolverArg::Rk4 => Solver::Rk4,
        };
        InferenceOptions {
            steps: self.steps,
            solver,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a corpus of studies, one JSON file each
    Simulate {
        /// Meta-study prior JSON; missing fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        num_studies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a flow model on a study file or directory
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run config JSON with `model` and `train` sections
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and loss history
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample virtual subjects conditioned on a study
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_samples: usize,
        /// Comma-separated query times in hours; defaults to the study's sampling times
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Dose amount for every sample; defaults to resampling context doses
        #[arg(long)]
        dose: Option<f64>,
        #[arg(long, default_value = "oral")]
        route: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Forecast one subject from its first observations
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        subject: String,
        /// Number of leading observations to condition on
        #[arg(long, default_value_t = 4)]
        prefix: usize,
        /// Comma-separated future times; defaults to the subject's remaining times
        #[arg(long, value_delimiter = ',')]
        future_times: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Leave-one-subject-out forecasting, coverage, VPC and MMD
    Evaluate {
        /// Checkpoint; omit to score the null field
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        prefix_len: usize,
        /// Comma-separated subset of logrmse,coverage,vpc,mmd
        #[arg(long, value_delimiter = ',', default_value = "logrmse,coverage")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 50)]
        num_samples: usize,
        #[arg(long, default_value_t = 100)]
        vpc_replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Dose-normalised Cmax, Tmax and AUC per subject plus cohort CVs
    Pkmetrics {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every model gradient
    Gradcheck {
        /// Model config JSON; defaults to the miniature model
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// End-to-end toy experiment: simulate, train, evaluate against the null field
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pipeline options JSON; defaults to the gated configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FUNKFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::validation(format!(
            "FUNKFLOW_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            config,
            num_studies,
            seed,
            out,
        } => {
            let prior: MetaStudyPrior = match config {
                Some(p) => load_json(&p)?,
                None => MetaStudyPrior::default(),
            };
            let studies = simulate_corpus(&prior, seed, num_studies)?;
            save_studies(&out, &studies)?;
            log::info!("wrote {} studies to {}", studies.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            seed,
        } => {
            let mut cfg: RunConfig = match config {
                Some(p) => load_json(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let corpus = load_studies(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut model = FlowModel::new(cfg.model.clone(), cfg.train.seed)?;
            let history = train(
                &mut model,
                &corpus,
                &cfg.train,
                &CheckpointPolicy::in_dir(&out),
            )?;
            write_text(&out.join("history.csv"), &history.to_csv())?;
            let last = history.epochs.last();
            let meta = TrainingMeta {
                epoch: last.map_or(0, |e| e.epoch),
                mean_loss: last.map_or(f64::NAN, |e| e.mean_loss),
                seed: cfg.train.seed,
            };
            save_checkpoint(&out.join("final.ckpt"), &model, Some(&meta))?;
            log::info!(
                "best epoch {} loss {:.6e}",
                history.best_epoch,
                history.best_loss
            );
            Ok(())
        }
        Command::Synthesize {
            ckpt,
            study,
            num_samples,
            times,
            dose,
            route,
            seed,
            out,
            sampling,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let study = load_study(&study)?;
            let times = times.unwrap_or_else(|| study_times(&study));
            let dose = dose
                .map(|a| DoseSpec::new(a, parse_route(&route)?))
                .transpose()?;
            let mut rng = stream(seed, &[]);
            let set = synthesize_population(
                Dynamics::Learned(&model),
                &study,
                num_samples,
                &times,
                dose,
                &sampling.options(),
                &mut rng,
            )?;
            save_json(&out, &PredictionOutput::new(&study.study_id, None, &set))
        }
        Command::Forecast {
            ckpt,
            study,
            subject,
            prefix,
            future_times,
            num_samples,
            seed,
            out,
            sampling,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let study = load_study(&study)?;
            let idx = study
                .individuals
                .iter()
                .position(|r| r.id == subject)
                .ok_or_else(|| {
                    Error::validation(format!(
                        "subject {subject:?} not in study {}",
                        study.study_id
                    ))
                })?;
            let rec = &study.individuals[idx];
            if prefix == 0 || prefix > rec.len() {
                return Err(Error::validation(format!(
                    "prefix {prefix} out of range for subject {subject} with {} observations",
                    rec.len()
                )));
            }
            let future = match future_times {
                Some(t) => t,
                None if prefix < rec.len() => rec.times[prefix..].to_vec(),
                None => {
                    return Err(Error::validation(
                        "no remaining observation times; pass --future-times",
                    ))
                }
            };
            let mut rng = stream(seed, &[]);
            let set = forecast_individual(
                Dynamics::Learned(&model),
                &study.without(idx),
                &rec.times[..prefix],
                &rec.concentrations[..prefix],
                rec.dose,
                &future,
                num_samples,
                &sampling.options(),
                &mut rng,
            )?;
            save_json(
                &out,
                &PredictionOutput::new(&study.study_id, Some(&subject), &set),
            )
        }
        Command::Evaluate {
            ckpt,
            data,
            prefix_len,
            metrics,
            num_samples,
            vpc_replicates,
            seed,
            out,
            sampling,
        } => evaluate(
            ckpt.as_deref(),
            &data,
            prefix_len,
            &metrics,
            num_samples,
            vpc_replicates,
            seed,
            &out,
            sampling.options(),
        ),
        Command::Pkmetrics { data, out } => {
            let studies = load_studies(&data)?;
            let rows = studies
                .iter()
                .map(study_metrics)
                .collect::<Result<Vec<_>>>()?;
            save_json(&out, &rows)
        }
        Command::Gradcheck {
            config,
            tolerance,
            seed,
        } => {
            let cfg: ModelConfig = match config {
                Some(p) => load_json(&p)?,
                None => ModelConfig::miniature(),
            };
            let rep = gradient_check(&cfg, seed)?;
            println!("{}", serde_json::to_string(&rep)?);
            if rep.max_rel_error <= tolerance {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {:.3e} at {} exceeds {tolerance:e}",
                    rep.max_rel_error, rep.worst_param
                )))
            }
        }
        Command::Toy { seed, config, out } => {
            let opts: ToyOptions = match config {
                Some(p) => load_json(&p)?,
                None => ToyOptions::default(),
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let (report, model) = run_toy_pipeline_with(seed, &opts, Some(&out))?;
            save_checkpoint(&out.join("final.ckpt"), &model, None)?;
            write_text(&out.join("report.json"), &report.to_json()?)?;
            println!(
                "loss drop {:.3}  win fraction {:.3}  80% coverage {:.3}  vpc coverage {:.3}",
                report.loss_drop,
                report.win_fraction,
                report.coverage.at(0.8).unwrap_or(f64::NAN),
                report.vpc_coverage
            );
            Ok(())
        }
    }
}

fn parse_route(s: &str) -> Result<Route> {
    match s {
        "oral" => Ok(Route::Oral),
        "iv" => Ok(Route::Intravenous),
        other => Err(Error::validation(format!(
            "route must be \"oral\" or \"iv\", got {other:?}"
        ))),
    }
}

fn study_times(study: &Study) -> Vec<f64> {
    let mut t: Vec<f64> = study
        .individuals
        .iter()
        .flat_map(|r| r.times.iter().copied())
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[derive(Serialize)]
struct SubjectMetrics {
    id: String,
    #[serde(flatten)]
    metrics: PkMetrics,
}

#[derive(Serialize)]
struct StudyMetrics {
    study_id: String,
    subjects: Vec<SubjectMetrics>,
    cohort_cv: CohortCv,
}

fn study_metrics(study: &Study) -> Result<StudyMetrics> {
    let subjects = study
        .individuals
        .iter()
        .map(|r| {
            Ok(SubjectMetrics {
                id: r.id.clone(),
                metrics: compute_pk_metrics(&r.times, &r.concentrations, r.dose.amount)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<PkMetrics> = subjects.iter().map(|s| s.metrics).collect();
    Ok(StudyMetrics {
        study_id: study.study_id.clone(),
        cohort_cv: cohort_cv(&all)?,
        subjects,
    })
}

#[derive(Serialize, Default)]
struct EvalReport {
    model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast: Option<LooReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    vpc: Vec<VpcTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mmd2: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: Option<&Path>,
    data: &Path,
    prefix_len: usize,
    metrics: &[String],
    num_samples: usize,
    vpc_replicates: usize,
    seed: u64,
    out: &Path,
    opts: InferenceOptions,
) -> Result<()> {
    const KNOWN: [&str; 4] = ["logrmse", "coverage", "vpc", "mmd"];
    if let Some(m) = metrics.iter().find(|m| !KNOWN.contains(&m.as_str())) {
        return Err(Error::validation(format!(
            "unknown metric {m:?}; expected one of {}",
            KNOWN.join(",")
        )));
    }
    let want = |m: &str| metrics.iter().any(|x| x == m);
    let studies = load_studies(data)?;
    let loaded = ckpt.map(load_checkpoint).transpose()?;
    let null_cfg = ModelConfig::toy();
    let dynamics = match &loaded {
        Some((m, _)) => Dynamics::Learned(m),
        None => Dynamics::Null(&null_cfg),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut report = EvalReport {
        model: ckpt.map_or("null-field".into(), |p| p.display().to_string()),
        ..Default::default()
    };
    if want("logrmse") || want("coverage") {
        let f = FlowForecaster {
            dynamics,
            n_samples: num_samples,
            options: opts,
        };
        let loo = loo_forecast_eval(&f, &studies, prefix_len, seed)?;
        write_text(&out.join("scores.csv"), &loo.to_csv())?;
        let c = &loo.coverage;
        write_text(
            &out.join("coverage.csv"),
            &format!(
                "level,fraction,n\n{}",
                c.levels
                    .iter()
                    .zip(&c.fractions)
                    .map(|(l, f)| format!("{l},{f},{}\n", c.n))
                    .collect::<String>()
            ),
        )?;
        report.forecast = Some(loo);
    }
    if want("vpc") {
        let mut rng = stream(seed, &[1]);
        let mut csv = String::new();
        for s in studies.iter().filter(|s| s.individuals.len() > 1) {
            let t = vpc(
                dynamics,
                s,
                vpc_replicates,
                &VPC_PERCENTILES,
                DEFAULT_VPC_BINS,
                &opts,
                &mut rng,
            )?;
            let body = t.to_csv();
            if csv.is_empty() {
                csv.push_str(&body);
            } else {
                csv.push_str(body.split_once('\n').map_or("", |x| x.1));
            }
            report.vpc.push(t);
        }
        write_text(&out.join("vpc.csv"), &csv)?;
    }
    if want("mmd") {
        let mut real = Vec::new();
        let mut synth = Vec::new();
        for (si, s) in studies.iter().enumerate() {
            for (i, r) in s
                .individuals
                .iter()
                .enumerate()
                .filter(|_| s.individuals.len() > 1)
            {
                let mut rng = stream(seed, &[2, si as u64, i as u64]);
                let set = synthesize_population(
                    dynamics,
                    &s.without(i),
                    1,
                    &r.times,
                    Some(r.dose),
                    &opts,
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
        report.mmd2 = Some(mmd_rbf(&real, &synth, MMD_GRID_POINTS)?);
    }
    save_json(&out.join("report.json"), &report)
}
