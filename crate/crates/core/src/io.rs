//! File formats: study JSON, configs, checkpoints and reports.
//!
//! A checkpoint is one file: a single-line JSON manifest, a newline, then the
//! parameter values as little-endian f64 concatenated in manifest order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowModel, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::study::{DoseSpec, IndividualRecord, Route, Study};
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndividualFile {
    id: String,
    dose_amount: f64,
    route: Route,
    times: Vec<f64>,
    concentrations: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    study_id: String,
    seed: u64,
    individuals: Vec<IndividualFile>,
}

pub fn study_to_json(study: &Study) -> Result<String> {
    let file = StudyFile {
        study_id: study.study_id.clone(),
        seed: study.seed,
        individuals: study
            .individuals
            .iter()
            .map(|r| IndividualFile {
                id: r.id.clone(),
                dose_amount: r.dose.amount,
                route: r.dose.route,
                times: r.times.clone(),
                concentrations: r.concentrations.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parse with JSON-path error locations, then enforce study invariants.
pub fn study_from_json(text: &str) -> Result<Study> {
    let file: StudyFile = parse_json(text)?;
    let mut individuals = Vec::with_capacity(file.individuals.len());
    for ind in file.individuals {
        let dose = DoseSpec::new(ind.dose_amount, ind.route)
            .map_err(|e| Error::validation(format!("subject `{}`: {e}", ind.id)))?;
        individuals.push(IndividualRecord {
            id: ind.id,
            dose,
            times: ind.times,
            concentrations: ind.concentrations,
        });
    }
    let study = Study {
        study_id: file.study_id,
        seed: file.seed,
        individuals,
    };
    study.validate()?;
    Ok(study)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn save_study(path: &Path, study: &Study) -> Result<()> {
    let mut text = study_to_json(study)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn load_study(path: &Path) -> Result<Study> {
    study_from_json(&read_text(path)?).map_err(|e| match e {
        Error::Schema { path: p, message } => Error::Schema {
            path: p,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

/// A single study file, or every `*.json` file of a directory in name order.
pub fn load_studies(path: &Path) -> Result<Vec<Study>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| load_study(p)).collect()
    } else {
        Ok(vec![load_study(path)?])
    }
}

/// Write each study as `<dir>/<study_id>.json`.
pub fn save_studies(dir: &Path, studies: &[Study]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in studies {
        save_study(&dir.join(format!("{}.json", s.study_id)), s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub model_config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub training: Option<TrainingMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &FlowModel,
    training: Option<&TrainingMeta>,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: DTYPE.into(),
        model_config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
        training: training.cloned(),
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    for (_, t) in model.params.iter() {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so an interrupted save never clobbers a good checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowModel, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(FlowModel, CheckpointManifest)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let text = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let manifest: CheckpointManifest = parse_json(text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "unsupported data type `{}`",
            manifest.dtype
        )));
    }
    let blob = &bytes[nl + 1..];
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != 8 * total {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest needs {} ({} values)",
            blob.len(),
            8 * total,
            total
        )));
    }
    let mut params = ParamStore::new();
    let mut off = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = blob[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += 8 * n;
        params.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?)?;
    }
    let reference = FlowModel::new(manifest.model_config.clone(), 0)?;
    for ((name, want), (got_name, got)) in reference.params.iter().zip(params.iter()) {
        if name != got_name || want.shape != got.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{got_name}` has shape {:?}, configuration expects `{name}` with shape {:?}",
                got.shape, want.shape
            )));
        }
    }
    if reference.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, configuration expects {}",
            params.len(),
            reference.params.len()
        )));
    }
    Ok((
        FlowModel {
            config: manifest.model_config.clone(),
            params,
        },
        manifest,
    ))
}

/// Combined model and optimisation settings, as read by `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
}

fn default_train() -> TrainConfig {
    TrainConfig::toy(0)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: default_train(),
        }
    }
}
