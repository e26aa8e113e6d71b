//! Studies: cohorts of individuals with a dose and sparse, irregular,
//! noisy concentration measurements.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "iv")]
    Intravenous,
    #[serde(rename = "oral")]
    Oral,
}

impl Route {
    /// Numeric encoding fed to the embeddings: iv -> 0, oral -> 1.
    pub fn code(self) -> f64 {
        match self {
            Route::Intravenous => 0.0,
            Route::Oral => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Route::Intravenous => "iv",
            Route::Oral => "oral",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseSpec {
    pub amount: f64,
    pub route: Route,
}

impl DoseSpec {
    pub fn new(amount: f64, route: Route) -> Result<Self> {
        if !(amount.is_finite() && amount > 0.0) {
            return Err(Error::validation(format!(
                "dose amount must be positive, got {amount}"
            )));
        }
        Ok(Self { amount, route })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub id: String,
    pub dose: DoseSpec,
    pub times: Vec<f64>,
    pub concentrations: Vec<f64>,
}

impl IndividualRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(format!("subject `{}`: {msg}", self.id)));
        if self.times.is_empty() {
            return bad("no observations".into());
        }
        if self.times.len() != self.concentrations.len() {
            return bad(format!(
                "{} times but {} concentrations",
                self.times.len(),
                self.concentrations.len()
            ));
        }
        if !(self.dose.amount.is_finite() && self.dose.amount > 0.0) {
            return bad(format!("dose amount {} is not positive", self.dose.amount));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return bad("non-finite observation time".into());
        }
        if let Some(w) = self.times.windows(2).position(|w| w[1] <= w[0]) {
            return bad(format!(
                "times not strictly increasing at index {} ({} -> {})",
                w + 1,
                self.times[w],
                self.times[w + 1]
            ));
        }
        if let Some(i) = self
            .concentrations
            .iter()
            .position(|c| !(c.is_finite() && *c >= 0.0))
        {
            return bad(format!(
                "concentration {} at index {i} is negative or non-finite",
                self.concentrations[i]
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub seed: u64,
    pub individuals: Vec<IndividualRecord>,
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        if self.individuals.is_empty() {
            return Err(Error::validation(format!(
                "study `{}` has no individuals",
                self.study_id
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for ind in &self.individuals {
            ind.validate()?;
            if !seen.insert(ind.id.as_str()) {
                return Err(Error::validation(format!(
                    "study `{}`: duplicate subject id `{}`",
                    self.study_id, ind.id
                )));
            }
        }
        Ok(())
    }

    /// The study with one individual removed (leave-one-out context).
    pub fn without(&self, index: usize) -> Study {
        let individuals = self
            .individuals
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, ind)| ind.clone())
            .collect();
        Study {
            study_id: self.study_id.clone(),
            seed: self.seed,
            individuals,
        }
    }

    pub fn max_concentration(&self) -> f64 {
        self.individuals
            .iter()
            .flat_map(|i| i.concentrations.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn max_time(&self) -> f64 {
        self.individuals
            .iter()
            .filter_map(|i| i.times.last().copied())
            .fold(0.0, f64::max)
    }

    pub fn num_observations(&self) -> usize {
        self.individuals.iter().map(|i| i.len()).sum()
    }
}
