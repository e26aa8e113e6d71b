//! Linear compartmental system with gut, central and `P` peripheral pools,
//! integrated by classic RK4 with one step per grid interval. Rate constants
//! are piecewise constant, frozen at the left endpoint of each step.

use crate::error::{Error, Result};
use crate::study::{DoseSpec, Route};

/// Positive parameter values at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticPaths {
    pub volume: Vec<f64>,
    pub absorption: Vec<f64>,
    pub elimination: Vec<f64>,
    /// `peripheral_in[j][n]`: central -> peripheral j rate at grid point n.
    pub peripheral_in: Vec<Vec<f64>>,
    /// `peripheral_out[j][n]`: peripheral j -> central rate at grid point n.
    pub peripheral_out: Vec<Vec<f64>>,
}

impl KineticPaths {
    /// Time-constant paths, mostly for analytic checks.
    pub fn constant(
        n: usize,
        volume: f64,
        absorption: f64,
        elimination: f64,
        exchanges: &[(f64, f64)],
    ) -> Self {
        Self {
            volume: vec![volume; n],
            absorption: vec![absorption; n],
            elimination: vec![elimination; n],
            peripheral_in: exchanges.iter().map(|e| vec![e.0; n]).collect(),
            peripheral_out: exchanges.iter().map(|e| vec![e.1; n]).collect(),
        }
    }

    pub fn num_peripherals(&self) -> usize {
        self.peripheral_in.len()
    }
}

/// State layout: `[gut, central, peripheral_1, ..., peripheral_P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrajectory {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub concentration: Vec<f64>,
}

impl DenseTrajectory {
    pub fn central(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s[1])
    }

    pub fn total_amount(&self, n: usize) -> f64 {
        self.states[n].iter().sum()
    }
}

struct Rates<'a> {
    ka: f64,
    ke: f64,
    k_in: &'a [f64],
    k_out: &'a [f64],
}

fn derivative(x: &[f64], r: &Rates<'_>, dx: &mut [f64]) {
    let gut = x[0];
    let central = x[1];
    let absorbed = r.ka * gut;
    dx[0] = -absorbed;
    let mut dc = absorbed - r.ke * central;
    for j in 0..r.k_in.len() {
        let flux = r.k_in[j] * central - r.k_out[j] * x[2 + j];
        dc -= flux;
        dx[2 + j] = flux;
    }
    dx[1] = dc;
}

fn check_paths(paths: &KineticPaths, n: usize) -> Result<()> {
    let mut lens = vec![
        paths.volume.len(),
        paths.absorption.len(),
        paths.elimination.len(),
    ];
    lens.extend(paths.peripheral_in.iter().map(Vec::len));
    lens.extend(paths.peripheral_out.iter().map(Vec::len));
    if lens.iter().any(|&l| l != n) || paths.peripheral_in.len() != paths.peripheral_out.len() {
        return Err(Error::validation(
            "kinetic path lengths do not match the grid",
        ));
    }
    let all = paths
        .volume
        .iter()
        .chain(&paths.absorption)
        .chain(&paths.elimination)
        .chain(paths.peripheral_in.iter().flatten())
        .chain(paths.peripheral_out.iter().flatten());
    for &v in all {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::SimulationFailure {
                step: 0,
                reason: format!("invalid rate or volume {v}"),
            });
        }
    }
    if paths.volume.iter().any(|&v| v <= 0.0) {
        return Err(Error::SimulationFailure {
            step: 0,
            reason: "nonpositive volume".into(),
        });
    }
    Ok(())
}

/// Integrate the compartment amounts from the dose on `grid`.
///
/// A step fails when the state becomes non-finite, or when RK4 leaves its
/// stability region, which shows up as negative amounts or total drug
/// exceeding the administered dose.
pub fn solve_pk_ode(paths: &KineticPaths, dose: DoseSpec, grid: &[f64]) -> Result<DenseTrajectory> {
    let n = grid.len();
    if n < 2 {
        return Err(Error::validation("ODE grid needs at least two points"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("ODE grid must be strictly increasing"));
    }
    check_paths(paths, n)?;
    let dim = 2 + paths.num_peripherals();
    let mut x = vec![0.0; dim];
    match dose.route {
        Route::Oral => x[0] = dose.amount,
        Route::Intravenous => x[1] = dose.amount,
    }
    let tol = 1e-9 * dose.amount.abs().max(f64::MIN_POSITIVE);

    let mut states = Vec::with_capacity(n);
    states.push(x.clone());
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut tmp = vec![0.0; dim];
    let mut k_in = vec![0.0; paths.num_peripherals()];
    let mut k_out = vec![0.0; paths.num_peripherals()];

    for step in 0..n - 1 {
        let h = grid[step + 1] - grid[step];
        for j in 0..k_in.len() {
            k_in[j] = paths.peripheral_in[j][step];
            k_out[j] = paths.peripheral_out[j][step];
        }
        let rates = Rates {
            ka: paths.absorption[step],
            ke: paths.elimination[step],
            k_in: &k_in,
            k_out: &k_out,
        };
        derivative(&x, &rates, &mut k1);
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        derivative(&tmp, &rates, &mut k2);
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        derivative(&tmp, &rates, &mut k3);
        for i in 0..dim {
            tmp[i] = x[i] + h * k3[i];
        }
        derivative(&tmp, &rates, &mut k4);
        for i in 0..dim {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationFailure {
                step: step + 1,
                reason: "non-finite state".into(),
            });
        }
        if x.iter().any(|&v| v < -tol) {
            return Err(Error::SimulationFailure {
                step: step + 1,
                reason: "negative compartment amount (unstable step)".into(),
            });
        }
        if x.iter().sum::<f64>() > dose.amount + tol {
            return Err(Error::SimulationFailure {
                step: step + 1,
                reason: "total amount exceeds dose (unstable step)".into(),
            });
        }
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        states.push(x.clone());
    }

    let concentration = states
        .iter()
        .zip(&paths.volume)
        .map(|(s, v)| s[1] / v)
        .collect();
    Ok(DenseTrajectory {
        grid: grid.to_vec(),
        states,
        concentration,
    })
}
