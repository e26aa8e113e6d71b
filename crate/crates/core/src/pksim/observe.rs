//! Turning dense trajectories into sparse clinical-style observations.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pksim::ode::DenseTrajectory;
use crate::rng::Rng;

/// Number of observations per individual, inclusive.
pub const OBS_COUNT_RANGE: [usize; 2] = [5, 15];

/// Extra width of the early sampling window, in hours. Keeps the window open
/// for intravenous profiles whose peak sits at time zero.
pub const EARLY_WINDOW_PAD: f64 = 1.0;

pub const NOISE_FLOOR: f64 = 1e-6;

/// `(T_peak, T_half)` of a dense concentration curve.
///
/// `T_half` is the first grid time after the peak at which the concentration
/// has fallen to half the peak or below, and the end of the grid otherwise.
pub fn characteristic_times(traj: &DenseTrajectory) -> Result<(f64, f64)> {
    let conc = &traj.concentration;
    let (peak_idx, peak) =
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
    if !(peak > 0.0) {
        return Err(Error::DegenerateTrajectory(
            "concentration is identically zero".into(),
        ));
    }
    let half = 0.5 * peak;
    let t_half = conc[peak_idx + 1..]
        .iter()
        .position(|&c| c <= half)
        .map(|off| traj.grid[peak_idx + 1 + off])
        .unwrap_or(*traj.grid.last().unwrap());
    Ok((traj.grid[peak_idx], t_half))
}

/// Index of the last grid point not after `t`.
fn floor_index(grid: &[f64], t: f64) -> usize {
    grid.partition_point(|&g| g <= t).saturating_sub(1)
}

/// Irregular observation times on the simulation grid.
///
/// Each time comes from an even mixture of an early window
/// `U(0, min(2 T_peak + pad, stop))` and a late window
/// `U(T_peak, min(T_peak + 4 T_half, stop))`. Draws are floored onto the grid,
/// the pre-dose grid point is excluded, and duplicates are redrawn.
pub fn sample_observation_times(t_peak: f64, t_half: f64, grid: &[f64], rng: &mut Rng) -> Vec<f64> {
    let start = grid[0];
    let stop = *grid.last().unwrap();
    let n_obs = rng.random_range(OBS_COUNT_RANGE[0]..=OBS_COUNT_RANGE[1]);
    let early = [
        start,
        (2.0 * (t_peak - start) + start + EARLY_WINDOW_PAD).min(stop),
    ];
    let late_lo = t_peak.min(stop);
    let late = [late_lo, (t_peak + 4.0 * t_half).min(stop).max(late_lo)];

    let usable = grid.len() - 1;
    let target = n_obs.min(usable);
    let mut picked = BTreeSet::new();
    let mut attempts = 0;
    while picked.len() < target && attempts < 100 * n_obs {
        attempts += 1;
        let window = if rng.random_bool(0.5) { early } else { late };
        let t = if window[1] > window[0] {
            rng.random_range(window[0]..window[1])
        } else {
            window[0]
        };
        let idx = floor_index(grid, t);
        if idx > 0 {
            picked.insert(idx);
        }
    }
    // Narrow windows can starve the sampler; fall back to the nearest
    // unused points after the peak so that at least two remain.
    let mut k = floor_index(grid, t_peak).max(1);
    while picked.len() < 2 && k < grid.len() {
        picked.insert(k);
        k += 1;
    }
    picked.into_iter().map(|i| grid[i]).collect()
}

/// Proportional noise `c * max(1 + ruv * xi, floor)`.
pub fn apply_observation_noise(conc: &[f64], ruv: f64, rng: &mut Rng) -> Vec<f64> {
    conc.iter()
        .map(|&c| {
            let xi: f64 = StandardNormal.sample(rng);
            c * (1.0 + ruv * xi).max(NOISE_FLOOR)
        })
        .collect()
}

/// Piecewise-linear interpolation of `values` on `grid`, held constant
/// outside the grid.
pub fn interpolate_linear(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let n = grid.len();
    if t <= grid[0] {
        return values[0];
    }
    if t >= grid[n - 1] {
        return values[n - 1];
    }
    let hi = grid.partition_point(|&g| g <= t);
    let lo = hi - 1;
    if grid[lo] == t {
        return values[lo];
    }
    let w = (t - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pksim::ode::{solve_pk_ode, KineticPaths};
    use crate::pksim::prior::uniform_grid;
    use crate::rng::stream;
    use crate::study::{DoseSpec, Route};

    fn traj_from(conc: Vec<f64>, grid: Vec<f64>) -> DenseTrajectory {
        DenseTrajectory {
            states: conc.iter().map(|&c| vec![0.0, c]).collect(),
            concentration: conc,
            grid,
        }
    }

    #[test]
    fn iv_half_life() {
        let grid = uniform_grid(0.0, 24.0, 100);
        let ke = 0.2;
        let paths = KineticPaths::constant(100, 2.0, 1.0, ke, &[]);
        let traj = solve_pk_ode(
            &paths,
            DoseSpec::new(10.0, Route::Intravenous).unwrap(),
            &grid,
        )
        .unwrap();
        let (tp, th) = characteristic_times(&traj).unwrap();
        assert_eq!(tp, 0.0);
        // first grid point at or after ln2/ke, i.e. within one spacing above it
        let exact = std::f64::consts::LN_2 / ke;
        let spacing = grid[1] - grid[0];
        assert!(
            th >= exact - 1e-9 && th < exact + spacing,
            "{th} vs {exact}"
        );
    }

    #[test]
    fn monotone_increasing_never_halves() {
        let grid = uniform_grid(0.0, 24.0, 25);
        let conc: Vec<f64> = grid.iter().map(|t| 1.0 + t).collect();
        let (tp, th) = characteristic_times(&traj_from(conc, grid)).unwrap();
        assert_eq!(tp, 24.0);
        assert_eq!(th, 24.0);
    }

    #[test]
    fn bateman_peak_time() {
        let grid = uniform_grid(0.0, 24.0, 100);
        let (ka, ke) = (2.0, 0.2);
        let conc: Vec<f64> = grid
            .iter()
            .map(|t| ka / (ka - ke) * ((-ke * t).exp() - (-ka * t).exp()))
            .collect();
        let (tp, _) = characteristic_times(&traj_from(conc, grid.clone())).unwrap();
        let exact = (ka / ke).ln() / (ka - ke);
        let nearest = grid
            .iter()
            .copied()
            .min_by(|a, b| (a - exact).abs().total_cmp(&(b - exact).abs()))
            .unwrap();
        assert_eq!(tp, nearest);
    }

    #[test]
    fn zero_trajectory_is_degenerate() {
        let grid = uniform_grid(0.0, 24.0, 10);
        let err = characteristic_times(&traj_from(vec![0.0; 10], grid)).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrajectory(_)));
    }

    #[test]
    fn observation_times_contract() {
        let grid = uniform_grid(0.0, 24.0, 100);
        let mut rng = stream(17, &[]);
        for i in 0..2000 {
            let tp = (i % 40) as f64 * 0.6;
            let th = tp + (i % 7) as f64;
            let ts = sample_observation_times(tp, th, &grid, &mut rng);
            assert!(ts.len() >= 2 && ts.len() <= 15);
            assert!(ts.windows(2).all(|w| w[1] > w[0]));
            assert!(ts.iter().all(|&t| t > 0.0 && t <= 24.0));
        }
    }

    #[test]
    fn observation_support_bound() {
        let grid = uniform_grid(0.0, 24.0, 100);
        let mut rng = stream(3, &[]);
        for _ in 0..2000 {
            let ts = sample_observation_times(1.0, 2.0, &grid, &mut rng);
            assert!(ts.iter().all(|&t| t <= 9.0), "{ts:?}");
        }
    }

    #[test]
    fn observation_count_histogram_is_uniform() {
        // Chi-square on {5..15}; 10 dof, 0.999 quantile 29.59. A wide late
        // window keeps duplicates from truncating counts.
        let grid = uniform_grid(0.0, 24.0, 100);
        let mut rng = stream(8, &[]);
        let n = 10_000;
        let mut counts = [0usize; 11];
        for _ in 0..n {
            let k = sample_observation_times(4.0, 6.0, &grid, &mut rng).len();
            counts[k - 5] += 1;
        }
        let expected = n as f64 / 11.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 29.59, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn noise_properties() {
        let mut rng = stream(4, &[]);
        let conc = [0.0, 1.0, 2.5];
        assert_eq!(apply_observation_noise(&conc, 0.0, &mut rng), conc.to_vec());
        let zeros = apply_observation_noise(&[0.0; 10], 0.1, &mut rng);
        assert!(zeros.iter().all(|&c| c == 0.0));

        let n = 100_000;
        let ys = apply_observation_noise(&vec![1.0; n], 0.1, &mut rng);
        let m = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() / 0.1 < 0.03, "sd {sd}");
        assert!(apply_observation_noise(&[1.0; 1000], 0.99, &mut rng)
            .iter()
            .all(|&y| y > 0.0));
    }

    #[test]
    fn linear_interpolation() {
        let g = [0.0, 1.0, 3.0];
        let v = [0.0, 2.0, 6.0];
        assert_eq!(interpolate_linear(&g, &v, 0.5), 1.0);
        assert_eq!(interpolate_linear(&g, &v, 2.0), 4.0);
        assert_eq!(interpolate_linear(&g, &v, 3.0), 6.0);
        assert_eq!(interpolate_linear(&g, &v, -1.0), 0.0);
        assert_eq!(interpolate_linear(&g, &v, 5.0), 6.0);
    }
}
