//! Independent estimates of the true violation probability, used to check
//! certificates from below.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::normal;
use crate::spec::VerificationProblem;

/// Half-width of the quadrature domain for the latent variable.
pub const QUADRATURE_LIMIT: f64 = 10.0;
pub const QUADRATURE_SPACING: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Largest number of grid points [`grid_max_violation`] will evaluate.
pub const MAX_GRID_POINTS: usize = 10_000;

const CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEstimate {
    pub point_estimate: f64,
    pub lower95: f64,
    pub upper95: f64,
    pub samples: u64,
    pub seed: u64,
}

/// Two-sided 95% Clopper–Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64) -> (f64, f64) {
    assert!(n > 0 && k <= n, "need 0 <= k <= n, n > 0");
    let nf = n as f64;
    let kf = k as f64;
    let lower = if k == 0 {
        0.0
    } else if k == n {
        0.025f64.powf(1.0 / nf)
    } else {
        Beta::new(kf, nf - kf + 1.0)
            .expect("positive shape parameters")
            .inverse_cdf(0.025)
    };
    let upper = if k == n {
        1.0
    } else if k == 0 {
        -(0.025f64.ln() / nf).exp_m1()
    } else {
        Beta::new(kf + 1.0, nf - kf)
            .expect("positive shape parameters")
            .inverse_cdf(0.975)
    };
    (lower, upper)
}

/// Monte-Carlo frequency of `cᵀ f(u, z) + d ≥ 0` over `z ~ N(0, I)`.
///
/// Samples are drawn in order from a ChaCha8 stream seeded with `seed`, so
/// the result depends only on the inputs.
pub fn mc_violation(
    problem: &VerificationProblem,
    u: &[f64],
    samples: u64,
    seed: u64,
) -> Result<ViolationEstimate> {
    if samples < 1 {
        return Err(Error::Oracle("samples must be at least 1".into()));
    }
    check_point(problem, u)?;
    let z_dim = problem.z_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    let mut remaining = samples;
    while remaining > 0 {
        let n = remaining.min(CHUNK as u64) as usize;
        let z = Array2::from_shape_simple_fn((n, z_dim), || rng.sample::<f64, _>(StandardNormal));
        let values = problem.spec_values(u, z.view())?;
        hits += values.iter().filter(|v| **v >= 0.0).count() as u64;
        remaining -= n as u64;
    }
    let (lower95, upper95) = clopper_pearson(hits, samples);
    Ok(ViolationEstimate {
        point_estimate: hits as f64 / samples as f64,
        lower95,
        upper95,
        samples,
        seed,
    })
}

/// Violation probability for a scalar latent, by locating the sign changes
/// of `cᵀ f(u, z) + d` on a fine grid over `[−10, 10]` and summing normal mass.
/// The mass beyond `±10` is added in full, and values within `1e-12` (relative)
/// of zero are counted as violations.
pub fn quadrature_violation(problem: &VerificationProblem, u: &[f64], tolerance: f64) -> Result<f64> {
    if problem.z_dim() != 1 {
        return Err(Error::Oracle(format!(
            "quadrature needs z_dim = 1, got {}",
            problem.z_dim()
        )));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Oracle("tolerance must be positive".into()));
    }
    check_point(problem, u)?;
    let cells = (2.0 * QUADRATURE_LIMIT / QUADRATURE_SPACING).round() as usize;
    let grid: Vec<f64> = (0..=cells)
        .map(|i| -QUADRATURE_LIMIT + i as f64 * QUADRATURE_SPACING)
        .collect();
    let z = Array2::from_shape_vec((grid.len(), 1), grid.clone()).expect("column shape");
    let values = problem.spec_values(u, z.view())?;
    // Values within rounding of zero count as violations: where the spec
    // value vanishes identically (e.g. convexity on a linear piece) its sign
    // is noise, and `≥ 0` includes equality.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-12 * (1.0 + scale);
    let violates = |v: f64| v >= floor;
    let value_at = |t: f64| problem.spec_value(u, &[t]);

    let mut mass = 0.0;
    let mut start = violates(values[0]).then_some(grid[0]);
    for i in 0..cells {
        let (a, b) = (violates(values[i]), violates(values[i + 1]));
        if a == b {
            continue;
        }
        // Keep `lo` on the side matching `a`.
        let (mut lo, mut hi) = (grid[i], grid[i + 1]);
        while hi - lo > tolerance {
            let mid = 0.5 * (lo + hi);
            if violates(value_at(mid)?) == a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        match start.take() {
            // Leaving the violation set: count up to the outer end.
            Some(s) => mass += normal::interval_mass(s, hi),
            // Entering: start from the outer end.
            None => start = Some(lo),
        }
    }
    if let Some(s) = start {
        mass += normal::interval_mass(s, QUADRATURE_LIMIT);
    }
    let truncated = 2.0 * normal::cdf(-QUADRATURE_LIMIT);
    Ok((mass + truncated).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum OracleMethod {
    Mc { samples: u64, seed: u64 },
    Quadrature { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMaximum {
    /// Largest point estimate over the grid.
    pub max_value: f64,
    /// Largest lower confidence limit (equal to `max_value` for quadrature).
    pub max_lower95: f64,
    pub max_upper95: f64,
    /// Grid point achieving `max_value`.
    pub argmax: Vec<f64>,
    pub points: usize,
}

/// Uniform grid over the free box, `grid_points` per dimension including
/// both endpoints (the midpoint when `grid_points == 1`).
pub fn grid(problem: &VerificationProblem, grid_points: usize) -> Result<Vec<Vec<f64>>> {
    if grid_points < 1 {
        return Err(Error::Oracle("grid_points must be at least 1".into()));
    }
    let bx = &problem.free_box;
    let total = (0..bx.dim()).try_fold(1usize, |acc, _| acc.checked_mul(grid_points));
    match total {
        Some(t) if t <= MAX_GRID_POINTS => {}
        _ => {
            return Err(Error::Oracle(format!(
                "{grid_points}^{} grid points exceed the cap of {MAX_GRID_POINTS}",
                bx.dim()
            )))
        }
    }
    let axes: Vec<Vec<f64>> = bx
        .lower
        .iter()
        .zip(&bx.upper)
        .map(|(&lo, &hi)| {
            if grid_points == 1 {
                vec![0.5 * (lo + hi)]
            } else {
                let step = (hi - lo) / (grid_points - 1) as f64;
                (0..grid_points)
                    .map(|i| if i + 1 == grid_points { hi } else { lo + i as f64 * step })
                    .collect()
            }
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Largest oracle value over a grid of the free box: a lower-bound probe of
/// `sup_u P(violation)`.
pub fn grid_max_violation(
    problem: &VerificationProblem,
    grid_points: usize,
    method: OracleMethod,
) -> Result<GridMaximum> {
    let points = grid(problem, grid_points)?;
    let results: Vec<(f64, f64, f64)> = points
        .par_iter()
        .map(|u| match method {
            OracleMethod::Mc { samples, seed } => {
                let e = mc_violation(problem, u, samples, seed)?;
                Ok((e.point_estimate, e.lower95, e.upper95))
            }
            OracleMethod::Quadrature { tolerance } => {
                let v = quadrature_violation(problem, u, tolerance)?;
                Ok((v, v, v))
            }
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.0 > results[best].0 {
            best = i;
        }
    }
    Ok(GridMaximum {
        max_value: results[best].0,
        max_lower95: results.iter().map(|r| r.1).fold(0.0, f64::max),
        max_upper95: results.iter().map(|r| r.2).fold(0.0, f64::max),
        argmax: points[best].clone(),
        points: points.len(),
    })
}

fn check_point(problem: &VerificationProblem, u: &[f64]) -> Result<()> {
    if !problem.free_box.contains(u) {
        return Err(Error::Oracle(format!("point {u:?} lies outside the input box")));
    }
    Ok(())
}
