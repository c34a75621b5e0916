//! Threshold sweeps over sliding input intervals.
//!
//! For each window `[δ, δ + width]` the sweep bisects for the smallest `a`
//! (property `upper`) such that `P(f(x, z) ≥ a) ≤ ε` is certified for every
//! `x` in the window, or the largest `b` (property `lower`) with
//! `P(f(x, z) ≤ b) ≤ ε`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{assemble_bound, Certificate, DualVariables};
use crate::error::{Error, Result};
use crate::interval::{propagate, LatentBox};
use crate::model::DecoderModel;
use crate::optimizer::{optimize_from, OptimizerConfig, StartPoint};
use crate::spec::{build_bounded_above, build_bounded_below, InputBox, VerificationProblem};

pub const CSV_HEADER: &str = "delta,threshold,certified_bound,erfc_term,tail_term,bisect_iters,opt_steps,flag";

/// Latent half-width used for the default bracket and the fallback certificate.
const WIDE_LATENT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    /// Smallest `a` with `P(f ≥ a) ≤ ε`.
    Upper,
    /// Largest `b` with `P(f ≤ b) ≤ ε`.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub delta_start: f64,
    pub delta_end: f64,
    pub delta_step: f64,
    pub width: f64,
    pub epsilon: f64,
    /// Threshold search interval; `None` uses the interval-propagation
    /// output range at a latent box of `[−6, 6]`.
    pub bracket: Option<[f64; 2]>,
    pub search_iters: usize,
    pub warm_start: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            delta_start: 0.0,
            delta_end: 0.98,
            delta_step: 0.02,
            width: 0.02,
            epsilon: 0.01,
            bracket: None,
            search_iters: 30,
            warm_start: true,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.delta_step > 0.0) {
            return bad(format!("delta_step must be positive, got {}", self.delta_step));
        }
        if !(self.width > 0.0) {
            return bad(format!("width must be positive, got {}", self.width));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.delta_end >= self.delta_start) {
            return bad("delta_end must not precede delta_start".into());
        }
        if let Some([lo, hi]) = self.bracket {
            if !(lo < hi) {
                return bad(format!("bracket must satisfy lo < hi, got [{lo}, {hi}]"));
            }
        }
        self.optimizer.validate()
    }

    /// `δ_i = delta_start + i · delta_step` up to `delta_end` inclusive.
    pub fn deltas(&self) -> Vec<f64> {
        let count = ((self.delta_end - self.delta_start) / self.delta_step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| {
                let d = self.delta_start + i as f64 * self.delta_step;
                (d * 1e12).round() / 1e12
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFlag {
    Ok,
    /// The bracket did not straddle ε; the threshold is a bracket endpoint.
    Bracket,
}

impl RowFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RowFlag::Ok => "ok",
            RowFlag::Bracket => "bracket",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub threshold: f64,
    pub certified_bound: f64,
    pub erfc_term: f64,
    pub tail_term: f64,
    pub bisect_iters: usize,
    pub opt_steps: usize,
    pub flag: RowFlag,
}

/// One threshold search problem. Both properties are searched over a
/// parameter `t` that is certified for large `t`: `t = a` for `upper` and
/// `t = −b` for `lower`. In both cases `d = −t`.
struct Search {
    problem: VerificationProblem,
    property: Property,
}

impl Search {
    fn new(model: &DecoderModel, property: Property, x_box: &InputBox, epsilon: f64) -> Result<Self> {
        let problem = match property {
            Property::Upper => build_bounded_above(model, 0.0, x_box, epsilon)?,
            Property::Lower => build_bounded_below(model, 0.0, x_box, epsilon)?,
        };
        Ok(Self { problem, property })
    }

    fn threshold(&self, t: f64) -> f64 {
        match self.property {
            Property::Upper => t,
            Property::Lower => -t,
        }
    }

    fn param(&self, threshold: f64) -> f64 {
        self.threshold(threshold)
    }

    fn at(&self, t: f64) -> VerificationProblem {
        self.problem.with_offset(-t)
    }
}

/// Smallest certificate found for `problem`: the optimized one, or if that
/// misses `ε`, the interval-only certificate (`λ = 0`, latent box `[−6, 6]`).
pub fn certify(
    problem: &VerificationProblem,
    config: &OptimizerConfig,
    start: Option<&StartPoint>,
) -> Result<(Certificate, StartPoint)> {
    let outcome = optimize_from(problem, config, start)?;
    let mut cert = outcome.certificate;
    if !cert.verifies(problem.epsilon) {
        let latent = LatentBox::uniform(problem.z_dim(), -WIDE_LATENT, WIDE_LATENT);
        if let Ok(mut fallback) = assemble_bound(problem, &DualVariables::zeros(problem), &latent) {
            if fallback.bound < cert.bound {
                fallback.steps_taken = cert.steps_taken;
                cert = fallback;
            }
        }
    }
    Ok((cert, outcome.best))
}

/// Output range from interval propagation over `x_box` and a `[−6, 6]`
/// latent box.
pub fn default_bracket(model: &DecoderModel, x_box: &InputBox) -> Result<[f64; 2]> {
    let problem = build_bounded_above(model, 0.0, x_box, 0.5)?;
    let bounds = propagate(&problem, &LatentBox::uniform(model.z_dim, -WIDE_LATENT, WIDE_LATENT))?;
    let out = bounds.output();
    Ok([out.lower[0], out.upper[0]])
}

/// Threshold search on one window. Returns the row and the optimizer point
/// at the certified end, for warm-starting the next window.
pub fn search_window(
    model: &DecoderModel,
    property: Property,
    delta: f64,
    config: &SweepConfig,
    warm: Option<&StartPoint>,
) -> Result<(SweepRow, StartPoint)> {
    let x_box = InputBox::interval(delta, delta + config.width)?;
    let search = Search::new(model, property, &x_box, config.epsilon)?;
    let [mut lo, mut hi] = match config.bracket {
        Some([a, b]) => {
            let (ta, tb) = (search.param(a), search.param(b));
            [ta.min(tb), ta.max(tb)]
        }
        None => {
            let [l, u] = default_bracket(model, &x_box)?;
            // Nudged past the range so the certified end is strictly certified.
            let margin = 1e-6 * (1.0 + l.abs().max(u.abs()));
            [search.param(l).min(search.param(u)), search.param(l).max(search.param(u)) + margin]
        }
    };
    let eps = config.epsilon;
    let opt = &config.optimizer;
    let row = |t: f64, cert: &Certificate, iters: usize, flag: RowFlag| SweepRow {
        delta,
        threshold: search.threshold(t),
        certified_bound: cert.bound,
        erfc_term: cert.erfc_term,
        tail_term: cert.tail_term,
        bisect_iters: iters,
        opt_steps: cert.steps_taken,
        flag,
    };

    let (mut hi_cert, mut hi_point) = certify(&search.at(hi), opt, warm)?;
    if !hi_cert.verifies(eps) {
        return Ok((row(hi, &hi_cert, 0, RowFlag::Bracket), hi_point));
    }
    let (lo_cert, lo_point) = certify(&search.at(lo), opt, warm)?;
    if lo_cert.verifies(eps) {
        return Ok((row(lo, &lo_cert, 0, RowFlag::Bracket), lo_point));
    }
    for _ in 0..config.search_iters {
        let mid = 0.5 * (lo + hi);
        let (cert, point) = certify(&search.at(mid), opt, warm)?;
        if cert.verifies(eps) {
            hi = mid;
            hi_cert = cert;
            hi_point = point;
        } else {
            lo = mid;
        }
    }
    Ok((row(hi, &hi_cert, config.search_iters, RowFlag::Ok), hi_point))
}

/// Runs the whole sweep. Windows run in order when warm-starting, otherwise
/// in parallel; the rows are identical for identical inputs either way.
pub fn run_sweep(model: &DecoderModel, property: Property, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if model.x_dim != 1 || model.out_dim() != 1 {
        return Err(Error::InvalidSpec(format!(
            "sweeps need a scalar input and output, got x_dim = {}, out_dim = {}",
            model.x_dim,
            model.out_dim()
        )));
    }
    let deltas = config.deltas();
    if config.warm_start {
        let mut rows = Vec::with_capacity(deltas.len());
        let mut warm: Option<StartPoint> = None;
        for &delta in &deltas {
            let (row, point) = search_window(model, property, delta, config, warm.as_ref())?;
            rows.push(row);
            warm = Some(point);
        }
        Ok(rows)
    } else {
        deltas
            .par_iter()
            .map(|&delta| search_window(model, property, delta, config, None).map(|(r, _)| r))
            .collect()
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.delta,
            r.threshold,
            r.certified_bound,
            r.erfc_term,
            r.tail_term,
            r.bisect_iters,
            r.opt_steps,
            r.flag.as_str()
        )
        .expect("writing to a String");
    }
    out
}

/// Writes `contents` through a temporary file in the same directory and
/// renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
