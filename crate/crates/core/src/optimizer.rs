//! First-order descent on the certificate over `(λ, α, η)` with `β = α + η²`.
//!
//! Every iterate yields a valid certificate, so the optimizer only affects
//! tightness. The best iterate seen is returned, never the last one.
//!
//! Steps are Adam updates along [`GradientMode::Surrogate`], with a step size
//! halved on a fixed schedule. The raw gradient spans many orders of
//! magnitude (`‖ζ‖` is often tiny) and `φ(g/‖ζ‖)` underflows while the bound
//! is vacuous, so plain gradient steps stall.

use ndarray::{s, Array1, Zip};
use serde::{Deserialize, Serialize};

use crate::dual::{
    box_complement_probability, full_multipliers, gaussian_tail, relu_conjugate_argmax,
    Certificate, DualVariables, DEGENERATE_COEFF_NORM,
};
use crate::error::{Error, Result};
use crate::interval::{propagate, IntervalBounds, LatentBox};
use crate::normal;
use crate::spec::VerificationProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Multiplier applied to the step size every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Compare the analytic gradient with central differences at the start point.
    pub finite_difference_check: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.05,
            decay: 0.5,
            decay_every: 125,
            seed: 0,
            finite_difference_check: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidConfig("decay_every must be positive".into()));
        }
        Ok(())
    }

    fn step_size_at(&self, step: usize) -> f64 {
        self.step_size * self.decay.powi((step / self.decay_every) as i32)
    }
}

/// Gradient of the unclamped certificate `erfc_term + tail_term`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub lambda: Vec<Array1<f64>>,
    pub alpha: Array1<f64>,
    pub eta: Array1<f64>,
}

/// Objective value and its parts at one `(λ, α, η)`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub erfc_term: f64,
    pub tail_term: f64,
    pub g: f64,
    pub coeff_norm: f64,
    pub bounds: IntervalBounds,
}

impl Evaluation {
    fn certificate(&self, problem: &VerificationProblem, latent: &LatentBox, steps: usize) -> Certificate {
        Certificate {
            bound: self.objective.min(1.0),
            erfc_term: self.erfc_term,
            tail_term: self.tail_term,
            g_value: self.g,
            latent_coeff_norm: self.coeff_norm,
            alpha: latent.alpha.to_vec(),
            beta: latent.beta().to_vec(),
            steps_taken: steps,
            model_digest: problem.model_digest.clone(),
            spec_digest: problem.spec_digest.clone(),
        }
    }
}

/// Initial latent box `[−3, 3]` per coordinate.
pub fn default_latent(z_dim: usize) -> LatentBox {
    LatentBox::new(Array1::from_elem(z_dim, -3.0), Array1::from_elem(z_dim, 6f64.sqrt()))
}

/// Backward pass of `c` through the transposed Linear layers, scaling each
/// ReLU by 1 (active), 0 (dead) or ½ (unstable) according to its bounds.
pub fn init_duals(problem: &VerificationProblem, bounds: &IntervalBounds) -> DualVariables {
    let linears = problem.network.linears();
    let k_total = linears.len();
    let mut lambdas = vec![Array1::zeros(0); k_total - 1];
    let mut current = problem.c.clone();
    for k in (1..k_total).rev() {
        let iv = &bounds.layers[k - 1];
        let back = linears[k].weight.t().dot(&current);
        current = Zip::from(&back)
            .and(&iv.lower)
            .and(&iv.upper)
            .map_collect(|v, l, u| {
                let slope = if *l >= 0.0 {
                    1.0
                } else if *u <= 0.0 {
                    0.0
                } else {
                    0.5
                };
                v * slope
            });
        lambdas[k - 1] = current.clone();
    }
    DualVariables { lambdas }
}

/// Which derivative [`evaluate`] returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    None,
    /// Exact (sub)gradient of `erfc_term + tail_term`.
    Exact,
    /// Descent direction used by the optimizer. Equal to `Exact` while
    /// `g ≤ 0` (so `erfc_term ≤ ½`); for `g > 0`, where `Φ(g/‖ζ‖)` saturates
    /// and raising `‖ζ‖` would only move the bound towards ½, it is the
    /// gradient of the margin `g + κ‖ζ‖` in `λ` with the latent box frozen.
    Surrogate { kappa: f64 },
}

/// Evaluates the unclamped certificate and, optionally, a gradient.
pub fn evaluate(
    problem: &VerificationProblem,
    duals: &DualVariables,
    latent: &LatentBox,
    mode: GradientMode,
) -> Result<(Evaluation, Option<Gradient>)> {
    duals.check(problem)?;
    let bounds = propagate(problem, latent)?;
    let network = &problem.network;
    let linears = network.linears();
    let k_total = linears.len();
    let lambdas = full_multipliers(problem, duals);
    let xd = network.x_dim;

    // ∂g/∂λ_k for free blocks and ∂g/∂(l_k, u_k) for every layer box.
    let mut dg_lambda: Vec<Array1<f64>> = duals.lambdas.iter().map(|l| Array1::zeros(l.len())).collect();
    let mut dg_lower: Vec<Array1<f64>> = bounds.layers.iter().map(|iv| Array1::zeros(iv.lower.len())).collect();
    let mut dg_upper = dg_lower.clone();

    let lin0 = linears[0];
    let w_x = lin0.weight.slice(s![.., ..xd]);
    let nu0 = w_x.t().dot(&lambdas[0]);
    let x0_star: Array1<f64> = Zip::from(&nu0)
        .and(&bounds.input.lower)
        .and(&bounds.input.upper)
        .map_collect(|n, l, u| if n * u >= n * l { *u } else { *l });
    let mut g = problem.d + nu0.dot(&x0_star) + lambdas[0].dot(&lin0.bias);
    if k_total > 1 {
        dg_lambda[0] = w_x.dot(&x0_star) + &lin0.bias;
    }

    for k in 1..k_total {
        let nu = linears[k].weight.t().dot(&lambdas[k]);
        let prev = &lambdas[k - 1];
        let iv = &bounds.layers[k - 1];
        let width = nu.len();
        let mut post = Array1::zeros(width);
        for j in 0..width {
            let (l, u) = (iv.lower[j], iv.upper[j]);
            let (value, x) = relu_conjugate_argmax(nu[j], prev[j], l, u);
            g += value;
            post[j] = x.max(0.0);
            dg_lambda[k - 1][j] -= x;
            if x == u {
                dg_upper[k - 1][j] = if u > 0.0 { nu[j] - prev[j] } else { -prev[j] };
            } else if x == l {
                dg_lower[k - 1][j] = if l >= 0.0 { nu[j] - prev[j] } else { -prev[j] };
            }
        }
        g += lambdas[k].dot(&linears[k].bias);
        if k + 1 < k_total {
            dg_lambda[k] = &dg_lambda[k] + &(linears[k].weight.dot(&post) + &linears[k].bias);
        }
    }

    let w_z = network.latent_block();
    let zeta = w_z.t().dot(&lambdas[0]);
    let norm = zeta.dot(&zeta).sqrt();
    let erfc_term = gaussian_tail(g, norm);
    let tail_term = box_complement_probability(latent);
    let objective = erfc_term + tail_term;
    if !objective.is_finite() || !g.is_finite() {
        return Err(Error::InvalidConfig(format!("non-finite objective (g = {g})")));
    }
    let evaluation = Evaluation {
        objective,
        erfc_term,
        tail_term,
        g,
        coeff_norm: norm,
        bounds,
    };
    if mode == GradientMode::None {
        return Ok((evaluation, None));
    }

    // ∂‖ζ‖/∂λ_0 = W̃_0 ζ / ‖ζ‖ (taken as 0 at ζ = 0).
    let dnorm_dlambda0 = if k_total > 1 && norm >= DEGENERATE_COEFF_NORM {
        Some(w_z.dot(&zeta) / norm)
    } else {
        None
    };

    if let GradientMode::Surrogate { kappa } = mode {
        if g > 0.0 && norm >= DEGENERATE_COEFF_NORM {
            // Margin g + κ‖ζ‖ over λ only; the latent box is held fixed.
            let mut lambda = dg_lambda;
            if let Some(dn) = &dnorm_dlambda0 {
                lambda[0].scaled_add(kappa, dn);
            }
            let zeros = Array1::zeros(latent.dim());
            let grad = Gradient {
                lambda,
                alpha: zeros.clone(),
                eta: zeros,
            };
            return Ok((evaluation, Some(grad)));
        }
    }

    // erfc_term = Φ(g / ‖ζ‖); the degenerate branch has zero gradient.
    let (dj_dg, dj_dnorm) = if norm < DEGENERATE_COEFF_NORM {
        (0.0, 0.0)
    } else {
        let density = normal::pdf(g / norm);
        (density / norm, -density * g / (norm * norm))
    };

    let mut grad_lambda: Vec<Array1<f64>> = dg_lambda.iter().map(|v| v * dj_dg).collect();
    if let Some(dn) = &dnorm_dlambda0 {
        grad_lambda[0].scaled_add(dj_dnorm, dn);
    }

    let (dg_alpha, dg_beta) = evaluation.bounds.pullback_latent(network, &dg_lower, &dg_upper);
    let mut grad_alpha = dg_alpha * dj_dg;
    let mut grad_beta = dg_beta * dj_dg;

    // Tail term 1 − Π p_i with p_i = Φ(β_i) − Φ(α_i).
    let beta = latent.beta();
    let inside: Vec<f64> = latent
        .alpha
        .iter()
        .zip(beta.iter())
        .map(|(a, b)| 1.0 - (normal::cdf(*a) + normal::cdf(-b)).min(1.0))
        .collect();
    for i in 0..inside.len() {
        let others: f64 = inside
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| p)
            .product();
        grad_alpha[i] += others * normal::pdf(latent.alpha[i]);
        grad_beta[i] -= others * normal::pdf(beta[i]);
    }

    let grad = Gradient {
        lambda: grad_lambda,
        alpha: &grad_alpha + &grad_beta,
        eta: Zip::from(&grad_beta)
            .and(&latent.eta)
            .map_collect(|gb, e| 2.0 * e * gb),
    };
    Ok((evaluation, Some(grad)))
}

/// Exact gradient of the unclamped certificate.
pub fn gradient(
    problem: &VerificationProblem,
    duals: &DualVariables,
    latent: &LatentBox,
) -> Result<Gradient> {
    Ok(evaluate(problem, duals, latent, GradientMode::Exact)?
        .1
        .expect("gradient requested"))
}

/// Starting point for [`optimize_from`].
#[derive(Debug, Clone, PartialEq)]
pub struct StartPoint {
    pub duals: DualVariables,
    pub latent: LatentBox,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub certificate: Certificate,
    /// Iterate that produced `certificate`.
    pub best: StartPoint,
    pub initial_bound: f64,
    /// Largest relative deviation from central differences, when requested.
    pub finite_difference_error: Option<f64>,
}

pub fn optimize(problem: &VerificationProblem, config: &OptimizerConfig) -> Result<Certificate> {
    Ok(optimize_from(problem, config, None)?.certificate)
}

/// Runs gradient descent from `start`, or from [`init_duals`] and `[−3, 3]`.
///
/// `config.steps == 0` evaluates the start point only.
pub fn optimize_from(
    problem: &VerificationProblem,
    config: &OptimizerConfig,
    start: Option<&StartPoint>,
) -> Result<OptimizeOutcome> {
    if config.steps > 0 {
        config.validate()?;
    }
    problem.check()?;
    let mut point = match start {
        Some(s) => {
            s.duals.check(problem)?;
            s.clone()
        }
        None => {
            let latent = default_latent(problem.z_dim());
            let bounds = propagate(problem, &latent)?;
            StartPoint {
                duals: init_duals(problem, &bounds),
                latent,
            }
        }
    };

    let finite_difference_error = if config.finite_difference_check {
        Some(finite_difference_error(problem, &point)?)
    } else {
        None
    };

    // Margin weight: the standard normal quantile at ε, as a positive number.
    let kappa = -normal::quantile(problem.epsilon.min(0.5));
    let mut adam = Adam::new(flatten(&point).len());
    let mut best: Option<(f64, Certificate, StartPoint)> = None;
    let mut initial_bound = 1.0;
    for step in 0..=config.steps {
        let mode = if step < config.steps {
            GradientMode::Surrogate { kappa }
        } else {
            GradientMode::None
        };
        let (eval, grad) = match evaluate(problem, &point.duals, &point.latent, mode) {
            Ok(r) => r,
            Err(_) => break,
        };
        if step == 0 {
            initial_bound = eval.objective.min(1.0);
        }
        if best.as_ref().is_none_or(|(obj, _, _)| eval.objective < *obj) {
            best = Some((
                eval.objective,
                eval.certificate(problem, &point.latent, step),
                point.clone(),
            ));
        }
        let Some(grad) = grad else { break };
        let mut flat = flatten(&point);
        adam.step(&mut flat, &flatten_gradient(&grad), config.step_size_at(step));
        point = unflatten(&point, &flat);
    }

    let (certificate, best_point) = match best {
        Some((_, mut cert, p)) => {
            cert.steps_taken = config.steps;
            (cert, p)
        }
        None => (Certificate::vacuous(problem, &point.latent), point),
    };
    Ok(OptimizeOutcome {
        certificate,
        best: best_point,
        initial_bound,
        finite_difference_error,
    })
}

/// Adam moment estimates over the flattened coordinates.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Flattened `(λ, α, η)` coordinates, in that order.
pub fn flatten(point: &StartPoint) -> Vec<f64> {
    point
        .duals
        .lambdas
        .iter()
        .flatten()
        .chain(point.latent.alpha.iter())
        .chain(point.latent.eta.iter())
        .copied()
        .collect()
}

pub fn unflatten(template: &StartPoint, flat: &[f64]) -> StartPoint {
    let mut out = template.clone();
    let mut it = flat.iter().copied();
    for l in &mut out.duals.lambdas {
        l.iter_mut().for_each(|v| *v = it.next().expect("flat vector long enough"));
    }
    out.latent.alpha.iter_mut().for_each(|v| *v = it.next().expect("flat vector long enough"));
    out.latent.eta.iter_mut().for_each(|v| *v = it.next().expect("flat vector long enough"));
    out
}

pub fn flatten_gradient(grad: &Gradient) -> Vec<f64> {
    grad.lambda
        .iter()
        .flatten()
        .chain(grad.alpha.iter())
        .chain(grad.eta.iter())
        .copied()
        .collect()
}

/// `(analytic, central difference)` for every flattened coordinate.
pub fn finite_difference_pairs(
    problem: &VerificationProblem,
    point: &StartPoint,
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    let analytic = flatten_gradient(&gradient(problem, &point.duals, &point.latent)?);
    let base = flatten(point);
    let objective = |flat: &[f64]| -> Result<f64> {
        let p = unflatten(point, flat);
        Ok(evaluate(problem, &p.duals, &p.latent, GradientMode::None)?.0.objective)
    };
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
        out.push((analytic[i], fd));
    }
    Ok(out)
}

fn finite_difference_error(problem: &VerificationProblem, point: &StartPoint) -> Result<f64> {
    Ok(finite_difference_pairs(problem, point, 1e-5)?
        .into_iter()
        .map(|(a, fd)| (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8))
        .fold(0.0, f64::max))
}
