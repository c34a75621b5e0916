//! Lagrangian dual bound and the probabilistic certificate built on it.
//!
//! For a network with `K` Linear layers, relaxing the layer equations with
//! multipliers `λ_0 … λ_{K−2}` (and `λ_{K−1} = c`) gives, for every `z` in the
//! latent box and every `u` in the free box,
//!
//! ```text
//! cᵀ f(u, z) + d ≤ G(λ, z) = g(λ) + ζᵀz,        ζ = W̃_0ᵀ λ_0
//! g(λ) = d + Σ_k [ max_{l_k ≤ x_k ≤ u_k} ν_kᵀ h_k(x_k) − λ_{k−1}ᵀ x_k + λ_kᵀ b_k ]
//! ```
//!
//! with `ν_k = W_kᵀ λ_k`, `h_0 = id`, `λ_{−1} = 0`, `h_k = relu` otherwise.
//! Because `ζᵀz ~ N(0, ‖ζ‖²)` when `z ~ N(0, I)`,
//!
//! ```text
//! P(cᵀ f + d ≥ 0) ≤ ½ erfc(−g / (√2 ‖ζ‖)) + P(z ∉ [α, β])
//! ```
//!
//! for any `λ` and any `α ≤ β`.

use ndarray::{s, Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{propagate, IntervalBounds, LatentBox};
use crate::normal;
use crate::spec::VerificationProblem;

/// Below this norm the latent term is treated as absent.
pub const DEGENERATE_COEFF_NORM: f64 = 1e-12;

/// Free multipliers `λ_0 … λ_{K−2}`; `λ_k` has the width of `x_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariables {
    pub lambdas: Vec<Array1<f64>>,
}

impl DualVariables {
    pub fn zeros(problem: &VerificationProblem) -> Self {
        let linears = problem.network.linears();
        let lambdas = linears[..linears.len() - 1]
            .iter()
            .map(|lin| Array1::zeros(lin.out_dim()))
            .collect();
        Self { lambdas }
    }

    /// Total number of free dual coordinates.
    pub fn len(&self) -> usize {
        self.lambdas.iter().map(Array1::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, problem: &VerificationProblem) -> Result<()> {
        let expected = Self::zeros(problem);
        if self.lambdas.len() != expected.lambdas.len() {
            return Err(Error::Dimension {
                what: "dual variable blocks",
                expected: expected.lambdas.len(),
                got: self.lambdas.len(),
            });
        }
        for (have, want) in self.lambdas.iter().zip(&expected.lambdas) {
            if have.len() != want.len() {
                return Err(Error::Dimension {
                    what: "dual variable block",
                    expected: want.len(),
                    got: have.len(),
                });
            }
        }
        if self.lambdas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite dual variable".into()));
        }
        Ok(())
    }
}

/// `λ_0 … λ_{K−1}` with the fixed last block `λ_{K−1} = c`.
pub(crate) fn full_multipliers<'a>(
    problem: &'a VerificationProblem,
    duals: &'a DualVariables,
) -> Vec<ArrayView1<'a, f64>> {
    duals
        .lambdas
        .iter()
        .map(|l| l.view())
        .chain(std::iter::once(problem.c.view()))
        .collect()
}

/// Result of one bound evaluation, serialized as the certificate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub bound: f64,
    pub erfc_term: f64,
    pub tail_term: f64,
    #[serde(rename = "g")]
    pub g_value: f64,
    #[serde(rename = "coeff_norm")]
    pub latent_coeff_norm: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(rename = "steps")]
    pub steps_taken: usize,
    pub model_digest: String,
    pub spec_digest: String,
}

impl Certificate {
    /// The trivially valid certificate `P ≤ 1` (recorded as `g = 0`, `‖ζ‖ = 0`).
    pub fn vacuous(problem: &VerificationProblem, latent: &LatentBox) -> Self {
        Self {
            bound: 1.0,
            erfc_term: 1.0,
            tail_term: box_complement_probability(latent),
            g_value: 0.0,
            latent_coeff_norm: 0.0,
            alpha: latent.alpha.to_vec(),
            beta: latent.beta().to_vec(),
            steps_taken: 0,
            model_digest: problem.model_digest.clone(),
            spec_digest: problem.spec_digest.clone(),
        }
    }

    pub fn verifies(&self, epsilon: f64) -> bool {
        self.bound <= epsilon
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// Candidate maximizer of `ν·relu(x) − λ·x` on `[l, u]`, ties going to the largest `x`.
pub(crate) fn relu_conjugate_argmax(nu: f64, lam: f64, l: f64, u: f64) -> (f64, f64) {
    let objective = |x: f64| nu * x.max(0.0) - lam * x;
    let mut best = (objective(u), u);
    if l < 0.0 && 0.0 < u {
        let v = objective(0.0);
        if v > best.0 {
            best = (v, 0.0);
        }
    }
    if l < u {
        let v = objective(l);
        if v > best.0 {
            best = (v, l);
        }
    }
    best
}

/// `max_{l ≤ x ≤ u} ν·relu(x) − λ·x`, exact.
pub fn relu_conjugate_max(nu: f64, lam: f64, l: f64, u: f64) -> f64 {
    relu_conjugate_argmax(nu, lam, l, u).0
}

/// `max_{l ≤ x ≤ u} νᵀx`.
pub fn input_term(nu: ArrayView1<f64>, lower: ArrayView1<f64>, upper: ArrayView1<f64>) -> f64 {
    nu.iter()
        .zip(lower.iter().zip(upper.iter()))
        .map(|(n, (l, u))| (n * l).max(n * u))
        .sum()
}

/// `ζ = W̃_0ᵀ λ_0`, the coefficient of `z` in `G`.
pub fn latent_coefficient(problem: &VerificationProblem, duals: &DualVariables) -> Array1<f64> {
    let lambdas = full_multipliers(problem, duals);
    problem.network.latent_block().t().dot(&lambdas[0])
}

/// `g(λ) = G(λ, z) − ζᵀz` for the given interval bounds.
pub fn dual_value_deterministic(
    problem: &VerificationProblem,
    duals: &DualVariables,
    bounds: &IntervalBounds,
) -> Result<f64> {
    duals.check(problem)?;
    let linears = problem.network.linears();
    let lambdas = full_multipliers(problem, duals);
    let xd = problem.network.x_dim;

    let lin0 = linears[0];
    let nu0 = lin0.weight.slice(s![.., ..xd]).t().dot(&lambdas[0]);
    let mut g = problem.d
        + input_term(nu0.view(), bounds.input.lower.view(), bounds.input.upper.view())
        + lambdas[0].dot(&lin0.bias);

    for k in 1..linears.len() {
        let nu = linears[k].weight.t().dot(&lambdas[k]);
        let prev = &lambdas[k - 1];
        let iv = &bounds.layers[k - 1];
        g += (0..nu.len())
            .map(|j| relu_conjugate_max(nu[j], prev[j], iv.lower[j], iv.upper[j]))
            .sum::<f64>();
        g += lambdas[k].dot(&linears[k].bias);
    }
    Ok(g)
}

/// `G(λ, z) = g(λ) + ζᵀz`.
pub fn dual_value_at(
    problem: &VerificationProblem,
    duals: &DualVariables,
    bounds: &IntervalBounds,
    z: &[f64],
) -> Result<f64> {
    let zeta = latent_coefficient(problem, duals);
    if z.len() != zeta.len() {
        return Err(Error::Dimension {
            what: "latent input z",
            expected: zeta.len(),
            got: z.len(),
        });
    }
    Ok(dual_value_deterministic(problem, duals, bounds)? + zeta.dot(&ArrayView1::from(z)))
}

/// `P(ζᵀz ≥ −g)` for `z ~ N(0, I)`, with `‖ζ‖ = coeff_norm`.
pub fn gaussian_tail(g: f64, coeff_norm: f64) -> f64 {
    if coeff_norm < DEGENERATE_COEFF_NORM {
        return if g >= 0.0 { 1.0 } else { 0.0 };
    }
    normal::cdf(g / coeff_norm).clamp(0.0, 1.0)
}

/// `P(z ∉ [α, β])` for `z ~ N(0, I)`.
pub fn box_complement_probability(latent: &LatentBox) -> f64 {
    // 1 − Π(1 − q_i) with q_i the per-coordinate outside mass, summed in log space.
    let beta = latent.beta();
    let mut log_inside = 0.0;
    for (a, b) in latent.alpha.iter().zip(beta.iter()) {
        let q = (normal::cdf(*a) + normal::cdf(-b)).min(1.0);
        if q >= 1.0 {
            return 1.0;
        }
        log_inside += (-q).ln_1p();
    }
    (-log_inside.exp_m1()).clamp(0.0, 1.0)
}

/// Violation bound for fixed `(λ, α, β)`; sound for any choice.
pub fn assemble_bound(
    problem: &VerificationProblem,
    duals: &DualVariables,
    latent: &LatentBox,
) -> Result<Certificate> {
    let bounds = propagate(problem, latent)?;
    let g = dual_value_deterministic(problem, duals, &bounds)?;
    let zeta = latent_coefficient(problem, duals);
    let norm = zeta.dot(&zeta).sqrt();
    let erfc_term = gaussian_tail(g, norm);
    let tail_term = box_complement_probability(latent);
    Ok(Certificate {
        bound: (erfc_term + tail_term).min(1.0),
        erfc_term,
        tail_term,
        g_value: g,
        latent_coeff_norm: norm,
        alpha: latent.alpha.to_vec(),
        beta: latent.beta().to_vec(),
        steps_taken: 0,
        model_digest: problem.model_digest.clone(),
        spec_digest: problem.spec_digest.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_from_json;
    use crate::spec::{build_bounded_above, InputBox};
    use crate::testing::random_model;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_max(nu: f64, lam: f64, l: f64, u: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| {
                let x = l + (u - l) * i as f64 / n as f64;
                nu * x.max(0.0) - lam * x
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(relu_conjugate_max(1.0, 0.0, -1.0, 1.0), 1.0);
        // grid over [−2, 3] with spacing 1e-4 hits the candidates exactly
        assert_eq!(grid_max(2.0, 1.0, -2.0, 3.0, 50_000), 3.0);
        assert_eq!(relu_conjugate_max(2.0, 1.0, -2.0, 3.0), 3.0);
        assert_eq!(relu_conjugate_max(5.0, 2.0, -3.0, -1.0), 6.0);
    }

    #[test]
    fn conjugate_tie_prefers_largest_argmax() {
        // ν·relu(x) − λx with ν = λ = 1 is 0 on [0, u] and −x below 0
        assert_eq!(relu_conjugate_argmax(1.0, 1.0, 0.0, 2.0), (0.0, 2.0));
        assert_eq!(relu_conjugate_argmax(0.0, 0.0, -1.0, 1.0).1, 1.0);
    }

    proptest! {
        #[test]
        fn conjugate_dominates_samples(
            nu in -5.0f64..5.0,
            lam in -5.0f64..5.0,
            l in -4.0f64..4.0,
            width in 0.0f64..6.0,
            ts in proptest::collection::vec(0.0f64..=1.0, 1000),
        ) {
            let u = l + width;
            let m = relu_conjugate_max(nu, lam, l, u);
            for t in ts {
                let x = l + t * width;
                prop_assert!(m >= nu * x.max(0.0) - lam * x - 1e-12);
            }
            prop_assert!((m - grid_max(nu, lam, l, u, 2000)).abs() <= 1e-9 + width * 10.0 / 2000.0 * 2.0);
        }

        #[test]
        fn gaussian_tail_monotone_and_bounded(g1 in -20.0f64..20.0, g2 in -20.0f64..20.0, s in 1e-3f64..10.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let (a, b) = (gaussian_tail(lo, s), gaussian_tail(hi, s));
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn input_term_examples() {
        assert_eq!(
            input_term(array![1.0, -1.0].view(), array![0.0, 0.0].view(), array![1.0, 1.0].view()),
            1.0
        );
        assert_eq!(
            input_term(array![0.0, 0.0].view(), array![-3.0, 2.0].view(), array![5.0, 9.0].view()),
            0.0
        );
    }

    #[test]
    fn input_term_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let nu = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
            let lo = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..0.5));
            let hi = &lo + &Array1::from_shape_fn(5, |_| rng.random_range(0.0..2.0));
            let best = (0..32u32)
                .map(|mask| {
                    (0..5)
                        .map(|i| nu[i] * if mask >> i & 1 == 1 { hi[i] } else { lo[i] })
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((input_term(nu.view(), lo.view(), hi.view()) - best).abs() < 1e-12);
        }
    }

    fn pass_through_problem(a: f64) -> VerificationProblem {
        let m = model_from_json(r#"{"x_dim":1,"z_dim":1,"layers":[{"type":"linear","W":[[0,1]],"b":[0]}]}"#)
            .unwrap();
        build_bounded_above(&m, a, &InputBox::interval(0.0, 1.0).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn pass_through_has_no_duals() {
        let p = pass_through_problem(0.7);
        let duals = DualVariables::zeros(&p);
        assert!(duals.is_empty());
        let bounds = propagate(&p, &LatentBox::uniform(1, -3.0, 3.0)).unwrap();
        assert_eq!(dual_value_deterministic(&p, &duals, &bounds).unwrap(), -0.7);
        assert_eq!(latent_coefficient(&p, &duals), array![1.0]);
    }

    #[test]
    fn latent_coefficient_examples() {
        let m = model_from_json(
            r#"{"x_dim":1,"z_dim":2,"layers":[{"type":"linear","W":[[0.3,1,0],[-2,0,1]],"b":[0,0]},{"type":"relu"},{"type":"linear","W":[[1,1]],"b":[0]}]}"#,
        )
        .unwrap();
        let p = build_bounded_above(&m, 0.0, &InputBox::interval(0.0, 1.0).unwrap(), 0.1).unwrap();
        let duals = DualVariables {
            lambdas: vec![array![0.25, -4.0]],
        };
        assert_eq!(latent_coefficient(&p, &duals), array![0.25, -4.0]);
        assert_eq!(latent_coefficient(&p, &DualVariables::zeros(&p)), array![0.0, 0.0]);
    }

    fn random_setup(seed: u64) -> (VerificationProblem, DualVariables, LatentBox, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, 1, 2, &[6, 5], 1);
        let p = build_bounded_above(&m, 0.1, &InputBox::interval(-0.5, 0.5).unwrap(), 0.1).unwrap();
        let mut duals = DualVariables::zeros(&p);
        for l in &mut duals.lambdas {
            l.mapv_inplace(|_| rng.random_range(-1.5..1.5));
        }
        let latent = LatentBox::from_bounds(array![-1.2, -0.8], &array![1.0, 1.4]);
        (p, duals, latent, rng)
    }

    #[test]
    fn dual_value_is_affine_in_z() {
        let (p, duals, latent, mut rng) = random_setup(22);
        let bounds = propagate(&p, &latent).unwrap();
        let g = dual_value_deterministic(&p, &duals, &bounds).unwrap();
        let zeta = latent_coefficient(&p, &duals);
        assert_eq!(dual_value_at(&p, &duals, &bounds, &[0.0, 0.0]).unwrap(), g);
        for _ in 0..20 {
            let z1 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let z2 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mid = [(z1[0] + z2[0]) / 2.0, (z1[1] + z2[1]) / 2.0];
            let (g1, g2, gm) = (
                dual_value_at(&p, &duals, &bounds, &z1).unwrap(),
                dual_value_at(&p, &duals, &bounds, &z2).unwrap(),
                dual_value_at(&p, &duals, &bounds, &mid).unwrap(),
            );
            assert!((g1 + g2 - 2.0 * gm).abs() < 1e-12);
            // finite difference recovers ζ
            let dz = [z1[0] - z2[0], z1[1] - z2[1]];
            assert!((g1 - g2 - (zeta[0] * dz[0] + zeta[1] * dz[1])).abs() < 1e-12);
            assert!((g1 - g - (zeta[0] * z1[0] + zeta[1] * z1[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_duality_on_samples() {
        let (p, duals, latent, mut rng) = random_setup(23);
        let bounds = propagate(&p, &latent).unwrap();
        let beta = latent.beta();
        for _ in 0..1000 {
            let u = [rng.random_range(-0.5..=0.5)];
            let z = [
                rng.random_range(latent.alpha[0]..=beta[0]),
                rng.random_range(latent.alpha[1]..=beta[1]),
            ];
            let primal = p.spec_value(&u, &z).unwrap();
            let dual = dual_value_at(&p, &duals, &bounds, &z).unwrap();
            assert!(primal <= dual + 1e-12, "{primal} > {dual}");
        }
    }

    #[test]
    fn shifting_d_shifts_g() {
        let (p, duals, latent, _) = random_setup(24);
        let bounds = propagate(&p, &latent).unwrap();
        let g0 = dual_value_deterministic(&p, &duals, &bounds).unwrap();
        let shifted = p.with_offset(p.d + 0.37);
        let g1 = dual_value_deterministic(&shifted, &duals, &bounds).unwrap();
        assert!((g1 - g0 - 0.37).abs() < 1e-12);
        let c0 = assemble_bound(&p, &duals, &latent).unwrap();
        let c1 = assemble_bound(&shifted, &duals, &latent).unwrap();
        assert!(c1.bound >= c0.bound);
    }

    #[test]
    fn gaussian_tail_examples() {
        assert_eq!(gaussian_tail(0.0, 2.5), 0.5);
        assert_eq!(gaussian_tail(-0.1, 0.0), 0.0);
        assert_eq!(gaussian_tail(0.0, 0.0), 1.0);
        // Φ(−1) to 40 digits: 0.15865525393145705141…
        assert!((gaussian_tail(-1.0, 1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn box_complement_examples() {
        assert!(box_complement_probability(&LatentBox::uniform(3, -40.0, 40.0)) < 1e-15);
        // 2Φ(−2) = 0.045500263896358414…
        let q = box_complement_probability(&LatentBox::uniform(1, -2.0, 2.0));
        assert!((q - 0.045_500_263_896_358_41).abs() < 1e-15);
        let q2 = box_complement_probability(&LatentBox::uniform(2, -2.0, 2.0));
        assert!((q2 - (1.0 - (1.0 - q).powi(2))).abs() < 1e-15);
        assert_eq!(box_complement_probability(&LatentBox::uniform(2, 0.5, 0.5)), 1.0);
    }

    #[test]
    fn degenerate_box_is_vacuous() {
        let (p, duals, _, _) = random_setup(25);
        let c = assemble_bound(&p, &duals, &LatentBox::uniform(2, 0.3, 0.3)).unwrap();
        assert_eq!(c.tail_term, 1.0);
        assert_eq!(c.bound, 1.0);
    }

    #[test]
    fn pass_through_anchor_bound() {
        let p = pass_through_problem(2.326348);
        let c = assemble_bound(&p, &DualVariables::zeros(&p), &LatentBox::uniform(1, -40.0, 40.0)).unwrap();
        // P(z ≥ 2.326348) = 0.0099999966429…
        assert!((c.erfc_term - 0.009_999_996_642_919_08).abs() < 1e-15);
        assert!(c.tail_term < 1e-15);
        assert_eq!(c.bound, c.erfc_term + c.tail_term);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (p, _, latent, _) = random_setup(26);
        let bad = DualVariables {
            lambdas: vec![array![1.0]],
        };
        let bounds = propagate(&p, &latent).unwrap();
        assert!(dual_value_deterministic(&p, &bad, &bounds).is_err());
    }

    #[test]
    fn certificate_json_field_names() {
        let p = pass_through_problem(1.0);
        let c = assemble_bound(&p, &DualVariables::zeros(&p), &LatentBox::uniform(1, -3.0, 3.0)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "bound", "erfc_term", "tail_term", "g", "coeff_norm", "alpha", "beta", "steps",
            "model_digest", "spec_digest",
        ] {
            assert!(keys.contains(&k), "missing {k}");
        }
        let back: Certificate = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
