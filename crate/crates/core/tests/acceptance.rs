//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probcert::dual::{assemble_bound, dual_value_at, dual_value_deterministic, latent_coefficient};
use probcert::model::{load_model_file, model_from_json};
use probcert::optimizer::{evaluate, finite_difference_pairs, optimize_from, GradientMode, StartPoint};
use probcert::oracle::{grid_max_violation, OracleMethod, DEFAULT_TOLERANCE};
use probcert::spec::{build_bounded_above, InputBox};
use probcert::sweep::{run_sweep, to_csv, Property, SweepConfig};
use probcert::testing::random_model;
use probcert::{build, optimize, propagate, DualVariables, LatentBox, OptimizerConfig, PropertySpec};

type Outcome = Result<String, String>;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/np_decoder.json")
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {t:.1?}, limit {limit:?}"))
    } else {
        Ok(t)
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_box<R: Rng>(rng: &mut R, dim: usize) -> InputBox {
    let lower: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..0.5)).collect();
    let upper = lower.iter().map(|l| l + rng.random_range(0.05..0.5)).collect();
    InputBox::new(lower, upper).unwrap()
}

fn random_latent<R: Rng>(rng: &mut R, dim: usize) -> LatentBox {
    let alpha = Array1::from_shape_fn(dim, |_| rng.random_range(-3.0..-0.5));
    let eta = Array1::from_shape_fn(dim, |_| rng.random_range(0.8..2.5));
    LatentBox::new(alpha, eta)
}

fn random_duals<R: Rng>(rng: &mut R, template: &DualVariables, scale: f64) -> DualVariables {
    DualVariables {
        lambdas: template
            .lambdas
            .iter()
            .map(|l| Array1::from_shape_fn(l.len(), |_| rng.random_range(-scale..scale)))
            .collect(),
    }
}

fn sample_in<R: Rng>(rng: &mut R, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower
        .iter()
        .zip(upper)
        .map(|(l, u)| if u > l { rng.random_range(*l..*u) } else { *l })
        .collect()
}

fn closed_form_anchor() -> Outcome {
    let start = Instant::now();
    let m = model_from_json(r#"{"x_dim":1,"z_dim":1,"layers":[{"type":"linear","W":[[0,1]],"b":[0]}]}"#)
        .map_err(|e| e.to_string())?;
    let p = build_bounded_above(&m, 2.326348, &InputBox::interval(0.0, 1.0).unwrap(), 0.01)
        .map_err(|e| e.to_string())?;
    let cert = optimize(&p, &OptimizerConfig::default()).map_err(|e| e.to_string())?;
    let t = within(Duration::from_secs(10), start)?;
    check((0.0100..=0.0150).contains(&cert.bound), || {
        format!("bound {} outside [0.0100, 0.0150]", cert.bound)
    })?;
    Ok(format!("bound {:.6} in {t:.2?}", cert.bound))
}

fn weak_duality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut checked = 0;
    for net in 0..5 {
        let hidden: Vec<usize> = (0..1 + net % 2).map(|_| rng.random_range(2..=8)).collect();
        let (xd, zd) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let m = random_model(&mut rng, xd, zd, &hidden, 1);
        let spec = PropertySpec::BoundedAbove {
            a: rng.random_range(-1.0..1.0),
            x_box: random_box(&mut rng, xd),
            epsilon: 0.05,
        };
        let p = build(&m, &spec).map_err(|e| e.to_string())?;
        let zero = DualVariables::zeros(&p);
        for _ in 0..1000 {
            let latent = random_latent(&mut rng, zd);
            let bounds = propagate(&p, &latent).map_err(|e| e.to_string())?;
            let duals = random_duals(&mut rng, &zero, 2.0);
            let u = sample_in(&mut rng, &p.free_box.lower, &p.free_box.upper);
            let z = sample_in(&mut rng, latent.alpha.as_slice().unwrap(), latent.beta().as_slice().unwrap());
            let primal = p.spec_value(&u, &z).map_err(|e| e.to_string())?;
            let dual = dual_value_at(&p, &duals, &bounds, &z).map_err(|e| e.to_string())?;
            checked += 1;
            if primal > dual {
                violations += 1;
            }
        }
    }
    let t = within(Duration::from_secs(30), start)?;
    check(violations == 0, || format!("{violations} of {checked} samples exceed the dual"))?;
    Ok(format!("{checked} samples, 0 violations in {t:.2?}"))
}

fn interval_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut escapes = 0usize;
    let mut total = 0usize;
    for net in 0..5 {
        let hidden = [rng.random_range(3..12), rng.random_range(3..12), rng.random_range(3..12)];
        let (xd, zd) = (1 + net % 2, 1 + net % 3);
        let m = random_model(&mut rng, xd, zd, &hidden, 1);
        let p = build(
            &m,
            &PropertySpec::BoundedAbove {
                a: 0.0,
                x_box: random_box(&mut rng, xd),
                epsilon: 0.05,
            },
        )
        .map_err(|e| e.to_string())?;
        let latent = random_latent(&mut rng, zd);
        let bounds = propagate(&p, &latent).map_err(|e| e.to_string())?;
        for _ in 0..10_000 {
            let u = sample_in(&mut rng, &p.free_box.lower, &p.free_box.upper);
            let z = sample_in(&mut rng, latent.alpha.as_slice().unwrap(), latent.beta().as_slice().unwrap());
            let trace = p.network.trace(&u, &z).map_err(|e| e.to_string())?;
            total += 1;
            let inside = trace.iter().zip(&bounds.layers).all(|(x, iv)| {
                x.iter()
                    .zip(iv.lower.iter().zip(&iv.upper))
                    .all(|(v, (l, h))| *l <= *v && *v <= *h)
            });
            if !inside {
                escapes += 1;
            }
        }
    }
    check(escapes == 0, || format!("{escapes} of {total} trajectories escaped"))?;
    Ok(format!("{total} trajectories, 0 escapes"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut matched, mut total) = (0usize, 0usize);
    for _ in 0..100 {
        let zd = rng.random_range(1..=2);
        let hidden = [rng.random_range(3..7), rng.random_range(3..7)];
        let m = random_model(&mut rng, 1, zd, &hidden, 1);
        let p = build_bounded_above(&m, 0.0, &random_box(&mut rng, 1), 0.05).map_err(|e| e.to_string())?;
        let duals = random_duals(&mut rng, &DualVariables::zeros(&p), 1.0);
        let latent = random_latent(&mut rng, zd);
        // Shift d so that g/‖ζ‖ lands in [−2, 1], away from saturation.
        let bounds = propagate(&p, &latent).map_err(|e| e.to_string())?;
        let g = dual_value_deterministic(&p, &duals, &bounds).map_err(|e| e.to_string())?;
        let s = latent_coefficient(&p, &duals).iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = rng.random_range(-2.0..1.0) * s.max(1e-3);
        let p = p.with_offset(p.d + target - g);
        let point = StartPoint { duals, latent };
        for (a, fd) in finite_difference_pairs(&p, &point, 1e-6).map_err(|e| e.to_string())? {
            total += 1;
            let scale = a.abs().max(fd.abs());
            if scale < 1e-9 || (a - fd).abs() <= 1e-4 * scale {
                matched += 1;
            }
        }
    }
    let t = within(Duration::from_secs(60), start)?;
    let frac = matched as f64 / total as f64;
    check(frac >= 0.95, || format!("only {matched}/{total} coordinates match"))?;
    Ok(format!("{matched}/{total} coordinates ({:.1}%) in {t:.2?}", 100.0 * frac))
}

fn certificate_dominance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::INFINITY;
    let mut cases = 0;
    for _ in 0..10 {
        let hidden = [rng.random_range(3..8), rng.random_range(3..8)];
        let m = random_model(&mut rng, 1, 1, &hidden, 1);
        let x_box = InputBox::interval(0.0, 1.0).unwrap();
        let mid_up = m.forward(&[0.5], &[0.5]).map_err(|e| e.to_string())?[0];
        let mid_down = m.forward(&[0.5], &[-0.5]).map_err(|e| e.to_string())?[0];
        let specs = [
            PropertySpec::BoundedAbove { a: mid_up, x_box: x_box.clone(), epsilon: 0.05 },
            PropertySpec::BoundedBelow { b: mid_down, x_box: x_box.clone(), epsilon: 0.05 },
            PropertySpec::Monotonicity { x_box: x_box.clone(), gap_max: 0.2, epsilon: 0.05 },
            PropertySpec::MidpointConvexity { x_box: x_box.clone(), x2_box: None, epsilon: 0.05 },
        ];
        for spec in &specs {
            let p = build(&m, spec).map_err(|e| e.to_string())?;
            let cert = optimize(&p, &OptimizerConfig::default()).map_err(|e| e.to_string())?;
            let q = grid_max_violation(&p, 20, OracleMethod::Quadrature { tolerance: DEFAULT_TOLERANCE })
                .map_err(|e| e.to_string())?;
            cases += 1;
            worst = worst.min(cert.bound - q.max_value);
            check(cert.bound >= q.max_value - 1e-6, || {
                format!("{spec:?}: bound {} below oracle maximum {}", cert.bound, q.max_value)
            })?;
        }
    }
    let t = within(Duration::from_secs(300), start)?;
    Ok(format!("{cases} problems, min(bound - oracle) = {worst:.3e} in {t:.1?}"))
}

fn sweep_reproduction() -> Outcome {
    let start = Instant::now();
    let m = load_model_file(fixture_path()).map_err(|e| e.to_string())?;
    let cfg = SweepConfig::default();
    let run = |prop| run_sweep(&m, prop, &cfg).map_err(|e| e.to_string());
    let upper = run(Property::Upper)?;
    let lower = run(Property::Lower)?;
    let (upper_csv, lower_csv) = (to_csv(&upper), to_csv(&lower));
    check(upper.len() == 50 && lower.len() == 50, || "expected 50 windows".into())?;
    for (u, l) in upper.iter().zip(&lower) {
        check(u.threshold >= l.threshold, || {
            format!("delta {}: a = {} < b = {}", u.delta, u.threshold, l.threshold)
        })?;
    }
    check(to_csv(&run(Property::Upper)?) == upper_csv, || "upper CSV differs between runs".into())?;
    check(to_csv(&run(Property::Lower)?) == lower_csv, || "lower CSV differs between runs".into())?;
    let t = within(Duration::from_secs(600), start)?;

    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("sweep_upper.csv"), &upper_csv).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("sweep_lower.csv"), &lower_csv).map_err(|e| e.to_string())?;
    let flagged = upper.iter().chain(&lower).filter(|r| r.flag.as_str() != "ok").count();
    Ok(format!(
        "a >= b at all 50 windows, CSVs identical, {flagged} flagged rows, curves in {} ({t:.1?})",
        dir.display()
    ))
}

fn bisection_monotonicity() -> Outcome {
    let m = load_model_file(fixture_path()).map_err(|e| e.to_string())?;
    let x_box = InputBox::interval(0.5, 0.52).unwrap();
    let p = build_bounded_above(&m, 1.5, &x_box, 0.01).map_err(|e| e.to_string())?;
    let best = optimize_from(&p, &OptimizerConfig::default(), None)
        .map_err(|e| e.to_string())?
        .best;
    let probes: Vec<f64> = (0..20).map(|i| 0.5 + 0.1 * i as f64).collect();
    let mut bounds = Vec::new();
    for a in &probes {
        let q = p.with_offset(-a);
        let cert = assemble_bound(&q, &best.duals, &best.latent).map_err(|e| e.to_string())?;
        // Same value through the optimizer's evaluation path.
        let (eval, _) = evaluate(&q, &best.duals, &best.latent, GradientMode::None).map_err(|e| e.to_string())?;
        check((eval.objective.min(1.0) - cert.bound).abs() < 1e-12, || "evaluation paths disagree".into())?;
        bounds.push(cert.bound);
    }
    let inversions = bounds.windows(2).filter(|w| w[1] > w[0]).count();
    check(inversions == 0, || format!("{inversions} inversions in {bounds:?}"))?;
    Ok(format!(
        "20 thresholds, bound {:.3e} .. {:.3e}, 0 inversions",
        bounds[0],
        bounds[bounds.len() - 1]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("closed-form anchor", closed_form_anchor),
        ("weak duality", weak_duality),
        ("interval soundness", interval_soundness),
        ("gradient correctness", gradient_correctness),
        ("certificate dominance", certificate_dominance),
        ("fixture sweep", sweep_reproduction),
        ("bisection monotonicity", bisection_monotonicity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
