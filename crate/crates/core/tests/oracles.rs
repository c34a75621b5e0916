use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probcert::oracle::{grid_max_violation, mc_violation, quadrature_violation, OracleMethod, DEFAULT_TOLERANCE};
use probcert::spec::{build_bounded_above, InputBox};
use probcert::testing::random_model;
use probcert::{optimize, OptimizerConfig};

#[test]
fn quadrature_agrees_with_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut misses = 0;
    for i in 0..20 {
        let hidden = [rng.random_range(2..8), rng.random_range(2..8)];
        let m = random_model(&mut rng, 1, 1, &hidden, 1);
        let a = m.forward(&[0.5], &[rng.random_range(-1.5..1.5)]).unwrap()[0];
        let p = build_bounded_above(&m, a, &InputBox::interval(0.0, 1.0).unwrap(), 0.05).unwrap();
        let q = quadrature_violation(&p, &[0.5], DEFAULT_TOLERANCE).unwrap();
        let e = mc_violation(&p, &[0.5], 1_000_000, i).unwrap();
        if !(e.lower95 <= q && q <= e.upper95) {
            misses += 1;
        }
    }
    assert!(misses <= 1, "{misses} misses");
}

#[test]
fn sampled_maximum_stays_below_certificate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let m = random_model(&mut rng, 1, 2, &[6, 5], 1);
        let a = m.forward(&[0.5], &[1.0, 1.0]).unwrap()[0];
        let p = build_bounded_above(&m, a, &InputBox::interval(0.0, 1.0).unwrap(), 0.05).unwrap();
        let cert = optimize(&p, &OptimizerConfig::default()).unwrap();
        let g = grid_max_violation(&p, 5, OracleMethod::Mc { samples: 20_000, seed: 3 }).unwrap();
        assert!(g.max_lower95 <= cert.bound, "{g:?} vs {}", cert.bound);
    }
}
