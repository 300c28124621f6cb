use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackalloc::filter::{step, FilterOptions, FilterState};
use trackalloc::linalg::{is_symmetric, min_eigenvalue};
use trackalloc::model::{default_model, InputMode, ModelParams, Observation};
use trackalloc::policy::{
    minimax_allocate, optimize, water_fill, MareRate, Policy, PsoConfig, TraceAverage, CONSTRAINT_TOL,
};
use trackalloc::riccati::{mare_operator, solve_fixed_point, MareProblem};
use trackalloc::schedule::{compile_schedule, euclidean_pattern, gaps, leading_offset, pattern_cost};
use trackalloc::sim::{sweep_lambda, AttemptMode, ModelSpec, PolicyMode, ScenarioConfig, TargetSpec};

/// Random SPD matrix `L·Lᵀ + εI`.
fn spd(n: usize, seed: u64, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * scale);
    &l * l.transpose() + DMatrix::identity(n, n) * 1e-3
}

fn random_problem(n: usize, m: usize, seed: u64, lambda: f64) -> MareProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.2..1.2));
    let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    MareProblem::new(a, c, spd(n, seed + 1, 1.0), spd(m, seed + 2, 1.0), lambda).unwrap()
}

/// Textbook Kalman filter written independently of the crate.
struct ReferenceKf {
    x: DVector<f64>,
    p: DMatrix<f64>,
}

impl ReferenceKf {
    fn step(&mut self, m: &ModelParams, u: &DVector<f64>, y: Option<&DVector<f64>>) {
        let xp = m.a() * &self.x + m.b() * u;
        let pp = m.a() * &self.p * m.a().transpose() + m.q();
        match y {
            Some(y) => {
                let s = m.c() * &pp * m.c().transpose() + m.r();
                let k = &pp * m.c().transpose() * s.try_inverse().unwrap();
                self.x = &xp + &k * (y - m.c() * &xp);
                let n = self.p.nrows();
                let p = (DMatrix::identity(n, n) - &k * m.c()) * &pp;
                self.p = (&p + p.transpose()) * 0.5;
            }
            None => {
                self.x = xp;
                self.p = pp;
            }
        }
    }
}

/// DARE by the structure-preserving doubling algorithm.
fn dare_doubling(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let i = DMatrix::<f64>::identity(n, n);
    let mut ak = a.transpose();
    let mut gk = c.transpose() * r.clone().try_inverse().unwrap() * c;
    let mut hk = q.clone();
    for _ in 0..60 {
        let w = (&i + &gk * &hk).try_inverse().unwrap();
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let done = (&h_next - &hk).norm() <= 1e-14 * h_next.norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if done {
            break;
        }
    }
    // hk is the prior (predicted) covariance; g(P) in the crate is prior
    // covariance as well.
    hk
}

fn loewner_le(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(&(b - a)) >= -tol * (1.0 + b.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mare_is_monotone(seed in 0u64..10_000, lambda in 0.0f64..=1.0, n in 1usize..4) {
        let pr = random_problem(n, 1, seed, lambda);
        let p1 = spd(n, seed + 10, 1.0);
        let p2 = &p1 + spd(n, seed + 11, 0.5);
        let g1 = mare_operator(&pr, &p1).unwrap();
        let g2 = mare_operator(&pr, &p2).unwrap();
        prop_assert!(loewner_le(&g1, &g2, 1e-9));
    }

    #[test]
    fn mare_endpoints(seed in 0u64..10_000, n in 1usize..4) {
        let p = spd(n, seed + 20, 1.0);
        let pr0 = random_problem(n, 2, seed, 0.0);
        let open = &pr0.a * &p * pr0.a.transpose() + &pr0.q;
        prop_assert!((mare_operator(&pr0, &p).unwrap() - open).norm() <= 1e-10 * (1.0 + p.norm()));

        let pr1 = pr0.with_lambda(1.0).unwrap();
        let s = &pr1.c * &p * pr1.c.transpose() + &pr1.r;
        let apc = &pr1.a * &p * pr1.c.transpose();
        let riccati = &pr1.a * &p * pr1.a.transpose() + &pr1.q - &apc * s.try_inverse().unwrap() * apc.transpose();
        let g = mare_operator(&pr1, &p).unwrap();
        prop_assert!((g - riccati).norm() <= 1e-9 * (1.0 + p.norm()));
    }

    #[test]
    fn filter_covariance_stays_psd_and_updates_shrink_trace(seed in 0u64..10_000, dims in 1usize..4) {
        let m = ModelParams::constant_velocity(dims, 0.1, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m.state_dim();
        let mut st = FilterState::new(DVector::zeros(n), spd(n, seed, 3.0)).unwrap();
        for _ in 0..50 {
            let obs = if rng.random::<f64>() < 0.5 {
                Observation::received(DVector::from_fn(dims, |_, _| rng.random_range(-10.0..10.0)))
            } else {
                Observation::lost()
            };
            let (next, rep) = step(&m, &st, &DVector::zeros(dims), &obs, FilterOptions::default()).unwrap();
            prop_assert!(is_symmetric(&next.p_hat, 1e-12));
            prop_assert!(min_eigenvalue(&next.p_hat) >= -1e-9);
            if rep.measurement_applied {
                prop_assert!(rep.p_hat.trace() <= rep.p_tilde.trace() + 1e-12);
            }
            st = next;
        }
    }

    #[test]
    fn euclidean_gaps_differ_by_at_most_one(num in 1usize..60, t in 1usize..60) {
        let t = t.max(num);
        let alpha = num as f64 / t as f64;
        let pattern = euclidean_pattern(alpha, t, 0).unwrap();
        prop_assert_eq!(pattern.iter().filter(|b| **b).count(), num);
        let g = gaps(&pattern);
        if let (Some(lo), Some(hi)) = (g.iter().min(), g.iter().max()) {
            prop_assert!(hi - lo <= 1, "{:?}", g);
        }
    }

    #[test]
    fn compiled_schedules_respect_capacity_and_rates(seed in 0u64..100_000, n in 1usize..8, m in 1usize..4, t in 1usize..40) {
        let m = m.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let scale = (m as f64 / total).min(1.0);
        let alpha: Vec<f64> = raw.iter().map(|a| (a * scale).min(1.0)).collect();
        let policy = Policy::new(alpha.clone(), m as f64).unwrap();
        let s = compile_schedule(&policy, t).unwrap();
        prop_assert!(s.satisfies(policy.alpha()));
        for slot in 0..t {
            prop_assert!(s.slot_load(slot) <= m);
        }
    }

    #[test]
    fn water_fill_meets_floors_and_budget(seed in 0u64..100_000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let lc: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
        let budget = rng.random_range(1.0..=n as f64);
        match water_fill(&lambdas, &lc, budget) {
            Ok(p) => {
                prop_assert!(p.total() <= budget + CONSTRAINT_TOL);
                prop_assert!(p.meets_floors(&lambdas, &lc));
                prop_assert!(p.alpha().iter().all(|a| (0.0..=1.0).contains(a)));
            }
            Err(e) => {
                let need: f64 = lambdas.iter().zip(&lc).map(|(l, c)| c / l).sum();
                prop_assert!(need > budget, "{e}");
            }
        }
    }
}

#[test]
fn intermittent_filter_matches_reference_kf_with_all_arrivals() {
    let m = default_model(0.1, 0.1, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = m.state_dim();
    let p0 = DMatrix::identity(n, n) * 10.0;
    let mut st = FilterState::new(DVector::zeros(n), p0.clone()).unwrap();
    let mut kf = ReferenceKf { x: DVector::zeros(n), p: p0 };
    for _ in 0..500 {
        let u = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-50.0..50.0));
        st = step(&m, &st, &u, &Observation::received(y.clone()), FilterOptions::default()).unwrap().0;
        kf.step(&m, &u, Some(&y));
        assert!((&st.x_hat - &kf.x).amax() <= 1e-12 * (1.0 + kf.x.amax()));
        assert!((&st.p_hat - &kf.p).amax() <= 1e-12 * (1.0 + kf.p.amax()));
    }
}

#[test]
fn no_arrivals_is_open_loop_prediction() {
    let m = default_model(0.1, 0.1, 10.0).unwrap();
    let n = m.state_dim();
    let mut st = FilterState::new(DVector::from_element(n, 1.0), DMatrix::identity(n, n)).unwrap();
    let (mut x, mut p) = (st.x_hat.clone(), st.p_hat.clone());
    for _ in 0..100 {
        let u = DVector::from_element(3, 0.5);
        st = step(&m, &st, &u, &Observation::lost(), FilterOptions::default()).unwrap().0;
        x = m.a() * &x + m.b() * &u;
        p = m.a() * &p * m.a().transpose() + m.q();
        assert_eq!(st.x_hat, x);
        assert!((&st.p_hat - &p).amax() <= 1e-12 * p.amax());
    }
}

#[test]
fn full_arrival_fixed_point_matches_dare_by_doubling() {
    let m = default_model(0.1, 0.1, 10.0).unwrap();
    let pr = MareProblem::from_model(&m, 1.0).unwrap();
    let n = m.state_dim();
    let sol = solve_fixed_point(&pr, &DMatrix::identity(n, n), 1e-12, 100_000);
    assert!(sol.converged);
    let dare = dare_doubling(m.a(), m.c(), m.q(), m.r());
    let err = (&sol.p_star - &dare).amax();
    assert!(err <= 1e-6, "max abs difference {err}");
}

#[test]
fn minimax_matches_grid_search_and_favours_the_noisier_target() {
    let base = default_model(0.1, 0.1, 10.0).unwrap();
    let noisy = base.with_noise(base.q() * 10.0, base.r().clone()).unwrap();
    let problems = vec![
        MareProblem::from_model(&base, 0.8).unwrap(),
        MareProblem::from_model(&noisy, 0.8).unwrap(),
    ];
    let alloc = minimax_allocate(&problems, &[0.0, 0.0], 1.0, 0.01).unwrap();
    let a = alloc.policy.alpha();
    assert!(a[1] > a[0], "{a:?}");

    // Grid oracle over α₁ + α₂ = 1 with the steady posterior trace per target.
    let post = |pr: &MareProblem, rate: f64| {
        let p = pr.with_lambda(rate).unwrap();
        let sol = solve_fixed_point(&p, &DMatrix::identity(6, 6), 1e-10, 50_000);
        if !sol.converged {
            return f64::INFINITY;
        }
        p.expected_posterior(&sol.p_star, rate).unwrap().trace()
    };
    let best = (1..100)
        .map(|j| j as f64 / 100.0)
        .map(|x| (x, post(&problems[0], x * 0.8).max(post(&problems[1], (1.0 - x) * 0.8))))
        .fold((0.0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
    assert!((a[0] - best.0).abs() <= 0.03, "greedy {a:?} vs grid {best:?}");
    assert!(alloc.max_trace <= best.1 * 1.02);
}

#[test]
fn even_pattern_beats_most_permutations() {
    let m = default_model(0.1, 0.1, 10.0).unwrap();
    let p0 = DMatrix::identity(6, 6) * 10.0;
    let t = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut wins, mut trials) = (0, 0);
    for alpha in [1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0] {
        let even = euclidean_pattern(alpha, t, leading_offset(alpha)).unwrap();
        let cost = pattern_cost(&m, 1.0, &even, &p0, 1, 0).unwrap();
        for _ in 0..50 {
            let mut perm = even.clone();
            for i in (1..t).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            trials += 1;
            if cost <= pattern_cost(&m, 1.0, &perm, &p0, 1, 0).unwrap() + 1e-9 {
                wins += 1;
            }
        }
    }
    assert!(wins as f64 >= 0.95 * trials as f64, "{wins}/{trials}");
}

fn swarm_scenario(lambdas: &[f64], horizon: usize) -> ScenarioConfig {
    ScenarioConfig {
        targets: lambdas
            .iter()
            .map(|&l| TargetSpec {
                model: ModelSpec::ConstantVelocity {
                    dims: 1,
                    dt: 0.1,
                    q: 0.1,
                    r: 10.0,
                },
                lambda: l,
                input: InputMode::WhiteNoise { variance: 100.0 },
                known_input: false,
                x0: None,
                p0_scale: 10.0,
            })
            .collect(),
        instruments: 1,
        cycle_len: 20,
        horizon,
        policy: PolicyMode::Pso,
        attempts: AttemptMode::Bernoulli,
        seed: 3,
        lambda_c_floor: 0.0,
        filter: FilterOptions::default(),
        pso: PsoConfig::default(),
    }
}

fn tuned_pso(seed: u64) -> PsoConfig {
    PsoConfig {
        particles: 12,
        seed,
        mare_rate: MareRate::Attempted,
        noise_range: [1.0, 1.0],
        trace_average: TraceAverage::Cumulative,
        burn_in: 30,
        arrival_interval: Some(1.96),
        ..PsoConfig::default()
    }
}

#[test]
fn global_best_fitness_never_increases_without_rescoring() {
    let config = swarm_scenario(&[0.6, 0.9, 1.0], 80);
    let pso = PsoConfig {
        rescore_bests: false,
        ..tuned_pso(4)
    };
    let (_, log) = optimize(&config, &pso).unwrap();
    for w in log.records.windows(2) {
        assert!(w[1].best_fitness <= w[0].best_fitness, "{} -> {}", w[0].best_fitness, w[1].best_fitness);
    }
}

#[test]
fn every_iterate_is_a_feasible_policy() {
    let config = ScenarioConfig {
        instruments: 2,
        ..swarm_scenario(&[0.5, 0.7, 0.9, 1.0], 80)
    };
    let (_, log) = optimize(&config, &tuned_pso(5)).unwrap();
    let feasible = |a: &[f64]| {
        a.iter().all(|&x| (-CONSTRAINT_TOL..=1.0 + CONSTRAINT_TOL).contains(&x))
            && a.iter().sum::<f64>() <= 2.0 + CONSTRAINT_TOL
    };
    for r in &log.records {
        assert!(feasible(&r.best_alpha), "{:?}", r.best_alpha);
        for a in &r.alpha {
            assert!(feasible(a), "{a:?}");
        }
    }
}

#[test]
fn optimize_is_deterministic() {
    let config = swarm_scenario(&[0.6, 1.0], 60);
    let a = optimize(&config, &tuned_pso(6)).unwrap();
    let b = optimize(&config, &tuned_pso(6)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_targets_share_the_instrument_evenly() {
    let config = swarm_scenario(&[0.8, 0.8], 200);
    let (policy, _) = optimize(&config, &tuned_pso(7)).unwrap();
    let a = policy.alpha();
    assert!((a[0] - a[1]).abs() < 0.1, "{a:?}");
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn error_falls_as_the_channel_improves() {
    let config = ScenarioConfig {
        policy: PolicyMode::Fixed { alpha: vec![1.0] },
        ..swarm_scenario(&[1.0], 100)
    };
    let lambdas = [0.2, 0.4, 0.6, 0.8, 1.0];
    let rows = sweep_lambda(&config, &lambdas, 50).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_mse).collect();
    assert!(spearman(&lambdas, &means) <= -0.9, "{means:?}");
}
