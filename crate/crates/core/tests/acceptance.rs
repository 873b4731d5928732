//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion (written straight to stderr so it survives output capture) and
//! then asserts. Criterion 11 is slow and ignored by default; run it with
//! `cargo test --test acceptance -- --ignored`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use slowfast::averaging::{estimate_invariant, integrate_averaged, AveragedMode, AveragingSettings, DriftSource};
use slowfast::harness::{
    errors_csv, run_convergence_experiment, run_ldp_experiment, run_mixing_experiment, run_picard_experiment,
    RunConfig,
};
use slowfast::ldp::{averaged_baseline, rate_function, solve_skeleton, weak_continuity_check, ControlPath, PenaltySettings, RateTarget};
use slowfast::measure::{hungarian, w2_distance, w2_estimate, ParticleCloud, W2Method};
use slowfast::model::{linear_test, ou_frozen, CoefficientSet, Dims, LinearTestParams, OuFrozenParams};
use slowfast::monotone_ops::{AbsValue, ConvexSet, HalfSquare, Halfspace, Huber, MonotoneOperator, ProxStrategy};
use slowfast::sde_engine::{picard_solve, step, SimConfig, SlowFastEnsemble, StepNoise};

fn verdict(id: u32, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{tag} criterion {id:>2}: {detail}");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn config(name: &str) -> RunConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    RunConfig::load(&path).expect("shipped config loads")
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn triangle() -> ConvexSet {
    ConvexSet::polytope(
        vec![
            Halfspace::new(vec![-1.0, 0.0], 0.0).unwrap(),
            Halfspace::new(vec![0.0, -1.0], 0.0).unwrap(),
            Halfspace::new(vec![1.0, 1.0], 1.0).unwrap(),
        ],
        vec![0.25, 0.25],
    )
    .unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_monotone_suite() {
    const SAMPLES: usize = 1000;
    const TOL: f64 = 1e-10;
    let started = Instant::now();
    let ops: Vec<(&str, MonotoneOperator)> = vec![
        ("zero", MonotoneOperator::zero(2)),
        ("box", MonotoneOperator::indicator(ConvexSet::cube(vec![-1.0, -0.5], vec![1.0, 2.0]).unwrap())),
        ("ball", MonotoneOperator::indicator(ConvexSet::ball(vec![0.3, -0.2], 1.5).unwrap())),
        ("halfspace", MonotoneOperator::indicator(ConvexSet::halfspace(vec![1.0, 2.0], 0.5).unwrap())),
        ("triangle", MonotoneOperator::indicator(triangle())),
        ("abs", MonotoneOperator::subgradient(2, Arc::new(AbsValue), ProxStrategy::ClosedForm)),
        ("half_square", MonotoneOperator::subgradient(2, Arc::new(HalfSquare), ProxStrategy::ClosedForm)),
        ("huber", MonotoneOperator::subgradient(2, Arc::new(Huber { kappa: 0.7 }), ProxStrategy::Bisection)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = Vec::new();
    for (name, op) in &ops {
        let mut bad = 0usize;
        for _ in 0..SAMPLES {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let lambda = rng.random_range(0.05..3.0);
            let (jx, kx) = op.resolvent(lambda, &x).unwrap();
            let (jy, ky) = op.resolvent(lambda, &y).unwrap();
            // Nonexpansive.
            if norm(&sub(&jx, &jy)) > norm(&sub(&x, &y)) + TOL {
                bad += 1;
            }
            // Yosida approximation is monotone.
            let ax: Vec<f64> = kx.iter().map(|v| v / lambda).collect();
            let ay: Vec<f64> = ky.iter().map(|v| v / lambda).collect();
            if dot(&sub(&ax, &ay), &sub(&x, &y)) < -TOL {
                bad += 1;
            }
            // (x - J x) / lambda lies in A(J x).
            match op {
                MonotoneOperator::Zero { .. } => {
                    if jx != x {
                        bad += 1;
                    }
                }
                MonotoneOperator::Indicator(set) => {
                    if set.violation(&jx) > TOL || set.violation(&jy) > TOL {
                        bad += 1;
                    }
                    // Normal cone: <x - Jx, z - Jx> <= 0 for every z in the set.
                    if dot(&kx, &sub(&jy, &jx)) > TOL {
                        bad += 1;
                    }
                    let (jjx, _) = op.resolvent(lambda, &jx).unwrap();
                    if norm(&sub(&jjx, &jx)) > TOL {
                        bad += 1;
                    }
                }
                MonotoneOperator::Subgradient(_) => {
                    let f: Box<dyn Fn(f64) -> (f64, f64)> = match *name {
                        "abs" => Box::new(|u| {
                            if u > 0.0 {
                                (1.0, 1.0)
                            } else if u < 0.0 {
                                (-1.0, -1.0)
                            } else {
                                (-1.0, 1.0)
                            }
                        }),
                        "half_square" => Box::new(|u| (u, u)),
                        _ => Box::new(|u: f64| (u.clamp(-0.7, 0.7), u.clamp(-0.7, 0.7))),
                    };
                    for (j, a) in jx.iter().zip(&ax) {
                        let (l, r) = f(*j);
                        if *a < l - TOL || *a > r + TOL {
                            bad += 1;
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
        if bad > 0 {
            violations.push(format!("{name}: {bad}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = violations.is_empty() && secs < 5.0;
    verdict(
        1,
        pass,
        &format!(
            "{} operators x {SAMPLES} samples, violations [{}], {secs:.2} s",
            ops.len(),
            violations.join(", ")
        ),
    );
}

fn permutations(n: usize, mut f: impl FnMut(&[usize])) {
    // Heap's algorithm.
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

fn brute_w2(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    let n = a.count();
    let mut best = f64::INFINITY;
    permutations(n, |p| {
        let c: f64 = (0..n)
            .map(|i| a.point(i).iter().zip(b.point(p[i])).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
            .sum();
        best = best.min(c);
    });
    (best / n as f64).sqrt()
}

#[test]
fn criterion_02_w2_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut methods_ok = true;
    let instances = 200;
    for k in 0..instances {
        let count = 1 + k % 8;
        let dim = 1 + (k / 8) % 3;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..count * dim).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let a = ParticleCloud::new(dim, draw(&mut rng)).unwrap();
        let b = ParticleCloud::new(dim, draw(&mut rng)).unwrap();
        let oracle = brute_w2(&a, &b);
        let est = w2_estimate(&a, &b).unwrap();
        let expected_method = if dim == 1 { W2Method::Sorted } else { W2Method::Assignment };
        methods_ok &= est.method == expected_method;
        worst = worst.max((est.value - oracle).abs());
        worst = worst.max((w2_distance(&b, &a).unwrap() - oracle).abs());
        // The assignment solver also agrees on one-dimensional inputs.
        let cost: Vec<f64> = (0..count)
            .flat_map(|i| {
                let a = &a;
                let b = &b;
                (0..count).map(move |j| a.point(i).iter().zip(b.point(j)).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
            })
            .collect();
        let (_, total) = hungarian(&cost, count);
        worst = worst.max(((total / count as f64).sqrt() - oracle).abs());
    }
    verdict(
        2,
        worst <= 1e-9 && methods_ok,
        &format!("{instances} instances, counts 1..=8, max |W2 - brute| = {worst:.3e}, method dispatch ok = {methods_ok}"),
    );
}

#[test]
fn criterion_03_strong_order() {
    // Z = 1 + X is geometric Brownian motion: dZ = a Z dt + s Z dW.
    let (a, s, t_end) = (0.5, 1.0, 1.0);
    let coeffs = linear_test(LinearTestParams {
        a_x: a,
        a_0: a,
        a_y: 0.0,
        beta: 1.0,
        g_x: 0.0,
        g_0: 0.0,
        s1: s,
        s2: 0.0,
        multiplicative: true,
        ..Default::default()
    })
    .unwrap();
    let zero = MonotoneOperator::zero(1);
    let paths = 4000;
    let fine_pow = 12u32;
    let fine = 1usize << fine_pow;
    let dt_fine = t_end / fine as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dw: Vec<Vec<f64>> = (0..paths)
        .map(|_| (0..fine).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); dt_fine.sqrt() * z }).collect())
        .collect();
    let exact: Vec<f64> = dw
        .iter()
        .map(|w| ((a - 0.5 * s * s) * t_end + s * w.iter().sum::<f64>()).exp() - 1.0)
        .collect();

    let mut log_dt = Vec::new();
    let mut log_err = Vec::new();
    for p in 6..=fine_pow {
        let steps = 1usize << p;
        let agg = fine / steps;
        let dt = t_end / steps as f64;
        let mut cfg = SimConfig::new(t_end, dt, 1.0, paths, vec![0.0], vec![0.0]);
        cfg.fast_substeps = Some(1);
        let mut ens = SlowFastEnsemble::initial(&cfg, &zero).unwrap();
        for n in 0..steps {
            let slow: Vec<f64> = dw.iter().map(|w| w[n * agg..(n + 1) * agg].iter().sum()).collect();
            let noise = StepNoise {
                slow,
                fast: vec![0.0; paths],
            };
            ens = step(&ens, &coeffs, &zero, &zero, &cfg, &noise).unwrap();
        }
        let err = ens.xs().iter().zip(&exact).map(|(x, e)| (x - e).abs()).sum::<f64>() / paths as f64;
        log_dt.push(dt.log2());
        log_err.push(err.log2());
    }
    let slope = ols_slope(&log_dt, &log_err);
    verdict(
        3,
        (0.35..=0.65).contains(&slope),
        &format!("strong-order slope {slope:.3} over dt = 2^-6..2^-12 ({paths} paths)"),
    );
}

#[test]
fn criterion_04_reflection_membership() {
    const STEPS: usize = 100_000;
    let dims = Dims::square(2);
    let coeffs = CoefficientSet::from_fns(
        "outward",
        dims,
        |x, _m, _y, o| {
            o[0] = 2.0 * x[0];
            o[1] = 2.0 * x[1];
        },
        |_x, _m, _y, o| {
            o.copy_from_slice(&[0.4, 0.0, 0.0, 0.4]);
        },
        |_x, _m, y, o| {
            o[0] = -y[0];
            o[1] = -y[1];
        },
        |_x, _m, _y, o| {
            o.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        },
    );
    let domains = [
        ("box", ConvexSet::cube(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(), vec![0.0, 0.0]),
        ("ball", ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]),
        ("triangle", triangle(), vec![0.25, 0.25]),
    ];
    let a2 = MonotoneOperator::zero(2);
    let n_particles = 4;
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, set, x0) in domains {
        let a1 = MonotoneOperator::indicator(set.clone());
        let mut cfg = SimConfig::new(STEPS as f64 * 0.01, 0.01, 1.0, n_particles, x0, vec![0.0, 0.0]);
        cfg.seed = 404;
        let mut ens = SlowFastEnsemble::initial(&cfg, &a1).unwrap();
        let (mut outside, mut exits, mut mismatched, mut members) = (0usize, 0usize, 0usize, 0usize);
        for n in 0..STEPS {
            let noise = StepNoise::from_streams(&cfg, dims, n);
            let next = step(&ens, &coeffs, &a1, &a2, &cfg, &noise).unwrap();
            for i in 0..n_particles {
                let x = ens.x(i);
                let dw = &noise.slow[2 * i..2 * i + 2];
                let pred = [x[0] + cfg.dt * 2.0 * x[0] + 0.4 * dw[0], x[1] + cfg.dt * 2.0 * x[1] + 0.4 * dw[1]];
                let v = set.violation(&pred);
                let dk1 = next.k1_var()[i] - ens.k1_var()[i];
                if set.violation(next.x(i)) > 1e-10 {
                    members += 1;
                }
                if v > 1e-12 {
                    outside += 1;
                }
                if dk1 > 0.0 {
                    exits += 1;
                }
                // Predictors within rounding of the boundary are ambiguous.
                if v > 1e-9 || v == 0.0 {
                    mismatched += usize::from((dk1 > 0.0) != (v > 0.0));
                }
            }
            ens = next;
        }
        pass &= members == 0 && mismatched == 0 && exits > 0;
        lines.push(format!(
            "{name}: {members} violations, {mismatched} k1 mismatches, {exits} k1 increments, {outside} exits"
        ));
    }
    verdict(4, pass, &format!("{STEPS} steps x {n_particles} particles; {}", lines.join("; ")));
}

#[test]
fn criterion_05_frozen_ou_statistics() {
    let cfg = config("frozen_ou.json");
    let m = run_mixing_experiment(&cfg).unwrap();
    let (var, se) = (m.var[0], m.var_stderr[0]);
    let var_ok = (var - 0.25).abs() <= 3.0 * se;
    let rate = m.rate.unwrap_or(f64::NAN);
    let r2 = m.r2.unwrap_or(0.0);
    let rate_ok = (rate - 4.0).abs() <= 0.2 * 4.0 && r2 >= 0.9;
    verdict(
        5,
        var_ok && rate_ok,
        &format!("variance {var:.4} +/- {se:.4} (expect 0.25), mixing rate {rate:.3} (expect 4), r2 {r2:.4}"),
    );
}

#[test]
fn criterion_06_averaged_drift_anchors() {
    let (beta, shift, coupling) = (2.0, 0.3, 1.0);
    let coeffs = ou_frozen(OuFrozenParams {
        beta,
        shift,
        coupling,
        s1: 0.0,
        s2: 1.0,
    })
    .unwrap();
    let a2 = MonotoneOperator::zero(1);
    let settings = AveragingSettings {
        skip_mixing: true,
        seed: 606,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for x in [-2.0, -0.7, 0.0, 0.5, 2.0] {
        let est = estimate_invariant(&[x], &ParticleCloud::dirac(&[x]), &coeffs, &a2, &settings).unwrap();
        let (b, se) = est.bbar_with_stderr();
        let expect = (shift + coupling * x) / beta;
        let z = (b[0] - expect).abs() / se[0];
        worst = worst.max(z);
        lines.push(format!("x={x}: {:.4} vs {expect:.4}", b[0]));
    }
    verdict(6, worst <= 3.0, &format!("max deviation {worst:.2} stderr; {}", lines.join(", ")));
}

#[test]
fn criterion_07_averaging_convergence() {
    let cfg = config("converge_linear.json");
    assert_eq!(cfg.sim.n_particles, 256);
    assert_eq!(cfg.experiment.mc_repetitions, 32);
    let started = Instant::now();
    let rep = run_convergence_experiment(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let fit = &rep.fits[0];
    let slope = fit.slope.unwrap_or(f64::NAN);
    let decreasing = fit.strictly_decreasing == Some(true);
    let errs: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{:.3e}", r.err_mean.unwrap_or(f64::NAN)))
        .collect();
    verdict(
        7,
        decreasing && slope >= 0.2 && secs < 600.0,
        &format!(
            "errors [{}], strictly decreasing {decreasing}, slope {slope:.3}, {secs:.1} s",
            errs.join(", ")
        ),
    );
}

#[test]
fn criterion_08_picard() {
    let cfg = config("picard_linear.json");
    let p = run_picard_experiment(&cfg).unwrap();
    let contracting = p
        .gaps
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .all(|w| w[1] / w[0] < 1.0);

    let decoupled = linear_test(LinearTestParams {
        a_y: 0.0,
        a_mean: 0.0,
        g_x: 0.0,
        g_mean: 0.0,
        ..Default::default()
    })
    .unwrap();
    let zero = MonotoneOperator::zero(1);
    let mut sim = cfg.sim.clone();
    sim.seed = 808;
    let d = picard_solve(&decoupled, &zero, &zero, &sim, 30, 1e-12).unwrap();
    let two = d.converged && d.gaps.len() == 2 && d.gaps[1] == 0.0;
    let ratios: Vec<String> = p.ratios.iter().take(5).map(|r| format!("{r:.3}")).collect();
    verdict(
        8,
        contracting && p.converged && two,
        &format!(
            "ratios [{}..], coupled converged {} in {} iterations, decoupled iterations {}",
            ratios.join(", "),
            p.converged,
            p.gaps.len(),
            d.gaps.len()
        ),
    );
}

#[test]
fn criterion_09_rate_function_consistency() {
    let zero = MonotoneOperator::zero(1);
    let mut worst: f64 = 0.0;
    for (s, z, t_end) in [(0.5, 0.8, 1.0), (1.3, -0.4, 2.0)] {
        let coeffs = linear_test(LinearTestParams {
            a_x: 0.0,
            a_y: 0.0,
            g_x: 0.0,
            g_0: 0.0,
            s1: s,
            ..Default::default()
        })
        .unwrap();
        let drift = DriftSource::analytic_from(&coeffs).unwrap();
        let mut cfg = SimConfig::new(t_end, 0.02, 0.01, 1, vec![0.0], vec![0.0]);
        cfg.theta = 0.5;
        let baseline = averaged_baseline(&drift, &coeffs, &zero, &cfg).unwrap();
        let r = rate_function(
            &RateTarget::Endpoint(vec![z]),
            &baseline,
            &drift,
            &coeffs,
            &zero,
            &PenaltySettings::default(),
        )
        .unwrap();
        let expect = z * z / (2.0 * s * s * t_end);
        worst = worst.max((r.rate - expect).abs() / expect);
    }

    // Zero control reproduces the baseline, and a Dirac particle system of the
    // averaged equation reproduces it in every particle.
    let coeffs = linear_test(LinearTestParams {
        a_x: -2.0,
        a_y: 0.7,
        ..Default::default()
    })
    .unwrap();
    let drift = DriftSource::analytic_from(&coeffs).unwrap();
    let a1 = MonotoneOperator::indicator(ConvexSet::cube(vec![-1.0], vec![0.6]).unwrap());
    let mut cfg = SimConfig::new(1.0, 0.01, 0.01, 16, vec![0.2], vec![0.0]);
    cfg.theta = 0.5;
    let baseline = averaged_baseline(&drift, &coeffs, &a1, &cfg).unwrap();
    let k = baseline.len() - 1;
    let sk = solve_skeleton(&ControlPath::zero(k, cfg.dt, 1, 1), &baseline, &drift, &coeffs, &a1).unwrap();
    let zero_ok = (0..baseline.len()).all(|j| sk.x(j) == baseline.x(j, 0));
    let cloud = integrate_averaged(&drift, &coeffs, &a1, &cfg, AveragedMode::ThetaPositive).unwrap();
    let dirac_ok = (0..cloud.len()).all(|j| (0..16).all(|i| cloud.x(j, i) == baseline.x(j, 0)));
    verdict(
        9,
        worst <= 0.02 && zero_ok && dirac_ok,
        &format!(
            "max relative error of I vs z^2/(2 s^2 T) {worst:.2e}, zero-control bitwise {zero_ok}, Dirac bitwise {dirac_ok}"
        ),
    );
}

#[test]
fn criterion_10_weak_continuity() {
    let cfg = config("ldp_linear.json");
    let built = cfg.build_model().unwrap();
    let drift = DriftSource::analytic_from(&built.coeffs).unwrap();
    let baseline = averaged_baseline(&drift, &built.coeffs, &built.a1, &cfg.sim).unwrap();
    let h = ControlPath::zero(baseline.len() - 1, cfg.sim.dt, 1, 1);
    let ks: Vec<u32> = (0..=6).collect();
    let gaps = weak_continuity_check(&h, 1.0, &ks, &baseline, &drift, &built.coeffs, &built.a1).unwrap();
    let g: Vec<f64> = gaps.iter().map(|w| w.gap).collect();
    let decreasing = g.windows(2).skip(3).all(|w| w[1] < w[0]);
    let last = *g.last().unwrap();
    let pass = decreasing && last < 0.1 * g[0];
    let shown: Vec<String> = g.iter().map(|v| format!("{v:.3e}")).collect();
    verdict(10, pass, &format!("gaps k=0..6 [{}]", shown.join(", ")));
}

#[test]
#[ignore = "slow: rare-event Monte Carlo probe"]
fn criterion_11_rare_event_probe() {
    let cfg = config("ldp_linear.json");
    let rep = run_ldp_experiment(&cfg, true).unwrap();
    let ratio = rep.final_ratio.unwrap_or(f64::NAN);
    let rows: Vec<String> = rep
        .probes
        .iter()
        .map(|p| format!("eps {}: {:?}", p.epsilon, p.neg_eps_log_p))
        .collect();
    verdict(
        11,
        (0.5..=2.0).contains(&ratio),
        &format!("-eps log P / I = {ratio:.3} at the smallest eps; I = {:?}; {}", rep.event_rate, rows.join(", ")),
    );
}

#[test]
fn criterion_12_worker_count_determinism() {
    let mut cfg = config("converge_linear.json");
    cfg.sim.n_particles = 48;
    cfg.experiment.deltas = vec![0.1, 0.01];
    cfg.experiment.mc_repetitions = 4;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let rep = pool.install(|| run_convergence_experiment(&cfg)).unwrap();
        errors_csv(&rep.rows, &rep.fits)
    };
    let one = run(1);
    let eight = run(8);
    verdict(
        12,
        one == eight,
        &format!("errors.csv at 1 and 8 workers identical: {} ({} bytes)", one == eight, one.len()),
    );
}
