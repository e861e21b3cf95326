mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use interp_spde::fem::{assemble_mass, hs_norm_interpolated, transfer_noise, DofMap};
use interp_spde::geometry::{dodecagon_mesh, edge_counts, unit_square_grid, Domain, Point2};
use interp_spde::harness::{
    preset, run_convergence_study, run_convergence_study_with, ErrorReport, Profile,
};
use interp_spde::kernels::{BoundaryCondition, KernelSpec, KernelVariant};
use interp_spde::noise::{build_spectrum, DenseSampler, EmbeddingMode, NoiseStream};
use interp_spde::sobolev::{interpolation_rate_study, MeshKind, TestFunction};
use interp_spde::stepper::{Discretization, InitialData, Nonlinearity, Stepper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: u32, name: &str, start: Instant, o: &Outcome) {
    let line = format!(
        "{} criterion {n} {name}: {} ({:.1}s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn fem_order() -> Outcome {
    let (pairs, rate) = common::manufactured_rate(0.01, &[1, 2, 3, 4]);
    let errors: Vec<String> = pairs.iter().map(|(_, e)| format!("{e:.3e}")).collect();
    Outcome {
        pass: within(rate, 2.0, 0.15),
        detail: format!(
            "rate {rate:.3} (target 2.0 +- 0.15), errors [{}]",
            errors.join(", ")
        ),
    }
}

/// Largest deviation of `C` from `dt q` in units of its standard error, and `C` itself.
fn covariance_check(samples: &[Vec<f64>], target: &[f64], n: usize) -> (f64, Vec<f64>) {
    let m = samples.len() as f64;
    let mut c = vec![0.0; n * n];
    for s in samples {
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] += s[i] * s[j];
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= m);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let se =
                ((target[i * n + i] * target[j * n + j] + target[i * n + j].powi(2)) / m).sqrt();
            worst = worst.max((c[i * n + j] - target[i * n + j]).abs() / se);
        }
    }
    (worst, c)
}

fn sampler_covariance() -> Outcome {
    let kernel = KernelSpec::matern(0.5, 10.0, 0.25).unwrap();
    let dt = 2e-3;
    let m = 20_000;
    let grid = unit_square_grid(2).unwrap();
    let pts = grid.mesh().nodes();
    let n = pts.len();
    let target: Vec<f64> = (0..n * n)
        .map(|k| dt * kernel.eval(pts[k / n], pts[k % n]))
        .collect();

    let spec = Arc::new(build_spectrum(&kernel, 2, 4, EmbeddingMode::Strict).unwrap());
    let mut stream = NoiseStream::new(spec, 31, 0, dt).unwrap();
    let circ: Vec<Vec<f64>> = (0..m).map(|_| stream.sample_increment()).collect();
    let dense = DenseSampler::new(&kernel, pts, dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let direct: Vec<Vec<f64>> = (0..m).map(|_| dense.sample(&mut rng)).collect();

    let (w1, c1) = covariance_check(&circ, &target, n);
    let (w2, c2) = covariance_check(&direct, &target, n);
    let mut w12: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let var =
                (target[i * n + i] * target[j * n + j] + target[i * n + j].powi(2)) / m as f64;
            w12 = w12.max((c1[i * n + j] - c2[i * n + j]).abs() / (2.0 * var).sqrt());
        }
    }
    Outcome {
        pass: n == 25 && w1 < 5.0 && w2 < 5.0 && w12 < 5.0,
        detail: format!(
            "{n} nodes, max |C - dt q| / SE: circulant {w1:.2}, dense {w2:.2}; samplers differ by {w12:.2} SE (target < 5)"
        ),
    }
}

fn run_preset(name: &str) -> Vec<ErrorReport> {
    preset(name, Profile::Desk)
        .unwrap()
        .iter()
        .map(|cfg| run_convergence_study(cfg).unwrap())
        .collect()
}

fn rates(reports: &[ErrorReport]) -> String {
    reports
        .iter()
        .map(|r| format!("{} {:.3}", r.name, r.fitted_rate))
        .collect::<Vec<_>>()
        .join(", ")
}

fn clipping_ok(reports: &[ErrorReport]) -> bool {
    reports.iter().all(|r| r.clipped_fraction <= 1e-6)
}

fn matern_scan() -> Outcome {
    let reports = run_preset("matern_nu_scan");
    let rate = |suffix: &str| {
        reports
            .iter()
            .find(|r| r.name.ends_with(suffix))
            .unwrap()
            .fitted_rate
    };
    let (r001, r05, r1) = (rate("nu0.01"), rate("nu0.5"), rate("nu1"));
    Outcome {
        pass: within(r05, 1.5, 0.25)
            && r1 >= 1.6
            && within(r001, 1.0, 0.3)
            && clipping_ok(&reports),
        detail: format!(
            "{} (targets 1.0 +- 0.3, 1.5 +- 0.25, >= 1.6)",
            rates(&reports)
        ),
    }
}

fn exp_vs_factorizable() -> Outcome {
    let reports = run_preset("exp_vs_factorizable");
    let rate = |suffix: &str| {
        reports
            .iter()
            .find(|r| r.name.ends_with(suffix))
            .unwrap()
            .fitted_rate
    };
    let (e, f) = (rate("_exponential"), rate("_factorizable"));
    Outcome {
        pass: within(e, 1.5, 0.25) && within(f, 1.0, 0.25) && e - f >= 0.3 && clipping_ok(&reports),
        detail: format!(
            "{}, gap {:.3} (targets 1.5 +- 0.25, 1.0 +- 0.25, gap >= 0.3)",
            rates(&reports),
            e - f
        ),
    }
}

fn rough_coarse_noise() -> Outcome {
    let reports = run_preset("rough_x0_coarse_noise");
    let find = |suffix: &str| reports.iter().find(|r| r.name.ends_with(suffix)).unwrap();
    let (same, sqrt) = (find("_h_prime_equals_h"), find("_h_prime_sqrt_h"));
    let ratios: Vec<f64> = same
        .rows
        .iter()
        .zip(&sqrt.rows)
        .map(|(a, b)| (b.rms_error - a.rms_error).abs() / a.rms_error)
        .collect();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    Outcome {
        pass: worst <= 0.25
            && within(same.fitted_rate, 1.0, 0.3)
            && within(sqrt.fitted_rate, 1.0, 0.3)
            && clipping_ok(&reports),
        detail: format!(
            "{}, per-level relative differences [{}] (targets rates 1.0 +- 0.3, differences <= 0.25)",
            rates(&reports),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn interpolation_rates() -> Outcome {
    let v = TestFunction::parse("sin").unwrap();
    let levels = [1, 2, 3, 4];
    let study = |r: f64, pairs: usize| {
        interpolation_rate_study(&v, r, 2.0, &levels, MeshKind::Dodecagon, pairs, 7).unwrap()
    };
    let (l2, h1, frac) = (study(0.0, 0), study(1.0, 0), study(0.5, 1_000_000));
    let se = frac
        .rows
        .iter()
        .map(|r| r.stderr / r.error)
        .fold(0.0, f64::max);
    Outcome {
        pass: within(l2.slope, 2.0, 0.1) && within(h1.slope, 1.0, 0.1) && frac.slope >= 1.3,
        detail: format!(
            "slopes r=0 {:.3}, r=1 {:.3}, r=0.5 {:.3} (max relative MC stderr {se:.1e}; targets 2.0 +- 0.1, 1.0 +- 0.1, >= 1.3)",
            l2.slope, h1.slope, frac.slope
        ),
    }
}

fn hilbert_schmidt_bound() -> Outcome {
    let mesh = dodecagon_mesh(2).unwrap();
    let grid = unit_square_grid(2).unwrap();
    let mass = assemble_mass(&mesh, &DofMap::new(&mesh, BoundaryCondition::Neumann));
    let kernels = [
        KernelSpec::matern(0.5, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::Gaussian, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::PolyWendland1, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::PolyWendland2, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::FactorizableExponential, 10.0, 0.25).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for k in &kernels {
        for _ in 0..5 {
            let b: Vec<f64> = (0..mesh.n_nodes())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let hs = hs_norm_interpolated(k, &mesh, &grid, &b).unwrap();
            let bound = 2.0 * k.sup_abs().sqrt() * mass.quadratic_form(&b).sqrt();
            worst = worst.max(hs / bound);
            if hs > bound {
                violations += 1;
            }
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!("25 cases, {violations} violations, largest norm/bound {worst:.3}"),
    }
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();

    for l in 0..4 {
        let (c, f) = (dodecagon_mesh(l).unwrap(), dodecagon_mesh(l + 1).unwrap());
        if c.nodes()
            .iter()
            .zip(f.nodes())
            .any(|(a, b)| a.dist(*b) > 1e-12)
        {
            failures.push(format!("nesting at level {l}"));
        }
        let conforming = edge_counts(f.triangles()).iter().all(|(&(a, b), &count)| {
            let mid = f.nodes()[a].midpoint(f.nodes()[b]);
            (count == 1 && Domain::Dodecagon.on_boundary(mid))
                || (count == 2 && !Domain::Dodecagon.on_boundary(mid))
        });
        if !conforming {
            failures.push(format!("conformity at level {}", l + 1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        let ones = vec![1.0; f.n_nodes()];
        for _ in 0..200 {
            let (r, a) = (
                rng.random_range(0.0..0.48),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let p = Point2::new(0.5 + r * a.cos(), 0.5 + r * a.sin());
            let loc = f.locate(p).unwrap();
            if (f.eval_at(&ones, &loc) - 1.0).abs() > 1e-12 {
                failures.push(format!("partition of unity at {p:?}"));
                break;
            }
        }
    }

    let configs = preset("matern_nu_scan", Profile::Desk).unwrap();
    let mut cfg = configs[1].clone();
    cfg.levels = vec![0, 1];
    cfg.ref_level = 3;
    cfg.samples = 4;
    cfg.problem.t_end = 0.1;
    let serial = run_convergence_study_with(&cfg, false).unwrap().to_csv();
    let again = run_convergence_study_with(&cfg, false).unwrap().to_csv();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let parallel = pool.install(|| run_convergence_study_with(&cfg, true).unwrap().to_csv());
    if serial != again || serial != parallel {
        failures.push("report bytes differ between runs".into());
    }
    let spec = Arc::new(build_spectrum(&cfg.problem.kernel, 3, 4, EmbeddingMode::Strict).unwrap());
    let mut a = NoiseStream::new(spec.clone(), 8, 2, 0.01).unwrap();
    let mut b = NoiseStream::new(spec, 8, 2, 0.01).unwrap();
    let late = b.increment_at(5).to_vec();
    let early: Vec<f64> = (0..=5).map(|_| a.sample_increment()).last().unwrap();
    if early != late {
        failures.push("noise stream depends on access order".into());
    }

    let mut p = cfg.problem.clone();
    p.f = Nonlinearity::Linear(-0.3);
    p.g = Nonlinearity::Constant(1.0);
    p.x0 = InitialData::Constant(0.5);
    let disc = Discretization::new(&p, Arc::new(dodecagon_mesh(2).unwrap()), 3).unwrap();
    let mut stepper = Stepper::new(&p, &disc).unwrap().with_cg_tolerance(1e-15);
    let n_grid = disc.transfer().grid_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w1: Vec<f64> = (0..n_grid).map(|_| rng.random_range(-0.1..0.1)).collect();
    let w2: Vec<f64> = (0..n_grid).map(|_| rng.random_range(-0.1..0.1)).collect();
    let w12: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
    let zero = vec![0.0; n_grid];
    let start = stepper.init().unwrap();
    let mut one_step = |w: &[f64]| {
        let mut s = start.clone();
        stepper.step(&mut s, w).unwrap();
        s.x.coeffs
    };
    let (x12, x1, x2, x0) = (
        one_step(&w12),
        one_step(&w1),
        one_step(&w2),
        one_step(&zero),
    );
    let scale = x0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let defect = (0..x0.len())
        .map(|i| (x12[i] - x1[i] - x2[i] + x0[i]).abs())
        .fold(0.0, f64::max);
    if defect > 1e-10 * scale {
        failures.push(format!("additive-noise affinity defect {defect:e}"));
    }

    let grid = unit_square_grid(4).unwrap();
    let mesh = dodecagon_mesh(3).unwrap();
    let lin = |q: Point2| 0.3 - 1.2 * q.x + 2.5 * q.y;
    let square: Vec<f64> = grid.mesh().nodes().iter().map(|&q| lin(q)).collect();
    let out = transfer_noise(&square, &grid, &mesh).unwrap();
    if out
        .iter()
        .zip(mesh.nodes())
        .any(|(v, &q)| (v - lin(q)).abs() > 1e-12)
    {
        failures.push("transfer does not reproduce linear functions".into());
    }

    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "nesting, conformity, partition of unity, determinism, schedule independence, affinity, linear reproduction".into()
        } else {
            failures.join("; ")
        },
    }
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Outcome, bool); 8] = [
        (1, "deterministic FEM order", fem_order, true),
        (2, "sampler covariance", sampler_covariance, true),
        (3, "Matern smoothness scan", matern_scan, false),
        (
            4,
            "exponential vs factorizable kernel",
            exp_vs_factorizable,
            false,
        ),
        (
            5,
            "rough initial data with coarse noise",
            rough_coarse_noise,
            false,
        ),
        (6, "interpolation rates", interpolation_rates, true),
        (7, "Hilbert-Schmidt bound", hilbert_schmidt_bound, true),
        (8, "property suites", property_suites, true),
    ];
    let mut required_failures = Vec::new();
    for (n, name, check, required) in criteria {
        let start = Instant::now();
        let outcome = check();
        report(n, name, start, &outcome);
        if required && !outcome.pass {
            required_failures.push(n);
        }
    }
    assert!(
        required_failures.is_empty(),
        "criteria {required_failures:?} failed"
    );
}
