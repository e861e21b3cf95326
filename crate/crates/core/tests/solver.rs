mod common;

use std::sync::Arc;

use interp_spde::fem::{transfer_noise, EllipticCoefficients};
use interp_spde::geometry::{dodecagon_mesh, unit_square_grid, Mesh};
use interp_spde::harness::{preset, Profile};
use interp_spde::kernels::{BoundaryCondition, KernelSpec};
use interp_spde::noise::{build_spectrum, NoiseStream};
use interp_spde::stepper::{Discretization, InitialData, Nonlinearity, SpdeProblem, Stepper};
use nalgebra::{DMatrix, DVector};

#[test]
fn heat_equation_converges_at_second_order() {
    // the coarsest dodecagon mesh cannot integrate the unit-diffusion source
    let (pairs, rate) = common::manufactured_rate(1.0, &[2, 3, 4, 5]);
    assert!((rate - 2.0).abs() <= 0.15, "rate {rate}, errors {pairs:?}");
    let (pairs, rate) = common::manufactured_rate(0.01, &[1, 2, 3, 4]);
    assert!((rate - 2.0).abs() <= 0.15, "rate {rate}, errors {pairs:?}");
}

/// Dense P1 mass and stiffness of `alpha (-Laplace) + c` from scratch.
fn dense_operators(mesh: &Mesh, alpha: f64, c: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = mesh.n_nodes();
    let mut m = DMatrix::zeros(n, n);
    let mut k = DMatrix::zeros(n, n);
    for tri in mesh.triangles() {
        let p = tri.map(|i| mesh.nodes()[i]);
        let det = (p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y);
        let area = 0.5 * det;
        let grads: Vec<(f64, f64)> = (0..3)
            .map(|a| {
                let (b, c) = (p[(a + 1) % 3], p[(a + 2) % 3]);
                ((b.y - c.y) / det, (c.x - b.x) / det)
            })
            .collect();
        for a in 0..3 {
            for b in 0..3 {
                let mass = area * if a == b { 1.0 / 6.0 } else { 1.0 / 12.0 };
                m[(tri[a], tri[b])] += mass;
                k[(tri[a], tri[b])] +=
                    alpha * area * (grads[a].0 * grads[b].0 + grads[a].1 * grads[b].1) + c * mass;
            }
        }
    }
    (m, k)
}

fn problem(bc: BoundaryCondition, f: Nonlinearity, x0: InitialData) -> SpdeProblem {
    SpdeProblem {
        bc,
        coeffs: EllipticCoefficients::scaled_laplace(0.01, 0.01),
        f,
        g: Nonlinearity::Constant(0.0),
        advection: [0.0, 0.0],
        source: None,
        x0,
        kernel: KernelSpec::matern(0.5, 10.0, 0.25).unwrap(),
        t_end: 0.2,
        dt: 0.01,
        d_level: 2,
        s_level: 3,
    }
}

#[test]
fn noise_free_run_matches_dense_backward_euler() {
    let mesh = Arc::new(dodecagon_mesh(2).unwrap());
    let (m, k) = dense_operators(&mesh, 0.01, 0.01);
    let n = mesh.n_nodes();
    let cases = [
        (
            BoundaryCondition::Neumann,
            Nonlinearity::Linear(0.5),
            InitialData::Linear([1.0, -2.0, 3.0]),
        ),
        (
            BoundaryCondition::Dirichlet,
            Nonlinearity::Constant(0.1),
            InitialData::Constant(0.0),
        ),
    ];
    for (bc, f, x0) in cases {
        let p = problem(bc, f.clone(), x0.clone());
        let disc = Discretization::new(&p, mesh.clone(), 3).unwrap();
        let mut stepper = Stepper::new(&p, &disc).unwrap().with_cg_tolerance(1e-14);
        let mut state = stepper.init().unwrap();
        let zeros = vec![0.0; disc.transfer().grid_nodes()];

        let free: Vec<usize> = (0..n)
            .filter(|&i| bc == BoundaryCondition::Neumann || !mesh.is_boundary(i))
            .collect();
        let restrict = |a: &DMatrix<f64>| {
            DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])])
        };
        let (mf, kf) = (restrict(&m), restrict(&k));
        let system = (&mf + p.dt * &kf).lu();
        let mut x =
            DVector::from_iterator(free.len(), free.iter().map(|&i| x0.eval(mesh.nodes()[i])));
        let ones = DVector::from_element(n, 1.0);
        let const_load = (&m * &ones).select_rows(&free);
        for _ in 0..p.n_steps().unwrap() {
            stepper.step(&mut state, &zeros).unwrap();
            let rhs = match f {
                Nonlinearity::Linear(a) => (1.0 + p.dt * a) * (&mf * &x),
                Nonlinearity::Constant(c) => &mf * &x + p.dt * c * &const_load,
                _ => unreachable!(),
            };
            x = system.solve(&rhs).unwrap();
        }
        let nodal = disc.space().nodal(&state.x);
        for (i, &node) in free.iter().enumerate() {
            assert!(
                (nodal[node] - x[i]).abs() < 1e-9,
                "{bc:?} node {node}: {} vs {}",
                nodal[node],
                x[i]
            );
        }
    }
}

#[test]
fn noise_enters_only_through_its_interpolant() {
    let mut p = problem(
        BoundaryCondition::Neumann,
        Nonlinearity::Saturating {
            offset: 0.1,
            scale: 1.0,
        },
        InitialData::Constant(1.0),
    );
    p.g = Nonlinearity::Saturating {
        offset: 0.0,
        scale: 1.0,
    };
    let mesh = Arc::new(dodecagon_mesh(2).unwrap());
    let coarse = Discretization::new(&p, mesh.clone(), 3).unwrap();
    let fine = Discretization::new(&p, mesh, 5).unwrap();
    let (g3, g5) = (unit_square_grid(3).unwrap(), unit_square_grid(5).unwrap());
    let spec = Arc::new(build_spectrum(&p.kernel, 3, 4, Default::default()).unwrap());
    let mut stream = NoiseStream::new(spec, 11, 0, p.dt).unwrap();
    let mut sc = Stepper::new(&p, &coarse).unwrap();
    let mut sf = Stepper::new(&p, &fine).unwrap();
    let (mut xc, mut xf) = (sc.init().unwrap(), sf.init().unwrap());
    for _ in 0..p.n_steps().unwrap() {
        let w3 = stream.sample_increment();
        let w5 = transfer_noise(&w3, &g3, g5.mesh()).unwrap();
        sc.step(&mut xc, &w3).unwrap();
        sf.step(&mut xf, &w5).unwrap();
    }
    for (a, b) in xc.x.coeffs.iter().zip(&xf.x.coeffs) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn desk_configs_do_not_blow_up() {
    for name in [
        "matern_nu_scan",
        "exp_vs_factorizable",
        "rough_x0_coarse_noise",
    ] {
        for cfg in preset(name, Profile::Desk).unwrap() {
            let p = &cfg.problem;
            let level = 3;
            let s_level = cfg.coupling.s_level(level);
            let disc =
                Discretization::new(p, Arc::new(dodecagon_mesh(level).unwrap()), s_level).unwrap();
            let spec = Arc::new(
                build_spectrum(&p.kernel, s_level, cfg.max_padding, cfg.embedding_mode).unwrap(),
            );
            let mut stream = NoiseStream::new(spec, cfg.master_seed, 0, p.dt).unwrap();
            let mut stepper = Stepper::new(p, &disc).unwrap();
            let mut state = stepper.init().unwrap();
            let mut max: f64 = disc.space().l2_norm(&state.x);
            for _ in 0..p.n_steps().unwrap() {
                let w = stream.sample_increment();
                stepper.step(&mut state, &w).unwrap();
                max = max.max(disc.space().l2_norm(&state.x));
            }
            assert!(
                max.is_finite() && max <= 1e3,
                "{}: max norm {max}",
                cfg.name
            );
        }
    }
}

#[test]
fn time_grid_is_exact() {
    let mut p = problem(
        BoundaryCondition::Neumann,
        Nonlinearity::Constant(0.0),
        InitialData::Constant(0.0),
    );
    for (t_end, dt, n) in [(1.0, 1e-3, 1000), (1.0, 2e-3, 500), (0.3, 0.1, 3)] {
        p.t_end = t_end;
        p.dt = dt;
        assert_eq!(p.n_steps().unwrap(), n);
        assert!((p.time(n) - t_end).abs() <= f64::EPSILON * t_end);
    }
}
