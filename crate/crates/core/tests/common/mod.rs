#![allow(dead_code)]

use std::sync::Arc;

use interp_spde::fem::{EllipticCoefficients, DEGREE5_RULE};
use interp_spde::geometry::{dodecagon_mesh, Mesh, Point2, DODECAGON_CENTER};
use interp_spde::harness::fit_rate;
use interp_spde::kernels::{BoundaryCondition, KernelSpec};
use interp_spde::stepper::{
    Discretization, InitialData, Nonlinearity, SourceFnBox, SpdeProblem, Stepper,
};

const R0: f64 = 0.48;

/// Smooth bump `(1 - r^2/R0^2)^4`, flat near the boundary so its normal derivative vanishes.
pub fn bump(p: Point2) -> f64 {
    let s = (p - DODECAGON_CENTER).dot(p - DODECAGON_CENTER) / (R0 * R0);
    if s < 1.0 {
        (1.0 - s).powi(4)
    } else {
        0.0
    }
}

pub fn bump_laplacian(p: Point2) -> f64 {
    let r2 = (p - DODECAGON_CENTER).dot(p - DODECAGON_CENTER);
    let s = r2 / (R0 * R0);
    if s >= 1.0 {
        return 0.0;
    }
    let g1 = -4.0 * (1.0 - s).powi(3);
    let g2 = 12.0 * (1.0 - s).powi(2);
    g2 * 4.0 * r2 / R0.powi(4) + g1 * 4.0 / (R0 * R0)
}

/// Noise-free Neumann problem with exact solution `u(x, t) = (1 + t) bump(x)` for `A = alpha (-Laplace + 1)`.
pub fn manufactured_problem(alpha: f64, t_end: f64, dt: f64) -> SpdeProblem {
    let source =
        move |p: Point2, t: f64| bump(p) + (1.0 + t) * alpha * (bump(p) - bump_laplacian(p));
    SpdeProblem {
        bc: BoundaryCondition::Neumann,
        coeffs: EllipticCoefficients::scaled_laplace(alpha, alpha),
        f: Nonlinearity::Constant(0.0),
        g: Nonlinearity::Constant(0.0),
        advection: [0.0, 0.0],
        source: Some(Arc::new(SourceFnBox(Box::new(source)))),
        x0: InitialData::Custom(Arc::new(bump)),
        kernel: KernelSpec::matern(0.5, 1.0, 0.25).unwrap(),
        t_end,
        dt,
        d_level: 1,
        s_level: 1,
    }
}

/// `||u_h - u||_{L2}` with a degree-5 rule.
pub fn l2_error<F: Fn(Point2) -> f64>(mesh: &Mesh, nodal: &[f64], u: F) -> f64 {
    let mut sum = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let v = mesh.vertices(t);
        let area = mesh.triangle_area(t);
        for (l, w) in DEGREE5_RULE {
            let p = Point2::new(
                l[0] * v[0].x + l[1] * v[1].x + l[2] * v[2].x,
                l[0] * v[0].y + l[1] * v[1].y + l[2] * v[2].y,
            );
            let uh = l[0] * nodal[tri[0]] + l[1] * nodal[tri[1]] + l[2] * nodal[tri[2]];
            sum += w * area * (uh - u(p)).powi(2);
        }
    }
    sum.sqrt()
}

/// Errors at `T` against the exact solution over `levels`, and the fitted rate.
pub fn manufactured_rate(alpha: f64, levels: &[u32]) -> (Vec<(f64, f64)>, f64) {
    let mut problem = manufactured_problem(alpha, 1.0, 0.05);
    let pairs: Vec<(f64, f64)> = levels
        .iter()
        .map(|&l| {
            problem.d_level = l;
            problem.s_level = l + 1;
            let mesh = Arc::new(dodecagon_mesh(l).unwrap());
            let disc = Discretization::new(&problem, mesh.clone(), l + 1).unwrap();
            let mut stepper = Stepper::new(&problem, &disc)
                .unwrap()
                .with_cg_tolerance(1e-13);
            let mut state = stepper.init().unwrap();
            let zeros = vec![0.0; disc.transfer().grid_nodes()];
            for _ in 0..problem.n_steps().unwrap() {
                stepper.step(&mut state, &zeros).unwrap();
            }
            let t = state.t;
            let nodal = disc.space().nodal(&state.x);
            (
                mesh.h_max(),
                l2_error(&mesh, &nodal, |p| (1.0 + t) * bump(p)),
            )
        })
        .collect();
    let rate = fit_rate(&pairs).unwrap();
    (pairs, rate)
}
