use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use interp_spde::fem::{
    assemble_mass, assemble_stiffness, hs_norm_interpolated, transfer_noise, DofMap,
    EllipticCoefficients,
};
use interp_spde::geometry::{
    dodecagon_mesh, edge_counts, unit_square_grid, Domain, Mesh, Point2, DODECAGON_CENTER,
};
use interp_spde::harness::{fit_rate, parse_csv, CoupledNoise, ErrorReport, ErrorRow};
use interp_spde::kernels::{BoundaryCondition, KernelSpec, KernelVariant};
use interp_spde::noise::{build_spectrum, subsample, EmbeddingMode, NoiseStream};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn hash_values(v: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for x in v {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

fn all_kernels() -> Vec<KernelSpec> {
    vec![
        KernelSpec::matern(0.5, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::Gaussian, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::PolyWendland1, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::PolyWendland2, 10.0, 0.25).unwrap(),
        KernelSpec::new(KernelVariant::FactorizableExponential, 10.0, 0.25).unwrap(),
    ]
}

fn point_in_dodecagon() -> impl Strategy<Value = Point2> {
    (0.0..0.48f64, 0.0..std::f64::consts::TAU).prop_map(|(r, a)| {
        Point2::new(
            DODECAGON_CENTER.x + r * a.cos(),
            DODECAGON_CENTER.y + r * a.sin(),
        )
    })
}

fn check_nested(coarse: &Mesh, fine: &Mesh) {
    let mut fine_nodes: Vec<(i64, i64)> = fine
        .nodes()
        .iter()
        .map(|p| ((p.x * 1e12).round() as i64, (p.y * 1e12).round() as i64))
        .collect();
    fine_nodes.sort_unstable();
    for p in coarse.nodes() {
        let key = ((p.x * 1e12).round() as i64, (p.y * 1e12).round() as i64);
        assert!(
            fine_nodes.binary_search(&key).is_ok(),
            "node {p:?} missing at level {}",
            fine.level()
        );
    }
}

#[test]
fn meshes_are_nested() {
    for l in 0..5 {
        let (c, f) = (dodecagon_mesh(l).unwrap(), dodecagon_mesh(l + 1).unwrap());
        check_nested(&c, &f);
        for (a, b) in c.nodes().iter().zip(f.nodes()) {
            assert!(a.dist(*b) <= 1e-12);
        }
        let (gc, gf) = (
            unit_square_grid(l).unwrap(),
            unit_square_grid(l + 1).unwrap(),
        );
        check_nested(gc.mesh(), gf.mesh());
    }
}

#[test]
fn meshes_are_conforming_and_oriented() {
    for l in 0..5 {
        for (mesh, domain) in [
            (dodecagon_mesh(l).unwrap(), Domain::Dodecagon),
            (
                unit_square_grid(l).unwrap().mesh().clone(),
                Domain::UnitSquare,
            ),
        ] {
            for t in 0..mesh.n_triangles() {
                assert!(mesh.triangle_area(t) > 0.0);
            }
            for (&(a, b), &count) in &edge_counts(mesh.triangles()) {
                let mid = mesh.nodes()[a].midpoint(mesh.nodes()[b]);
                match count {
                    1 => assert!(domain.on_boundary(mid)),
                    2 => assert!(!domain.on_boundary(mid)),
                    _ => panic!("edge shared by {count} triangles"),
                }
            }
            assert!((mesh.total_area() - domain.area().unwrap()).abs() < 1e-12);
        }
    }
}

fn permuted(mesh: &Mesh, perm: &[usize], rot: &[usize]) -> Mesh {
    let tris = perm
        .iter()
        .zip(rot)
        .map(|(&t, &r)| {
            let tri = mesh.triangles()[t];
            [tri[r % 3], tri[(r + 1) % 3], tri[(r + 2) % 3]]
        })
        .collect();
    Mesh::new(mesh.nodes().to_vec(), tris, mesh.level(), mesh.domain()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_of_unity(p in point_in_dodecagon(), level in 0u32..5) {
        let mesh = dodecagon_mesh(level).unwrap();
        let loc = mesh.locate(p).unwrap();
        prop_assert!((loc.bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(loc.bary.iter().all(|&l| l >= -1e-12));
        let ones = vec![1.0; mesh.n_nodes()];
        prop_assert!((mesh.eval_at(&ones, &loc) - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = mesh.nodes().iter().map(|q| q.x).collect();
        prop_assert!((mesh.eval_at(&xs, &loc) - p.x).abs() < 1e-12);
    }

    #[test]
    fn transfer_reproduces_linear_functions(
        c in prop::array::uniform3(-5.0..5.0f64),
        grid_level in 1u32..6,
        mesh_level in 0u32..4,
    ) {
        let grid = unit_square_grid(grid_level).unwrap();
        let mesh = dodecagon_mesh(mesh_level).unwrap();
        let lin = |p: Point2| c[0] + c[1] * p.x + c[2] * p.y;
        let sq: Vec<f64> = grid.mesh().nodes().iter().map(|&p| lin(p)).collect();
        let out = transfer_noise(&sq, &grid, &mesh).unwrap();
        for (v, &p) in out.iter().zip(mesh.nodes()) {
            prop_assert!((v - lin(p)).abs() <= 1e-12);
        }
    }

    #[test]
    fn assembly_is_permutation_invariant(seed in any::<u64>(), neumann in any::<bool>()) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mesh = dodecagon_mesh(2).unwrap();
        let mut perm: Vec<usize> = (0..mesh.n_triangles()).collect();
        perm.shuffle(&mut rng);
        let rot: Vec<usize> = (0..perm.len()).map(|_| rng.random_range(0..3)).collect();
        let other = permuted(&mesh, &perm, &rot);
        let bc = if neumann { BoundaryCondition::Neumann } else { BoundaryCondition::Dirichlet };
        let coeffs = EllipticCoefficients::scaled_laplace(0.01, 0.01);
        let (d1, d2) = (DofMap::new(&mesh, bc), DofMap::new(&other, bc));
        let pairs = [
            (assemble_mass(&mesh, &d1), assemble_mass(&other, &d2)),
            (assemble_stiffness(&mesh, &d1, &coeffs).unwrap(), assemble_stiffness(&other, &d2, &coeffs).unwrap()),
        ];
        for (a, b) in pairs {
            let (a, b) = (a.to_dense(), b.to_dense());
            for (ra, rb) in a.iter().zip(&b) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn streams_are_deterministic_under_any_access_order(
        seed in any::<u64>(),
        sample in 0u64..1000,
        steps in prop::collection::vec(0u64..50, 1..8),
    ) {
        let k = KernelSpec::matern(0.5, 10.0, 0.25).unwrap();
        let spec = Arc::new(build_spectrum(&k, 3, 4, EmbeddingMode::Strict).unwrap());
        let mut forward = NoiseStream::new(spec.clone(), seed, sample, 1e-3).unwrap();
        let reference: Vec<Vec<f64>> = (0..50).map(|_| forward.sample_increment()).collect();
        let mut jumpy = NoiseStream::new(spec, seed, sample, 1e-3).unwrap();
        for s in steps {
            prop_assert_eq!(hash_values(jumpy.increment_at(s)), hash_values(&reference[s as usize]));
        }
    }

    #[test]
    fn coupled_noise_is_the_subsampled_fine_path(seed in any::<u64>(), sample in 0u64..100, step in 0u64..20) {
        let k = KernelSpec::matern(1.0, 10.0, 0.25).unwrap();
        let spec = Arc::new(build_spectrum(&k, 5, 4, EmbeddingMode::Strict).unwrap());
        let levels = [2, 3, 4, 5];
        let mut coupled = CoupledNoise::new(spec.clone(), seed, sample, 2e-3, &levels).unwrap();
        coupled.advance(step).unwrap();
        let mut fresh = NoiseStream::new(spec, seed, sample, 2e-3).unwrap();
        let fine = fresh.increment_at(step).to_vec();
        for (i, &l) in levels.iter().enumerate() {
            let expected = subsample(&fine, 5, l).unwrap();
            prop_assert_eq!(hash_values(coupled.coarse(i)), hash_values(&expected));
        }
    }

    #[test]
    fn fit_rate_recovers_power_laws(c in 1e-3..1e3f64, r in 0.1..3.0f64, n in 2usize..6) {
        let pairs: Vec<(f64, f64)> = (0..n).map(|l| {
            let h = 0.5f64.powi(l as i32 + 1);
            (h, c * h.powf(r))
        }).collect();
        prop_assert!((fit_rate(&pairs).unwrap() - r).abs() < 1e-10);
    }

    #[test]
    fn report_csv_round_trips(
        rows in prop::collection::vec((0u32..10, 1e-6..1.0f64, 1e-6..1.0f64, 0.0..10.0f64, 0.0..1.0f64), 0..6),
        rate in -5.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let report = ErrorReport {
            name: "p".into(),
            rows: rows.iter().map(|&(level, h, h_prime, rms_error, stderr)| ErrorRow {
                level, h, h_prime, rms_error, stderr, running_max_rms: None,
            }).collect(),
            fitted_rate: rate,
            predicted: KernelSpec::matern(1.0, 10.0, 0.25).unwrap().predict_rates(BoundaryCondition::Neumann, f64::INFINITY),
            seed,
            samples: 2,
            embed_size: 8,
            clipped_fraction: 0.0,
            config_echo: String::new(),
            wall_time: std::time::Duration::ZERO,
        };
        let parsed = parse_csv(&report.to_csv()).unwrap();
        prop_assert_eq!(parsed.rows, report.rows);
        prop_assert_eq!(parsed.fitted_rate, rate);
        prop_assert_eq!(parsed.seed, seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn kernels_are_positive_semidefinite(pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 20)) {
        let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        for k in all_kernels() {
            let m = DMatrix::from_fn(20, 20, |i, j| k.eval(pts[i], pts[j]));
            let eig = m.symmetric_eigen().eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            prop_assert!(lo >= -1e-8 * hi, "{k}: eigenvalues in [{lo:e}, {hi:e}]");
        }
    }

    #[test]
    fn hs_norm_respects_its_bound(b in prop::collection::vec(-2.0..2.0f64, 121)) {
        let mesh = dodecagon_mesh(2).unwrap();
        let grid = unit_square_grid(2).unwrap();
        let mass = assemble_mass(&mesh, &DofMap::new(&mesh, BoundaryCondition::Neumann));
        let b_norm = mass.quadratic_form(&b).sqrt();
        for k in all_kernels() {
            let hs = hs_norm_interpolated(&k, &mesh, &grid, &b).unwrap();
            prop_assert!(hs <= 2.0 * k.sup_abs().sqrt() * b_norm, "{k}: {hs} vs {b_norm}");
        }
    }
}

#[test]
fn increments_are_independent_across_steps() {
    let k = KernelSpec::matern(0.5, 10.0, 0.25).unwrap();
    let spec = Arc::new(build_spectrum(&k, 2, 4, EmbeddingMode::Strict).unwrap());
    let mut stream = NoiseStream::new(spec, 99, 0, 1.0).unwrap();
    let n = 20_000;
    let node = 12;
    let xs: Vec<f64> = (0..=n).map(|_| stream.sample_increment()[node]).collect();
    let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
    let lag1 = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / n as f64;
    let corr = lag1 / var;
    assert!(
        corr.abs() < 5.0 / (n as f64).sqrt(),
        "lag-one correlation {corr}"
    );
}
