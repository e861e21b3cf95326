//! `L^p`, `W^{1,p}` and Monte Carlo Slobodeckij seminorms, and empirical
//! interpolation error rates of P1 nodal interpolation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{p1_gradients, DEGREE5_RULE};
use crate::geometry::{dodecagon_mesh, unit_square_grid, Mesh, Point2};
use crate::noise::stream_seed;

/// Pairs closer than this are redrawn.
pub const MIN_PAIR_DISTANCE: f64 = 1e-9;
const MAX_REDRAWS: usize = 100;
const MC_CHUNKS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeminormEstimate {
    pub r: f64,
    pub p: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("p must lie in [1, inf), got {p}")))
    }
}

/// `(int |f|^p)^(1/p)` by the degree-5 rule on each triangle.
pub fn lp_norm<F: Fn(Point2) -> f64>(f: F, mesh: &Mesh, p: f64) -> Result<f64> {
    lp_norm_located(mesh, p, |_, _, x| f(x))
}

fn lp_norm_located<F: Fn(usize, [f64; 3], Point2) -> f64>(
    mesh: &Mesh,
    p: f64,
    f: F,
) -> Result<f64> {
    check_p(p)?;
    let mut total = 0.0;
    for t in 0..mesh.n_triangles() {
        let v = mesh.vertices(t);
        let area = mesh.triangle_area(t);
        for (l, w) in DEGREE5_RULE {
            let x = bary_point(&v, &l);
            total += w * area * f(t, l, x).abs().powf(p);
        }
    }
    Ok(total.powf(1.0 / p))
}

/// `L^p` norm of the P1 function with the given nodal values.
pub fn lp_norm_nodal(nodal: &[f64], mesh: &Mesh, p: f64) -> Result<f64> {
    lp_norm_located(mesh, p, |t, l, _| p1_value(mesh, nodal, t, &l))
}

fn bary_point(v: &[Point2; 3], l: &[f64; 3]) -> Point2 {
    Point2::new(
        l[0] * v[0].x + l[1] * v[1].x + l[2] * v[2].x,
        l[0] * v[0].y + l[1] * v[1].y + l[2] * v[2].y,
    )
}

fn p1_value(mesh: &Mesh, nodal: &[f64], t: usize, l: &[f64; 3]) -> f64 {
    let tri = mesh.triangles()[t];
    l[0] * nodal[tri[0]] + l[1] * nodal[tri[1]] + l[2] * nodal[tri[2]]
}

fn p1_gradient(mesh: &Mesh, nodal: &[f64], t: usize) -> [f64; 2] {
    let tri = mesh.triangles()[t];
    let (g, _) = p1_gradients(&mesh.vertices(t));
    let mut gu = [0.0; 2];
    for i in 0..3 {
        gu[0] += nodal[tri[i]] * g[i][0];
        gu[1] += nodal[tri[i]] * g[i][1];
    }
    gu
}

/// `(sum_T |T| (|d_1 u|^p + |d_2 u|^p))^(1/p)` for a P1 function, exact.
pub fn w1p_seminorm(nodal: &[f64], mesh: &Mesh, p: f64) -> Result<f64> {
    check_p(p)?;
    let total: f64 = (0..mesh.n_triangles())
        .map(|t| {
            let g = p1_gradient(mesh, nodal, t);
            mesh.triangle_area(t) * (g[0].abs().powf(p) + g[1].abs().powf(p))
        })
        .sum();
    Ok(total.powf(1.0 / p))
}

/// Area-weighted triangle sampler.
struct PointSampler<'a> {
    mesh: &'a Mesh,
    cumulative: Vec<f64>,
}

impl<'a> PointSampler<'a> {
    fn new(mesh: &'a Mesh) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..mesh.n_triangles())
            .map(|t| {
                acc += mesh.triangle_area(t);
                acc
            })
            .collect();
        PointSampler { mesh, cumulative }
    }

    fn total_area(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (usize, [f64; 3], Point2) {
        let target = rng.random::<f64>() * self.total_area();
        let t = self
            .cumulative
            .partition_point(|&c| c <= target)
            .min(self.cumulative.len() - 1);
        let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
        if a + b > 1.0 {
            a = 1.0 - a;
            b = 1.0 - b;
        }
        let l = [1.0 - a - b, a, b];
        (t, l, bary_point(&self.mesh.vertices(t), &l))
    }
}

/// Monte Carlo estimate of `(int int |f(x) - f(y)|^p / |x - y|^(2 + p r) dx dy)^(1/p)` over the mesh domain.
pub fn slobodeckij_seminorm_mc<F>(
    f: F,
    mesh: &Mesh,
    r: f64,
    p: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<SeminormEstimate>
where
    F: Fn(Point2) -> f64 + Sync,
{
    slobodeckij_located(mesh, r, p, n_pairs, seed, |_, _, x| f(x))
}

fn slobodeckij_located<F>(
    mesh: &Mesh,
    r: f64,
    p: f64,
    n_pairs: usize,
    seed: u64,
    f: F,
) -> Result<SeminormEstimate>
where
    F: Fn(usize, [f64; 3], Point2) -> f64 + Sync,
{
    let (integral, se) = slobodeckij_integral(mesh, r, p, n_pairs, seed, f)?;
    let value = integral.powf(1.0 / p);
    let stderr = if integral > 0.0 {
        se * value / (p * integral)
    } else {
        0.0
    };
    Ok(SeminormEstimate {
        r,
        p,
        value,
        stderr,
        n_samples: n_pairs,
    })
}

/// Double integral and its standard error.
fn slobodeckij_integral<F>(
    mesh: &Mesh,
    r: f64,
    p: f64,
    n_pairs: usize,
    seed: u64,
    f: F,
) -> Result<(f64, f64)>
where
    F: Fn(usize, [f64; 3], Point2) -> f64 + Sync,
{
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config(format!(
            "fractional order must lie in (0, 1), got {r}"
        )));
    }
    check_p(p)?;
    if n_pairs < 2 {
        return Err(Error::config("at least two pairs are needed"));
    }
    let sampler = PointSampler::new(mesh);
    let exponent = 2.0 + p * r;
    let chunk_len = n_pairs.div_ceil(MC_CHUNKS);
    let partial: Vec<Result<(f64, f64, usize)>> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let count = chunk_len.min(n_pairs.saturating_sub(c * chunk_len));
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x5eed, c as u64));
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let mut tries = 0;
                let z = loop {
                    let (tx, lx, x) = sampler.draw(&mut rng);
                    let (ty, ly, y) = sampler.draw(&mut rng);
                    let d = x.dist(y);
                    if d < MIN_PAIR_DISTANCE {
                        continue;
                    }
                    let (fx, fy) = (f(tx, lx, x), f(ty, ly, y));
                    if fx.is_finite() && fy.is_finite() {
                        break (fx - fy).abs().powf(p) / d.powf(exponent);
                    }
                    tries += 1;
                    if tries > MAX_REDRAWS {
                        return Err(Error::Numeric(format!(
                            "function not finite at sampled points after {MAX_REDRAWS} redraws"
                        )));
                    }
                };
                s += z;
                s2 += z * z;
            }
            Ok((s, s2, count))
        })
        .collect();
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for part in partial {
        let (a, b, c) = part?;
        s += a;
        s2 += b;
        n += c;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    let area2 = sampler.total_area().powi(2);
    Ok((area2 * mean, area2 * (var / nf).sqrt()))
}

/// Functions with known gradients for interpolation studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// `sin(pi x) sin(pi y)`.
    SinProduct,
    /// `c0 + c1 x + c2 y`.
    Linear([f64; 3]),
    /// `|x - center|^exponent`.
    RadialPower { center: Point2, exponent: f64 },
}

impl TestFunction {
    pub fn value(&self, x: Point2) -> f64 {
        use std::f64::consts::PI;
        match *self {
            TestFunction::SinProduct => (PI * x.x).sin() * (PI * x.y).sin(),
            TestFunction::Linear([a, b, c]) => a + b * x.x + c * x.y,
            TestFunction::RadialPower { center, exponent } => (x - center).norm().powf(exponent),
        }
    }

    pub fn gradient(&self, x: Point2) -> [f64; 2] {
        use std::f64::consts::PI;
        match *self {
            TestFunction::SinProduct => [
                PI * (PI * x.x).cos() * (PI * x.y).sin(),
                PI * (PI * x.x).sin() * (PI * x.y).cos(),
            ],
            TestFunction::Linear([_, b, c]) => [b, c],
            TestFunction::RadialPower { center, exponent } => {
                let d = x - center;
                let r = d.norm();
                if r == 0.0 {
                    return [0.0, 0.0];
                }
                let s = exponent * r.powf(exponent - 2.0);
                [s * d.x, s * d.y]
            }
        }
    }

    /// Supremum of Sobolev orders `s` with the function in `W^{s,p}` (2D).
    pub fn smoothness(&self, p: f64) -> f64 {
        match *self {
            TestFunction::SinProduct | TestFunction::Linear(_) => f64::INFINITY,
            TestFunction::RadialPower { exponent, .. } => exponent + 2.0 / p,
        }
    }

    /// `sin`, `linear:c0,c1,c2` or `radial:exponent[,cx,cy]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let nums = || -> Result<Vec<f64>> {
            arg.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad number in '{s}'")))
                })
                .collect()
        };
        match name {
            "sin" | "sin_product" => Ok(TestFunction::SinProduct),
            "linear" => match nums()?.as_slice() {
                [a, b, c] => Ok(TestFunction::Linear([*a, *b, *c])),
                _ => Err(Error::config("linear needs three coefficients")),
            },
            "radial" => match nums()?.as_slice() {
                [e] => Ok(TestFunction::RadialPower {
                    center: Point2::new(0.5, 0.5),
                    exponent: *e,
                }),
                [e, cx, cy] => Ok(TestFunction::RadialPower {
                    center: Point2::new(*cx, *cy),
                    exponent: *e,
                }),
                _ => Err(Error::config(
                    "radial needs an exponent and optionally a center",
                )),
            },
            _ => Err(Error::config(format!("unknown test function '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    Square,
    Dodecagon,
}

impl MeshKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "square" | "unit_square" => Ok(MeshKind::Square),
            "dodecagon" => Ok(MeshKind::Dodecagon),
            other => Err(Error::config(format!("unknown mesh family '{other}'"))),
        }
    }

    pub fn mesh(self, level: u32) -> Result<Mesh> {
        match self {
            MeshKind::Square => Ok(unit_square_grid(level)?.mesh().clone()),
            MeshKind::Dodecagon => dodecagon_mesh(level),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationRow {
    pub level: u32,
    pub h: f64,
    pub error: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationStudy {
    pub rows: Vec<InterpolationRow>,
    pub slope: f64,
}

/// `W^{r,p}` norm of `v - I_h v` on one mesh: exact paths for `r` in `{0, 1}`, Monte Carlo otherwise.
pub fn interpolation_error(
    v: &TestFunction,
    mesh: &Mesh,
    r: f64,
    p: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let nodal: Vec<f64> = mesh.nodes().iter().map(|&x| v.value(x)).collect();
    let err = |t: usize, l: [f64; 3], x: Point2| v.value(x) - p1_value(mesh, &nodal, t, &l);
    let lp = lp_norm_located(mesh, p, err)?.powf(p);
    if r == 0.0 {
        return Ok((lp.powf(1.0 / p), 0.0));
    }
    if r == 1.0 {
        let grads: Vec<[f64; 2]> = (0..mesh.n_triangles())
            .map(|t| p1_gradient(mesh, &nodal, t))
            .collect();
        let mut semi = 0.0;
        for (t, gh) in grads.iter().enumerate() {
            let vtx = mesh.vertices(t);
            let area = mesh.triangle_area(t);
            for (l, w) in DEGREE5_RULE {
                let g = v.gradient(bary_point(&vtx, &l));
                semi += w * area * ((g[0] - gh[0]).abs().powf(p) + (g[1] - gh[1]).abs().powf(p));
            }
        }
        return Ok(((lp + semi).powf(1.0 / p), 0.0));
    }
    if r > 0.0 && r < 1.0 {
        let (semi, se) = slobodeckij_integral(mesh, r, p, n_pairs, seed, err)?;
        let total = lp + semi;
        let value = total.powf(1.0 / p);
        let stderr = if total > 0.0 {
            se * value / (p * total)
        } else {
            0.0
        };
        return Ok((value, stderr));
    }
    Err(Error::config(format!("order r = {r} must lie in [0, 1]")))
}

/// Errors `||(I - I_h) v||_{W^{r,p}}` over `levels` and the least-squares slope over the last three levels.
pub fn interpolation_rate_study(
    v: &TestFunction,
    r: f64,
    p: f64,
    levels: &[u32],
    kind: MeshKind,
    n_pairs: usize,
    seed: u64,
) -> Result<InterpolationStudy> {
    if levels.len() < 2 {
        return Err(Error::config("need at least two levels"));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let mesh = kind.mesh(level)?;
        let (error, stderr) = interpolation_error(v, &mesh, r, p, n_pairs, seed ^ level as u64)?;
        rows.push(InterpolationRow {
            level,
            h: mesh.h_max(),
            error,
            stderr,
        });
    }
    let tail = &rows[rows.len().saturating_sub(3)..];
    let slope = if tail.iter().all(|row| row.error > 0.0) {
        crate::harness::fit_rate(
            &tail
                .iter()
                .map(|row| (row.h, row.error))
                .collect::<Vec<_>>(),
        )?
    } else {
        f64::NAN
    };
    Ok(InterpolationStudy { rows, slope })
}

impl InterpolationStudy {
    /// `level,h,error,stderr` rows and a `slope,<value>` footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,h,error,stderr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.level, r.h, r.error, r.stderr);
        }
        let _ = writeln!(s, "slope,{}", self.slope);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("level,h,error,stderr") {
            return Err(Error::config("missing interpolation CSV header"));
        }
        let mut rows = Vec::new();
        let mut slope = None;
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::config(format!("malformed interpolation CSV line {}", i + 2));
            match fields.as_slice() {
                ["slope", v] => slope = Some(v.parse().map_err(|_| bad())?),
                [l, h, e, s] => rows.push(InterpolationRow {
                    level: l.parse().map_err(|_| bad())?,
                    h: h.parse().map_err(|_| bad())?,
                    error: e.parse().map_err(|_| bad())?,
                    stderr: s.parse().map_err(|_| bad())?,
                }),
                [""] => {}
                _ => return Err(bad()),
            }
        }
        Ok(InterpolationStudy {
            rows,
            slope: slope.ok_or_else(|| Error::config("missing slope footer"))?,
        })
    }
}
