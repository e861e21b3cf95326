//! Semi-implicit Euler scheme with interpolated noise:
//! `(M + dt S) X^j = M X^{j-1} + dt (F-load at X^{j-1}) + G-load at X^{j-1} weighted by the transferred increment`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{
    inverse_diagonal, midpoint_load, pcg, CgWorkspace, EllipticCoefficients, FemField, FemSpace,
    NoiseTransfer, SparseSpd, DEFAULT_CG_TOL,
};
use crate::geometry::{dodecagon_h, square_h, unit_square_grid, Mesh, Point2, DODECAGON_CENTER};
use crate::kernels::{BoundaryCondition, KernelSpec};
use crate::noise::NoiseStream;

pub type ScalarFn = dyn Fn(f64, Point2) -> f64 + Send + Sync;
pub type SourceFn = dyn Fn(Point2, f64) -> f64 + Send + Sync;
pub type PointFn = dyn Fn(Point2) -> f64 + Send + Sync;

/// Scalar nonlinearity `(u, x) -> value` used for the reaction term and the noise coefficient.
#[derive(Clone)]
pub enum Nonlinearity {
    Constant(f64),
    /// `scale * u`.
    Linear(f64),
    /// `offset + scale * u / (|u| + 1)`.
    Saturating {
        offset: f64,
        scale: f64,
    },
    Custom(Arc<ScalarFn>),
}

impl Nonlinearity {
    #[inline]
    pub fn eval(&self, u: f64, x: Point2) -> f64 {
        match self {
            Nonlinearity::Constant(c) => *c,
            Nonlinearity::Linear(a) => a * u,
            Nonlinearity::Saturating { offset, scale } => offset + scale * u / (u.abs() + 1.0),
            Nonlinearity::Custom(f) => f(u, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Constant(c) if *c == 0.0)
            || matches!(self, Nonlinearity::Linear(a) if *a == 0.0)
            || matches!(self, Nonlinearity::Saturating { offset, scale } if *offset == 0.0 && *scale == 0.0)
    }

    /// Accepts `c`, `u`, `a*u`, `u/(|u|+1)` and `c+u/(|u|+1)` (whitespace ignored).
    pub fn parse(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Ok(c) = t.parse::<f64>() {
            return Ok(Nonlinearity::Constant(c));
        }
        if t == "u" {
            return Ok(Nonlinearity::Linear(1.0));
        }
        if let Some(a) = t.strip_suffix("*u") {
            if let Ok(a) = a.parse::<f64>() {
                return Ok(Nonlinearity::Linear(a));
            }
        }
        const SAT: &str = "u/(|u|+1)";
        if let Some(head) = t.strip_suffix(SAT) {
            let (offset_part, scale) = match head.strip_suffix('*') {
                Some(rest) => match rest.rsplit_once('+') {
                    Some((o, s)) => (Some(o), s.parse::<f64>().ok()),
                    None => (None, rest.parse::<f64>().ok()),
                },
                None => (head.strip_suffix('+'), Some(1.0)),
            };
            let scale =
                scale.ok_or_else(|| Error::config(format!("cannot parse nonlinearity '{s}'")))?;
            let offset = match offset_part {
                None if head.is_empty() || head.ends_with('*') => 0.0,
                Some(o) => o
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("cannot parse nonlinearity '{s}'")))?,
                None => return Err(Error::config(format!("cannot parse nonlinearity '{s}'"))),
            };
            return Ok(Nonlinearity::Saturating { offset, scale });
        }
        Err(Error::config(format!("cannot parse nonlinearity '{s}'")))
    }
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::Constant(c) => write!(f, "{c}"),
            Nonlinearity::Linear(a) => write!(f, "{a}*u"),
            Nonlinearity::Saturating { offset, scale } => write!(f, "{offset}+{scale}*u/(|u|+1)"),
            Nonlinearity::Custom(_) => write!(f, "custom"),
        }
    }
}

/// Initial data `X_0`.
#[derive(Clone)]
pub enum InitialData {
    Constant(f64),
    /// `c0 + c1 x + c2 y`.
    Linear([f64; 3]),
    /// `amplitude (-log |x - center|^2)^(1/3)`, singular at the dodecagon center.
    RoughLog {
        amplitude: f64,
    },
    Custom(Arc<PointFn>),
}

/// Points closer than this to a singularity are moved away radially.
pub const SINGULAR_RADIUS: f64 = 1e-10;
pub const SINGULAR_SHIFT: f64 = 1e-8;

impl InitialData {
    pub fn eval(&self, p: Point2) -> f64 {
        match self {
            InitialData::Constant(c) => *c,
            InitialData::Linear([a, b, c]) => a + b * p.x + c * p.y,
            InitialData::RoughLog { amplitude } => {
                let mut d = p - DODECAGON_CENTER;
                let r = d.norm();
                if r < SINGULAR_RADIUS {
                    let dir = if r > 0.0 {
                        (1.0 / r) * d
                    } else {
                        Point2::new(1.0, 0.0)
                    };
                    d = (r + SINGULAR_SHIFT) * dir;
                }
                amplitude * (-(d.x * d.x + d.y * d.y).ln()).cbrt()
            }
            InitialData::Custom(f) => f(p),
        }
    }

    /// Cap on `r1` from the smoothness of `X_0`: infinite for smooth data, 0 for the rough profile.
    pub fn rate_cap(&self) -> f64 {
        match self {
            InitialData::RoughLog { .. } => 0.0,
            _ => f64::INFINITY,
        }
    }

    /// Accepts a number, `linear:c0,c1,c2` or `rough_log[:amplitude]`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Ok(c) = t.parse::<f64>() {
            return Ok(InitialData::Constant(c));
        }
        let (name, arg) = t.split_once(':').unwrap_or((t, ""));
        match name {
            "rough_log" => {
                let amplitude = if arg.is_empty() {
                    3.0
                } else {
                    arg.parse()
                        .map_err(|_| Error::config(format!("bad rough_log amplitude '{arg}'")))?
                };
                Ok(InitialData::RoughLog { amplitude })
            }
            "linear" => {
                let v: Vec<f64> = arg
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::config(format!("bad linear initial data '{arg}'")))?;
                if v.len() != 3 {
                    return Err(Error::config(
                        "linear initial data needs three coefficients",
                    ));
                }
                Ok(InitialData::Linear([v[0], v[1], v[2]]))
            }
            _ => Err(Error::config(format!("unknown initial data '{s}'"))),
        }
    }
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialData::Constant(c) => write!(f, "{c}"),
            InitialData::Linear([a, b, c]) => write!(f, "linear:{a},{b},{c}"),
            InitialData::RoughLog { amplitude } => write!(f, "rough_log:{amplitude}"),
            InitialData::Custom(_) => write!(f, "custom"),
        }
    }
}

/// Data of a semilinear parabolic problem on the dodecagon.
#[derive(Clone, Debug)]
pub struct SpdeProblem {
    pub bc: BoundaryCondition,
    pub coeffs: EllipticCoefficients,
    pub f: Nonlinearity,
    pub g: Nonlinearity,
    /// Constant advection field `b` in `b . grad u`.
    pub advection: [f64; 2],
    /// Optional deterministic source `s(x, t)` added to `f`, evaluated at `t_j`.
    pub source: Option<Arc<SourceFnBox>>,
    pub x0: InitialData,
    pub kernel: KernelSpec,
    pub t_end: f64,
    pub dt: f64,
    pub d_level: u32,
    pub s_level: u32,
}

/// Wrapper giving source closures a `Debug` impl.
pub struct SourceFnBox(pub Box<SourceFn>);

impl fmt::Debug for SourceFnBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "source")
    }
}

impl SpdeProblem {
    /// Number of steps `T / dt`, which must be an integer up to rounding.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::config(format!(
                "dt must lie in (0, 1], got {}",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!(
                "T must be nonnegative, got {}",
                self.t_end
            )));
        }
        let ratio = self.t_end / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::config(format!(
                "T = {} is not an integer multiple of dt = {}",
                self.t_end, self.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.n_steps()?;
        self.kernel.validate()?;
        if self.advection.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("advection field must be finite"));
        }
        Ok(())
    }

    /// `h / h'` for the configured levels.
    pub fn mesh_ratio(&self) -> f64 {
        dodecagon_h(self.d_level) / square_h(self.s_level)
    }

    /// Time of step `j`.
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }
}

/// Assembled operators of a problem on one mesh, shared by all samples.
#[derive(Debug, Clone)]
pub struct Discretization {
    space: FemSpace,
    system: SparseSpd,
    system_inv_diag: Vec<f64>,
    transfer: NoiseTransfer,
    dt: f64,
}

impl Discretization {
    /// Assembles `M + dt S` on `mesh` and the transfer from the level-`s_level` grid.
    pub fn new(problem: &SpdeProblem, mesh: Arc<Mesh>, s_level: u32) -> Result<Self> {
        problem.validate()?;
        let space = FemSpace::new(mesh, problem.bc);
        let stiffness =
            crate::fem::assemble_stiffness(space.mesh(), space.dofs(), &problem.coeffs)?;
        let system = SparseSpd::combine(1.0, space.mass(), problem.dt, &stiffness)?;
        let system_inv_diag = inverse_diagonal(&system)?;
        let grid = unit_square_grid(s_level)?;
        let transfer = NoiseTransfer::new(&grid, space.mesh())?;
        Ok(Discretization {
            space,
            system,
            system_inv_diag,
            transfer,
            dt: problem.dt,
        })
    }

    pub fn space(&self) -> &FemSpace {
        &self.space
    }

    pub fn system(&self) -> &SparseSpd {
        &self.system
    }

    pub fn transfer(&self) -> &NoiseTransfer {
        &self.transfer
    }

    pub fn s_level(&self) -> u32 {
        self.transfer.grid_level()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepperState {
    pub j: usize,
    pub t: f64,
    pub x: FemField,
}

/// Marches one sample; owns all per-sample work buffers.
pub struct Stepper<'a> {
    problem: &'a SpdeProblem,
    disc: &'a Discretization,
    u_nodal: Vec<f64>,
    w_nodal: Vec<f64>,
    load: Vec<f64>,
    rhs: Vec<f64>,
    cg: CgWorkspace,
    cg_tol: f64,
    pub last_cg_iterations: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a SpdeProblem, disc: &'a Discretization) -> Result<Self> {
        if (disc.dt - problem.dt).abs() > 0.0 || disc.space.bc() != problem.bc {
            return Err(Error::config(
                "discretization was assembled for a different problem",
            ));
        }
        let nn = disc.space.mesh().n_nodes();
        let nd = disc.space.n_dofs();
        Ok(Stepper {
            problem,
            disc,
            u_nodal: vec![0.0; nn],
            w_nodal: vec![0.0; nn],
            load: vec![0.0; nd],
            rhs: vec![0.0; nd],
            cg: CgWorkspace::default(),
            cg_tol: DEFAULT_CG_TOL,
            last_cg_iterations: 0,
        })
    }

    /// Relative residual target of the linear solves (default 1e-10).
    pub fn with_cg_tolerance(mut self, tol: f64) -> Self {
        self.cg_tol = tol;
        self
    }

    /// `X^0 = P_h X_0`.
    pub fn init(&self) -> Result<StepperState> {
        let x0 = &self.problem.x0;
        let x = match x0 {
            InitialData::Constant(c) if *c == 0.0 => FemField::zeros(self.disc.space.n_dofs()),
            _ => self.disc.space.l2_project(|p| x0.eval(p))?,
        };
        Ok(StepperState { j: 0, t: 0.0, x })
    }

    /// Advances `state` by one step using the square-grid increment `square_increment`.
    pub fn step(&mut self, state: &mut StepperState, square_increment: &[f64]) -> Result<()> {
        let j = state.j + 1;
        self.step_inner(state, square_increment)
            .map_err(|e| Error::Step {
                step: j,
                source: Box::new(e),
            })
    }

    fn step_inner(&mut self, state: &mut StepperState, square_increment: &[f64]) -> Result<()> {
        let p = self.problem;
        let space = &self.disc.space;
        let dt = p.dt;
        let j = state.j + 1;
        let t = p.time(j);
        self.disc
            .transfer
            .apply_into(square_increment, &mut self.w_nodal)?;
        space
            .dofs()
            .to_nodal_into(&state.x.coeffs, &mut self.u_nodal);
        let adv = p.advection;
        let need_gradient = adv != [0.0, 0.0];
        let source = p.source.as_deref();
        let (f, g) = (&p.f, &p.g);
        let g_zero = g.is_zero();
        midpoint_load(
            space.mesh(),
            space.dofs(),
            &self.u_nodal,
            Some(&self.w_nodal),
            need_gradient,
            &mut self.load,
            |x, u, w, gu| {
                let mut drift = f.eval(u, x) + adv[0] * gu[0] + adv[1] * gu[1];
                if let Some(s) = source {
                    drift += (s.0)(x, t);
                }
                let noise = if g_zero { 0.0 } else { g.eval(u, x) * w };
                dt * drift + noise
            },
        );
        space.mass().matvec_into(&state.x.coeffs, &mut self.rhs);
        for (r, l) in self.rhs.iter_mut().zip(&self.load) {
            *r += l;
        }
        let stats = pcg(
            &self.disc.system,
            &self.disc.system_inv_diag,
            &self.rhs,
            &mut state.x.coeffs,
            self.cg_tol,
            &mut self.cg,
        )?;
        self.last_cg_iterations = stats.iterations;
        if !state.x.is_finite() {
            return Err(Error::Numeric("non-finite state".into()));
        }
        state.j = j;
        state.t = t;
        Ok(())
    }
}

/// Runs `N = T / dt` steps pulling increments from `stream`; returns snapshots at `record_at`.
pub fn run(
    problem: &SpdeProblem,
    disc: &Discretization,
    stream: &mut NoiseStream,
    record_at: &[usize],
) -> Result<BTreeMap<usize, FemField>> {
    if stream.grid_level() != disc.s_level() {
        return Err(Error::config(format!(
            "noise stream on level {} but discretization expects level {}",
            stream.grid_level(),
            disc.s_level()
        )));
    }
    if stream.dt() != problem.dt {
        return Err(Error::config(
            "noise stream and problem use different time steps",
        ));
    }
    let n = problem.n_steps()?;
    let mut stepper = Stepper::new(problem, disc)?;
    let mut state = stepper.init()?;
    let mut out = BTreeMap::new();
    if record_at.contains(&0) {
        out.insert(0, state.x.clone());
    }
    for j in 1..=n {
        let inc = stream.increment_at((j - 1) as u64).to_vec();
        stepper.step(&mut state, &inc)?;
        if record_at.contains(&j) {
            out.insert(j, state.x.clone());
        }
    }
    Ok(out)
}
