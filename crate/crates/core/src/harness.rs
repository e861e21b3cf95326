//! Monte Carlo strong convergence studies: configuration, presets, coupled
//! multi-level runs, rate fitting and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{l2_norm, prolong_nodal, EllipticCoefficients};
use crate::geometry::{dodecagon_h, square_h, MeshFamily, MAX_LEVEL};
use crate::kernels::{build_kernel, BoundaryCondition, KernelSpec, KernelVariant, RatePrediction};
use crate::noise::{
    build_spectrum, subsample_into, CirculantSpectrum, EmbeddingMode, NoiseStream,
    DEFAULT_MAX_PADDING,
};
use crate::stepper::{
    Discretization, InitialData, Nonlinearity, SpdeProblem, Stepper, StepperState,
};

/// How the noise grid level `l'` follows the mesh level `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// `h' = h`: `l' = l + 1`.
    HPrimeEqualsH,
    /// `h' ~ sqrt(h)`: `l' = ceil((l + 1) / 2)`.
    HPrimeSqrtH,
    /// `l'` fixed for every mesh level.
    FixedLevel(u32),
}

impl Coupling {
    pub fn s_level(self, d_level: u32) -> u32 {
        match self {
            Coupling::HPrimeEqualsH => d_level + 1,
            Coupling::HPrimeSqrtH => (d_level + 1).div_ceil(2),
            Coupling::FixedLevel(l) => l,
        }
    }

    /// Noise level of the reference run.
    pub fn reference_s_level(self, ref_level: u32) -> u32 {
        match self {
            Coupling::FixedLevel(l) => l,
            _ => ref_level + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coupling::HPrimeEqualsH => "h_prime_equals_h",
            Coupling::HPrimeSqrtH => "h_prime_sqrt_h",
            Coupling::FixedLevel(_) => "fixed_level",
        }
    }

    /// Parses a coupling name; `fixed_level` takes its level from `grid_level`.
    pub fn parse(s: &str, grid_level: Option<u32>) -> Result<Self> {
        match s.trim() {
            "h_prime_equals_h" => Ok(Coupling::HPrimeEqualsH),
            "h_prime_sqrt_h" => Ok(Coupling::HPrimeSqrtH),
            "fixed_level" => grid_level
                .map(Coupling::FixedLevel)
                .ok_or_else(|| Error::config("fixed_level coupling needs noise.grid_level")),
            other => Err(Error::config(format!("unknown coupling '{other}'"))),
        }
    }
}

/// One convergence study.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    /// Problem data; `d_level` and `s_level` are set per level by the study.
    pub problem: SpdeProblem,
    pub levels: Vec<u32>,
    pub ref_level: u32,
    pub coupling: Coupling,
    pub samples: usize,
    pub master_seed: u64,
    pub embedding_mode: EmbeddingMode,
    pub max_padding: u32,
    pub track_running_max: bool,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        let max = *self
            .levels
            .iter()
            .max()
            .ok_or_else(|| Error::config("study needs at least one level"))?;
        if self.ref_level <= max + 1 {
            return Err(Error::config(format!(
                "reference level {} must exceed the finest level {max} by at least two",
                self.ref_level
            )));
        }
        if self.ref_level > MAX_LEVEL {
            return Err(Error::config(format!(
                "reference level {} too large",
                self.ref_level
            )));
        }
        if self.samples < 2 {
            return Err(Error::config("a study needs at least two samples"));
        }
        let ref_s = self.coupling.reference_s_level(self.ref_level);
        for &l in &self.levels {
            if self.coupling.s_level(l) > ref_s {
                return Err(Error::config(format!(
                    "noise level {} at mesh level {l} is finer than the reference noise level {ref_s}",
                    self.coupling.s_level(l)
                )));
            }
        }
        Ok(())
    }

    pub fn predicted(&self) -> RatePrediction {
        self.problem
            .kernel
            .predict_rates(self.problem.bc, self.problem.x0.rate_cap())
    }

    /// Flat `key=value` text accepted by [`parse_config`].
    pub fn to_config_string(&self) -> String {
        let p = &self.problem;
        let k = &p.kernel;
        let mut s = String::new();
        let mut kv = |key: &str, v: String| {
            let _ = writeln!(s, "{key}={v}");
        };
        kv("study.name", self.name.clone());
        kv("kernel.variant", k.variant.name().into());
        kv("kernel.sigma2", k.sigma2.to_string());
        kv("kernel.rho", k.rho.to_string());
        if let Some(nu) = k.nu() {
            kv("kernel.nu", nu.to_string());
        }
        kv("kernel.support_radius", k.support_radius.to_string());
        kv("noise.master_seed", self.master_seed.to_string());
        if let Coupling::FixedLevel(l) = self.coupling {
            kv("noise.grid_level", l.to_string());
        }
        kv("noise.embedding_mode", self.embedding_mode.name().into());
        kv("noise.max_padding", self.max_padding.to_string());
        kv("problem.bc", p.bc.name().into());
        if let EllipticCoefficients::Constant { a, c } = &p.coeffs {
            kv("problem.diffusion", a[0][0].to_string());
            kv("problem.reaction_c", c.to_string());
        }
        kv("problem.f", p.f.to_string());
        kv("problem.g", p.g.to_string());
        kv(
            "problem.b",
            format!("{},{}", p.advection[0], p.advection[1]),
        );
        kv("problem.x0", p.x0.to_string());
        kv("problem.T", p.t_end.to_string());
        kv("problem.dt", p.dt.to_string());
        kv("problem.d_level", p.d_level.to_string());
        kv(
            "study.levels",
            self.levels
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("study.ref_level", self.ref_level.to_string());
        kv("study.coupling", self.coupling.name().into());
        kv("study.samples", self.samples.to_string());
        kv(
            "study.track_running_max",
            self.track_running_max.to_string(),
        );
        if let Some(o) = &self.output {
            kv("study.output", o.display().to_string());
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
}

fn parse_levels(v: &str) -> Result<Vec<u32>> {
    let v = v.trim();
    if let Some((a, b)) = v.split_once('-') {
        let (a, b): (u32, u32) = (parse_num("study.levels", a)?, parse_num("study.levels", b)?);
        if a > b {
            return Err(Error::config(format!("empty level range '{v}'")));
        }
        return Ok((a..=b).collect());
    }
    v.split(',').map(|x| parse_num("study.levels", x)).collect()
}

/// Parses flat `key=value` configuration text (`#` starts a comment).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut kernel_variant = "matern".to_string();
    let (mut sigma2, mut rho, mut nu, mut support) = (10.0, 0.25, Some(0.5), 1.0);
    let mut seed = DEFAULT_SEED;
    let mut grid_level: Option<u32> = None;
    let mut mode = EmbeddingMode::default();
    let mut max_padding = DEFAULT_MAX_PADDING;
    let mut bc = BoundaryCondition::Neumann;
    let (mut diffusion, mut reaction) = (0.01, 0.01);
    let mut f = Nonlinearity::Constant(0.0);
    let mut g = Nonlinearity::Constant(1.0);
    let mut b = [0.0, 0.0];
    let mut x0 = InitialData::Constant(0.0);
    let (mut t_end, mut dt) = (1.0, 2e-3);
    let mut d_level = 3;
    let mut levels = vec![1, 2, 3, 4];
    let mut ref_level = 6;
    let mut coupling = "h_prime_equals_h".to_string();
    let mut samples = 16;
    let mut output = None;
    let mut name = "custom".to_string();
    let mut track = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "kernel.variant" => kernel_variant = value.to_string(),
            "kernel.sigma2" => sigma2 = parse_num(key, value)?,
            "kernel.rho" => rho = parse_num(key, value)?,
            "kernel.nu" => nu = Some(parse_num(key, value)?),
            "kernel.support_radius" => support = parse_num(key, value)?,
            "noise.master_seed" => seed = parse_num(key, value)?,
            "noise.grid_level" => grid_level = Some(parse_num(key, value)?),
            "noise.embedding_mode" => mode = EmbeddingMode::parse(value)?,
            "noise.max_padding" => max_padding = parse_num(key, value)?,
            "problem.bc" => bc = BoundaryCondition::parse(value)?,
            "problem.diffusion" => diffusion = parse_num(key, value)?,
            "problem.reaction_c" => reaction = parse_num(key, value)?,
            "problem.f" => f = Nonlinearity::parse(value)?,
            "problem.g" => g = Nonlinearity::parse(value)?,
            "problem.b" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|x| parse_num(key, x))
                    .collect::<Result<_>>()?;
                b = match parts.as_slice() {
                    [x, y] => [*x, *y],
                    [x] => [*x, *x],
                    _ => return Err(Error::config("problem.b needs one or two numbers")),
                };
            }
            "problem.x0" => x0 = InitialData::parse(value)?,
            "problem.T" => t_end = parse_num(key, value)?,
            "problem.dt" => dt = parse_num(key, value)?,
            "problem.d_level" => d_level = parse_num(key, value)?,
            "study.levels" => levels = parse_levels(value)?,
            "study.ref_level" => ref_level = parse_num(key, value)?,
            "study.coupling" => coupling = value.to_string(),
            "study.samples" => samples = parse_num(key, value)?,
            "study.output" => output = Some(PathBuf::from(value)),
            "study.name" => name = value.to_string(),
            "study.track_running_max" => track = parse_num(key, value)?,
            other => {
                return Err(Error::config(format!(
                    "line {}: unknown key '{other}'",
                    i + 1
                )))
            }
        }
    }
    let nu = if kernel_variant == "matern" { nu } else { None };
    let kernel = build_kernel(&kernel_variant, sigma2, rho, nu, support)?;
    let coupling = Coupling::parse(&coupling, grid_level)?;
    let problem = SpdeProblem {
        bc,
        coeffs: EllipticCoefficients::scaled_laplace(diffusion, reaction),
        f,
        g,
        advection: b,
        source: None,
        x0,
        kernel,
        t_end,
        dt,
        d_level,
        s_level: grid_level.unwrap_or(d_level + 1),
    };
    let cfg = ExperimentConfig {
        name,
        problem,
        levels,
        ref_level,
        coupling,
        samples,
        master_seed: seed,
        embedding_mode: mode,
        max_padding,
        track_running_max: track,
        output,
    };
    cfg.problem.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile '{other}'"))),
        }
    }

    /// `(dt, levels, ref_level, samples)`.
    fn scale(self) -> (f64, Vec<u32>, u32, usize) {
        match self {
            Profile::Desk => (2e-3, vec![1, 2, 3, 4], 6, 16),
            Profile::Paper => (1e-3, vec![0, 1, 2, 3, 4], 6, 80),
        }
    }
}

pub const PRESETS: [&str; 3] = [
    "matern_nu_scan",
    "exp_vs_factorizable",
    "rough_x0_coarse_noise",
];
pub const DEFAULT_SEED: u64 = 20_240_601;

/// Configurations of a named experiment at the given scale.
pub fn preset(name: &str, profile: Profile) -> Result<Vec<ExperimentConfig>> {
    let (dt, levels, ref_level, samples) = profile.scale();
    let base =
        |label: String, kernel: KernelSpec, bc, f, g, advection, x0, coupling| ExperimentConfig {
            name: label,
            problem: SpdeProblem {
                bc,
                coeffs: EllipticCoefficients::scaled_laplace(0.01, 0.01),
                f,
                g,
                advection,
                source: None,
                x0,
                kernel,
                t_end: 1.0,
                dt,
                d_level: ref_level,
                s_level: ref_level + 1,
            },
            levels: levels.clone(),
            ref_level,
            coupling,
            samples,
            master_seed: DEFAULT_SEED,
            embedding_mode: EmbeddingMode::Strict,
            max_padding: DEFAULT_MAX_PADDING,
            track_running_max: false,
            output: None,
        };
    match name {
        "matern_nu_scan" => [0.01, 0.5, 1.0]
            .iter()
            .map(|&nu| {
                Ok(base(
                    format!("matern_nu_scan_nu{nu}"),
                    KernelSpec::matern(nu, 10.0, 0.25)?,
                    BoundaryCondition::Neumann,
                    Nonlinearity::Saturating {
                        offset: 0.1,
                        scale: 1.0,
                    },
                    Nonlinearity::Saturating {
                        offset: 0.0,
                        scale: 1.0,
                    },
                    [0.0, 0.0],
                    InitialData::Constant(0.0),
                    Coupling::HPrimeEqualsH,
                ))
            })
            .collect(),
        "exp_vs_factorizable" => [
            ("exponential", KernelSpec::matern(0.5, 10.0, 0.25)?),
            (
                "factorizable",
                KernelSpec::new(KernelVariant::FactorizableExponential, 10.0, 0.25)?,
            ),
        ]
        .into_iter()
        .map(|(label, k)| {
            Ok(base(
                format!("exp_vs_factorizable_{label}"),
                k,
                BoundaryCondition::Dirichlet,
                Nonlinearity::Constant(0.1),
                Nonlinearity::Constant(1.0),
                [0.1, 0.1],
                InitialData::Constant(0.0),
                Coupling::HPrimeEqualsH,
            ))
        })
        .collect(),
        "rough_x0_coarse_noise" => [Coupling::HPrimeEqualsH, Coupling::HPrimeSqrtH]
            .into_iter()
            .map(|c| {
                Ok(base(
                    format!("rough_x0_coarse_noise_{}", c.name()),
                    KernelSpec::new(KernelVariant::PolyWendland2, 10.0, 0.25)?,
                    BoundaryCondition::Neumann,
                    Nonlinearity::Constant(0.1),
                    Nonlinearity::Constant(1.0),
                    [0.0, 0.0],
                    InitialData::RoughLog { amplitude: 3.0 },
                    c,
                ))
            })
            .collect(),
        other => Err(Error::config(format!(
            "unknown preset '{other}' (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::config("rate fit needs at least two points"));
    }
    if pairs
        .iter()
        .any(|&(h, e)| !(h > 0.0 && e > 0.0 && h.is_finite() && e.is_finite()))
    {
        return Err(Error::config("rate fit needs positive finite values"));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::config(
            "rate fit needs at least two distinct mesh sizes",
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub level: u32,
    pub h: f64,
    pub h_prime: f64,
    pub rms_error: f64,
    pub stderr: f64,
    /// Root mean square of `max_j ||X_l^j - X_ref^j||`, when tracked.
    pub running_max_rms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub name: String,
    pub rows: Vec<ErrorRow>,
    pub fitted_rate: f64,
    pub predicted: RatePrediction,
    pub seed: u64,
    pub samples: usize,
    pub embed_size: usize,
    pub clipped_fraction: f64,
    pub config_echo: String,
    pub wall_time: Duration,
}

/// The numeric content of an emitted report.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<ErrorRow>,
    pub fitted_rate: f64,
    pub predicted_r1_plus_1: f64,
    pub predicted_r2: f64,
    pub seed: u64,
}

impl ErrorReport {
    /// Header `level,h,h_prime,rms_error,stderr`, data rows, then four `# key=value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,h,h_prime,rms_error,stderr\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.level, r.h, r.h_prime, r.rms_error, r.stderr
            );
        }
        let _ = writeln!(s, "# fitted_rate={}", self.fitted_rate);
        let _ = writeln!(s, "# predicted_r1_plus_1={}", 1.0 + self.predicted.r1_sup);
        let _ = writeln!(s, "# predicted_r2={}", self.predicted.r2_sup);
        let _ = writeln!(s, "# seed={}", self.seed);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: fitted rate {:.3} (predicted min(1+r1, r2) = min({}, {})), M = {}, embed size {}, clipped fraction {:e}, {:.1?}\n",
            self.name,
            self.fitted_rate,
            1.0 + self.predicted.r1_sup,
            self.predicted.r2_sup,
            self.samples,
            self.embed_size,
            self.clipped_fraction,
            self.wall_time
        );
        for r in &self.rows {
            let _ = write!(
                s,
                "  level {} h {:.5} h' {:.5} rms {:.4e} +- {:.2e}",
                r.level, r.h, r.h_prime, r.rms_error, r.stderr
            );
            if let Some(m) = r.running_max_rms {
                let _ = write!(s, " running max {m:.4e}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn emit_csv(report: &ErrorReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Parses the text written by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<ParsedReport> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "level,h,h_prime,rms_error,stderr" => {}
        _ => return Err(Error::config("line 1: missing report header")),
    }
    let mut rows = Vec::new();
    let (mut fitted, mut r1, mut r2, mut seed) = (None, None, None, None);
    for (i, line) in lines {
        let line = line.trim();
        let bad = || Error::config(format!("line {}: malformed report line '{line}'", i + 1));
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            let (k, v) = c.trim().split_once('=').ok_or_else(bad)?;
            match k.trim() {
                "fitted_rate" => fitted = Some(v.parse::<f64>().map_err(|_| bad())?),
                "predicted_r1_plus_1" => r1 = Some(v.parse::<f64>().map_err(|_| bad())?),
                "predicted_r2" => r2 = Some(v.parse::<f64>().map_err(|_| bad())?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(ErrorRow {
            level: f[0].parse().map_err(|_| bad())?,
            h: f[1].parse().map_err(|_| bad())?,
            h_prime: f[2].parse().map_err(|_| bad())?,
            rms_error: f[3].parse().map_err(|_| bad())?,
            stderr: f[4].parse().map_err(|_| bad())?,
            running_max_rms: None,
        });
    }
    let missing = |k: &str| Error::config(format!("report lacks '# {k}=' line"));
    Ok(ParsedReport {
        rows,
        fitted_rate: fitted.ok_or_else(|| missing("fitted_rate"))?,
        predicted_r1_plus_1: r1.ok_or_else(|| missing("predicted_r1_plus_1"))?,
        predicted_r2: r2.ok_or_else(|| missing("predicted_r2"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
    })
}

/// One noise path on the finest grid with its restrictions to coarser grids.
pub struct CoupledNoise {
    stream: NoiseStream,
    fine_level: u32,
    coarse_levels: Vec<u32>,
    coarse: Vec<Vec<f64>>,
}

impl CoupledNoise {
    pub fn new(
        spectrum: Arc<CirculantSpectrum>,
        seed: u64,
        sample: u64,
        dt: f64,
        coarse_levels: &[u32],
    ) -> Result<Self> {
        let fine_level = spectrum.grid_level();
        if let Some(&l) = coarse_levels.iter().find(|&&l| l > fine_level) {
            return Err(Error::config(format!(
                "coarse noise level {l} above fine level {fine_level}"
            )));
        }
        Ok(CoupledNoise {
            stream: NoiseStream::new(spectrum, seed, sample, dt)?,
            fine_level,
            coarse_levels: coarse_levels.to_vec(),
            coarse: vec![Vec::new(); coarse_levels.len()],
        })
    }

    /// Loads increment `step`; returns the fine values.
    pub fn advance(&mut self, step: u64) -> Result<&[f64]> {
        let fine = self.stream.increment_at(step);
        for (buf, &l) in self.coarse.iter_mut().zip(&self.coarse_levels) {
            subsample_into(fine, self.fine_level, l, buf)?;
        }
        Ok(fine)
    }

    pub fn fine(&mut self, step: u64) -> &[f64] {
        self.stream.increment_at(step)
    }

    /// Values of the last loaded increment on the `i`-th coarse grid.
    pub fn coarse(&self, i: usize) -> &[f64] {
        &self.coarse[i]
    }
}

struct LevelRun {
    level: u32,
    disc: Discretization,
}

fn sample_errors(
    config: &ExperimentConfig,
    family: &MeshFamily,
    spectrum: &Arc<CirculantSpectrum>,
    reference: &Discretization,
    runs: &[LevelRun],
    sample: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = &config.problem;
    let n = p.n_steps()?;
    let wrap = |level: u32| {
        move |e: Error| Error::Sample {
            sample,
            level,
            source: Box::new(e),
        }
    };
    let s_levels: Vec<u32> = runs.iter().map(|r| r.disc.s_level()).collect();
    let mut noise = CoupledNoise::new(
        spectrum.clone(),
        config.master_seed,
        sample as u64,
        p.dt,
        &s_levels,
    )
    .map_err(wrap(config.ref_level))?;
    let mut ref_stepper = Stepper::new(p, reference).map_err(wrap(config.ref_level))?;
    let mut ref_state = ref_stepper.init().map_err(wrap(config.ref_level))?;
    let mut steppers = Vec::with_capacity(runs.len());
    let mut states: Vec<StepperState> = Vec::with_capacity(runs.len());
    for r in runs {
        let st = Stepper::new(p, &r.disc).map_err(wrap(r.level))?;
        states.push(st.init().map_err(wrap(r.level))?);
        steppers.push(st);
    }
    let mut running_max = vec![0.0f64; runs.len()];
    let errors_now = |ref_state: &StepperState, states: &[StepperState]| -> Result<Vec<f64>> {
        let ref_space = reference.space();
        let ref_nodal = ref_space.nodal(&ref_state.x);
        runs.iter()
            .zip(states)
            .map(|(r, s)| {
                let fine = prolong_nodal(
                    family,
                    r.level,
                    config.ref_level,
                    &r.disc.space().nodal(&s.x),
                )?;
                let diff: Vec<f64> = ref_space
                    .dofs()
                    .free_nodes()
                    .iter()
                    .map(|&node| fine[node] - ref_nodal[node])
                    .collect();
                Ok(l2_norm(&diff, ref_space.mass()))
            })
            .collect()
    };
    for j in 1..=n {
        let step = (j - 1) as u64;
        let fine = noise
            .advance(step)
            .map_err(wrap(config.ref_level))?
            .to_vec();
        ref_stepper
            .step(&mut ref_state, &fine)
            .map_err(wrap(config.ref_level))?;
        for (i, (st, state)) in steppers.iter_mut().zip(states.iter_mut()).enumerate() {
            st.step(state, noise.coarse(i))
                .map_err(wrap(runs[i].level))?;
        }
        if config.track_running_max {
            let e = errors_now(&ref_state, &states).map_err(wrap(config.ref_level))?;
            for (m, v) in running_max.iter_mut().zip(e) {
                *m = m.max(v);
            }
        }
    }
    let final_errors = errors_now(&ref_state, &states).map_err(wrap(config.ref_level))?;
    Ok((final_errors, running_max))
}

fn rms_and_stderr(errors: &[f64]) -> (f64, f64) {
    let m = errors.len() as f64;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mean = sq.iter().sum::<f64>() / m;
    let var = sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let rms = mean.sqrt();
    let stderr = if rms > 0.0 {
        (var / m).sqrt() / (2.0 * rms)
    } else {
        0.0
    };
    (rms, stderr)
}

/// Runs the study; samples are distributed over the rayon pool.
pub fn run_convergence_study(config: &ExperimentConfig) -> Result<ErrorReport> {
    run_convergence_study_with(config, true)
}

/// As [`run_convergence_study`], optionally forcing serial execution; the result does not depend on it.
pub fn run_convergence_study_with(
    config: &ExperimentConfig,
    parallel: bool,
) -> Result<ErrorReport> {
    config.validate()?;
    let start = Instant::now();
    let p = &config.problem;
    let family = MeshFamily::dodecagon(config.ref_level)?;
    let ref_s = config.coupling.reference_s_level(config.ref_level);
    let spectrum = Arc::new(build_spectrum(
        &p.kernel,
        ref_s,
        config.max_padding,
        config.embedding_mode,
    )?);
    let reference = Discretization::new(p, family.level(config.ref_level)?.clone(), ref_s)?;
    let mut levels = config.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let runs: Vec<LevelRun> = levels
        .iter()
        .map(|&l| {
            Ok(LevelRun {
                level: l,
                disc: Discretization::new(p, family.level(l)?.clone(), config.coupling.s_level(l))?,
            })
        })
        .collect::<Result<_>>()?;
    let per_sample = |m: usize| sample_errors(config, &family, &spectrum, &reference, &runs, m);
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = if parallel {
        (0..config.samples)
            .into_par_iter()
            .map(per_sample)
            .collect()
    } else {
        (0..config.samples).map(per_sample).collect()
    };
    let results: Vec<(Vec<f64>, Vec<f64>)> = results.into_iter().collect::<Result<_>>()?;
    let rows: Vec<ErrorRow> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let errs: Vec<f64> = results.iter().map(|s| s.0[i]).collect();
            let (rms_error, stderr) = rms_and_stderr(&errs);
            let running_max_rms = config.track_running_max.then(|| {
                let maxes: Vec<f64> = results.iter().map(|s| s.1[i]).collect();
                rms_and_stderr(&maxes).0
            });
            ErrorRow {
                level: r.level,
                h: dodecagon_h(r.level),
                h_prime: square_h(r.disc.s_level()),
                rms_error,
                stderr,
                running_max_rms,
            }
        })
        .collect();
    let fitted_rate = if rows.len() >= 2 {
        fit_rate(&rows.iter().map(|r| (r.h, r.rms_error)).collect::<Vec<_>>()).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(ErrorReport {
        name: config.name.clone(),
        rows,
        fitted_rate,
        predicted: config.predicted(),
        seed: config.master_seed,
        samples: config.samples,
        embed_size: spectrum.embed_size(),
        clipped_fraction: spectrum.clipped_fraction(),
        config_echo: config.to_config_string(),
        wall_time: start.elapsed(),
    })
}
