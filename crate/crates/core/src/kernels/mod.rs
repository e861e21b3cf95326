//! Covariance kernel catalog, regularity metadata and the rate predictions derived from it.

mod special;

use std::fmt;

pub use special::{bessel_k, gamma};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Spatial dimension of every computation in this crate.
pub const DIM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelVariant {
    /// Matérn kernel with smoothness `nu` (0 < nu <= 5).
    Matern { nu: f64 },
    /// Squared exponential `sigma2 exp(-(r/rho)^2)`.
    Gaussian,
    /// Compactly supported `sigma2 (1 - r/c)^2`.
    PolyWendland1,
    /// Compactly supported `sigma2 (1 - r/c)^4 (4 r/c + 1)`.
    PolyWendland2,
    /// Product of one-dimensional exponential kernels, `sigma2 exp(-(|dx| + |dy|)/rho)`.
    FactorizableExponential,
    /// `q == sigma2`; a degenerate rank-one kernel, mostly useful for checks.
    Constant,
}

impl KernelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            KernelVariant::Matern { .. } => "matern",
            KernelVariant::Gaussian => "gaussian",
            KernelVariant::PolyWendland1 => "poly_wendland1",
            KernelVariant::PolyWendland2 => "poly_wendland2",
            KernelVariant::FactorizableExponential => "factorizable_exponential",
            KernelVariant::Constant => "constant",
        }
    }
}

/// A stationary covariance kernel with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub sigma2: f64,
    pub rho: f64,
    pub support_radius: f64,
}

impl KernelSpec {
    pub fn new(variant: KernelVariant, sigma2: f64, rho: f64) -> Result<Self> {
        let k = KernelSpec {
            variant,
            sigma2,
            rho,
            support_radius: 1.0,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn matern(nu: f64, sigma2: f64, rho: f64) -> Result<Self> {
        Self::new(KernelVariant::Matern { nu }, sigma2, rho)
    }

    pub fn with_support_radius(mut self, radius: f64) -> Result<Self> {
        self.support_radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "kernel parameter {name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("sigma2", self.sigma2)?;
        positive("rho", self.rho)?;
        positive("support_radius", self.support_radius)?;
        if let KernelVariant::Matern { nu } = self.variant {
            positive("nu", nu)?;
            if nu > 5.0 {
                return Err(Error::config(format!(
                    "Matérn smoothness nu = {nu} exceeds 5"
                )));
            }
        }
        Ok(())
    }

    pub fn nu(&self) -> Option<f64> {
        match self.variant {
            KernelVariant::Matern { nu } => Some(nu),
            _ => None,
        }
    }

    /// Kernel value for a lag vector `(dx, dy)`.
    pub fn eval_lag(&self, dx: f64, dy: f64) -> f64 {
        let s2 = self.sigma2;
        match self.variant {
            KernelVariant::FactorizableExponential => {
                s2 * (-(dx.abs() + dy.abs()) / self.rho).exp()
            }
            KernelVariant::Constant => s2,
            _ => self.eval_radial(dx.hypot(dy)),
        }
    }

    /// Kernel value as a function of `|x - y|` for the isotropic variants.
    pub fn eval_radial(&self, r: f64) -> f64 {
        let s2 = self.sigma2;
        if r == 0.0 {
            return s2;
        }
        match self.variant {
            KernelVariant::Matern { nu } => {
                let s = (2.0 * nu).sqrt() * r / self.rho;
                if s > 700.0 {
                    return 0.0;
                }
                let k = bessel_k(nu, s).expect("validated Matérn parameters");
                s2 * 2f64.powf(1.0 - nu) / gamma(nu) * s.powf(nu) * k
            }
            KernelVariant::Gaussian => {
                let t = r / self.rho;
                s2 * (-t * t).exp()
            }
            KernelVariant::PolyWendland1 => {
                let t = r / self.support_radius;
                if t >= 1.0 {
                    0.0
                } else {
                    s2 * (1.0 - t).powi(2)
                }
            }
            KernelVariant::PolyWendland2 => {
                let t = r / self.support_radius;
                if t >= 1.0 {
                    0.0
                } else {
                    s2 * (1.0 - t).powi(4) * (4.0 * t + 1.0)
                }
            }
            KernelVariant::FactorizableExponential => s2 * (-r / self.rho).exp(),
            KernelVariant::Constant => s2,
        }
    }

    pub fn eval(&self, x: Point2, y: Point2) -> f64 {
        self.eval_lag(x.x - y.x, x.y - y.y)
    }

    /// `sup |q|`, attained at zero lag for every variant.
    pub fn sup_abs(&self) -> f64 {
        self.sigma2
    }

    /// Regularity metadata for `d = 2`.
    pub fn metadata(&self) -> KernelMetadata {
        match self.variant {
            KernelVariant::Matern { nu } => {
                let (gamma, attained) = if nu < 1.0 {
                    (nu, true)
                } else if nu == 1.0 {
                    (1.0, false)
                } else {
                    (1.0, true)
                };
                KernelMetadata {
                    gamma,
                    gamma_attained: attained,
                    mu: nu + DIM / 2.0,
                    mu_sup: nu + DIM / 2.0,
                    psi: 2.0,
                    notes: "RKHS equals H^(nu + d/2)".into(),
                }
            }
            KernelVariant::Gaussian => KernelMetadata {
                gamma: 1.0,
                gamma_attained: true,
                mu: 10.0,
                mu_sup: 10.0,
                psi: 2.0,
                notes: "Hölder exponent 2 capped to 1; any mu > d/2 admissible".into(),
            },
            KernelVariant::PolyWendland1 => KernelMetadata {
                gamma: 0.5,
                gamma_attained: true,
                mu: 0.5 + DIM / 2.0,
                mu_sup: 0.5 + DIM / 2.0,
                psi: 2.0,
                notes: "p(x) = (1 - x)^2".into(),
            },
            KernelVariant::PolyWendland2 => KernelMetadata {
                gamma: 1.0,
                gamma_attained: true,
                mu: 1.5 + DIM / 2.0,
                mu_sup: 1.5 + DIM / 2.0,
                psi: 2.0,
                notes: "p(x) = (1 - x)^4 (4x + 1)".into(),
            },
            KernelVariant::FactorizableExponential => KernelMetadata {
                gamma: 0.5,
                gamma_attained: true,
                mu: 0.9,
                mu_sup: 1.0,
                psi: 2.5,
                notes: "embeds in W^(mu, psi) for every mu < 1 with some psi > 2, mu psi > 2"
                    .into(),
            },
            KernelVariant::Constant => KernelMetadata {
                gamma: 1.0,
                gamma_attained: true,
                mu: 10.0,
                mu_sup: 10.0,
                psi: 2.0,
                notes: "RKHS is the constants".into(),
            },
        }
    }

    /// Convergence rate suprema for this kernel, boundary condition and initial-data cap.
    pub fn predict_rates(&self, bc: BoundaryCondition, x0_cap: f64) -> RatePrediction {
        let meta = self.metadata();
        let theta = bc.theta();
        let r1_sup = meta.gamma.min(theta).min(x0_cap).min(1.0);
        let mu_d = meta.mu_sup - (DIM / 2.0 - 1.0).max(DIM / meta.psi - 1.0).max(0.0);
        let r2_sup = mu_d.min(2.0);
        RatePrediction {
            r1_sup,
            r2_sup,
            theta,
            mu_d,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(sigma2={}, rho={}",
            self.variant.name(),
            self.sigma2,
            self.rho
        )?;
        if let Some(nu) = self.nu() {
            write!(f, ", nu={nu}")?;
        }
        if matches!(
            self.variant,
            KernelVariant::PolyWendland1 | KernelVariant::PolyWendland2
        ) {
            write!(f, ", support_radius={}", self.support_radius)?;
        }
        write!(f, ")")
    }
}

/// Hölder exponent `gamma` and Sobolev embedding parameters `(mu, psi)` of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMetadata {
    pub gamma: f64,
    /// `false` when `gamma` is only a supremum (Matérn with nu = 1).
    pub gamma_attained: bool,
    /// An admissible embedding order with `mu * psi > d`.
    pub mu: f64,
    /// Supremum of admissible embedding orders (differs from `mu` for families of pairs).
    pub mu_sup: f64,
    pub psi: f64,
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

impl BoundaryCondition {
    pub fn theta(self) -> f64 {
        match self {
            BoundaryCondition::Dirichlet => 0.5,
            BoundaryCondition::Neumann => 1.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundaryCondition::Dirichlet => "dirichlet",
            BoundaryCondition::Neumann => "neumann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dirichlet" => Ok(BoundaryCondition::Dirichlet),
            "neumann" => Ok(BoundaryCondition::Neumann),
            other => Err(Error::config(format!(
                "unknown boundary condition '{other}'"
            ))),
        }
    }
}

/// Suprema of the admissible rates in `h^(1 + r1) + dt^(1/2) + (h')^r2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePrediction {
    pub r1_sup: f64,
    pub r2_sup: f64,
    pub theta: f64,
    pub mu_d: f64,
}

impl RatePrediction {
    /// The noise interpolation error dominates when `r2 < 1 + r1`; ties do not dominate.
    pub fn noise_dominant(&self) -> bool {
        self.r2_sup < 1.0 + self.r1_sup
    }

    /// Expected observed order in `h` when `h' = h^exponent`.
    pub fn observed_order(&self, h_prime_exponent: f64) -> f64 {
        (1.0 + self.r1_sup).min(self.r2_sup * h_prime_exponent)
    }
}

/// Parses `variant[:key=value,...]`, e.g. `matern:nu=0.5,sigma2=10,rho=0.25`.
pub fn parse_kernel(spec: &str) -> Result<KernelSpec> {
    let (name, params) = spec.split_once(':').unwrap_or((spec, ""));
    let mut sigma2 = 1.0;
    let mut rho = 1.0;
    let mut nu = None;
    let mut support = 1.0;
    for kv in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::config(format!("expected key=value in kernel spec, got '{kv}'"))
        })?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad number '{v}' for kernel parameter {k}")))?;
        match k.trim() {
            "sigma2" => sigma2 = v,
            "rho" => rho = v,
            "nu" => nu = Some(v),
            "support_radius" => support = v,
            other => return Err(Error::config(format!("unknown kernel parameter '{other}'"))),
        }
    }
    build_kernel(name, sigma2, rho, nu, support)
}

pub(crate) fn build_kernel(
    name: &str,
    sigma2: f64,
    rho: f64,
    nu: Option<f64>,
    support_radius: f64,
) -> Result<KernelSpec> {
    let variant = match name.trim().to_ascii_lowercase().as_str() {
        "matern" => KernelVariant::Matern {
            nu: nu.ok_or_else(|| Error::config("Matérn kernel requires nu"))?,
        },
        "exponential" => KernelVariant::Matern { nu: 0.5 },
        "gaussian" => KernelVariant::Gaussian,
        "poly_wendland1" | "polywendland1" => KernelVariant::PolyWendland1,
        "poly_wendland2" | "polywendland2" => KernelVariant::PolyWendland2,
        "factorizable_exponential" | "factorizableexponential" => {
            KernelVariant::FactorizableExponential
        }
        "constant" => KernelVariant::Constant,
        other => return Err(Error::config(format!("unknown kernel variant '{other}'"))),
    };
    KernelSpec::new(variant, sigma2, rho)?.with_support_radius(support_radius)
}
