//! Magnetic constitutive laws `h = H(b)` and per-region conductivities.

use crate::error::{Error, Result};
use crate::mesh::RegionTag;
use crate::tensor::{Tensor2, Vec2};

/// Vacuum permeability [H/m].
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
/// Vacuum reluctivity [m/H].
pub const NU0: f64 = 1.0 / MU0;

/// Isotropic reluctivity law `h = ν(|b|²) b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaterialLaw {
    Linear { nu: f64 },
    /// `ν(|b|²) = α + β exp(γ |b|²)`.
    Brauer { alpha: f64, beta: f64, gamma: f64 },
}

impl MaterialLaw {
    pub fn linear(nu: f64) -> Result<Self> {
        if nu > 0.0 && nu.is_finite() {
            Ok(MaterialLaw::Linear { nu })
        } else {
            Err(Error::Config(format!("linear reluctivity must be positive, got {nu}")))
        }
    }

    pub fn brauer(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if alpha > 0.0 && beta >= 0.0 && gamma >= 0.0 && (alpha + beta + gamma).is_finite() {
            Ok(MaterialLaw::Brauer { alpha, beta, gamma })
        } else {
            Err(Error::Config(format!(
                "Brauer parameters need alpha > 0, beta >= 0, gamma >= 0; got ({alpha}, {beta}, {gamma})"
            )))
        }
    }

    /// Iron grains of the benchmark.
    pub fn smc_grain() -> Self {
        MaterialLaw::Brauer { alpha: 388.0, beta: 0.3774, gamma: 2.97 }
    }

    pub fn vacuum() -> Self {
        MaterialLaw::Linear { nu: NU0 }
    }

    /// Reluctivity at `|b|² = b2`.
    pub fn nu(&self, b2: f64) -> f64 {
        match *self {
            MaterialLaw::Linear { nu } => nu,
            MaterialLaw::Brauer { alpha, beta, gamma } => alpha + beta * (gamma * b2).exp(),
        }
    }

    /// Reluctivity at zero field.
    pub fn initial_nu(&self) -> f64 {
        self.nu(0.0)
    }

    pub fn h_of_b(&self, b: Vec2) -> Result<Vec2> {
        check(b)?;
        let nu = self.nu(b[0] * b[0] + b[1] * b[1]);
        finite([nu * b[0], nu * b[1]])
    }

    /// Exact tangent `ν I + 2 ν'(|b|²) b ⊗ b`.
    pub fn dh_db(&self, b: Vec2) -> Result<Tensor2> {
        check(b)?;
        let b2 = b[0] * b[0] + b[1] * b[1];
        let nu = self.nu(b2);
        let c = match *self {
            MaterialLaw::Linear { .. } => 0.0,
            MaterialLaw::Brauer { beta, gamma, .. } => 2.0 * beta * gamma * (gamma * b2).exp(),
        };
        let t = [[nu + c * b[0] * b[0], c * b[0] * b[1]], [c * b[1] * b[0], nu + c * b[1] * b[1]]];
        if t.iter().flatten().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(Error::NumericDomain("material tangent"))
        }
    }

    /// `∫₀^|b| ν(s²) s ds`.
    pub fn coenergy_density(&self, b: Vec2) -> Result<f64> {
        check(b)?;
        let b2 = b[0] * b[0] + b[1] * b[1];
        let w = match *self {
            MaterialLaw::Linear { nu } => 0.5 * nu * b2,
            MaterialLaw::Brauer { alpha, beta, gamma } if gamma == 0.0 => 0.5 * (alpha + beta) * b2,
            MaterialLaw::Brauer { alpha, beta, gamma } => {
                0.5 * alpha * b2 + beta / (2.0 * gamma) * (gamma * b2).exp_m1()
            }
        };
        if w.is_finite() {
            Ok(w)
        } else {
            Err(Error::NumericDomain("coenergy"))
        }
    }
}

fn check(b: Vec2) -> Result<()> {
    if b[0].is_finite() && b[1].is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain("flux density"))
    }
}

fn finite(h: Vec2) -> Result<Vec2> {
    if h[0].is_finite() && h[1].is_finite() {
        Ok(h)
    } else {
        Err(Error::NumericDomain("field strength"))
    }
}

/// Piecewise constant conductivity, one value per region tag [S/m].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConductivityField {
    values: [f64; 5],
}

impl ConductivityField {
    pub fn zero() -> Self {
        ConductivityField { values: [0.0; 5] }
    }

    /// Grains at `sigma_grain`, every other region non-conducting.
    pub fn smc(sigma_grain: f64) -> Result<Self> {
        ConductivityField::zero().with(RegionTag::ConductingGrain, sigma_grain)
    }

    /// General per-region values; used by two-phase conductor tests where the
    /// "insulation" phase conducts as well.
    pub fn with(mut self, tag: RegionTag, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("conductivity must be non-negative, got {sigma}")));
        }
        self.values[tag.index()] = sigma;
        Ok(self)
    }

    pub fn sigma(&self, tag: RegionTag) -> f64 {
        self.values[tag.index()]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Replaces zero entries by `floor`, as needed for the conductivity cell
    /// problem where insulation would otherwise make the system singular.
    pub fn regularized(&self, floor: f64) -> Self {
        ConductivityField { values: self.values.map(|s| if s > 0.0 { s } else { floor }) }
    }
}
