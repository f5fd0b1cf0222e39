//! Refitting block penalties `φ(z, ẑ)`, their convex conjugates in the
//! first argument and the closed-form proximal maps of `σφ*` used by the
//! refitting dual update.
//!
//! Every penalty depends on `z` only through `α = ⟨z, ê⟩` and the part of
//! `z` orthogonal to `ê = ẑ/‖ẑ‖`:
//!
//! | tag | `φ(z, ẑ)`                                   | `prox_{σφ*}(z₀)`                        |
//! |-----|---------------------------------------------|-----------------------------------------|
//! | LS  | `0`                                         | `0`                                     |
//! | HO  | `ι{|cos| = 1}`                              | `z₀ − P(z₀)`                            |
//! | HD  | `ι{cos = 1}`                                | `z₀ − P(z₀)` if `⟨z₀,ẑ⟩ ≥ 0`, else `z₀` |
//! | QO  | `λ/(2‖ẑ‖) ‖z − P(z)‖²`                      | `c (z₀ − P(z₀))`                        |
//! | QD  | QO if `cos ≥ 0`, else `λ/(2‖ẑ‖) ‖z‖²`       | `c (z₀ − max(α₀, 0) ê)`                 |
//! | SD  | `λ ‖z‖ (1 − cos)`                           | projection on `B(−λê, λ)`               |
//!
//! with `c = λ / (λ + σ‖ẑ‖)`. The indicator penalties count `z = 0` as
//! feasible.

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use crate::blocks::{dot, norm, BlockVector, SupportSet};
use crate::error::{Error, Result};

/// Reference blocks with a norm at or below this are rejected.
pub const ZERO_REFERENCE: f64 = 1e-12;

/// Relative tolerance for "same orientation" tests and conjugate-domain
/// membership.
pub const ALIGN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyTag {
    Ls,
    Ho,
    Hd,
    Qo,
    Qd,
    Sd,
}

impl PenaltyTag {
    pub const ALL: [PenaltyTag; 6] = [
        PenaltyTag::Ls,
        PenaltyTag::Ho,
        PenaltyTag::Hd,
        PenaltyTag::Qo,
        PenaltyTag::Qd,
        PenaltyTag::Sd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyTag::Ls => "ls",
            PenaltyTag::Ho => "ho",
            PenaltyTag::Hd => "hd",
            PenaltyTag::Qo => "qo",
            PenaltyTag::Qd => "qd",
            PenaltyTag::Sd => "sd",
        }
    }

    /// Penalties that never take the value `+∞`.
    pub fn is_finite_valued(self) -> bool {
        matches!(self, PenaltyTag::Ls | PenaltyTag::Qo | PenaltyTag::Qd | PenaltyTag::Sd)
    }
}

impl fmt::Display for PenaltyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PenaltyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(PenaltyTag::Ls),
            "ho" => Ok(PenaltyTag::Ho),
            "hd" => Ok(PenaltyTag::Hd),
            "qo" => Ok(PenaltyTag::Qo),
            "qd" => Ok(PenaltyTag::Qd),
            "sd" => Ok(PenaltyTag::Sd),
            other => Err(Error::InvalidParameter(format!(
                "unknown penalty '{other}' (expected one of ls|ho|hd|qo|qd|sd)"
            ))),
        }
    }
}

/// A block penalty with its weight `λ` (ignored by LS, HO and HD).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPenalty {
    tag: PenaltyTag,
    lambda: f64,
}

impl BlockPenalty {
    pub fn new(tag: PenaltyTag, lambda: f64) -> Result<Self> {
        if tag != PenaltyTag::Ls && !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty weight must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { tag, lambda })
    }

    /// Soft stand-in for the hard direction constraint: an SD penalty with a
    /// large weight `gamma`, acting on the detected support only.
    pub fn relaxed_hd(gamma: f64) -> Result<Self> {
        Self::new(PenaltyTag::Sd, gamma)
    }

    pub fn tag(&self) -> PenaltyTag {
        self.tag
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `φ(z, ẑ)`, possibly `+∞`.
    pub fn value(&self, z: &[f64], zhat: &[f64]) -> Result<f64> {
        let g = Geometry::new(z, zhat, usize::MAX)?;
        let nz = norm(z);
        let lambda = self.lambda;
        Ok(match self.tag {
            PenaltyTag::Ls => 0.0,
            PenaltyTag::Ho => {
                if nz == 0.0 || g.perp_norm(z) <= ALIGN_TOL * nz {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PenaltyTag::Hd => {
                if nz == 0.0 || (g.alpha(z) > 0.0 && g.perp_norm(z) <= ALIGN_TOL * nz) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PenaltyTag::Qo => {
                let p = g.perp_norm(z);
                0.5 * lambda * p * p / g.norm
            }
            PenaltyTag::Qd => {
                if g.alpha(z) >= 0.0 {
                    let p = g.perp_norm(z);
                    0.5 * lambda * p * p / g.norm
                } else {
                    0.5 * lambda * nz * nz / g.norm
                }
            }
            PenaltyTag::Sd => {
                if nz == 0.0 {
                    0.0
                } else {
                    let cos = (dot(z, zhat) / (nz * g.norm)).clamp(-1.0, 1.0);
                    lambda * nz * (1.0 - cos)
                }
            }
        })
    }

    /// Convex conjugate `φ*(z, ẑ) = sup_u ⟨z, u⟩ − φ(u, ẑ)`, possibly `+∞`.
    pub fn conjugate_value(&self, z: &[f64], zhat: &[f64]) -> Result<f64> {
        let g = Geometry::new(z, zhat, usize::MAX)?;
        let nz = norm(z);
        let tol = ALIGN_TOL * nz.max(1.0);
        let alpha = g.alpha(z);
        let lambda = self.lambda;
        let quadratic = 0.5 * g.norm * nz * nz / lambda;
        Ok(match self.tag {
            PenaltyTag::Ls => {
                if nz <= tol {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PenaltyTag::Ho => finite_if(alpha.abs() <= tol, 0.0),
            PenaltyTag::Hd => finite_if(alpha <= tol, 0.0),
            PenaltyTag::Qo => finite_if(alpha.abs() <= tol, quadratic),
            PenaltyTag::Qd => finite_if(alpha <= tol, quadratic),
            PenaltyTag::Sd => {
                let shifted: f64 = z
                    .iter()
                    .zip(zhat)
                    .map(|(zi, hi)| {
                        let v = zi + lambda * hi / g.norm;
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                finite_if(shifted <= lambda + ALIGN_TOL * lambda.max(1.0), 0.0)
            }
        })
    }

    /// `argmin_z ½‖z − z₀‖² + σ φ*(z, ẑ)` in closed form.
    pub fn prox_conjugate(&self, ctx: &ProxContext<'_>, z0: &[f64]) -> Result<Vec<f64>> {
        if z0.len() != ctx.zhat.len() {
            return Err(Error::dims(ctx.zhat.len(), z0.len()));
        }
        let mut out = z0.to_vec();
        self.prox_conjugate_in_place(ctx.sigma, ctx.zhat, ctx.zhat_norm, &mut out);
        Ok(out)
    }

    /// In-place version of [`prox_conjugate`](Self::prox_conjugate); the
    /// caller guarantees `zhat_norm = ‖zhat‖ > 0` and matching lengths.
    pub(crate) fn prox_conjugate_in_place(
        &self,
        sigma: f64,
        zhat: &[f64],
        zhat_norm: f64,
        block: &mut [f64],
    ) {
        let lambda = self.lambda;
        let alpha = dot(block, zhat) / zhat_norm;
        // block ← scale · (block − keep_alpha · ê)
        let mut remove_axis = |keep_alpha: f64, scale: f64| {
            for (v, h) in block.iter_mut().zip(zhat) {
                *v = scale * (*v - keep_alpha * h / zhat_norm);
            }
        };
        match self.tag {
            PenaltyTag::Ls => block.iter_mut().for_each(|v| *v = 0.0),
            PenaltyTag::Ho => remove_axis(alpha, 1.0),
            PenaltyTag::Hd => {
                if alpha >= 0.0 {
                    remove_axis(alpha, 1.0)
                }
            }
            PenaltyTag::Qo => remove_axis(alpha, lambda / (lambda + sigma * zhat_norm)),
            PenaltyTag::Qd => {
                remove_axis(alpha.max(0.0), lambda / (lambda + sigma * zhat_norm))
            }
            PenaltyTag::Sd => {
                let shifted_norm = block
                    .iter()
                    .zip(zhat)
                    .map(|(v, h)| {
                        let s = v + lambda * h / zhat_norm;
                        s * s
                    })
                    .sum::<f64>()
                    .sqrt();
                let scale = lambda / lambda.max(shifted_norm);
                for (v, h) in block.iter_mut().zip(zhat) {
                    let e = h / zhat_norm;
                    *v = scale * (*v + lambda * e) - lambda * e;
                }
            }
        }
    }
}

impl fmt::Display for BlockPenalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(lambda={})", self.tag, self.lambda)
    }
}

fn finite_if(cond: bool, value: f64) -> f64 {
    if cond {
        value
    } else {
        f64::INFINITY
    }
}

/// Dual step and reference block for one conjugate prox evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ProxContext<'a> {
    sigma: f64,
    zhat: &'a [f64],
    zhat_norm: f64,
}

impl<'a> ProxContext<'a> {
    pub fn new(sigma: f64, zhat: &'a [f64]) -> Result<Self> {
        Self::for_block(sigma, zhat, usize::MAX)
    }

    fn for_block(sigma: f64, zhat: &'a [f64], block: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dual step must be positive, got {sigma}"
            )));
        }
        let zhat_norm = norm(zhat);
        if !(zhat_norm > ZERO_REFERENCE) {
            return Err(Error::ZeroReference { block });
        }
        Ok(Self {
            sigma,
            zhat,
            zhat_norm,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn zhat(&self) -> &[f64] {
        self.zhat
    }
}

/// Reference direction helper shared by `value` and `conjugate_value`.
struct Geometry<'a> {
    zhat: &'a [f64],
    norm: f64,
}

impl<'a> Geometry<'a> {
    fn new(z: &[f64], zhat: &'a [f64], block: usize) -> Result<Self> {
        if z.len() != zhat.len() {
            return Err(Error::dims(zhat.len(), z.len()));
        }
        let n = norm(zhat);
        if !(n > ZERO_REFERENCE) {
            return Err(Error::ZeroReference { block });
        }
        Ok(Self { zhat, norm: n })
    }

    fn alpha(&self, z: &[f64]) -> f64 {
        dot(z, self.zhat) / self.norm
    }

    /// `‖z − P_ẑ(z)‖`, computed componentwise to avoid cancellation.
    fn perp_norm(&self, z: &[f64]) -> f64 {
        let a = self.alpha(z) / self.norm;
        z.iter()
            .zip(self.zhat)
            .map(|(zi, hi)| {
                let r = zi - a * hi;
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Blockwise prox of `σ ω_φ*`: the penalty prox on `supp`, identity off it.
pub fn prox_omega_conjugate(
    penalty: &BlockPenalty,
    sigma: f64,
    z0: &BlockVector,
    zhat: &BlockVector,
    supp: &SupportSet,
) -> Result<BlockVector> {
    let mut out = z0.clone();
    prox_omega_conjugate_in_place(penalty, sigma, &mut out, zhat, supp)?;
    Ok(out)
}

pub(crate) fn prox_omega_conjugate_in_place(
    penalty: &BlockPenalty,
    sigma: f64,
    z: &mut BlockVector,
    zhat: &BlockVector,
    supp: &SupportSet,
) -> Result<()> {
    z.check_shape(zhat)?;
    if supp.universe() != z.m() {
        return Err(Error::dims(
            format!("support over {} blocks", z.m()),
            format!("support over {} blocks", supp.universe()),
        ));
    }
    for i in supp.indices() {
        let reference = zhat.block(i);
        let ctx = ProxContext::for_block(sigma, reference, i)?;
        penalty.prox_conjugate_in_place(sigma, reference, ctx.zhat_norm, z.block_mut(i));
    }
    Ok(())
}
