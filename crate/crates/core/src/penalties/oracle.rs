//! Numerical reference for the conjugate proximal maps.
//!
//! Nothing here calls the closed-form proxes. Two independent routes are
//! available:
//!
//! * [`OracleRoute::Conjugate`] minimizes `½‖z − z₀‖² + σφ*(z, ẑ)` directly,
//!   using only the conjugate *values*.
//! * [`OracleRoute::Moreau`] minimizes the primal problem
//!   `½‖u − z₀/σ‖² + σ⁻¹φ(u, ẑ)` using only the penalty *values*, then maps
//!   back through `prox_{σφ*}(z₀) = z₀ − σ·prox_{σ⁻¹φ}(z₀/σ)`.
//!
//! Both objectives depend on `z` only through `⟨z, ê⟩` and `‖z − P(z)‖`, so
//! a minimizer lies in the plane spanned by `ê` and the part of the anchor
//! (`z₀` or `z₀/σ`) orthogonal to it. The search runs nested golden
//! sections over Cartesian coordinates `(a, b)` of that plane, restricted to
//! the domain of the function being minimized. Each domain is convex and
//! every slice of it at fixed `a` is an interval, so both levels are convex
//! one-dimensional problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockPenalty, PenaltyTag, ProxContext};
use crate::blocks::{dot, norm};
use crate::error::{Error, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleRoute {
    Conjugate,
    Moreau,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleBudget {
    /// Golden-section steps per coordinate.
    pub iterations: usize,
    /// Required final bracket width, relative to the search radius.
    pub tol: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            iterations: 80,
            tol: 1e-6,
        }
    }
}

/// Objective value, or the amount by which the point violates the domain.
#[derive(Debug, Clone, Copy)]
enum Eval {
    Feasible(f64),
    Infeasible(f64),
}

impl Eval {
    fn le(&self, other: &Eval) -> bool {
        match (self, other) {
            (Eval::Feasible(a), Eval::Feasible(b)) => a <= b,
            (Eval::Feasible(_), Eval::Infeasible(_)) => true,
            (Eval::Infeasible(_), Eval::Feasible(_)) => false,
            (Eval::Infeasible(a), Eval::Infeasible(b)) => a <= b,
        }
    }
}

/// Orthonormal `(ê, e₂)`; `e₂` is absent for scalar blocks.
struct Plane {
    e1: Vec<f64>,
    e2: Option<Vec<f64>>,
}

impl Plane {
    fn new(zhat: &[f64], anchor: &[f64]) -> Plane {
        let nh = norm(zhat);
        let e1: Vec<f64> = zhat.iter().map(|v| v / nh).collect();
        if e1.len() == 1 {
            return Plane { e1, e2: None };
        }
        let mut perp = orthogonal_part(anchor, &e1);
        if norm(&perp) <= 1e-12 * norm(anchor).max(f64::MIN_POSITIVE) {
            // anchor on the axis: any orthogonal direction spans a valid plane
            let k = (0..e1.len())
                .min_by(|&a, &b| e1[a].abs().total_cmp(&e1[b].abs()))
                .unwrap_or(0);
            let mut basis = vec![0.0; e1.len()];
            basis[k] = 1.0;
            perp = orthogonal_part(&basis, &e1);
        }
        // second Gram-Schmidt pass removes the cancellation error of the first
        let perp = orthogonal_part(&perp, &e1);
        let np = norm(&perp);
        let e2 = perp.into_iter().map(|v| v / np).collect();
        Plane { e1, e2: Some(e2) }
    }

    fn point(&self, a: f64, b: f64, out: &mut [f64]) {
        match &self.e2 {
            Some(e2) => {
                for ((o, u), v) in out.iter_mut().zip(&self.e1).zip(e2) {
                    *o = a * u + b * v;
                }
            }
            None => {
                for (o, u) in out.iter_mut().zip(&self.e1) {
                    *o = a * u;
                }
            }
        }
    }
}

fn orthogonal_part(v: &[f64], unit: &[f64]) -> Vec<f64> {
    let a = dot(v, unit);
    v.iter().zip(unit).map(|(x, u)| x - a * u).collect()
}

/// Golden-section search on `[lo, hi]`; returns the best point seen, its
/// evaluation and the final bracket width.
fn golden(lo: f64, hi: f64, iters: usize, mut g: impl FnMut(f64) -> Eval) -> (f64, Eval, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = g(c);
    let mut fd = g(d);
    for _ in 0..iters {
        if fc.le(&fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = g(d);
        }
    }
    let mid = 0.5 * (a + b);
    let fm = g(mid);
    let mut best = (mid, fm);
    for cand in [(c, fc), (d, fd)] {
        if !best.1.le(&cand.1) {
            best = cand;
        }
    }
    (best.0, best.1, b - a)
}

/// Box `a ∈ [a_lo, a_hi]`, `b ∈ chord(a)` in plane coordinates, where both
/// the box and every chord are intervals of a convex domain.
struct Domain {
    a: (f64, f64),
    chord: Box<dyn Fn(f64) -> (f64, f64)>,
}

impl Domain {
    fn full(radius: f64) -> Self {
        Self {
            a: (-radius, radius),
            chord: Box::new(move |_| (-radius, radius)),
        }
    }

    fn band(a: (f64, f64), b: (f64, f64)) -> Self {
        Self {
            a,
            chord: Box::new(move |_| b),
        }
    }
}

fn minimize_in_plane(
    plane: &Plane,
    domain: &Domain,
    radius: f64,
    budget: &OracleBudget,
    objective: impl Fn(&[f64]) -> Eval,
) -> Result<Vec<f64>> {
    let dim = plane.e1.len();
    let mut buf = vec![0.0; dim];
    let origin = vec![0.0; dim];
    if radius <= 0.0 {
        return Ok(origin);
    }
    let mut worst_width: f64 = 0.0;
    let inner = |a: f64, buf: &mut Vec<f64>, worst: &mut f64| -> (f64, Eval) {
        if plane.e2.is_none() {
            plane.point(a, 0.0, buf);
            return (0.0, objective(buf));
        }
        let (lo, hi) = (domain.chord)(a);
        let (b, eval, width) = golden(lo, hi, budget.iterations, |b| {
            plane.point(a, b, buf);
            objective(buf)
        });
        *worst = worst.max(width);
        (b, eval)
    };
    let (a, _, width) = golden(domain.a.0, domain.a.1, budget.iterations, |a| {
        inner(a, &mut buf, &mut worst_width).1
    });
    worst_width = worst_width.max(width);
    let (b, _) = inner(a, &mut buf, &mut worst_width);
    plane.point(a, b, &mut buf);
    let found = objective(&buf);

    if worst_width > budget.tol * radius.max(1.0) {
        return Err(Error::BudgetExceeded {
            tol: budget.tol,
            residual: worst_width,
        });
    }
    match (found, objective(&origin)) {
        (Eval::Feasible(_), origin_eval) if found.le(&origin_eval) => Ok(buf),
        (_, Eval::Feasible(_)) => Ok(origin),
        (_, Eval::Infeasible(v)) => Err(Error::BudgetExceeded {
            tol: budget.tol,
            residual: v,
        }),
    }
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// Domain of `φ*(·, ẑ)` in plane coordinates, from the set descriptions
/// `{0}`, `{α = 0}`, `{α ≤ 0}` and `{‖z + λê‖ ≤ λ}`.
fn conjugate_domain(penalty: &BlockPenalty, radius: f64) -> Domain {
    let r = radius;
    match penalty.tag() {
        PenaltyTag::Ls => Domain::band((0.0, 0.0), (0.0, 0.0)),
        PenaltyTag::Ho | PenaltyTag::Qo => Domain::band((0.0, 0.0), (-r, r)),
        PenaltyTag::Hd | PenaltyTag::Qd => Domain::band((-r, 0.0), (-r, r)),
        PenaltyTag::Sd => {
            let lambda = penalty.lambda();
            Domain {
                a: ((-2.0 * lambda).max(-r), 0.0),
                chord: Box::new(move |a| {
                    let h = (lambda * lambda - (a + lambda) * (a + lambda)).max(0.0).sqrt().min(r);
                    (-h, h)
                }),
            }
        }
    }
}

/// Domain of `φ(·, ẑ)`: the line `ℝẑ` (HO), the ray `ℝ₊ẑ` (HD), else the
/// whole plane.
fn primal_domain(penalty: &BlockPenalty, radius: f64) -> Domain {
    match penalty.tag() {
        PenaltyTag::Ho => Domain::band((-radius, radius), (0.0, 0.0)),
        PenaltyTag::Hd => Domain::band((0.0, radius), (0.0, 0.0)),
        _ => Domain::full(radius),
    }
}

fn evaluate(value: Result<f64>, distance: f64, weight: f64) -> Eval {
    match value {
        Ok(v) if v.is_finite() => Eval::Feasible(distance + weight * v),
        _ => Eval::Infeasible(1.0),
    }
}

/// `argmin_u ½‖u − w‖² + step·φ(u, ẑ)`, found numerically from penalty
/// values alone.
pub fn primal_prox(
    penalty: &BlockPenalty,
    zhat: &[f64],
    w: &[f64],
    step: f64,
    budget: &OracleBudget,
) -> Result<Vec<f64>> {
    check_inputs(zhat, w)?;
    let plane = Plane::new(zhat, w);
    // ½‖u − w‖² ≤ ½‖w‖² at the minimizer because φ(0) = 0 ≤ φ(u)
    let radius = 2.0 * norm(w) * (1.0 + 1e-9);
    let domain = primal_domain(penalty, radius);
    minimize_in_plane(&plane, &domain, radius, budget, |u| {
        evaluate(penalty.value(u, zhat), half_sq_dist(u, w), step)
    })
}

/// Numerical `argmin_z ½‖z − z₀‖² + σφ*(z, ẑ)` along the chosen route.
pub fn brute_force_prox(
    penalty: &BlockPenalty,
    sigma: f64,
    zhat: &[f64],
    z0: &[f64],
    route: OracleRoute,
    budget: &OracleBudget,
) -> Result<Vec<f64>> {
    check_inputs(zhat, z0)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if z0.len() > 6 {
        return Err(Error::InvalidParameter(format!(
            "oracle supports block sizes up to 6, got {}",
            z0.len()
        )));
    }
    match route {
        OracleRoute::Conjugate => {
            let plane = Plane::new(zhat, z0);
            // φ*(0) = 0 and φ* ≥ 0 bound the minimizer as in `primal_prox`
            let radius = 2.0 * norm(z0) * (1.0 + 1e-9);
            let domain = conjugate_domain(penalty, radius);
            minimize_in_plane(&plane, &domain, radius, budget, |z| {
                evaluate(penalty.conjugate_value(z, zhat), half_sq_dist(z, z0), sigma)
            })
        }
        OracleRoute::Moreau => {
            let w: Vec<f64> = z0.iter().map(|v| v / sigma).collect();
            let u = primal_prox(penalty, zhat, &w, 1.0 / sigma, budget)?;
            Ok(z0.iter().zip(&u).map(|(a, b)| a - sigma * b).collect())
        }
    }
}

/// `‖prox_{σφ*}(z₀) + σ·prox_{σ⁻¹φ}(z₀/σ) − z₀‖` with the closed-form
/// conjugate prox and the numerical primal prox.
pub fn moreau_residual(
    penalty: &BlockPenalty,
    sigma: f64,
    zhat: &[f64],
    z0: &[f64],
    budget: &OracleBudget,
) -> Result<f64> {
    let closed = penalty.prox_conjugate(&ProxContext::new(sigma, zhat)?, z0)?;
    let w: Vec<f64> = z0.iter().map(|v| v / sigma).collect();
    let u = primal_prox(penalty, zhat, &w, 1.0 / sigma, budget)?;
    let r: Vec<f64> = closed
        .iter()
        .zip(&u)
        .zip(z0)
        .map(|((p, q), z)| p + sigma * q - z)
        .collect();
    Ok(norm(&r))
}

fn check_inputs(zhat: &[f64], z: &[f64]) -> Result<()> {
    if zhat.len() != z.len() {
        return Err(Error::dims(zhat.len(), z.len()));
    }
    if !(norm(zhat) > super::ZERO_REFERENCE) {
        return Err(Error::ZeroReference { block: usize::MAX });
    }
    Ok(())
}

/// One random prox test instance.
#[derive(Debug, Clone)]
pub struct ProxInstance {
    pub lambda: f64,
    pub sigma: f64,
    pub zhat: Vec<f64>,
    pub z0: Vec<f64>,
}

/// Draws `λ, σ ~ U[0.1, 10]` and `ẑ, z₀` with entries `~ U[−5, 5]`.
pub fn random_instances(b: usize, count: usize, seed: u64) -> Vec<ProxInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let lambda = rng.random_range(0.1..=10.0);
        let sigma = rng.random_range(0.1..=10.0);
        let zhat: Vec<f64> = (0..b).map(|_| rng.random_range(-5.0..5.0)).collect();
        let z0: Vec<f64> = (0..b).map(|_| rng.random_range(-5.0..5.0)).collect();
        if norm(&zhat) > 1e-3 {
            out.push(ProxInstance {
                lambda,
                sigma,
                zhat,
                z0,
            });
        }
    }
    out
}

/// Worst-case discrepancies of the closed-form prox over random instances.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxCheckReport {
    pub instances: usize,
    /// Closed form vs direct minimization of the conjugate objective.
    pub max_conjugate_route_error: f64,
    /// Closed form vs the Moreau route.
    pub max_moreau_route_error: f64,
    /// Moreau identity residual (finite-valued penalties only, else 0).
    pub max_moreau_residual: f64,
}

impl ProxCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_conjugate_route_error
            .max(self.max_moreau_route_error)
            .max(self.max_moreau_residual)
    }
}

pub fn check_penalty(
    tag: PenaltyTag,
    b: usize,
    trials: usize,
    seed: u64,
    budget: &OracleBudget,
) -> Result<ProxCheckReport> {
    if !(1..=6).contains(&b) {
        return Err(Error::InvalidParameter(format!("block size must be in [1, 6], got {b}")));
    }
    let mut report = ProxCheckReport {
        instances: trials,
        ..Default::default()
    };
    let diff = |a: &[f64], c: &[f64]| -> f64 {
        a.iter().zip(c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    for inst in random_instances(b, trials, seed) {
        let penalty = BlockPenalty::new(tag, inst.lambda)?;
        let closed =
            penalty.prox_conjugate(&ProxContext::new(inst.sigma, &inst.zhat)?, &inst.z0)?;
        let conj = brute_force_prox(&penalty, inst.sigma, &inst.zhat, &inst.z0, OracleRoute::Conjugate, budget)?;
        let w: Vec<f64> = inst.z0.iter().map(|v| v / inst.sigma).collect();
        let u = primal_prox(&penalty, &inst.zhat, &w, 1.0 / inst.sigma, budget)?;
        let moreau: Vec<f64> = inst.z0.iter().zip(&u).map(|(a, b)| a - inst.sigma * b).collect();
        report.max_conjugate_route_error = report.max_conjugate_route_error.max(diff(&closed, &conj));
        report.max_moreau_route_error = report.max_moreau_route_error.max(diff(&closed, &moreau));
        if matches!(tag, PenaltyTag::Qo | PenaltyTag::Qd | PenaltyTag::Sd) {
            let r: Vec<f64> = closed.iter().zip(&moreau).map(|(a, b)| a - b).collect();
            report.max_moreau_residual = report.max_moreau_residual.max(norm(&r));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prox_closed(tag: PenaltyTag, lambda: f64, sigma: f64, zhat: &[f64], z0: &[f64]) -> Vec<f64> {
        BlockPenalty::new(tag, lambda)
            .unwrap()
            .prox_conjugate(&ProxContext::new(sigma, zhat).unwrap(), z0)
            .unwrap()
    }

    #[test]
    fn oracle_reproduces_hand_examples() {
        let budget = OracleBudget::default();
        let cases: [(PenaltyTag, f64, f64, [f64; 2], [f64; 2], [f64; 2]); 4] = [
            (PenaltyTag::Ho, 1.0, 1.0, [1.0, 0.0], [3.0, 4.0], [0.0, 4.0]),
            (PenaltyTag::Hd, 1.0, 1.0, [1.0, 0.0], [-3.0, 4.0], [-3.0, 4.0]),
            (PenaltyTag::Qo, 1.0, 1.0, [2.0, 0.0], [3.0, 4.0], [0.0, 4.0 / 3.0]),
            (PenaltyTag::Sd, 1.0, 1.0, [1.0, 0.0], [3.0, 0.0], [0.0, 0.0]),
        ];
        for (tag, lambda, sigma, zhat, z0, expected) in cases {
            let p = BlockPenalty::new(tag, lambda).unwrap();
            for route in [OracleRoute::Conjugate, OracleRoute::Moreau] {
                let got = brute_force_prox(&p, sigma, &zhat, &z0, route, &budget).unwrap();
                for (g, e) in got.iter().zip(&expected) {
                    assert!((g - e).abs() < 1e-6, "{tag} {route:?}: {got:?}");
                }
            }
        }
    }

    #[test]
    fn sd_closed_form_matches_oracle() {
        let budget = OracleBudget::default();
        for b in [1, 2, 3] {
            for inst in random_instances(b, 200, 17 + b as u64) {
                let p = BlockPenalty::new(PenaltyTag::Sd, inst.lambda).unwrap();
                let closed = prox_closed(PenaltyTag::Sd, inst.lambda, inst.sigma, &inst.zhat, &inst.z0);
                for route in [OracleRoute::Conjugate, OracleRoute::Moreau] {
                    let o = brute_force_prox(&p, inst.sigma, &inst.zhat, &inst.z0, route, &budget).unwrap();
                    for (x, y) in closed.iter().zip(&o) {
                        assert!((x - y).abs() <= 1e-5, "b={b} {route:?}: {closed:?} vs {o:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn qo_in_six_dimensions() {
        let report = check_penalty(PenaltyTag::Qo, 6, 100, 23, &OracleBudget::default()).unwrap();
        assert!(report.max_error() <= 1e-5, "{report:?}");
    }

    #[test]
    fn scalar_blocks_against_oracle() {
        for tag in PenaltyTag::ALL {
            let report = check_penalty(tag, 1, 200, 31, &OracleBudget::default()).unwrap();
            assert!(report.max_error() <= 1e-5, "{tag}: {report:?}");
        }
    }

    #[test]
    fn tiny_budget_is_reported() {
        let p = BlockPenalty::new(PenaltyTag::Sd, 1.0).unwrap();
        let budget = OracleBudget {
            iterations: 3,
            tol: 1e-6,
        };
        assert!(matches!(
            brute_force_prox(&p, 1.0, &[1.0, 0.0], &[3.0, 1.0], OracleRoute::Conjugate, &budget),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn rejects_bad_block_size() {
        assert!(check_penalty(PenaltyTag::Sd, 0, 1, 0, &OracleBudget::default()).is_err());
        assert!(check_penalty(PenaltyTag::Sd, 7, 1, 0, &OracleBudget::default()).is_err());
    }
}
