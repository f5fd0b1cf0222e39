//! Primal-dual solvers for the biased problem and its refitted versions.
//!
//! All loops share one primal step,
//! `x ← (Id + τΦᵀΦ)⁻¹(x + τ(Φᵀy + p − Γᵀz))`, `v ← x + θ(x − x_prev)`,
//! where `p` is zero except in Iterative Bregman. They differ in the dual
//! step:
//!
//! | solver     | dual step                                              |
//! |------------|--------------------------------------------------------|
//! | biased     | `ẑᵢ ← λνᵢ / max(λ, ‖νᵢ‖)`, `ν = ẑ + σΓv̂`               |
//! | joint      | biased step plus `z̃ ← prox_{σω*}(z̃ + σΓṽ; Ψ, Î)`        |
//! | posterior  | `z̃ ← prox_{σω*}(z̃ + σΓṽ; Ψ, Î)` with frozen `Ψ`, `Î`   |

use std::io::Write;

use crate::blocks::{norm, BlockVector, SupportSet};
use crate::error::{Error, Result};
use crate::operators::{AnalysisOperator, ForwardOperator, ImageGrid};
use crate::penalties::{prox_omega_conjugate_in_place, BlockPenalty, ZERO_REFERENCE};

/// Relative slack of the posterior support test `‖ẑᵢ‖ ≥ λ(1 − slack)`.
pub const POSTERIOR_SUPPORT_SLACK: f64 = 1e-6;

/// Ratio between `λ` and the noise level used by [`PrimalDualParams::for_noise`].
pub const LAMBDA_PER_NOISE_STD: f64 = 4.3;

const NORM_ESTIMATE_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalDualParams {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// Stop once the convergence residual drops below this value.
    pub tolerance: Option<f64>,
}

impl PrimalDualParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            tau: 0.25,
            sigma: 1.0 / 6.0,
            theta: 1.0,
            iterations: 1000,
            lambda,
            tolerance: None,
        }
    }

    pub fn for_noise(noise_std: f64) -> Self {
        Self::new(LAMBDA_PER_NOISE_STD * noise_std)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = Some(tolerance);
        self
    }

    /// Checks ranges and `τσ‖ΓᵀΓ‖ < 1`.
    pub fn validate(&self, gamma: &AnalysisOperator) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("sigma", self.sigma)?;
        positive("lambda", self.lambda)?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be positive".into()));
        }
        if let Some(tol) = self.tolerance {
            if !(tol >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "tolerance must be nonnegative, got {tol}"
                )));
            }
        }
        let product = self.tau * self.sigma * gamma.norm_sq_estimate(NORM_ESTIMATE_ITERS);
        if product >= 1.0 {
            return Err(Error::StepSizeViolation { product });
        }
        Ok(())
    }
}

/// Primal, dual and extrapolated iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct PdState {
    pub x: ImageGrid,
    pub z: BlockVector,
    pub v: ImageGrid,
}

pub type BiasedState = PdState;
pub type RefitState = PdState;

impl PdState {
    pub fn zeros(gamma: &AnalysisOperator) -> Self {
        Self {
            x: gamma.zeros_domain(),
            z: gamma.zeros_codomain(),
            v: gamma.zeros_domain(),
        }
    }
}

/// `‖Δx‖ / max(1, ‖x_prev‖) + ‖Δz‖ / max(1, ‖z_prev‖)`.
pub fn convergence_residual(prev: &PdState, next: &PdState) -> Result<f64> {
    if !prev.x.same_dims(&next.x) {
        return Err(Error::dims(
            format!("{:?}", prev.x.dims()),
            format!("{:?}", next.x.dims()),
        ));
    }
    prev.z.check_shape(&next.z)?;
    Ok(relative_change(prev.x.as_slice(), next.x.as_slice())
        + relative_change(prev.z.as_slice(), next.z.as_slice()))
}

fn relative_change(prev: &[f64], next: &[f64]) -> f64 {
    let diff = prev
        .iter()
        .zip(next)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(prev).max(1.0)
}

/// Which blocks of `ν` count as detected support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportRule {
    /// `‖νᵢ‖ > λ`
    #[default]
    Strict,
    /// `‖νᵢ‖ ≥ λ`
    Extended,
}

impl SupportRule {
    pub fn detect(self, nu: &BlockVector, lambda: f64) -> SupportSet {
        let mask = nu
            .blocks()
            .map(|blk| {
                let n = norm(blk);
                match self {
                    SupportRule::Strict => n > lambda,
                    SupportRule::Extended => n >= lambda,
                }
            })
            .collect();
        SupportSet::from_mask(mask)
    }
}

/// Per-iteration diagnostics passed to observers.
#[derive(Debug, Clone, Copy)]
pub struct IterationInfo<'a> {
    /// 1-based iteration count.
    pub iteration: usize,
    pub residual: f64,
    /// Residual of the refit column, when one runs.
    pub refit_residual: Option<f64>,
    /// Detected support, when the solver tracks one.
    pub support: Option<&'a SupportSet>,
    pub max_dual_norm: f64,
}

/// Collects `(iteration, residual, support size)` rows and writes them as CSV.
#[derive(Debug, Clone, Default)]
pub struct DiagnosticsLog {
    rows: Vec<(usize, f64, usize)>,
}

impl DiagnosticsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, info: &IterationInfo<'_>) {
        let residual = info.residual + info.refit_residual.unwrap_or(0.0);
        let support = info.support.map_or(0, SupportSet::len);
        self.rows.push((info.iteration, residual, support));
    }

    pub fn rows(&self) -> &[(usize, f64, usize)] {
        &self.rows
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,residual,support_size")?;
        for (k, r, s) in &self.rows {
            writeln!(out, "{k},{r:e},{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BiasedOutput {
    pub state: BiasedState,
    /// `ν = ẑ + σΓv̂` from the last dual update.
    pub nu: BlockVector,
    pub iterations: usize,
    pub residual: f64,
}

impl BiasedOutput {
    pub fn xhat(&self) -> &ImageGrid {
        &self.state.x
    }

    pub fn zhat(&self) -> &BlockVector {
        &self.state.z
    }
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub biased: BiasedState,
    pub refit: RefitState,
    /// Support detected at the last iteration.
    pub support: SupportSet,
    pub iterations: usize,
    pub residual: f64,
}

impl JointOutput {
    pub fn xhat(&self) -> &ImageGrid {
        &self.biased.x
    }

    pub fn xtilde(&self) -> &ImageGrid {
        &self.refit.x
    }
}

/// Shared problem data and scratch buffers.
struct Problem<'a> {
    phi: &'a ForwardOperator,
    gamma: &'a AnalysisOperator,
    params: &'a PrimalDualParams,
    phi_t_y: ImageGrid,
    gv: BlockVector,
    gtz: ImageGrid,
    r: ImageGrid,
}

impl<'a> Problem<'a> {
    fn new(
        phi: &'a ForwardOperator,
        gamma: &'a AnalysisOperator,
        y: &ImageGrid,
        params: &'a PrimalDualParams,
    ) -> Result<Self> {
        if y.dims() != gamma.image_dims() {
            return Err(Error::dims(
                format!("{:?}", gamma.image_dims()),
                format!("{:?}", y.dims()),
            ));
        }
        params.validate(gamma)?;
        let phi_t_y = phi.adjoint(y)?;
        Ok(Self {
            phi,
            gamma,
            params,
            phi_t_y,
            gv: gamma.zeros_codomain(),
            gtz: gamma.zeros_domain(),
            r: gamma.zeros_domain(),
        })
    }

    /// `out ← z + σΓv`.
    fn dual_ascent(&mut self, state: &PdState, out: &mut BlockVector) {
        self.gamma.apply_into(&state.v, &mut self.gv);
        let sigma = self.params.sigma;
        for ((o, z), g) in out
            .as_mut_slice()
            .iter_mut()
            .zip(state.z.as_slice())
            .zip(self.gv.as_slice())
        {
            *o = z + sigma * g;
        }
    }

    /// Primal update and extrapolation; returns `‖Δx‖ / max(1, ‖x_prev‖)`.
    fn primal_step(&mut self, state: &mut PdState, linear: Option<&ImageGrid>) -> Result<f64> {
        let tau = self.params.tau;
        let theta = self.params.theta;
        self.gamma.adjoint_into(&state.z, &mut self.gtz);
        for (i, r) in self.r.as_mut_slice().iter_mut().enumerate() {
            let p = linear.map_or(0.0, |l| l.as_slice()[i]);
            *r = state.x.as_slice()[i] + tau * (self.phi_t_y.as_slice()[i] + p - self.gtz.as_slice()[i]);
        }
        let x_new = self.phi.resolvent(tau, &self.r)?;
        let change = relative_change(state.x.as_slice(), x_new.as_slice());
        for ((v, xn), xo) in state
            .v
            .as_mut_slice()
            .iter_mut()
            .zip(x_new.as_slice())
            .zip(state.x.as_slice())
        {
            *v = xn + theta * (xn - xo);
        }
        state.x = x_new;
        Ok(change)
    }

    fn stop(&self, residual: f64) -> bool {
        self.params.tolerance.is_some_and(|tol| residual < tol)
    }
}

/// `ẑᵢ ← λνᵢ / max(λ, ‖νᵢ‖)` blockwise.
fn project_dual(nu: &BlockVector, lambda: f64, z: &mut BlockVector) {
    for (out, blk) in z.blocks_mut().zip(nu.blocks()) {
        let scale = lambda / lambda.max(norm(blk));
        for (o, v) in out.iter_mut().zip(blk) {
            *o = scale * v;
        }
    }
}

/// Solves `min ½‖Φx − y‖² + λ‖Γx‖₁,₂`.
pub fn solve_biased(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
) -> Result<BiasedOutput> {
    solve_biased_observed(phi, gamma, y, params, &mut |_| {})
}

pub fn solve_biased_observed(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<BiasedOutput> {
    solve_with_linear_term(phi, gamma, y, params, None, observer)
}

fn solve_with_linear_term(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    linear: Option<&ImageGrid>,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<BiasedOutput> {
    let mut pb = Problem::new(phi, gamma, y, params)?;
    let mut state = PdState::zeros(gamma);
    let mut nu = gamma.zeros_codomain();
    let mut residual = f64::INFINITY;
    let mut done = 0;
    for k in 1..=params.iterations {
        pb.dual_ascent(&state, &mut nu);
        let z_prev = state.z.clone();
        project_dual(&nu, params.lambda, &mut state.z);
        let dz = relative_change(z_prev.as_slice(), state.z.as_slice());
        let dx = pb.primal_step(&mut state, linear)?;
        residual = dx + dz;
        done = k;
        observer(&IterationInfo {
            iteration: k,
            residual,
            refit_residual: None,
            support: None,
            max_dual_norm: state.z.max_block_norm(),
        });
        if pb.stop(residual) {
            break;
        }
    }
    Ok(BiasedOutput {
        state,
        nu,
        iterations: done,
        residual,
    })
}

/// Blockwise `Ψᵢ = ((‖νᵢ‖ − λ) / (σ‖νᵢ‖)) νᵢ` restricted to a support.
#[derive(Debug, Clone)]
pub struct PsiEstimate {
    values: BlockVector,
    support: SupportSet,
}

impl PsiEstimate {
    pub fn support(&self) -> &SupportSet {
        &self.support
    }

    pub fn block(&self, i: usize) -> Result<&[f64]> {
        if i < self.support.universe() && self.support.contains(i) {
            Ok(self.values.block(i))
        } else {
            Err(Error::NotInSupport { block: i })
        }
    }

    /// All blocks, zero off the support.
    pub fn as_blocks(&self) -> &BlockVector {
        &self.values
    }
}

/// `Ψ(ẑ, v̂)` on `supp`, with `ν = ẑ + σΓv̂`.
pub fn psi_estimate(
    zhat: &BlockVector,
    vhat: &ImageGrid,
    gamma: &AnalysisOperator,
    sigma: f64,
    lambda: f64,
    supp: &SupportSet,
) -> Result<PsiEstimate> {
    let gv = gamma.apply(vhat)?;
    zhat.check_shape(&gv)?;
    if supp.universe() != zhat.m() {
        return Err(Error::dims(zhat.m(), supp.universe()));
    }
    let mut nu = zhat.clone();
    nu.as_mut_slice()
        .iter_mut()
        .zip(gv.as_slice())
        .for_each(|(n, g)| *n += sigma * g);
    let mut values = gamma.zeros_codomain();
    for i in supp.indices() {
        let n = norm(nu.block(i));
        if !(n > lambda) {
            return Err(Error::ZeroReference { block: i });
        }
        let scale = (n - lambda) / (sigma * n);
        for (o, v) in values.block_mut(i).iter_mut().zip(nu.block(i)) {
            *o = scale * v;
        }
    }
    Ok(PsiEstimate {
        values,
        support: supp.clone(),
    })
}

/// Writes `Ψ` on `supp` into `out`. Blocks with `‖νᵢ‖ = λ` (possible under
/// the extended rule) would give `Ψᵢ = 0`; they keep the direction of `νᵢ`
/// with a vanishing norm instead, which is the limit of the formula.
fn psi_into(nu: &BlockVector, sigma: f64, lambda: f64, supp: &SupportSet, out: &mut BlockVector) {
    let floor = 2.0 * ZERO_REFERENCE;
    for i in supp.indices() {
        let src = nu.block(i);
        let n = norm(src);
        let target = ((n - lambda) / sigma).max(floor);
        let scale = target / n;
        for (o, v) in out.block_mut(i).iter_mut().zip(src) {
            *o = scale * v;
        }
    }
}

/// Runs the biased and refitting iterations in lockstep, detecting the
/// support online.
pub fn joint_solve(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    penalty: &BlockPenalty,
    rule: SupportRule,
) -> Result<JointOutput> {
    joint_solve_observed(phi, gamma, y, params, penalty, rule, &mut |_| {})
}

pub fn joint_solve_observed(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    penalty: &BlockPenalty,
    rule: SupportRule,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<JointOutput> {
    let mut pb = Problem::new(phi, gamma, y, params)?;
    let mut biased = PdState::zeros(gamma);
    let mut refit = PdState::zeros(gamma);
    let mut nu = gamma.zeros_codomain();
    let mut w = gamma.zeros_codomain();
    let mut psi = gamma.zeros_codomain();
    let mut support = SupportSet::empty(gamma.m());
    let mut residual = f64::INFINITY;
    let mut done = 0;
    for k in 1..=params.iterations {
        pb.dual_ascent(&biased, &mut nu);
        support = rule.detect(&nu, params.lambda);
        psi_into(&nu, params.sigma, params.lambda, &support, &mut psi);
        let z_prev = biased.z.clone();
        project_dual(&nu, params.lambda, &mut biased.z);
        let dz = relative_change(z_prev.as_slice(), biased.z.as_slice());
        let dx = pb.primal_step(&mut biased, None)?;

        pb.dual_ascent(&refit, &mut w);
        prox_omega_conjugate_in_place(penalty, params.sigma, &mut w, &psi, &support)?;
        let dzr = relative_change(refit.z.as_slice(), w.as_slice());
        std::mem::swap(&mut refit.z, &mut w);
        let dxr = pb.primal_step(&mut refit, None)?;

        let biased_residual = dx + dz;
        let refit_residual = dxr + dzr;
        residual = biased_residual.max(refit_residual);
        done = k;
        observer(&IterationInfo {
            iteration: k,
            residual: biased_residual,
            refit_residual: Some(refit_residual),
            support: Some(&support),
            max_dual_norm: biased.z.max_block_norm(),
        });
        if pb.stop(residual) {
            break;
        }
    }
    Ok(JointOutput {
        biased,
        refit,
        support,
        iterations: done,
        residual,
    })
}

/// Support and reference blocks that [`posterior_refit`] freezes.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub support: SupportSet,
    pub reference: BlockVector,
}

/// Support `{‖ẑᵢ‖ ≥ λ(1 − 10⁻⁶)}` with references `Ψ(ẑ, x̂)`, falling back
/// to `(Γx̂)ᵢ` where `‖νᵢ‖ ≤ λ`. Blocks whose reference vanishes are
/// dropped.
pub fn posterior_model(
    gamma: &AnalysisOperator,
    params: &PrimalDualParams,
    xhat: &ImageGrid,
    zhat: &BlockVector,
) -> Result<PosteriorModel> {
    let gx = gamma.apply(xhat)?;
    zhat.check_shape(&gx)?;
    let lambda = params.lambda;
    let sigma = params.sigma;
    let mut reference = gamma.zeros_codomain();
    let mut mask = vec![false; gamma.m()];
    for (i, keep) in mask.iter_mut().enumerate() {
        if norm(zhat.block(i)) < lambda * (1.0 - POSTERIOR_SUPPORT_SLACK) {
            continue;
        }
        let nu: Vec<f64> = zhat
            .block(i)
            .iter()
            .zip(gx.block(i))
            .map(|(z, g)| z + sigma * g)
            .collect();
        let n = norm(&nu);
        let out = reference.block_mut(i);
        if n > lambda {
            let scale = (n - lambda) / (sigma * n);
            out.iter_mut().zip(&nu).for_each(|(o, v)| *o = scale * v);
        } else {
            out.copy_from_slice(gx.block(i));
        }
        *keep = norm(out) > ZERO_REFERENCE;
        if !*keep {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(PosteriorModel {
        support: SupportSet::from_mask(mask),
        reference,
    })
}

/// Refits after a converged biased solve, with support and references
/// frozen by [`posterior_model`].
pub fn posterior_refit(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    penalty: &BlockPenalty,
    xhat: &ImageGrid,
    zhat: &BlockVector,
) -> Result<ImageGrid> {
    let model = posterior_model(gamma, params, xhat, zhat)?;
    Ok(refit_with_model(phi, gamma, y, params, penalty, &model)?.x)
}

pub fn refit_with_model(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    penalty: &BlockPenalty,
    model: &PosteriorModel,
) -> Result<RefitState> {
    let mut pb = Problem::new(phi, gamma, y, params)?;
    if model.support.universe() != gamma.m() {
        return Err(Error::dims(gamma.m(), model.support.universe()));
    }
    let mut state = PdState::zeros(gamma);
    let mut w = gamma.zeros_codomain();
    for _ in 0..params.iterations {
        pb.dual_ascent(&state, &mut w);
        prox_omega_conjugate_in_place(penalty, params.sigma, &mut w, &model.reference, &model.support)?;
        let dz = relative_change(state.z.as_slice(), w.as_slice());
        std::mem::swap(&mut state.z, &mut w);
        let dx = pb.primal_step(&mut state, None)?;
        if pb.stop(dx + dz) {
            break;
        }
    }
    Ok(state)
}

/// Iterative Bregman refitting; element `l` is the solution of step `l + 1`
/// (element 0 is the biased solution).
pub fn iterative_bregman(
    phi: &ForwardOperator,
    gamma: &AnalysisOperator,
    y: &ImageGrid,
    params: &PrimalDualParams,
    steps: usize,
) -> Result<Vec<ImageGrid>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be positive".into()));
    }
    let mut out = Vec::with_capacity(steps);
    let mut linear: Option<ImageGrid> = None;
    for _ in 0..steps {
        let step = solve_with_linear_term(phi, gamma, y, params, linear.as_ref(), &mut |_| {})?;
        linear = Some(gamma.adjoint(&step.state.z)?);
        out.push(step.state.x);
    }
    Ok(out)
}
