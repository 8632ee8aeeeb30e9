//! The radial evolution equation with the capillary boundary condition, and a
//! backward-Euler time stepper with an inner fixed-point loop.
//!
//! Each step solves `(I - dt L) u = rho + dt (P(rho_hat) - H_ref)` where `L` is the
//! dense fractional Laplacian matrix and `P` the frozen nonlinear remainder,
//! iterating on `rho_hat` until the sup-norm change falls below `picard_tol`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::diagnostics::volume;
use crate::error::{FlowError, Result};
use crate::geometry::{RadialField, SphereGrid, Topology, Vec3};
use crate::nonlocal::{
    check_injective, frac_laplacian_all, hs_reference, laplacian_matrix, remainders, HomotopyRule,
    KernelParams, Remainders,
};

pub use crate::nonlocal::HsRefMode;

/// Minimum radius below which a run is declared extinct.
pub const EXTINCTION_RADIUS: f64 = 0.05;
/// Maximum number of step rejections (each halving `dt`).
pub const MAX_HALVINGS: usize = 5;
const BC_NEWTON_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub s: f64,
    pub theta: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n: usize,
    pub resolution: usize,
    pub topology: Topology,
    pub hs_ref_mode: HsRefMode,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub bc_tol: f64,
    /// Recompute `R1`, `R2` at every inner iterate (otherwise once per step).
    pub refresh_remainders: bool,
    /// Gauss–Legendre points per homotopy axis.
    pub homotopy_order: usize,
    /// History length of the Anderson mixing applied to the inner iteration; 0 is plain Picard.
    pub anderson_depth: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            s: 0.5,
            theta: std::f64::consts::FRAC_PI_2,
            dt: 1e-3,
            t_end: 1e-2,
            n: 1,
            resolution: 129,
            topology: Topology::Hemisphere,
            hs_ref_mode: HsRefMode::HalfBall,
            max_picard: 20,
            picard_tol: 1e-9,
            bc_tol: 1e-6,
            refresh_remainders: true,
            homotopy_order: 8,
            anderson_depth: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlowError::InvalidArgument(msg));
        if !(self.s > 0.0 && self.s < 1.0) {
            return bad("s must lie in (0,1)".into());
        }
        if !(self.theta > 0.0 && self.theta < std::f64::consts::PI) {
            return bad("theta must lie in (0,pi)".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive".into());
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be nonnegative".into());
        }
        if !(self.picard_tol > 0.0) {
            return bad("picard_tol must be positive".into());
        }
        if !(self.bc_tol > 0.0) {
            return bad("bc_tol must be positive".into());
        }
        if self.max_picard == 0 {
            return bad("max_picard must be at least 1".into());
        }
        if self.homotopy_order == 0 {
            return bad("homotopy_order must be at least 1".into());
        }
        if self.topology == Topology::FullSphere && self.hs_ref_mode == HsRefMode::HalfBall {
            return bad("hs_ref_mode half-ball requires topology hemisphere".into());
        }
        KernelParams::new(self.s, self.n)?;
        Ok(())
    }

    pub fn params(&self) -> Result<KernelParams> {
        KernelParams::new(self.s, self.n)
    }

    pub fn build_grid(&self) -> Result<SphereGrid> {
        SphereGrid::build(self.n, self.resolution, self.topology)
    }
}

/// `A = sqrt(rho^2 + |grad rho|^2) / rho`.
pub fn prefactor_a(rho: &RadialField, x: usize) -> Result<f64> {
    let r = positive(rho, x)?;
    Ok((r * r + rho.gradient()[x].norm_squared()).sqrt() / r)
}

/// Outward unit normal `(rho x - grad rho) / sqrt(rho^2 + |grad rho|^2)` at `rho(x) x`.
pub fn unit_normal(rho: &RadialField, x: usize) -> Result<Vec3> {
    let r = positive(rho, x)?;
    let g = rho.gradient()[x];
    Ok((rho.grid().node(x) * r - g) / (r * r + g.norm_squared()).sqrt())
}

/// Jacobian of `Phi_{t rho}` at node `x`.
pub fn jacobian_j(t: f64, rho: &RadialField, x: usize) -> Result<f64> {
    let c = 1.0 + t * (rho.value(x) - 1.0);
    if c <= 0.0 {
        return Err(FlowError::NonPositiveRadius { node: x, value: c });
    }
    let g2 = (rho.gradient()[x] * t).norm_squared();
    Ok(c.powi(rho.grid().dim() as i32 - 1) * (c * c + g2).sqrt())
}

/// Normal velocity `dt_rho * rho / sqrt(rho^2 + |grad rho|^2)`.
pub fn normal_velocity(rho: &RadialField, dt_rho: f64, x: usize) -> Result<f64> {
    Ok(dt_rho / prefactor_a(rho, x)?)
}

fn positive(rho: &RadialField, x: usize) -> Result<f64> {
    let r = rho.value(x);
    if r <= 0.0 {
        return Err(FlowError::NonPositiveRadius { node: x, value: r });
    }
    Ok(r)
}

/// Everything the right-hand side is built from, at every node.
#[derive(Debug, Clone)]
pub struct RhsParts {
    pub a: Vec<f64>,
    pub laplacian: Vec<f64>,
    pub remainders: Remainders,
    /// `Delta rho - H_ref + R1 + R2 (rho - 1)`.
    pub neg_hs: Vec<f64>,
    /// `(A - 1)(Delta rho - H_ref) + A [R1 + R2 (rho - 1)]`.
    pub p: Vec<f64>,
}

impl RhsParts {
    fn build(
        rho: &RadialField,
        params: &KernelParams,
        hs_ref: &[f64],
        rem: Remainders,
    ) -> Result<Self> {
        let n = rho.grid().len();
        if hs_ref.len() != n {
            return Err(FlowError::LengthMismatch {
                expected: n,
                got: hs_ref.len(),
            });
        }
        let laplacian = frac_laplacian_all(rho.grid(), rho.values(), params)?;
        let a = (0..n)
            .map(|i| prefactor_a(rho, i))
            .collect::<Result<Vec<_>>>()?;
        let mut neg_hs = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        for i in 0..n {
            let lin = laplacian[i] - hs_ref[i];
            let nonlin = rem.r1[i] + rem.r2[i] * (rho.value(i) - 1.0);
            neg_hs.push(lin + nonlin);
            p.push((a[i] - 1.0) * lin + a[i] * nonlin);
        }
        Ok(RhsParts {
            a,
            laplacian,
            remainders: rem,
            neg_hs,
            p,
        })
    }

    /// `A (Delta rho - H_ref + R1 + R2 (rho - 1))`, the time derivative of `rho`.
    pub fn rhs(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.neg_hs)
            .map(|(a, h)| a * h)
            .collect()
    }
}

pub fn rhs_parts(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<RhsParts> {
    let rem = remainders(rho, params, rule)?;
    RhsParts::build(rho, params, hs_ref, rem)
}

/// The remainder `P` at every node.
pub fn remainder_p(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<Vec<f64>> {
    Ok(rhs_parts(rho, params, rule, hs_ref)?.p)
}

/// `d rho / dt` at every node.
pub fn assemble_rhs(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<Vec<f64>> {
    Ok(rhs_parts(rho, params, rule, hs_ref)?.rhs())
}

fn require_hemisphere(grid: &SphereGrid) -> Result<()> {
    if grid.topology() != Topology::Hemisphere {
        return Err(FlowError::Topology {
            expected: "hemisphere",
        });
    }
    Ok(())
}

/// Boundary data for node `b`: the conormal derivative and the tangential
/// gradient are affine in the value at `b`.
struct BoundaryStencil {
    eta: Vec3,
    g0: Vec3,
    cb: Vec3,
}

impl BoundaryStencil {
    fn new(grid: &SphereGrid, values: &[f64], b: usize) -> Self {
        let eta = *grid.conormal(b).expect("boundary node");
        let g0 = grid.gradient_at(b, |j| if j == b { 0.0 } else { values[j] });
        let cb = grid.gradient_at(b, |j| if j == b { 1.0 } else { 0.0 });
        BoundaryStencil { eta, g0, cb }
    }

    fn residual(&self, v: f64, cos_theta: f64) -> (f64, f64) {
        let g = self.g0 + self.cb * v;
        let root = (v * v + g.norm_squared()).sqrt();
        let r = g.dot(&self.eta) - cos_theta * root;
        let dr = self.cb.dot(&self.eta) - cos_theta * (v + g.dot(&self.cb)) / root;
        (r, dr)
    }
}

fn bc_residual_values(grid: &SphereGrid, values: &[f64], cos_theta: f64) -> Vec<f64> {
    grid.boundary_nodes()
        .into_iter()
        .map(|b| {
            let g = grid.gradient_at(b, |j| values[j]);
            let eta = grid.conormal(b).expect("boundary node");
            g.dot(eta) - cos_theta * (values[b] * values[b] + g.norm_squared()).sqrt()
        })
        .collect()
}

/// `d rho / d eta - cos(theta) sqrt(rho^2 + |grad rho|^2)` at each boundary node.
pub fn bc_residual(rho: &RadialField, theta: f64) -> Result<Vec<f64>> {
    require_hemisphere(rho.grid())?;
    Ok(bc_residual_values(rho.grid(), rho.values(), theta.cos()))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Projects the boundary values onto the contact-angle condition, holding the
/// interior fixed, by damped Newton per boundary node.
pub fn apply_bc(rho: &RadialField, theta: f64, tol: f64) -> Result<RadialField> {
    require_hemisphere(rho.grid())?;
    let values = project_boundary(rho.grid(), rho.values().to_vec(), theta.cos(), tol)?;
    RadialField::new(rho.grid_arc().clone(), values)
}

fn project_boundary(
    grid: &SphereGrid,
    mut values: Vec<f64>,
    cos_theta: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let boundary = grid.boundary_nodes();
    let target = (1e-3 * tol).max(1e-14);
    // n = 2 boundary stencils couple neighbouring equator nodes: sweep until settled
    for _ in 0..BC_NEWTON_ITERATIONS {
        for &b in &boundary {
            values[b] = newton_boundary(grid, &values, b, cos_theta, target)?;
        }
        if max_abs(&bc_residual_values(grid, &values, cos_theta)) <= target.max(0.1 * tol) {
            return Ok(values);
        }
    }
    let residual = max_abs(&bc_residual_values(grid, &values, cos_theta));
    if residual <= tol {
        return Ok(values);
    }
    Err(FlowError::BoundaryNewton {
        node: boundary[0],
        residual,
    })
}

fn newton_boundary(
    grid: &SphereGrid,
    values: &[f64],
    b: usize,
    cos_theta: f64,
    target: f64,
) -> Result<f64> {
    let stencil = BoundaryStencil::new(grid, values, b);
    let mut v = values[b];
    let (mut r, mut dr) = stencil.residual(v, cos_theta);
    let scale = stencil.cb.dot(&stencil.eta).abs().max(1.0);
    for _ in 0..BC_NEWTON_ITERATIONS {
        if r.abs() <= target * scale.min(1.0) || r.abs() <= target {
            return Ok(v);
        }
        if dr == 0.0 || !dr.is_finite() {
            break;
        }
        let step = r / dr;
        let mut lambda = 1.0;
        loop {
            let candidate = v - lambda * step;
            if candidate > 0.0 {
                let (rc, drc) = stencil.residual(candidate, cos_theta);
                if rc.abs() < r.abs() || lambda < 1e-6 {
                    v = candidate;
                    r = rc;
                    dr = drc;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(FlowError::BoundaryNewton {
                    node: b,
                    residual: r.abs(),
                });
            }
        }
    }
    if r.abs() <= target {
        Ok(v)
    } else {
        Err(FlowError::BoundaryNewton {
            node: b,
            residual: r.abs(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDiagnostics {
    pub max_bc_residual: f64,
    pub min_rho: f64,
    pub volume: f64,
}

impl StateDiagnostics {
    fn of(rho: &RadialField, theta: f64) -> Self {
        let max_bc_residual = match rho.grid().topology() {
            Topology::Hemisphere => {
                max_abs(&bc_residual_values(rho.grid(), rho.values(), theta.cos()))
            }
            Topology::FullSphere => 0.0,
        };
        StateDiagnostics {
            max_bc_residual,
            min_rho: rho.min(),
            volume: volume(rho),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub rho: RadialField,
    pub diagnostics: StateDiagnostics,
}

impl FlowState {
    pub fn new(t: f64, rho: RadialField, theta: f64) -> Self {
        let diagnostics = StateDiagnostics::of(&rho, theta);
        FlowState {
            t,
            rho,
            diagnostics,
        }
    }

    /// `sup |rho - mean rho|` with the quadrature mean.
    pub fn oscillation(&self) -> f64 {
        oscillation(&self.rho)
    }
}

pub fn oscillation(rho: &RadialField) -> f64 {
    let w = rho.grid().weights();
    let mean = rho.values().iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / w.iter().sum::<f64>();
    rho.values()
        .iter()
        .fold(0.0, |m, r| m.max((r - mean).abs()))
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub volume: f64,
    pub oscillation: f64,
    pub max_bc_residual: f64,
    pub picard_iterations: usize,
    pub dt_used: f64,
    pub rejections: usize,
    /// `(V(t+dt) - V(t))/dt - int d_t rho * rho^n` with the secant mean of `rho^n`.
    pub volume_balance: f64,
    /// `int d_t rho * rho^n`.
    pub volume_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&FlowState> {
        self.states.last()
    }
}

/// Discrete volume rate `int ((rho1 - rho0)/dt) * m(rho0, rho1)` where `m` is the
/// secant mean of `rho^n`, which makes the discrete volume balance exact.
pub fn volume_rate(old: &RadialField, new: &RadialField, dt: f64) -> f64 {
    let grid = old.grid();
    let k = grid.dim() as i32 + 1;
    let samples: Vec<f64> = old
        .values()
        .iter()
        .zip(new.values())
        .map(|(&a, &b)| {
            let d = b - a;
            let mean = if d.abs() > 1e-8 * a.abs() {
                (b.powi(k) - a.powi(k)) / (k as f64 * d)
            } else {
                // expansion of the secant mean about the midpoint
                let m = 0.5 * (a + b);
                m.powi(k - 1) + if k == 3 { d * d / 12.0 } else { 0.0 }
            };
            d / dt * mean
        })
        .collect();
    grid.quad_integrate(&samples).unwrap_or(f64::NAN)
}

pub struct FlowSolver {
    config: FlowConfig,
    params: KernelParams,
    rule: HomotopyRule,
    grid: Arc<SphereGrid>,
    hs_ref: Vec<f64>,
    laplacian: DMatrix<f64>,
    factor: Option<(f64, LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
    dt: f64,
}

impl FlowSolver {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(config.build_grid()?);
        Self::with_grid(config, grid)
    }

    pub fn with_grid(config: FlowConfig, grid: Arc<SphereGrid>) -> Result<Self> {
        config.validate()?;
        if grid.dim() != config.n || grid.topology() != config.topology {
            return Err(FlowError::InvalidArgument(
                "grid does not match the configuration".into(),
            ));
        }
        let params = config.params()?;
        let hs_ref = hs_reference(&grid, &params, config.hs_ref_mode)?;
        let laplacian = laplacian_matrix(&grid, &params)?;
        let rule = HomotopyRule::gauss_legendre(config.homotopy_order);
        let dt = config.dt.min(Self::stability_dt(&grid, config.s));
        Ok(FlowSolver {
            config,
            params,
            rule,
            grid,
            hs_ref,
            laplacian,
            factor: None,
            dt,
        })
    }

    /// Initial time-step bound `0.5 h^{1+s}`.
    pub fn stability_dt(grid: &SphereGrid, s: f64) -> f64 {
        0.5 * grid.spacing().powf(1.0 + s)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn rule(&self) -> &HomotopyRule {
        &self.rule
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn hs_ref(&self) -> &[f64] {
        &self.hs_ref
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Current step size (after any rejections).
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Overrides the reference curvature (e.g. to zero the source in tests).
    pub fn set_hs_ref(&mut self, hs_ref: Vec<f64>) -> Result<()> {
        if hs_ref.len() != self.grid.len() {
            return Err(FlowError::LengthMismatch {
                expected: self.grid.len(),
                got: hs_ref.len(),
            });
        }
        self.hs_ref = hs_ref;
        Ok(())
    }

    fn factor(&mut self, dt: f64) -> Result<&LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let fresh = !matches!(&self.factor, Some((d, _)) if *d == dt);
        if fresh {
            let n = self.grid.len();
            let m = DMatrix::<f64>::identity(n, n) - &self.laplacian * dt;
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(FlowError::SingularSystem);
            }
            self.factor = Some((dt, lu));
        }
        Ok(&self.factor.as_ref().expect("factor set").1)
    }

    /// Solves `(I - dt L) u = rhs`.
    pub fn implicit_solve(&mut self, rhs: &[f64], dt: f64) -> Result<Vec<f64>> {
        if rhs.len() != self.grid.len() {
            return Err(FlowError::LengthMismatch {
                expected: self.grid.len(),
                got: rhs.len(),
            });
        }
        let lu = self.factor(dt)?;
        let b = DVector::from_column_slice(rhs);
        let x = lu.solve(&b).ok_or(FlowError::SingularSystem)?;
        Ok(x.iter().copied().collect())
    }

    /// One backward-Euler step of the linear fractional heat equation with a
    /// given source: `(I - dt L) u = u0 + dt * source`.
    pub fn linear_step(&mut self, u0: &[f64], source: &[f64], dt: f64) -> Result<Vec<f64>> {
        if source.len() != u0.len() {
            return Err(FlowError::LengthMismatch {
                expected: u0.len(),
                got: source.len(),
            });
        }
        let rhs: Vec<f64> = u0.iter().zip(source).map(|(u, f)| u + dt * f).collect();
        self.implicit_solve(&rhs, dt)
    }

    /// Right-hand-side parts for the current reference curvature.
    pub fn rhs_parts(&self, rho: &RadialField) -> Result<RhsParts> {
        rhs_parts(rho, &self.params, &self.rule, &self.hs_ref)
    }

    fn project(&self, values: Vec<f64>) -> Result<Vec<f64>> {
        match self.grid.topology() {
            Topology::Hemisphere => project_boundary(
                &self.grid,
                values,
                self.config.theta.cos(),
                self.config.bc_tol,
            ),
            Topology::FullSphere => Ok(values),
        }
    }

    /// Advances `rho` by exactly `dt`, or fails without side effects on the state.
    pub fn step_with_dt(&mut self, rho: &RadialField, dt: f64) -> Result<(RadialField, usize)> {
        let grid = self.grid.clone();
        let mut hat = rho.clone();
        let mut frozen: Option<Remainders> = None;
        let mut mixer = Anderson::new(self.config.anderson_depth);
        let mut change = f64::INFINITY;
        for k in 1..=self.config.max_picard {
            check_injective(&hat)?;
            let rem = match (&frozen, self.config.refresh_remainders) {
                (Some(r), false) => r.clone(),
                _ => remainders(&hat, &self.params, &self.rule)?,
            };
            if !self.config.refresh_remainders && frozen.is_none() {
                frozen = Some(rem.clone());
            }
            let parts = RhsParts::build(&hat, &self.params, &self.hs_ref, rem)?;
            let source: Vec<f64> = parts
                .p
                .iter()
                .zip(&self.hs_ref)
                .map(|(p, h)| p - h)
                .collect();
            let solved = self.linear_step(rho.values(), &source, dt)?;
            let projected = self.project(solved)?;
            let next = mixer.mix(hat.values(), &projected);
            let next = self.project(next)?;
            change = next
                .iter()
                .zip(hat.values())
                .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
            hat = RadialField::new(grid.clone(), next)?;
            if change < self.config.picard_tol {
                return Ok((hat, k));
            }
        }
        Err(FlowError::PicardNonConvergence {
            iterations: self.config.max_picard,
            change,
        })
    }

    /// One accepted step from `state`, halving `dt` on rejection.
    pub fn step(&mut self, state: &FlowState) -> Result<(FlowState, StepRecord)> {
        self.step_until(state, f64::INFINITY)
    }

    fn step_until(&mut self, state: &FlowState, t_stop: f64) -> Result<(FlowState, StepRecord)> {
        let mut rejections = 0;
        loop {
            let dt = self.dt.min(t_stop - state.t);
            match self.step_with_dt(&state.rho, dt) {
                Ok((rho, iterations)) => {
                    let rate = volume_rate(&state.rho, &rho, dt);
                    let new_state = FlowState::new(state.t + dt, rho, self.config.theta);
                    let balance =
                        (new_state.diagnostics.volume - state.diagnostics.volume) / dt - rate;
                    let record = StepRecord {
                        t: new_state.t,
                        volume: new_state.diagnostics.volume,
                        oscillation: new_state.oscillation(),
                        max_bc_residual: new_state.diagnostics.max_bc_residual,
                        picard_iterations: iterations,
                        dt_used: dt,
                        rejections,
                        volume_balance: balance,
                        volume_rate: rate,
                    };
                    return Ok((new_state, record));
                }
                Err(err) if is_retryable(&err) && rejections < MAX_HALVINGS => {
                    rejections += 1;
                    self.dt *= 0.5;
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Runs from `rho0` to `t_end`, calling `observer` after every accepted step.
    pub fn run_with<F>(&mut self, rho0: RadialField, mut observer: F) -> Result<FlowState>
    where
        F: FnMut(&FlowState, Option<&StepRecord>) -> Result<()>,
    {
        let rho0 = match self.grid.topology() {
            Topology::Hemisphere => apply_bc(&rho0, self.config.theta, self.config.bc_tol)?,
            Topology::FullSphere => rho0,
        };
        let mut state = FlowState::new(0.0, rho0, self.config.theta);
        observer(&state, None)?;
        let t_end = self.config.t_end;
        while state.t < t_end * (1.0 - 1e-12) {
            let (next, record) = self.step_until(&state, t_end)?;
            state = next;
            observer(&state, Some(&record))?;
            if state.rho.min() < EXTINCTION_RADIUS {
                return Err(FlowError::Extinction {
                    min_radius: state.rho.min(),
                    threshold: EXTINCTION_RADIUS,
                });
            }
        }
        Ok(state)
    }

    /// Runs and collects every state.
    pub fn run(&mut self, rho0: RadialField) -> Result<Trajectory> {
        let mut traj = Trajectory::default();
        self.run_with(rho0, |state, record| {
            traj.states.push(state.clone());
            if let Some(r) = record {
                traj.records.push(r.clone());
            }
            Ok(())
        })?;
        Ok(traj)
    }
}

fn is_retryable(err: &FlowError) -> bool {
    matches!(
        err,
        FlowError::PicardNonConvergence { .. }
            | FlowError::Degenerate { .. }
            | FlowError::NonPositiveRadius { .. }
            | FlowError::BoundaryNewton { .. }
    )
}

/// Runs the flow from `rho0` with a fresh solver.
pub fn run_flow(rho0: RadialField, config: &FlowConfig) -> Result<Trajectory> {
    let mut solver = FlowSolver::with_grid(config.clone(), rho0.grid_arc().clone())?;
    solver.run(rho0)
}

/// Anderson mixing for the fixed-point map `x -> G(x)`.
struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    df: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            prev: None,
            df: Vec::new(),
            dg: Vec::new(),
        }
    }

    fn mix(&mut self, x: &[f64], gx: &[f64]) -> Vec<f64> {
        if self.depth == 0 {
            return gx.to_vec();
        }
        let f: Vec<f64> = gx.iter().zip(x).map(|(g, x)| g - x).collect();
        if let Some((f_prev, g_prev)) = self.prev.take() {
            self.df
                .push(f.iter().zip(&f_prev).map(|(a, b)| a - b).collect());
            self.dg
                .push(gx.iter().zip(&g_prev).map(|(a, b)| a - b).collect());
            if self.df.len() > self.depth {
                self.df.remove(0);
                self.dg.remove(0);
            }
        }
        self.prev = Some((f.clone(), gx.to_vec()));
        let m = self.df.len();
        if m == 0 {
            return gx.to_vec();
        }
        let n = f.len();
        let a = DMatrix::from_fn(n, m, |i, j| self.df[j][i]);
        let b = DVector::from_column_slice(&f);
        let gamma = match a.svd(true, true).solve(&b, 1e-12) {
            Ok(g) => g,
            Err(_) => return gx.to_vec(),
        };
        let mut out = gx.to_vec();
        for j in 0..m {
            for (o, d) in out.iter_mut().zip(&self.dg[j]) {
                *o -= gamma[j] * d;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn hemi(n: usize) -> Arc<SphereGrid> {
        Arc::new(SphereGrid::build(1, n, Topology::Hemisphere).unwrap())
    }

    #[test]
    fn prefactor_normal_jacobian_basics() {
        let g = hemi(65);
        let c = RadialField::constant(g.clone(), 1.7).unwrap();
        for i in 0..65 {
            assert_eq!(prefactor_a(&c, i).unwrap(), 1.0);
            assert!((unit_normal(&c, i).unwrap() - g.node(i)).norm() < 1e-14);
            assert_relative_eq!(jacobian_j(1.0, &c, i).unwrap(), 1.7, max_relative = 1e-14);
        }
        let one = RadialField::constant(g.clone(), 1.0).unwrap();
        assert_eq!(jacobian_j(0.3, &one, 5).unwrap(), 1.0);
        let tilted = RadialField::from_fn(g.clone(), |x| 1.0 + 0.1 * x[1]).unwrap();
        for i in 1..32 {
            let nu = unit_normal(&tilted, i).unwrap();
            assert!((nu.norm() - 1.0).abs() < 1e-12);
            assert!(nu.dot(g.node(i)) > 0.0);
            let tau = Vec3::new(-g.angle(i).sin(), g.angle(i).cos(), 0.0);
            assert!(nu.dot(&tau) < 0.0);
        }
    }

    #[test]
    fn prefactor_unit_gradient() {
        let g = hemi(129);
        // rho = 1 and rho' = 1 at the pole
        let f = |phi: f64| 1.0 + 0.9 * ((phi - 0.5 * PI) / 0.9).sin();
        let rho = RadialField::new(g.clone(), (0..129).map(|i| f(g.angle(i))).collect()).unwrap();
        assert_eq!(rho.value(64), 1.0);
        assert_relative_eq!(
            prefactor_a(&rho, 64).unwrap(),
            2f64.sqrt(),
            max_relative = 1e-4
        );
    }

    #[test]
    fn prefactor_matches_analytic_gradient() {
        let err = |n: usize| {
            let g = hemi(n);
            let rho = RadialField::new(
                g.clone(),
                (0..n)
                    .map(|i| 1.0 + 0.05 * (2.0 * g.angle(i)).cos())
                    .collect(),
            )
            .unwrap();
            (0..n)
                .map(|i| {
                    let phi = g.angle(i);
                    let r = 1.0 + 0.05 * (2.0 * phi).cos();
                    let d = -0.1 * (2.0 * phi).sin();
                    (prefactor_a(&rho, i).unwrap() - (r * r + d * d).sqrt() / r).abs()
                })
                .fold(0.0, f64::max)
        };
        let (a, b) = (err(65), err(129));
        assert!(a / b > 3.5, "{a} {b}");
    }

    #[test]
    fn jacobian_integrates_to_polyline_length() {
        let g = hemi(513);
        let rho =
            RadialField::from_fn(g.clone(), |x| 1.0 + 0.1 * x[1] + 0.05 * x[0] * x[0]).unwrap();
        let jac: Vec<f64> = (0..513)
            .map(|i| jacobian_j(1.0, &rho, i).unwrap())
            .collect();
        let length = g.quad_integrate(&jac).unwrap();
        let fine = hemi(8193);
        let f =
            RadialField::from_fn(fine.clone(), |x| 1.0 + 0.1 * x[1] + 0.05 * x[0] * x[0]).unwrap();
        let poly: f64 = (1..8193)
            .map(|i| (f.image(i) - f.image(i - 1)).norm())
            .sum();
        assert!((length - poly).abs() < 1e-3 * poly, "{length} {poly}");
    }

    #[test]
    fn p_vanishes_for_unit_field_and_rearranges() {
        let g = hemi(65);
        let pr = KernelParams::new(0.5, 1).unwrap();
        let rule = HomotopyRule::default();
        let hs = hs_reference(&g, &pr, HsRefMode::HalfBall).unwrap();
        let one = RadialField::constant(g.clone(), 1.0).unwrap();
        assert!(remainder_p(&one, &pr, &rule, &hs)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-9));
        let rho = RadialField::from_fn(g.clone(), |x| 1.0 + 0.05 * x[1]).unwrap();
        let parts = rhs_parts(&rho, &pr, &rule, &hs).unwrap();
        let rhs = parts.rhs();
        for i in 0..65 {
            let lhs = parts.laplacian[i] - hs[i] + parts.p[i];
            assert!((rhs[i] - lhs).abs() <= 1e-12 * rhs[i].abs().max(1.0));
            let v = normal_velocity(&rho, rhs[i], i).unwrap();
            assert!((v - parts.neg_hs[i]).abs() <= 1e-10 * v.abs().max(1.0));
        }
    }

    #[test]
    fn p_is_first_order_in_amplitude() {
        let g = hemi(129);
        let pr = KernelParams::new(0.5, 1).unwrap();
        let rule = HomotopyRule::default();
        let hs = hs_reference(&g, &pr, HsRefMode::HalfBall).unwrap();
        let norms: Vec<f64> = [0.01, 0.02, 0.04]
            .iter()
            .map(|a| {
                let rho = RadialField::from_fn(g.clone(), |x| 1.0 + a * x[1]).unwrap();
                max_abs(&remainder_p(&rho, &pr, &rule, &hs).unwrap())
            })
            .collect();
        let slope = (norms[2] / norms[0]).ln() / 4f64.ln();
        assert!((slope - 1.0).abs() < 0.2, "{slope}");
    }

    #[test]
    fn bc_residual_cases() {
        let g = hemi(65);
        let c = RadialField::constant(g.clone(), 1.3).unwrap();
        assert!(bc_residual(&c, PI / 2.0)
            .unwrap()
            .iter()
            .all(|r| r.abs() < 1e-12));
        let one = RadialField::constant(g.clone(), 1.0).unwrap();
        for r in bc_residual(&one, PI / 3.0).unwrap() {
            assert!((r + 0.5).abs() < 1e-12);
        }
        let full = RadialField::constant(
            Arc::new(SphereGrid::build(1, 64, Topology::FullSphere).unwrap()),
            1.0,
        )
        .unwrap();
        assert!(bc_residual(&full, 1.0).is_err());
    }

    #[test]
    fn apply_bc_cases() {
        let g = hemi(65);
        let rho = RadialField::from_fn(g.clone(), |x| 1.0 + 0.1 * x[1] + 0.05 * x[0]).unwrap();
        let right = apply_bc(&rho, PI / 2.0, 1e-6).unwrap();
        assert!(bc_residual(&right, PI / 2.0)
            .unwrap()
            .iter()
            .all(|r| r.abs() < 1e-12));
        assert_relative_eq!(
            right.value(0),
            (4.0 * rho.value(1) - rho.value(2)) / 3.0,
            max_relative = 1e-13
        );
        for i in 1..64 {
            assert_eq!(right.value(i), rho.value(i));
        }
        let again = apply_bc(&right, PI / 2.0, 1e-6).unwrap();
        assert!((again.value(0) - right.value(0)).abs() < 1e-6);
        let one = RadialField::constant(g.clone(), 1.0).unwrap();
        let acute = apply_bc(&one, PI / 3.0, 1e-6).unwrap();
        assert!(bc_residual(&acute, PI / 3.0)
            .unwrap()
            .iter()
            .all(|r| r.abs() <= 1e-6));
        for b in g.boundary_nodes() {
            assert!(g.conormal_derivative(acute.values(), b).unwrap() > 0.0);
        }
        let obtuse = apply_bc(&one, 2.0 * PI / 3.0, 1e-6).unwrap();
        assert!(bc_residual(&obtuse, 2.0 * PI / 3.0)
            .unwrap()
            .iter()
            .all(|r| r.abs() <= 1e-6));
    }

    #[test]
    fn apply_bc_on_latlong_grid() {
        let g = Arc::new(SphereGrid::build(2, 16, Topology::Hemisphere).unwrap());
        let rho = RadialField::from_fn(g.clone(), |x| 1.0 + 0.1 * x[0] + 0.05 * x[2]).unwrap();
        let out = apply_bc(&rho, PI / 3.0, 1e-8).unwrap();
        assert!(bc_residual(&out, PI / 3.0)
            .unwrap()
            .iter()
            .all(|r| r.abs() <= 1e-8));
    }

    #[test]
    fn volume_rate_matches_difference_exactly() {
        let g = hemi(65);
        let a = RadialField::from_fn(g.clone(), |x| 1.0 + 0.1 * x[1]).unwrap();
        let b = RadialField::from_fn(g.clone(), |x| 0.97 + 0.08 * x[1] + 0.01 * x[0]).unwrap();
        let dt = 1e-3;
        let lhs = (volume(&b) - volume(&a)) / dt;
        assert!((lhs - volume_rate(&a, &b, dt)).abs() < 1e-8);
    }

    #[test]
    fn anderson_solves_linear_fixed_point() {
        // G(x) = M x + c with eigenvalues of M in (-1.8, 0.3): plain iteration diverges
        let n = 6;
        let diag = [-1.8, -1.2, -0.5, 0.0, 0.2, 0.3];
        let mut mixer = Anderson::new(6);
        let mut x = vec![0.0; n];
        for _ in 0..40 {
            let gx: Vec<f64> = (0..n).map(|i| diag[i] * x[i] + 1.0).collect();
            x = mixer.mix(&x, &gx);
        }
        for i in 0..n {
            assert!((x[i] - 1.0 / (1.0 - diag[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = FlowConfig::default();
        assert!(c.validate().is_ok());
        c.s = 1.2;
        assert_eq!(
            c.validate().unwrap_err(),
            FlowError::InvalidArgument("s must lie in (0,1)".into())
        );
        c.s = 0.5;
        c.theta = 0.0;
        assert_eq!(
            c.validate().unwrap_err(),
            FlowError::InvalidArgument("theta must lie in (0,pi)".into())
        );
        c.theta = 1.0;
        c.topology = Topology::FullSphere;
        assert!(c.validate().is_err());
    }

    #[test]
    fn maximum_principle_of_linear_step() {
        let mut config = FlowConfig::default();
        config.resolution = 65;
        let mut solver = FlowSolver::new(config).unwrap();
        let zero = vec![0.0; 65];
        let u0: Vec<f64> = (0..65)
            .map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.4)
            .collect();
        let u = solver.linear_step(&u0, &zero, 1e-2).unwrap();
        assert!(max_abs(&u) <= max_abs(&u0) + 1e-12);
    }

    #[test]
    fn uniform_circle_step_follows_scaling_law() {
        let mut config = FlowConfig::default();
        config.topology = Topology::FullSphere;
        config.hs_ref_mode = HsRefMode::FullSphere;
        config.resolution = 128;
        config.dt = 1e-4;
        let mut solver = FlowSolver::new(config.clone()).unwrap();
        let r = 0.9;
        let rho = RadialField::constant(solver.grid().clone(), r).unwrap();
        let state = FlowState::new(0.0, rho, config.theta);
        let (next, _) = solver.step(&state).unwrap();
        let c = solver.hs_ref()[0];
        let dt = next.t;
        let expected = r - dt * c * r.powf(-0.5);
        let spread = next.rho.max() - next.rho.min();
        assert!(spread < 1e-8, "{spread}");
        // backward Euler differs from the exact ODE at O(dt^2)
        assert!(
            (next.rho.value(0) - expected).abs() < 10.0 * dt * dt * c * c,
            "{} {}",
            next.rho.value(0),
            expected
        );
    }
}
