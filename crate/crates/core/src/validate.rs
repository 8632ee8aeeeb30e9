//! Oracle suites behind `capflow validate`.

use std::fmt;
use std::sync::Arc;

use crate::diagnostics::{
    divergence_identity_max, interpolation_check, trig_family, weakly_singular_bound,
};
use crate::error::{FlowError, Result};
use crate::flow::{FlowConfig, FlowSolver, HsRefMode, StepRecord};
use crate::geometry::{RadialField, SphereGrid, Topology};
use crate::nonlocal::{
    circle_constant_exact, divergence_oracle_all, homotopy_integral, hs_reference,
    kernel_bound_check, parametrized_hs_all, ClosedSurface, HomotopyRule, KernelParams,
};

pub const SUITES: &[&str] = &[
    "m1-identity",
    "scaling",
    "shrinking-circle",
    "bc",
    "identities",
];

/// What a check compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Two discretizations of the same exact identity.
    Identity,
    /// Closed-form or independently computed reference.
    Analytic,
    /// Behaviour under grid refinement.
    Refinement,
    /// Bound or monotonicity.
    Bound,
}

impl CheckKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckKind::Identity => "identity",
            CheckKind::Analytic => "analytic",
            CheckKind::Refinement => "refinement",
            CheckKind::Bound => "bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub kind: CheckKind,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(
        name: impl Into<String>,
        measured: f64,
        tolerance: f64,
        kind: CheckKind,
    ) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            kind,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(f, "suite {}", self.suite)?;
        writeln!(
            f,
            "{:<w$}  {:>12}  {:>12}  {:<10}  result",
            "check", "measured", "tolerance", "kind"
        )?;
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{:<w$}  {:>12.4e}  {:>12.4e}  {:<10}  {verdict}",
                c.name,
                c.measured,
                c.tolerance,
                c.kind.as_str()
            )?;
        }
        write!(
            f,
            "{}",
            if self.passed() {
                "all checks passed"
            } else {
                "some checks failed"
            }
        )
    }
}

/// Default resolution of each suite.
pub fn default_resolution(suite: &str) -> Option<usize> {
    match suite {
        "m1-identity" | "scaling" | "identities" => Some(512),
        "shrinking-circle" | "bc" => Some(256),
        _ => None,
    }
}

pub fn run_suite(suite: &str, resolution: Option<usize>) -> Result<Report> {
    let res = resolution
        .or_else(|| default_resolution(suite))
        .ok_or_else(|| {
            FlowError::InvalidArgument(format!(
                "unknown suite {suite}; available: {}",
                SUITES.join(", ")
            ))
        })?;
    let checks = match suite {
        "m1-identity" => homotopy_suite(res)?,
        "scaling" => scaling_suite(res)?,
        "shrinking-circle" => shrinking_suite(res)?,
        "bc" => bc_suite(res)?,
        "identities" => identities_suite(res)?,
        _ => unreachable!(),
    };
    Ok(Report {
        suite: suite.to_string(),
        checks,
    })
}

/// Perturbations of the unit field: three shapes at amplitudes 0.01, 0.05, 0.1.
pub fn homotopy_fields(grid: &Arc<SphereGrid>) -> Result<Vec<(String, RadialField)>> {
    let up = grid.up_axis();
    let shapes: [(&str, fn(&crate::geometry::Vec3, usize) -> f64); 3] = [
        ("height", |x, up| x[up]),
        ("mode2", |x, up| x[0] * x[0] - x[up] * x[up]),
        ("cubic", |x, _| x[0] * x[0] * x[0]),
    ];
    let mut out = Vec::new();
    for (name, shape) in shapes {
        for a in [0.01, 0.05, 0.1] {
            let rho = RadialField::from_fn(grid.clone(), |x| 1.0 + a * shape(x, up))?;
            out.push((format!("{name} a={a}"), rho));
        }
    }
    Ok(out)
}

/// `max |parametrized + H_ref - int hd| / max |parametrized|`.
pub fn homotopy_residual(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<f64> {
    let parts = parametrized_hs_all(rho, params, rule, hs_ref)?;
    let hd = homotopy_integral(rho, params, rule)?;
    let scale = parts.neg_hs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let err = (0..hd.len()).fold(0.0_f64, |m, i| {
        m.max((parts.neg_hs[i] + hs_ref[i] - hd[i]).abs())
    });
    Ok(err / scale)
}

/// Worst homotopy identity residual over [`homotopy_fields`] on a hemisphere of `res` nodes.
pub fn homotopy_worst(res: usize, s: f64) -> Result<f64> {
    let grid = Arc::new(SphereGrid::build(1, res, Topology::Hemisphere)?);
    let params = KernelParams::new(s, 1)?;
    let rule = HomotopyRule::default();
    let hs_ref = hs_reference(&grid, &params, HsRefMode::HalfBall)?;
    let mut worst: f64 = 0.0;
    for (_, rho) in homotopy_fields(&grid)? {
        worst = worst.max(homotopy_residual(&rho, &params, &rule, &hs_ref)?);
    }
    Ok(worst)
}

fn homotopy_suite(res: usize) -> Result<Vec<Check>> {
    let coarse = homotopy_worst(res, 0.5)?;
    let fine = homotopy_worst(2 * res, 0.5)?;
    Ok(vec![
        Check::at_most(
            format!("homotopy identity residual, {res} nodes"),
            coarse,
            1e-3,
            CheckKind::Identity,
        ),
        Check::at_most(
            format!("homotopy identity residual, {} nodes", 2 * res),
            fine,
            1e-3,
            CheckKind::Identity,
        ),
    ])
}

/// Worst relative deviation from `H(R) = R^{-s} H(1)` over circles of radius 0.8, 1, 1.25.
pub fn dilation_error(res: usize, s: f64) -> Result<f64> {
    let params = KernelParams::new(s, 1)?;
    let unit = divergence_oracle_all(&ClosedSurface::circle(res, 1.0)?, &params)?;
    let mut worst: f64 = 0.0;
    for r in [0.8, 1.0, 1.25] {
        let h = divergence_oracle_all(&ClosedSurface::circle(res, r)?, &params)?;
        for (a, b) in h.iter().zip(&unit) {
            let expect = r.powf(-s) * b;
            worst = worst.max((a - expect).abs() / expect.abs());
        }
    }
    Ok(worst)
}

fn scaling_suite(res: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for s in [0.3, 0.5, 0.7] {
        checks.push(Check::at_most(
            format!("dilation law s={s}"),
            dilation_error(res, s)?,
            1e-3,
            CheckKind::Identity,
        ));
        let params = KernelParams::new(s, 1)?;
        let h = divergence_oracle_all(&ClosedSurface::circle(res, 1.0)?, &params)?;
        let exact = circle_constant_exact(s);
        checks.push(Check::at_most(
            format!("unit circle constant s={s}"),
            (h[0] - exact).abs() / exact,
            1e-3,
            CheckKind::Analytic,
        ));
    }
    Ok(checks)
}

/// Outcome of the shrinking-circle run.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkingCircle {
    /// Oracle constant at 2048 nodes.
    pub c: f64,
    /// Worst relative deviation of the mean radius from the similarity law.
    pub worst_radius_error: f64,
    pub final_radius: f64,
    pub records: Vec<StepRecord>,
}

/// Mean radius under `R(t) = (1 - 1.5 c t)^{1/1.5}`, with `c = H^s` of the unit
/// circle, for `s = 0.5`.
pub fn shrinking_circle(res: usize, dt: f64, r_stop: f64) -> Result<ShrinkingCircle> {
    let s = 0.5;
    let params = KernelParams::new(s, 1)?;
    let c = divergence_oracle_all(&ClosedSurface::circle(2048, 1.0)?, &params)?[0];
    let q = 1.0 + s;
    let law = |t: f64| (1.0 - q * c * t).max(0.0).powf(1.0 / q);
    let t_end = (1.0 - r_stop.powf(q)) / (q * c);
    let config = FlowConfig {
        s,
        dt,
        t_end,
        resolution: res,
        topology: Topology::FullSphere,
        hs_ref_mode: HsRefMode::FullSphere,
        ..FlowConfig::default()
    };
    let mut solver = FlowSolver::new(config)?;
    let rho0 = RadialField::constant(solver.grid().clone(), 1.0)?;
    let mut worst: f64 = 0.0;
    let mut records = Vec::new();
    let last = solver.run_with(rho0, |state, rec| {
        let mean = state.rho.values().iter().sum::<f64>() / state.rho.values().len() as f64;
        let r = law(state.t);
        worst = worst.max((mean - r).abs() / r);
        if let Some(rec) = rec {
            records.push(rec.clone());
        }
        Ok(())
    })?;
    Ok(ShrinkingCircle {
        c,
        worst_radius_error: worst,
        final_radius: last.rho.min(),
        records,
    })
}

fn shrinking_suite(res: usize) -> Result<Vec<Check>> {
    let run = shrinking_circle(res, 2.5e-4, 0.5)?;
    let balance = run
        .records
        .iter()
        .fold(0.0_f64, |m, r| m.max(r.volume_balance.abs()));
    let rises = run
        .records
        .windows(2)
        .filter(|w| w[1].volume >= w[0].volume)
        .count();
    Ok(vec![
        Check::at_most(
            "radius vs similarity law",
            run.worst_radius_error,
            1e-2,
            CheckKind::Analytic,
        ),
        Check::at_most(
            "final radius reaches 0.5",
            run.final_radius - 0.5,
            1e-3,
            CheckKind::Bound,
        ),
        Check::at_most("volume balance", balance, 1e-8, CheckKind::Identity),
        Check::at_most("volume increases", rises as f64, 0.0, CheckKind::Bound),
    ])
}

/// Largest boundary residual over `steps` steps from the unit field on a
/// hemisphere of `res` nodes.
pub fn capillary_run(res: usize, theta: f64, dt: f64, steps: usize) -> Result<Vec<StepRecord>> {
    let config = FlowConfig {
        theta,
        dt,
        t_end: dt * steps as f64,
        resolution: res,
        ..FlowConfig::default()
    };
    let mut solver = FlowSolver::new(config)?;
    let rho0 = RadialField::constant(solver.grid().clone(), 1.0)?;
    Ok(solver.run(rho0)?.records)
}

/// Worst node-wise relative difference between a hemisphere run with right
/// contact angle and the full-circle run of the reflected data.
pub fn reflected_comparison(
    full_res: usize,
    dt: f64,
    steps: usize,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let hemi_res = full_res / 2 + 1;
    let base = FlowConfig {
        dt,
        t_end: dt * steps as f64,
        hs_ref_mode: HsRefMode::FullSphere,
        ..FlowConfig::default()
    };
    let run = |topology, res| -> Result<Vec<Vec<f64>>> {
        let mut solver = FlowSolver::new(FlowConfig {
            topology,
            resolution: res,
            ..base.clone()
        })?;
        let g = solver.grid().clone();
        let rho0 = RadialField::new(g.clone(), (0..g.len()).map(|i| f(g.angle(i))).collect())?;
        Ok(solver
            .run(rho0)?
            .states
            .into_iter()
            .map(|s| s.rho.into_values())
            .collect())
    };
    let hemi = run(Topology::Hemisphere, hemi_res)?;
    let full = run(Topology::FullSphere, full_res)?;
    if hemi.len() != full.len() {
        return Err(FlowError::InvalidArgument(
            "runs took different step sequences".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for (h, g) in hemi.iter().zip(&full) {
        for i in 0..h.len() {
            worst = worst.max((h[i] - g[i]).abs() / g[i].abs());
        }
    }
    Ok(worst)
}

fn bc_suite(res: usize) -> Result<Vec<Check>> {
    use std::f64::consts::PI;
    let hemi_res = res / 2 + 1;
    let mut checks = Vec::new();
    for (label, theta) in [
        ("pi/3", PI / 3.0),
        ("pi/2", PI / 2.0),
        ("2pi/3", 2.0 * PI / 3.0),
    ] {
        let recs = capillary_run(hemi_res, theta, 2e-4, 10)?;
        let worst = recs.iter().fold(0.0_f64, |m, r| m.max(r.max_bc_residual));
        checks.push(Check::at_most(
            format!("boundary residual theta={label}"),
            worst,
            1e-6,
            CheckKind::Bound,
        ));
    }
    let diff = reflected_comparison(res, 2e-4, 50, |phi| 1.0 + 0.05 * (2.0 * phi).cos())?;
    checks.push(Check::at_most(
        "hemisphere vs reflected full circle",
        diff,
        5e-3,
        CheckKind::Identity,
    ));
    Ok(checks)
}

/// `rho = 1 + 0.05 cos 2 phi` on the full circle.
pub fn identity_test_field(res: usize) -> Result<RadialField> {
    let g = Arc::new(SphereGrid::build(1, res, Topology::FullSphere)?);
    let v = (0..g.len())
        .map(|i| 1.0 + 0.05 * (2.0 * g.angle(i)).cos())
        .collect();
    RadialField::new(g, v)
}

/// Worst interpolation ratio over the trigonometric family.
pub fn interpolation_worst(res: usize) -> Result<f64> {
    let g = SphereGrid::build(1, res, Topology::FullSphere)?;
    let mut worst: f64 = 0.0;
    for f in trig_family() {
        worst = worst.max(interpolation_check(&g, &f.sample(&g), 0.25, 0.75, 0.5)?.ratio);
    }
    Ok(worst)
}

fn identities_suite(res: usize) -> Result<Vec<Check>> {
    let params = KernelParams::new(0.5, 1)?;
    let coarse = divergence_identity_max(&identity_test_field(res / 2)?, &params)?;
    let fine = divergence_identity_max(&identity_test_field(res)?, &params)?;
    let weak = weakly_singular_bound(0.5, &[128, 256, 512, 1024])?;
    let rho = identity_test_field(res)?;
    let perturbed = RadialField::new(
        rho.grid_arc().clone(),
        (0..rho.grid().len())
            .map(|i| 1.0 + 0.3 * (3.0 * rho.grid().angle(i)).sin())
            .collect(),
    )?;
    let kb = kernel_bound_check(&perturbed, &params, 10_000, 7)?;
    Ok(vec![
        Check::at_most(
            format!("divergence identity {}/{} ratio", res, res / 2),
            fine / coarse,
            0.5,
            CheckKind::Refinement,
        ),
        Check::at_most(
            "weakly singular increment ratio",
            weak.max_ratio(),
            0.75,
            CheckKind::Refinement,
        ),
        Check::at_most(
            "weakly singular values not increasing",
            if weak.increasing() { 0.0 } else { 1.0 },
            0.0,
            CheckKind::Bound,
        ),
        Check::at_most(
            "interpolation ratio",
            interpolation_worst(res)?,
            10.0,
            CheckKind::Bound,
        ),
        Check::at_most(
            "kernel bound scaled by kappa",
            kb.max_scaled / kb.kappa,
            1.0,
            CheckKind::Bound,
        ),
    ])
}
