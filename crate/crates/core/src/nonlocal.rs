//! Singular integral operators on the hemisphere: the homotopy kernel family,
//! the principal-value fractional Laplacian, the remainder terms `R1`, `R2`,
//! the first-variation integrand, and closed-surface curvature oracles.
//!
//! All `y`-integrals share one punctured quadrature functional per grid
//! (see [`SphereGrid::punctured_sum`]); on `n = 1` grids it carries the local
//! singular correction for the `|y - x|^{-(n-1+s)}` even part of the
//! integrands.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::geometry::{LocalCorrection, RadialField, SphereGrid, Topology, Vec3};
use crate::quadrature::{gauss_legendre_unit, integrate_gl};

/// Minimum admissible [`injectivity_margin`].
pub const INJECTIVITY_MIN_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    s: f64,
    n: usize,
}

impl KernelParams {
    pub fn new(s: f64, n: usize) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(FlowError::InvalidArgument("s must lie in (0,1)".into()));
        }
        if !(1..=2).contains(&n) {
            return Err(FlowError::InvalidArgument(format!(
                "n must be 1 or 2, got {n}"
            )));
        }
        Ok(KernelParams { s, n })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Kernel decay power `n + 1 + s`.
    pub fn p(&self) -> f64 {
        self.n as f64 + 1.0 + self.s
    }

    /// Order of the even singular part `|y - x|^{-(n-1+s)}` left after pairing.
    pub fn beta(&self) -> f64 {
        self.n as f64 - 1.0 + self.s
    }
}

/// Tensor Gauss–Legendre rule for the homotopy variables `t'` in `[0,1]` and
/// `xi` in `[0,t']`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyRule {
    t_nodes: Vec<f64>,
    t_weights: Vec<f64>,
    xi_nodes: Vec<f64>,
    xi_weights: Vec<f64>,
}

impl Default for HomotopyRule {
    fn default() -> Self {
        Self::gauss_legendre(8)
    }
}

impl HomotopyRule {
    pub fn gauss_legendre(order: usize) -> Self {
        let (t_nodes, t_weights) = gauss_legendre_unit(order);
        HomotopyRule {
            xi_nodes: t_nodes.clone(),
            xi_weights: t_weights.clone(),
            t_nodes,
            t_weights,
        }
    }

    pub fn order(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn t_nodes(&self) -> &[f64] {
        &self.t_nodes
    }

    pub fn t_weights(&self) -> &[f64] {
        &self.t_weights
    }

    /// `(xi, weight)` pairs of the inner rule on `[0, t]`.
    pub fn xi_rule(&self, t: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xi_nodes
            .iter()
            .zip(&self.xi_weights)
            .map(move |(x, w)| (x * t, w * t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HsRefMode {
    /// Boundary curvature of the unit half-ball (free hemisphere plus wetted disk).
    HalfBall,
    /// The constant curvature of the unit sphere.
    FullSphere,
}

impl HsRefMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HsRefMode::HalfBall => "half-ball",
            HsRefMode::FullSphere => "full-sphere",
        }
    }
}

impl std::str::FromStr for HsRefMode {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-ball" => Ok(HsRefMode::HalfBall),
            "full-sphere" => Ok(HsRefMode::FullSphere),
            other => Err(FlowError::InvalidArgument(format!(
                "unknown hs_ref_mode `{other}` (expected half-ball or full-sphere)"
            ))),
        }
    }
}

fn check_grid(grid: &SphereGrid, params: &KernelParams) -> Result<()> {
    if grid.dim() != params.n() {
        return Err(FlowError::InvalidArgument(format!(
            "grid dimension {} does not match kernel dimension {}",
            grid.dim(),
            params.n()
        )));
    }
    Ok(())
}

fn check_len(grid: &SphereGrid, u: &[f64]) -> Result<()> {
    if u.len() != grid.len() {
        return Err(FlowError::LengthMismatch {
            expected: grid.len(),
            got: u.len(),
        });
    }
    Ok(())
}

/// Squared image distance `|Phi(y) - Phi(x)|^2` from radial factors and the chord.
#[inline]
fn image_dist2(cy: f64, cx: f64, chord: f64) -> f64 {
    let dc = cy - cx;
    dc * dc + cy * cx * chord * chord
}

/// `K_{xi rho}(y, x)` and `d/dxi {[1 + xi(rho(y)-1)]^n K_{xi rho}(y, x)}` for
/// `a_y = rho(y) - 1`, `a_x = rho(x) - 1`.
#[inline]
fn kernel_pair(xi: f64, ay: f64, ax: f64, chord: f64, n: i32, p: f64) -> (f64, f64) {
    let cy = 1.0 + xi * ay;
    let cx = 1.0 + xi * ax;
    let d2 = image_dist2(cy, cx, chord);
    let k = d2.powf(-0.5 * p);
    // (Phi(y) - Phi(x)) . ((rho(y)-1) y - (rho(x)-1) x), written in chord form
    let de = (cy - cx) * (ay - ax) + 0.5 * (cy * ax + cx * ay) * chord * chord;
    let cyn1 = cy.powi(n - 1);
    let dk = n as f64 * ay * cyn1 * k - cyn1 * cy * p * de * k / d2;
    (k, dk)
}

/// `K_{xi rho}(y, x) = |Phi_{xi rho}(y) - Phi_{xi rho}(x)|^{-(n+1+s)}`.
pub fn kernel_k(
    xi: f64,
    rho: &RadialField,
    y: usize,
    x: usize,
    params: &KernelParams,
) -> Result<f64> {
    if y == x {
        return Err(FlowError::Singularity(x));
    }
    let chord = rho.grid().chord(y, x);
    let d2 = image_dist2(
        1.0 + xi * (rho.value(y) - 1.0),
        1.0 + xi * (rho.value(x) - 1.0),
        chord,
    );
    Ok(d2.powf(-0.5 * params.p()))
}

/// `d/dxi {[1 + xi(rho(y)-1)]^n K_{xi rho}(y, x)}` in closed form.
pub fn kernel_k_dxi(
    xi: f64,
    rho: &RadialField,
    y: usize,
    x: usize,
    params: &KernelParams,
) -> Result<f64> {
    if y == x {
        return Err(FlowError::Singularity(x));
    }
    let chord = rho.grid().chord(y, x);
    let (_, dk) = kernel_pair(
        xi,
        rho.value(y) - 1.0,
        rho.value(x) - 1.0,
        chord,
        params.n() as i32,
        params.p(),
    );
    Ok(dk)
}

/// `psi(x) = int (y - x) K(y, x) dH_y` with jointly summed symmetric pairs.
pub fn first_moment_psi<K: Fn(usize) -> f64>(
    grid: &SphereGrid,
    x: usize,
    params: &KernelParams,
    kernel: K,
) -> Vec3 {
    let corr = grid.local_correction(params.beta());
    let xv = grid.node(x);
    grid.punctured_sum(x, corr, |j| (grid.node(j) - xv) * kernel(j))
}

/// Principal-value fractional Laplacian `2 int (u(y) - u(x)) |x - y|^{-(n+1+s)}`
/// at node `x`, by first-order Taylor subtraction plus the first-moment term.
pub fn frac_laplacian(
    grid: &SphereGrid,
    u: &[f64],
    x: usize,
    params: &KernelParams,
) -> Result<f64> {
    check_grid(grid, params)?;
    check_len(grid, u)?;
    Ok(frac_laplacian_at(
        grid,
        u,
        x,
        params,
        grid.local_correction(params.beta()),
    ))
}

fn frac_laplacian_at(
    grid: &SphereGrid,
    u: &[f64],
    x: usize,
    params: &KernelParams,
    corr: Option<LocalCorrection>,
) -> f64 {
    let p = params.p();
    let g = grid.gradient_at(x, |j| u[j]);
    let xv = grid.node(x);
    let ux = u[x];
    let residual: f64 = grid.punctured_sum(x, corr, |j| {
        let k = grid.chord(j, x).powf(-p);
        2.0 * (u[j] - ux - g.dot(&(grid.node(j) - xv))) * k
    });
    let psi = first_moment_psi(grid, x, params, |j| grid.chord(j, x).powf(-p));
    residual + 2.0 * g.dot(&psi)
}

/// Fractional Laplacian at every node.
pub fn frac_laplacian_all(grid: &SphereGrid, u: &[f64], params: &KernelParams) -> Result<Vec<f64>> {
    check_grid(grid, params)?;
    check_len(grid, u)?;
    let corr = grid.local_correction(params.beta());
    Ok((0..grid.len())
        .into_par_iter()
        .map(|x| frac_laplacian_at(grid, u, x, params, corr))
        .collect())
}

/// Dense matrix of the discrete fractional Laplacian: `L u = frac_laplacian_all(u)`.
///
/// Off-diagonal entries are nonnegative and every row sums to zero.
pub fn laplacian_matrix(grid: &SphereGrid, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_grid(grid, params)?;
    let n = grid.len();
    let p = params.p();
    let corr = grid.local_correction(params.beta());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            let mut diag = 0.0;
            for (j, entry) in row.iter_mut().enumerate() {
                if j != i {
                    let w = 2.0 * grid.pair_weight(i, j, corr) * grid.chord(i, j).powf(-p);
                    *entry = w;
                    diag -= w;
                }
            }
            row[i] = diag;
            row
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Smallest image separation ratio `|Phi_{xi rho}(y) - Phi_{xi rho}(x)| / |y - x|`
/// over node pairs and `xi` in `[0, 1]`.
pub fn injectivity_ratio(rho: &RadialField) -> f64 {
    let grid = rho.grid();
    let n = grid.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let ai = rho.value(i) - 1.0;
            let mut worst = f64::INFINITY;
            for j in (i + 1)..n {
                let aj = rho.value(j) - 1.0;
                let c2 = grid.chord(i, j).powi(2);
                // ratio^2 = 1 + xi (ai + aj) + xi^2 ((ai - aj)^2 / c2 + ai aj)
                let lin = ai + aj;
                let quad = (ai - aj).powi(2) / c2 + ai * aj;
                let at = |xi: f64| 1.0 + xi * lin + xi * xi * quad;
                let mut m = at(1.0).min(1.0);
                if quad > 0.0 {
                    let v = -lin / (2.0 * quad);
                    if v > 0.0 && v < 1.0 {
                        m = m.min(at(v));
                    }
                }
                worst = worst.min(m);
            }
            worst
        })
        .reduce(|| f64::INFINITY, f64::min)
        .max(0.0)
        .sqrt()
}

/// [`injectivity_ratio`] divided by `min(1, max rho)`, so that a uniformly
/// shrunk surface keeps the margin of the original.
pub fn injectivity_margin(rho: &RadialField) -> f64 {
    injectivity_ratio(rho) / rho.max().min(1.0)
}

/// Fails with [`FlowError::Degenerate`] when [`injectivity_margin`] drops below
/// [`INJECTIVITY_MIN_RATIO`].
pub fn check_injective(rho: &RadialField) -> Result<f64> {
    let ratio = injectivity_margin(rho);
    if ratio < INJECTIVITY_MIN_RATIO {
        return Err(FlowError::Degenerate {
            ratio,
            min: INJECTIVITY_MIN_RATIO,
        });
    }
    Ok(ratio)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBoundReport {
    pub kappa: f64,
    pub max_scaled: f64,
    pub pairs: usize,
}

impl KernelBoundReport {
    pub fn passed(&self) -> bool {
        self.max_scaled <= self.kappa
    }
}

/// Samples `K_{xi rho}(y,x) |y - x|^{n+1+s}` on random node pairs and `xi`, and
/// compares against `kappa = (min separation ratio)^{-(n+1+s)}`.
pub fn kernel_bound_check(
    rho: &RadialField,
    params: &KernelParams,
    pairs: usize,
    seed: u64,
) -> Result<KernelBoundReport> {
    check_grid(rho.grid(), params)?;
    let ratio = injectivity_ratio(rho);
    if ratio <= 0.0 {
        return Err(FlowError::Degenerate {
            ratio,
            min: INJECTIVITY_MIN_RATIO,
        });
    }
    let p = params.p();
    let kappa = ratio.powf(-p);
    let n = rho.grid().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_scaled: f64 = 0.0;
    for _ in 0..pairs {
        let x = rng.gen_range(0..n);
        let mut y = rng.gen_range(0..n - 1);
        if y >= x {
            y += 1;
        }
        let xi: f64 = rng.gen_range(0.0..=1.0);
        let k = kernel_k(xi, rho, y, x, params)?;
        max_scaled = max_scaled.max(k * rho.grid().chord(y, x).powf(p));
    }
    Ok(KernelBoundReport {
        kappa,
        max_scaled,
        pairs,
    })
}

/// The two remainder terms at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Remainders {
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
}

fn remainders_at(
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
    rule: &HomotopyRule,
    corr: Option<LocalCorrection>,
) -> (f64, f64) {
    let grid = rho.grid();
    let grad = rho.gradient();
    let n = params.n() as i32;
    let p = params.p();
    let beta = params.beta();
    let ax = rho.value(x) - 1.0;
    let xv = grid.node(x);
    // components: R1 integrand, R2 first, R2 second, R2 third
    let sums: Vector4<f64> = grid.punctured_sum(x, corr, |j| {
        let ay = rho.value(j) - 1.0;
        let chord = grid.chord(j, x);
        let tangential = (grid.node(j) - xv).dot(&grad[j]);
        let mut inner = 0.0;
        let mut third = 0.0;
        for (&t, &wt) in rule.t_nodes.iter().zip(&rule.t_weights) {
            let mut acc = 0.0;
            for (xi, wxi) in rule.xi_rule(t) {
                acc += wxi * kernel_pair(xi, ay, ax, chord, n, p).1;
            }
            inner += wt * acc;
            if tangential != 0.0 {
                let cy = 1.0 + t * ay;
                let cx = 1.0 + t * ax;
                let k = image_dist2(cy, cx, chord).powf(-0.5 * p);
                third += wt * t * cy.powi(n - 1) * k;
            }
        }
        Vector4::new(
            2.0 * (ay - ax) * inner,
            chord.powf(-beta),
            chord * chord * inner,
            -2.0 * tangential * third,
        )
    });
    (sums[0], sums[1] + sums[2] + sums[3])
}

/// `R1` at node `x`.
pub fn remainder_r1(
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
    rule: &HomotopyRule,
) -> Result<f64> {
    check_grid(rho.grid(), params)?;
    check_injective(rho)?;
    Ok(remainders_at(
        rho,
        x,
        params,
        rule,
        rho.grid().local_correction(params.beta()),
    )
    .0)
}

/// `R2` at node `x`.
pub fn remainder_r2(
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
    rule: &HomotopyRule,
) -> Result<f64> {
    check_grid(rho.grid(), params)?;
    check_injective(rho)?;
    Ok(remainders_at(
        rho,
        x,
        params,
        rule,
        rho.grid().local_correction(params.beta()),
    )
    .1)
}

/// `R1` and `R2` at every node.
pub fn remainders(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
) -> Result<Remainders> {
    check_grid(rho.grid(), params)?;
    check_injective(rho)?;
    let corr = rho.grid().local_correction(params.beta());
    rho.gradient();
    let pairs: Vec<(f64, f64)> = (0..rho.grid().len())
        .into_par_iter()
        .map(|x| remainders_at(rho, x, params, rule, corr))
        .collect();
    let (r1, r2) = pairs.into_iter().unzip();
    Ok(Remainders { r1, r2 })
}

/// Unit outward normal of the homotopy surface `Phi_{t rho}` at the image of node `y`.
pub fn homotopy_normal(t: f64, rho: &RadialField, y: usize) -> Vec3 {
    let c = 1.0 + t * (rho.value(y) - 1.0);
    let g = rho.gradient()[y] * t;
    let v = rho.grid().node(y) * c - g;
    v / (c * c + g.norm_squared()).sqrt()
}

/// Jacobian `J_{Phi_{t rho}}` at node `y`.
pub fn homotopy_jacobian(t: f64, rho: &RadialField, y: usize, n: usize) -> f64 {
    let c = 1.0 + t * (rho.value(y) - 1.0);
    let g2 = (rho.gradient()[y] * t).norm_squared();
    c.powi(n as i32 - 1) * (c * c + g2).sqrt()
}

fn homotopy_derivative_at(
    t: f64,
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
    corr: Option<LocalCorrection>,
) -> f64 {
    let grid = rho.grid();
    let n = params.n();
    let p = params.p();
    let ax = rho.value(x) - 1.0;
    let xv = grid.node(x);
    let cx = 1.0 + t * ax;
    grid.punctured_sum(x, corr, |j| {
        let ay = rho.value(j) - 1.0;
        let yv = grid.node(j);
        let velocity = yv * ay - xv * ax;
        let nu = homotopy_normal(t, rho, j);
        let jac = homotopy_jacobian(t, rho, j, n);
        let cy = 1.0 + t * ay;
        let k = image_dist2(cy, cx, grid.chord(j, x)).powf(-0.5 * p);
        2.0 * velocity.dot(&nu) * k * jac
    })
}

/// `-d/dt' H^s` of the homotopy surface at `Phi_{t' rho}(x)` (first-variation form).
pub fn homotopy_derivative(
    t: f64,
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
) -> Result<f64> {
    check_grid(rho.grid(), params)?;
    check_injective(rho)?;
    Ok(homotopy_derivative_at(
        t,
        rho,
        x,
        params,
        rho.grid().local_correction(params.beta()),
    ))
}

/// `int_0^1 homotopy_derivative dt'` at every node, using the `t'` axis of `rule`.
pub fn homotopy_integral(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
) -> Result<Vec<f64>> {
    check_grid(rho.grid(), params)?;
    check_injective(rho)?;
    let corr = rho.grid().local_correction(params.beta());
    rho.gradient();
    Ok((0..rho.grid().len())
        .into_par_iter()
        .map(|x| {
            rule.t_nodes
                .iter()
                .zip(&rule.t_weights)
                .map(|(&t, &w)| w * homotopy_derivative_at(t, rho, x, params, corr))
                .sum()
        })
        .collect())
}

/// `-H^s` at `rho(x) x` assembled as `Delta rho - H_ref + R1 + R2 (rho - 1)`.
pub fn parametrized_hs(
    rho: &RadialField,
    x: usize,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<f64> {
    check_len(rho.grid(), hs_ref)?;
    let lap = frac_laplacian(rho.grid(), rho.values(), x, params)?;
    check_injective(rho)?;
    let (r1, r2) = remainders_at(
        rho,
        x,
        params,
        rule,
        rho.grid().local_correction(params.beta()),
    );
    Ok(lap - hs_ref[x] + r1 + r2 * (rho.value(x) - 1.0))
}

/// Parts of the parametrized curvature at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureParts {
    pub laplacian: Vec<f64>,
    pub remainders: Remainders,
    /// `Delta rho - H_ref + R1 + R2 (rho - 1)`, i.e. `-H^s` at the surface.
    pub neg_hs: Vec<f64>,
}

pub fn parametrized_hs_all(
    rho: &RadialField,
    params: &KernelParams,
    rule: &HomotopyRule,
    hs_ref: &[f64],
) -> Result<CurvatureParts> {
    check_len(rho.grid(), hs_ref)?;
    let laplacian = frac_laplacian_all(rho.grid(), rho.values(), params)?;
    let rem = remainders(rho, params, rule)?;
    let neg_hs = (0..rho.grid().len())
        .map(|i| laplacian[i] - hs_ref[i] + rem.r1[i] + rem.r2[i] * (rho.value(i) - 1.0))
        .collect();
    Ok(CurvatureParts {
        laplacian,
        remainders: rem,
        neg_hs,
    })
}

/// Samples of a closed hypersurface over a full-sphere parameter grid.
#[derive(Debug, Clone)]
pub struct ClosedSurface {
    grid: Arc<SphereGrid>,
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    jacobian: Vec<f64>,
}

impl ClosedSurface {
    /// Builds a surface from explicit samples; `jacobian` is the area element
    /// relative to the parameter grid measure.
    pub fn new(
        grid: Arc<SphereGrid>,
        points: Vec<Vec3>,
        normals: Vec<Vec3>,
        jacobian: Vec<f64>,
    ) -> Result<Self> {
        if grid.topology() != Topology::FullSphere {
            return Err(FlowError::Topology {
                expected: "full-sphere",
            });
        }
        for len in [points.len(), normals.len(), jacobian.len()] {
            if len != grid.len() {
                return Err(FlowError::LengthMismatch {
                    expected: grid.len(),
                    got: len,
                });
            }
        }
        Ok(ClosedSurface {
            grid,
            points,
            normals,
            jacobian,
        })
    }

    /// Circle of radius `r` sampled at `resolution` uniform angles.
    pub fn circle(resolution: usize, r: f64) -> Result<Self> {
        Self::ellipse(resolution, r, r)
    }

    /// Ellipse with semi-axes `a` (along `x_1`) and `b`.
    pub fn ellipse(resolution: usize, a: f64, b: f64) -> Result<Self> {
        let grid = Arc::new(SphereGrid::build(1, resolution, Topology::FullSphere)?);
        let mut points = Vec::with_capacity(grid.len());
        let mut normals = Vec::with_capacity(grid.len());
        let mut jacobian = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let (sn, cs) = grid.angle(i).sin_cos();
            points.push(Vec3::new(a * cs, b * sn, 0.0));
            let speed = (a * a * sn * sn + b * b * cs * cs).sqrt();
            normals.push(Vec3::new(b * cs, a * sn, 0.0) / speed);
            jacobian.push(speed);
        }
        Self::new(grid, points, normals, jacobian)
    }

    /// The radial surface `{rho(x) x}` of a full-sphere field.
    pub fn from_field(rho: &RadialField) -> Result<Self> {
        let grid = rho.grid_arc().clone();
        if grid.topology() != Topology::FullSphere {
            return Err(FlowError::Topology {
                expected: "full-sphere",
            });
        }
        let n = grid.dim();
        let points = (0..grid.len()).map(|i| rho.image(i)).collect();
        let normals = (0..grid.len())
            .map(|i| homotopy_normal(1.0, rho, i))
            .collect();
        let jacobian = (0..grid.len())
            .map(|i| homotopy_jacobian(1.0, rho, i, n))
            .collect();
        Self::new(grid, points, normals, jacobian)
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Area element at node `i` relative to the parameter measure.
    pub fn jacobian(&self, i: usize) -> f64 {
        self.jacobian[i]
    }
}

/// `H^s = (2/s) int ((y - x) . nu(y)) |y - x|^{-(n+1+s)} dH_y` at surface node `x`.
pub fn divergence_oracle_hs(
    surface: &ClosedSurface,
    x: usize,
    params: &KernelParams,
) -> Result<f64> {
    check_grid(surface.grid(), params)?;
    if x >= surface.len() {
        return Err(FlowError::InvalidArgument(format!("node {x} out of range")));
    }
    Ok(oracle_at(
        surface,
        x,
        params,
        surface.grid.local_correction(params.beta()),
    ))
}

fn oracle_at(
    surface: &ClosedSurface,
    x: usize,
    params: &KernelParams,
    corr: Option<LocalCorrection>,
) -> f64 {
    let p = params.p();
    let xv = surface.points[x];
    let sum: f64 = surface.grid.punctured_sum(x, corr, |j| {
        let d = surface.points[j] - xv;
        d.dot(&surface.normals[j]) * d.norm_squared().powf(-0.5 * p) * surface.jacobian[j]
    });
    2.0 / params.s() * sum
}

pub fn divergence_oracle_all(surface: &ClosedSurface, params: &KernelParams) -> Result<Vec<f64>> {
    check_grid(surface.grid(), params)?;
    let corr = surface.grid.local_correction(params.beta());
    Ok((0..surface.len())
        .into_par_iter()
        .map(|x| oracle_at(surface, x, params, corr))
        .collect())
}

/// Closed-form `H^s` of the unit circle: `(2^{1-s} / s) int_0^pi sin^{-s} u du`.
pub fn circle_constant_exact(s: f64) -> f64 {
    // int_0^pi sin^{-s} = 2 int_0^{pi/2} sin^{-s}; the u^{-s} endpoint part is exact
    let eps: f64 = 0.25;
    let near = eps.powf(1.0 - s) / (1.0 - s)
        + integrate_gl(
            |u: f64| u.powf(-s) * ((u / u.sin()).powf(s) - 1.0),
            0.0,
            eps,
            8,
            16,
        );
    let far = integrate_gl(|u: f64| u.sin().powf(-s), eps, 0.5 * PI, 16, 16);
    2f64.powf(1.0 - s) / s * 2.0 * (near + far)
}

/// Reference curvature `H^s` of the unperturbed configuration at every node of `grid`.
///
/// `FullSphere` returns the unit-sphere constant from the divergence oracle (for
/// hemisphere grids, evaluated on the doubled grid). `HalfBall` evaluates the
/// boundary curvature of the unit half-ball at each free-surface node; its
/// boundary nodes sit on the corner and are evaluated half a cell above it.
pub fn hs_reference(grid: &SphereGrid, params: &KernelParams, mode: HsRefMode) -> Result<Vec<f64>> {
    check_grid(grid, params)?;
    match mode {
        HsRefMode::FullSphere => {
            let c = sphere_constant(grid, params)?;
            Ok(vec![c; grid.len()])
        }
        HsRefMode::HalfBall => {
            if grid.topology() != Topology::Hemisphere {
                return Err(FlowError::Topology {
                    expected: "hemisphere",
                });
            }
            Ok((0..grid.len())
                .into_par_iter()
                .map(|i| half_ball_at(grid, i, params))
                .collect())
        }
    }
}

fn sphere_constant(grid: &SphereGrid, params: &KernelParams) -> Result<f64> {
    let full = match grid.topology() {
        Topology::FullSphere => Arc::new(grid.clone()),
        Topology::Hemisphere => Arc::new(grid.doubled()?.0),
    };
    let unit = RadialField::constant(full, 1.0)?;
    let surface = ClosedSurface::from_field(&unit)?;
    match grid.dim() {
        1 => divergence_oracle_hs(&surface, 0, params),
        _ => {
            let values = divergence_oracle_all(&surface, params)?;
            Ok(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

fn half_ball_at(grid: &SphereGrid, i: usize, params: &KernelParams) -> f64 {
    let s = params.s();
    let p = params.p();
    let up = grid.up_axis();
    let (x, on_corner) = if grid.is_boundary(i) {
        // lift the corner node half a cell into the free surface
        let h = 0.5 * grid.spacing();
        let base = grid.node(i);
        let mut lifted = base * h.cos();
        lifted[up] = h.sin();
        (lifted, true)
    } else {
        (*grid.node(i), false)
    };
    // free hemisphere: (y - x) . y = |y - x|^2 / 2
    let arc = if on_corner {
        grid.weights()
            .iter()
            .zip(grid.nodes())
            .map(|(w, y)| w * 0.5 * (y - x).norm().powf(2.0 - p))
            .sum::<f64>()
    } else {
        let corr = grid.local_correction(params.beta());
        grid.punctured_sum(i, corr, |j| 0.5 * grid.chord(i, j).powf(2.0 - p))
    };
    // wetted flat part {x_{n+1} = 0, |z| <= 1} with outward normal -e_{n+1}
    let height = x[up];
    let flat = match grid.dim() {
        1 => {
            // t - x_1 = x_2 tan(a): integrand reduces to x_2^{-s} cos^s(a)
            let lo = ((-1.0 - x[0]) / height).atan();
            let hi = ((1.0 - x[0]) / height).atan();
            height.powf(-s) * integrate_gl(|a: f64| a.cos().powf(s), lo, hi, 32, 16)
        }
        _ => {
            // polar coordinates about the foot point, radial integral in closed form
            let foot = Vec3::new(x[0], x[1], 0.0);
            let f2 = foot.norm_squared();
            height
                * integrate_gl(
                    |a: f64| {
                        let dir = Vec3::new(a.cos(), a.sin(), 0.0);
                        let b = foot.dot(&dir);
                        let r = -b + (b * b + 1.0 - f2).sqrt();
                        (height.powf(-1.0 - s) - (r * r + height * height).powf(-0.5 * (1.0 + s)))
                            / (1.0 + s)
                    },
                    0.0,
                    2.0 * PI,
                    64,
                    16,
                )
        }
    };
    2.0 / s * (arc + flat)
}
