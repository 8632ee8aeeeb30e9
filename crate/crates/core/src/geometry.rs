//! Discretization of the upper hemisphere `S^n_+` and of the full sphere `S^n`.
//!
//! `n = 1` uses an endpoint-inclusive uniform angular grid (trapezoidal weights)
//! on the hemisphere and a uniform periodic grid on the full circle. `n = 2`
//! uses a latitude–longitude product rule whose rings include the poles and,
//! on the hemisphere, the equator. Chord distances are cached once per grid.
//!
//! Ambient coordinates are stored in a `Vector3` for both dimensions; for
//! `n = 1` the third component is zero and the "up" axis `x_{n+1}` is `y`.

use std::f64::consts::PI;
use std::ops::{AddAssign, Mul};
use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::quadrature::zeta;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Hemisphere,
    FullSphere,
}

impl Topology {
    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Hemisphere => "hemisphere",
            Topology::FullSphere => "full-sphere",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hemisphere" => Ok(Topology::Hemisphere),
            "full-sphere" | "full" | "sphere" => Ok(Topology::FullSphere),
            other => Err(FlowError::InvalidArgument(format!(
                "unknown topology `{other}` (expected hemisphere or full-sphere)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    /// `n = 1`: node `i` sits at angle `i * spacing`.
    Arc { spacing: f64, periodic: bool },
    /// `n = 2`: ring 0 is the north pole; rings `1..rings-1` carry `longitudes`
    /// nodes each; on the full sphere the last ring is the south pole.
    LatLong {
        longitudes: usize,
        rings: usize,
        dtheta: f64,
    },
}

/// Extra quadrature weight given to the two nearest neighbours of a singular
/// target so that the punctured trapezoid rule integrates `|y - x|^{-beta}`
/// singularities to higher order (generalized Euler–Maclaurin).
#[derive(Debug, Clone, Copy)]
pub struct LocalCorrection {
    extra: f64,
}

#[derive(Debug, Clone)]
pub struct SphereGrid {
    dim: usize,
    topology: Topology,
    resolution: usize,
    layout: Layout,
    nodes: Vec<Vec3>,
    weights: Vec<f64>,
    boundary: Vec<bool>,
    conormals: Vec<Option<Vec3>>,
    chord: Vec<f64>,
}

impl SphereGrid {
    /// Builds a grid of surface dimension `n` (1 or 2).
    ///
    /// For `n = 1`, `resolution` is the node count. For `n = 2` it is the number
    /// of longitudes (a multiple of 4); rings are spaced by `2 pi / resolution`.
    pub fn build(n: usize, resolution: usize, topology: Topology) -> Result<Self> {
        if resolution < 8 {
            return Err(FlowError::InvalidGrid(format!(
                "resolution must be at least 8, got {resolution}"
            )));
        }
        match n {
            1 => Ok(Self::build_arc(resolution, topology)),
            2 => {
                if resolution % 4 != 0 {
                    return Err(FlowError::InvalidGrid(format!(
                        "n=2 resolution (longitudes) must be a multiple of 4, got {resolution}"
                    )));
                }
                Ok(Self::build_latlong(resolution, topology))
            }
            _ => Err(FlowError::InvalidGrid(format!(
                "surface dimension must be 1 or 2, got {n}"
            ))),
        }
    }

    fn build_arc(resolution: usize, topology: Topology) -> Self {
        let (spacing, periodic) = match topology {
            Topology::Hemisphere => (PI / (resolution - 1) as f64, false),
            Topology::FullSphere => (2.0 * PI / resolution as f64, true),
        };
        let mut nodes = Vec::with_capacity(resolution);
        let mut weights = Vec::with_capacity(resolution);
        let mut boundary = Vec::with_capacity(resolution);
        let mut conormals = Vec::with_capacity(resolution);
        for i in 0..resolution {
            let phi = i as f64 * spacing;
            let mut x = Vec3::new(phi.cos(), phi.sin(), 0.0);
            let on_boundary = !periodic && (i == 0 || i == resolution - 1);
            if on_boundary {
                x = Vec3::new(if i == 0 { 1.0 } else { -1.0 }, 0.0, 0.0);
            }
            nodes.push(x);
            weights.push(if on_boundary { 0.5 * spacing } else { spacing });
            boundary.push(on_boundary);
            conormals.push(on_boundary.then(|| Vec3::new(0.0, -1.0, 0.0)));
        }
        let n_nodes = nodes.len();
        let mut chord = vec![0.0; n_nodes * n_nodes];
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                let d = (j as f64 - i as f64) * spacing;
                chord[i * n_nodes + j] = (2.0 * (0.5 * d).sin()).abs();
            }
        }
        SphereGrid {
            dim: 1,
            topology,
            resolution,
            layout: Layout::Arc { spacing, periodic },
            nodes,
            weights,
            boundary,
            conormals,
            chord,
        }
    }

    fn build_latlong(longitudes: usize, topology: Topology) -> Self {
        let dtheta = 2.0 * PI / longitudes as f64;
        let quarter = longitudes / 4;
        let rings = match topology {
            Topology::Hemisphere => quarter + 1,
            Topology::FullSphere => 2 * quarter + 1,
        };
        let theta_max = match topology {
            Topology::Hemisphere => 0.5 * PI,
            Topology::FullSphere => PI,
        };
        let dlambda = 2.0 * PI / longitudes as f64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut boundary = Vec::new();
        let mut conormals = Vec::new();
        for j in 0..rings {
            let theta = j as f64 * dtheta;
            let lo = (theta - 0.5 * dtheta).max(0.0);
            let hi = (theta + 0.5 * dtheta).min(theta_max);
            let band = 2.0 * PI * (lo.cos() - hi.cos());
            let is_pole = j == 0 || (topology == Topology::FullSphere && j == rings - 1);
            let is_equator = topology == Topology::Hemisphere && j == rings - 1;
            if is_pole {
                let z = if j == 0 { 1.0 } else { -1.0 };
                nodes.push(Vec3::new(0.0, 0.0, z));
                weights.push(band);
                boundary.push(false);
                conormals.push(None);
                continue;
            }
            for k in 0..longitudes {
                let lambda = k as f64 * dlambda;
                let (st, ct) = if is_equator {
                    (1.0, 0.0)
                } else {
                    (theta.sin(), theta.cos())
                };
                nodes.push(Vec3::new(st * lambda.cos(), st * lambda.sin(), ct));
                weights.push(band / longitudes as f64);
                boundary.push(is_equator);
                conormals.push(is_equator.then(|| Vec3::new(0.0, 0.0, -1.0)));
            }
        }
        let n_nodes = nodes.len();
        let mut chord = vec![0.0; n_nodes * n_nodes];
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                chord[i * n_nodes + j] = (nodes[i] - nodes[j]).norm();
            }
        }
        SphereGrid {
            dim: 2,
            topology,
            resolution: longitudes,
            layout: Layout::LatLong {
                longitudes,
                rings,
                dtheta,
            },
            nodes,
            weights,
            boundary,
            conormals,
            chord,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &Vec3 {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.boundary[i]).collect()
    }

    pub fn conormal(&self, i: usize) -> Option<&Vec3> {
        self.conormals[i].as_ref()
    }

    /// Cached chord distance `|x_i - x_j|`.
    #[inline]
    pub fn chord(&self, i: usize, j: usize) -> f64 {
        self.chord[i * self.nodes.len() + j]
    }

    /// Index of the `x_{n+1}` axis.
    pub fn up_axis(&self) -> usize {
        self.dim
    }

    /// Characteristic angular mesh width.
    pub fn spacing(&self) -> f64 {
        match self.layout {
            Layout::Arc { spacing, .. } => spacing,
            Layout::LatLong { dtheta, .. } => dtheta,
        }
    }

    /// Angle of node `i` for `n = 1` grids.
    pub fn angle(&self, i: usize) -> f64 {
        match self.layout {
            Layout::Arc { spacing, .. } => i as f64 * spacing,
            Layout::LatLong { .. } => panic!("angle() is only defined for n = 1 grids"),
        }
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn(&Vec3) -> f64>(&self, f: F) -> Vec<f64> {
        self.nodes.iter().map(f).collect()
    }

    /// `sum_i w_i f_i`.
    pub fn quad_integrate(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.len() {
            return Err(FlowError::LengthMismatch {
                expected: self.len(),
                got: samples.len(),
            });
        }
        Ok(self.weights.iter().zip(samples).map(|(w, f)| w * f).sum())
    }

    /// Local singular correction for integrands behaving like `|y - x|^{-beta}`
    /// near the target. Only available on `n = 1` grids.
    pub fn local_correction(&self, beta: f64) -> Option<LocalCorrection> {
        match self.layout {
            Layout::Arc { spacing, .. } if beta > 0.0 && beta < 1.0 => Some(LocalCorrection {
                extra: -zeta(beta) * spacing,
            }),
            _ => None,
        }
    }

    /// Quadrature of `y -> f(y)` over the grid with the target node `i` removed.
    ///
    /// On `n = 1` grids contributions at equal parameter distance on both sides
    /// of the target are summed jointly before accumulation, nearest pairs
    /// first; unpaired nodes near the hemisphere boundary follow.
    pub fn punctured_sum<T, F>(&self, i: usize, correction: Option<LocalCorrection>, mut f: F) -> T
    where
        T: Zero + Copy + AddAssign + Mul<f64, Output = T>,
        F: FnMut(usize) -> T,
    {
        let n_nodes = self.len();
        let mut acc = T::zero();
        match self.layout {
            Layout::Arc { periodic, .. } => {
                let extra = correction.map_or(0.0, |c| c.extra);
                let weight = |j: usize, m: usize| {
                    if m == 1 {
                        self.weights[j] + extra
                    } else {
                        self.weights[j]
                    }
                };
                if periodic {
                    let half = n_nodes / 2;
                    for m in 1..=half {
                        let r = (i + m) % n_nodes;
                        let l = (i + n_nodes - m) % n_nodes;
                        if r == l {
                            acc += f(r) * weight(r, m);
                        } else {
                            acc += f(l) * weight(l, m) + f(r) * weight(r, m);
                        }
                    }
                } else {
                    let max_m = i.max(n_nodes - 1 - i);
                    for m in 1..=max_m {
                        let l = i.checked_sub(m);
                        let r = (i + m < n_nodes).then_some(i + m);
                        match (l, r) {
                            (Some(l), Some(r)) => acc += f(l) * weight(l, m) + f(r) * weight(r, m),
                            (Some(l), None) => acc += f(l) * weight(l, m),
                            (None, Some(r)) => acc += f(r) * weight(r, m),
                            (None, None) => {}
                        }
                    }
                }
            }
            Layout::LatLong { .. } => {
                for j in 0..n_nodes {
                    if j != i {
                        acc += f(j) * self.weights[j];
                    }
                }
            }
        }
        acc
    }

    /// Effective weight of source node `j` in the punctured sum about target `i`.
    pub fn pair_weight(&self, i: usize, j: usize, correction: Option<LocalCorrection>) -> f64 {
        if i == j {
            return 0.0;
        }
        match self.layout {
            Layout::Arc { periodic, .. } => {
                let n_nodes = self.len();
                let d = i.abs_diff(j);
                let m = if periodic { d.min(n_nodes - d) } else { d };
                match correction {
                    Some(c) if m == 1 => self.weights[j] + c.extra,
                    _ => self.weights[j],
                }
            }
            Layout::LatLong { .. } => self.weights[j],
        }
    }

    /// Tangential gradient at node `i` of the grid function `value(j)`.
    ///
    /// Second-order centered differences in the interior, second-order
    /// one-sided differences at hemisphere boundary nodes.
    pub fn gradient_at<F: Fn(usize) -> f64>(&self, i: usize, value: F) -> Vec3 {
        match self.layout {
            Layout::Arc { spacing, periodic } => {
                let n_nodes = self.len();
                let h = spacing;
                let d = if periodic {
                    (value((i + 1) % n_nodes) - value((i + n_nodes - 1) % n_nodes)) / (2.0 * h)
                } else if i == 0 {
                    (-3.0 * value(0) + 4.0 * value(1) - value(2)) / (2.0 * h)
                } else if i == n_nodes - 1 {
                    (3.0 * value(i) - 4.0 * value(i - 1) + value(i - 2)) / (2.0 * h)
                } else {
                    (value(i + 1) - value(i - 1)) / (2.0 * h)
                };
                let phi = self.angle(i);
                Vec3::new(-phi.sin(), phi.cos(), 0.0) * d
            }
            Layout::LatLong {
                longitudes,
                rings,
                dtheta,
            } => self.latlong_gradient(i, longitudes, rings, dtheta, &value),
        }
    }

    fn ring_index(&self, ring: usize, k: usize, longitudes: usize, rings: usize) -> usize {
        if ring == 0 {
            0
        } else if self.topology == Topology::FullSphere && ring == rings - 1 {
            1 + (rings - 2) * longitudes
        } else {
            1 + (ring - 1) * longitudes + (k % longitudes)
        }
    }

    fn latlong_gradient<F: Fn(usize) -> f64>(
        &self,
        i: usize,
        longitudes: usize,
        rings: usize,
        dtheta: f64,
        value: &F,
    ) -> Vec3 {
        let dlambda = 2.0 * PI / longitudes as f64;
        let south_pole = self.topology == Topology::FullSphere && i == self.len() - 1;
        if i == 0 || south_pole {
            let ring = if i == 0 { 1 } else { rings - 2 };
            let centre = value(i);
            let mut g = Vec3::zeros();
            for k in 0..longitudes {
                let lambda = k as f64 * dlambda;
                let slope = (value(self.ring_index(ring, k, longitudes, rings)) - centre) / dtheta;
                g += Vec3::new(lambda.cos(), lambda.sin(), 0.0) * slope;
            }
            return g * (2.0 / longitudes as f64);
        }
        let ring = 1 + (i - 1) / longitudes;
        let k = (i - 1) % longitudes;
        let theta = ring as f64 * dtheta;
        let lambda = k as f64 * dlambda;
        let at = |r: usize, kk: usize| value(self.ring_index(r, kk, longitudes, rings));
        let d_theta = if self.topology == Topology::Hemisphere && ring == rings - 1 {
            (3.0 * at(ring, k) - 4.0 * at(ring - 1, k) + at(ring - 2, k)) / (2.0 * dtheta)
        } else {
            (at(ring + 1, k) - at(ring - 1, k)) / (2.0 * dtheta)
        };
        let d_lambda = (at(ring, k + 1) - at(ring, k + longitudes - 1)) / (2.0 * dlambda);
        let (st, ct) = if self.topology == Topology::Hemisphere && ring == rings - 1 {
            (1.0, 0.0)
        } else {
            (theta.sin(), theta.cos())
        };
        let e_theta = Vec3::new(ct * lambda.cos(), ct * lambda.sin(), -st);
        let e_lambda = Vec3::new(-lambda.sin(), lambda.cos(), 0.0);
        e_theta * d_theta + e_lambda * (d_lambda / st)
    }

    /// Tangential gradient of a sampled function at every node.
    pub fn tangential_gradient(&self, values: &[f64]) -> Result<Vec<Vec3>> {
        if values.len() != self.len() {
            return Err(FlowError::LengthMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        Ok((0..self.len())
            .map(|i| self.gradient_at(i, |j| values[j]))
            .collect())
    }

    /// Outward conormal derivative `d rho / d eta` at boundary node `b`.
    pub fn conormal_derivative(&self, values: &[f64], b: usize) -> Result<f64> {
        if self.topology != Topology::Hemisphere {
            return Err(FlowError::Topology {
                expected: "hemisphere",
            });
        }
        let eta = self.conormal(b).ok_or(FlowError::NotBoundary(b))?;
        Ok(self.gradient_at(b, |j| values[j]).dot(eta))
    }

    /// The full-sphere grid obtained by reflecting this hemisphere across the
    /// equator, with the map from each full-sphere node to its hemisphere
    /// source node (`x -> x*` for southern nodes).
    pub fn doubled(&self) -> Result<(SphereGrid, Vec<usize>)> {
        if self.topology != Topology::Hemisphere {
            return Err(FlowError::Topology {
                expected: "hemisphere",
            });
        }
        match self.layout {
            Layout::Arc { .. } => {
                let n_h = self.len();
                let full = Self::build_arc(2 * (n_h - 1), Topology::FullSphere);
                let map = (0..full.len())
                    .map(|k| if k < n_h { k } else { 2 * (n_h - 1) - k })
                    .collect();
                Ok((full, map))
            }
            Layout::LatLong {
                longitudes, rings, ..
            } => {
                let full = Self::build_latlong(longitudes, Topology::FullSphere);
                let full_rings = 2 * rings - 1;
                let mut map = Vec::with_capacity(full.len());
                for j in 0..full_rings {
                    let src_ring = if j < rings { j } else { full_rings - 1 - j };
                    if j == 0 || j == full_rings - 1 {
                        map.push(0);
                    } else {
                        for k in 0..longitudes {
                            map.push(self.ring_index(src_ring, k, longitudes, rings));
                        }
                    }
                }
                Ok((full, map))
            }
        }
    }
}

/// A positive radial function sampled on a grid: the surface `{rho(x) x}`.
#[derive(Debug, Clone)]
pub struct RadialField {
    grid: Arc<SphereGrid>,
    values: Vec<f64>,
    gradient: OnceLock<Vec<Vec3>>,
}

impl RadialField {
    pub fn new(grid: Arc<SphereGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FlowError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((node, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(FlowError::NonPositiveRadius { node, value });
        }
        Ok(RadialField {
            grid,
            values,
            gradient: OnceLock::new(),
        })
    }

    pub fn from_fn<F: Fn(&Vec3) -> f64>(grid: Arc<SphereGrid>, f: F) -> Result<Self> {
        let values = grid.sample(f);
        Self::new(grid, values)
    }

    pub fn constant(grid: Arc<SphereGrid>, c: f64) -> Result<Self> {
        let values = vec![c; grid.len()];
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Cached tangential gradient `nabla_tau rho` at every node.
    pub fn gradient(&self) -> &[Vec3] {
        self.gradient.get_or_init(|| {
            (0..self.grid.len())
                .map(|i| self.grid.gradient_at(i, |j| self.values[j]))
                .collect()
        })
    }

    /// Surface point `rho(x_i) x_i`.
    pub fn image(&self, i: usize) -> Vec3 {
        self.grid.node(i) * self.values[i]
    }

    /// Even extension across the equator onto the doubled full-sphere grid.
    pub fn reflect(&self) -> Result<RadialField> {
        let (full, map) = self.grid.doubled()?;
        let values = map.iter().map(|&k| self.values[k]).collect();
        RadialField::new(Arc::new(full), values)
    }
}

/// Even reflection `rho~(x) = rho(x*)` of a hemisphere field.
pub fn reflect_field(rho: &RadialField) -> Result<RadialField> {
    rho.reflect()
}
