//! Constant-coefficient heat equations in one and two principal directions,
//! solved on arctan-mapped unit intervals.
//!
//! Each active direction `z_i` is mapped to `y = arctan(gamma z + c) / pi + 1/2`
//! on an equidistant grid `y_k = k / J`. In `y` the equation
//! `u_tau = 1/2 lambda u_zz` becomes `u_tau = a(y) u_yy + b(y) u_y` with
//! coefficients that vanish at `y = 0` and `y = 1`, so boundary rows simply
//! carry their values forward. One-dimensional problems use Crank-Nicolson,
//! two-dimensional ones Peaceman-Rachford ADI; each tridiagonal factorization
//! is computed once per solve and reused for every step.
//!
//! A surface may carry several independent slices (for example an extra
//! strike axis); slices share the spatial operator and only interact through
//! event hooks.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::anova::{Assembly, ExpansionPlan};
use crate::error::{Error, Result};
use crate::model::{LmmModel, Spectrum};

/// Fraction of a grid cell by which boundary nodes are pulled inside when a
/// payoff is evaluated there (the boundary itself sits at `z = +-inf`).
const BOUNDARY_INSET: f64 = 0.25;
const MIN_PIVOT: f64 = 1e-14;

/// Increasing map `y(z) = arctan(gamma z + shift) / pi + 1/2` onto `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMap {
    pub gamma: f64,
    pub shift: f64,
}

impl AxisMap {
    pub fn new(gamma: f64, shift: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || !shift.is_finite() {
            return Err(Error::InvalidInput(format!(
                "axis map needs gamma > 0 and finite shift, got ({gamma}, {shift})"
            )));
        }
        Ok(Self { gamma, shift })
    }

    /// Map sending `center` to 1/2 and `center +- half_width` to 0.9 / 0.1.
    pub fn centered(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "axis half width must be positive, got {half_width}"
            )));
        }
        let gamma = (0.4 * PI).tan() / half_width;
        Self::new(gamma, -gamma * center)
    }

    pub fn y_of_z(&self, z: f64) -> f64 {
        (self.gamma * z + self.shift).atan() / PI + 0.5
    }

    pub fn z_of_y(&self, y: f64) -> f64 {
        ((PI * (y - 0.5)).tan() - self.shift) / self.gamma
    }

    /// `dy/dz` at `y`.
    pub fn dy_dz(&self, y: f64) -> f64 {
        let s = (PI * y).sin();
        self.gamma / PI * s * s
    }

    /// `d2y/dz2` at `y`.
    pub fn d2y_dz2(&self, y: f64) -> f64 {
        let s = (PI * y).sin();
        2.0 * self.gamma * self.gamma / PI * (PI * y).cos() * s * s * s
    }
}

/// Map for principal direction `direction`: the z-range spanned by moving
/// every rate between `rate_lo` and `rate_hi` along that eigenvector lands on
/// `[0.1, 0.9]`, with the half width floored at three standard deviations
/// `3 sqrt(lambda T)`.
pub fn calibrate_axis_map(
    spectrum: &Spectrum,
    direction: usize,
    lambda: f64,
    anchor: f64,
    maturity: f64,
    rate_lo: f64,
    rate_hi: f64,
) -> Result<AxisMap> {
    if !(rate_lo > 0.0 && rate_hi > rate_lo) {
        return Err(Error::InvalidConfig(format!(
            "axis calibration needs 0 < rate_lo < rate_hi, got ({rate_lo}, {rate_hi})"
        )));
    }
    if direction >= spectrum.len() {
        return Err(Error::InvalidInput(format!(
            "direction {direction} out of range for {} eigenvectors",
            spectrum.len()
        )));
    }
    let projection: f64 = (0..spectrum.len()).map(|j| spectrum.q(j, direction)).sum();
    let spread = 0.5 * projection.abs() * (rate_hi / rate_lo).ln();
    let floor = 3.0 * (lambda.max(0.0) * maturity).sqrt();
    let mut width = spread.max(floor);
    if !(width > 0.0) {
        width = 1.0;
    }
    AxisMap::centered(anchor, width)
}

/// Diffusion and drift coefficients `(a, b)` of the mapped equation at `y`.
pub fn transformed_coefficients(map: &AxisMap, lambda: f64, y: f64) -> (f64, f64) {
    if y <= 0.0 || y >= 1.0 {
        return (0.0, 0.0);
    }
    let d1 = map.dy_dz(y);
    (0.5 * lambda * d1 * d1, 0.5 * lambda * map.d2y_dz2(y))
}

/// Tridiagonal matrix stored by diagonals; `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `I + scale * self`.
    pub fn shifted_identity(&self, scale: f64) -> Tridiagonal {
        Tridiagonal {
            lower: self.lower.iter().map(|v| scale * v).collect(),
            diag: self.diag.iter().map(|v| 1.0 + scale * v).collect(),
            upper: self.upper.iter().map(|v| scale * v).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        if n == 1 {
            out[0] = self.diag[0] * x[0];
            return;
        }
        out[0] = self.diag[0] * x[0] + self.upper[0] * x[1];
        for k in 1..n - 1 {
            out[k] = self.lower[k] * x[k - 1] + self.diag[k] * x[k] + self.upper[k] * x[k + 1];
        }
        out[n - 1] = self.lower[n - 1] * x[n - 2] + self.diag[n - 1] * x[n - 1];
    }

    pub fn factor(&self) -> Result<TridiagonalLu> {
        let n = self.len();
        let mut inv_pivot = vec![0.0; n];
        let mut upper_mod = vec![0.0; n];
        for k in 0..n {
            let pivot = if k == 0 {
                self.diag[0]
            } else {
                self.diag[k] - self.lower[k] * upper_mod[k - 1]
            };
            if !(pivot.abs() > MIN_PIVOT) {
                return Err(Error::Numerical(format!(
                    "tridiagonal pivot {pivot:e} at row {k} is too small"
                )));
            }
            inv_pivot[k] = 1.0 / pivot;
            upper_mod[k] = if k + 1 < n { self.upper[k] / pivot } else { 0.0 };
        }
        Ok(TridiagonalLu {
            lower: self.lower.clone(),
            inv_pivot,
            upper_mod,
        })
    }
}

/// Precomputed Thomas elimination.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper_mod: Vec<f64>,
}

impl TridiagonalLu {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.inv_pivot.len();
        x[0] *= self.inv_pivot[0];
        for k in 1..n {
            x[k] = (x[k] - self.lower[k] * x[k - 1]) * self.inv_pivot[k];
        }
        for k in (0..n - 1).rev() {
            x[k] -= self.upper_mod[k] * x[k + 1];
        }
    }

    /// Solve every contiguous row of length `n` in `data`. Rows are processed
    /// in interleaved groups so the elimination recurrences of different rows
    /// overlap instead of running back to back.
    pub fn solve_rows(&self, data: &mut [f64]) {
        const GROUP: usize = 8;
        let n = self.inv_pivot.len();
        for block in data.chunks_mut(GROUP * n) {
            let rows = block.len() / n;
            if rows < GROUP {
                for row in block.chunks_mut(n) {
                    self.solve_in_place(row);
                }
                continue;
            }
            let p0 = self.inv_pivot[0];
            for r in 0..GROUP {
                block[r * n] *= p0;
            }
            for k in 1..n {
                let (l, p) = (self.lower[k], self.inv_pivot[k]);
                for r in 0..GROUP {
                    let i = r * n + k;
                    block[i] = (block[i] - l * block[i - 1]) * p;
                }
            }
            for k in (0..n - 1).rev() {
                let u = self.upper_mod[k];
                for r in 0..GROUP {
                    let i = r * n + k;
                    block[i] -= u * block[i + 1];
                }
            }
        }
    }

    /// Solve along the slow index of a row-major block: `data[k * width + i]`
    /// for `k = 0..n` is one system for every `i`, all handled together.
    pub fn solve_strided(&self, data: &mut [f64], width: usize) {
        let n = self.inv_pivot.len();
        let (first, _) = data.split_at_mut(width);
        let p = self.inv_pivot[0];
        first.iter_mut().for_each(|v| *v *= p);
        for k in 1..n {
            let (done, rest) = data.split_at_mut(k * width);
            let prev = &done[(k - 1) * width..];
            let row = &mut rest[..width];
            let (l, p) = (self.lower[k], self.inv_pivot[k]);
            for (r, q) in row.iter_mut().zip(prev) {
                *r = (*r - l * q) * p;
            }
        }
        for k in (0..n - 1).rev() {
            let (head, tail) = data.split_at_mut((k + 1) * width);
            let row = &mut head[k * width..];
            let next = &tail[..width];
            let u = self.upper_mod[k];
            for (r, q) in row.iter_mut().zip(next) {
                *r -= u * q;
            }
        }
    }
}

/// Grid resolution and cutoff shared by all terms of an expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Intervals per axis; each axis has `j + 1` nodes.
    pub j: usize,
    /// Time steps per accrual period.
    pub steps_per_accrual: usize,
    /// Payoff and event values are clamped to `[-g_max, g_max]`.
    pub g_max: f64,
    /// Rate range mapped to `[0.1, 0.9]`; defaults to `min L0 / 5` and `5 max L0`.
    pub rate_lo: Option<f64>,
    pub rate_hi: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            j: 601,
            steps_per_accrual: 10,
            g_max: 1000.0,
            rate_lo: None,
            rate_hi: None,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.j < 16 {
            return Err(Error::InvalidConfig(format!("J must be at least 16, got {}", self.j)));
        }
        if self.steps_per_accrual == 0 {
            return Err(Error::InvalidConfig("steps per accrual must be positive".into()));
        }
        if !(self.g_max > 0.0) {
            return Err(Error::InvalidConfig(format!("g_max must be positive, got {}", self.g_max)));
        }
        Ok(())
    }
}

/// One active principal direction of a solve.
#[derive(Debug, Clone)]
pub struct ActiveAxis {
    pub map: AxisMap,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
struct AxisOps {
    /// z at each node, boundaries pulled inside by `BOUNDARY_INSET` cells.
    z: Vec<f64>,
    operator: Tridiagonal,
    explicit: Tridiagonal,
    implicit: TridiagonalLu,
}

/// Grid values of `u` for one solve, `values[slice * points + node]`, with
/// 2D nodes ordered `i1 + (J + 1) * i2`.
#[derive(Debug, Clone)]
pub struct SolutionSurface {
    pub values: Vec<f64>,
    pub slices: usize,
    pub points: usize,
    pub tau: f64,
}

impl SolutionSurface {
    pub fn slice(&self, s: usize) -> &[f64] {
        &self.values[s * self.points..(s + 1) * self.points]
    }
}

/// Stepper for a heat equation in 0, 1 or 2 mapped directions.
#[derive(Debug, Clone)]
pub struct HeatSolver {
    j: usize,
    dt: f64,
    g_max: f64,
    axes: Vec<ActiveAxis>,
    ops: Vec<AxisOps>,
}

impl HeatSolver {
    pub fn new(axes: Vec<ActiveAxis>, j: usize, dt: f64, g_max: f64) -> Result<Self> {
        if axes.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "heat solver supports at most 2 directions, got {}",
                axes.len()
            )));
        }
        if j < 16 {
            return Err(Error::InvalidConfig(format!("J must be at least 16, got {j}")));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        let h = 1.0 / j as f64;
        let mut ops = Vec::with_capacity(axes.len());
        for axis in &axes {
            if !(axis.lambda >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "eigenvalue must be non-negative, got {}",
                    axis.lambda
                )));
            }
            let n = j + 1;
            let mut lower = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut upper = vec![0.0; n];
            for k in 1..j {
                let (a, b) = transformed_coefficients(&axis.map, axis.lambda, k as f64 * h);
                lower[k] = a / (h * h) - b / (2.0 * h);
                diag[k] = -2.0 * a / (h * h);
                upper[k] = a / (h * h) + b / (2.0 * h);
            }
            let operator = Tridiagonal { lower, diag, upper };
            let explicit = operator.shifted_identity(0.5 * dt);
            let implicit = operator.shifted_identity(-0.5 * dt).factor()?;
            let z = (0..=j)
                .map(|k| {
                    let y = (k as f64).clamp(BOUNDARY_INSET, j as f64 - BOUNDARY_INSET) * h;
                    axis.map.z_of_y(y)
                })
                .collect();
            ops.push(AxisOps {
                z,
                operator,
                explicit,
                implicit,
            });
        }
        Ok(Self {
            j,
            dt,
            g_max,
            axes,
            ops,
        })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn axes(&self) -> &[ActiveAxis] {
        &self.axes
    }

    /// Nodes per slice.
    pub fn points(&self) -> usize {
        (self.j + 1).pow(self.dims() as u32)
    }

    /// z-coordinates of the nodes along `axis` (boundary nodes inset).
    pub fn z_nodes(&self, axis: usize) -> &[f64] {
        &self.ops[axis].z
    }

    /// Spatial operator `A` along `axis`, so that `u_tau = A u` in 1D.
    pub fn axis_operator(&self, axis: usize) -> &Tridiagonal {
        &self.ops[axis].operator
    }

    fn node_z(&self, p: usize, z: &mut [f64]) {
        let n = self.j + 1;
        match self.dims() {
            0 => {}
            1 => z[0] = self.ops[0].z[p],
            _ => {
                z[0] = self.ops[0].z[p % n];
                z[1] = self.ops[1].z[p / n];
            }
        }
    }

    fn cap(&self, v: f64) -> f64 {
        v.clamp(-self.g_max, self.g_max)
    }

    /// Surface with `slices` values per node from `f(node_index, z, out)`.
    pub fn surface_from<F>(&self, slices: usize, mut f: F) -> SolutionSurface
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        let points = self.points();
        let mut surface = SolutionSurface {
            values: vec![0.0; slices * points],
            slices,
            points,
            tau: 0.0,
        };
        self.apply_event(&mut surface, |p, z, v| f(p, z, v));
        surface
    }

    /// Replace the values at every node by `f(node_index, z, values)` (values
    /// holds one entry per slice); results are clamped to `g_max`.
    pub fn apply_event<F>(&self, surface: &mut SolutionSurface, mut f: F)
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        let mut z = vec![0.0; self.dims()];
        let mut buf = vec![0.0; surface.slices];
        let points = surface.points;
        for p in 0..points {
            self.node_z(p, &mut z);
            for (s, b) in buf.iter_mut().enumerate() {
                *b = surface.values[s * points + p];
            }
            f(p, &z, &mut buf);
            for (s, b) in buf.iter().enumerate() {
                surface.values[s * points + p] = self.cap(*b);
            }
        }
    }

    /// Advance one time step.
    pub fn step(&self, surface: &mut SolutionSurface) {
        match self.dims() {
            0 => {}
            1 => self.cn_step_1d(surface),
            _ => self.adi_step_2d(surface),
        }
        surface.tau += self.dt;
    }

    /// Crank-Nicolson step of every slice of a 1D surface (tau not advanced).
    pub fn cn_step_1d(&self, surface: &mut SolutionSurface) {
        let ops = &self.ops[0];
        let mut rhs = vec![0.0; surface.points];
        for slice in surface.values.chunks_mut(surface.points) {
            ops.explicit.apply(slice, &mut rhs);
            ops.implicit.solve_in_place(&mut rhs);
            slice.copy_from_slice(&rhs);
        }
    }

    /// Peaceman-Rachford step of every slice of a 2D surface (tau not advanced).
    pub fn adi_step_2d(&self, surface: &mut SolutionSurface) {
        let n = self.j + 1;
        let (x1, x2) = (&self.ops[0], &self.ops[1]);
        let mut tmp = vec![0.0; surface.points];
        for slice in surface.values.chunks_mut(surface.points) {
            // (I - dt/2 A1) u* = (I + dt/2 A2) u
            apply_strided(&x2.explicit, slice, &mut tmp, n);
            x1.implicit.solve_rows(&mut tmp);
            // (I - dt/2 A2) u' = (I + dt/2 A1) u*
            for (src, dst) in tmp.chunks(n).zip(slice.chunks_mut(n)) {
                x1.explicit.apply(src, dst);
            }
            x2.implicit.solve_strided(slice, n);
        }
    }

    /// Values of every slice at `z` by 4-point cubic Lagrange interpolation
    /// in `y` (tensor product in 2D).
    pub fn interpolate(&self, surface: &SolutionSurface, z: &[f64]) -> Vec<f64> {
        let n = self.j + 1;
        let stencils: Vec<([usize; 4], [f64; 4])> = self
            .axes
            .iter()
            .zip(z)
            .map(|(axis, &zi)| cubic_weights(axis.map.y_of_z(zi), self.j))
            .collect();
        (0..surface.slices)
            .map(|s| {
                let vals = surface.slice(s);
                match self.dims() {
                    0 => vals[0],
                    1 => {
                        let (idx, w) = stencils[0];
                        (0..4).map(|a| w[a] * vals[idx[a]]).sum()
                    }
                    _ => {
                        let (i1, w1) = stencils[0];
                        let (i2, w2) = stencils[1];
                        let mut acc = 0.0;
                        for b in 0..4 {
                            let row = i2[b] * n;
                            let inner: f64 = (0..4).map(|a| w1[a] * vals[row + i1[a]]).sum();
                            acc += w2[b] * inner;
                        }
                        acc
                    }
                }
            })
            .collect()
    }
}

/// `out = M applied along the slow index` of a `width`-wide row-major block.
fn apply_strided(m: &Tridiagonal, data: &[f64], out: &mut [f64], width: usize) {
    let n = m.len();
    let row = |k: usize| &data[k * width..(k + 1) * width];
    for k in 0..n {
        let dst = &mut out[k * width..(k + 1) * width];
        let d = m.diag[k];
        dst.iter_mut().zip(row(k)).for_each(|(o, v)| *o = d * v);
        if k > 0 && m.lower[k] != 0.0 {
            let l = m.lower[k];
            dst.iter_mut().zip(row(k - 1)).for_each(|(o, v)| *o += l * v);
        }
        if k + 1 < n && m.upper[k] != 0.0 {
            let u = m.upper[k];
            dst.iter_mut().zip(row(k + 1)).for_each(|(o, v)| *o += u * v);
        }
    }
}

/// Node indices and Lagrange weights for cubic interpolation at `y` on `k / j`.
fn cubic_weights(y: f64, j: usize) -> ([usize; 4], [f64; 4]) {
    let t = (y * j as f64).clamp(0.0, j as f64);
    let base = (t.floor() as usize).clamp(1, j - 2) - 1;
    let idx = [base, base + 1, base + 2, base + 3];
    let mut w = [1.0; 4];
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                w[a] *= (t - idx[b] as f64) / (idx[a] as f64 - idx[b] as f64);
            }
        }
    }
    (idx, w)
}

/// A contract priced by backward induction on a [`HeatSolver`] grid.
///
/// Tenors are 0-based: the payoff is set at tenor `n - 1` (the last fixing)
/// and events fire at earlier tenors. All values are in units of the terminal
/// bond. `rates` always holds every forward rate at the node.
pub trait PdeContract: Sync {
    /// Independent value slices per node (e.g. strike nodes).
    fn slices(&self) -> usize {
        1
    }

    fn payoff(&self, rates: &[f64], out: &mut [f64]);

    fn has_event(&self, tenor: usize) -> bool;

    fn event(&self, tenor: usize, rates: &[f64], values: &mut [f64]);

    /// Scalar value from the slice values at the anchor after the tenor-0 event.
    fn readout(&self, values: &[f64]) -> f64 {
        values[0]
    }

    /// Clamp events recorded so far (strike overflow and the like).
    fn clamp_count(&self) -> usize {
        0
    }
}

/// Value of `contract` (terminal-bond units at t = 0) for the problem where
/// only the principal directions in `active` diffuse, with the given
/// eigenvalues; all other directions are frozen at the anchor.
pub fn solve_term(
    model: &LmmModel,
    active: &[(usize, f64)],
    contract: &dyn PdeContract,
    grid: &GridSpec,
) -> Result<f64> {
    grid.validate()?;
    let n = model.n();
    let cfg = &model.config;
    let active: Vec<(usize, f64)> = active.iter().copied().filter(|(_, l)| *l > 0.0).collect();
    if let Some((k, _)) = active.iter().find(|(k, _)| *k >= n) {
        return Err(Error::InvalidInput(format!("direction {k} out of range for N={n}")));
    }
    let anchor = model.anchor();
    let maturity = cfg.maturity();
    let lo = grid
        .rate_lo
        .unwrap_or_else(|| cfg.initial_rates.iter().copied().fold(f64::INFINITY, f64::min) / 5.0);
    let hi = grid
        .rate_hi
        .unwrap_or_else(|| cfg.initial_rates.iter().copied().fold(0.0, f64::max) * 5.0);
    let axes = active
        .iter()
        .map(|&(k, lambda)| {
            Ok(ActiveAxis {
                map: calibrate_axis_map(model.spectrum(), k, lambda, anchor[k], maturity, lo, hi)?,
                lambda,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let steps_per = grid.steps_per_accrual;
    let dt = cfg.alpha / steps_per as f64;
    let solver = HeatSolver::new(axes, grid.j, dt, grid.g_max)?;

    // Log-rate offsets contributed by each axis at each of its nodes.
    let q = model.spectrum().vectors();
    let offsets: Vec<Vec<f64>> = active
        .iter()
        .enumerate()
        .map(|(a, &(k, _))| {
            let z0 = anchor[k];
            solver
                .z_nodes(a)
                .iter()
                .flat_map(|z| (0..n).map(move |j| q[(j, k)] * (z - z0)))
                .collect()
        })
        .collect();
    let width = grid.j + 1;
    let rates_at = |mean: &[f64], p: usize, out: &mut [f64]| {
        out.copy_from_slice(mean);
        match offsets.len() {
            0 => {}
            1 => {
                let o = &offsets[0][p * n..(p + 1) * n];
                out.iter_mut().zip(o).for_each(|(r, d)| *r += d);
            }
            _ => {
                let o1 = &offsets[0][(p % width) * n..(p % width + 1) * n];
                let o2 = &offsets[1][(p / width) * n..(p / width + 1) * n];
                for j in 0..n {
                    out[j] += o1[j] + o2[j];
                }
            }
        }
        out.iter_mut().for_each(|r| *r = r.exp());
    };

    let last = n - 1;
    let mut rates = vec![0.0; n];
    let mean = model.mean_log_rates(cfg.tenor(last));
    let mut surface = solver.surface_from(contract.slices(), |p, _, out| {
        rates_at(&mean, p, &mut rates);
        contract.payoff(&rates, out);
    });
    for tenor in (0..last).rev() {
        for _ in 0..steps_per {
            solver.step(&mut surface);
        }
        if contract.has_event(tenor) {
            let mean = model.mean_log_rates(cfg.tenor(tenor));
            solver.apply_event(&mut surface, |p, _, values| {
                rates_at(&mean, p, &mut rates);
                contract.event(tenor, &rates, values);
            });
        }
    }
    let at_anchor: Vec<f64> = active.iter().map(|&(k, _)| anchor[k]).collect();
    let values = solver.interpolate(&surface, &at_anchor);
    Ok(contract.readout(&values))
}

/// Term values and their assembly for a whole expansion plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSolution {
    /// One value per plan term, terminal-bond units.
    pub terms: Vec<f64>,
    pub assembly: Assembly,
}

/// Solve every term of `plan` (in parallel) and assemble the result.
pub fn solve_plan(
    model: &LmmModel,
    plan: &ExpansionPlan,
    contract: &dyn PdeContract,
    grid: &GridSpec,
) -> Result<PlanSolution> {
    if plan.n != model.n() {
        return Err(Error::InvalidInput(format!(
            "plan is for N={} but the model has N={}",
            plan.n,
            model.n()
        )));
    }
    if plan.max_dimension() > 2 {
        return Err(Error::InvalidConfig(format!(
            "plan needs {}-dimensional solves; at most 2 are supported",
            plan.max_dimension()
        )));
    }
    let terms = plan
        .terms
        .par_iter()
        .map(|t| solve_term(model, &t.lambda_prime(plan.r, model.spectrum()), contract, grid))
        .collect::<Result<Vec<f64>>>()?;
    let assembly = plan.assemble(&terms)?;
    Ok(PlanSolution { terms, assembly })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn map_centering_and_endpoints() {
        let m = AxisMap::centered(-3.0, 2.0).unwrap();
        assert_relative_eq!(m.y_of_z(-3.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.y_of_z(-1.0), 0.9, epsilon = 1e-12);
        assert_relative_eq!(m.y_of_z(-5.0), 0.1, epsilon = 1e-12);
        assert_relative_eq!(m.z_of_y(m.y_of_z(0.7)), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn map_derivatives_match_finite_differences() {
        let m = AxisMap::new(1.7, 0.3).unwrap();
        for z in [-2.0, -0.4, 0.0, 0.9, 3.0] {
            let h = 1e-4;
            let y = m.y_of_z(z);
            let d1 = (m.y_of_z(z + h) - m.y_of_z(z - h)) / (2.0 * h);
            let d2 = (m.y_of_z(z + h) - 2.0 * y + m.y_of_z(z - h)) / (h * h);
            assert_relative_eq!(m.dy_dz(y), d1, max_relative = 1e-7);
            assert_relative_eq!(m.d2y_dz2(y), d2, epsilon = 1e-6);
        }
    }

    #[test]
    fn coefficients_at_center_and_boundary() {
        let m = AxisMap::centered(0.0, 1.5).unwrap();
        let (a, b) = transformed_coefficients(&m, 0.3, 0.5);
        assert_relative_eq!(a, 0.5 * 0.3 * m.gamma * m.gamma / (PI * PI), max_relative = 1e-14);
        assert!(b.abs() < 1e-15);
        assert_eq!(transformed_coefficients(&m, 0.3, 0.0), (0.0, 0.0));
        assert_eq!(transformed_coefficients(&m, 0.3, 1.0), (0.0, 0.0));
        assert_eq!(transformed_coefficients(&m, 0.0, 0.3), (0.0, 0.0));
    }

    #[test]
    fn thomas_matches_dense() {
        let t = Tridiagonal {
            lower: vec![0.0, -1.0, 0.5, -0.2],
            diag: vec![4.0, 3.0, 5.0, 2.0],
            upper: vec![1.0, 0.3, -1.0, 0.0],
        };
        let lu = t.factor().unwrap();
        let b = [1.0, -2.0, 0.5, 3.0];
        let mut x = b;
        lu.solve_in_place(&mut x);
        let mut back = [0.0; 4];
        t.apply(&x, &mut back);
        for k in 0..4 {
            assert_relative_eq!(back[k], b[k], epsilon = 1e-14);
        }
        // Strided solve of two interleaved systems.
        let mut data = vec![0.0; 8];
        for k in 0..4 {
            data[2 * k] = b[k];
            data[2 * k + 1] = -b[k];
        }
        lu.solve_strided(&mut data, 2);
        for k in 0..4 {
            assert_relative_eq!(data[2 * k], x[k], epsilon = 1e-14);
            assert_relative_eq!(data[2 * k + 1], -x[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn singular_pivot_is_reported() {
        let t = Tridiagonal {
            lower: vec![0.0, 1.0],
            diag: vec![1.0, 1.0],
            upper: vec![1.0, 0.0],
        };
        assert!(matches!(t.factor(), Err(Error::Numerical(_))));
    }

    #[test]
    fn cubic_weights_reproduce_cubics() {
        let j = 40;
        for y in [0.0, 0.013, 0.5, 0.77, 0.999, 1.0] {
            let (idx, w) = cubic_weights(y, j);
            let f = |x: f64| 1.0 - 2.0 * x + 3.0 * x * x - x * x * x;
            let approx: f64 = (0..4).map(|a| w[a] * f(idx[a] as f64 / j as f64)).sum();
            assert_relative_eq!(approx, f(y), epsilon = 1e-12);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let axes = vec![
            ActiveAxis { map: AxisMap::centered(0.0, 1.0).unwrap(), lambda: 0.5 },
            ActiveAxis { map: AxisMap::centered(1.0, 0.5).unwrap(), lambda: 0.1 },
        ];
        for dims in 1..=2 {
            let solver = HeatSolver::new(axes[..dims].to_vec(), 32, 0.05, 1000.0).unwrap();
            let mut s = solver.surface_from(2, |_, _, out| {
                out[0] = 3.5;
                out[1] = -1.0;
            });
            for _ in 0..10 {
                solver.step(&mut s);
            }
            assert!(s.slice(0).iter().all(|v| (v - 3.5).abs() < 1e-13));
            assert!(s.slice(1).iter().all(|v| (v + 1.0).abs() < 1e-13));
            assert_relative_eq!(s.tau, 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn values_are_capped() {
        let solver = HeatSolver::new(
            vec![ActiveAxis { map: AxisMap::centered(0.0, 1.0).unwrap(), lambda: 0.5 }],
            32,
            0.05,
            10.0,
        )
        .unwrap();
        let s = solver.surface_from(1, |_, z, out| out[0] = z[0].exp());
        assert!(s.values.iter().all(|v| *v <= 10.0));
        assert_eq!(s.values[32], 10.0);
    }

    #[test]
    fn rejects_three_directions() {
        let axis = ActiveAxis { map: AxisMap::centered(0.0, 1.0).unwrap(), lambda: 0.5 };
        assert!(HeatSolver::new(vec![axis.clone(), axis.clone(), axis], 32, 0.1, 1.0).is_err());
    }
}
