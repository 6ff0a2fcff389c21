//! Axisymmetric grids, fields and a weighted finite-volume operator.
//!
//! Fields live on nodes `(r_i, theta_j)` with `theta` running over
//! `[0, pi/2]` (pole to boundary). Each node owns a control volume bounded by
//! the midpoints to its neighbours; the first radial cell extends down to the
//! inner face stored with the grid, and the outer face of the last cell sits
//! on the last node. All volumes carry the weight `w`, the measure
//! `r^{n-1} sin^{n-2}(theta)` and the area factor `|S^{n-2}|`, so discrete
//! sums approximate integrals over the half-space directly.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::banded::Banded;
use crate::error::{Error, Result};
use crate::quad;
use crate::specfun::sphere_area;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialGrid {
    pub n: usize,
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    /// Inner edge of the first radial cell (zero for grids that reach the origin).
    pub r_inner: f64,
}

impl AxialGrid {
    pub fn new(n: usize, r: Vec<f64>, theta: Vec<f64>, r_inner: f64) -> Result<Self> {
        if r.len() < 3 || theta.len() < 3 {
            return Err(Error::Resolution("grid needs at least three nodes per direction".into()));
        }
        if r.windows(2).any(|w| w[1] <= w[0]) || theta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("grid nodes must be strictly increasing".into()));
        }
        if r_inner < 0.0 || r_inner > r[0] {
            return Err(Error::Domain("inner face must lie in [0, r_0]".into()));
        }
        if theta[0] != 0.0 || (theta[theta.len() - 1] - FRAC_PI_2).abs() > 1e-14 {
            return Err(Error::Domain("theta nodes must span [0, pi/2]".into()));
        }
        Ok(AxialGrid { n, r, theta, r_inner })
    }

    /// Uniform angular nodes `0, h, ..., pi/2`.
    pub fn uniform_theta(count: usize) -> Vec<f64> {
        let h = FRAC_PI_2 / (count - 1) as f64;
        let mut t: Vec<f64> = (0..count).map(|j| j as f64 * h).collect();
        t[count - 1] = FRAC_PI_2;
        t
    }

    /// Angular nodes refined towards the boundary `theta = pi/2`:
    /// `theta = (pi/2) ((1 - w) x + w sin(pi x / 2))` on uniform `x`, so the
    /// boundary spacing is `1 - w` times the uniform one.
    pub fn boundary_graded_theta(count: usize, w: f64) -> Vec<f64> {
        let mut t: Vec<f64> = (0..count)
            .map(|j| {
                let x = j as f64 / (count - 1) as f64;
                FRAC_PI_2 * ((1.0 - w) * x + w * (FRAC_PI_2 * x).sin())
            })
            .collect();
        t[count - 1] = FRAC_PI_2;
        t
    }

    /// Geometric radial nodes from `r_min` to `r_max`.
    pub fn geometric_r(r_min: f64, r_max: f64, count: usize) -> Vec<f64> {
        let (a, b) = (r_min.ln(), r_max.ln());
        (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
    }

    /// Nodes from the origin: uniform spacing about `h` on `[0, core]`,
    /// then geometric with ratio close to `e^{log_step}`, adjusted to land on
    /// `r_max`.
    pub fn pole_log_r(h: f64, core: f64, log_step: f64, r_max: f64) -> Vec<f64> {
        let uniform = (core / h).ceil() as usize;
        let h = core / uniform as f64;
        let mut r: Vec<f64> = (0..=uniform).map(|i| i as f64 * h).collect();
        r[uniform] = core;
        let steps = ((r_max / core).ln() / log_step).ceil().max(1.0) as usize;
        let ratio = (r_max / core).powf(1.0 / steps as f64);
        r.extend((1..=steps).map(|i| core * ratio.powi(i as i32)));
        r[uniform + steps] = r_max;
        r
    }

    /// Uniform spacing `h` on `[0, core]`, then spacing growing by `ratio`
    /// per cell (capped at `h_max`) up to `r_max`.
    pub fn graded_r(h: f64, core: f64, ratio: f64, h_max: f64, r_max: f64) -> Vec<f64> {
        let mut r = vec![0.0];
        let mut step = h;
        while *r.last().expect("non-empty") < r_max - 1e-12 {
            let last = *r.last().expect("non-empty");
            if last >= core {
                step = (step * ratio).min(h_max);
            }
            r.push((last + step).min(r_max));
        }
        r
    }

    pub fn nr(&self) -> usize {
        self.r.len()
    }

    pub fn nt(&self) -> usize {
        self.theta.len()
    }

    pub fn len(&self) -> usize {
        self.nr() * self.nt()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nt() + j
    }

    /// Radial cell faces, `nr + 1` entries.
    pub fn r_faces(&self) -> Vec<f64> {
        let nr = self.nr();
        let mut f = Vec::with_capacity(nr + 1);
        f.push(self.r_inner);
        for i in 0..nr - 1 {
            f.push(0.5 * (self.r[i] + self.r[i + 1]));
        }
        f.push(self.r[nr - 1]);
        f
    }

    /// Angular cell faces, `nt + 1` entries.
    pub fn theta_faces(&self) -> Vec<f64> {
        let nt = self.nt();
        let mut f = Vec::with_capacity(nt + 1);
        f.push(0.0);
        for j in 0..nt - 1 {
            f.push(0.5 * (self.theta[j] + self.theta[j + 1]));
        }
        f.push(FRAC_PI_2);
        f
    }

    /// Cartesian coordinates `(rho, x_n)` of node `(i, j)`, with `rho` the
    /// distance from the symmetry axis.
    pub fn cartesian(&self, i: usize, j: usize) -> (f64, f64) {
        let (r, t) = (self.r[i], self.theta[j]);
        (r * t.sin(), r * t.cos())
    }

    /// Locate `r` for linear interpolation: index of the left node and weight.
    /// Cell index and local coordinate of `x` in sorted `nodes`.
    pub fn bracket(nodes: &[f64], x: f64) -> Option<(usize, f64)> {
        let n = nodes.len();
        if x < nodes[0] || x > nodes[n - 1] {
            return None;
        }
        let i = match nodes.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(n - 2),
            Err(i) => (i - 1).min(n - 2),
        };
        Some((i, (x - nodes[i]) / (nodes[i + 1] - nodes[i])))
    }
}

/// Scalar field on an [`AxialGrid`], stored with `theta` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialField {
    pub values: Vec<f64>,
}

impl AxialField {
    pub fn from_fn(grid: &AxialGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for &r in &grid.r {
            for &t in &grid.theta {
                values.push(f(r, t));
            }
        }
        AxialField { values }
    }

    pub fn zeros(grid: &AxialGrid) -> Self {
        AxialField { values: vec![0.0; grid.len()] }
    }

    pub fn at(&self, grid: &AxialGrid, i: usize, j: usize) -> f64 {
        self.values[grid.idx(i, j)]
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Bilinear interpolation in `(r, theta)`; `None` outside the grid.
    pub fn interpolate(&self, grid: &AxialGrid, r: f64, theta: f64) -> Option<f64> {
        let (i, a) = AxialGrid::bracket(&grid.r, r)?;
        let (j, b) = AxialGrid::bracket(&grid.theta, theta.clamp(0.0, FRAC_PI_2))?;
        let v = |ii: usize, jj: usize| self.values[grid.idx(ii, jj)];
        Some(
            (1.0 - a) * ((1.0 - b) * v(i, j) + b * v(i, j + 1))
                + a * ((1.0 - b) * v(i + 1, j) + b * v(i + 1, j + 1)),
        )
    }

    pub fn check_grid(&self, grid: &AxialGrid) -> Result<()> {
        if self.values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid has {} nodes",
                self.values.len(),
                grid.len()
            )));
        }
        Ok(())
    }
}

fn sin_power_integral(a: f64, b: f64, p: i32) -> f64 {
    let (x, w) = quad::gauss_legendre_on(8, a, b);
    x.iter().zip(&w).map(|(t, w)| w * t.sin().powi(p)).sum()
}

/// Weighted finite-volume discretization of `div(w grad u)` on an [`AxialGrid`].
///
/// `flux` applied to a field returns the net weighted flux into each control
/// volume; dividing by `volume` gives `(1/w) div(w grad u)` at the node.
#[derive(Debug, Clone)]
pub struct FvOperator {
    pub grid: AxialGrid,
    /// Weighted volume of each control volume.
    pub volume: Vec<f64>,
    /// Radial face coefficients between `(i, j)` and `(i + 1, j)`.
    pub radial: Vec<f64>,
    /// Angular face coefficients between `(i, j)` and `(i, j + 1)`.
    pub angular: Vec<f64>,
    /// Weighted boundary measure owned by each boundary node `(i, nt - 1)`.
    pub boundary: Vec<f64>,
    /// Unweighted boundary integral of `r^{n-3}` per boundary node, used by
    /// Robin terms of the form `K r^{-1} u`.
    pub boundary_inv_r: Vec<f64>,
    /// Weighted area of the outer radial face per angular node.
    pub outer: Vec<f64>,
}

impl FvOperator {
    pub fn new(grid: &AxialGrid, w: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n;
        let (nr, nt) = (grid.nr(), grid.nt());
        let area = sphere_area(n - 2);
        let p_r = n as i32 - 1;
        let p_t = n as i32 - 2;
        let rf = grid.r_faces();
        let tf = grid.theta_faces();
        let rvol: Vec<f64> =
            (0..nr).map(|i| (rf[i + 1].powi(p_r + 1) - rf[i].powi(p_r + 1)) / n as f64).collect();
        let rbnd: Vec<f64> =
            (0..nr).map(|i| (rf[i + 1].powi(p_r) - rf[i].powi(p_r)) / p_r as f64).collect();
        // the angular gradient carries a 1/r, so angular faces integrate r^{n-3}
        let rang: Vec<f64> = (0..nr)
            .map(|i| (rf[i + 1].powi(p_t) - rf[i].powi(p_t)) / p_t as f64)
            .collect();
        let tvol: Vec<f64> =
            (0..nt).map(|j| area * sin_power_integral(tf[j], tf[j + 1], p_t)).collect();
        let mut volume = vec![0.0; grid.len()];
        for i in 0..nr {
            for j in 0..nt {
                volume[grid.idx(i, j)] = w(grid.r[i], grid.theta[j]) * rvol[i] * tvol[j];
            }
        }
        let mut radial = vec![0.0; (nr - 1) * nt];
        for i in 0..nr - 1 {
            let rface = rf[i + 1];
            let dr = grid.r[i + 1] - grid.r[i];
            for j in 0..nt {
                radial[i * nt + j] = w(rface, grid.theta[j]) * rface.powi(p_r) * tvol[j] / dr;
            }
        }
        let mut angular = vec![0.0; nr * (nt - 1)];
        for i in 0..nr {
            for j in 0..nt - 1 {
                let tface = tf[j + 1];
                let dt = grid.theta[j + 1] - grid.theta[j];
                angular[i * (nt - 1) + j] =
                    w(grid.r[i], tface) * area * tface.sin().powi(p_t) * rang[i] / dt;
            }
        }
        let boundary: Vec<f64> =
            (0..nr).map(|i| w(grid.r[i], FRAC_PI_2) * area * rbnd[i]).collect();
        let boundary_inv_r: Vec<f64> = rang.iter().map(|v| area * v).collect();
        let r_out = grid.r[nr - 1];
        let outer: Vec<f64> =
            (0..nt).map(|j| w(r_out, grid.theta[j]) * r_out.powi(p_r) * tvol[j]).collect();
        FvOperator { grid: grid.clone(), volume, radial, angular, boundary, boundary_inv_r, outer }
    }

    pub fn len(&self) -> usize {
        self.volume.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volume.is_empty()
    }

    /// Net diffusive flux into every control volume (no boundary sources).
    pub fn flux(&self, u: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let (nr, nt) = (g.nr(), g.nt());
        let mut out = vec![0.0; self.len()];
        for i in 0..nr - 1 {
            for j in 0..nt {
                let c = self.radial[i * nt + j];
                let (a, b) = (g.idx(i, j), g.idx(i + 1, j));
                let f = c * (u[b] - u[a]);
                out[a] += f;
                out[b] -= f;
            }
        }
        for i in 0..nr {
            for j in 0..nt - 1 {
                let c = self.angular[i * (nt - 1) + j];
                let (a, b) = (g.idx(i, j), g.idx(i, j + 1));
                let f = c * (u[b] - u[a]);
                out[a] += f;
                out[b] -= f;
            }
        }
        out
    }

    /// The flux operator as a banded matrix (bandwidth `nt`).
    pub fn flux_matrix(&self) -> Banded {
        let g = &self.grid;
        let (nr, nt) = (g.nr(), g.nt());
        let mut m = Banded::zeros(self.len(), nt, nt);
        let mut couple = |a: usize, b: usize, c: f64| {
            m.add(a, a, -c);
            m.add(a, b, c);
            m.add(b, b, -c);
            m.add(b, a, c);
        };
        for i in 0..nr - 1 {
            for j in 0..nt {
                couple(g.idx(i, j), g.idx(i + 1, j), self.radial[i * nt + j]);
            }
        }
        for i in 0..nr {
            for j in 0..nt - 1 {
                couple(g.idx(i, j), g.idx(i, j + 1), self.angular[i * (nt - 1) + j]);
            }
        }
        m
    }

    /// Discrete Dirichlet energy `int w |grad u|^2`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let g = &self.grid;
        let (nr, nt) = (g.nr(), g.nt());
        let mut e = 0.0;
        for i in 0..nr - 1 {
            for j in 0..nt {
                let d = u[g.idx(i + 1, j)] - u[g.idx(i, j)];
                e += self.radial[i * nt + j] * d * d;
            }
        }
        for i in 0..nr {
            for j in 0..nt - 1 {
                let d = u[g.idx(i, j + 1)] - u[g.idx(i, j)];
                e += self.angular[i * (nt - 1) + j] * d * d;
            }
        }
        e
    }

    /// Weighted inner product `int f g w`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.volume.iter().zip(f).zip(g).map(|((v, a), b)| v * a * b).sum()
    }

    /// Weighted boundary inner product over `theta = pi/2`.
    pub fn inner_boundary(&self, f: &[f64], g: &[f64]) -> f64 {
        let nt = self.grid.nt();
        self.boundary
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let k = i * nt + nt - 1;
                b * f[k] * g[k]
            })
            .sum()
    }

    pub fn boundary_index(&self, i: usize) -> usize {
        self.grid.idx(i, self.grid.nt() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid(n: usize) -> AxialGrid {
        AxialGrid::new(n, AxialGrid::geometric_r(0.1, 3.0, 60), AxialGrid::uniform_theta(33), 0.0)
            .unwrap()
    }

    #[test]
    fn volumes_integrate_the_half_ball() {
        // half ball of radius 3 in R^3 has volume 2 pi 9
        let g = grid(3);
        let op = FvOperator::new(&g, |_, _| 1.0);
        let v: f64 = op.volume.iter().sum();
        assert_relative_eq!(v, 2.0 * PI * 9.0, max_relative = 1e-12);
        let b: f64 = op.boundary.iter().sum();
        assert_relative_eq!(b, PI * 9.0, max_relative = 1e-12);
    }

    #[test]
    fn flux_annihilates_constants_and_is_symmetric() {
        let g = grid(5);
        let op = FvOperator::new(&g, |r, _| (-r * r / 4.0).exp());
        let ones = vec![1.0; g.len()];
        assert!(op.flux(&ones).iter().all(|v| v.abs() < 1e-14));
        let m = op.flux_matrix();
        for a in 0..g.len() {
            for b in a.saturating_sub(g.nt())..(a + g.nt() + 1).min(g.len()) {
                assert_relative_eq!(m.get(a, b), m.get(b, a), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn harmonic_field_has_vanishing_flux() {
        // x_n^2 - |x'|^2 / (n - 1) is harmonic with zero normal derivative on x_n = 0
        let n = 4;
        let nf = n as f64;
        let err = |nr: usize, nt: usize| {
            let g = AxialGrid::new(
                n,
                AxialGrid::geometric_r(0.5, 2.0, nr),
                AxialGrid::uniform_theta(nt),
                0.0,
            )
            .unwrap();
            let op = FvOperator::new(&g, |_, _| 1.0);
            let u = AxialField::from_fn(&g, |r, t| {
                r * r * (t.cos().powi(2) - t.sin().powi(2) / (nf - 1.0))
            });
            let f = op.flux(&u.values);
            let mut worst = 0.0f64;
            for i in 1..g.nr() - 1 {
                for j in 0..g.nt() {
                    let k = g.idx(i, j);
                    worst = worst.max((f[k] / op.volume[k]).abs());
                }
            }
            worst
        };
        let (e1, e2) = (err(40, 17), err(80, 33));
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }

    #[test]
    fn interpolation_reproduces_bilinear() {
        let g = grid(4);
        let f = AxialField::from_fn(&g, |r, t| 2.0 * r - 3.0 * t + 1.0);
        let v = f.interpolate(&g, 1.234, 0.77).unwrap();
        assert_relative_eq!(v, 2.0 * 1.234 - 3.0 * 0.77 + 1.0, max_relative = 1e-12);
        assert!(f.interpolate(&g, 10.0, 0.1).is_none());
    }
}
