//! Heat flow `z_t = (1/B) div(B grad z)` with the degenerate weight
//! `B = sigma^2`, `sigma = r^{-gamma} e_1(theta)`, and zero normal flux on
//! the half-space boundary.
//!
//! Near the origin the weight is replaced by its regularization
//! `sigma_eps = theta_eps sigma + (1 - theta_eps) eps^{-gamma}`. Time stepping
//! is backward Euler on a conservative finite-volume grid, so the weighted
//! mass is conserved exactly and the weighted `L^2` norm never grows.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::AngularSamples;
use crate::banded::BandedLu;
use crate::error::{Error, Result};
use crate::fv::{AxialField, AxialGrid, FvOperator};
use crate::quad;
use crate::specfun::sphere_area;

/// Smooth cutoff: 0 below 1/4, 1 above 3/4.
pub fn cutoff(x: f64) -> f64 {
    let s = 2.0 * (x - 0.25);
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let (a, b) = (bump(s), bump(1.0 - s));
    a / (a + b)
}

fn cutoff_deriv(x: f64) -> f64 {
    let s = 2.0 * (x - 0.25);
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let (a, b) = (bump(s), bump(1.0 - s));
    let (da, db) = (a / (s * s), b / ((1.0 - s) * (1.0 - s)));
    2.0 * (da * b + a * db) / ((a + b) * (a + b))
}

fn bump(x: f64) -> f64 {
    (-1.0 / x).exp()
}

/// `sigma` and its regularization at scale `epsilon`; `epsilon = 0` means
/// the exact weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizedWeight {
    pub n: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub e1: AngularSamples,
}

impl RegularizedWeight {
    pub fn new(n: usize, epsilon: f64, gamma: f64, e1: AngularSamples) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Domain(format!("epsilon must be non-negative, got {epsilon}")));
        }
        if !(gamma > 0.0) {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        if 2.0 * gamma >= n as f64 - 2.0 {
            return Err(Error::Domain(format!(
                "the weight r^(-2 gamma) needs 2 gamma < n - 2 (gamma = {gamma}, n = {n})"
            )));
        }
        Ok(RegularizedWeight { n, epsilon, gamma, e1 })
    }

    pub fn exact(n: usize, gamma: f64, e1: AngularSamples) -> Result<Self> {
        Self::new(n, 0.0, gamma, e1)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.n, epsilon, self.gamma, self.e1.clone())
    }

    pub fn sigma(&self, r: f64, theta: f64) -> f64 {
        r.powf(-self.gamma) * self.e1.eval(theta)
    }

    pub fn sigma_eps(&self, r: f64, theta: f64) -> f64 {
        if self.epsilon == 0.0 {
            return self.sigma(r, theta);
        }
        let c = cutoff(r / self.epsilon);
        let flat = self.epsilon.powf(-self.gamma);
        if c == 0.0 {
            flat
        } else {
            c * self.sigma(r, theta) + (1.0 - c) * flat
        }
    }

    /// `B_eps = sigma_eps^2`.
    pub fn b(&self, r: f64, theta: f64) -> f64 {
        let s = self.sigma_eps(r, theta);
        s * s
    }

    /// `|grad sigma_eps| / sigma_eps`.
    pub fn log_gradient(&self, r: f64, theta: f64) -> f64 {
        let e = self.e1.eval(theta);
        let de = self.e1.eval_deriv(theta);
        let g = self.gamma;
        let sig = r.powf(-g) * e;
        let (dr, dt) = (-g * sig / r, r.powf(-g - 1.0) * de);
        if self.epsilon == 0.0 {
            return dr.hypot(dt) / sig;
        }
        let x = r / self.epsilon;
        let c = cutoff(x);
        let dc = cutoff_deriv(x) / self.epsilon;
        let flat = self.epsilon.powf(-g);
        let gr = dc * (sig - flat) + c * dr;
        let gt = c * dt;
        gr.hypot(gt) / self.sigma_eps(r, theta)
    }
}

/// `int_0^phi sin^k` by fixed Gauss-Legendre, which is exact up to round-off
/// for these trigonometric polynomials and keeps full relative accuracy for
/// small `phi`, where the textbook recurrence cancels catastrophically.
struct SinPowerIntegral {
    k: i32,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    total: f64,
}

impl SinPowerIntegral {
    fn new(k: usize) -> Self {
        let (nodes, weights) = quad::gauss_legendre(32);
        let mut s = SinPowerIntegral { k: k as i32, nodes, weights, total: 1.0 };
        s.total = s.eval(PI);
        s
    }

    fn eval(&self, phi: f64) -> f64 {
        let h = 0.5 * phi;
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * (h * (1.0 + x)).sin().powi(self.k)).sum::<f64>() * h
    }

    /// Fraction of `S^{k+1}` whose points `rho omega` lie within `radius` of
    /// a point at distance `rho0` from the axis.
    fn cap_fraction(&self, rho: f64, rho0: f64, radius: f64) -> f64 {
        if rho0 == 0.0 || rho == 0.0 {
            return if (rho - rho0).abs() < radius { 1.0 } else { 0.0 };
        }
        let c = (rho * rho + rho0 * rho0 - radius * radius) / (2.0 * rho * rho0);
        if c <= -1.0 {
            1.0
        } else if c >= 1.0 {
            0.0
        } else if c < 0.0 {
            1.0 - self.eval(PI - c.acos()) / self.total
        } else {
            self.eval(c.acos()) / self.total
        }
    }
}

/// `V(x0, R) = int_{B(x0, R) in the half-space} B dx` for an axial point
/// `x0 = (rho0, xn0)` (distance from the axis, height above the boundary).
pub fn volume(weight: &RegularizedWeight, x0: (f64, f64), radius: f64, rel_tol: f64) -> Result<f64> {
    let (rho0, xn0) = x0;
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("radius must be positive, got {radius}")));
    }
    if rho0 < 0.0 || xn0 < 0.0 {
        return Err(Error::Domain("x0 must lie in the closed half-space".into()));
    }
    let n = weight.n;
    let area = sphere_area(n - 2);
    let caps = SinPowerIntegral::new(n - 3);
    let lo = (xn0 - radius).max(0.0);
    let hi = xn0 + radius;
    // crude lower scale of the answer, so that slices far below it stop early
    let far = rho0.hypot(xn0) + radius;
    let scale = weight.b(far, 0.0).min(weight.b(far, FRAC_PI_2)) * radius.powi(n as i32 - 1);
    let abs_floor = 1e-3 * rel_tol * scale;
    let slice = |xn: f64| -> Result<f64> {
        let h2 = radius * radius - (xn - xn0) * (xn - xn0);
        if h2 <= 0.0 {
            return Ok(0.0);
        }
        let rr = h2.sqrt();
        let a = (rho0 - rr).max(0.0);
        let b = rho0 + rr;
        let mut breaks = vec![a];
        let full = rr - rho0;
        if full > a && full < b {
            breaks.push(full);
        }
        breaks.push(b);
        let f = |rho: f64| {
            if rho <= 0.0 {
                return 0.0;
            }
            let r = rho.hypot(xn);
            let th = rho.atan2(xn);
            weight.b(r, th) * rho.powi(n as i32 - 2) * caps.cap_fraction(rho, rho0, rr)
        };
        quad::integrate_piecewise(f, &breaks, abs_floor, 0.1 * rel_tol)
    };
    let mut breaks = vec![lo];
    if xn0 > lo && xn0 < hi {
        breaks.push(xn0);
    }
    breaks.push(hi);
    let err = std::cell::RefCell::new(None);
    let v = quad::integrate_piecewise(
        |xn| match slice(xn) {
            Ok(v) => v,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                0.0
            }
        },
        &breaks,
        0.0,
        rel_tol,
    )?;
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(area * v)
}

/// One `(x0, R)` sample of the doubling check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoublingSample {
    pub rho0: f64,
    pub xn0: f64,
    pub radius: f64,
    pub volume: f64,
    pub ratio: f64,
    /// `V / (R^n (|x0| + R)^{-2 gamma})`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingReport {
    pub samples: Vec<DoublingSample>,
    pub max_ratio: f64,
    pub c1: f64,
    pub c2: f64,
}

pub fn doubling_check(
    weight: &RegularizedWeight,
    points: &[(f64, f64, f64)],
    rel_tol: f64,
) -> Result<DoublingReport> {
    let n = weight.n as f64;
    let samples = points
        .par_iter()
        .map(|&(rho0, xn0, radius)| {
            let v = volume(weight, (rho0, xn0), radius, rel_tol)?;
            let v2 = volume(weight, (rho0, xn0), 2.0 * radius, rel_tol)?;
            let norm = rho0.hypot(xn0);
            let model = radius.powf(n) * (norm + radius).powf(-2.0 * weight.gamma);
            Ok(DoublingSample { rho0, xn0, radius, volume: v, ratio: v2 / v, normalized: v / model })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let c1 = samples.iter().map(|s| s.normalized).fold(f64::INFINITY, f64::min);
    let c2 = samples.iter().map(|s| s.normalized).fold(0.0, f64::max);
    Ok(DoublingReport { samples, max_ratio, c1, c2 })
}

/// `n_samples` pseudo-random `(rho0, xn0, R)` with log-uniform `|x0|` and `R`.
pub fn doubling_samples(n_samples: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let norm = 10f64.powf(rng.gen_range(-2.0..1.0));
            let th = rng.gen_range(0.0..FRAC_PI_2);
            let radius = 10f64.powf(rng.gen_range(-2.0..1.0));
            (norm * th.sin(), norm * th.cos(), radius)
        })
        .collect()
}

/// Radial layout of the heat grid: geometric from `epsilon / 8` to
/// `log_end`, then uniform spacing `h_far` out to `r_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatGridOptions {
    pub log_end: f64,
    pub log_step: f64,
    pub h_far: f64,
    pub r_max: f64,
    pub nt: usize,
}

impl Default for HeatGridOptions {
    fn default() -> Self {
        HeatGridOptions { log_end: 1.0, log_step: 0.05, h_far: 0.05, r_max: 16.0, nt: 33 }
    }
}

impl HeatGridOptions {
    pub fn refined(&self) -> Self {
        HeatGridOptions {
            log_step: 0.5 * self.log_step,
            h_far: 0.5 * self.h_far,
            nt: 2 * self.nt - 1,
            ..*self
        }
    }

    pub fn build(&self, n: usize, epsilon: f64) -> Result<AxialGrid> {
        if !(epsilon > 0.0) {
            return Err(Error::Domain("the heat grid needs a regularized weight (epsilon > 0)".into()));
        }
        let r_min = epsilon / 8.0;
        if !(self.log_end > r_min) || !(self.r_max > self.log_end) {
            return Err(Error::Domain("need epsilon / 8 < log_end < r_max".into()));
        }
        let steps = ((self.log_end / r_min).ln() / self.log_step).ceil() as usize;
        let mut r = AxialGrid::geometric_r(r_min, self.log_end, steps + 1);
        let far = ((self.r_max - self.log_end) / self.h_far).ceil() as usize;
        let h = (self.r_max - self.log_end) / far as f64;
        r.extend((1..=far).map(|i| self.log_end + i as f64 * h));
        AxialGrid::new(n, r, AxialGrid::uniform_theta(self.nt), 0.0)
    }
}

/// Discretized weighted heat operator on a fixed grid.
#[derive(Debug, Clone)]
pub struct WeightedHeat {
    pub weight: RegularizedWeight,
    pub op: FvOperator,
}

/// Diagnostics at one time level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatDiagnostics {
    pub t: f64,
    /// `int z B`.
    pub mass: f64,
    /// `int |z| B`.
    pub l1: f64,
    /// `||z||_B`.
    pub l2: f64,
    pub sup: f64,
    /// `||grad z||_B^2`.
    pub grad2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatRun {
    pub dt: f64,
    pub initial: AxialField,
    pub times: Vec<f64>,
    pub states: Vec<AxialField>,
    pub diagnostics: Vec<HeatDiagnostics>,
    /// Largest relative defect of the discrete energy identity
    /// `|z'|^2 - |z|^2 + |z' - z|^2 = -2 dt |grad z'|^2`.
    pub energy_defect: f64,
}

impl HeatRun {
    pub fn final_state(&self) -> &AxialField {
        self.states.last().unwrap_or(&self.initial)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("t,mass,l1,l2,sup,grad2\n");
        for d in &self.diagnostics {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                d.t, d.mass, d.l1, d.l2, d.sup, d.grad2
            ));
        }
        s
    }

    /// `max_t sqrt(t) ||grad z(t)||_B / ||z_0||_B` over the recorded steps.
    pub fn gradient_constant(&self) -> f64 {
        let l2_0 = self.diagnostics.first().map(|d| d.l2).unwrap_or(0.0);
        if l2_0 == 0.0 {
            return 0.0;
        }
        self.diagnostics
            .iter()
            .filter(|d| d.t > 0.0)
            .map(|d| d.t.sqrt() * d.grad2.sqrt() / l2_0)
            .fold(0.0, f64::max)
    }
}

/// Backward Euler stepper with a fixed step.
pub struct Stepper<'a> {
    heat: &'a WeightedHeat,
    dt: f64,
    lu: BandedLu,
}

impl Stepper<'_> {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, z: &mut [f64]) {
        for (v, m) in z.iter_mut().zip(&self.heat.op.volume) {
            *v *= m;
        }
        self.lu.solve(z);
    }
}

impl WeightedHeat {
    pub fn new(weight: RegularizedWeight, grid: &AxialGrid) -> Result<Self> {
        if grid.n != weight.n {
            return Err(Error::GridMismatch(format!("grid is for n = {}, weight for n = {}", grid.n, weight.n)));
        }
        let op = FvOperator::new(grid, |r, t| weight.b(r, t));
        if op.volume.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("weighted control volumes must be positive".into()));
        }
        Ok(WeightedHeat { weight, op })
    }

    pub fn grid(&self) -> &AxialGrid {
        &self.op.grid
    }

    pub fn stepper(&self, dt: f64) -> Result<Stepper<'_>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::StepSize { t: 0.0, reason: format!("time step must be positive, got {dt}") });
        }
        let mut m = self.op.flux_matrix();
        for (k, v) in self.op.volume.iter().enumerate() {
            for c in k.saturating_sub(self.grid().nt())..(k + self.grid().nt() + 1).min(self.op.volume.len()) {
                let a = m.get(k, c);
                if a != 0.0 {
                    m.set(k, c, -dt * a);
                }
            }
            m.add(k, k, *v);
        }
        Ok(Stepper { heat: self, dt, lu: m.factor()? })
    }

    pub fn diagnostics(&self, t: f64, z: &[f64]) -> HeatDiagnostics {
        let vol = &self.op.volume;
        let mass = z.iter().zip(vol).map(|(a, v)| a * v).sum();
        let l1 = z.iter().zip(vol).map(|(a, v)| a.abs() * v).sum();
        let l2 = z.iter().zip(vol).map(|(a, v)| a * a * v).sum::<f64>().sqrt();
        let sup = z.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        HeatDiagnostics { t, mass, l1, l2, sup, grad2: self.op.energy(z) }
    }

    /// Evolve `z0` to `t_end` with step `dt` (shrunk so that it divides
    /// `t_end`), storing the states nearest to `samples`.
    pub fn run(&self, z0: &AxialField, t_end: f64, dt: f64, samples: &[f64]) -> Result<HeatRun> {
        z0.check_grid(self.grid())?;
        if z0.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("initial data must be finite".into()));
        }
        if !(t_end >= 0.0) {
            return Err(Error::Domain(format!("final time must be non-negative, got {t_end}")));
        }
        let steps = (t_end / dt).ceil().max(1.0) as usize;
        let dt = if t_end > 0.0 { t_end / steps as f64 } else { dt };
        let steps = if t_end > 0.0 { steps } else { 0 };
        let stepper = self.stepper(dt)?;
        let mut targets: Vec<(usize, f64)> = samples
            .iter()
            .map(|s| ((s / dt).round() as usize).min(steps))
            .map(|k| (k, k as f64 * dt))
            .collect();
        targets.sort_by_key(|t| t.0);
        targets.dedup_by_key(|t| t.0);

        let mut z = z0.values.clone();
        let mut diagnostics = vec![self.diagnostics(0.0, &z)];
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut next = 0;
        while next < targets.len() && targets[next].0 == 0 {
            times.push(0.0);
            states.push(z0.clone());
            next += 1;
        }
        let mut energy_defect = 0.0f64;
        for k in 1..=steps {
            let prev = z.clone();
            stepper.step(&mut z);
            let d = self.diagnostics(k as f64 * dt, &z);
            let prev_l2 = diagnostics.last().expect("non-empty").l2;
            let jump: f64 = z
                .iter()
                .zip(&prev)
                .zip(&self.op.volume)
                .map(|((a, b), v)| (a - b) * (a - b) * v)
                .sum();
            let lhs = d.l2 * d.l2 - prev_l2 * prev_l2 + jump;
            let rhs = -2.0 * dt * d.grad2;
            let scale = prev_l2 * prev_l2;
            if scale > 0.0 {
                energy_defect = energy_defect.max((lhs - rhs).abs() / scale);
            }
            diagnostics.push(d);
            while next < targets.len() && targets[next].0 == k {
                times.push(targets[next].1);
                states.push(AxialField { values: z.clone() });
                next += 1;
            }
        }
        Ok(HeatRun { dt, initial: z0.clone(), times, states, diagnostics, energy_defect })
    }

    /// Unit-mass data concentrated in the control volume of the node nearest
    /// to `(r, theta)`. Off the axis this is a ring source.
    pub fn point_source(&self, r: f64, theta: f64) -> Result<(AxialField, (f64, f64))> {
        let g = self.grid();
        if !(r >= 0.0) || r > g.r[g.nr() - 1] {
            return Err(Error::Domain(format!("source radius {r} outside the grid")));
        }
        // the innermost control volume contains the origin
        let (i, a) = AxialGrid::bracket(&g.r, r.max(g.r[0]))
            .ok_or_else(|| Error::Domain(format!("source radius {r} outside the grid")))?;
        let (j, b) = AxialGrid::bracket(&g.theta, theta.clamp(0.0, FRAC_PI_2))
            .ok_or_else(|| Error::Domain(format!("source angle {theta} outside the grid")))?;
        let (i, j) = (if a > 0.5 { i + 1 } else { i }, if b > 0.5 { j + 1 } else { j });
        let k = g.idx(i, j);
        let mut z = AxialField::zeros(g);
        z.values[k] = 1.0 / self.op.volume[k];
        Ok((z, (g.r[i], g.theta[j])))
    }
}

/// `k_gamma(xi, t) = (|xi| + sqrt t)^gamma`.
pub fn k_gamma(xi_norm: f64, t: f64, gamma: f64) -> f64 {
    (xi_norm + t.sqrt()).powf(gamma)
}

/// Distance in the meridian half-plane, which for a ring source is the
/// distance to the nearest point of the ring.
pub fn meridian_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ra, ta) = a;
    let (rb, tb) = b;
    (ra * ta.sin() - rb * tb.sin()).hypot(ra * ta.cos() - rb * tb.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelColumn {
    pub t: f64,
    pub mass: f64,
    /// Weighted mass within one unit of the outer boundary.
    pub leakage: f64,
    pub c_upper: f64,
    pub c_lower: f64,
    /// Largest `(p - c_upper env) / max p` over every node where `p` is
    /// above the noise floor; non-positive when the envelope holds.
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub source: (f64, f64),
    pub eps_hat: f64,
    /// Gaussian rate of the lower envelope `exp(-c3 |x - xi|^2 / t)`.
    pub c3: f64,
    /// Upper constant fitted over all probe times.
    pub c_upper: f64,
    pub c_lower: f64,
    pub max_violation: f64,
    pub columns: Vec<KernelColumn>,
}

/// Radius, in units of `sqrt t`, of the zone used to fit `c_upper`.
pub const UPPER_FIT_ZONE: f64 = 6.0;
/// Radius, in units of `sqrt t`, of the zone where the lower envelope is
/// asserted.
pub const LOWER_ZONE: f64 = 2.0;
/// Relative level below which kernel values are treated as noise.
pub const KERNEL_FLOOR: f64 = 1e-12;
/// Relative slack allowed for the fitted envelope; the fit attains equality
/// at its argmax, so a violation is only counted above round-off.
pub const ENVELOPE_SLACK: f64 = 1e-12;

impl KernelReport {
    /// Whether the upper envelope holds at every node and probe time.
    pub fn holds(&self) -> bool {
        self.max_violation <= ENVELOPE_SLACK && self.c_upper.is_finite() && self.c_upper > 0.0
    }
}

/// Empirical kernel `p(., xi, t)` from a mollified source, with the fitted
/// Gaussian envelopes. `c_upper` is fitted on `|x - xi| <= 6 sqrt t` over all
/// times and then checked at every node.
pub fn kernel_probe(
    heat: &WeightedHeat,
    xi: (f64, f64),
    t_list: &[f64],
    dt: f64,
    eps_hat: f64,
    c3: f64,
) -> Result<KernelReport> {
    let g = heat.grid();
    let (z0, src) = heat.point_source(xi.0, xi.1)?;
    let (i_src, j_src) = {
        let i = g.r.iter().position(|r| *r == src.0).expect("source node");
        let j = g.theta.iter().position(|t| *t == src.1).expect("source node");
        (i, j)
    };
    let h_local = {
        let dr = g.r[(i_src + 1).min(g.nr() - 1)] - g.r[i_src.saturating_sub(1)];
        let dth = g.theta[1] - g.theta[0];
        dr.max(src.0 * dth)
    };
    let t_min = t_list.iter().cloned().fold(f64::INFINITY, f64::min);
    if t_list.is_empty() || t_min.sqrt() < 2.0 * h_local {
        return Err(Error::Resolution(format!(
            "kernel at t = {t_min} is under-resolved by local spacing {h_local:.3e}"
        )));
    }
    let t_max = t_list.iter().cloned().fold(0.0, f64::max);
    let run = heat.run(&z0, t_max, dt, t_list)?;
    let n = g.n as f64;
    let gamma = heat.weight.gamma;
    let r_out = g.r[g.nr() - 1];
    let nt = g.nt();
    let _ = j_src;

    struct Probe {
        t: f64,
        mass: f64,
        leakage: f64,
        values: Vec<f64>,
        upper_env: Vec<f64>,
        lower_env: Vec<f64>,
        dist: Vec<f64>,
    }
    let probes: Vec<Probe> = run
        .times
        .iter()
        .zip(&run.states)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, z)| {
            let pref = k_gamma(src.0, t, gamma).powi(2) / t.powf(0.5 * n);
            let mut upper_env = Vec::with_capacity(g.len());
            let mut lower_env = Vec::with_capacity(g.len());
            let mut dist = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let x = (g.r[k / nt], g.theta[k % nt]);
                let d = meridian_distance(x, src);
                dist.push(d);
                upper_env.push(pref * (-d * d / (4.0 * (1.0 + eps_hat) * t)).exp());
                lower_env.push(pref * (-c3 * d * d / t).exp());
            }
            let mass = z.values.iter().zip(&heat.op.volume).map(|(a, v)| a * v).sum();
            let leakage = z
                .values
                .iter()
                .zip(&heat.op.volume)
                .enumerate()
                .filter(|(k, _)| g.r[k / nt] > r_out - 1.0)
                .map(|(_, (a, v))| a.abs() * v)
                .sum();
            Probe { t, mass, leakage, values: z.values.clone(), upper_env, lower_env, dist }
        })
        .collect();

    let mut c_upper = 0.0f64;
    let mut columns = Vec::new();
    for p in &probes {
        let zone = UPPER_FIT_ZONE * p.t.sqrt();
        let cu = p
            .values
            .iter()
            .zip(&p.upper_env)
            .zip(&p.dist)
            .filter(|(_, d)| **d <= zone)
            .map(|((v, e), _)| v / e)
            .fold(0.0, f64::max);
        let lz = LOWER_ZONE * p.t.sqrt();
        let cl = p
            .values
            .iter()
            .zip(&p.lower_env)
            .zip(&p.dist)
            .filter(|(_, d)| **d <= lz)
            .map(|((v, e), _)| v / e)
            .fold(f64::INFINITY, f64::min);
        c_upper = c_upper.max(cu);
        columns.push(KernelColumn {
            t: p.t,
            mass: p.mass,
            leakage: p.leakage,
            c_upper: cu,
            c_lower: cl,
            max_violation: 0.0,
        });
    }
    for (p, col) in probes.iter().zip(columns.iter_mut()) {
        let pmax = p.values.iter().cloned().fold(0.0, f64::max);
        let floor = KERNEL_FLOOR * pmax;
        col.max_violation = p
            .values
            .iter()
            .zip(&p.upper_env)
            .filter(|(v, _)| v.abs() > floor)
            .map(|(v, e)| (v - c_upper * e) / pmax)
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let c_lower = columns.iter().map(|c| c.c_lower).fold(f64::INFINITY, f64::min);
    let max_violation = columns.iter().map(|c| c.max_violation).fold(f64::NEG_INFINITY, f64::max);
    Ok(KernelReport { source: src, eps_hat, c3, c_upper, c_lower, max_violation, columns })
}

/// `||b||_C` with `C = B rho`, `rho = exp(-|y|^2 / 4)`.
pub fn norm_c(heat: &WeightedHeat, b: &AxialField) -> f64 {
    let g = heat.grid();
    let nt = g.nt();
    b.values
        .iter()
        .zip(&heat.op.volume)
        .enumerate()
        .map(|(k, (v, m))| {
            let r = g.r[k / nt];
            v * v * m * (-0.25 * r * r).exp()
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub s: Vec<f64>,
    /// `sup_{|y| < e^{s/2}} |e^{A_0 s} b_0| (1 - e^{-s})^{n/2} / ||b_0||_C`.
    pub constants: Vec<f64>,
    pub sup: Vec<f64>,
    pub norm_c: f64,
    /// Largest relative deviation of a constant from their mean.
    pub spread: f64,
    /// Log-log slope of `sup` against `1 - e^{-s}`; the bound has `-n/2`.
    pub slope: f64,
}

/// Rescaled flow `e^{A_0 s} b_0 = e^{shift s} z(e^{-s/2} y, 1 - e^{-s})`,
/// so `|y| < e^{s/2}` is `|x| < 1`. The self-similar change of variables
/// uses `shift = (gamma - m) / 2`.
pub fn smoothing_check(
    heat: &WeightedHeat,
    b0: &AxialField,
    s_list: &[f64],
    dt: f64,
    shift: f64,
) -> Result<SmoothingReport> {
    if s_list.is_empty() || s_list.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("smoothing times must be positive".into()));
    }
    let g = heat.grid();
    let n = g.n as f64;
    let nc = norm_c(heat, b0);
    if !(nc > 0.0) {
        return Err(Error::Domain("b0 has zero C-norm".into()));
    }
    let ts: Vec<f64> = s_list.iter().map(|s| 1.0 - (-s).exp()).collect();
    let t_end = ts.iter().cloned().fold(0.0, f64::max);
    // every sample time must be a whole number of steps
    let run = heat.run(b0, t_end, dt, &ts)?;
    let nt = g.nt();
    let mut sup = Vec::new();
    let mut constants = Vec::new();
    for (&t, &s) in ts.iter().zip(s_list) {
        let k = run
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .expect("sampled");
        let z = &run.states[k];
        let m = z
            .values
            .iter()
            .enumerate()
            .filter(|(kk, _)| g.r[kk / nt] < 1.0)
            .fold(0.0f64, |a, (_, v)| a.max(v.abs()))
            * (shift * s).exp();
        sup.push(m);
        constants.push(m * (1.0 - (-s).exp()).powf(0.5 * n) / nc);
    }
    let mean = constants.iter().sum::<f64>() / constants.len() as f64;
    let spread = constants.iter().map(|c| (c / mean - 1.0).abs()).fold(0.0, f64::max);
    let slope = if s_list.len() >= 2 {
        let pts: Vec<(f64, f64)> = ts.iter().zip(&sup).map(|(t, v)| (t.ln(), v.ln())).collect();
        crate::spectral::linear_fit(&pts).0
    } else {
        f64::NAN
    };
    Ok(SmoothingReport { s: s_list.to_vec(), constants, sup, norm_c: nc, spread, slope })
}

/// Smooth pseudo-random field with values in `[-1, 1]`.
pub fn random_bounded_field(grid: &AxialGrid, seed: u64) -> AxialField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..4.0f64).floor() * 2.0,
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let total: f64 = terms.iter().map(|t| t.0.abs()).sum();
    AxialField::from_fn(grid, |r, th| {
        terms.iter().map(|(a, k, m, p)| a * (k * r + m * th + p).cos()).sum::<f64>() / total
    })
}

/// Largest difference of `z(t)` on `|x| > 2 eps` between the weights at
/// `eps` and `eps / 2`, both on the grid built for `eps / 2`.
pub fn epsilon_sensitivity(
    weight: &RegularizedWeight,
    grid_opts: &HeatGridOptions,
    z0: impl Fn(f64, f64) -> f64 + Sync,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let eps = weight.epsilon;
    let grid = grid_opts.build(weight.n, 0.5 * eps)?;
    let a = WeightedHeat::new(weight.clone(), &grid)?;
    let b = WeightedHeat::new(weight.with_epsilon(0.5 * eps)?, &grid)?;
    let init = AxialField::from_fn(&grid, &z0);
    let (ra, rb) = rayon::join(|| a.run(&init, t, dt, &[t]), || b.run(&init, t, dt, &[t]));
    let (za, zb) = (ra?, rb?);
    let nt = grid.nt();
    Ok(za
        .final_state()
        .values
        .iter()
        .zip(&zb.final_state().values)
        .enumerate()
        .filter(|(k, _)| grid.r[k / nt] > 2.0 * eps)
        .map(|(_, (x, y))| (x - y).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_e1() -> AngularSamples {
        // constant profile normalized in L^2(S^{n-2} sin^{n-2}) is irrelevant here
        let theta: Vec<f64> = (0..=64).map(|i| FRAC_PI_2 * i as f64 / 64.0).collect();
        AngularSamples { values: vec![1.0; theta.len()], derivs: vec![0.0; theta.len()], theta }
    }

    #[test]
    fn cutoff_is_smooth_step() {
        assert_eq!(cutoff(0.2), 0.0);
        assert_eq!(cutoff(0.8), 1.0);
        assert_relative_eq!(cutoff(0.5), 0.5, epsilon = 1e-15);
        let h = 1e-6;
        for x in [0.3, 0.45, 0.6, 0.7] {
            let fd = (cutoff(x + h) - cutoff(x - h)) / (2.0 * h);
            assert_relative_eq!(cutoff_deriv(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn cap_fraction_limits() {
        let caps = SinPowerIntegral::new(2);
        assert_eq!(caps.cap_fraction(1.0, 0.5, 2.0), 1.0);
        assert_eq!(caps.cap_fraction(3.0, 0.5, 1.0), 0.0);
        // the equatorial cut takes half the sphere
        assert_relative_eq!(caps.cap_fraction(1.0, 1.0, 2f64.sqrt()), 0.5, epsilon = 1e-14);
        assert_relative_eq!(SinPowerIntegral::new(4).total, 3.0 * PI / 8.0, epsilon = 1e-14);
        // small caps keep their leading power
        let k13 = SinPowerIntegral::new(13);
        assert_relative_eq!(k13.eval(1e-3), 1e-42 / 14.0, max_relative = 1e-6);
    }

    #[test]
    fn unweighted_volume_is_half_ball() {
        // gamma tiny and flat e1: B is almost 1
        let w = RegularizedWeight::exact(5, 1e-12, flat_e1()).unwrap();
        let v = volume(&w, (0.0, 0.0), 1.0, 1e-10).unwrap();
        let ball = PI * PI * 8.0 / 15.0;
        assert_relative_eq!(v, 0.5 * ball, max_relative = 1e-8);
        let v2 = volume(&w, (0.7, 3.0), 1.0, 1e-10).unwrap();
        assert_relative_eq!(v2, ball, max_relative = 1e-8);
    }

    #[test]
    fn regularized_weight_is_flat_near_origin() {
        let w = RegularizedWeight::new(16, 0.1, 2.0, flat_e1()).unwrap();
        assert_relative_eq!(w.sigma_eps(0.01, 0.3), 0.1f64.powf(-2.0), max_relative = 1e-14);
        assert_relative_eq!(w.sigma_eps(0.2, 0.3), w.sigma(0.2, 0.3), max_relative = 1e-14);
        assert!(RegularizedWeight::new(6, 0.1, 2.0, flat_e1()).is_err());
    }
}
