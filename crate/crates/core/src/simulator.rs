//! Rescaled flow `phi_s = Delta phi - (y/2) grad phi - (m/2) phi` with
//! `d_nu phi = phi^q` on the half-space boundary.
//!
//! The flow is written as `(1/rho) div(rho grad phi) - (m/2) phi` with the
//! Gaussian `rho = exp(-|y|^2/4)` and discretized with the weighted finite
//! volumes of [`crate::fv`], so `(., .)_rho` projections are exact sums over
//! control volumes. Steps are BDF2 with a chord-Newton solve for the boundary
//! flux, falling back to backward Euler when a step would lose positivity.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::{self, Problem};
use crate::banded::{Banded, BandedLu};
use crate::error::{Error, Result};
use crate::fv::{AxialField, AxialGrid, FvOperator};
use crate::spectral::{self, Eigensystem};
use crate::stationary::{self, ExtrapolatedK, StationaryContext, StationaryField, StationaryOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameOptions {
    /// Index `l` of the driving mode `phi_1l`; the first `l` with
    /// `lambda_1l > 0` when absent.
    pub ell: Option<usize>,
    pub s1: f64,
    pub a: f64,
    pub a_prime: f64,
    pub sigma_exp: Option<f64>,
    pub varrho: Option<f64>,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions { ell: None, s1: 8.0, a: 0.5, a_prime: 0.02, sigma_exp: None, varrho: None }
    }
}

/// Parameters of the construction around one driving mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFrame {
    pub n: usize,
    pub q: f64,
    pub m: f64,
    pub gamma: f64,
    pub mu1: f64,
    /// Boundary coefficient `K = q V(pi/2)^{q-1}`.
    pub k_boundary: f64,
    pub c_h: f64,
    pub ell: usize,
    pub lambda_star: f64,
    pub omega: f64,
    pub s1: f64,
    pub a: f64,
    pub a_prime: f64,
    /// `e^{a omega s1}`.
    pub big_k: f64,
    /// `e^{a' omega s1}`.
    pub big_h: f64,
    pub sigma_exp: f64,
    pub varrho: f64,
    /// Modes with `lambda_ij < lambda*`.
    pub pi: Vec<(usize, usize)>,
    /// Modes with `lambda_ij <= lambda*`.
    pub pi_bar: Vec<(usize, usize)>,
    /// Small-`r` coefficient of `phi_1l`.
    pub c_1ell: f64,
    /// Envelope constant of `sum_Pi |phi_ij|`.
    pub c1: f64,
    pub eps0: f64,
    pub eps1: f64,
    /// Far-field coefficient of `U_1`.
    pub k1: f64,
    pub alpha: f64,
    pub m0: f64,
    pub beta0: f64,
}

impl SpectralFrame {
    /// `H e^{-omega s1}`, edge of the exact inner profile.
    pub fn inner_radius(&self) -> f64 {
        self.big_h * (-self.omega * self.s1).exp()
    }

    pub fn transition_radius(&self) -> f64 {
        (self.big_h + 1.0) * (-self.omega * self.s1).exp()
    }

    /// `K e^{-omega s}`.
    pub fn k_radius(&self, s: f64) -> f64 {
        self.big_k * (-self.omega * s).exp()
    }

    /// `e^{sigma s}`.
    pub fn sigma_radius(&self, s: f64) -> f64 {
        (self.sigma_exp * s).exp()
    }

    /// `e^{varrho s1}`, where the initial data leave `U_inf`.
    pub fn varrho_radius(&self) -> f64 {
        (self.varrho * self.s1).exp()
    }

    /// Radius of the admissible ball `|d| < eps1 e^{-lambda* s1}`.
    pub fn d_ball(&self) -> f64 {
        self.eps1 * (-self.lambda_star * self.s1).exp()
    }

    /// Barrier scale `beta0 e^{m omega s}`.
    pub fn beta(&self, s: f64) -> f64 {
        self.beta0 * (self.m * self.omega * s).exp()
    }

    /// Predicted growth rate `m omega` of `||phi||_inf`.
    pub fn target_rate(&self) -> f64 {
        self.m * self.omega
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.lambda_star > 0.0
            && self.omega > 0.0
            && self.big_h < self.big_k
            && self.sigma_exp < self.varrho
            && self.varrho < 0.5
            && self.m0 > 1.0
            && self.pi.contains(&(1, 1));
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("frame invariants violated: {self:?}")))
        }
    }
}

/// Evaluate `sum_Pi |phi_ij| / (e_1 (r^{-gamma} + r^{2 lambda* - m}))` on a
/// logarithmic sample and return its maximum.
fn envelope_constant(es: &Eigensystem, pi: &[(usize, usize)], lambda_star: f64) -> f64 {
    let gamma = es.gamma();
    let m = es.problem.m;
    let e1 = es.angular_mode(1);
    let modes: Vec<_> = pi.iter().filter_map(|&(i, j)| es.mode(i, j)).collect();
    let thetas: Vec<f64> = (0..=64).map(|k| FRAC_PI_2 * k as f64 / 64.0).collect();
    (0..=600)
        .into_par_iter()
        .map(|k| {
            let r = 10f64.powf(-4.0 + 7.0 * k as f64 / 600.0);
            let env_r = r.powf(-gamma) + r.powf(2.0 * lambda_star - m);
            thetas
                .iter()
                .map(|&t| {
                    let sum: f64 = modes.iter().map(|md| es.phi(md, r, t).abs()).sum();
                    sum / (e1.eval(t) * env_r)
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Assemble the frame from the eigensystem and the far-field coefficient
/// `k1` of `U_1`.
pub fn build_frame(es: &Eigensystem, k1: f64, opts: &FrameOptions) -> Result<SpectralFrame> {
    let p = &es.problem;
    let gamma = es.gamma();
    let mu1 = gamma - p.m;
    let ell = match opts.ell {
        Some(l) => l,
        None => {
            // lambda_1j = j - 1 - (gamma - m)/2
            let mut j = 1;
            while spectral::eigenvalue(j, &es.exponents[0], p) <= 0.0 {
                j += 1;
            }
            j
        }
    };
    let driving = es.mode(1, ell).ok_or_else(|| {
        Error::Domain(format!("mode (1, {ell}) is outside the inventory; extend the eigensystem"))
    })?;
    let lambda_star = driving.lambda;
    if !(lambda_star > 0.0) {
        return Err(Error::Domain(format!("lambda_1{ell} = {lambda_star} is not positive")));
    }
    let omega = lambda_star / mu1;
    let lower = (lambda_star / (2.0 * lambda_star + 1.0)).max(0.5 / p.q);
    assert!(lower < 0.5, "the sigma interval is never empty for lambda* > 0, q > 1");
    let sigma_exp = opts.sigma_exp.unwrap_or(0.5 * (lower + 0.5));
    if !(sigma_exp > lower && sigma_exp < 0.5) {
        return Err(Error::Domain(format!("sigma must lie in ({lower}, 1/2), got {sigma_exp}")));
    }
    let varrho = opts.varrho.unwrap_or(0.5 * (sigma_exp + 0.5));
    if !(varrho > sigma_exp && varrho < 0.5) {
        return Err(Error::Domain(format!("varrho must lie in ({sigma_exp}, 1/2), got {varrho}")));
    }
    if !(opts.a > 0.0 && opts.a < 1.0 && opts.a_prime > 0.0 && opts.a_prime < opts.a) {
        return Err(Error::Domain(format!("need 0 < a' < a < 1, got a = {}, a' = {}", opts.a, opts.a_prime)));
    }
    if !(opts.s1 > 0.0) {
        return Err(Error::Domain(format!("s1 must be positive, got {}", opts.s1)));
    }
    let modes_below: Vec<(usize, usize)> =
        es.modes.iter().filter(|md| md.lambda < lambda_star).map(|md| (md.i, md.j)).collect();
    let pi_bar: Vec<(usize, usize)> =
        es.modes.iter().filter(|md| md.lambda <= lambda_star).map(|md| (md.i, md.j)).collect();
    let c_1ell = driving.c_small;
    let c1 = envelope_constant(es, &modes_below, lambda_star);
    let eps0 = c_1ell / 4.0;
    let eps1 = eps0 / (2.0 * c1);
    let alpha = stationary::calibrate_alpha(k1, c_1ell, p, mu1)?;
    let m0 = angular::m0(p, es.k(), es.c_h);
    // k_beta < k_alpha / 2 exactly when beta > alpha 2^{m / mu1}
    let beta0 = alpha * 2f64.powf(p.m / mu1) * (1.0 + 1e-6);
    let frame = SpectralFrame {
        n: p.n,
        q: p.q,
        m: p.m,
        gamma,
        mu1,
        k_boundary: es.k(),
        c_h: es.c_h,
        ell,
        lambda_star,
        omega,
        s1: opts.s1,
        a: opts.a,
        a_prime: opts.a_prime,
        big_k: (opts.a * omega * opts.s1).exp(),
        big_h: (opts.a_prime * omega * opts.s1).exp(),
        sigma_exp,
        varrho,
        pi: modes_below,
        pi_bar,
        c_1ell,
        c1,
        eps0,
        eps1,
        k1,
        alpha,
        m0,
        beta0,
    };
    frame.check()?;
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    /// Angular intervals for profile and eigenfunctions.
    pub intervals: usize,
    pub stationary: StationaryOptions,
    pub frame: FrameOptions,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { intervals: 400, stationary: StationaryOptions::default(), frame: FrameOptions::default() }
    }
}

/// Spectral data, the regular profile `U_1` and the frame for one `(n, q)`.
#[derive(Debug, Clone)]
pub struct Model {
    pub es: Eigensystem,
    pub u1: StationaryField,
    pub k1: ExtrapolatedK,
    pub frame: SpectralFrame,
}

impl Model {
    pub fn build(p: &Problem, opts: &ModelOptions) -> Result<Self> {
        let mut es = Eigensystem::build(p, opts.intervals, None, 8)?;
        if let Some(l) = opts.frame.ell {
            if es.mode(1, l).is_none() {
                let cap = spectral::eigenvalue(l, &es.exponents[0], p) + 1.0;
                es = Eigensystem::build(p, opts.intervals, Some(cap), 8)?;
            }
        }
        let ctx = StationaryContext::new(*p, opts.intervals)?;
        let (u1, k1) = stationary::solve_u_alpha_extrapolated(&ctx, 1.0, &opts.stationary)?;
        let frame = build_frame(&es, k1.value, &opts.frame)?;
        Ok(Model { es, u1, k1, frame })
    }

    pub fn u_inf(&self, r: f64, theta: f64) -> f64 {
        self.es.profile.eval(theta) * r.powf(-self.frame.m)
    }

    /// `U_beta(y) = beta U_1(beta^{q-1} y)`.
    pub fn u_beta(&self, beta: f64, r: f64, theta: f64) -> Result<f64> {
        stationary::u_alpha(&self.u1, beta, r, theta)
    }

    pub fn phi_mode(&self, (i, j): (usize, usize), r: f64, theta: f64) -> Result<f64> {
        let md = self
            .es
            .mode(i, j)
            .ok_or_else(|| Error::Domain(format!("mode ({i}, {j}) not in the inventory")))?;
        Ok(self.es.phi(md, r, theta))
    }
}

/// Radial layout of the simulation grid: uniform `h_core` on `[0, core]`,
/// then spacing growing by `ratio` up to `h_max`. The geometric stretch keeps
/// the shrinking inner profile resolved at a fixed relative spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimGridOptions {
    pub h_core: f64,
    pub core: f64,
    pub ratio: f64,
    pub h_max: f64,
    /// Outer radius; when absent the grid reaches 4 past both `e^{varrho s1}`
    /// and `e^{sigma (s1 + horizon)}`.
    pub r_max: Option<f64>,
    pub nt: usize,
    /// Angular refinement towards the boundary, in `[0, 1)`.
    pub theta_grading: f64,
    /// Time after `s1` that the outer region must stay on the grid.
    pub horizon: f64,
}

impl Default for SimGridOptions {
    fn default() -> Self {
        SimGridOptions { h_core: 0.0005, core: 0.01, ratio: 1.02, h_max: 0.05, r_max: None, nt: 33, theta_grading: 0.7, horizon: 3.0 }
    }
}

/// Cells required inside the exact inner profile.
pub const MIN_INNER_CELLS: usize = 8;

impl SimGridOptions {
    fn outer_radius(&self, frame: &SpectralFrame) -> f64 {
        self.r_max.unwrap_or(frame.varrho_radius().max(frame.sigma_radius(frame.s1 + self.horizon)) + 4.0)
    }

    /// Adjust `h_max` so the grid has about `nr` radial nodes.
    pub fn with_radial_count(&self, frame: &SpectralFrame, nr: usize) -> Result<Self> {
        let r_max = self.outer_radius(frame);
        let count = |h: f64| AxialGrid::graded_r(self.h_core, self.core, self.ratio, h, r_max).len();
        let (mut lo, mut hi) = (self.h_core, r_max);
        if count(lo) < nr {
            return Err(Error::Config(format!("{nr} radial nodes exceed the finest layout ({})", count(lo))));
        }
        if count(hi) > nr {
            return Err(Error::Config(format!("{nr} radial nodes are fewer than the core needs ({})", count(hi))));
        }
        for _ in 0..60 {
            let mid = (lo * hi).sqrt();
            if count(mid) > nr {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(SimGridOptions { h_max: hi, ..*self })
    }

    pub fn build(&self, frame: &SpectralFrame) -> Result<AxialGrid> {
        let r_max = self.outer_radius(frame);
        if !(r_max > frame.varrho_radius() + 1.0) {
            return Err(Error::Domain(format!(
                "outer radius {r_max} must exceed e^(varrho s1) + 1 = {}",
                frame.varrho_radius() + 1.0
            )));
        }
        let r = AxialGrid::graded_r(self.h_core, self.core, self.ratio, self.h_max, r_max);
        let inner = frame.inner_radius();
        let cells = r.iter().filter(|x| **x < inner).count();
        if cells < MIN_INNER_CELLS {
            return Err(Error::Resolution(format!(
                "inner region r < {inner:.4e} holds {cells} radial nodes; need {MIN_INNER_CELLS}"
            )));
        }
        AxialGrid::new(frame.n, r, AxialGrid::boundary_graded_theta(self.nt, self.theta_grading), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveOptions {
    pub dt: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Record margins and projections every this many steps.
    pub output_every: usize,
    /// Subtract the discrete residual of `U_inf` where the solution is
    /// close to it.
    pub well_balanced: bool,
    pub stop_on_exit: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            dt: 0.01,
            newton_tol: 1e-10,
            max_newton: 40,
            output_every: 5,
            well_balanced: true,
            stop_on_exit: false,
        }
    }
}

/// Signed relative margins of the three-region condition; positive means
/// strictly inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMargins {
    /// `min (U_inf - phi) / U_inf` for `r < K e^{-omega s1}`.
    pub inner: f64,
    /// `min 1 - |phi - U_inf + e^{-lambda* s} phi_1l| / (eps0 e^{-lambda* s} e_1 (r^{-gamma} + r^{2 lambda* - m}))`
    /// for `K e^{-omega s} < r < e^{sigma s}`.
    pub middle: f64,
    /// Radius where `middle` is attained.
    pub middle_r: f64,
    /// `min 1 - |phi| / (m0 U_inf)` for `r > e^{sigma s}`.
    pub outer: f64,
    /// `min (U_beta(s) - phi) / U_beta(s)` for `r < K e^{-omega s}`.
    pub barrier: f64,
    /// Range of `(U_inf - phi) / (e^{-lambda* s} c_1l e_1 r^{-gamma})` at
    /// `r = K e^{-omega s}`; the region condition keeps it in `(1/2, 3/2)`.
    pub band: (f64, f64),
}

impl RegionMargins {
    pub fn in_a(&self) -> bool {
        self.inner > 0.0 && self.middle > 0.0 && self.outer > 0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub s: f64,
    pub phi: AxialField,
    pub d: Vec<f64>,
    pub margins: RegionMargins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub s: f64,
    pub sup: f64,
    pub margins: RegionMargins,
    /// Projections over `Pi`.
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub d: Vec<f64>,
    pub points: Vec<TrajectoryPoint>,
    /// First recorded time outside the region.
    pub exit_s: Option<f64>,
    pub final_state: SimState,
    /// Steps redone with backward Euler to keep positivity.
    pub fallback_steps: usize,
    pub newton_iterations: usize,
    pub factorizations: usize,
}

impl Trajectory {
    pub fn csv(&self, pi: &[(usize, usize)]) -> String {
        let mut s = String::from("s,sup_phi,margins_inner,margins_mid,margins_outer,margin_barrier");
        for (i, j) in pi {
            s.push_str(&format!(",P_{i}_{j}"));
        }
        s.push('\n');
        for pt in &self.points {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                pt.s, pt.sup, pt.margins.inner, pt.margins.middle, pt.margins.outer, pt.margins.barrier
            ));
            for v in &pt.p {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn sup_series(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.s, p.sup)).collect()
    }

    pub fn final_projection(&self) -> &[f64] {
        &self.points.last().expect("trajectories record their end").p
    }
}

/// Radius at which a pole node samples a field behaving like `r^{-gamma}`,
/// so that the node value is the cell average.
fn pole_radius(grid: &AxialGrid, gamma: f64) -> f64 {
    let rf = grid.r_faces()[1];
    let n = grid.n as f64;
    rf * (n / (n - gamma)).powf(-1.0 / gamma)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// `D^{-1} (c M - dt A + diag(extra))` factored, with `D = M`.
fn factor_scaled(op: &FvOperator, dt: f64, c: f64, extra: &[f64]) -> Result<BandedLu> {
    let nt = op.grid.nt();
    let a = op.flux_matrix();
    let len = op.len();
    let mut m = Banded::zeros(len, nt, nt);
    for k in 0..len {
        let inv = 1.0 / op.volume[k];
        for col in k.saturating_sub(nt)..(k + nt + 1).min(len) {
            let v = a.get(k, col);
            if v != 0.0 {
                m.set(k, col, -dt * v * inv);
            }
        }
        m.add(k, k, c + extra[k] * inv);
    }
    m.factor()
}

/// Gaussian-weighted finite volumes with every row divided by its own
/// control volume. Coefficients are ratios `rho(face) / rho(node)`, which stay
/// of order one where `rho` itself underflows.
#[derive(Debug, Clone)]
pub struct GaussianOperator {
    pub grid: AxialGrid,
    /// Weighted volumes for `(., .)_rho`; zero where `rho` underflows.
    pub volume: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
    ang_lo: Vec<f64>,
    ang_hi: Vec<f64>,
    /// Boundary measure over volume at each boundary node.
    pub boundary: Vec<f64>,
    /// Unweighted `int r^{n-3}` boundary measure over volume.
    pub boundary_inv_r: Vec<f64>,
}

impl GaussianOperator {
    pub fn new(grid: &AxialGrid) -> Self {
        let geo = FvOperator::new(grid, |_, _| 1.0);
        let (nr, nt) = (grid.nr(), grid.nt());
        let rf = grid.r_faces();
        let lw = |r: f64| -0.25 * r * r;
        let mut up = vec![0.0; (nr - 1) * nt];
        let mut down = vec![0.0; (nr - 1) * nt];
        for i in 0..nr - 1 {
            let (a, b) = ((lw(rf[i + 1]) - lw(grid.r[i])).exp(), (lw(rf[i + 1]) - lw(grid.r[i + 1])).exp());
            for j in 0..nt {
                let c = geo.radial[i * nt + j];
                up[i * nt + j] = c * a / geo.volume[grid.idx(i, j)];
                down[i * nt + j] = c * b / geo.volume[grid.idx(i + 1, j)];
            }
        }
        let mut ang_lo = vec![0.0; nr * (nt - 1)];
        let mut ang_hi = vec![0.0; nr * (nt - 1)];
        for i in 0..nr {
            for j in 0..nt - 1 {
                let c = geo.angular[i * (nt - 1) + j];
                ang_lo[i * (nt - 1) + j] = c / geo.volume[grid.idx(i, j)];
                ang_hi[i * (nt - 1) + j] = c / geo.volume[grid.idx(i, j + 1)];
            }
        }
        let boundary = (0..nr).map(|i| geo.boundary[i] / geo.volume[grid.idx(i, nt - 1)]).collect();
        let boundary_inv_r = (0..nr).map(|i| geo.boundary_inv_r[i] / geo.volume[grid.idx(i, nt - 1)]).collect();
        let volume = (0..grid.len()).map(|k| lw(grid.r[k / nt]).exp() * geo.volume[k]).collect();
        GaussianOperator { grid: grid.clone(), volume, up, down, ang_lo, ang_hi, boundary, boundary_inv_r }
    }

    pub fn len(&self) -> usize {
        self.volume.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volume.is_empty()
    }

    /// `(1/rho) div(rho grad u)` at every node, without boundary sources.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let (nr, nt) = (g.nr(), g.nt());
        let mut out = vec![0.0; self.len()];
        for i in 0..nr - 1 {
            for j in 0..nt {
                let (a, b) = (g.idx(i, j), g.idx(i + 1, j));
                let d = u[b] - u[a];
                out[a] += self.up[i * nt + j] * d;
                out[b] -= self.down[i * nt + j] * d;
            }
        }
        for i in 0..nr {
            for j in 0..nt - 1 {
                let (a, b) = (g.idx(i, j), g.idx(i, j + 1));
                let d = u[b] - u[a];
                out[a] += self.ang_lo[i * (nt - 1) + j] * d;
                out[b] -= self.ang_hi[i * (nt - 1) + j] * d;
            }
        }
        out
    }

    /// Factor `c I - dt L + diag(extra)`.
    pub fn factor(&self, dt: f64, c: f64, extra: &[f64]) -> Result<BandedLu> {
        let g = &self.grid;
        let (nr, nt) = (g.nr(), g.nt());
        let mut m = Banded::zeros(self.len(), nt, nt);
        for (k, e) in extra.iter().enumerate() {
            m.add(k, k, c + e);
        }
        for i in 0..nr - 1 {
            for j in 0..nt {
                let (a, b) = (g.idx(i, j), g.idx(i + 1, j));
                let (cu, cd) = (dt * self.up[i * nt + j], dt * self.down[i * nt + j]);
                m.add(a, a, cu);
                m.add(a, b, -cu);
                m.add(b, b, cd);
                m.add(b, a, -cd);
            }
        }
        for i in 0..nr {
            for j in 0..nt - 1 {
                let (a, b) = (g.idx(i, j), g.idx(i, j + 1));
                let (cl, ch) = (dt * self.ang_lo[i * (nt - 1) + j], dt * self.ang_hi[i * (nt - 1) + j]);
                m.add(a, a, cl);
                m.add(a, b, -cl);
                m.add(b, b, ch);
                m.add(b, a, -ch);
            }
        }
        m.factor()
    }

    /// `(f, g)_rho`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.volume.iter().zip(f).zip(g).map(|((v, a), b)| v * a * b).sum()
    }
}

/// Grid, operator and sampled reference fields for one model.
pub struct Simulator<'a> {
    pub model: &'a Model,
    pub grid: AxialGrid,
    pub opts: EvolveOptions,
    op: GaussianOperator,
    u_inf: Vec<f64>,
    balance: Vec<f64>,
    modes: Vec<Vec<f64>>,
    phi_ell: Vec<f64>,
    e1_rg: Vec<f64>,
    envelope: Vec<f64>,
    boundary_nodes: Vec<usize>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a Model, grid_opts: &SimGridOptions, opts: EvolveOptions) -> Result<Self> {
        let frame = &model.frame;
        let grid = grid_opts.build(frame)?;
        if !(opts.dt > 0.0) {
            return Err(Error::StepSize { t: frame.s1, reason: format!("time step must be positive, got {}", opts.dt) });
        }
        let op = GaussianOperator::new(&grid);
        let nt = grid.nt();
        let r_pole = pole_radius(&grid, frame.gamma);
        let sample_r = |i: usize| if grid.r[i] == 0.0 { r_pole } else { grid.r[i] };
        let e1 = model.es.angular_mode(1);
        let mut u_inf = vec![0.0; grid.len()];
        let mut e1_rg = vec![0.0; grid.len()];
        let mut envelope = vec![0.0; grid.len()];
        for i in 0..grid.nr() {
            let r = sample_r(i);
            for j in 0..nt {
                let t = grid.theta[j];
                let k = grid.idx(i, j);
                u_inf[k] = model.u_inf(r, t);
                e1_rg[k] = e1.eval(t) * r.powf(-frame.gamma);
                envelope[k] = e1.eval(t) * (r.powf(-frame.gamma) + r.powf(2.0 * frame.lambda_star - frame.m));
            }
        }
        let sample_mode = |ij: (usize, usize)| -> Result<Vec<f64>> {
            let mut v = vec![0.0; grid.len()];
            for i in 0..grid.nr() {
                for j in 0..nt {
                    v[grid.idx(i, j)] = model.phi_mode(ij, sample_r(i), grid.theta[j])?;
                }
            }
            Ok(v)
        };
        let modes = frame.pi.iter().map(|&ij| sample_mode(ij)).collect::<Result<Vec<_>>>()?;
        let phi_ell = sample_mode((1, frame.ell))?;
        let boundary_nodes: Vec<usize> = (0..grid.nr()).map(|i| grid.idx(i, nt - 1)).collect();

        // discrete residual of U_inf, switched on where the solution is close
        // to it by `balance_at`
        let mut balance = vec![0.0; grid.len()];
        if opts.well_balanced {
            let flux = op.apply(&u_inf);
            for i in 1..grid.nr() {
                for j in 0..nt {
                    let k = grid.idx(i, j);
                    let mut res = flux[k] - 0.5 * frame.m * u_inf[k];
                    if j == nt - 1 {
                        res += op.boundary[i] * u_inf[k].powf(frame.q);
                    }
                    balance[k] = res;
                }
            }
        }
        Ok(Simulator { model, grid, opts, op, u_inf, balance, modes, phi_ell, e1_rg, envelope, boundary_nodes })
    }

    pub fn frame(&self) -> &SpectralFrame {
        &self.model.frame
    }

    pub fn operator(&self) -> &GaussianOperator {
        &self.op
    }

    pub fn u_inf_field(&self) -> AxialField {
        AxialField { values: self.u_inf.clone() }
    }

    pub fn mode_field(&self, ij: (usize, usize)) -> Result<AxialField> {
        if let Some(k) = self.frame().pi.iter().position(|x| *x == ij) {
            return Ok(AxialField { values: self.modes[k].clone() });
        }
        if ij == (1, self.frame().ell) {
            return Ok(AxialField { values: self.phi_ell.clone() });
        }
        let r_pole = pole_radius(&self.grid, self.frame().gamma);
        let g = &self.grid;
        let mut v = vec![0.0; g.len()];
        for i in 0..g.nr() {
            let r = if g.r[i] == 0.0 { r_pole } else { g.r[i] };
            for j in 0..g.nt() {
                v[g.idx(i, j)] = self.model.phi_mode(ij, r, g.theta[j])?;
            }
        }
        Ok(AxialField { values: v })
    }

    /// Initial data `phi(., s1)` for the coefficients `d` over `Pi`.
    pub fn initial_data(&self, d: &[f64]) -> Result<AxialField> {
        let f = self.frame();
        if d.len() != f.pi.len() {
            return Err(Error::Domain(format!("d has {} entries, Pi has {}", d.len(), f.pi.len())));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= f.d_ball() {
            return Err(Error::Domain(format!(
                "|d| = {norm:.4e} is outside the ball of radius {:.4e}",
                f.d_ball()
            )));
        }
        let g = &self.grid;
        let ri = f.inner_radius();
        let inner_cells = g.r.iter().filter(|r| **r < ri).count();
        if inner_cells < MIN_INNER_CELLS {
            return Err(Error::Resolution(format!(
                "only {inner_cells} radial nodes inside r < {ri:.4e}; need {MIN_INNER_CELLS}"
            )));
        }
        let (s1, om) = (f.s1, f.omega);
        let scale = (om * s1).exp();
        let amp = (f.m * om * s1).exp();
        let decay = (-f.lambda_star * s1).exp();
        let (ro, rv) = (f.transition_radius(), f.varrho_radius());
        let nt = g.nt();
        let mut out = vec![0.0; g.len()];
        for i in 0..g.nr() {
            let r = g.r[i];
            for j in 0..nt {
                let k = g.idx(i, j);
                let t = g.theta[j];
                let sum_d: f64 = d.iter().zip(&self.modes).map(|(c, md)| c * md[k]).sum();
                let u = self.u_inf[k];
                let tail = decay * self.phi_ell[k];
                out[k] = if r < ri {
                    amp * self.model.u_beta(f.alpha, scale * r, t)?
                } else if r < ro {
                    let inner = amp * self.model.u_beta(f.alpha, scale * r, t)?;
                    let w = scale * r - f.big_h;
                    let star = (1.0 - w) * (u - inner + sum_d) + w * tail;
                    u + sum_d - star
                } else if r < rv {
                    u + sum_d - tail
                } else if r < rv + 1.0 {
                    let w = r - rv;
                    let star = w * (u + sum_d) + (1.0 - w) * tail;
                    u + sum_d - star
                } else {
                    0.0
                };
            }
        }
        Ok(AxialField { values: out })
    }

    pub fn initial_state(&self, d: &[f64]) -> Result<SimState> {
        let phi = self.initial_data(d)?;
        let margins = self.margins(&phi, self.frame().s1)?;
        Ok(SimState { s: self.frame().s1, phi, d: d.to_vec(), margins })
    }

    /// `P_ij = (phi - U_inf, phi_ij)_rho` over `Pi`.
    pub fn project(&self, phi: &AxialField) -> Vec<f64> {
        self.modes
            .iter()
            .map(|md| {
                phi.values
                    .iter()
                    .zip(&self.u_inf)
                    .zip(md)
                    .zip(&self.op.volume)
                    .map(|(((p, u), e), v)| (p - u) * e * v)
                    .sum()
            })
            .collect()
    }

    pub fn margins(&self, phi: &AxialField, s: f64) -> Result<RegionMargins> {
        let f = self.frame();
        let g = &self.grid;
        let nt = g.nt();
        let decay = (-f.lambda_star * s).exp();
        let (r_in_fixed, r_k, r_sig) = (f.k_radius(f.s1), f.k_radius(s), f.sigma_radius(s));
        let beta = f.beta(s);
        let mut m = RegionMargins {
            inner: f64::INFINITY,
            middle: f64::INFINITY,
            middle_r: f64::NAN,
            outer: f64::INFINITY,
            barrier: f64::INFINITY,
            band: (f64::INFINITY, f64::NEG_INFINITY),
        };
        let i_band = g
            .r
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - r_k).abs().total_cmp(&(b.1 - r_k).abs()))
            .map(|(i, _)| i)
            .expect("non-empty grid");
        for i in 0..g.nr() {
            let r = g.r[i];
            for j in 0..nt {
                let k = g.idx(i, j);
                let v = phi.values[k];
                let u = self.u_inf[k];
                if r > 0.0 && r < r_in_fixed {
                    m.inner = m.inner.min((u - v) / u);
                }
                if r > r_k && r < r_sig {
                    let dev = (v - u + decay * self.phi_ell[k]).abs();
                    let margin = 1.0 - dev / (f.eps0 * decay * self.envelope[k]);
                    if margin < m.middle {
                        m.middle = margin;
                        m.middle_r = r;
                    }
                }
                if r > r_sig {
                    m.outer = m.outer.min(1.0 - v.abs() / (f.m0 * u));
                }
                if r < r_k {
                    let ub = self.model.u_beta(beta, r, g.theta[j])?;
                    m.barrier = m.barrier.min((ub - v) / ub);
                }
                if i == i_band && r > 0.0 {
                    let ratio = (u - v) / (decay * f.c_1ell * self.e1_rg[k]);
                    m.band = (m.band.0.min(ratio), m.band.1.max(ratio));
                }
            }
        }
        Ok(m)
    }

    /// `U_inf` residual to subtract at time `s`, between the inner profile
    /// `r > 2 H e^{-omega s}` and the cut-off of the initial data, which the
    /// drift `y/2` carries to `e^{varrho s1 + (s - s1)/2}`.
    fn balance_at(&self, s: f64) -> Vec<f64> {
        let f = self.frame();
        let stretch = (0.5 * (s - f.s1)).exp();
        let edge = f.varrho_radius() * stretch;
        let inner = f.big_h * (-f.omega * s).exp();
        let nt = self.grid.nt();
        let mut out = self.balance.clone();
        for i in 0..self.grid.nr() {
            let r = self.grid.r[i];
            let chi = smoothstep((r - inner) / inner) * (1.0 - smoothstep((r - (edge - stretch)) / stretch));
            if chi < 1.0 {
                for v in &mut out[i * nt..(i + 1) * nt] {
                    *v *= chi;
                }
            }
        }
        out
    }

    fn nonlinear_residual(&self, x: &[f64], rhs: &[f64], balance: &[f64], c0: f64, dt: f64, out: &mut [f64]) {
        let f = self.frame();
        let flux = self.op.apply(x);
        for k in 0..x.len() {
            let l = flux[k] - 0.5 * f.m * x[k] - balance[k];
            out[k] = c0 * x[k] - dt * l - rhs[k];
        }
        for (i, &k) in self.boundary_nodes.iter().enumerate() {
            out[k] -= dt * self.op.boundary[i] * x[k].max(0.0).powf(f.q);
        }
    }

    fn jacobian(&self, x: &[f64], c0: f64, dt: f64) -> Result<BandedLu> {
        let f = self.frame();
        let mut extra = vec![0.0; x.len()];
        for (i, &k) in self.boundary_nodes.iter().enumerate() {
            extra[k] = -dt * self.op.boundary[i] * f.q * x[k].max(0.0).powf(f.q - 1.0);
        }
        self.op.factor(dt, c0 + 0.5 * dt * f.m, &extra)
    }

    /// One implicit step; `prev` is `Some` for BDF2.
    fn step(
        &self,
        cur: &[f64],
        prev: Option<&[f64]>,
        dt: f64,
        chord: &mut Option<(f64, BandedLu)>,
        stats: &mut (usize, usize),
        s: f64,
    ) -> Result<Vec<f64>> {
        let balance = self.balance_at(s);
        let (c0, rhs): (f64, Vec<f64>) = match prev {
            Some(p) => (
                1.5,
                cur.iter().zip(p).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
            ),
            None => (1.0, cur.to_vec()),
        };
        let mut x: Vec<f64> = match prev {
            Some(p) => cur.iter().zip(p).map(|(a, b)| 2.0 * a - b).collect(),
            None => cur.to_vec(),
        };
        if chord.as_ref().map(|c| c.0 != c0).unwrap_or(true) {
            *chord = Some((c0, self.jacobian(&x, c0, dt)?));
            stats.1 += 1;
        }
        let mut res = vec![0.0; x.len()];
        let mut trace = Vec::new();
        for it in 1..=self.opts.max_newton {
            self.nonlinear_residual(&x, &rhs, &balance, c0, dt, &mut res);
            let mut delta: Vec<f64> = res.iter().map(|v| -v).collect();
            chord.as_ref().expect("factored").1.solve(&mut delta);
            for (a, b) in x.iter_mut().zip(&delta) {
                *a += b;
            }
            stats.0 += 1;
            let size = max_abs(&delta);
            let scale = max_abs(&x).max(1.0);
            trace.push(size / scale);
            if !size.is_finite() {
                break;
            }
            if size <= self.opts.newton_tol * scale {
                return Ok(x);
            }
            if it % 6 == 0 {
                *chord = Some((c0, self.jacobian(&x, c0, dt)?));
                stats.1 += 1;
            }
        }
        Err(Error::NewtonDivergence { iterations: self.opts.max_newton, residual: *trace.last().unwrap_or(&f64::NAN), trace })
    }

    /// Evolve from `state` to `s_end`, recording margins and projections.
    pub fn evolve(&self, state: &SimState, s_end: f64) -> Result<Trajectory> {
        if s_end < state.s {
            return Err(Error::Domain(format!("s_end = {s_end} precedes s = {}", state.s)));
        }
        state.phi.check_grid(&self.grid)?;
        let steps = ((s_end - state.s) / self.opts.dt).ceil() as usize;
        let dt = if steps > 0 { (s_end - state.s) / steps as f64 } else { self.opts.dt };
        let record = |s: f64, phi: &AxialField| -> Result<TrajectoryPoint> {
            Ok(TrajectoryPoint { s, sup: phi.sup(), margins: self.margins(phi, s)?, p: self.project(phi) })
        };
        let mut points = vec![record(state.s, &state.phi)?];
        let mut exit_s = if points[0].margins.in_a() { None } else { Some(state.s) };
        let mut cur = state.phi.values.clone();
        let mut prev: Option<Vec<f64>> = None;
        let mut chord = None;
        let mut stats = (0usize, 0usize);
        let mut fallbacks = 0;
        let mut s = state.s;
        let mut last_margins = points[0].margins;
        for k in 1..=steps {
            let s_new = state.s + k as f64 * dt;
            let mut next = self.step(&cur, prev.as_deref(), dt, &mut chord, &mut stats, s_new)?;
            let sup = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let min = next.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-10 * sup {
                if prev.is_some() {
                    fallbacks += 1;
                    next = self.step(&cur, None, dt, &mut chord, &mut stats, s_new)?;
                }
                let min = next.iter().cloned().fold(f64::INFINITY, f64::min);
                if min < -1e-10 * sup {
                    return Err(Error::PositivityLoss { s: s_new, min });
                }
            }
            prev = Some(std::mem::replace(&mut cur, next));
            s = s_new;
            if k % self.opts.output_every == 0 || k == steps {
                let field = AxialField { values: cur.clone() };
                let pt = record(s, &field)?;
                last_margins = pt.margins;
                if exit_s.is_none() && !pt.margins.in_a() {
                    exit_s = Some(s);
                }
                points.push(pt);
                if self.opts.stop_on_exit && exit_s.is_some() {
                    break;
                }
            }
        }
        let final_state = SimState { s, phi: AxialField { values: cur }, d: state.d.clone(), margins: last_margins };
        Ok(Trajectory {
            d: state.d.clone(),
            points,
            exit_s,
            final_state,
            fallback_steps: fallbacks,
            newton_iterations: stats.0,
            factorizations: stats.1,
        })
    }

    /// `P(d; s2)` together with the trajectory that produced it.
    pub fn projection_map(&self, d: &[f64], s2: f64) -> Result<(Vec<f64>, Trajectory)> {
        let state = self.initial_state(d)?;
        let traj = self.evolve(&state, s2)?;
        Ok((traj.final_projection().to_vec(), traj))
    }

    /// Forward-difference Jacobian of `P(.; s2)` at `d` with step `h`.
    pub fn projection_jacobian(&self, d: &[f64], s2: f64, h: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let dim = d.len();
        let results: Vec<Vec<f64>> = (0..=dim)
            .into_par_iter()
            .map(|c| {
                let mut x = d.to_vec();
                if c > 0 {
                    x[c - 1] += h;
                }
                self.projection_map(&x, s2).map(|r| r.0)
            })
            .collect::<Result<_>>()?;
        let base = results[0].clone();
        let mut jac = vec![vec![0.0; dim]; dim];
        for c in 0..dim {
            for r in 0..dim {
                jac[r][c] = (results[c + 1][r] - base[r]) / h;
            }
        }
        Ok((base, jac))
    }

    /// Boundary-linearized evolution of `Phi = phi - U_inf` with
    /// `d_nu Phi = K r^{-1} Phi`, returning the states at the requested
    /// offsets from the start.
    pub fn evolve_linearized(&self, phi0: &AxialField, span: f64, samples: &[f64]) -> Result<Vec<(f64, AxialField)>> {
        phi0.check_grid(&self.grid)?;
        let f = self.frame();
        let steps = (span / self.opts.dt).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let mut robin = vec![0.0; self.grid.len()];
        for (i, &k) in self.boundary_nodes.iter().enumerate() {
            robin[k] = -dt * f.k_boundary * self.op.boundary_inv_r[i];
        }
        let be = self.op.factor(dt, 1.0 + 0.5 * dt * f.m, &robin)?;
        let bdf = self.op.factor(dt, 1.5 + 0.5 * dt * f.m, &robin)?;
        let targets: Vec<usize> = samples.iter().map(|t| ((t / dt).round() as usize).min(steps)).collect();
        let mut out = Vec::new();
        let mut cur = phi0.values.clone();
        let mut prev: Option<Vec<f64>> = None;
        for (t, &k) in samples.iter().zip(&targets) {
            if k == 0 {
                out.push((*t, phi0.clone()));
            }
        }
        for k in 1..=steps {
            let mut next: Vec<f64> = match &prev {
                Some(p) => cur.iter().zip(p).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
                None => cur.clone(),
            };
            match prev {
                Some(_) => bdf.solve(&mut next),
                None => be.solve(&mut next),
            }
            prev = Some(std::mem::replace(&mut cur, next));
            for (t, &kk) in samples.iter().zip(&targets) {
                if kk == k {
                    out.push((*t, AxialField { values: cur.clone() }));
                }
            }
        }
        Ok(out)
    }

    /// Decay of `(Phi(s), phi_ij)_rho` over `span` when `Phi(s1) = phi_ij`.
    pub fn linear_decay(&self, ij: (usize, usize), span: f64) -> Result<DecayCheck> {
        let mode = self.model.es.mode(ij.0, ij.1).ok_or_else(|| Error::Domain(format!("mode {ij:?} not built")))?;
        let field = self.mode_field(ij)?;
        let states = self.evolve_linearized(&field, span, &[0.0, span])?;
        let proj = |x: &AxialField| self.op.inner(&x.values, &field.values);
        let (a0, a1) = (proj(&states[0].1), proj(&states[1].1));
        let measured = a1 / a0;
        let expected = (-mode.lambda * span).exp();
        Ok(DecayCheck {
            i: ij.0,
            j: ij.1,
            lambda: mode.lambda,
            measured_ratio: measured,
            expected_ratio: expected,
            rel_error: (measured / expected - 1.0).abs(),
            fitted_lambda: -measured.ln() / span,
        })
    }

    /// Quasi-Newton solve of `P(d; s2) = 0` from `d = 0`.
    pub fn shoot(&self, opts: &ShootOptions) -> Result<(ShootReport, Trajectory)> {
        let f = self.frame();
        let dim = f.pi.len();
        let ball = f.d_ball();
        let h = opts.fd_step * ball;
        let mut d = vec![0.0; dim];
        let (mut p, mut jac) = self.projection_jacobian(&d, opts.s2, h)?;
        let jacobian0 = jac.clone();
        let mut history = vec![(d.clone(), p.clone())];
        let tol = opts.tol * ball;
        let mut iterations = 0;
        let mut converged = norm(&p) <= tol;
        let mut traj = None;
        while !converged && iterations < opts.max_iter {
            let step = solve_dense(&jac, &p.iter().map(|v| -v).collect::<Vec<_>>())?;
            let next: Vec<f64> = d.iter().zip(&step).map(|(a, b)| a + b).collect();
            if norm(&next) >= ball {
                return Err(Error::NonConvergence(format!(
                    "shooting iterate |d| = {:.4e} left the ball of radius {ball:.4e} (|P| = {:.4e})",
                    norm(&next),
                    norm(&p)
                )));
            }
            let (p_next, t) = self.projection_map(&next, opts.s2)?;
            // Broyden update of the Jacobian
            let dp: Vec<f64> = p_next.iter().zip(&p).map(|(a, b)| a - b).collect();
            let jdx: Vec<f64> = jac.iter().map(|row| row.iter().zip(&step).map(|(a, b)| a * b).sum()).collect();
            let ss: f64 = step.iter().map(|v| v * v).sum();
            if ss > 0.0 {
                for r in 0..dim {
                    for c in 0..dim {
                        jac[r][c] += (dp[r] - jdx[r]) * step[c] / ss;
                    }
                }
            }
            d = next;
            p = p_next;
            traj = Some(t);
            iterations += 1;
            history.push((d.clone(), p.clone()));
            converged = norm(&p) <= tol;
        }
        let traj = match traj {
            Some(t) => t,
            None => self.projection_map(&d, opts.s2)?.1,
        };
        let report = ShootReport {
            s2: opts.s2,
            ball,
            d_star: d,
            p_star: p,
            iterations,
            converged,
            jacobian: jacobian0,
            history,
        };
        Ok((report, traj))
    }
}

/// Largest magnitude, NaN if any entry is NaN.
fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian elimination with partial pivoting for the small shooting systems.
fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, v)| row.iter().cloned().chain([*v]).collect()).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|x, y| m[*x][c].abs().total_cmp(&m[*y][c].abs())).expect("non-empty");
        if m[piv][c] == 0.0 {
            return Err(Error::Singular(c));
        }
        m.swap(c, piv);
        for r in c + 1..n {
            let factor = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= factor * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub measured_ratio: f64,
    pub expected_ratio: f64,
    pub rel_error: f64,
    pub fitted_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootOptions {
    pub s2: f64,
    /// Stop when `|P| <= tol * ball radius`.
    pub tol: f64,
    pub max_iter: usize,
    /// Finite-difference step as a fraction of the ball radius.
    pub fd_step: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions { s2: 9.5, tol: 1e-3, max_iter: 6, fd_step: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootReport {
    pub s2: f64,
    pub ball: f64,
    pub d_star: Vec<f64>,
    pub p_star: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Finite-difference Jacobian at `d = 0`.
    pub jacobian: Vec<Vec<f64>>,
    pub history: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub window: (f64, f64),
    pub points: usize,
    /// False when the window is shorter than `min_window`.
    pub reliable: bool,
}

/// Least-squares slope of `ln sup` against `s`.
pub fn rate_fit(series: &[(f64, f64)], min_window: f64) -> Result<RateFit> {
    if series.len() < 3 {
        return Err(Error::Domain(format!("rate fit needs 3 points, got {}", series.len())));
    }
    if series.iter().any(|p| !(p.1 > 0.0)) {
        return Err(Error::Domain("rate fit needs positive norms".into()));
    }
    let pts: Vec<(f64, f64)> = series.iter().map(|(s, v)| (*s, v.ln())).collect();
    let (slope, intercept, stderr) = spectral::linear_fit(&pts);
    let window = (pts[0].0, pts[pts.len() - 1].0);
    Ok(RateFit {
        slope,
        intercept,
        stderr,
        ci95: (slope - 1.96 * stderr, slope + 1.96 * stderr),
        window,
        points: pts.len(),
        reliable: window.1 - window.0 >= min_window,
    })
}

/// Samples of `||phi||_inf` after the transient `s >= s1 + skip` and before
/// the first region exit.
pub fn rate_window(traj: &Trajectory, frame: &SpectralFrame, skip: f64) -> Vec<(f64, f64)> {
    traj.points
        .iter()
        .filter(|p| p.s >= frame.s1 + skip && traj.exit_s.map(|e| p.s < e).unwrap_or(true))
        .map(|p| (p.s, p.sup))
        .collect()
}

/// Fit on the region-respecting window, flagged unreliable below `1/omega`.
pub fn rate_fit_trajectory(traj: &Trajectory, frame: &SpectralFrame) -> Result<RateFit> {
    rate_fit(&rate_window(traj, frame, 0.5), 1.0 / frame.omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlowupType {
    TypeI,
    TypeII,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeThresholds {
    /// Largest `max/min` ratio of `||phi||_inf` accepted as bounded.
    pub band: f64,
    /// Smallest growth rate in `s` taken as unbounded growth.
    pub min_slope: f64,
}

impl Default for TypeThresholds {
    fn default() -> Self {
        TypeThresholds { band: 2.0, min_slope: 0.01 }
    }
}

/// Type II when `ln ||phi||_inf` grows at a rate significantly above
/// `min_slope`; type I when it does not and stays within the band.
pub fn type_classify(series: &[(f64, f64)], th: &TypeThresholds) -> BlowupType {
    let Ok(fit) = rate_fit(series, 0.0) else {
        return BlowupType::Undetermined;
    };
    let se = if fit.stderr.is_finite() { fit.stderr } else { 0.0 };
    if fit.slope - 3.0 * se > th.min_slope {
        return BlowupType::TypeII;
    }
    let hi = series.iter().map(|p| p.1).fold(0.0, f64::max);
    let lo = series.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if hi / lo <= th.band {
        BlowupType::TypeI
    } else {
        BlowupType::Undetermined
    }
}

/// Blow-up run for `u_t = Delta u`, `d_nu u = u^q` in original variables,
/// started from `amplitude exp(-|x|^2 / width^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeOneOptions {
    pub n: usize,
    pub q: f64,
    pub amplitude: f64,
    pub width: f64,
    /// Stop once `||u||_inf` exceeds this multiple of its initial value.
    pub growth: f64,
    pub h_core: f64,
    pub core: f64,
    pub log_step: f64,
    pub r_max: f64,
    pub nt: usize,
    /// Step `dt = dt_factor ||u||_inf^{-2(q-1)}`.
    pub dt_factor: f64,
    pub t_max: f64,
    pub newton_tol: f64,
}

impl Default for TypeOneOptions {
    fn default() -> Self {
        TypeOneOptions {
            n: 3,
            q: 2.5,
            amplitude: 3.0,
            width: 1.0,
            growth: 300.0,
            h_core: 2e-6,
            core: 1e-5,
            log_step: 0.04,
            r_max: 8.0,
            nt: 21,
            dt_factor: 0.01,
            t_max: 20.0,
            newton_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeOneRun {
    pub t: Vec<f64>,
    pub sup: Vec<f64>,
    /// Extrapolated blow-up time.
    pub blowup_time: f64,
    /// Rescaled series `(s, (T - t)^{m/2} ||u||_inf)` with `s = -ln(T - t)`.
    pub rescaled: Vec<(f64, f64)>,
    /// `max/min` of the rescaled norm over the last decade of `T - t`.
    pub band_ratio: f64,
    pub window: (f64, f64),
    pub verdict: BlowupType,
}

/// Generic blow-up in original variables and its rescaled sup norm.
pub fn type_one_contrast(opts: &TypeOneOptions) -> Result<TypeOneRun> {
    let p = Problem::new(opts.n, opts.q)?;
    if !(opts.amplitude > 0.0 && opts.width > 0.0 && opts.growth > 10.0) {
        return Err(Error::Domain("need positive amplitude and width, growth > 10".into()));
    }
    let r = AxialGrid::pole_log_r(opts.h_core, opts.core, opts.log_step, opts.r_max);
    let grid = AxialGrid::new(opts.n, r, AxialGrid::uniform_theta(opts.nt), 0.0)?;
    let op = FvOperator::new(&grid, |_, _| 1.0);
    let nt = grid.nt();
    let bnodes: Vec<usize> = (0..grid.nr()).map(|i| grid.idx(i, nt - 1)).collect();
    let mut u = AxialField::from_fn(&grid, |r, _| opts.amplitude * (-(r / opts.width).powi(2)).exp()).values;
    let sup0 = u.iter().cloned().fold(0.0, f64::max);
    let q = opts.q;
    let jac = |x: &[f64], dt: f64| -> Result<BandedLu> {
        let mut extra = vec![0.0; x.len()];
        for (i, &k) in bnodes.iter().enumerate() {
            extra[k] = -dt * op.boundary[i] * q * x[k].max(0.0).powf(q - 1.0);
        }
        factor_scaled(&op, dt, 1.0, &extra)
    };
    let mut t = 0.0;
    let mut ts = vec![0.0];
    let mut sups = vec![sup0];
    let mut res = vec![0.0; u.len()];
    loop {
        let sup = *sups.last().expect("non-empty");
        if sup >= opts.growth * sup0 {
            break;
        }
        if t > opts.t_max {
            return Err(Error::NonConvergence(format!(
                "no blow-up before t = {} (sup grew to {sup:.3e})",
                opts.t_max
            )));
        }
        let dt = opts.dt_factor * sup.powf(-2.0 * (q - 1.0));
        let rhs: Vec<f64> = u.iter().zip(&op.volume).map(|(a, v)| a * v).collect();
        let mut x = u.clone();
        let mut lu = jac(&x, dt)?;
        let mut done = false;
        let mut trace = Vec::new();
        for it in 1..=40 {
            let flux = op.flux(&x);
            for k in 0..x.len() {
                res[k] = op.volume[k] * x[k] - dt * flux[k] - rhs[k];
            }
            for (i, &k) in bnodes.iter().enumerate() {
                res[k] -= dt * op.boundary[i] * x[k].max(0.0).powf(q);
            }
            let mut delta: Vec<f64> = res.iter().zip(&op.volume).map(|(r, v)| -r / v).collect();
            lu.solve(&mut delta);
            for (a, b) in x.iter_mut().zip(&delta) {
                *a += b;
            }
            let size = max_abs(&delta);
            let scale = max_abs(&x).max(1.0);
            trace.push(size / scale);
            if !size.is_finite() {
                break;
            }
            if size <= opts.newton_tol * scale {
                done = true;
                break;
            }
            if it % 4 == 0 {
                lu = jac(&x, dt)?;
            }
        }
        if !done {
            return Err(Error::NewtonDivergence { iterations: 40, residual: *trace.last().unwrap_or(&f64::NAN), trace });
        }
        u = x;
        t += dt;
        ts.push(t);
        sups.push(u.iter().cloned().fold(0.0, f64::max));
    }
    // ||u||^{-2(q-1)} is locally affine in t near T; extrapolate from the
    // final tenth of the growth
    let power = -2.0 * (q - 1.0);
    let end = *sups.last().expect("non-empty");
    let tail: Vec<(f64, f64)> =
        ts.iter().zip(&sups).filter(|(_, s)| **s >= 0.5 * end).map(|(t, s)| (*t, s.powf(power))).collect();
    let (slope, intercept, _) = spectral::linear_fit(&tail);
    let blowup = -intercept / slope;
    let t_end = *ts.last().expect("non-empty");
    if !(blowup > t_end) {
        return Err(Error::NonConvergence(format!("extrapolated blow-up time {blowup} precedes the end of the run")));
    }
    let rescaled: Vec<(f64, f64)> = ts
        .iter()
        .zip(&sups)
        .map(|(t, s)| (-(blowup - t).ln(), (blowup - t).powf(0.5 * p.m) * s))
        .collect();
    let s_end = rescaled.last().expect("non-empty").0;
    let window = (s_end - 10f64.ln(), s_end);
    let last: Vec<(f64, f64)> = rescaled.iter().cloned().filter(|(s, _)| *s >= window.0).collect();
    let hi = last.iter().map(|p| p.1).fold(0.0, f64::max);
    let lo = last.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let verdict = type_classify(&last, &TypeThresholds::default());
    Ok(TypeOneRun { t: ts, sup: sups, blowup_time: blowup, rescaled, band_ratio: hi / lo, window, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dense_solve_matches() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve_dense(&a, &[3.0, 5.0]).unwrap();
        assert_relative_eq!(x[0], 0.8, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.4, epsilon = 1e-14);
    }

    #[test]
    fn classify_bands() {
        let flat: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 * 0.1, 1.0)).collect();
        assert_eq!(type_classify(&flat, &TypeThresholds::default()), BlowupType::TypeI);
        let grow: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 * 0.1, (0.05 * k as f64 * 0.1).exp())).collect();
        assert_eq!(type_classify(&grow, &TypeThresholds::default()), BlowupType::TypeII);
        let fit = rate_fit(&grow, 1.0).unwrap();
        assert_relative_eq!(fit.slope, 0.05, epsilon = 1e-12);
        assert!(fit.reliable);
    }
}
