//! Angular problems on the upper half-sphere.
//!
//! Everything here is axially symmetric, so functions on the half-sphere are
//! functions of the polar angle `theta` in `[0, pi/2]` measured from the
//! `x_n` axis. The Laplace-Beltrami operator reduces to
//! `e'' + (n - 2) cot(theta) e'`, and integrals carry the measure
//! `|S^{n-2}| sin(theta)^{n-2} dtheta`.

use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, OdeOptions};
use crate::quad;
use crate::specfun::{gamma, sphere_area};

/// Start of the shooting interval; the pole is handled by a Taylor start.
pub const THETA_START: f64 = 1e-6;
/// Relative width of the band reported as JL-critical.
pub const CLASSIFY_TOL: f64 = 1e-8;
/// Default number of intervals of the angular sampling grid.
pub const DEFAULT_NODES: usize = 2048;

const SHOOT_OPTS: OdeOptions =
    OdeOptions { rtol: 1e-12, atol: 1e-12, h0: 1e-7, h_max: 0.0, max_steps: 2_000_000 };

/// Space dimension and boundary exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub n: usize,
    pub q: f64,
    pub m: f64,
}

impl Problem {
    pub fn new(n: usize, q: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::Domain(format!("dimension must be at least 3, got {n}")));
        }
        if !(q > 1.0) || !q.is_finite() {
            return Err(Error::Domain(format!("exponent must satisfy q > 1, got {q}")));
        }
        Ok(Problem { n, q, m: 1.0 / (q - 1.0) })
    }

    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    /// Lower bound `(n-1)/(n-2)` on `q` for the singular profile to exist.
    pub fn profile_threshold(&self) -> f64 {
        (self.nf() - 1.0) / (self.nf() - 2.0)
    }

    /// Sobolev trace exponent `n/(n-2)`.
    pub fn sobolev_exponent(&self) -> f64 {
        self.nf() / (self.nf() - 2.0)
    }

    /// `|S^{n-2}|`, the area factor carried by every half-sphere integral.
    pub fn sphere_factor(&self) -> f64 {
        sphere_area(self.n - 2)
    }
}

/// Trace Hardy constant `2 Gamma(n/4)^2 / Gamma((n-2)/4)^2`.
pub fn trace_hardy_constant(n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Domain(format!("trace Hardy constant needs n >= 3, got {n}")));
    }
    let nf = n as f64;
    let a = gamma(nf / 4.0)?;
    let b = gamma((nf - 2.0) / 4.0)?;
    Ok(2.0 * a * a / (b * b))
}

/// A function of `theta` sampled with its derivative on a uniform grid over
/// `[0, pi/2]`, evaluated between nodes by cubic Hermite interpolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AngularSamples {
    pub theta: Vec<f64>,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl AngularSamples {
    pub fn intervals(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn step(&self) -> f64 {
        FRAC_PI_2 / self.intervals() as f64
    }

    fn locate(&self, theta: f64) -> (usize, f64) {
        let h = self.step();
        let x = (theta / h).clamp(0.0, self.intervals() as f64);
        let i = (x.floor() as usize).min(self.intervals() - 1);
        (i, x - i as f64)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let (i, t) = self.locate(theta);
        let h = self.step();
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i] * h, self.derivs[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * d1
    }

    pub fn eval_deriv(&self, theta: f64) -> f64 {
        let (i, t) = self.locate(theta);
        let h = self.step();
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i] * h, self.derivs[i + 1] * h);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * d1)
            / h
    }

    /// Value at the boundary `theta = pi/2`.
    pub fn at_boundary(&self) -> f64 {
        *self.values.last().expect("non-empty")
    }

    pub fn deriv_at_boundary(&self) -> f64 {
        *self.derivs.last().expect("non-empty")
    }

    /// `|S^{n-2}| int f g sin^{n-2}` by composite Simpson on the samples.
    pub fn inner(&self, other: &AngularSamples, n: usize) -> f64 {
        assert_eq!(self.theta.len(), other.theta.len(), "sampling grids differ");
        let w = quad::simpson_weights(self.theta.len(), self.step());
        let p = n as i32 - 2;
        let s: f64 = self
            .theta
            .iter()
            .zip(&w)
            .enumerate()
            .map(|(i, (t, w))| w * t.sin().powi(p) * self.values[i] * other.values[i])
            .sum();
        sphere_area(n - 2) * s
    }

    fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
        self.derivs.iter_mut().for_each(|v| *v *= c);
    }

    /// Max-norm relative residual of `f'' + (n-2) cot f' + kappa f = 0` on
    /// interior nodes, each node scaled by the sum of the term magnitudes.
    /// `f''` is a fourth-order difference of the sampled derivative.
    pub fn ode_residual(&self, n: usize, kappa: f64) -> f64 {
        let h = self.step();
        let d = &self.derivs;
        let nn = (n - 2) as f64;
        let mut worst = 0.0f64;
        for j in 2..self.theta.len() - 2 {
            let dd = (-d[j + 2] + 8.0 * d[j + 1] - 8.0 * d[j - 1] + d[j - 2]) / (12.0 * h);
            let t = self.theta[j];
            let terms = [dd, nn * t.cos() / t.sin() * d[j], kappa * self.values[j]];
            let scale: f64 = terms.iter().map(|v| v.abs()).sum();
            if scale > 0.0 {
                worst = worst.max(terms.iter().sum::<f64>().abs() / scale);
            }
        }
        worst
    }
}

/// Regular solution of `e'' + (n-2) cot e' + kappa e = 0` with `e(0) = 1`.
///
/// Returns samples on `intervals + 1` uniform nodes.
fn regular_solution(n: usize, kappa: f64, intervals: usize) -> Result<AngularSamples> {
    let nn = (n - 2) as f64;
    let h = FRAC_PI_2 / intervals as f64;
    let theta: Vec<f64> = (0..=intervals).map(|j| j as f64 * h).collect();
    let mut t_out: Vec<f64> = theta[1..].to_vec();
    t_out[intervals - 1] = FRAC_PI_2;
    let (y0, t0) = taylor_start(n, kappa);
    let out = ode::integrate(
        |t, y, dy| {
            dy[0] = y[1];
            dy[1] = -nn * t.cos() / t.sin() * y[1] - kappa * y[0];
        },
        t0,
        &y0,
        &t_out,
        &SHOOT_OPTS,
        |_, _| true,
    )?;
    let mut values = vec![1.0];
    let mut derivs = vec![0.0];
    for y in out {
        values.push(y[0]);
        derivs.push(y[1]);
    }
    Ok(AngularSamples { theta, values, derivs })
}

fn taylor_start(n: usize, kappa: f64) -> ([f64; 2], f64) {
    // e = 1 - kappa theta^2 / (2(n-1)) + O(theta^4)
    let t0 = THETA_START;
    let c = -kappa / (2.0 * (n as f64 - 1.0));
    ([1.0 + c * t0 * t0, 2.0 * c * t0], t0)
}

/// Boundary values `(e, e')` at `pi/2` of the regular solution, together with
/// the number of sign changes of `e` on the open interval.
fn shoot_to_boundary(n: usize, kappa: f64) -> Result<(f64, f64, usize)> {
    let nn = (n - 2) as f64;
    let (y0, t0) = taylor_start(n, kappa);
    let mut zeros = 0usize;
    let mut last_sign = 1.0f64;
    let out = ode::integrate(
        |t, y, dy| {
            dy[0] = y[1];
            dy[1] = -nn * t.cos() / t.sin() * y[1] - kappa * y[0];
        },
        t0,
        &y0,
        &[FRAC_PI_2],
        &SHOOT_OPTS,
        |t, y| {
            if y[0] != 0.0 && t < FRAC_PI_2 {
                let s = y[0].signum();
                if s != last_sign {
                    zeros += 1;
                    last_sign = s;
                }
            }
            // keep the linear system away from overflow
            let mag = y[0].abs().max(y[1].abs());
            if mag > 1e100 {
                y[0] /= mag;
                y[1] /= mag;
            }
            true
        },
    )?;
    let y = &out[0];
    Ok((y[0], y[1], zeros))
}

fn acot(x: f64) -> f64 {
    // maps the real line onto (0, pi), decreasing
    FRAC_PI_2 - x.atan()
}

/// Prufer index `psi(pi/2) - acot(K)`; the i-th eigenvalue solves
/// `index = (i - 1) pi`, and the index increases strictly with `kappa`.
pub fn prufer_index(n: usize, boundary_k: f64, kappa: f64) -> Result<f64> {
    let (e, de, zeros) = shoot_to_boundary(n, kappa)?;
    let psi = if e == 0.0 {
        (zeros as f64 + 1.0) * PI
    } else {
        zeros as f64 * PI + acot(de / e)
    };
    Ok(psi - acot(boundary_k))
}

/// Positive solution `V` of the singular-profile problem and `K = q V(pi/2)^{q-1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AngularProfile {
    pub problem: Problem,
    pub v0: f64,
    pub samples: AngularSamples,
    pub k: f64,
}

impl AngularProfile {
    pub fn eval(&self, theta: f64) -> f64 {
        self.samples.eval(theta)
    }

    pub fn deriv(&self, theta: f64) -> f64 {
        self.samples.eval_deriv(theta)
    }

    pub fn boundary_value(&self) -> f64 {
        self.samples.at_boundary()
    }

    /// Interior residual of `V'' + (n-2) cot V' = m(n-2-m) V`.
    pub fn interior_residual(&self) -> f64 {
        let p = &self.problem;
        self.samples.ode_residual(p.n, -p.m * (p.nf() - 2.0 - p.m))
    }

    /// Boundary residual of `V'(pi/2) = V(pi/2)^q`.
    pub fn boundary_residual(&self) -> f64 {
        let vb = self.samples.at_boundary();
        (self.samples.deriv_at_boundary() - vb.powf(self.problem.q)).abs()
    }
}

/// Boundary mismatch `V'(pi/2) - V(pi/2)^q` for the shot with `V(0) = v0`.
pub fn profile_mismatch(p: &Problem, v0: f64) -> Result<f64> {
    let kappa = -p.m * (p.nf() - 2.0 - p.m);
    let (w, dw, _) = shoot_to_boundary(p.n, kappa)?;
    Ok(v0 * dw - (v0 * w).powf(p.q))
}

/// Geometric bracket `[1e-4, 1e4]` used by the profile shooting.
pub fn profile_bracket(points: usize) -> Vec<f64> {
    let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
    (0..points)
        .map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Solve for the angular profile `V` by shooting over `V(0)`.
pub fn solve_profile_v(p: &Problem, intervals: usize) -> Result<AngularProfile> {
    if p.q <= p.profile_threshold() {
        return Err(Error::Domain(format!(
            "profile needs q > (n-1)/(n-2) = {}, got {}",
            p.profile_threshold(),
            p.q
        )));
    }
    let bracket = profile_bracket(200);
    let f: Vec<f64> =
        bracket.iter().map(|&v| profile_mismatch(p, v)).collect::<Result<_>>()?;
    let cell = f
        .windows(2)
        .position(|w| w[0] * w[1] <= 0.0)
        .ok_or_else(|| {
            Error::ProfileNotFound(format!(
                "no sign change of the boundary mismatch on [1e-4, 1e4] for n = {}, q = {}",
                p.n, p.q
            ))
        })?;
    let (mut lo, mut hi) = (bracket[cell], bracket[cell + 1]);
    let mut flo = f[cell];
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-15 * mid {
            break;
        }
        let fm = profile_mismatch(p, mid)?;
        if fm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if fm * flo < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    let v0 = 0.5 * (lo + hi);
    let kappa = -p.m * (p.nf() - 2.0 - p.m);
    let mut samples = regular_solution(p.n, kappa, intervals)?;
    samples.scale(v0);
    if samples.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::ProfileNotFound("shot profile is not positive".into()));
    }
    let k = p.q * samples.at_boundary().powf(p.q - 1.0);
    Ok(AngularProfile { problem: *p, v0, samples, k })
}

/// Eigenpair of the Robin problem `-Delta_S e = kappa e`, `e'(pi/2) = K e(pi/2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AngularEigenpair {
    pub index: usize,
    pub kappa: f64,
    pub samples: AngularSamples,
}

impl AngularEigenpair {
    pub fn eval(&self, theta: f64) -> f64 {
        self.samples.eval(theta)
    }

    pub fn deriv(&self, theta: f64) -> f64 {
        self.samples.eval_deriv(theta)
    }

    pub fn interior_residual(&self, n: usize) -> f64 {
        self.samples.ode_residual(n, self.kappa)
    }

    pub fn robin_residual(&self, boundary_k: f64) -> f64 {
        (self.samples.deriv_at_boundary() - boundary_k * self.samples.at_boundary()).abs()
    }
}

/// Locate the `index`-th Robin eigenvalue (1-based) by bisection on the
/// Prufer index.
pub fn robin_eigenvalue(n: usize, boundary_k: f64, index: usize) -> Result<f64> {
    let target = (index as f64 - 1.0) * PI;
    let g = |kappa: f64| prufer_index(n, boundary_k, kappa).map(|v| v - target);
    let mut lo = -1.0f64;
    while g(lo)? >= 0.0 {
        lo *= 2.0;
        if lo < -1e7 {
            return Err(Error::Resolution(format!("no lower bracket for eigenvalue {index}")));
        }
    }
    let mut hi = lo.abs().max(1.0);
    while g(hi)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e7 {
            return Err(Error::Resolution(format!(
                "eigenvalue {index} lies beyond the resolvable range"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-10 * mid.abs().max(1.0) {
            break;
        }
        if g(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lowest `count` Robin eigenpairs, normalized in `L^2` of the half-sphere
/// with `e_i(pi/2) > 0`.
pub fn solve_angular_eigs(
    boundary_k: f64,
    n: usize,
    count: usize,
    intervals: usize,
) -> Result<Vec<AngularEigenpair>> {
    if count == 0 {
        return Err(Error::Domain("need at least one eigenpair".into()));
    }
    if n < 3 {
        return Err(Error::Domain(format!("dimension must be at least 3, got {n}")));
    }
    // each eigenfunction needs a few nodes per half-oscillation
    if 8 * count > intervals {
        return Err(Error::Resolution(format!(
            "{count} modes are not resolvable on {intervals} angular intervals"
        )));
    }
    (1..=count)
        .into_par_iter()
        .map(|i| {
            let kappa = robin_eigenvalue(n, boundary_k, i)?;
            let mut samples = regular_solution(n, kappa, intervals)?;
            let norm = samples.inner(&samples, n).sqrt();
            let sign = samples.at_boundary().signum();
            let sign = if sign == 0.0 { 1.0 } else { sign };
            samples.scale(sign / norm);
            Ok(AngularEigenpair { index: i, kappa, samples })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JlClass {
    Subcritical,
    Critical,
    Supercritical,
}

impl std::fmt::Display for JlClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            JlClass::Subcritical => "Subcritical",
            JlClass::Critical => "Critical",
            JlClass::Supercritical => "Supercritical",
        };
        f.write_str(s)
    }
}

/// Classify by comparing the Robin coefficient `K` with `c_H`.
pub fn classify_jl(k: f64, c_h: f64) -> JlClass {
    if (k - c_h).abs() <= CLASSIFY_TOL * c_h {
        JlClass::Critical
    } else if k < c_h {
        JlClass::Supercritical
    } else {
        JlClass::Subcritical
    }
}

/// Small root `mu_1` of `mu^2 - (n-2-2m) mu - (m(n-2-m) + kappa_1) = 0`.
pub fn mu1(kappa1: f64, p: &Problem) -> Result<f64> {
    let b = p.nf() - 2.0 - 2.0 * p.m;
    let disc = b * b + 4.0 * (p.m * (p.nf() - 2.0 - p.m) + kappa1);
    if disc < 0.0 {
        return Err(Error::NotSupercritical(format!(
            "discriminant {disc:.6e} < 0 for kappa_1 = {kappa1}"
        )));
    }
    Ok((b - disc.sqrt()) / 2.0)
}

/// Outer-region constant `m_0 = (q c_H / K)^{1/(q-1)}`.
pub fn m0(p: &Problem, boundary_k: f64, c_h: f64) -> f64 {
    (p.q * c_h / boundary_k).powf(p.m)
}

/// One cell of a classification scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanCell {
    pub n: usize,
    pub q: f64,
    pub k: f64,
    pub c_h: f64,
    pub class: Option<JlClass>,
    pub kappa1: f64,
    pub mu1: f64,
    pub gamma: f64,
    pub error: Option<String>,
}

impl ScanCell {
    pub fn csv_header() -> &'static str {
        "n,q,K,cH,class,kappa1,mu1,gamma"
    }
}

/// Full classification of a single `(n, q)` pair.
pub fn classify_point(n: usize, q: f64, intervals: usize) -> ScanCell {
    let mut cell = ScanCell {
        n,
        q,
        k: f64::NAN,
        c_h: f64::NAN,
        class: None,
        kappa1: f64::NAN,
        mu1: f64::NAN,
        gamma: f64::NAN,
        error: None,
    };
    let run = |cell: &mut ScanCell| -> Result<()> {
        let p = Problem::new(n, q)?;
        cell.c_h = trace_hardy_constant(n)?;
        let prof = solve_profile_v(&p, intervals)?;
        cell.k = prof.k;
        cell.class = Some(classify_jl(prof.k, cell.c_h));
        cell.kappa1 = robin_eigenvalue(n, prof.k, 1)?;
        if let Ok(mu) = mu1(cell.kappa1, &p) {
            cell.mu1 = mu;
            cell.gamma = p.m + mu;
        }
        Ok(())
    };
    if let Err(e) = run(&mut cell) {
        cell.error = Some(e.to_string());
    }
    cell
}

/// Classify every `(n, q)` pair; failures are recorded per cell.
pub fn jl_scan(ns: &[usize], qs: &[f64], intervals: usize) -> Vec<ScanCell> {
    let pairs: Vec<(usize, f64)> =
        ns.iter().flat_map(|&n| qs.iter().map(move |&q| (n, q))).collect();
    pairs.into_par_iter().map(|(n, q)| classify_point(n, q, intervals)).collect()
}

/// Smallest scanned `q` per dimension from which every larger scanned `q` is
/// supercritical; an empirical threshold, not a sharp constant.
pub fn empirical_thresholds(cells: &[ScanCell]) -> Vec<(usize, Option<f64>)> {
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let mut row: Vec<&ScanCell> = cells.iter().filter(|c| c.n == n).collect();
            row.sort_by(|a, b| a.q.total_cmp(&b.q));
            let mut threshold = None;
            for c in row.iter().rev() {
                if c.class == Some(JlClass::Supercritical) {
                    threshold = Some(c.q);
                } else {
                    break;
                }
            }
            (n, threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hardy_constant_closed_forms() {
        assert_relative_eq!(trace_hardy_constant(6).unwrap(), FRAC_PI_2, max_relative = 1e-12);
        assert_relative_eq!(trace_hardy_constant(4).unwrap(), 2.0 / PI, max_relative = 1e-12);
        assert!(trace_hardy_constant(2).is_err());
    }

    #[test]
    fn neumann_ground_state_is_constant() {
        let eigs = solve_angular_eigs(0.0, 5, 2, 512).unwrap();
        assert!(eigs[0].kappa.abs() < 1e-9);
        let e = &eigs[0].samples;
        let spread = e.values.iter().fold(0.0f64, |a, v| a.max((v - e.values[0]).abs()));
        assert!(spread < 1e-9);
        // the second Neumann mode on the half-sphere is the degree-2 harmonic
        assert_relative_eq!(eigs[1].kappa, 2.0 * 5.0, max_relative = 1e-8);
    }

    #[test]
    fn mu1_trivial_roots() {
        let p = Problem::new(10, 3.0).unwrap();
        let k_zero = -p.m * (p.nf() - 2.0 - p.m);
        assert!(mu1(k_zero, &p).unwrap().abs() < 1e-12);
        let b = p.nf() - 2.0 - 2.0 * p.m;
        let k_double = -b * b / 4.0 - p.m * (p.nf() - 2.0 - p.m);
        assert_relative_eq!(mu1(k_double, &p).unwrap(), b / 2.0, max_relative = 1e-12);
        assert!(mu1(k_double - 1.0, &p).is_err());
    }

    #[test]
    fn classify_bands() {
        assert_eq!(classify_jl(0.5, 1.0), JlClass::Supercritical);
        assert_eq!(classify_jl(1.0, 1.0), JlClass::Critical);
        assert_eq!(classify_jl(1.5, 1.0), JlClass::Subcritical);
    }

    #[test]
    fn profile_rejects_threshold() {
        let p = Problem::new(5, 4.0 / 3.0).unwrap();
        assert!(matches!(solve_profile_v(&p, 256), Err(Error::Domain(_))));
    }

    #[test]
    fn hermite_interpolation_is_accurate() {
        let p = Problem::new(8, 4.0).unwrap();
        let prof = solve_profile_v(&p, 256).unwrap();
        let fine = solve_profile_v(&p, 2048).unwrap();
        for k in 0..100 {
            let t = FRAC_PI_2 * (k as f64 + 0.37) / 100.0;
            assert_relative_eq!(prof.eval(t), fine.eval(t), max_relative = 1e-9);
        }
    }
}
