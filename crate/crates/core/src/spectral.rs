//! Eigensystem of the linearized rescaled operator
//! `-(Delta - y/2 . grad - m/2) phi = lambda phi` with `d_nu phi = K r^{-1} phi`.
//!
//! Modes separate as `phi_ij = e_i(theta) a_ij(r)` with Kummer radial factors
//! `a_1j = A r^{-gamma} M(1-j, n/2 - gamma, r^2/4)` and
//! `a_ij = A r^{gamma_i} M(1-j, n/2 + gamma_i, r^2/4)` for `i >= 2`.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::{
    self, AngularEigenpair, AngularProfile, AngularSamples, JlClass, Problem,
};
use crate::error::{Error, Result};
use crate::fv::{AxialField, FvOperator};
use crate::quad;
use crate::specfun::{kummer_polynomial, kummer_polynomial_coeffs, kummer_polynomial_dz};

/// Radial exponent attached to angular mode `i`: `gamma` for `i = 1`,
/// `gamma_i` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialExponent {
    pub i: usize,
    pub value: f64,
}

impl RadialExponent {
    /// Power of `r` in the radial factor near the origin.
    pub fn power(&self) -> f64 {
        if self.i == 1 {
            -self.value
        } else {
            self.value
        }
    }
}

/// Roots of `g^2 - (n-2) g = kappa_1` in `(0, (n-2)/2)` and
/// `g^2 + (n-2) g = kappa_i` with `g > 0` for `i >= 2`.
pub fn radial_exponents(kappas: &[f64], n: usize) -> Result<Vec<RadialExponent>> {
    let b = n as f64 - 2.0;
    kappas
        .iter()
        .enumerate()
        .map(|(k, &kappa)| {
            let i = k + 1;
            if i == 1 {
                let disc = b * b + 4.0 * kappa;
                if !(disc > 0.0) {
                    return Err(Error::NotSupercritical(format!(
                        "kappa_1 = {kappa} <= -(n-2)^2/4 leaves no exponent in (0, (n-2)/2)"
                    )));
                }
                // written to avoid cancellation when kappa_1 is small
                let value = -2.0 * kappa / (b + disc.sqrt());
                if !(value > 0.0) {
                    return Err(Error::Domain(format!("kappa_1 = {kappa} must be negative")));
                }
                Ok(RadialExponent { i, value })
            } else {
                if !(kappa > 0.0) {
                    return Err(Error::Domain(format!("kappa_{i} = {kappa} must be positive")));
                }
                let value = 2.0 * kappa / (b + (b * b + 4.0 * kappa).sqrt());
                Ok(RadialExponent { i, value })
            }
        })
        .collect()
}

/// `lambda_1j = -gamma/2 + m/2 + j - 1`, `lambda_ij = gamma_i/2 + m/2 + j - 1`.
pub fn eigenvalue(j: usize, exponent: &RadialExponent, p: &Problem) -> f64 {
    0.5 * exponent.power() + 0.5 * p.m + (j as f64 - 1.0)
}

/// One separated eigenmode `phi_ij`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenMode {
    pub i: usize,
    pub j: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub exponent: RadialExponent,
    /// Second Kummer parameter `n/2 + power`.
    pub kummer_b: f64,
    pub norm_const: f64,
    pub c_small: f64,
    pub c_large: f64,
}

impl EigenMode {
    fn degree(&self) -> usize {
        self.j - 1
    }

    /// Radial factor divided by its small-`r` power: `A M(1-j, b, r^2/4)`.
    pub fn regular_part(&self, r: f64) -> f64 {
        self.norm_const * kummer_polynomial(self.degree(), self.kummer_b, 0.25 * r * r)
    }

    pub fn radial(&self, r: f64) -> f64 {
        r.powf(self.exponent.power()) * self.regular_part(r)
    }

    pub fn radial_deriv(&self, r: f64) -> f64 {
        let p = self.exponent.power();
        let z = 0.25 * r * r;
        let m = kummer_polynomial(self.degree(), self.kummer_b, z);
        let dm = kummer_polynomial_dz(self.degree(), self.kummer_b, z);
        self.norm_const * r.powf(p - 1.0) * (p * m + 0.5 * r * r * dm)
    }
}

/// Radial factor at `r > 0`.
pub fn radial_mode(mode: &EigenMode, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("radial modes need r > 0, got {r}")));
    }
    Ok(mode.radial(r))
}

fn radial_upper_limit(n: usize, mode_power: f64, degree: usize) -> f64 {
    // integrand r^{n-1+2p+4deg} e^{-r^2/4} peaks at r^2 = 2 (n-1+2p+4deg)
    let expo = (n as f64 - 1.0 + 2.0 * mode_power + 4.0 * degree as f64).max(1.0);
    (2.0 * expo).sqrt() + 14.0
}

/// `int_0^R f(r) e^{-r^2/4} r^{n-1} dr` on panels adapted to the Gaussian.
fn gaussian_radial_integral(f: impl Fn(f64) -> f64, n: usize, upper: f64) -> Result<f64> {
    let breaks: Vec<f64> = (0..=16).map(|k| upper * k as f64 / 16.0).collect();
    quad::integrate_piecewise(
        |r: f64| {
            if r == 0.0 {
                0.0
            } else {
                f(r) * (-0.25 * r * r).exp() * r.powi(n as i32 - 1)
            }
        },
        &breaks,
        1e-300,
        1e-14,
    )
}

fn build_mode(i: usize, j: usize, kappa: f64, exponent: RadialExponent, p: &Problem) -> Result<EigenMode> {
    let power = exponent.power();
    let b = 0.5 * p.nf() + power;
    let deg = j - 1;
    let upper = radial_upper_limit(p.n, power, deg);
    let norm2 = gaussian_radial_integral(
        |r| {
            let v = r.powf(power) * kummer_polynomial(deg, b, 0.25 * r * r);
            v * v
        },
        p.n,
        upper,
    )?;
    let a = 1.0 / norm2.sqrt();
    let lead = kummer_polynomial_coeffs(deg, b)[deg] * 0.25f64.powi(deg as i32);
    Ok(EigenMode {
        i,
        j,
        kappa,
        lambda: eigenvalue(j, &exponent, p),
        exponent,
        kummer_b: b,
        norm_const: a,
        c_small: a,
        c_large: a * lead,
    })
}

/// Angular data, exponents and the mode inventory for one `(n, q)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Eigensystem {
    pub problem: Problem,
    pub c_h: f64,
    pub profile: AngularProfile,
    pub angular: Vec<AngularEigenpair>,
    pub exponents: Vec<RadialExponent>,
    /// Modes sorted by eigenvalue, ties broken by `(i, j)`.
    pub modes: Vec<EigenMode>,
}

impl Eigensystem {
    /// Build every mode with `lambda_ij <= lambda_cap`, where the default cap
    /// is `lambda* + 2` with `lambda*` the first positive `lambda_1j`.
    /// At least `min_modes` modes are returned.
    pub fn build(
        p: &Problem,
        intervals: usize,
        lambda_cap: Option<f64>,
        min_modes: usize,
    ) -> Result<Self> {
        let c_h = angular::trace_hardy_constant(p.n)?;
        let profile = angular::solve_profile_v(p, intervals)?;
        if angular::classify_jl(profile.k, c_h) != JlClass::Supercritical {
            return Err(Error::NotSupercritical(format!(
                "K = {} is not below c_H = {c_h} for n = {}, q = {}",
                profile.k, p.n, p.q
            )));
        }
        let first = angular::solve_angular_eigs(profile.k, p.n, 1, intervals)?;
        let gamma = radial_exponents(&[first[0].kappa], p.n)?[0];
        let lambda_star = first_positive_lambda(&gamma, p);
        let mut cap = lambda_cap.unwrap_or(lambda_star + 2.0);

        // add angular modes until their ground radial level exceeds the cap
        let mut count = 2;
        let (angular, exponents) = loop {
            let eigs = angular::solve_angular_eigs(profile.k, p.n, count, intervals)?;
            let kappas: Vec<f64> = eigs.iter().map(|e| e.kappa).collect();
            let exps = radial_exponents(&kappas, p.n)?;
            let top = eigenvalue(1, exps.last().expect("non-empty"), p);
            let inventory = count_modes(&exps, p, cap);
            if top > cap && inventory >= min_modes {
                break (eigs, exps);
            }
            if top > cap {
                // the cap is too low for the requested count; raise it
                cap += 1.0;
            } else {
                count += 1;
            }
        };
        let mut specs = Vec::new();
        for (idx, exp) in exponents.iter().enumerate() {
            let mut j = 1;
            while eigenvalue(j, exp, p) <= cap {
                specs.push((idx + 1, j, angular[idx].kappa, *exp));
                j += 1;
            }
        }
        let mut modes: Vec<EigenMode> = specs
            .par_iter()
            .map(|&(i, j, kappa, exp)| build_mode(i, j, kappa, exp, p))
            .collect::<Result<_>>()?;
        modes.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then((a.i, a.j).cmp(&(b.i, b.j))));
        Ok(Eigensystem { problem: *p, c_h, profile, angular, exponents, modes })
    }

    pub fn k(&self) -> f64 {
        self.profile.k
    }

    pub fn gamma(&self) -> f64 {
        self.exponents[0].value
    }

    pub fn mode(&self, i: usize, j: usize) -> Option<&EigenMode> {
        self.modes.iter().find(|m| m.i == i && m.j == j)
    }

    pub fn angular_mode(&self, i: usize) -> &AngularSamples {
        &self.angular[i - 1].samples
    }

    pub fn phi(&self, mode: &EigenMode, r: f64, theta: f64) -> f64 {
        self.angular_mode(mode.i).eval(theta) * mode.radial(r)
    }

    /// `phi_ij / sigma`, with the `r^{-gamma}` factors cancelled analytically.
    pub fn eta(&self, mode: &EigenMode, r: f64, theta: f64) -> f64 {
        let e1 = self.angular_mode(1).eval(theta);
        let ratio = if mode.i == 1 { 1.0 } else { self.angular_mode(mode.i).eval(theta) / e1 };
        let power = mode.exponent.power() + self.gamma();
        let rp = if power == 0.0 { 1.0 } else { r.powf(power) };
        ratio * rp * mode.regular_part(r)
    }

    pub fn weights(&self) -> WeightContext {
        WeightContext { gamma: self.gamma(), e1: self.angular[0].samples.clone() }
    }

    /// Gram matrix of the first `count` modes under `(., .)_rho`, using
    /// Simpson on the angular samples and adaptive radial quadrature.
    pub fn gram(&self, count: usize) -> Result<Vec<Vec<f64>>> {
        let n = self.problem.n;
        let modes = &self.modes[..count.min(self.modes.len())];
        let mut g = vec![vec![0.0; modes.len()]; modes.len()];
        for (a, ma) in modes.iter().enumerate() {
            for (b, mb) in modes.iter().enumerate().skip(a) {
                let ang = self.angular_mode(ma.i).inner(self.angular_mode(mb.i), n);
                let deg = ma.j.max(mb.j) - 1;
                let upper = radial_upper_limit(n, ma.exponent.power().min(mb.exponent.power()), deg);
                let rad = gaussian_radial_integral(|r| ma.radial(r) * mb.radial(r), n, upper)?;
                g[a][b] = ang * rad;
                g[b][a] = g[a][b];
            }
        }
        Ok(g)
    }
}

fn first_positive_lambda(gamma: &RadialExponent, p: &Problem) -> f64 {
    let mut j = 1;
    while eigenvalue(j, gamma, p) <= 0.0 {
        j += 1;
    }
    eigenvalue(j, gamma, p)
}

fn count_modes(exps: &[RadialExponent], p: &Problem, cap: f64) -> usize {
    exps.iter()
        .map(|e| {
            let mut j = 0;
            while eigenvalue(j + 1, e, p) <= cap {
                j += 1;
            }
            j
        })
        .sum()
}

/// Max-norm deviation of a Gram matrix from the identity.
pub fn gram_deviation(g: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, row) in g.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

/// Relative residual of the radial equation
/// `a'' + (n-1)/r a' - kappa/r^2 a - r/2 a' - m/2 a + lambda a = 0`
/// on a logarithmic grid over `[r_lo, r_hi]`, with derivatives from
/// fourth-order differences in `t = ln r` of step `h`.
pub fn radial_residual(mode: &EigenMode, p: &Problem, r_lo: f64, r_hi: f64, h: f64) -> f64 {
    let (t0, t1) = (r_lo.ln(), r_hi.ln());
    let steps = ((t1 - t0) / h).round() as usize;
    let a = |t: f64| mode.radial(t.exp());
    let mut worst = 0.0f64;
    for k in 0..=steps {
        let t = t0 + k as f64 * h;
        let r = t.exp();
        let f = [a(t - 2.0 * h), a(t - h), a(t), a(t + h), a(t + 2.0 * h)];
        let at = (f[0] - 8.0 * f[1] + 8.0 * f[3] - f[4]) / (12.0 * h);
        let att = (-f[0] + 16.0 * f[1] - 30.0 * f[2] + 16.0 * f[3] - f[4]) / (12.0 * h * h);
        let d1 = at / r;
        let d2 = (att - at) / (r * r);
        let terms = [
            d2,
            (p.nf() - 1.0) / r * d1,
            -mode.kappa / (r * r) * f[2],
            -0.5 * r * d1,
            -0.5 * p.m * f[2],
            mode.lambda * f[2],
        ];
        let sum: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|v| v.abs()).sum();
        worst = worst.max(sum.abs() / scale);
    }
    worst
}

/// Least-squares slope of `ln|f(r)|` against `ln r` on `[lo, hi]`.
pub fn log_slope(f: impl Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (0..samples)
        .map(|k| {
            let r = (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (samples - 1) as f64).exp();
            (r.ln(), f(r).abs().ln())
        })
        .collect();
    linear_fit(&pts).0
}

/// Ordinary least squares `y = slope x + intercept`; returns
/// `(slope, intercept, standard error of the slope)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = if pts.len() > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    (slope, intercept, se)
}

/// Large-`r` fitting window for a mode: far enough out that the lower-order
/// Kummer terms perturb the slope by under 1% of `|2 lambda - m|`.
pub fn large_r_window(mode: &EigenMode, p: &Problem) -> (f64, f64) {
    let target = (2.0 * mode.lambda - p.m).abs();
    if mode.j == 1 || target == 0.0 {
        return (20.0, 40.0);
    }
    // a degree-k polynomial in z with roots z_i has log-derivative
    // k/z + sum z_i / z^2 + ..., so the slope bias is about 2 sum z_i / z
    let coeffs = kummer_polynomial_coeffs(mode.j - 1, mode.kummer_b);
    let k = coeffs.len() - 1;
    let root_sum = (-coeffs[k - 1] / coeffs[k]).abs();
    let z = (200.0 * root_sum / target).max(100.0);
    let lo = (4.0 * z).sqrt().max(20.0);
    (lo, 2.0 * lo)
}

/// Weights built from `sigma = r^{-gamma} e_1(theta)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightContext {
    pub gamma: f64,
    pub e1: AngularSamples,
}

impl WeightContext {
    pub fn rho(r: f64) -> f64 {
        (-0.25 * r * r).exp()
    }

    pub fn sigma(&self, r: f64, theta: f64) -> f64 {
        r.powf(-self.gamma) * self.e1.eval(theta)
    }

    pub fn b(&self, r: f64, theta: f64) -> f64 {
        self.sigma(r, theta).powi(2)
    }

    pub fn c(&self, r: f64, theta: f64) -> f64 {
        self.b(r, theta) * Self::rho(r)
    }

    /// Second-order difference residuals of `Delta sigma = 0` (relative,
    /// interior maximum) and `r^{-1} d_theta sigma = K r^{-1} sigma` on the
    /// boundary, sampled on `r in [0.5, 2]` with step `h`.
    pub fn residuals(&self, n: usize, k: f64, h: f64) -> (f64, f64) {
        let nn = n as f64;
        let s = |r: f64, t: f64| self.sigma(r, t);
        let mut interior = 0.0f64;
        let mut boundary = 0.0f64;
        let nr = (1.5 / h).round() as usize;
        let nt = (FRAC_PI_2 / h).floor() as usize;
        for a in 0..=nr {
            let r = 0.5 + a as f64 * h;
            for b in 1..nt {
                let t = b as f64 * h;
                if t + h > FRAC_PI_2 {
                    break;
                }
                let c = s(r, t);
                let srr = (s(r + h, t) - 2.0 * c + s(r - h, t)) / (h * h);
                let sr = (s(r + h, t) - s(r - h, t)) / (2.0 * h);
                let stt = (s(r, t + h) - 2.0 * c + s(r, t - h)) / (h * h);
                let st = (s(r, t + h) - s(r, t - h)) / (2.0 * h);
                let terms = [srr, (nn - 1.0) / r * sr, stt / (r * r), (nn - 2.0) * t.cos() / t.sin() * st / (r * r)];
                let scale: f64 = terms.iter().map(|v| v.abs()).sum();
                interior = interior.max(terms.iter().sum::<f64>().abs() / scale);
            }
            let t = FRAC_PI_2;
            let st = (3.0 * s(r, t) - 4.0 * s(r, t - h) + s(r, t - 2.0 * h)) / (2.0 * h);
            let res = (st / r - k / r * s(r, t)).abs() / (k / r * s(r, t)).abs();
            boundary = boundary.max(res);
        }
        (interior, boundary)
    }
}

/// `(f, g)_rho` for fields on the grid of a `rho`-weighted operator.
pub fn inner_rho(op: &FvOperator, f: &AxialField, g: &AxialField) -> Result<f64> {
    f.check_grid(&op.grid)?;
    g.check_grid(&op.grid)?;
    Ok(op.inner(&f.values, &g.values))
}

/// Boundary pairing `int_{theta = pi/2} f g w r^{n-2} dr |S^{n-2}|`; with a
/// `C`-weighted operator this is the `C`-weighted boundary product.
pub fn inner_boundary(op: &FvOperator, f: &AxialField, g: &AxialField) -> Result<f64> {
    f.check_grid(&op.grid)?;
    g.check_grid(&op.grid)?;
    Ok(op.inner_boundary(&f.values, &g.values))
}

/// Trial field with analytic partial derivatives `(value, d_r, d_theta)`.
pub type Trial<'a> = Box<dyn Fn(f64, f64) -> (f64, f64, f64) + Sync + 'a>;

/// Terms of the quadratic form of `-A` for one trial field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FormTerms {
    pub grad2: f64,
    pub norm2: f64,
    pub boundary: f64,
}

impl FormTerms {
    /// `|grad|^2 + (m/2 + mu)|.|^2 - K boundary`.
    pub fn form(&self, m: f64, k: f64, mu: f64) -> f64 {
        self.grad2 + (0.5 * m + mu) * self.norm2 - k * self.boundary
    }

    pub fn ratio(&self, m: f64, k: f64, mu: f64) -> f64 {
        self.form(m, k, mu) / (self.grad2 + self.norm2)
    }
}

/// Tensor Gauss quadrature of `||grad F||_rho^2`, `||F||_rho^2` and
/// `int_{boundary} r^{-1} F^2 rho`.
pub fn form_terms(n: usize, trial: &Trial<'_>, r_lo: f64, r_hi: f64) -> FormTerms {
    let area = crate::specfun::sphere_area(n - 2);
    let (tr, wr) = panels(r_lo.ln(), r_hi.ln(), 120, 12);
    let (tt, wt) = panels(0.0, FRAC_PI_2, 16, 12);
    let mut grad2 = 0.0;
    let mut norm2 = 0.0;
    let mut boundary = 0.0;
    for (t, w) in tr.iter().zip(&wr) {
        let r = t.exp();
        let jac = w * r * WeightContext::rho(r);
        let rn = r.powi(n as i32 - 1);
        let mut g = 0.0;
        let mut v = 0.0;
        for (th, wth) in tt.iter().zip(&wt) {
            let (f, fr, ft) = trial(r, *th);
            let sw = wth * th.sin().powi(n as i32 - 2);
            g += sw * (fr * fr + ft * ft / (r * r));
            v += sw * f * f;
        }
        grad2 += jac * rn * g;
        norm2 += jac * rn * v;
        let (fb, _, _) = trial(r, FRAC_PI_2);
        boundary += jac * r.powi(n as i32 - 3) * fb * fb;
    }
    FormTerms { grad2: area * grad2, norm2: area * norm2, boundary: area * boundary }
}

fn panels(a: f64, b: f64, count: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(count * order);
    let mut w = Vec::with_capacity(count * order);
    let h = (b - a) / count as f64;
    for k in 0..count {
        let (px, pw) = quad::gauss_legendre_on(order, a + k as f64 * h, a + (k + 1) as f64 * h);
        x.extend(px);
        w.extend(pw);
    }
    (x, w)
}

/// Outcome of a coercivity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub n: usize,
    pub q: f64,
    pub k: f64,
    pub mu: f64,
    pub trials: usize,
    pub min_ratio: f64,
    pub min_concentrated_ratio: f64,
    pub ground_form: Option<f64>,
    pub ground_lambda: Option<f64>,
    pub pass: bool,
}

/// Random smooth trial: `exp(-r^2/(8 s^2)) sum c_kl r^k cos(2 l theta)`.
fn random_trial(rng: &mut ChaCha8Rng) -> Trial<'static> {
    let s: f64 = rng.gen_range(0.3..2.0);
    let c: Vec<[f64; 4]> = (0..4)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    Box::new(move |r: f64, t: f64| {
        let g = (-r * r / (8.0 * s * s)).exp();
        let dg = -r / (4.0 * s * s) * g;
        let (mut p, mut pr, mut pt) = (0.0, 0.0, 0.0);
        for (k, row) in c.iter().enumerate() {
            let rk = r.powi(k as i32);
            let drk = if k == 0 { 0.0 } else { k as f64 * r.powi(k as i32 - 1) };
            for (l, ckl) in row.iter().enumerate() {
                let a = 2.0 * l as f64;
                let (cs, sn) = ((a * t).cos(), (a * t).sin());
                p += ckl * rk * cs;
                pr += ckl * drk * cs;
                pt -= ckl * rk * a * sn;
            }
        }
        (p * g, pr * g + p * dg, pt * g)
    })
}

/// Trial concentrating at the origin along the critical Hardy profile:
/// `e(theta) r^{-(n-2)/2} exp(-ln(r/eps)^2 / (2 w^2))`.
fn concentrated_trial(n: usize, e: AngularSamples, eps: f64, w: f64) -> Trial<'static> {
    let p = -(n as f64 - 2.0) / 2.0;
    Box::new(move |r: f64, t: f64| {
        let l = (r / eps).ln();
        let f = r.powf(p) * (-l * l / (2.0 * w * w)).exp();
        let fr = f * (p - l / (w * w)) / r;
        (f * e.eval(t), fr * e.eval(t), f * e.eval_deriv(t))
    })
}

/// Evaluate the coercivity form on `trials` random smooth fields and on a
/// family concentrating at the origin.
///
/// `pass` reports whether every ratio is positive at the given `mu`.
pub fn coercivity_check(p: &Problem, trials: usize, mu: f64, seed: u64) -> Result<CoercivityReport> {
    let c_h = angular::trace_hardy_constant(p.n)?;
    let prof = angular::solve_profile_v(p, 1024)?;
    let k = prof.k;
    let e1 = angular::solve_angular_eigs(k, p.n, 1, 1024)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: Vec<Trial<'static>> = (0..trials).map(|_| random_trial(&mut rng)).collect();
    let min_ratio = random
        .par_iter()
        .map(|t| form_terms(p.n, t, 1e-6, 40.0).ratio(p.m, k, mu))
        .reduce(|| f64::INFINITY, f64::min);
    let mut concentrated = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        for w in [1.0, 2.0, 3.0] {
            concentrated.push(concentrated_trial(p.n, e1.samples.clone(), eps, w));
        }
    }
    let min_concentrated_ratio = concentrated
        .par_iter()
        .map(|t| form_terms(p.n, t, 1e-12, 40.0).ratio(p.m, k, mu))
        .reduce(|| f64::INFINITY, f64::min);
    let (ground_form, ground_lambda) = if angular::classify_jl(k, c_h) == JlClass::Supercritical {
        let sys = Eigensystem::build(p, 1024, Some(0.0), 1)?;
        let mode = sys.modes[0].clone();
        let e = sys.angular_mode(1).clone();
        let trial: Trial<'_> = Box::new(move |r: f64, t: f64| {
            let a = mode.radial(r);
            (a * e.eval(t), mode.radial_deriv(r) * e.eval(t), a * e.eval_deriv(t))
        });
        let terms = form_terms(p.n, &trial, 1e-8, 40.0);
        (Some(terms.form(p.m, k, mu) / terms.norm2 - mu), Some(sys.modes[0].lambda))
    } else {
        (None, None)
    };
    let pass = min_ratio > 0.0 && min_concentrated_ratio > 0.0;
    Ok(CoercivityReport {
        n: p.n,
        q: p.q,
        k,
        mu,
        trials,
        min_ratio,
        min_concentrated_ratio,
        ground_form,
        ground_lambda,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponent_closed_forms() {
        let n = 10;
        let e = radial_exponents(&[-5.0, (n - 1) as f64], n).unwrap();
        assert_relative_eq!(e[0].value * e[0].value - 8.0 * e[0].value, -5.0, max_relative = 1e-14);
        assert_relative_eq!(e[1].value, 1.0, max_relative = 1e-14);
        assert!(radial_exponents(&[-16.0], n).is_err());
    }

    #[test]
    fn ladder_spacing() {
        let p = Problem::new(12, 4.0).unwrap();
        let g = RadialExponent { i: 1, value: 2.0 };
        for j in 1..6 {
            let gap = eigenvalue(j + 1, &g, &p) - eigenvalue(j, &g, &p);
            assert!((gap - 1.0).abs() <= 4.0 * f64::EPSILON * j as f64, "gap {gap}");
        }
        assert_relative_eq!(eigenvalue(1, &g, &p), -(2.0 - p.m) / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 3.0 * k as f64 - 1.0)).collect();
        let (s, i, se) = linear_fit(&pts);
        assert_relative_eq!(s, 3.0, max_relative = 1e-14);
        assert_relative_eq!(i, -1.0, max_relative = 1e-13);
        assert!(se < 1e-12);
    }
}
