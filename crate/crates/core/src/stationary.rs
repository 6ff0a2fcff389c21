//! Singular and regular stationary solutions of `Delta U = 0`,
//! `d_nu U = U^q` on the half-space.
//!
//! The regular solution with `U(0) = alpha` is solved on a pole grid that
//! contains the origin. Its far field `U_inf - k e_1(theta) r^{-gamma}` closes
//! the outer face, and `k` is carried as one extra unknown.

use serde::{Deserialize, Serialize};

use crate::angular::{self, AngularProfile, AngularSamples, Problem};
use crate::banded::Banded;
use crate::error::{Error, Result};
use crate::fv::{AxialField, AxialGrid, FvOperator};
use crate::quad;
use crate::specfun::sphere_area;

/// `U_inf = V(theta) r^{-m}`.
pub fn u_infinity(p: &Problem, v: &AngularProfile, r: f64, theta: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain("U_inf is singular at the origin".into()));
    }
    Ok(v.eval(theta) * r.powf(-p.m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StationaryOptions {
    /// Outer radius in the intrinsic units of `U_1`.
    pub r_max: f64,
    /// Radius of the uniformly spaced ball around the origin.
    pub core: f64,
    /// Radial spacing inside the core.
    pub core_step: f64,
    /// Spacing in `ln r` outside the core.
    pub log_step: f64,
    pub nt: usize,
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Largest accepted condition number of the far-field fit.
    pub max_condition: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        StationaryOptions {
            r_max: 50.0,
            core: 1.0,
            core_step: 0.035,
            log_step: 0.035,
            nt: 49,
            newton_tol: 1e-10,
            max_iter: 60,
            max_condition: 1e8,
        }
    }
}

impl StationaryOptions {
    /// Halved spacing in both directions.
    pub fn refined(&self) -> Self {
        StationaryOptions {
            core_step: 0.5 * self.core_step,
            log_step: 0.5 * self.log_step,
            nt: 2 * self.nt - 1,
            ..*self
        }
    }
}

/// Far-field fit of the deficit `U_inf - U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarFieldFit {
    /// Coefficient `k` of `e_1(theta) r^{-gamma}`.
    pub k1: f64,
    /// Fitted log-log slope of the `e_1` projection.
    pub slope: f64,
    pub rmax: f64,
    pub condition: f64,
}

/// Inputs shared by every solve for one `(n, q)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryContext {
    pub problem: Problem,
    pub profile: AngularProfile,
    pub e1: AngularSamples,
    pub mu1: f64,
}

impl StationaryContext {
    /// Profile, ground state and `mu_1` for a supercritical `(n, q)`.
    pub fn new(problem: Problem, intervals: usize) -> Result<Self> {
        let profile = angular::solve_profile_v(&problem, intervals)?;
        let c_h = angular::trace_hardy_constant(problem.n)?;
        if angular::classify_jl(profile.k, c_h) != angular::JlClass::Supercritical {
            return Err(Error::NotSupercritical(format!(
                "n = {}, q = {}: K = {:.12} is not below c_H = {:.12}",
                problem.n, problem.q, profile.k, c_h
            )));
        }
        let e = angular::solve_angular_eigs(profile.k, problem.n, 1, intervals)?;
        let mu1 = angular::mu1(e[0].kappa, &problem)?;
        Ok(StationaryContext { problem, profile, e1: e[0].samples.clone(), mu1 })
    }

    pub fn gamma(&self) -> f64 {
        self.problem.m + self.mu1
    }

    pub fn u_inf(&self, r: f64, theta: f64) -> f64 {
        self.profile.eval(theta) * r.powf(-self.problem.m)
    }
}

/// Regular solution on a grid containing the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryField {
    pub ctx: StationaryContext,
    pub grid: AxialGrid,
    /// Values of `U`; the nodes at `r = 0` all carry `U(0)`.
    pub field: AxialField,
    pub alpha: f64,
    /// Far-field coefficient extracted from the `e_1` projection.
    pub k_alpha: f64,
    /// Coefficient carried by the outer closure, solved together with `U`.
    pub k_closure: f64,
    /// Radius below which `U` itself is interpolated.
    pub core: f64,
    pub fit: FarFieldFit,
    pub newton_iterations: usize,
    /// Scaled max-norm residual of the discrete system at the solution.
    pub residual: f64,
}

fn angular_weights(grid: &AxialGrid) -> Vec<f64> {
    let n = grid.n;
    let h = grid.theta[1] - grid.theta[0];
    let w = quad::simpson_weights(grid.nt(), h);
    let area = sphere_area(n - 2);
    grid.theta.iter().zip(&w).map(|(t, w)| area * w * t.sin().powi(n as i32 - 2)).collect()
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Solve for `U_alpha` directly with `U(0) = alpha`, on the intrinsic grid
/// scaled by `alpha^{-(q-1)}`.
///
/// The origin is an ordinary node, so regularity there is built in. Away
/// from it the equations are written for `U - U_inf` (the discrete residual
/// of `U_inf` is subtracted), which keeps the small far-field deficit free of
/// the truncation error of `U_inf`. The outer face carries the flux of
/// `U_inf - k e_1 r^{-gamma}` and `k` is the extra unknown fixed by `U(0)`.
pub fn solve_u_alpha_direct(
    ctx: &StationaryContext,
    alpha: f64,
    opts: &StationaryOptions,
) -> Result<StationaryField> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let p = &ctx.problem;
    let q = p.q;
    let scale = alpha.powf(-(q - 1.0));
    let core = opts.core * scale;
    let grid = AxialGrid::new(
        p.n,
        AxialGrid::pole_log_r(opts.core_step * scale, core, opts.log_step, opts.r_max * scale),
        AxialGrid::uniform_theta(opts.nt),
        0.0,
    )?;
    let op = FvOperator::new(&grid, |_, _| 1.0);
    let (nr, nt, len) = (grid.nr(), grid.nt(), grid.len());
    let pole = nt - 1;
    let gamma = ctx.gamma();
    let r_out = grid.r[nr - 1];

    let uinf: Vec<f64> = (0..len)
        .map(|k| if k < nt { 0.0 } else { ctx.u_inf(grid.r[k / nt], grid.theta[k % nt]) })
        .collect();
    let mut tau = op.flux(&uinf);
    for i in 0..nr {
        let k = op.boundary_index(i);
        tau[k] += op.boundary[i] * uinf[k].powf(q);
    }
    for j in 0..nt {
        tau[grid.idx(nr - 1, j)] += op.outer[j] * (-p.m * uinf[grid.idx(nr - 1, j)] / r_out);
    }
    for (k, t) in tau.iter_mut().enumerate() {
        *t *= smoothstep((grid.r[k / nt] / core - 0.5) / 1.5);
    }
    // outer flux per unit k
    let dflux: Vec<f64> = (0..nt)
        .map(|j| op.outer[j] * gamma * ctx.e1.eval(grid.theta[j]) * r_out.powf(-gamma - 1.0))
        .collect();

    let base = op.flux_matrix();
    let mut row_scale: Vec<f64> = (0..len).map(|k| base.get(k, k).abs().max(1e-300)).collect();
    let pole_diag: f64 = (0..nt).map(|j| op.radial[j]).sum();
    for s in row_scale.iter_mut().take(pole) {
        *s = 1.0;
    }
    row_scale[pole] = pole_diag.max(1e-300);

    let residual = |u: &[f64], k_far: f64| -> Vec<f64> {
        let mut f = vec![0.0; len];
        base.matvec(u, &mut f);
        for i in 0..nr {
            let b = op.boundary_index(i);
            f[b] += op.boundary[i] * u[b].max(0.0).powf(q);
        }
        for j in 0..nt {
            let k = grid.idx(nr - 1, j);
            f[k] += op.outer[j] * (-p.m * uinf[k] / r_out) + dflux[j] * k_far;
        }
        for (v, t) in f.iter_mut().zip(&tau) {
            *v -= t;
        }
        let total: f64 = f[..nt].iter().sum();
        for j in 0..pole {
            f[j] = u[j] - u[pole];
        }
        f[pole] = total;
        for (v, s) in f.iter_mut().zip(&row_scale) {
            *v /= s;
        }
        f
    };
    let norm = |f: &[f64], u: &[f64]| {
        f.iter().fold((u[pole] - alpha).abs() / alpha, |a, v| a.max(v.abs()))
    };

    let mut u: Vec<f64> = uinf.iter().map(|v| v.min(alpha)).collect();
    u[..nt].fill(alpha);
    let mut k_far = 0.0;
    let mut f = residual(&u, k_far);
    let mut fnorm = norm(&f, &u);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while fnorm > opts.newton_tol {
        if iterations >= opts.max_iter {
            return Err(Error::NewtonDivergence { iterations, residual: fnorm, trace });
        }
        iterations += 1;
        let mut jac: Banded = base.clone();
        for i in 0..nr {
            let b = op.boundary_index(i);
            jac.add(b, b, op.boundary[i] * q * u[b].max(0.0).powf(q - 1.0));
        }
        // the pole keeps one balance equation; the other copies are tied to it
        let mut total = vec![0.0; 2 * nt];
        for j in 0..nt {
            for (c, t) in total.iter_mut().enumerate() {
                *t += jac.get(j, c);
            }
        }
        for j in 0..nt {
            jac.clear_row(j);
        }
        for j in 0..pole {
            jac.set(j, j, 1.0);
            jac.set(j, pole, -1.0);
        }
        for (c, t) in total.iter().enumerate() {
            if *t != 0.0 {
                jac.set(pole, c, *t);
            }
        }
        for k in 0..len {
            let s = 1.0 / row_scale[k];
            for c in k.saturating_sub(nt)..(k + nt + 1).min(len) {
                let v = jac.get(k, c);
                if v != 0.0 {
                    jac.set(k, c, v * s);
                }
            }
        }
        let lu = jac.factor()?;
        let mut x1: Vec<f64> = f.iter().map(|v| -v).collect();
        lu.solve(&mut x1);
        let mut x2 = vec![0.0; len];
        for j in 0..nt {
            let k = grid.idx(nr - 1, j);
            x2[k] = -dflux[j] / row_scale[k];
        }
        lu.solve(&mut x2);
        if x2[pole].abs() < 1e-300 {
            return Err(Error::IllConditioned("U(0) does not respond to the far-field coefficient".into()));
        }
        let dk = (alpha - u[pole] - x1[pole]) / x2[pole];
        let du: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + dk * b).collect();
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&du).map(|(a, d)| a + step * d).collect();
            let kt = k_far + step * dk;
            let ft = residual(&trial, kt);
            let tn = norm(&ft, &trial);
            if tn < (1.0 - 1e-4 * step) * fnorm || step < 1e-10 {
                trace.push(step);
                u = trial;
                k_far = kt;
                f = ft;
                fnorm = tn;
                break;
            }
            step *= 0.5;
        }
        if !fnorm.is_finite() {
            return Err(Error::NewtonDivergence { iterations, residual: fnorm, trace });
        }
        if trace.len() >= 8 && trace[trace.len() - 8..].iter().all(|s| *s < 1e-9) {
            return Err(Error::NewtonDivergence { iterations, residual: fnorm, trace });
        }
    }

    let field = AxialField { values: u };
    let fit = far_field_fit(&grid, &field, ctx, opts.max_condition)?;
    Ok(StationaryField {
        ctx: ctx.clone(),
        grid,
        field,
        alpha,
        k_alpha: fit.k1,
        k_closure: k_far,
        core,
        fit,
        newton_iterations: iterations,
        residual: fnorm,
    })
}

/// `U_1`, the regular solution with `U(0) = 1`.
pub fn solve_u1(ctx: &StationaryContext, opts: &StationaryOptions) -> Result<StationaryField> {
    solve_u_alpha_direct(ctx, 1.0, opts)
}

/// Far-field coefficient from two grid levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolatedK {
    pub coarse: f64,
    pub fine: f64,
    /// Richardson value assuming second-order convergence.
    pub value: f64,
    /// `|value - fine|`, an estimate of the error left in `fine`.
    pub error_estimate: f64,
}

/// Solve at `opts` and at `opts.refined()` and extrapolate the far-field
/// coefficient. The coefficient is a small remainder of `O(1)` near-field
/// values, so its grid error is much larger than that of `U` itself.
///
/// Returns the fine solution with `k_alpha` replaced by the extrapolated
/// value.
pub fn solve_u_alpha_extrapolated(
    ctx: &StationaryContext,
    alpha: f64,
    opts: &StationaryOptions,
) -> Result<(StationaryField, ExtrapolatedK)> {
    let coarse = solve_u_alpha_direct(ctx, alpha, opts)?;
    let mut fine = solve_u_alpha_direct(ctx, alpha, &opts.refined())?;
    let value = (4.0 * fine.fit.k1 - coarse.fit.k1) / 3.0;
    let k = ExtrapolatedK {
        coarse: coarse.fit.k1,
        fine: fine.fit.k1,
        value,
        error_estimate: (value - fine.fit.k1).abs(),
    };
    fine.k_alpha = value;
    Ok((fine, k))
}

/// `(U_inf - U, e_1)_S` at every radial node away from the origin; the
/// entry for `r = 0` is zero.
pub fn e1_projection(grid: &AxialGrid, field: &AxialField, ctx: &StationaryContext) -> Vec<f64> {
    let w = angular_weights(grid);
    let e: Vec<f64> = grid.theta.iter().map(|t| ctx.e1.eval(*t)).collect();
    grid.r
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if r <= 0.0 {
                return 0.0;
            }
            (0..grid.nt())
                .map(|j| w[j] * e[j] * (ctx.u_inf(r, grid.theta[j]) - field.at(grid, i, j)))
                .sum()
        })
        .collect()
}

/// Fit `ln (U_inf - U, e_1)_S = ln k - s ln r` on `[R/4, R/2]`; the reported
/// `k1` uses the exact exponent `gamma`, the slope is left free.
pub fn far_field_fit(
    grid: &AxialGrid,
    field: &AxialField,
    ctx: &StationaryContext,
    max_condition: f64,
) -> Result<FarFieldFit> {
    let proj = e1_projection(grid, field, ctx);
    let r_out = grid.r[grid.nr() - 1];
    let pts: Vec<(f64, f64)> = grid
        .r
        .iter()
        .zip(&proj)
        .filter(|(r, _)| **r >= 0.25 * r_out && **r <= 0.5 * r_out)
        .map(|(r, v)| (r.ln(), v.ln()))
        .collect();
    if pts.len() < 3 || pts.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::IllConditioned(
            "far-field window has too few points or a non-positive deficit".into(),
        ));
    }
    let nf = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    // condition number of the normal matrix [[n, sx], [sx, sxx]]
    let tr = nf + sxx;
    let det = nf * sxx - sx * sx;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let condition = (tr + disc) / (tr - disc).max(f64::MIN_POSITIVE);
    if condition > max_condition {
        return Err(Error::IllConditioned(format!(
            "far-field fit condition number {condition:.3e} exceeds {max_condition:.1e}"
        )));
    }
    let (slope, _, _) = crate::spectral::linear_fit(&pts);
    let gamma = ctx.gamma();
    let lnk = pts.iter().map(|p| p.1 + gamma * p.0).sum::<f64>() / nf;
    Ok(FarFieldFit { k1: lnk.exp(), slope, rmax: r_out, condition })
}

impl StationaryField {
    /// `U` at `(r, theta)`. Near the origin `U` is interpolated directly;
    /// further out `r^gamma (U_inf - U)` is interpolated in `(ln r, theta)`,
    /// and beyond the grid the two-term far-field expansion is used. The first
    /// two are blended over `[core/2, core]` so the result is continuous.
    pub fn eval(&self, r: f64, theta: f64) -> Result<f64> {
        let g = &self.grid;
        if !(r >= 0.0) {
            return Err(Error::Domain(format!("radius must be non-negative, got {r}")));
        }
        let theta = theta.clamp(0.0, std::f64::consts::FRAC_PI_2);
        let r_out = g.r[g.nr() - 1];
        if r > r_out {
            let k = self.k_alpha;
            return Ok(self.ctx.u_inf(r, theta) - k * self.ctx.e1.eval(theta) * r.powf(-self.ctx.gamma()));
        }
        let chi = smoothstep(2.0 * r / self.core - 1.0);
        let direct = || {
            self.field.interpolate(g, r, theta).ok_or_else(|| Error::Domain(format!("({r}, {theta}) outside the grid")))
        };
        if chi == 0.0 {
            return direct();
        }
        let outer = self.eval_scaled(r, theta)?;
        if chi == 1.0 {
            return Ok(outer);
        }
        Ok((1.0 - chi) * direct()? + chi * outer)
    }

    fn eval_scaled(&self, r: f64, theta: f64) -> Result<f64> {
        let g = &self.grid;
        let gamma = self.ctx.gamma();
        let (i, _) = AxialGrid::bracket(&g.r, r)
            .ok_or_else(|| Error::Domain(format!("radius {r} outside the grid")))?;
        let (j, b) = AxialGrid::bracket(&g.theta, theta)
            .ok_or_else(|| Error::Domain(format!("angle {theta} outside the grid")))?;
        let a = (r.ln() - g.r[i].ln()) / (g.r[i + 1].ln() - g.r[i].ln());
        let scaled = |ii: usize, jj: usize| {
            let ri = g.r[ii];
            (self.ctx.u_inf(ri, g.theta[jj]) - self.field.at(g, ii, jj)) * ri.powf(gamma)
        };
        let w = (1.0 - a) * ((1.0 - b) * scaled(i, j) + b * scaled(i, j + 1))
            + a * ((1.0 - b) * scaled(i + 1, j) + b * scaled(i + 1, j + 1));
        Ok(self.ctx.u_inf(r, theta) - w * r.powf(-gamma))
    }

    /// Minimum of `U_inf - U` over the grid away from the origin
    /// (non-negative when ordered).
    pub fn ordering_margin(&self) -> f64 {
        let g = &self.grid;
        let mut m = f64::INFINITY;
        for i in 1..g.nr() {
            for j in 0..g.nt() {
                m = m.min(self.ctx.u_inf(g.r[i], g.theta[j]) - self.field.at(g, i, j));
            }
        }
        m
    }

    pub fn origin_value(&self) -> f64 {
        self.field.values[self.grid.nt() - 1]
    }
}

/// `U_alpha(y) = alpha U_1(alpha^{q-1} y)`.
pub fn u_alpha(u1: &StationaryField, alpha: f64, r: f64, theta: f64) -> Result<f64> {
    if (u1.alpha - 1.0).abs() > 1e-14 {
        return Err(Error::Domain("u_alpha scales from U_1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let p = &u1.ctx.problem;
    Ok(alpha * u1.eval(alpha.powf(p.q - 1.0) * r, theta)?)
}

/// `k_alpha = alpha^{-mu_1/m} k_1`.
pub fn k_alpha_law(k1: f64, alpha: f64, p: &Problem, mu1: f64) -> f64 {
    alpha.powf(-mu1 / p.m) * k1
}

/// `alpha = (k_1 / c_1l)^{m/mu_1}`, so that `k_alpha = c_1l`.
pub fn calibrate_alpha(k1: f64, c_1ell: f64, p: &Problem, mu1: f64) -> Result<f64> {
    if !(k1 > 0.0) || !(c_1ell > 0.0) || !(mu1 > 0.0) {
        return Err(Error::Domain(format!(
            "calibration needs k1 > 0, c_1l > 0, mu1 > 0 (got {k1}, {c_1ell}, {mu1})"
        )));
    }
    Ok((k1 / c_1ell).powf(p.m / mu1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn calibration_identities() {
        let p = Problem::new(16, 10.0).unwrap();
        let mu = 2.37;
        assert_relative_eq!(calibrate_alpha(0.7, 0.7, &p, mu).unwrap(), 1.0, max_relative = 1e-14);
        let k1 = 2f64.powf(mu / p.m) * 0.3;
        assert_relative_eq!(calibrate_alpha(k1, 0.3, &p, mu).unwrap(), 2.0, max_relative = 1e-12);
        assert!(calibrate_alpha(-1.0, 0.3, &p, mu).is_err());
        assert_relative_eq!(k_alpha_law(k1, 2.0, &p, mu), 0.3, max_relative = 1e-12);
    }
}
