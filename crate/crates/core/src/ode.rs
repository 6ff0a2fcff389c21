//! Adaptive Dormand-Prince 5(4) integrator for small non-stiff systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; zero picks one from the interval length.
    pub h0: f64,
    /// Upper bound on the step size; zero means unbounded.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-12, atol: 1e-12, h0: 0.0, h_max: 0.0, max_steps: 500_000 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// difference between the 5th and embedded 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrate `y' = f(t, y)` from `t0`, returning the state at each entry of
/// `t_out` (which must be increasing and `>= t0`).
///
/// Steps are clamped so every output time is hit exactly. After each
/// accepted step `on_step(t, y)` is called; it may rescale `y` (the system is
/// assumed linear when it does) and returns `false` to abort early, in which
/// case the outputs gathered so far are returned.
pub fn integrate<F, C>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_out: &[f64],
    opts: &OdeOptions,
    mut on_step: C,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    C: FnMut(f64, &mut [f64]) -> bool,
{
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(t_out.len());
    let Some(&t_end) = t_out.last() else {
        return Ok(out);
    };
    let mut t = t0;
    let span = (t_end - t0).abs().max(f64::MIN_POSITIVE);
    let mut h = if opts.h0 > 0.0 { opts.h0 } else { 1e-3 * span };
    if opts.h_max > 0.0 {
        h = h.min(opts.h_max);
    }
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut tmp = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    f(t, &y, &mut k[0]);
    let mut next = 0;
    while next < t_out.len() && t_out[next] <= t {
        out.push(y.clone());
        next += 1;
    }
    let mut steps = 0;
    while next < t_out.len() {
        let target = t_out[next];
        let mut last = false;
        let natural = h;
        if t + h >= target {
            h = target - t;
            last = true;
        }
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepSize { t, reason: "step budget exhausted".into() });
        }
        let stage = |k: &[Vec<f64>], coeffs: &[f64], tmp: &mut [f64], y: &[f64]| {
            for i in 0..dim {
                let mut s = 0.0;
                for (c, ki) in coeffs.iter().zip(k) {
                    s += c * ki[i];
                }
                tmp[i] = y[i] + h * s;
            }
        };
        stage(&k, &[A21], &mut tmp, &y);
        f(t + C2 * h, &tmp, &mut k[1]);
        stage(&k, &[A31, A32], &mut tmp, &y);
        f(t + C3 * h, &tmp, &mut k[2]);
        stage(&k, &[A41, A42, A43], &mut tmp, &y);
        f(t + C4 * h, &tmp, &mut k[3]);
        stage(&k, &[A51, A52, A53, A54], &mut tmp, &y);
        f(t + C5 * h, &tmp, &mut k[4]);
        stage(&k, &[A61, A62, A63, A64, A65], &mut tmp, &y);
        f(t + h, &tmp, &mut k[5]);
        for i in 0..dim {
            y_new[i] = y[i]
                + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
        }
        let (head, tail) = k.split_at_mut(6);
        f(t + h, &y_new, &mut tail[0]);
        let k7 = &tail[0];
        let mut err = 0.0f64;
        for i in 0..dim {
            let e = h
                * (E1 * head[0][i] + E3 * head[2][i] + E4 * head[3][i] + E5 * head[4][i]
                    + E6 * head[5][i]
                    + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            if h.abs() < 1e-14 * span {
                return Err(Error::StepSize { t, reason: "non-finite state".into() });
            }
            h *= 0.25;
            continue;
        }
        if err <= 1.0 {
            t = if last { target } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            let (first, rest) = k.split_at_mut(6);
            std::mem::swap(&mut first[0], &mut rest[0]);
            let keep_going = on_step(t, &mut y);
            if keep_going {
                // the callback may have rescaled the state
                f(t, &y, &mut k[0]);
            }
            while next < t_out.len() && t_out[next] <= t {
                out.push(y.clone());
                next += 1;
            }
            if !keep_going {
                return Ok(out);
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        let proposed = h * if err <= 1.0 { factor } else { factor.min(1.0) };
        // a clamped final step says nothing about the natural step size
        h = if last && err <= 1.0 { proposed.max(natural) } else { proposed };
        if opts.h_max > 0.0 {
            h = h.min(opts.h_max);
        }
        if h < 1e-15 * span.max(t.abs()) {
            return Err(Error::StepSize { t, reason: format!("step size underflow (h = {h:.3e})") });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn harmonic_oscillator_round_trip() {
        let ts: Vec<f64> = (1..=8).map(|k| k as f64 * std::f64::consts::FRAC_PI_4).collect();
        let out = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[1.0, 0.0],
            &ts,
            &OdeOptions::default(),
            |_, _| true,
        )
        .unwrap();
        for (t, y) in ts.iter().zip(&out) {
            assert_relative_eq!(y[0], t.cos(), epsilon = 1e-10);
            assert_relative_eq!(y[1], -t.sin(), epsilon = 1e-10);
        }
    }

    #[test]
    fn exponential_growth() {
        let out = integrate(
            |_, y, dy| dy[0] = 2.0 * y[0],
            0.0,
            &[1.0],
            &[3.0],
            &OdeOptions::default(),
            |_, _| true,
        )
        .unwrap();
        assert_relative_eq!(out[0][0], 6.0f64.exp(), max_relative = 1e-10);
    }

    #[test]
    fn early_abort_returns_partial_output() {
        let out = integrate(
            |_, _, dy| dy[0] = 1.0,
            0.0,
            &[0.0],
            &[0.5, 1.0, 2.0],
            &OdeOptions { h_max: 0.1, ..Default::default() },
            |t, _| t < 0.75,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
    }
}
