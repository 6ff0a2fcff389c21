//! Gamma function and Kummer's confluent hypergeometric function `M(a, b, z)`.
//!
//! Only real arguments are supported. `M` is evaluated by its defining power
//! series; when `a` is a non-positive integer the series terminates and the
//! result is an exact polynomial in `z`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Default cap on the Kummer argument for the non-terminating series.
///
/// The grids used in this crate never evaluate `M` beyond `r_max^2 / 4` with
/// `r_max` of a few tens, so anything past this is treated as a configuration
/// error rather than silently losing digits to cancellation.
pub const KUMMER_Z_CAP: f64 = 700.0;

const KUMMER_TERM_TOL: f64 = 1e-16;
const KUMMER_MAX_TERMS: usize = 20_000;

fn lanczos_sum(x: f64) -> f64 {
    // x is the shifted argument (x - 1 in the usual presentation)
    let mut sum = LANCZOS_COEFFS[0];
    for (k, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        sum += c / (x + k as f64);
    }
    sum
}

/// Gamma function for positive real arguments.
pub fn gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("gamma requires x > 0, got {x}")));
    }
    if x < 0.5 {
        // reflection keeps the Lanczos sum in its accurate range
        let g = gamma(1.0 - x)?;
        return Ok(PI / ((PI * x).sin() * g));
    }
    if x == x.floor() && x <= 171.0 {
        let mut f = 1.0;
        for k in 2..(x as u64) {
            f *= k as f64;
        }
        return Ok(f);
    }
    let z = x - 1.0;
    let t = z + LANCZOS_G + 0.5;
    Ok((2.0 * PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * lanczos_sum(z))
}

/// Natural logarithm of the gamma function for positive arguments.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("ln_gamma requires x > 0, got {x}")));
    }
    if x < 0.5 {
        let lg = ln_gamma(1.0 - x)?;
        return Ok((PI / (PI * x).sin()).ln() - lg);
    }
    let z = x - 1.0;
    let t = z + LANCZOS_G + 0.5;
    Ok(0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + lanczos_sum(z).ln())
}

/// Rising factorial `(x)_k = x (x + 1) ... (x + k - 1)`.
pub fn pochhammer(x: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (x + i as f64))
}

/// Parameters of `M(a, b, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KummerParams {
    pub a: f64,
    pub b: f64,
    pub z: f64,
}

impl KummerParams {
    pub fn new(a: f64, b: f64, z: f64) -> Result<Self> {
        let p = KummerParams { a, b, z };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.z.is_finite()) {
            return Err(Error::Domain("Kummer parameters must be finite".into()));
        }
        if self.b <= 0.0 && self.b == self.b.floor() {
            return Err(Error::Domain(format!(
                "Kummer b must not be a non-positive integer, got {}",
                self.b
            )));
        }
        if self.z < 0.0 {
            return Err(Error::Domain(format!(
                "Kummer argument must be non-negative, got {}",
                self.z
            )));
        }
        Ok(())
    }

    /// Degree of the terminating series, if `a` is a non-positive integer.
    pub fn polynomial_degree(&self) -> Option<usize> {
        if self.a <= 0.0 && self.a == self.a.floor() {
            Some((-self.a) as usize)
        } else {
            None
        }
    }
}

/// Kummer's function `M(a, b, z) = sum_k (a)_k / (b)_k z^k / k!`.
pub fn kummer_m(p: KummerParams) -> Result<f64> {
    p.validate()?;
    if let Some(degree) = p.polynomial_degree() {
        return Ok(kummer_polynomial(degree, p.b, p.z));
    }
    if p.z > KUMMER_Z_CAP {
        return Err(Error::NonConvergence(format!(
            "z = {} exceeds the series cap {KUMMER_Z_CAP}",
            p.z
        )));
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..KUMMER_MAX_TERMS {
        let kf = k as f64;
        term *= (p.a + kf) / (p.b + kf) * p.z / (kf + 1.0);
        sum += term;
        if term.abs() <= KUMMER_TERM_TOL * sum.abs() && kf > p.z - p.a {
            return Ok(sum);
        }
    }
    Err(Error::NonConvergence(format!(
        "M({}, {}, {}) did not converge in {KUMMER_MAX_TERMS} terms",
        p.a, p.b, p.z
    )))
}

/// Terminating series `M(-degree, b, z)`, summed with Horner's rule.
pub fn kummer_polynomial(degree: usize, b: f64, z: f64) -> f64 {
    let coeffs = kummer_polynomial_coeffs(degree, b);
    coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

/// Coefficients `c_k` of `M(-degree, b, z) = sum_k c_k z^k`.
pub fn kummer_polynomial_coeffs(degree: usize, b: f64) -> Vec<f64> {
    let a = -(degree as f64);
    let mut coeffs = Vec::with_capacity(degree + 1);
    let mut c = 1.0;
    coeffs.push(c);
    for k in 0..degree {
        let kf = k as f64;
        c *= (a + kf) / ((b + kf) * (kf + 1.0));
        coeffs.push(c);
    }
    coeffs
}

/// Derivative `d/dz M(-degree, b, z)`.
pub fn kummer_polynomial_dz(degree: usize, b: f64, z: f64) -> f64 {
    let coeffs = kummer_polynomial_coeffs(degree, b);
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * z + k as f64 * c)
}

/// Surface area of the unit sphere `S^{d}` embedded in `R^{d+1}`.
pub fn sphere_area(d: usize) -> f64 {
    let half = (d as f64 + 1.0) / 2.0;
    2.0 * PI.powf(half) / gamma(half).expect("positive argument")
}
