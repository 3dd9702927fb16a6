//! Paired comparison statistics and the Student t distribution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("samples have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("paired differences have zero variance")]
    ZeroVariance,
    #[error("non-finite sample value")]
    NonFinite,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` given both `x` and `y = 1 - x`,
/// so callers can supply an accurate complement.
pub fn reg_inc_beta_xy(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    reg_inc_beta_xy(a, b, x, 1.0 - x)
}

/// `P(T > |t|)` for Student's t with `dof` degrees of freedom.
pub fn t_upper_tail(t: f64, dof: f64) -> f64 {
    let t2 = t * t;
    let denom = dof + t2;
    0.5 * reg_inc_beta_xy(dof / 2.0, 0.5, dof / denom, t2 / denom)
}

/// Student t cumulative distribution function.
pub fn t_cdf(t: f64, dof: f64) -> f64 {
    assert!(dof >= 1.0, "dof must be >= 1");
    let tail = t_upper_tail(t, dof);
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    (2.0 * t_upper_tail(t, dof)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t_statistic: f64,
    pub p_two_sided: f64,
    /// Effect size of the differences, `mean / sd` (d_z).
    pub cohens_d: f64,
}

/// Statistics implied by a paired effect size and sample count.
pub fn paired_from_effect(cohens_d: f64, n: usize) -> (f64, f64) {
    let t = cohens_d * (n as f64).sqrt();
    (t, t_two_sided_p(t, n as f64 - 1.0))
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedStats, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
        return Err(StatsError::ZeroVariance);
    }
    let cohens_d = mean / sd;
    let (t, p) = paired_from_effect(cohens_d, n);
    Ok(PairedStats {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t_statistic: t,
        p_two_sided: p,
        cohens_d,
    })
}
