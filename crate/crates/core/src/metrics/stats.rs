use serde::{Deserialize, Serialize};

use super::special::{f_upper_tail, student_t_two_sided};
use crate::error::{Error, Result};

/// Limits of agreement sit this many standard deviations from the bias.
pub const AGREEMENT_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when `sd_defined` is false (n = 1).
    pub sd: f64,
    pub sd_defined: bool,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); needs `n >= 2`.
fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Type-7 quantile of sorted data: linear interpolation between order
/// statistics at position `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(scores: &[f64]) -> Result<Summary> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot summarise an empty list".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(Summary {
        n,
        mean: mean(&s),
        sd: if n > 1 { sample_sd(scores) } else { 0.0 },
        sd_defined: n > 1,
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `((a + b) / 2, a - b)` per case.
    pub pairs: Vec<(f64, f64)>,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("paired lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("agreement analysis needs at least 2 cases".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let bias = mean(&d);
    let sd = sample_sd(&d);
    Ok(BlandAltman {
        bias,
        sd,
        lower: bias - AGREEMENT_Z * sd,
        upper: bias + AGREEMENT_Z * sd,
        pairs: a.iter().zip(b).map(|(x, y)| ((x + y) / 2.0, x - y)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// Two-sided p-value from Student's t with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("paired lists differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 pairs".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation is undefined for a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 { 0.0 } else { student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df) };
    Ok(Pearson { r, p, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub ssb: f64,
    pub ssw: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub group_means: Vec<f64>,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<Anova> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("ANOVA needs at least 2 groups, got {k}")));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::InvalidArgument(format!("every ANOVA group needs at least 2 values, found one with {}", g.len())));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let group_means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let ssb: f64 = groups.iter().zip(&group_means).map(|(g, m)| g.len() as f64 * (m - grand) * (m - grand)).sum();
    let ssw: f64 = groups.iter().zip(&group_means).map(|(g, m)| g.iter().map(|x| (x - m) * (x - m)).sum::<f64>()).sum();
    let (d1, d2) = (k - 1, n - k);
    let f = if ssb == 0.0 {
        0.0
    } else if ssw == 0.0 {
        f64::INFINITY
    } else {
        (ssb / d1 as f64) / (ssw / d2 as f64)
    };
    Ok(Anova {
        f,
        p: f_upper_tail(f, d1 as f64, d2 as f64),
        ssb,
        ssw,
        df_between: d1,
        df_within: d2,
        group_means,
    })
}
