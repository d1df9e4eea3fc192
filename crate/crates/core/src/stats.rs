//! Small hypothesis tests used to judge training curves and comparisons.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Mann-Kendall statistic `S` and the one-sided p-value for a decreasing
/// trend (normal approximation with continuity correction, no tie correction).
pub fn mann_kendall_decreasing(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Insufficient(format!("Mann-Kendall needs at least 3 values, got {n}")));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (values[j] - values[i]).signum();
        }
    }
    let nf = n as f64;
    let sd = (nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0).sqrt();
    let z = if s > 0.0 {
        (s - 1.0) / sd
    } else if s < 0.0 {
        (s + 1.0) / sd
    } else {
        0.0
    };
    Ok((s, Normal::standard().cdf(z)))
}

/// One-sided paired t-test of `mean(a - b) > 0`; returns `(t, p)`.
/// Identical pairs give `p = 0.5`; a constant positive difference gives `p = 0`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Insufficient("paired t-test needs two equally long samples of size >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p = if mean > 0.0 {
            0.0
        } else if mean < 0.0 {
            1.0
        } else {
            0.5
        };
        return Ok((mean.signum() * f64::INFINITY, p));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}
