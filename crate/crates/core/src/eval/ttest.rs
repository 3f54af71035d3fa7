use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::student_t_two_sided;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_stat: f64,
    /// Two-sided.
    pub p_value: f64,
    pub dof: f64,
}

/// Welch's unequal-variance two-sample t-test with Welch–Satterthwaite
/// degrees of freedom.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::TooFewSamples);
    }
    let (va, vb) = (stats::sample_variance(a), stats::sample_variance(b));
    if !(va > 0.0 || vb > 0.0) {
        return Err(Error::TooFewSamples);
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let t_stat = (stats::mean(a) - stats::mean(b)) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok(TTestResult {
        t_stat,
        p_value: student_t_two_sided(t_stat, dof),
        dof,
    })
}
