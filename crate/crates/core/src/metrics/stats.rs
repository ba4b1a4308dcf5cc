use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::error::{Error, Result};

/// Upper 97.5% quantile of Student's t with `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    assert!(df > 0, "t quantile needs at least one degree of freedom");
    StudentsT::new(0.0, 1.0, df as f64).expect("positive dof").inverse_cdf(0.975)
}

/// Sample mean and the half-width `t(0.975, n-1) · s / √n`.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("mean_ci95", "non-finite value"));
    }
    let n = values.len();
    let mean = values.mean();
    let sd = values.std_dev();
    Ok((mean, t_quantile_975(n - 1) * sd / (n as f64).sqrt()))
}
