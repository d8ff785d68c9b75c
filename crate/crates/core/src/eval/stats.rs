use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `post - pre`.
pub fn paired_t_test(pre: &[f64], post: &[f64]) -> Result<TTest> {
    if pre.len() != post.len() {
        return Err(Error::validation(format!(
            "paired samples differ in length: {} vs {}",
            pre.len(),
            post.len()
        )));
    }
    let n = pre.len();
    if n < 2 {
        return Err(Error::validation("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = post.iter().zip(pre).map(|(b, a)| b - a).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("paired samples must be finite"));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // differences equal up to rounding count as constant
    let scale = d
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    if var.sqrt() <= 1e-12 * scale {
        return Err(Error::validation("paired differences have zero variance"));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::validation(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).is_err());
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn hand_computed_example() {
        // d = (0.5, 0.4, 0.6, 0.5): mean 0.5, sd sqrt(0.02/3)
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.4, 3.6, 4.5]).unwrap();
        let t = 0.5 / ((0.02f64 / 3.0).sqrt() / 2.0);
        assert!((r.t - t).abs() < 1e-9);
        assert_eq!(r.df, 3);
        // t = 12.2474..., two-sided p with 3 df from the closed-form CDF
        // of Student's t for odd df: F(t) = 1/2 + (1/pi)(atan(u) + u/(1+u^2)), u = t/sqrt(3)
        let u = t / 3f64.sqrt();
        let cdf = 0.5 + (u.atan() + u / (1.0 + u * u)) / std::f64::consts::PI;
        assert!((r.p - 2.0 * (1.0 - cdf)).abs() < 1e-9);
    }
}
