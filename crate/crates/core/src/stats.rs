//! Replica tallies, Monte Carlo estimates and log-log exponent fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running `(n, Σx, Σx²)`; merging is plain addition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: u64,
    pub sum: f64,
    pub sumsq: f64,
}

impl Tally {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn push_bool(&mut self, hit: bool) {
        self.push(if hit { 1.0 } else { 0.0 });
    }

    pub fn merge(&self, other: &Tally) -> Tally {
        Tally { n: self.n + other.n, sum: self.sum + other.sum, sumsq: self.sumsq + other.sumsq }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self, seed: u64) -> ObservableEstimate {
        ObservableEstimate { estimate: self.mean(), n: self.n, stderr: self.stderr(), seed }
    }

    /// z-score of the mean against a Poisson law with mean `mu`.
    pub fn poisson_mean_z(&self, mu: f64) -> f64 {
        z(self.mean() - mu, (mu / self.n as f64).sqrt())
    }

    /// z-score of the sample variance against a Poisson law with mean `mu`.
    pub fn poisson_variance_z(&self, mu: f64) -> f64 {
        z(self.variance() - mu, ((mu + 2.0 * mu * mu) / self.n as f64).sqrt())
    }
}

fn z(diff: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        diff / sd
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableEstimate {
    pub estimate: f64,
    pub n: u64,
    pub stderr: f64,
    pub seed: u64,
}

impl ObservableEstimate {
    pub fn z_score(&self, target: f64) -> f64 {
        z(self.estimate - target, self.stderr)
    }

    /// z-score of a Bernoulli frequency using the binomial spread at `target`.
    pub fn binomial_z(&self, target: f64) -> f64 {
        z(self.estimate - target, (target * (1.0 - target) / self.n as f64).sqrt())
    }
}

/// `(a - b) / sqrt(se_a² + se_b²)`.
pub fn two_sample_z(a: &ObservableEstimate, b: &ObservableEstimate) -> f64 {
    z(a.estimate - b.estimate, (a.stderr * a.stderr + b.stderr * b.stderr).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    /// Jackknife standard error of the slope.
    pub slope_stderr: f64,
    /// `slope ± 2 · slope_stderr`.
    pub band: (f64, f64),
    pub used: usize,
    /// Indices of points dropped because `p <= 0` (or not finite).
    pub excluded: Vec<usize>,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least squares of `ln p` on `ln x`, with a leave-one-out jackknife band.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<ExponentFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for (i, &(x, p)) in points.iter().enumerate() {
        if x > 0.0 && p > 0.0 && x.is_finite() && p.is_finite() {
            xs.push(x.ln());
            ys.push(p.ln());
        } else {
            excluded.push(i);
        }
    }
    let m = xs.len();
    if m < 3 {
        return Err(Error::TooFewPoints(m));
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::InvalidArgument("fit needs at least two distinct abscissae".into()));
    }
    let (slope, intercept) = least_squares(&xs, &ys);
    let mut loo = Vec::with_capacity(m);
    for skip in 0..m {
        let x: Vec<f64> = xs.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, v)| *v).collect();
        let y: Vec<f64> = ys.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, v)| *v).collect();
        if x.iter().all(|&v| v == x[0]) {
            continue;
        }
        loo.push(least_squares(&x, &y).0);
    }
    let k = loo.len() as f64;
    let slope_stderr = if loo.len() >= 2 {
        let mean = loo.iter().sum::<f64>() / k;
        ((k - 1.0) / k * loo.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()).sqrt()
    } else {
        f64::NAN
    };
    Ok(ExponentFit {
        slope,
        intercept,
        slope_stderr,
        band: (slope - 2.0 * slope_stderr, slope + 2.0 * slope_stderr),
        used: m,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = [2.0, 4.0, 8.0, 16.0, 32.0].iter().map(|&x: &f64| (x, x.powf(-0.5))).collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.slope_stderr < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_slope() {
        let fit = fit_exponent(&[(1.0, 0.3), (2.0, 0.3), (5.0, 0.3)]).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn loglog_corrected_series() {
        // p = log log(R) R^{-1/2} over R = 8, 16, 32, 64
        let pts: Vec<_> = [8.0, 16.0, 32.0, 64.0].iter().map(|&r: &f64| (r, r.ln().ln() * r.powf(-0.5))).collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!((fit.slope - (-0.18312204)).abs() < 1e-7, "{}", fit.slope);
        assert!((fit.intercept - (-0.9185034)).abs() < 1e-6);
    }

    #[test]
    fn zero_points_are_excluded() {
        let fit = fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (4.0, 0.5), (8.0, 0.25)]).unwrap();
        assert_eq!(fit.excluded, vec![1]);
        assert_eq!(fit.used, 3);
        assert!(matches!(fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (4.0, 0.5)]), Err(Error::TooFewPoints(2))));
    }

    #[test]
    fn poisson_tests_accept_poisson_like_tallies() {
        let mut t = Tally::default();
        for k in [0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 1.0, 0.0] {
            t.push(k);
        }
        assert!((t.mean() - 1.0).abs() < 1e-15);
        assert!(t.poisson_mean_z(1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn merge_is_associative_and_commutative(
            a in proptest::collection::vec(-1000i32..1000, 0..20),
            b in proptest::collection::vec(-1000i32..1000, 0..20),
            c in proptest::collection::vec(-1000i32..1000, 0..20),
        ) {
            let tally = |v: &[i32]| { let mut t = Tally::default(); for &x in v { t.push(x as f64); } t };
            let (ta, tb, tc) = (tally(&a), tally(&b), tally(&c));
            prop_assert_eq!(ta.merge(&tb).merge(&tc), ta.merge(&tb.merge(&tc)));
            prop_assert_eq!(ta.merge(&tb), tb.merge(&ta));
            let all: Vec<i32> = a.iter().chain(&b).chain(&c).copied().collect();
            prop_assert_eq!(tally(&all), ta.merge(&tb).merge(&tc));
        }
    }
}
