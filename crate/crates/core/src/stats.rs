//! Small descriptive-statistics helpers shared by the labs.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn std_error(x: &[f64]) -> f64 {
    std_dev(x) / (x.len() as f64).sqrt()
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn central_moment(x: &[f64], k: i32) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(k)).sum::<f64>() / x.len() as f64
}

/// Moment skewness `m₃ / m₂^{3/2}`.
pub fn skewness(x: &[f64]) -> f64 {
    central_moment(x, 3) / central_moment(x, 2).powf(1.5)
}

/// Moment excess kurtosis `m₄ / m₂² − 3`.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    central_moment(x, 4) / central_moment(x, 2).powi(2) - 3.0
}

/// Largest absolute gap between sorted values and standard-normal quantiles
/// at plotting positions `(i + ½)/n`.
pub fn qq_max_deviation(x: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (v - normal.inverse_cdf((i as f64 + 0.5) / n)).abs())
        .fold(0.0, f64::max)
}

/// Ordinary least-squares slope and intercept of `y` against `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Total-variation distance between two weight vectors on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_small_sample() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(mean(&x), 4.0);
        assert!((variance(&x) - 12.5).abs() < 1e-12);
        // m2 = 10, m3 = 36
        assert!((skewness(&x) - 36.0 / 10f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (b, a) = ols(&x, &y);
        assert!((b + 0.5).abs() < 1e-14 && (a - 2.0).abs() < 1e-14);
    }

    #[test]
    fn qq_of_exact_quantiles_is_zero() {
        let normal = Normal::standard();
        let x: Vec<f64> = (0..50).map(|i| normal.inverse_cdf((i as f64 + 0.5) / 50.0)).rev().collect();
        assert!(qq_max_deviation(&x) < 1e-12);
    }
}
