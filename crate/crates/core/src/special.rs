//! Special functions not covered by `statrs`.

use std::f64::consts::PI;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exponential integral `E₁(z) = ∫_z^∞ e^{-t}/t dt` for `z > 0`.
pub fn exp_integral_e1(z: f64) -> f64 {
    assert!(z > 0.0, "E1 needs a positive argument, got {z}");
    if z <= 1.0 {
        // Power series.
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -z / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        -EULER_GAMMA - z.ln() - sum
    } else {
        // Continued fraction, modified Lentz.
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// `e^{-x} I₀(x)` for `x ≥ 0`, by the periodic trapezoid rule on the
/// integral representation (exponentially convergent).
pub fn scaled_bessel_i0(x: f64) -> f64 {
    assert!(x >= 0.0);
    let m = 64 + 4 * x.ceil() as usize;
    let sum: f64 = (0..m)
        .map(|j| (x * ((2.0 * PI * j as f64 / m as f64).cos() - 1.0)).exp())
        .sum();
    sum / m as f64
}

/// Return-probability of the continuous-time walk on the infinite chain
/// with spacing `h`, normalized as a density: `(1/h) e^{-2t} I₀(2t)` with
/// `t = s/h²`. Large `s` gives `1/√(4πs)`.
pub fn chain_heat_diagonal(s: f64, h: f64) -> f64 {
    scaled_bessel_i0(2.0 * s / (h * h)) / h
}
