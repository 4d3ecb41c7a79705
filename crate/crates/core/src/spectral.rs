//! Heat-kernel traces and diagonals, small-`s` coefficient recovery and the
//! proper-time regularized log-determinant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{kinetic_coefficients, PrecisionOperator, SpectralDecomposition};
use crate::geometry::{scalar_curvature_2d, MetricField, MetricKind};
use crate::special::{chain_heat_diagonal, exp_integral_e1, EULER_GAMMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatTraceCurve {
    pub s: Vec<f64>,
    pub trace: Vec<f64>,
    pub include_zero_mode: bool,
}

/// Heat kernel `e^{-sΔ}` of one metric, from its generalized spectrum.
#[derive(Debug, Clone)]
pub struct HeatKernel {
    spectrum: SpectralDecomposition,
}

impl HeatKernel {
    pub fn new(metric: &MetricField) -> Result<Self> {
        Ok(Self {
            spectrum: PrecisionOperator::new(metric).spectrum()?,
        })
    }

    pub fn spectrum(&self) -> &SpectralDecomposition {
        &self.spectrum
    }

    /// `Σₙ e^{-λₙ s}`, optionally skipping the zero mode.
    pub fn trace(&self, s: f64, include_zero_mode: bool) -> f64 {
        let skip = usize::from(!include_zero_mode);
        self.spectrum.eigenvalues()[skip..].iter().map(|l| (-l * s).exp()).sum()
    }

    /// `K(s; x, x) = Σₙ e^{-λₙ s} θₙ(x)²` with mass-orthonormal modes.
    pub fn diagonal(&self, s: f64, site: usize) -> f64 {
        let v = self.spectrum.vectors();
        self.spectrum
            .eigenvalues()
            .iter()
            .enumerate()
            .map(|(n, l)| (-l * s).exp() * v[(site, n)] * v[(site, n)])
            .sum()
    }

    pub fn diagonals(&self, s: f64) -> Vec<f64> {
        let weights: Vec<f64> = self.spectrum.eigenvalues().iter().map(|l| (-l * s).exp()).collect();
        self.spectrum
            .vectors()
            .row_iter()
            .map(|row| row.iter().zip(&weights).map(|(v, w)| w * v * v).sum())
            .collect()
    }

    pub fn curve(&self, s_grid: &[f64], include_zero_mode: bool) -> HeatTraceCurve {
        HeatTraceCurve {
            s: s_grid.to_vec(),
            trace: s_grid.iter().map(|&s| self.trace(s, include_zero_mode)).collect(),
            include_zero_mode,
        }
    }
}

pub fn heat_trace(metric: &MetricField, s_grid: &[f64], include_zero_mode: bool) -> Result<HeatTraceCurve> {
    Ok(HeatKernel::new(metric)?.curve(s_grid, include_zero_mode))
}

pub fn heat_diagonal(metric: &MetricField, s: f64, site: usize) -> Result<f64> {
    if site >= metric.geometry().site_count() {
        return Err(Error::InvalidArgument(format!("site {site} out of range")));
    }
    Ok(HeatKernel::new(metric)?.diagonal(s, site))
}

/// Number of log-spaced points in the coefficient fit window.
pub const WINDOW_POINTS: usize = 16;

/// Admissible fit range `(4a², 1/(4λ₁))` between the lattice cutoff and the
/// lowest nonzero eigenvalue.
pub fn admissible_window(metric: &MetricField, spectrum: &SpectralDecomposition) -> Result<(f64, f64)> {
    let geom = metric.geometry();
    let a = geom.spacing();
    let lower = 4.0 * a * a;
    let lambda1 = spectrum.eigenvalues()[1];
    let upper = 1.0 / (4.0 * lambda1);
    if lower >= upper {
        // Refining at fixed physical size keeps λ₁ and needs a < 1/(4√λ₁).
        let side = geom.extents().iter().copied().max().unwrap_or(0) as f64 * a;
        let mut required = (4.0 * side * lambda1.sqrt()).floor() as usize + 1;
        required += required % 2;
        return Err(Error::EmptyWindow {
            lower,
            upper,
            required_extent: required.max(4),
        });
    }
    Ok((lower, upper))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Least-squares coefficients of `y ≈ Σ_k c_k x^k`.
fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, k| x[i].powi(k as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-14).expect("SVD solve with both factors").iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeeleyDeWittFit {
    pub window: (f64, f64),
    pub s_grid: Vec<f64>,
    /// Constant term of `4πs · trace` divided by the volume.
    #[serde(rename = "b0_est")]
    pub b0_est: f64,
    pub fitted_volume: f64,
    pub volume: f64,
    /// Per-site slope of `K / K_lattice − 1` against `s`.
    #[serde(rename = "beta_field")]
    pub beta: Vec<f64>,
    /// `R/6` per site when the curvature is available.
    #[serde(rename = "R_over_6_field")]
    pub r_over_6: Option<Vec<f64>>,
    /// Largest `|β − R/6| / |R/6|` over the curvature extrema.
    #[serde(rename = "maxRelErr")]
    pub max_rel_err: Option<f64>,
    pub max_abs_beta: f64,
}

/// Sites within this fraction of the largest `|R|` count as extrema.
pub const EXTREMUM_FRACTION: f64 = 0.95;

/// Fit the small-`s` heat-kernel coefficients on a 2D metric.
///
/// The global fit regresses `4πs · tr e^{-sΔ}` on `1, 1/s, 1/s²` (the
/// inverse powers absorb lattice corrections) and reports the constant term
/// over the volume. The local fit divides `K(s;x,x)` by the diagonal of a
/// flat lattice with the local physical spacings `h_μ = a √(√g / B^{μμ})`,
/// which removes the flat-space and lattice parts, and fits `β s` through
/// the origin.
pub fn seeley_dewitt_fit(metric: &MetricField, window: Option<(f64, f64)>) -> Result<SeeleyDeWittFit> {
    let geom = metric.geometry();
    if geom.dim() != 2 {
        return Err(Error::Unsupported {
            op: "seeley_dewitt_fit",
            reason: format!("{}-dimensional lattices", geom.dim()),
        });
    }
    let kernel = HeatKernel::new(metric)?;
    let (lower, upper) = admissible_window(metric, kernel.spectrum())?;
    let (lo, hi) = match window {
        None => (lower, upper),
        Some((lo, hi)) => {
            if !(lo >= lower && hi <= upper && lo < hi) {
                return Err(Error::WindowOutOfRange { lo, hi, lower, upper });
            }
            (lo, hi)
        }
    };
    let s_grid = log_grid(lo, hi, WINDOW_POINTS);
    let volume = metric.volume();

    let inv_s: Vec<f64> = s_grid.iter().map(|s| 1.0 / s).collect();
    let scaled: Vec<f64> = s_grid
        .iter()
        .map(|&s| 4.0 * std::f64::consts::PI * s * kernel.trace(s, true))
        .collect();
    let fitted_volume = poly_fit(&inv_s, &scaled, 2)[0];

    let a = geom.spacing();
    let coeffs = kinetic_coefficients(metric);
    let spacings: Vec<[f64; 2]> = (0..geom.site_count())
        .map(|x| {
            let root_g = metric.sqrt_det(x);
            [0, 1].map(|mu| a * (root_g / coeffs[x][(mu, mu)]).sqrt())
        })
        .collect();
    let n = geom.site_count();
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    for &s in &s_grid {
        let diag = kernel.diagonals(s);
        for x in 0..n {
            let reference = chain_heat_diagonal(s, spacings[x][0]) * chain_heat_diagonal(s, spacings[x][1]);
            num[x] += s * (diag[x] / reference - 1.0);
        }
        den += s * s;
    }
    let beta: Vec<f64> = num.iter().map(|v| v / den).collect();
    let max_abs_beta = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));

    let r_over_6 = match metric.kind() {
        MetricKind::ConformalFlat => Some(scalar_curvature_2d(metric)?.iter().map(|r| r / 6.0).collect::<Vec<_>>()),
        MetricKind::FullSym => None,
    };
    let max_rel_err = r_over_6.as_ref().and_then(|target| {
        let peak = target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (peak > 0.0).then(|| {
            target
                .iter()
                .zip(&beta)
                .filter(|(t, _)| t.abs() >= EXTREMUM_FRACTION * peak)
                .map(|(t, b)| ((b - t) / t).abs())
                .fold(0.0f64, f64::max)
        })
    });

    Ok(SeeleyDeWittFit {
        window: (lo, hi),
        s_grid,
        b0_est: fitted_volume / volume,
        fitted_volume,
        volume,
        beta,
        r_over_6,
        max_rel_err,
        max_abs_beta,
    })
}

/// `∫_ε^∞ ds/s e^{-λs} = E₁(λε)`.
pub fn mode_schwinger_integral(lambda: f64, eps: f64) -> f64 {
    exp_integral_e1(lambda * eps)
}

/// `−½ Σ_{n≥1} ∫_ε^∞ ds/s e^{-λₙ s}`, evaluated per mode.
pub fn schwinger_logdet_from_spectrum(spectrum: &SpectralDecomposition, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("lower cutoff must be positive, got {eps}")));
    }
    Ok(-0.5
        * spectrum.eigenvalues()[1..]
            .iter()
            .map(|&l| mode_schwinger_integral(l, eps))
            .sum::<f64>())
}

pub fn schwinger_logdet(metric: &MetricField, eps: f64) -> Result<f64> {
    schwinger_logdet_from_spectrum(&PrecisionOperator::new(metric).spectrum()?, eps)
}

/// `½ Σ log λₙ ≈ schwinger(ε) − (N−1)/2 (γ + log ε)`, exact up to `O(λε)`.
pub fn reconstructed_half_log_det(spectrum: &SpectralDecomposition, eps: f64) -> Result<f64> {
    let modes = (spectrum.len() - 1) as f64;
    Ok(schwinger_logdet_from_spectrum(spectrum, eps)? - 0.5 * modes * (EULER_GAMMA + eps.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LatticeGeometry;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn flat_ring(n: usize) -> MetricField {
        MetricField::flat(&LatticeGeometry::ring(n, 1.0).unwrap())
    }

    fn bumpy_torus(n: usize, amplitude: f64) -> MetricField {
        let g = LatticeGeometry::torus(n, n, 1.0).unwrap();
        let omega = (0..g.site_count())
            .map(|x| amplitude * (2.0 * PI * g.coords(x)[0] as f64 / n as f64).cos())
            .collect();
        MetricField::conformal(&g, omega).unwrap()
    }

    #[test]
    fn four_site_trace() {
        let k = HeatKernel::new(&flat_ring(4)).unwrap();
        for s in [0.01f64, 0.3, 1.0, 4.0] {
            let exact = 1.0 + 2.0 * (-2.0 * s).exp() + (-4.0 * s).exp();
            assert!((k.trace(s, true) - exact).abs() < 1e-12);
            assert!((k.trace(s, true) - k.trace(s, false) - 1.0).abs() < 1e-15);
        }
        assert!((k.trace(1e-12, true) - 4.0).abs() < 1e-9);
        assert!((k.trace(100.0, true) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_is_decreasing() {
        let curve = heat_trace(&bumpy_torus(8, 0.1), &log_grid(1e-3, 50.0, 40), false).unwrap();
        assert!(curve.trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn completeness_and_positivity() {
        let metric = bumpy_torus(8, 0.2);
        let k = HeatKernel::new(&metric).unwrap();
        let m = metric.mass_weights();
        for s in [0.05, 0.5, 2.0, 10.0] {
            let d = k.diagonals(s);
            let total: f64 = d.iter().zip(&m).map(|(d, m)| d * m).sum();
            assert!((total - k.trace(s, true)).abs() < 1e-10 * k.trace(s, true));
            assert!(d.iter().all(|&v| v > 0.0));
            assert!((d[5] - k.diagonal(s, 5)).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_diagonal_is_uniform() {
        let metric = MetricField::flat(&LatticeGeometry::torus(6, 8, 0.7).unwrap());
        let k = HeatKernel::new(&metric).unwrap();
        for s in [0.1, 1.0] {
            let d = k.diagonals(s);
            assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-10));
        }
    }

    #[test]
    fn empty_window_names_refinement() {
        match seeley_dewitt_fit(&MetricField::flat(&LatticeGeometry::torus(16, 16, 1.0).unwrap()), None) {
            Err(Error::EmptyWindow { required_extent, .. }) => assert_eq!(required_extent, 26),
            other => panic!("expected empty window, got {other:?}"),
        }
        let ok = seeley_dewitt_fit(&MetricField::flat(&LatticeGeometry::torus(26, 26, 1.0).unwrap()), None);
        assert!(ok.is_ok());
    }

    #[test]
    fn window_outside_range_is_rejected() {
        let metric = MetricField::flat(&LatticeGeometry::torus(32, 32, 1.0).unwrap());
        assert!(matches!(
            seeley_dewitt_fit(&metric, Some((0.5, 2.0))),
            Err(Error::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn flat_torus_coefficients() {
        let metric = MetricField::flat(&LatticeGeometry::torus(32, 32, 1.0).unwrap());
        let fit = seeley_dewitt_fit(&metric, None).unwrap();
        assert!((fit.b0_est - 1.0).abs() < 0.01, "{}", fit.b0_est);
        let scale = (2.0 * PI / 32.0f64).powi(2);
        assert!(fit.max_abs_beta < 0.02 * scale, "{}", fit.max_abs_beta);
        assert!(fit.max_rel_err.is_none());
    }

    #[test]
    fn curvature_recovery() {
        let fit = seeley_dewitt_fit(&bumpy_torus(32, 0.05), None).unwrap();
        let err = fit.max_rel_err.unwrap();
        assert!(err < 0.10, "{err}");
        assert!((fit.b0_est - 1.0).abs() < 0.01);
    }

    #[test]
    #[ignore = "dense 4096-site eigendecomposition takes several minutes"]
    fn curvature_recovery_improves_under_refinement() {
        let coarse = seeley_dewitt_fit(&bumpy_torus(32, 0.05), None).unwrap();
        let g = LatticeGeometry::torus(64, 64, 0.5).unwrap();
        let omega = (0..g.site_count())
            .map(|x| 0.05 * (2.0 * PI * g.coords(x)[0] as f64 / 64.0).cos())
            .collect();
        let fine = seeley_dewitt_fit(&MetricField::conformal(&g, omega).unwrap(), None).unwrap();
        assert!(fine.max_rel_err.unwrap() < coarse.max_rel_err.unwrap());
    }

    #[test]
    fn single_mode_integral() {
        let got = mode_schwinger_integral(2.0, 1e-6);
        let expected = -(2e-6f64).ln() - EULER_GAMMA;
        assert!((got - expected).abs() < 1e-5);
    }

    #[test]
    fn halving_cutoff_shifts_by_log_two() {
        let spectrum = PrecisionOperator::new(&flat_ring(8)).spectrum().unwrap();
        let eps = 1e-6;
        let full = schwinger_logdet_from_spectrum(&spectrum, eps).unwrap();
        let half = schwinger_logdet_from_spectrum(&spectrum, eps / 2.0).unwrap();
        assert!(((half - full) + 3.5 * 2f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn log_det_reconstruction() {
        for metric in [flat_ring(8), bumpy_torus(8, 0.3)] {
            let spectrum = PrecisionOperator::new(&metric).spectrum().unwrap();
            let rebuilt = reconstructed_half_log_det(&spectrum, 1e-8).unwrap();
            assert!((rebuilt - spectrum.half_log_det()).abs() < 1e-4);
        }
        assert!(schwinger_logdet(&flat_ring(8), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn zero_mode_difference_is_one(s in 1e-4f64..100.0) {
            let k = HeatKernel::new(&flat_ring(6)).unwrap();
            prop_assert!((k.trace(s, true) - k.trace(s, false) - 1.0).abs() < 1e-14);
        }
    }
}
