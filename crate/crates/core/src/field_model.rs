//! Discrete Laplace–Beltrami precision operator, Gaussian field law,
//! sampling and the lattice stress tensor.
//!
//! The action is written site by site as
//! `S = ½ a^{d-2} Σ_x B^{μν}(x) Q_{μν}(x)` with `B = √g g^{μν}`,
//! `Q_{μμ} = ½[(φ(x+μ) − φ(x))² + (φ(x) − φ(x−μ))²]` and, in two
//! dimensions, `Q_{12}` the product of the two central differences. The
//! diagonal part is exactly the link form with face-averaged coefficients.
//!
//! Field configurations are only observed modulo constants. The likelihood
//! is a density on that quotient with respect to a metric-independent
//! Lebesgue measure, so `W = ½ log pdet L`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{block, LatticeGeometry, MetricField};

/// Relative threshold separating the zero mode from the rest of the spectrum.
pub const ZERO_MODE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    values: Vec<f64>,
}

impl FieldSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("field sample has a non-finite value at site {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Assemble `L` from per-site coefficient tensors. The map is linear, so
/// derivatives of `L` are obtained by feeding coefficient derivatives.
pub fn assemble_from_coefficients(geom: &LatticeGeometry, coeff: &[Matrix2<f64>]) -> DMatrix<f64> {
    let d = geom.dim();
    let n = geom.site_count();
    let pref = geom.spacing().powi(d as i32 - 2);
    let mut l = DMatrix::zeros(n, n);
    for x in 0..n {
        for mu in 0..d {
            let y = geom.shift(x, mu, 1);
            let w = pref * 0.5 * (coeff[x][(mu, mu)] + coeff[y][(mu, mu)]);
            l[(x, x)] += w;
            l[(y, y)] += w;
            l[(x, y)] -= w;
            l[(y, x)] -= w;
        }
    }
    if d == 2 {
        for x in 0..n {
            let b = coeff[x][(0, 1)];
            if b == 0.0 {
                continue;
            }
            let u = [(geom.shift(x, 0, 1), 0.5), (geom.shift(x, 0, -1), -0.5)];
            let v = [(geom.shift(x, 1, 1), 0.5), (geom.shift(x, 1, -1), -0.5)];
            for &(i, ui) in &u {
                for &(j, vj) in &v {
                    let w = pref * b * ui * vj;
                    l[(i, j)] += w;
                    l[(j, i)] += w;
                }
            }
        }
    }
    l
}

/// Kinetic coefficients `√g g^{μν}` restricted to the lattice block.
pub fn kinetic_coefficients(metric: &MetricField) -> Vec<Matrix2<f64>> {
    let d = metric.geometry().dim();
    (0..metric.geometry().site_count())
        .map(|x| block(&metric.densitized_inverse(x), d))
        .collect()
}

/// Derivative of `√g g^{μν}` along a per-site inverse-metric perturbation.
pub fn coefficient_derivative(metric: &MetricField, d_inverse: &[Matrix2<f64>]) -> Vec<Matrix2<f64>> {
    let d = metric.geometry().dim();
    d_inverse
        .iter()
        .enumerate()
        .map(|(x, dgi)| {
            let g = block(&metric.lower(x), d);
            let gi = block(&metric.inverse(x), d);
            let trace = g.component_mul(dgi).sum();
            (dgi - gi * (0.5 * trace)) * metric.sqrt_det(x)
        })
        .collect()
}

/// Symmetric precision operator with its site mass weights.
#[derive(Debug, Clone)]
pub struct PrecisionOperator {
    matrix: DMatrix<f64>,
    mass_weights: Vec<f64>,
    kernel_dim: usize,
}

impl PrecisionOperator {
    pub fn new(metric: &MetricField) -> Self {
        Self {
            matrix: assemble_from_coefficients(metric.geometry(), &kinetic_coefficients(metric)),
            mass_weights: metric.mass_weights(),
            kernel_dim: 1,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn mass_weights(&self) -> &[f64] {
        &self.mass_weights
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel_dim
    }

    pub fn quadratic_form(&self, phi: &[f64]) -> f64 {
        let n = phi.len();
        let mut s = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.matrix[(i, j)] * phi[j];
            }
            s += phi[i] * row;
        }
        s
    }

    /// Generalized eigen-decomposition of `(L, M)`, ascending, with the zero
    /// mode pinned to exactly `0` and the constant `1/√V`.
    pub fn spectrum(&self) -> Result<SpectralDecomposition> {
        let n = self.mass_weights.len();
        let inv_sqrt: Vec<f64> = self.mass_weights.iter().map(|m| 1.0 / m.sqrt()).collect();
        let reduced = DMatrix::from_fn(n, n, |i, j| self.matrix[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let eig = SymmetricEigen::new(reduced);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let lambda_max = eigenvalues[n - 1];
        if eigenvalues[0].abs() >= ZERO_MODE_TOLERANCE * lambda_max {
            return Err(Error::DegenerateSpectrum {
                index: 0,
                value: eigenvalues[0],
                max: lambda_max,
            });
        }
        if eigenvalues[1] <= ZERO_MODE_TOLERANCE * lambda_max {
            return Err(Error::DegenerateSpectrum {
                index: 1,
                value: eigenvalues[1],
                max: lambda_max,
            });
        }
        eigenvalues[0] = 0.0;
        let volume: f64 = self.mass_weights.iter().sum();
        let mut vectors = DMatrix::zeros(n, n);
        for (col, &k) in order.iter().enumerate() {
            for i in 0..n {
                vectors[(i, col)] = eig.eigenvectors[(i, k)] * inv_sqrt[i];
            }
        }
        let c0 = 1.0 / volume.sqrt();
        vectors.column_mut(0).fill(c0);
        Ok(SpectralDecomposition {
            eigenvalues,
            vectors,
            mass_weights: self.mass_weights.clone(),
        })
    }
}

/// Generalized eigenpairs `L θₙ = λₙ M θₙ`, mass-orthonormal.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
    mass_weights: Vec<f64>,
}

impl SpectralDecomposition {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvectors as columns.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn mode(&self, n: usize) -> Vec<f64> {
        self.vectors.column(n).iter().copied().collect()
    }

    pub fn mass_weights(&self) -> &[f64] {
        &self.mass_weights
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `½ Σ_{n≥1} log λₙ`.
    pub fn half_log_det(&self) -> f64 {
        0.5 * self.eigenvalues[1..].iter().map(|l| l.ln()).sum::<f64>()
    }

    /// Mode-space covariance `G = Σ_{n≥1} θₙ θₙᵀ / λₙ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut scaled = self.vectors.columns(1, n - 1).into_owned();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col /= self.eigenvalues[k + 1].sqrt();
        }
        &scaled * scaled.transpose()
    }
}

/// Gaussian field law at one metric: operator, spectrum and normalization.
#[derive(Debug)]
pub struct GaussianField {
    metric: MetricField,
    operator: PrecisionOperator,
    spectrum: SpectralDecomposition,
    log_partition: f64,
    covariance: OnceLock<DMatrix<f64>>,
}

impl GaussianField {
    pub fn new(metric: &MetricField) -> Result<Self> {
        let operator = PrecisionOperator::new(metric);
        let spectrum = operator.spectrum()?;
        let n = metric.geometry().site_count() as f64;
        let log_mass: f64 = operator.mass_weights.iter().map(|m| m.ln()).sum();
        let log_partition = spectrum.half_log_det() + 0.5 * log_mass - 0.5 * (metric.volume() / n).ln();
        Ok(Self {
            metric: metric.clone(),
            operator,
            spectrum,
            log_partition,
            covariance: OnceLock::new(),
        })
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        self.metric.geometry()
    }

    pub fn operator(&self) -> &PrecisionOperator {
        &self.operator
    }

    pub fn spectrum(&self) -> &SpectralDecomposition {
        &self.spectrum
    }

    /// Number of non-constant modes, `N − 1`.
    pub fn mode_count(&self) -> usize {
        self.spectrum.len() - 1
    }

    pub fn action(&self, phi: &[f64]) -> f64 {
        0.5 * self.operator.quadratic_form(phi)
    }

    /// `W = ½ log pdet L`.
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// `½ Σ_{n≥1} log λₙ` over the generalized spectrum.
    pub fn mode_log_partition(&self) -> f64 {
        self.spectrum.half_log_det()
    }

    pub fn log_likelihood(&self, phi: &[f64]) -> f64 {
        -self.action(phi) + self.log_partition - 0.5 * self.mode_count() as f64 * (2.0 * PI).ln()
    }

    /// Exact draw `φ = Σ_{n≥1} θₙ zₙ / √λₙ`; the mass-weighted mean vanishes.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldSample {
        let n = self.spectrum.len();
        let mut values = vec![0.0; n];
        for k in 1..n {
            let z: f64 = rng.sample(StandardNormal);
            let c = z / self.spectrum.eigenvalues[k].sqrt();
            for (i, v) in values.iter_mut().enumerate() {
                *v += c * self.spectrum.vectors[(i, k)];
            }
        }
        FieldSample { values }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<FieldSample> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.covariance.get_or_init(|| self.spectrum.covariance())
    }

    /// Per-site quadratic tensor `Q_{μν}` of one configuration.
    pub fn q_field(&self, phi: &[f64]) -> Vec<Matrix2<f64>> {
        quadratic_field(self.geometry(), |i, j| phi[i] * phi[j])
    }

    /// `⟨Q_{μν}⟩` under the Gaussian law.
    pub fn expected_q_field(&self) -> Vec<Matrix2<f64>> {
        let g = self.covariance();
        quadratic_field(self.geometry(), |i, j| g[(i, j)])
    }

    pub fn stress(&self, phi: &[f64]) -> Vec<Matrix2<f64>> {
        stress_from_q(&self.metric, &self.q_field(phi))
    }

    pub fn expected_stress(&self) -> Vec<Matrix2<f64>> {
        stress_from_q(&self.metric, &self.expected_q_field())
    }
}

/// Per-site `Q_{μν}` for any symmetric second-moment source `pair(i, j)`:
/// `φᵢφⱼ` for a configuration, a scatter matrix for a batch, or the
/// covariance for expectations.
pub fn quadratic_field(geom: &LatticeGeometry, pair: impl Fn(usize, usize) -> f64) -> Vec<Matrix2<f64>> {
    let d = geom.dim();
    (0..geom.site_count())
        .map(|x| {
            let mut q = Matrix2::zeros();
            for mu in 0..d {
                let f = geom.shift(x, mu, 1);
                let b = geom.shift(x, mu, -1);
                let fwd = pair(f, f) + pair(x, x) - 2.0 * pair(f, x);
                let bwd = pair(x, x) + pair(b, b) - 2.0 * pair(x, b);
                q[(mu, mu)] = 0.5 * (fwd + bwd);
            }
            if d == 2 {
                let (f0, b0) = (geom.shift(x, 0, 1), geom.shift(x, 0, -1));
                let (f1, b1) = (geom.shift(x, 1, 1), geom.shift(x, 1, -1));
                let c = 0.25 * (pair(f0, f1) - pair(f0, b1) - pair(b0, f1) + pair(b0, b1));
                q[(0, 1)] = c;
                q[(1, 0)] = c;
            }
            q
        })
        .collect()
}

/// `S = ½ a^{d-2} Σ_x B^{μν} Q_{μν}`.
pub fn action_from_q(metric: &MetricField, q: &[Matrix2<f64>]) -> f64 {
    let geom = metric.geometry();
    let pref = geom.spacing().powi(geom.dim() as i32 - 2);
    0.5 * pref
        * kinetic_coefficients(metric)
            .iter()
            .zip(q)
            .map(|(b, q)| b.component_mul(q).sum())
            .sum::<f64>()
}

/// `T_{μν} = −a^{-2} [Q_{μν} − ½ g_{μν} g^{αβ} Q_{αβ}]`, the lattice form of
/// `−(2/√g) δS/δg^{μν}` per unit cell.
pub fn stress_from_q(metric: &MetricField, q: &[Matrix2<f64>]) -> Vec<Matrix2<f64>> {
    let geom = metric.geometry();
    let d = geom.dim();
    let inv_a2 = geom.spacing().powi(-2);
    q.iter()
        .enumerate()
        .map(|(x, q)| {
            let g = block(&metric.lower(x), d);
            let trace = block(&metric.inverse(x), d).component_mul(q).sum();
            (q - g * (0.5 * trace)) * (-inv_a2)
        })
        .collect()
}

/// `Σ_x (−√g aᵈ / 2) T_{μν} δg^{μν}`: the first-order change of the action
/// along a per-site inverse-metric perturbation.
pub fn contract_stress(metric: &MetricField, stress: &[Matrix2<f64>], d_inverse: &[Matrix2<f64>]) -> f64 {
    let cell = metric.geometry().cell_volume();
    stress
        .iter()
        .zip(d_inverse)
        .enumerate()
        .map(|(x, (t, dgi))| -0.5 * metric.sqrt_det(x) * cell * t.component_mul(dgi).sum())
        .sum()
}

pub fn assemble_precision(metric: &MetricField) -> PrecisionOperator {
    PrecisionOperator::new(metric)
}

pub fn action(phi: &FieldSample, metric: &MetricField) -> f64 {
    0.5 * PrecisionOperator::new(metric).quadratic_form(phi.values())
}

pub fn log_partition(metric: &MetricField) -> Result<f64> {
    Ok(GaussianField::new(metric)?.log_partition())
}

pub fn sample_fields<R: Rng + ?Sized>(metric: &MetricField, count: usize, rng: &mut R) -> Result<Vec<FieldSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(GaussianField::new(metric)?.sample_many(count, rng))
}

pub fn log_likelihood(phi: &FieldSample, metric: &MetricField) -> Result<f64> {
    Ok(GaussianField::new(metric)?.log_likelihood(phi.values()))
}

pub fn stress_energy(phi: &FieldSample, metric: &MetricField) -> Vec<Matrix2<f64>> {
    stress_from_q(metric, &quadratic_field(metric.geometry(), |i, j| phi.values()[i] * phi.values()[j]))
}

pub fn expected_stress(metric: &MetricField) -> Result<Vec<Matrix2<f64>>> {
    Ok(GaussianField::new(metric)?.expected_stress())
}
