//! Coupling of the field to metric fluctuations around flat space, the
//! Gaussian integrate-out that produces a non-local quartic action, its
//! Monte Carlo check, and the inversion tensors of a conformal field in
//! four dimensions.
//!
//! Metric fluctuations are lower-index perturbations `g = δ + h`, stored per
//! site in orthonormal (Mandel) coordinates `(h11, √2 h12, h22)` so that
//! `h:A` is a plain dot product and an identity kernel weights every tensor
//! entry equally.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{action_from_q, quadratic_field, stress_from_q};
use crate::fisher_lab::fisher_analytic;
use crate::geometry::{LatticeGeometry, MetricChart, MetricField};
use crate::stats;

/// Which per-site tensor the coupling `c[h, φ] = ½ aᵈ Σ h_{μν} A^{μν}` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingForm {
    /// `A = ∂φ∂φ + ½ δ |∂φ|²` from central differences.
    #[default]
    Gradient,
    /// `A = a⁻² (½ δ tr Q − Q)`, the exact first-order change of the lattice
    /// action under `g → δ + h`.
    LatticeResponse,
}

#[derive(Debug, Clone)]
pub struct ATensorField {
    geometry: LatticeGeometry,
    tensors: Vec<Matrix2<f64>>,
}

impl ATensorField {
    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn tensors(&self) -> &[Matrix2<f64>] {
        &self.tensors
    }

    pub fn trace(&self, site: usize) -> f64 {
        self.tensors[site].trace()
    }

    /// Site-major Mandel vector of the whole field.
    pub fn mandel(&self) -> DVector<f64> {
        let d = self.geometry.dim();
        let mut out = Vec::with_capacity(self.tensors.len() * components(d));
        for t in &self.tensors {
            out.extend(to_mandel(t, d));
        }
        DVector::from_vec(out)
    }

    /// `c[h, φ] = ½ aᵈ Σ_x h_{μν}(x) A^{μν}(x)`.
    pub fn coupling(&self, h: &[Matrix2<f64>]) -> f64 {
        0.5 * self.geometry.cell_volume()
            * self
                .tensors
                .iter()
                .zip(h)
                .map(|(a, h)| a.component_mul(h).sum())
                .sum::<f64>()
    }

    /// Coupling for a Mandel-coordinate perturbation.
    pub fn coupling_mandel(&self, h: &DVector<f64>) -> f64 {
        0.5 * self.geometry.cell_volume() * self.mandel().dot(h)
    }
}

/// Independent components of a symmetric tensor per site.
pub fn components(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn to_mandel(t: &Matrix2<f64>, d: usize) -> Vec<f64> {
    if d == 1 {
        vec![t[(0, 0)]]
    } else {
        vec![t[(0, 0)], SQRT_2 * t[(0, 1)], t[(1, 1)]]
    }
}

/// Per-site tensors from a site-major Mandel vector.
pub fn from_mandel(v: &DVector<f64>, dim: usize) -> Vec<Matrix2<f64>> {
    let nc = components(dim);
    v.as_slice()
        .chunks(nc)
        .map(|c| {
            if dim == 1 {
                Matrix2::new(c[0], 0.0, 0.0, 0.0)
            } else {
                let off = c[1] / SQRT_2;
                Matrix2::new(c[0], off, off, c[2])
            }
        })
        .collect()
}

fn check_len(geom: &LatticeGeometry, phi: &[f64]) -> Result<()> {
    if phi.len() != geom.site_count() {
        return Err(Error::SizeMismatch {
            what: "field configuration",
            expected: geom.site_count(),
            actual: phi.len(),
        });
    }
    Ok(())
}

pub fn a_tensor(geom: &LatticeGeometry, phi: &[f64]) -> Result<ATensorField> {
    check_len(geom, phi)?;
    let d = geom.dim();
    let inv_2a = 0.5 / geom.spacing();
    let tensors = (0..geom.site_count())
        .map(|x| {
            let mut grad = [0.0; 2];
            for (mu, g) in grad.iter_mut().enumerate().take(d) {
                *g = (phi[geom.shift(x, mu, 1)] - phi[geom.shift(x, mu, -1)]) * inv_2a;
            }
            let norm2 = grad[0] * grad[0] + grad[1] * grad[1];
            let mut a = Matrix2::zeros();
            for mu in 0..d {
                for nu in 0..d {
                    a[(mu, nu)] = grad[mu] * grad[nu];
                }
                a[(mu, mu)] += 0.5 * norm2;
            }
            a
        })
        .collect();
    Ok(ATensorField {
        geometry: geom.clone(),
        tensors,
    })
}

/// Exact first-order response of the lattice action to `g = δ + h`; this is
/// the flat-space stress tensor.
pub fn response_tensor(geom: &LatticeGeometry, phi: &[f64]) -> Result<ATensorField> {
    check_len(geom, phi)?;
    let flat = MetricField::flat(geom);
    let q = quadratic_field(geom, |i, j| phi[i] * phi[j]);
    Ok(ATensorField {
        geometry: geom.clone(),
        tensors: stress_from_q(&flat, &q),
    })
}

pub fn coupling_tensor(geom: &LatticeGeometry, phi: &[f64], form: CouplingForm) -> Result<ATensorField> {
    match form {
        CouplingForm::Gradient => a_tensor(geom, phi),
        CouplingForm::LatticeResponse => response_tensor(geom, phi),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `σ² · I` in Mandel coordinates.
    Diagonal { sigma2: f64 },
    /// `σ² S Sᵀ` with `S` a row-normalized periodic Gaussian smoother of the
    /// given physical width, applied to each component separately.
    Smoothed { sigma2: f64, width: f64 },
    /// `D F⁺ Dᵀ` with `D` the chart's lower-metric directions at `theta0`.
    Chart { theta0: Vec<f64> },
    /// Explicit matrix.
    Dense,
}

/// Covariance of metric fluctuations over site-major Mandel components.
#[derive(Debug, Clone)]
pub struct FluctuationKernel {
    spec: KernelSpec,
    dim: usize,
    matrix: DMatrix<f64>,
}

impl FluctuationKernel {
    pub fn new(geom: &LatticeGeometry, matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_spec(geom, matrix, KernelSpec::Dense)
    }

    fn with_spec(geom: &LatticeGeometry, matrix: DMatrix<f64>, spec: KernelSpec) -> Result<Self> {
        let n = geom.site_count() * components(geom.dim());
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::SizeMismatch {
                what: "fluctuation kernel",
                expected: n,
                actual: matrix.nrows(),
            });
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument("fluctuation kernel is not symmetric".into()));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let min = matrix.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!(
                "fluctuation kernel is not positive semidefinite (eigenvalue {min:e})"
            )));
        }
        Ok(Self {
            spec,
            dim: geom.dim(),
            matrix,
        })
    }

    pub fn build(spec: &KernelSpec, geom: &LatticeGeometry, chart: Option<&MetricChart>) -> Result<Self> {
        let nc = components(geom.dim());
        let n = geom.site_count() * nc;
        let matrix = match spec {
            KernelSpec::Diagonal { sigma2 } => {
                check_variance(*sigma2)?;
                DMatrix::identity(n, n) * *sigma2
            }
            KernelSpec::Smoothed { sigma2, width } => {
                check_variance(*sigma2)?;
                if !(*width > 0.0) {
                    return Err(Error::InvalidArgument(format!("smoothing width must be positive, got {width}")));
                }
                let s = smoother(geom, *width);
                let sst = &s * s.transpose();
                let mut k = DMatrix::zeros(n, n);
                for x in 0..geom.site_count() {
                    for y in 0..geom.site_count() {
                        for c in 0..nc {
                            k[(x * nc + c, y * nc + c)] = sigma2 * sst[(x, y)];
                        }
                    }
                }
                k
            }
            KernelSpec::Chart { theta0 } => {
                let chart = chart.ok_or_else(|| Error::InvalidArgument("chart kernel needs a chart".into()))?;
                chart_kernel(chart, theta0)?
            }
            KernelSpec::Dense => {
                return Err(Error::InvalidArgument("dense kernels are built with FluctuationKernel::new".into()))
            }
        };
        Self::with_spec(geom, matrix, spec.clone())
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Symmetric square root, with rounding-level negative eigenvalues
    /// clamped to zero.
    pub fn sqrt(&self) -> DMatrix<f64> {
        let eig = self.matrix.clone().symmetric_eigen();
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
    }
}

fn check_variance(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel variance must be finite and ≥ 0, got {sigma2}")));
    }
    Ok(())
}

fn smoother(geom: &LatticeGeometry, width: f64) -> DMatrix<f64> {
    let n = geom.site_count();
    let a = geom.spacing();
    let mut s = DMatrix::from_fn(n, n, |x, y| {
        let (cx, cy) = (geom.coords(x), geom.coords(y));
        let r2: f64 = (0..geom.dim())
            .map(|mu| {
                let ext = geom.extents()[mu];
                let diff = cx[mu].abs_diff(cy[mu]);
                let dist = diff.min(ext - diff) as f64 * a;
                dist * dist
            })
            .sum();
        (-r2 / (2.0 * width * width)).exp()
    });
    for mut row in s.row_iter_mut() {
        let total = row.sum();
        row /= total;
    }
    s
}

fn chart_kernel(chart: &MetricChart, theta0: &[f64]) -> Result<DMatrix<f64>> {
    let metric = chart.metric(theta0)?;
    let geom = metric.geometry();
    let d = geom.dim();
    for x in 0..geom.site_count() {
        let g = crate::geometry::block(&metric.lower(x), d);
        let id = crate::geometry::block(&Matrix2::identity(), d);
        if (g - id).amax() > 1e-12 {
            return Err(Error::Unsupported {
                op: "chart fluctuation kernel",
                reason: "charts whose metric at theta0 is not flat".into(),
            });
        }
    }
    let fisher = fisher_analytic(chart, theta0)?;
    let n = geom.site_count() * components(d);
    let mut dmat = DMatrix::zeros(n, chart.dimension());
    for i in 0..chart.dimension() {
        let col: Vec<f64> = chart
            .lower_derivative(&metric, i)
            .iter()
            .flat_map(|t| to_mandel(t, d))
            .collect();
        dmat.set_column(i, &DVector::from_vec(col));
    }
    Ok(&dmat * fisher.pseudo_inverse() * dmat.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveAction {
    #[serde(rename = "S0")]
    pub s0: f64,
    #[serde(rename = "Squartic")]
    pub s_quartic: f64,
    #[serde(rename = "Seff")]
    pub s_eff: f64,
}

/// `S_eff = S₀ − ⅛ a^{2d} Ãᵀ K Ã`: the Gaussian average of `e^{−c[h, φ]}`
/// over `h ~ N(0, K)` at first order in `h`.
pub fn effective_action(
    geom: &LatticeGeometry,
    phi: &[f64],
    kernel: &FluctuationKernel,
    form: CouplingForm,
) -> Result<EffectiveAction> {
    let a = coupling_tensor(geom, phi, form)?;
    if kernel.dim() != geom.dim() || kernel.matrix().nrows() != geom.site_count() * components(geom.dim()) {
        return Err(Error::SizeMismatch {
            what: "fluctuation kernel",
            expected: geom.site_count() * components(geom.dim()),
            actual: kernel.matrix().nrows(),
        });
    }
    let s0 = action_from_q(&MetricField::flat(geom), &quadratic_field(geom, |i, j| phi[i] * phi[j]));
    let at = a.mandel();
    let s_quartic = -0.125 * geom.cell_volume().powi(2) * at.dot(&(kernel.matrix() * &at));
    Ok(EffectiveAction {
        s0,
        s_quartic,
        s_eff: s0 + s_quartic,
    })
}

/// `V(ε) = −log mean cosh(ε cᵢ)`: the antithetic estimate of
/// `−log E[e^{−c[εh, φ]}]` from couplings of unit-amplitude draws.
pub fn log_mgf_deficit(couplings: &[f64], eps: f64) -> f64 {
    -(couplings.iter().map(|c| (eps * c).cosh()).sum::<f64>() / couplings.len() as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    /// Richardson-extrapolated `ε²` coefficient of `−log E[e^{−c}]`.
    pub coefficient: f64,
    /// Standard error from batch means.
    pub standard_error: f64,
    /// Mean coupling over the plain (non-antithetic) draws.
    pub odd_moment: f64,
    pub odd_moment_se: f64,
    pub draws: usize,
    pub amplitude: f64,
}

const ORACLE_BATCHES: usize = 20;

fn richardson(couplings: &[f64], eps: f64) -> f64 {
    let coarse = log_mgf_deficit(couplings, eps) / (eps * eps);
    let fine = log_mgf_deficit(couplings, 0.5 * eps) / (0.25 * eps * eps);
    (4.0 * fine - coarse) / 3.0
}

/// Oracle on given unit-amplitude Mandel draws `h`.
pub fn mc_integrate_out_from_draws(a: &ATensorField, draws: &[DVector<f64>], eps: f64) -> Result<OracleEstimate> {
    if draws.len() < 2 * ORACLE_BATCHES {
        return Err(Error::InvalidArgument(format!(
            "need at least {} draws, got {}",
            2 * ORACLE_BATCHES,
            draws.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("amplitude must be positive, got {eps}")));
    }
    let couplings: Vec<f64> = draws
        .iter()
        .map(|h| a.coupling(&from_mandel(h, a.geometry().dim())))
        .collect();
    let spread = stats::variance(&couplings);
    if !(spread > 0.0) {
        return Err(Error::DegenerateDraws(
            "every draw gives the same coupling; the kernel or the field gradient vanishes".into(),
        ));
    }
    let coefficient = richardson(&couplings, eps);
    let batch = couplings.len() / ORACLE_BATCHES;
    let batches: Vec<f64> = couplings.chunks_exact(batch).take(ORACLE_BATCHES).map(|c| richardson(c, eps)).collect();
    Ok(OracleEstimate {
        coefficient,
        standard_error: stats::std_error(&batches),
        odd_moment: stats::mean(&couplings),
        odd_moment_se: stats::std_error(&couplings),
        draws: draws.len(),
        amplitude: eps,
    })
}

/// Brute-force integrate-out: draw `h = K^{1/2} z`, evaluate the coupling
/// per draw and extrapolate the `ε²` coefficient over `{ε, ε/2}`.
pub fn mc_integrate_out_oracle<R: Rng + ?Sized>(
    geom: &LatticeGeometry,
    phi: &[f64],
    kernel: &FluctuationKernel,
    form: CouplingForm,
    n_draws: usize,
    eps: f64,
    rng: &mut R,
) -> Result<OracleEstimate> {
    let a = coupling_tensor(geom, phi, form)?;
    let root = kernel.sqrt();
    let n = root.nrows();
    let draws: Vec<DVector<f64>> = (0..n_draws)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            &root * z
        })
        .collect();
    mc_integrate_out_from_draws(&a, &draws, eps)
}

pub type Rank4 = [[[[f64; 4]; 4]; 4]; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct ITensor {
    pub two: Matrix4<f64>,
    pub four: Rank4,
}

/// `I_{μν} = δ_{μν} − 2 x_μ x_ν / |x|²` and
/// `I_{μνρσ} = ½(I_{μσ}I_{νρ} + I_{μρ}I_{νσ}) − ¼ δ_{μν}δ_{ρσ}`.
pub fn i_tensor(x: [f64; 4]) -> Result<ITensor> {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::Domain(format!("inversion tensor needs a nonzero finite vector, got {x:?}")));
    }
    let two = Matrix4::from_fn(|m, n| if m == n { 1.0 } else { 0.0 } - 2.0 * x[m] * x[n] / r2);
    let mut four = [[[[0.0; 4]; 4]; 4]; 4];
    for (m, a) in four.iter_mut().enumerate() {
        for (n, b) in a.iter_mut().enumerate() {
            for (r, c) in b.iter_mut().enumerate() {
                for (s, v) in c.iter_mut().enumerate() {
                    let trace = if m == n && r == s { 0.25 } else { 0.0 };
                    *v = 0.5 * (two[(m, s)] * two[(n, r)] + two[(m, r)] * two[(n, s)]) - trace;
                }
            }
        }
    }
    Ok(ITensor { two, four })
}

/// `C · I_{μνρσ}(x − y) / |x − y|⁸`.
pub fn cft_fisher_kernel(x: [f64; 4], y: [f64; 4], c: f64) -> Result<Rank4> {
    let diff = [x[0] - y[0], x[1] - y[1], x[2] - y[2], x[3] - y[3]];
    let r2: f64 = diff.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(Error::Domain("Fisher kernel at coincident points".into()));
    }
    let mut out = i_tensor(diff)?.four;
    let scale = c / r2.powi(4);
    out.iter_mut().flatten().flatten().flatten().for_each(|v| *v *= scale);
    Ok(out)
}
