//! Fisher information over chart parameters, Monte Carlo cross-checks,
//! Cramér–Rao experiments and normality of the fitted parameters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, ChartPoint, Constraint, FitSettings, MleProblem};
use crate::geometry::MetricChart;
use crate::rng::stream_for;
use crate::stats;

/// Relative eigenvalue cut for the identifiable subspace.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Eigenvalues below this are treated as zero even when every eigenvalue is
/// rounding noise.
pub const ABSOLUTE_RANK_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FisherMatrix {
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    pseudo_inverse: DMatrix<f64>,
    rank: usize,
}

impl FisherMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("Fisher matrix must be square and non-empty".into()));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let k = sym.nrows();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigenvectors = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
        let scale = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = (RANK_TOLERANCE * scale).max(ABSOLUTE_RANK_FLOOR);
        let mut pseudo_inverse = DMatrix::zeros(k, k);
        let mut rank = 0;
        for (c, &lam) in eigenvalues.iter().enumerate() {
            if lam > cut && lam > 0.0 {
                rank += 1;
                let v = eigenvectors.column(c);
                pseudo_inverse += v * v.transpose() / lam;
            }
        }
        Ok(Self {
            matrix: sym,
            eigenvalues,
            eigenvectors,
            pseudo_inverse,
            rank,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pseudo_inverse
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dimension()
    }

    /// Orthogonal projector onto the identifiable subspace.
    pub fn range_projector(&self) -> DMatrix<f64> {
        let k = self.dimension();
        let mut p = DMatrix::zeros(k, k);
        for c in 0..self.rank {
            let v = self.eigenvectors.column(c);
            p += v * v.transpose();
        }
        p
    }

    /// Symmetric square root on the identifiable subspace.
    pub fn sqrt(&self) -> DMatrix<f64> {
        let k = self.dimension();
        let mut s = DMatrix::zeros(k, k);
        for c in 0..self.rank {
            let v = self.eigenvectors.column(c);
            s += v * v.transpose() * self.eigenvalues[c].sqrt();
        }
        s
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        rows(&self.matrix)
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// `F_ij = ½ tr(G ∂ᵢL G ∂ⱼL)` evaluated in the mode basis at a chart point.
pub fn fisher_at_point(point: &ChartPoint) -> Result<FisherMatrix> {
    let spec = point.field().spectrum();
    let n = spec.len();
    let mut w = spec.vectors().columns(1, n - 1).into_owned();
    for (k, mut col) in w.column_iter_mut().enumerate() {
        col /= spec.eigenvalues()[k + 1].sqrt();
    }
    let reduced: Vec<DMatrix<f64>> = (0..point.dimension())
        .map(|i| w.transpose() * point.d_precision(i) * &w)
        .collect();
    let k = reduced.len();
    let f = DMatrix::from_fn(k, k, |i, j| 0.5 * reduced[i].component_mul(&reduced[j]).sum());
    FisherMatrix::from_matrix(f)
}

pub fn fisher_analytic(chart: &MetricChart, theta: &[f64]) -> Result<FisherMatrix> {
    fisher_at_point(&ChartPoint::new(chart, theta)?)
}

#[derive(Debug, Clone)]
pub struct MonteCarloFisher {
    pub fisher: FisherMatrix,
    /// Standard error of each covariance entry.
    pub standard_errors: DMatrix<f64>,
    pub score_mean: Vec<f64>,
    pub score_mean_se: Vec<f64>,
    pub samples: usize,
}

/// Empirical covariance of per-sample scores.
pub fn fisher_monte_carlo<R: Rng + ?Sized>(
    chart: &MetricChart,
    theta: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<MonteCarloFisher> {
    if n_samples < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {n_samples}")));
    }
    let point = ChartPoint::new(chart, theta)?;
    let scores: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| point.score(point.field().sample(rng).values()))
        .collect();
    let k = point.dimension();
    let n = n_samples as f64;
    let mean: Vec<f64> = (0..k).map(|i| scores.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let mean_se: Vec<f64> = (0..k)
        .map(|i| stats::std_error(&scores.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect();
    let mut cov = DMatrix::zeros(k, k);
    let mut se = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let prods: Vec<f64> = scores.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
            cov[(i, j)] = prods.iter().sum::<f64>() / (n - 1.0);
            se[(i, j)] = stats::std_error(&prods);
        }
    }
    Ok(MonteCarloFisher {
        fisher: FisherMatrix::from_matrix(cov)?,
        standard_errors: se,
        score_mean: mean,
        score_mean_se: mean_se,
        samples: n_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentNormality {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub variance: f64,
    pub qq_max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub replicas: usize,
    pub components: Vec<ComponentNormality>,
    pub pass: bool,
}

pub const SKEWNESS_LIMIT: f64 = 0.25;
pub const KURTOSIS_LIMIT: f64 = 0.5;
pub const VARIANCE_RANGE: (f64, f64) = (0.8, 1.25);

/// Standardize `z = (nF)^{1/2} (θ̂ − θ₀)` and summarize each component.
pub fn normality_test(
    theta_hats: &[Vec<f64>],
    theta0: &[f64],
    fisher: &FisherMatrix,
    n_per_fit: usize,
) -> Result<NormalityReport> {
    if theta_hats.len() < 200 {
        return Err(Error::InvalidArgument(format!(
            "normality needs at least 200 replicas, got {}",
            theta_hats.len()
        )));
    }
    let root = fisher.sqrt() * (n_per_fit as f64).sqrt();
    let k = theta0.len();
    let z: Vec<DVector<f64>> = theta_hats
        .iter()
        .map(|t| &root * DVector::from_iterator(k, t.iter().zip(theta0).map(|(a, b)| a - b)))
        .collect();
    let components: Vec<ComponentNormality> = (0..fisher.rank().min(k))
        .map(|i| {
            // Components are reported in the eigenbasis when F is singular,
            // otherwise in chart coordinates.
            let col: Vec<f64> = if fisher.is_full_rank() {
                z.iter().map(|v| v[i]).collect()
            } else {
                let e = fisher.eigenvectors().column(i);
                z.iter().map(|v| v.dot(&e)).collect()
            };
            ComponentNormality {
                skewness: stats::skewness(&col),
                excess_kurtosis: stats::excess_kurtosis(&col),
                variance: stats::variance(&col),
                qq_max_deviation: stats::qq_max_deviation(&col),
            }
        })
        .collect();
    let pass = components.iter().all(|c| {
        c.skewness.abs() < SKEWNESS_LIMIT
            && c.excess_kurtosis.abs() < KURTOSIS_LIMIT
            && (VARIANCE_RANGE.0..=VARIANCE_RANGE.1).contains(&c.variance)
    });
    Ok(NormalityReport {
        replicas: theta_hats.len(),
        components,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CramerRaoSettings {
    pub samples_per_fit: usize,
    pub replicas: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub fit: FitSettings,
}

fn default_bootstrap() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBound {
    pub index: usize,
    pub variance: f64,
    pub matrix_bound: f64,
    pub scalar_bound: f64,
    /// `C_ii ≥ ((NF)⁻¹)_ii` within the bootstrap tolerance.
    pub statistical_link: bool,
    pub tolerance: f64,
    /// `((NF)⁻¹)_ii ≥ 1/(N F_ii)`, exact algebra.
    pub algebraic_link: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CramerRaoReport {
    pub fisher: Vec<Vec<f64>>,
    pub fisher_eigenvalues: Vec<f64>,
    pub rank: usize,
    pub warning: Option<String>,
    pub samples_per_fit: usize,
    pub replicas: usize,
    pub converged: usize,
    pub theta_hats: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
    /// Eigenvalues of `(NF)^{1/2} C (NF)^{1/2}`; all equal one for an
    /// efficient estimator. For one parameter this is `C·N·F`.
    pub efficiency: Vec<f64>,
    pub efficiency_deviation: f64,
    /// Smallest eigenvalue of `C − (NF)⁺` on the identifiable subspace.
    pub margin: f64,
    pub bootstrap_sd: f64,
    pub epsilon_stat: f64,
    pub bootstrap_pass_fraction: f64,
    pub matrix_bound_pass: bool,
    pub component_bounds: Vec<ComponentBound>,
    pub normality: Option<NormalityReport>,
}

/// Multiplier on the bootstrap standard deviation defining the statistical
/// slack of the matrix bound.
pub const BOOTSTRAP_SLACK: f64 = 4.0;
pub const BOUND_PASS_FRACTION: f64 = 0.95;

fn covariance_of(rows: &[&Vec<f64>], k: usize) -> DMatrix<f64> {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..k).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    DMatrix::from_fn(k, k, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)
    })
}

fn min_margin(c: &DMatrix<f64>, bound: &DMatrix<f64>, projector: &DMatrix<f64>, rank: usize) -> f64 {
    let d = projector * (c - bound) * projector;
    let eig = SymmetricEigen::new((&d + d.transpose()) * 0.5);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    // The complement of the identifiable subspace contributes exact zeros.
    vals[..rank].iter().copied().fold(f64::INFINITY, f64::min)
}

/// Fit `replicas` independent batches at `theta0` and compare the spread
/// of the estimates with the inverse Fisher information.
pub fn cramer_rao_check(
    chart: &MetricChart,
    theta0: &[f64],
    settings: &CramerRaoSettings,
    seed: u64,
) -> Result<CramerRaoReport> {
    if settings.replicas < 3 || settings.samples_per_fit == 0 || settings.bootstrap == 0 {
        return Err(Error::InvalidArgument("replicas ≥ 3, samples_per_fit ≥ 1 and bootstrap ≥ 1 required".into()));
    }
    let point = ChartPoint::new(chart, theta0)?;
    let fisher = fisher_at_point(&point)?;
    let k = fisher.dimension();
    let warning = (!fisher.is_full_rank()).then(|| {
        format!(
            "Fisher information has rank {} of {k}; bounds are restricted to the identifiable subspace",
            fisher.rank()
        )
    });
    let nf = fisher.matrix() * settings.samples_per_fit as f64;
    let bound = fisher.pseudo_inverse() / settings.samples_per_fit as f64;
    let projector = fisher.range_projector();

    let mut theta_hats = Vec::with_capacity(settings.replicas);
    let mut converged_flags = Vec::with_capacity(settings.replicas);
    for r in 0..settings.replicas {
        let mut rng = stream_for(seed, r as u64, "cramer-rao/sampling");
        let samples = point.field().sample_many(settings.samples_per_fit, &mut rng);
        let problem = MleProblem::new(chart.clone(), &samples, Constraint::None, settings.fit.clone())?;
        let result = fit(&problem)?;
        converged_flags.push(result.converged);
        theta_hats.push(result.theta);
    }
    let used: Vec<&Vec<f64>> = theta_hats
        .iter()
        .zip(&converged_flags)
        .filter_map(|(t, &c)| c.then_some(t))
        .collect();
    if used.len() < 3 {
        return Err(Error::InvalidArgument("fewer than three replica fits converged".into()));
    }
    let c = covariance_of(&used, k);
    let margin = min_margin(&c, &bound, &projector, fisher.rank());

    let root = fisher.sqrt() * (settings.samples_per_fit as f64).sqrt();
    let scaled = &root * &c * &root;
    let mut efficiency: Vec<f64> = SymmetricEigen::new((&scaled + scaled.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    efficiency.sort_by(|a, b| b.total_cmp(a));
    efficiency.truncate(fisher.rank());
    let efficiency_deviation = (&c * &nf - &projector).norm();

    let mut boot_rng = stream_for(seed, 0, "cramer-rao/bootstrap");
    let m = used.len();
    let mut margins = Vec::with_capacity(settings.bootstrap);
    let mut diag_boot: Vec<Vec<f64>> = vec![Vec::with_capacity(settings.bootstrap); k];
    for _ in 0..settings.bootstrap {
        let resample: Vec<&Vec<f64>> = (0..m).map(|_| used[boot_rng.random_range(0..m)]).collect();
        let cb = covariance_of(&resample, k);
        margins.push(min_margin(&cb, &bound, &projector, fisher.rank()));
        for (i, d) in diag_boot.iter_mut().enumerate() {
            d.push(cb[(i, i)]);
        }
    }
    let bootstrap_sd = stats::std_dev(&margins);
    let epsilon_stat = BOOTSTRAP_SLACK * bootstrap_sd;
    let bootstrap_pass_fraction =
        margins.iter().filter(|&&v| v >= -epsilon_stat).count() as f64 / margins.len() as f64;

    let component_bounds = (0..k)
        .map(|i| {
            let matrix_bound = bound[(i, i)];
            let scalar_bound = 1.0 / nf[(i, i)];
            let tolerance = BOOTSTRAP_SLACK * stats::std_dev(&diag_boot[i]);
            ComponentBound {
                index: i,
                variance: c[(i, i)],
                matrix_bound,
                scalar_bound,
                statistical_link: c[(i, i)] >= matrix_bound - tolerance,
                tolerance,
                algebraic_link: matrix_bound >= scalar_bound * (1.0 - 1e-12),
            }
        })
        .collect();

    let normality = if used.len() >= 200 {
        let owned: Vec<Vec<f64>> = used.iter().map(|v| v.to_vec()).collect();
        Some(normality_test(&owned, theta0, &fisher, settings.samples_per_fit)?)
    } else {
        None
    };

    Ok(CramerRaoReport {
        fisher: fisher.to_rows(),
        fisher_eigenvalues: fisher.eigenvalues().to_vec(),
        rank: fisher.rank(),
        warning,
        samples_per_fit: settings.samples_per_fit,
        replicas: settings.replicas,
        converged: used.len(),
        theta_hats,
        covariance: rows(&c),
        efficiency,
        efficiency_deviation,
        margin,
        bootstrap_sd,
        epsilon_stat,
        bootstrap_pass_fraction,
        matrix_bound_pass: bootstrap_pass_fraction >= BOUND_PASS_FRACTION,
        component_bounds,
        normality,
    })
}
