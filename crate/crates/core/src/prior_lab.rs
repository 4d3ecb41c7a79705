//! Reference priors by fixed-point iteration on a discretized channel,
//! Jeffreys priors and the Gaussian fluctuation prior built from Fisher
//! information.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::field_model::PrecisionOperator;
use crate::fisher_lab::{fisher_analytic, FisherMatrix};
use crate::geometry::MetricChart;
use crate::stats;

/// Tail mass allowed outside the statistic range, per tail.
const TAIL_MASS: f64 = 1e-8;
/// Minimum in-range mass required for every grid point.
pub const REQUIRED_COVERAGE: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub theta_lo: f64,
    pub theta_hi: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub n_obs: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Range of the log statistic; chosen automatically when absent.
    #[serde(default)]
    pub stat_range: Option<(f64, f64)>,
}

fn default_grid() -> usize {
    101
}

fn default_bins() -> usize {
    400
}

/// Row-stochastic likelihood `P[x|θ]` of the binned log statistic.
#[derive(Debug, Clone)]
pub struct DiscreteChannel {
    theta: Vec<f64>,
    edges: Vec<f64>,
    rows: Vec<Vec<f64>>,
    kappa: f64,
    dof: usize,
    min_coverage: f64,
}

impl DiscreteChannel {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Rate `κ` in `T ~ e^{κθ} χ²`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn min_coverage(&self) -> f64 {
        self.min_coverage
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Rate `κ` with `L(θ) = e^{-κ(θ - θ_ref)} L(θ_ref)` along a one-parameter
/// chart; errors if the chart is not of scale type.
pub fn scale_rate(chart: &MetricChart, lo: f64, hi: f64) -> Result<f64> {
    if chart.dimension() != 1 {
        return Err(Error::Unsupported {
            op: "build_channel",
            reason: format!("{}-parameter charts", chart.dimension()),
        });
    }
    let op = |t: f64| -> Result<nalgebra::DMatrix<f64>> { Ok(PrecisionOperator::new(&chart.metric(&[t])?).matrix().clone()) };
    let (l_lo, l_hi) = (op(lo)?, op(hi)?);
    let kappa = -(l_hi.trace() / l_lo.trace()).ln() / (hi - lo);
    for t in [hi, 0.5 * (lo + hi), lo + 0.25 * (hi - lo)] {
        let lt = op(t)?;
        let predicted = &l_lo * (-kappa * (t - lo)).exp();
        if (&lt - predicted).norm() > 1e-10 * lt.norm() {
            return Err(Error::Unsupported {
                op: "build_channel",
                reason: "charts whose precision operator is not a pure rescaling".into(),
            });
        }
    }
    Ok(kappa)
}

/// Probability that `log χ²_k + shift` lies in `[a, b]`, computed on the
/// side of the median that avoids cancellation.
fn interval_mass(dist: &ChiSquared, median: f64, a: f64, b: f64) -> f64 {
    let (xa, xb) = (a.exp(), b.exp());
    if xb <= median {
        dist.cdf(xb) - dist.cdf(xa)
    } else if xa >= median {
        dist.sf(xa) - dist.sf(xb)
    } else {
        (dist.cdf(median) - dist.cdf(xa)) + (dist.sf(median) - dist.sf(xb))
    }
}

/// Discretized channel of the sufficient statistic `T = Σᵢ φᵢᵀ L(0) φᵢ`
/// over `n_obs` draws. Edge bins absorb the tails.
pub fn build_channel(chart: &MetricChart, spec: &ChannelSpec) -> Result<DiscreteChannel> {
    if !(spec.theta_lo < spec.theta_hi) || spec.grid < 2 || spec.bins < 3 || spec.n_obs == 0 {
        return Err(Error::InvalidArgument(
            "channel needs theta_lo < theta_hi, grid ≥ 2, bins ≥ 3 and n_obs ≥ 1".into(),
        ));
    }
    let kappa = scale_rate(chart, spec.theta_lo, spec.theta_hi)?;
    let modes = chart.geometry().site_count() - 1;
    let dof = modes * spec.n_obs;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let median = dist.inverse_cdf(0.5);
    let theta: Vec<f64> = (0..spec.grid)
        .map(|i| spec.theta_lo + (spec.theta_hi - spec.theta_lo) * i as f64 / (spec.grid - 1) as f64)
        .collect();
    let (lo_shift, hi_shift) = (kappa * spec.theta_lo, kappa * spec.theta_hi);
    let (shift_min, shift_max) = (lo_shift.min(hi_shift), lo_shift.max(hi_shift));
    let required_lo = shift_min + dist.inverse_cdf(TAIL_MASS).ln();
    let required_hi = shift_max + dist.inverse_cdf(1.0 - TAIL_MASS).ln();
    let (u_lo, u_hi) = spec.stat_range.unwrap_or((required_lo, required_hi));
    if !(u_lo < u_hi) {
        return Err(Error::InvalidArgument(format!("empty statistic range [{u_lo}, {u_hi}]")));
    }
    let edges: Vec<f64> = (0..=spec.bins)
        .map(|j| u_lo + (u_hi - u_lo) * j as f64 / spec.bins as f64)
        .collect();
    let mut rows = Vec::with_capacity(spec.grid);
    let mut min_coverage: f64 = 1.0;
    for &t in &theta {
        let shift = kappa * t;
        let mut row: Vec<f64> = edges
            .windows(2)
            .map(|w| interval_mass(&dist, median, w[0] - shift, w[1] - shift))
            .collect();
        let below = dist.cdf((u_lo - shift).exp());
        let above = dist.sf((u_hi - shift).exp());
        let coverage = 1.0 - below - above;
        min_coverage = min_coverage.min(coverage);
        if coverage < REQUIRED_COVERAGE {
            return Err(Error::BinCoverage {
                theta: t,
                coverage,
                required_lo,
                required_hi,
            });
        }
        row[0] += below;
        let last = row.len() - 1;
        row[last] += above;
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        rows.push(row);
    }
    Ok(DiscreteChannel {
        theta,
        edges,
        rows,
        kappa,
        dof,
        min_coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDistribution {
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PriorDistribution {
    fn normalized(theta: Vec<f64>, raw: Vec<f64>) -> Self {
        let total: f64 = raw.iter().sum();
        Self {
            theta,
            weights: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn uniform(theta: Vec<f64>) -> Self {
        let n = theta.len();
        Self::normalized(theta, vec![1.0; n])
    }
}

/// Mutual information of `prior` through `channel`, in nats.
pub fn mutual_information(channel: &DiscreteChannel, prior: &[f64]) -> f64 {
    let kernel = FixedPointKernel::new(channel);
    let d = kernel.divergences(prior);
    prior.iter().zip(&d).map(|(p, d)| p * d).sum()
}

struct FixedPointKernel<'a> {
    rows: &'a [Vec<f64>],
    neg_entropy: Vec<f64>,
}

impl<'a> FixedPointKernel<'a> {
    fn new(channel: &'a DiscreteChannel) -> Self {
        let neg_entropy = channel
            .rows
            .iter()
            .map(|r| r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum())
            .collect();
        Self {
            rows: &channel.rows,
            neg_entropy,
        }
    }

    /// `D(P(·|θ) ‖ q)` for every grid point, with `q` the marginal under `p`.
    fn divergences(&self, p: &[f64]) -> Vec<f64> {
        let b = self.rows[0].len();
        let mut q = vec![0.0; b];
        for (row, &w) in self.rows.iter().zip(p) {
            for (qx, px) in q.iter_mut().zip(row) {
                *qx += w * px;
            }
        }
        let log_q: Vec<f64> = q.iter().map(|v| if *v > 0.0 { v.ln() } else { 0.0 }).collect();
        self.rows
            .iter()
            .zip(&self.neg_entropy)
            .map(|(row, h)| h - row.iter().zip(&log_q).map(|(px, lq)| px * lq).sum::<f64>())
            .collect()
    }

    /// One application of `p ↦ p·exp(D)/Z`, i.e. `exp(Σₓ P log posterior)`.
    fn step(&self, p: &[f64]) -> (Vec<f64>, f64) {
        let d = self.divergences(p);
        let mi: f64 = p.iter().zip(&d).map(|(p, d)| p * d).sum();
        let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = p.iter().zip(&d).map(|(p, d)| p * (d - dmax).exp()).collect();
        let total: f64 = raw.iter().sum();
        (raw.into_iter().map(|v| v / total).collect(), mi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub prior: PriorDistribution,
    pub mutual_information: f64,
    pub iterations: usize,
    /// Mutual information of each iterate, starting from the uniform prior.
    pub mi_history: Vec<f64>,
    /// `TV(p, f(p))` at the returned prior.
    pub residual: f64,
}

/// Iterate `p ← p·exp(D(P(·|θ) ‖ q_p))` from the uniform prior until one
/// step moves less than `tol` in total variation.
pub fn reference_prior_fixed_point(channel: &DiscreteChannel, max_iter: usize, tol: f64) -> Result<FixedPointResult> {
    let kernel = FixedPointKernel::new(channel);
    let m = channel.theta.len();
    let mut p = vec![1.0 / m as f64; m];
    let mut history = Vec::new();
    let mut last_step = f64::INFINITY;
    for it in 0..max_iter {
        let (next, mi) = kernel.step(&p);
        history.push(mi);
        last_step = stats::total_variation(&next, &p);
        if last_step < tol {
            return Ok(FixedPointResult {
                prior: PriorDistribution {
                    theta: channel.theta.clone(),
                    weights: p,
                },
                mutual_information: mi,
                iterations: it,
                mi_history: history,
                residual: last_step,
            });
        }
        p = next;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        last_step,
        last_iterate: p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JeffreysPrior {
    pub prior: PriorDistribution,
    pub warnings: Vec<String>,
}

/// Weights `∝ √F(θ)` on the grid.
pub fn jeffreys_prior(chart: &MetricChart, theta: &[f64]) -> Result<JeffreysPrior> {
    if chart.dimension() != 1 {
        return Err(Error::Unsupported {
            op: "jeffreys_prior",
            reason: format!("{}-parameter charts", chart.dimension()),
        });
    }
    let mut warnings = Vec::new();
    let mut raw = Vec::with_capacity(theta.len());
    for &t in theta {
        let f = fisher_analytic(chart, &[t])?.matrix()[(0, 0)];
        if f < 0.0 {
            warnings.push(format!("negative Fisher information {f:e} at theta = {t} clamped to zero"));
        }
        raw.push(f.max(0.0).sqrt());
    }
    if raw.iter().all(|&w| w == 0.0) {
        return Err(Error::Domain("Fisher information vanishes on the whole grid".into()));
    }
    Ok(JeffreysPrior {
        prior: PriorDistribution::normalized(theta.to_vec(), raw),
        warnings,
    })
}

/// `q(θ) = −½ (θ−θ₀)ᵀ F (θ−θ₀)` with a sampler of covariance `F⁺`.
#[derive(Debug, Clone)]
pub struct GaussianFluctuationPrior {
    theta0: Vec<f64>,
    fisher: FisherMatrix,
}

impl GaussianFluctuationPrior {
    pub fn new(fisher: FisherMatrix, theta0: &[f64]) -> Result<Self> {
        if fisher.dimension() != theta0.len() {
            return Err(Error::SizeMismatch {
                what: "fluctuation prior centre",
                expected: fisher.dimension(),
                actual: theta0.len(),
            });
        }
        Ok(Self {
            theta0: theta0.to_vec(),
            fisher,
        })
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn fisher(&self) -> &FisherMatrix {
        &self.fisher
    }

    /// True when the sampler only covers the identifiable subspace.
    pub fn restricted(&self) -> bool {
        !self.fisher.is_full_rank()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let d = DVector::from_iterator(theta.len(), theta.iter().zip(&self.theta0).map(|(a, b)| a - b));
        -0.5 * (d.transpose() * self.fisher.matrix() * &d)[(0, 0)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = self.theta0.clone();
        for c in 0..self.fisher.rank() {
            let z: f64 = rng.sample(StandardNormal);
            let scale = z / self.fisher.eigenvalues()[c].sqrt();
            for (o, v) in out.iter_mut().zip(self.fisher.eigenvectors().column(c).iter()) {
                *o += scale * v;
            }
        }
        out
    }
}

pub fn gaussian_fluctuation_prior(chart: &MetricChart, theta0: &[f64]) -> Result<GaussianFluctuationPrior> {
    GaussianFluctuationPrior::new(fisher_analytic(chart, theta0)?, theta0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Component, DirectionSpec, LatticeGeometry, MetricField, Phase};
    use crate::rng::stream_for;
    use nalgebra::DMatrix;
    use statrs::function::gamma::digamma;

    fn scale_chart() -> MetricChart {
        MetricChart::from_specs(
            MetricField::flat(&LatticeGeometry::ring(8, 1.0).unwrap()),
            &[DirectionSpec::Constant { component: None, scale: 2.0 }],
            -3.0,
            3.0,
        )
        .unwrap()
    }

    fn spec(n_obs: usize, grid: usize, bins: usize) -> ChannelSpec {
        ChannelSpec {
            theta_lo: -3.0,
            theta_hi: 3.0,
            grid,
            n_obs,
            bins,
            stat_range: None,
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let ch = build_channel(&scale_chart(), &spec(10, 21, 200)).unwrap();
        assert!((ch.kappa() - 2.0).abs() < 1e-12);
        for row in ch.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(ch.min_coverage() >= REQUIRED_COVERAGE);
    }

    #[test]
    fn equal_theta_gives_equal_rows() {
        let mut s = spec(1, 5, 100);
        s.theta_lo = -1.0;
        s.theta_hi = 1.0;
        let a = build_channel(&scale_chart(), &s).unwrap();
        let b = build_channel(&scale_chart(), &s).unwrap();
        assert_eq!(a.rows()[2], b.rows()[2]);
    }

    #[test]
    fn log_statistic_mean_matches_chi_square() {
        let ch = build_channel(&scale_chart(), &spec(10, 11, 400)).unwrap();
        let centers = ch.bin_centers();
        let width = ch.edges()[1] - ch.edges()[0];
        let k = ch.dof() as f64;
        for (t, row) in ch.theta().iter().zip(ch.rows()) {
            let binned: f64 = row.iter().zip(&centers).map(|(p, c)| p * c).sum();
            let exact = ch.kappa() * t + digamma(k / 2.0) + 2f64.ln();
            assert!((binned - exact).abs() < 0.05 * width, "θ = {t}: {binned} vs {exact}");
        }
    }

    #[test]
    fn narrow_range_is_rejected() {
        let mut s = spec(1, 11, 50);
        s.stat_range = Some((-1.0, 1.0));
        assert!(matches!(build_channel(&scale_chart(), &s), Err(Error::BinCoverage { .. })));
    }

    #[test]
    fn non_scale_chart_is_rejected() {
        let chart = MetricChart::from_specs(
            MetricField::flat(&LatticeGeometry::ring(8, 1.0).unwrap()),
            &[DirectionSpec::Fourier { axis: 0, mode: 1, phase: Phase::Cos, component: None, scale: 1.0 }],
            -0.5,
            0.5,
        )
        .unwrap();
        let mut s = spec(1, 11, 50);
        s.theta_lo = -0.5;
        s.theta_hi = 0.5;
        assert!(matches!(build_channel(&chart, &s), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn fixed_point_is_monotone_and_certified() {
        let mut s = spec(10, 41, 200);
        s.theta_lo = -1.0;
        s.theta_hi = 1.0;
        let ch = build_channel(&scale_chart(), &s).unwrap();
        let r = reference_prior_fixed_point(&ch, 200_000, 1e-6).unwrap();
        assert!(r.mi_history.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(r.residual < 1e-6);
        assert!((r.prior.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let uniform = PriorDistribution::uniform(ch.theta().to_vec());
        assert!(r.mutual_information >= mutual_information(&ch, &uniform.weights));
    }

    #[test]
    fn fixed_point_reports_non_convergence() {
        let ch = build_channel(&scale_chart(), &spec(1, 21, 100)).unwrap();
        match reference_prior_fixed_point(&ch, 5, 1e-12) {
            Err(Error::NotConverged { iterations, last_iterate, .. }) => {
                assert_eq!(iterations, 5);
                assert_eq!(last_iterate.len(), 21);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn jeffreys_of_scale_family_is_uniform() {
        let grid: Vec<f64> = (0..21).map(|i| -3.0 + 0.3 * i as f64).collect();
        let j = jeffreys_prior(&scale_chart(), &grid).unwrap();
        assert!(j.warnings.is_empty());
        assert!(j.prior.weights.iter().all(|&w| (w - 1.0 / 21.0).abs() < 1e-12));
    }

    #[test]
    fn jeffreys_refinement_is_stable() {
        let chart = MetricChart::from_specs(
            MetricField::flat(&LatticeGeometry::ring(8, 1.0).unwrap()),
            &[DirectionSpec::Fourier { axis: 0, mode: 1, phase: Phase::Cos, component: None, scale: 1.0 }],
            -0.8,
            0.8,
        )
        .unwrap();
        let coarse_grid: Vec<f64> = (0..21).map(|i| -0.8 + 0.08 * i as f64).collect();
        let fine_grid: Vec<f64> = (0..41).map(|i| -0.8 + 0.04 * i as f64).collect();
        let coarse = jeffreys_prior(&chart, &coarse_grid).unwrap().prior;
        let fine = jeffreys_prior(&chart, &fine_grid).unwrap().prior;
        assert!(coarse.weights.iter().all(|&w| w > 0.0));
        // Compare densities: restrict the fine prior to the coarse nodes.
        let restricted: Vec<f64> = fine.weights.iter().step_by(2).copied().collect();
        let total: f64 = restricted.iter().sum();
        let restricted: Vec<f64> = restricted.iter().map(|w| w / total).collect();
        assert!(stats::total_variation(&coarse.weights, &restricted) < 1e-3);
    }

    #[test]
    fn fluctuation_prior_covariance() {
        let f = FisherMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0])).unwrap();
        let prior = GaussianFluctuationPrior::new(f.clone(), &[0.5, -0.5]).unwrap();
        let mut rng = stream_for(1, 0, "prior");
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| prior.sample(&mut rng)).collect();
        let mean = [stats::mean(&draws.iter().map(|d| d[0]).collect::<Vec<_>>()), stats::mean(&draws.iter().map(|d| d[1]).collect::<Vec<_>>())];
        let cov = DMatrix::from_fn(2, 2, |i, j| {
            draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / 9999.0
        });
        let rel = (&cov - f.pseudo_inverse()).norm() / f.pseudo_inverse().norm();
        assert!(rel < 0.05, "{rel}");
        assert_eq!(prior.log_density(&[0.5, -0.5]), 0.0);
        assert!(prior.log_density(&[0.6, -0.5]) < 0.0);
        assert!(!prior.restricted());
    }

    #[test]
    fn zero_fisher_direction_leaves_identifiable_part_unchanged() {
        let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let base = MetricField::full_sym(&g, [1.0, 0.0, 1.0].repeat(16)).unwrap();
        let shear = DirectionSpec::Constant { component: Some(Component::G12), scale: 1.0 };
        let iso = DirectionSpec::Constant { component: None, scale: 1.0 };
        let with = MetricChart::from_specs(base.clone(), &[iso, shear.clone()], -0.5, 0.5).unwrap();
        let without = MetricChart::from_specs(base, &[shear], -0.5, 0.5).unwrap();
        let p_with = gaussian_fluctuation_prior(&with, &[0.0, 0.0]).unwrap();
        let p_without = gaussian_fluctuation_prior(&without, &[0.0]).unwrap();
        assert!(p_with.restricted());
        let mut r1 = stream_for(2, 0, "prior");
        let mut r2 = stream_for(2, 0, "prior");
        let a: Vec<f64> = (0..10_000).map(|_| p_with.sample(&mut r1)[1]).collect();
        let b: Vec<f64> = (0..10_000).map(|_| p_without.sample(&mut r2)[0]).collect();
        assert!((stats::variance(&a) / stats::variance(&b) - 1.0).abs() < 0.05);
        let zero: Vec<f64> = (0..100).map(|_| p_with.sample(&mut r1)[0]).collect();
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
    }
}
