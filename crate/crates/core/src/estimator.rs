//! Maximum-likelihood estimation of chart parameters from field samples,
//! with an optional fixed-volume constraint and the stationarity
//! certificate of the fitted metric.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{
    action_from_q, assemble_from_coefficients, coefficient_derivative, contract_stress, quadratic_field,
    stress_from_q, FieldSample, GaussianField,
};
use crate::geometry::{block, MetricChart, MetricField};
use crate::rng::stream_for;
use crate::stats;

/// Gaussian law at a chart point together with the per-direction
/// inverse-metric derivatives.
#[derive(Debug)]
pub struct ChartPoint {
    theta: Vec<f64>,
    field: GaussianField,
    d_inverse: Vec<Vec<Matrix2<f64>>>,
    expected_gradient: OnceLock<Vec<f64>>,
}

impl ChartPoint {
    pub fn new(chart: &MetricChart, theta: &[f64]) -> Result<Self> {
        let metric = chart.metric(theta)?;
        let field = GaussianField::new(&metric)?;
        let d_inverse = (0..chart.dimension()).map(|i| chart.inverse_derivative(&metric, i)).collect();
        Ok(Self {
            theta: theta.to_vec(),
            field,
            d_inverse,
            expected_gradient: OnceLock::new(),
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn field(&self) -> &GaussianField {
        &self.field
    }

    pub fn metric(&self) -> &MetricField {
        self.field.metric()
    }

    pub fn dimension(&self) -> usize {
        self.d_inverse.len()
    }

    pub fn d_inverse(&self, i: usize) -> &[Matrix2<f64>] {
        &self.d_inverse[i]
    }

    /// `∂L/∂θᵢ`.
    pub fn d_precision(&self, i: usize) -> DMatrix<f64> {
        let metric = self.metric();
        assemble_from_coefficients(metric.geometry(), &coefficient_derivative(metric, &self.d_inverse[i]))
    }

    /// Chart contraction of a stress field: `Σ_x (−√g aᵈ/2) T : ∂ᵢg^{-1}`.
    pub fn contract(&self, stress: &[Matrix2<f64>]) -> Vec<f64> {
        self.d_inverse
            .iter()
            .map(|dgi| contract_stress(self.metric(), stress, dgi))
            .collect()
    }

    /// `∂θ S` for the configuration (or batch) summarized by `q`.
    pub fn action_gradient(&self, q: &[Matrix2<f64>]) -> Vec<f64> {
        self.contract(&stress_from_q(self.metric(), q))
    }

    /// `⟨∂θ S⟩ = ∂θ W`.
    pub fn expected_action_gradient(&self) -> &[f64] {
        self.expected_gradient
            .get_or_init(|| self.contract(&self.field.expected_stress()))
    }

    /// Score `∂θ log p(φ)` of one configuration.
    pub fn score(&self, phi: &[f64]) -> Vec<f64> {
        let ds = self.action_gradient(&self.field.q_field(phi));
        self.expected_action_gradient()
            .iter()
            .zip(ds)
            .map(|(e, d)| e - d)
            .collect()
    }
}

/// Second moments of a batch: `Σᵢ φᵢ φᵢᵀ` and the count.
#[derive(Debug, Clone)]
pub struct SampleStatistics {
    count: usize,
    sites: usize,
    scatter: DMatrix<f64>,
}

impl SampleStatistics {
    pub fn from_samples(samples: &[FieldSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one sample is required".into()))?;
        let n = first.len();
        let mut scatter = DMatrix::zeros(n, n);
        for s in samples {
            if s.len() != n {
                return Err(Error::SizeMismatch {
                    what: "field sample",
                    expected: n,
                    actual: s.len(),
                });
            }
            let v = s.values();
            for j in 0..n {
                for i in 0..n {
                    scatter[(i, j)] += v[i] * v[j];
                }
            }
        }
        Ok(Self {
            count: samples.len(),
            sites: n,
            scatter,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    /// Batch sum `Σᵢ Q(φᵢ)` per site.
    pub fn summed_q(&self, metric: &MetricField) -> Vec<Matrix2<f64>> {
        quadratic_field(metric.geometry(), |i, j| self.scatter[(i, j)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Constraint {
    None,
    FixedVolume { target: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    /// Convergence when the projected gradient norm is below
    /// `tolerance × sample count`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial: Option<Vec<f64>>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 10_000,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleProblem {
    chart: MetricChart,
    stats: SampleStatistics,
    constraint: Constraint,
    settings: FitSettings,
}

impl MleProblem {
    pub fn new(chart: MetricChart, samples: &[FieldSample], constraint: Constraint, settings: FitSettings) -> Result<Self> {
        let stats = SampleStatistics::from_samples(samples)?;
        Self::from_statistics(chart, stats, constraint, settings)
    }

    pub fn from_statistics(
        chart: MetricChart,
        stats: SampleStatistics,
        constraint: Constraint,
        settings: FitSettings,
    ) -> Result<Self> {
        let n = chart.geometry().site_count();
        if stats.sites != n {
            return Err(Error::SizeMismatch {
                what: "field sample",
                expected: n,
                actual: stats.sites,
            });
        }
        if !(settings.tolerance > 0.0) || settings.max_iterations == 0 {
            return Err(Error::InvalidArgument("tolerance and max_iterations must be positive".into()));
        }
        if let Some(init) = &settings.initial {
            if !chart.contains(init) {
                return Err(Error::ChartOutOfRange(format!("initial point {init:?}")));
            }
        }
        let problem = Self {
            chart,
            stats,
            constraint,
            settings,
        };
        if let Constraint::FixedVolume { target } = constraint {
            if !(target > 0.0) {
                return Err(Error::InvalidArgument(format!("volume target {target} must be positive")));
            }
            problem
                .project(&problem.initial_point())
                .map_err(|e| e.context("volume target not reachable inside the chart box"))?;
        }
        Ok(problem)
    }

    pub fn chart(&self) -> &MetricChart {
        &self.chart
    }

    pub fn statistics(&self) -> &SampleStatistics {
        &self.stats
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn settings(&self) -> &FitSettings {
        &self.settings
    }

    fn initial_point(&self) -> Vec<f64> {
        self.settings.initial.clone().unwrap_or_else(|| {
            self.chart
                .bounds()
                .iter()
                .map(|&(lo, hi)| 0f64.clamp(lo, hi))
                .collect()
        })
    }

    /// Map `theta` onto the constraint surface.
    pub fn project(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let target = match self.constraint {
            Constraint::None => return Ok(theta.to_vec()),
            Constraint::FixedVolume { target } => target,
        };
        let mut t = theta.to_vec();
        if let Some((i, v)) = self.chart.uniform_conformal_direction() {
            // A uniform ω shift scales the volume by e^{d·v·Δθ}.
            let vol = self.chart.metric(&t)?.volume();
            let d = self.chart.geometry().dim() as f64;
            t[i] += (target / vol).ln() / (d * v);
            self.chart.metric(&t)?;
            return Ok(t);
        }
        for _ in 0..100 {
            let metric = self.chart.metric(&t)?;
            let vol = metric.volume();
            if (vol - target).abs() <= 1e-14 * target {
                return Ok(t);
            }
            let grad = self.chart.volume_gradient(&metric);
            let norm2: f64 = grad.iter().map(|g| g * g).sum();
            if norm2 == 0.0 {
                break;
            }
            let step = (target - vol) / norm2;
            for (ti, gi) in t.iter_mut().zip(&grad) {
                *ti += step * gi;
            }
        }
        let vol = self.chart.metric(&t)?.volume();
        if (vol - target).abs() <= 1e-12 * target {
            Ok(t)
        } else {
            Err(Error::ChartOutOfRange(format!(
                "volume projection stalled at {vol} (target {target})"
            )))
        }
    }
}

/// Value and gradient of `Σᵢ log p(φᵢ | θ)`.
#[derive(Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub point: ChartPoint,
}

pub fn evaluate(theta: &[f64], problem: &MleProblem) -> Result<Evaluation> {
    let point = ChartPoint::new(&problem.chart, theta)?;
    let n = problem.stats.count as f64;
    let metric = point.metric();
    let q = problem.stats.summed_q(metric);
    let modes = point.field().mode_count() as f64;
    let value = -action_from_q(metric, &q) + n * (point.field().log_partition() - 0.5 * modes * (2.0 * PI).ln());
    let gradient = point
        .action_gradient(&q)
        .iter()
        .zip(point.expected_action_gradient())
        .map(|(ds, e)| n * e - ds)
        .collect();
    Ok(Evaluation { value, gradient, point })
}

pub fn total_log_likelihood(theta: &[f64], problem: &MleProblem) -> Result<(f64, Vec<f64>)> {
    let e = evaluate(theta, problem)?;
    Ok((e.value, e.gradient))
}

/// Split `gradient` into the multiplier along the volume gradient and the
/// tangential remainder.
fn decompose(problem: &MleProblem, metric: &MetricField, gradient: &[f64]) -> (f64, Vec<f64>) {
    match problem.constraint {
        Constraint::None => (0.0, gradient.to_vec()),
        Constraint::FixedVolume { .. } => {
            let nv = problem.chart.volume_gradient(metric);
            let nn: f64 = nv.iter().map(|v| v * v).sum();
            let delta = gradient.iter().zip(&nv).map(|(g, v)| g * v).sum::<f64>() / nn;
            (delta, gradient.iter().zip(&nv).map(|(g, v)| g - delta * v).collect())
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta: Vec<f64>,
    pub log_lik: f64,
    /// Norm of the projected gradient at `theta`.
    pub gradient_norm: f64,
    /// Volume-constraint multiplier; zero without a constraint.
    pub lagrange_multiplier: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stationarity_residual: f64,
}

/// Projected gradient ascent with backtracking.
pub fn fit(problem: &MleProblem) -> Result<MleResult> {
    let n = problem.stats.count as f64;
    let threshold = problem.settings.tolerance * n;
    let mut theta = problem.project(&problem.initial_point())?;
    let mut current = evaluate(&theta, problem)?;
    let (mut delta, mut p) = decompose(problem, current.point.metric(), &current.gradient);
    let sites = problem.chart.geometry().site_count() as f64;
    let mut alpha = 1.0 / (n * sites);
    let mut iterations = 0;
    let mut converged = norm(&p) < threshold;
    while !converged && iterations < problem.settings.max_iterations {
        iterations += 1;
        let pn2: f64 = p.iter().map(|v| v * v).sum();
        let mut accepted = None;
        for _ in 0..200 {
            let trial: Vec<f64> = theta.iter().zip(&p).map(|(t, d)| t + alpha * d).collect();
            let candidate = if problem.chart.contains(&trial) {
                problem.project(&trial).and_then(|t| evaluate(&t, problem).map(|e| (t, e)))
            } else {
                Err(Error::ChartOutOfRange(String::new()))
            };
            if let Ok((t, e)) = candidate {
                let (d2, p2) = decompose(problem, e.point.metric(), &e.gradient);
                let gain = e.value - current.value;
                // Near the optimum the value change drowns in rounding;
                // fall back to gradient decrease.
                let ok = if gain.abs() > 1e-12 * current.value.abs().max(1.0) {
                    gain >= 1e-4 * alpha * pn2
                } else {
                    norm(&p2) < norm(&p)
                };
                if ok {
                    accepted = Some((t, e, d2, p2));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((t, e, d2, p2)) => {
                theta = t;
                current = e;
                delta = d2;
                p = p2;
                alpha *= 2.0;
                converged = norm(&p) < threshold;
            }
            None => break,
        }
    }
    let gradient_norm = norm(&p);
    Ok(MleResult {
        theta,
        log_lik: current.value,
        gradient_norm,
        lagrange_multiplier: delta,
        iterations,
        converged,
        stationarity_residual: gradient_norm,
    })
}

/// Per-site balance residual `T̄ − ⟨T⟩ + (δ₁/n) g_{μν}` and its chart
/// projection, which equals the projected gradient.
#[derive(Debug, Clone)]
pub struct StationarityCertificate {
    pub theta: Vec<f64>,
    pub lagrange_multiplier: f64,
    pub site_residual: Vec<Matrix2<f64>>,
    pub chart_residual: Vec<f64>,
    pub norm: f64,
}

pub fn certificate_at(problem: &MleProblem, theta: &[f64]) -> Result<StationarityCertificate> {
    let e = evaluate(theta, problem)?;
    let metric = e.point.metric();
    let (delta, _) = decompose(problem, metric, &e.gradient);
    let n = problem.stats.count as f64;
    let d = metric.geometry().dim();
    let mean_q: Vec<Matrix2<f64>> = problem.stats.summed_q(metric).iter().map(|q| q / n).collect();
    let mean_t = stress_from_q(metric, &mean_q);
    let expected_t = e.point.field().expected_stress();
    let site_residual: Vec<Matrix2<f64>> = (0..mean_t.len())
        .map(|x| mean_t[x] - expected_t[x] + block(&metric.lower(x), d) * (delta / n))
        .collect();
    let chart_residual: Vec<f64> = e.point.contract(&site_residual).iter().map(|c| -n * c).collect();
    let norm = norm(&chart_residual);
    Ok(StationarityCertificate {
        theta: theta.to_vec(),
        lagrange_multiplier: delta,
        site_residual,
        chart_residual,
        norm,
    })
}

pub fn stationarity_certificate(result: &MleResult, problem: &MleProblem) -> Result<StationarityCertificate> {
    certificate_at(problem, &result.theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sample_count: usize,
    pub replica: usize,
    pub converged: bool,
    pub error_norm: f64,
    pub log_lik: f64,
    pub iterations: usize,
    pub signed_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sample_count: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    /// OLS slope of log mean error against log sample count.
    pub slope: f64,
    /// Fraction of replicas whose error at the largest count is below the
    /// error at the smallest count.
    pub paired_improvement: f64,
    /// Per-component mean signed error and its standard error at the
    /// largest count.
    pub bias: Vec<f64>,
    pub bias_se: Vec<f64>,
}

/// Fit `replicas` fresh batches for every sample count. Replica `r` at
/// count `N` draws from stream `(seed, r, "consistency/N")`.
pub fn consistency_sweep(
    chart: &MetricChart,
    theta0: &[f64],
    sample_counts: &[usize],
    replicas: usize,
    seed: u64,
    settings: &FitSettings,
) -> Result<SweepReport> {
    if sample_counts.len() < 2 || sample_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sample counts must be increasing with at least two entries".into()));
    }
    if replicas < 2 {
        return Err(Error::InvalidArgument("need at least two replicas".into()));
    }
    let truth = GaussianField::new(&chart.metric(theta0)?)?;
    let mut rows = Vec::new();
    for &count in sample_counts {
        for replica in 0..replicas {
            let mut rng = stream_for(seed, replica as u64, &format!("consistency/{count}"));
            let samples = truth.sample_many(count, &mut rng);
            let problem = MleProblem::new(chart.clone(), &samples, Constraint::None, settings.clone())?;
            let r = fit(&problem)?;
            let signed: Vec<f64> = r.theta.iter().zip(theta0).map(|(a, b)| a - b).collect();
            rows.push(SweepRow {
                sample_count: count,
                replica,
                converged: r.converged,
                error_norm: norm(&signed),
                log_lik: r.log_lik,
                iterations: r.iterations,
                signed_error: signed,
            });
        }
    }
    let summary: Vec<SweepSummary> = sample_counts
        .iter()
        .map(|&count| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.sample_count == count && r.converged)
                .map(|r| r.error_norm)
                .collect();
            let used = errs.len();
            SweepSummary {
                sample_count: count,
                mean_error: if used > 0 { stats::mean(&errs) } else { f64::NAN },
                sd_error: if used > 1 { stats::std_dev(&errs) } else { f64::NAN },
                used,
                excluded: replicas - used,
            }
        })
        .collect();
    let lx: Vec<f64> = summary.iter().map(|s| (s.sample_count as f64).ln()).collect();
    let ly: Vec<f64> = summary.iter().map(|s| s.mean_error.ln()).collect();
    let (slope, _) = stats::ols(&lx, &ly);
    let (first, last) = (sample_counts[0], *sample_counts.last().unwrap());
    let find = |count: usize, replica: usize| {
        rows.iter()
            .find(|r| r.sample_count == count && r.replica == replica && r.converged)
    };
    let mut pairs = 0;
    let mut better = 0;
    for replica in 0..replicas {
        if let (Some(a), Some(b)) = (find(first, replica), find(last, replica)) {
            pairs += 1;
            if b.error_norm < a.error_norm {
                better += 1;
            }
        }
    }
    let k = theta0.len();
    let last_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.sample_count == last && r.converged).collect();
    let bias: Vec<f64> = (0..k)
        .map(|i| stats::mean(&last_rows.iter().map(|r| r.signed_error[i]).collect::<Vec<_>>()))
        .collect();
    let bias_se: Vec<f64> = (0..k)
        .map(|i| stats::std_error(&last_rows.iter().map(|r| r.signed_error[i]).collect::<Vec<_>>()))
        .collect();
    Ok(SweepReport {
        rows,
        summary,
        slope,
        paired_improvement: better as f64 / pairs.max(1) as f64,
        bias,
        bias_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Component, DirectionSpec, LatticeGeometry, Phase};

    fn scale_chart(n: usize) -> MetricChart {
        MetricChart::from_specs(
            MetricField::flat(&LatticeGeometry::ring(n, 1.0).unwrap()),
            &[DirectionSpec::Constant { component: None, scale: 2.0 }],
            -2.0,
            2.0,
        )
        .unwrap()
    }

    fn two_param_chart() -> MetricChart {
        MetricChart::from_specs(
            MetricField::flat(&LatticeGeometry::ring(8, 1.0).unwrap()),
            &[
                DirectionSpec::Constant { component: None, scale: 1.0 },
                DirectionSpec::Fourier { axis: 0, mode: 1, phase: Phase::Cos, component: None, scale: 1.0 },
            ],
            -1.0,
            1.0,
        )
        .unwrap()
    }

    fn full_chart() -> MetricChart {
        let g = LatticeGeometry::torus(4, 4, 1.0).unwrap();
        let base = MetricField::full_sym(&g, [1.0, 0.0, 1.0].repeat(16)).unwrap();
        MetricChart::from_specs(
            base,
            &[
                DirectionSpec::Constant { component: Some(Component::G11), scale: 1.0 },
                DirectionSpec::Constant { component: Some(Component::G12), scale: 1.0 },
            ],
            -0.5,
            0.5,
        )
        .unwrap()
    }

    fn draw(chart: &MetricChart, theta: &[f64], count: usize, seed: u64) -> Vec<FieldSample> {
        let f = GaussianField::new(&chart.metric(theta).unwrap()).unwrap();
        f.sample_many(count, &mut stream_for(seed, 0, "sampling"))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let chart = two_param_chart();
        let samples = draw(&chart, &[0.1, -0.2], 50, 1);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let theta = [0.05, 0.1];
        let (_, g) = total_log_likelihood(&theta, &problem).unwrap();
        for i in 0..2 {
            let h = 1e-5;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let fd = (total_log_likelihood(&tp, &problem).unwrap().0 - total_log_likelihood(&tm, &problem).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn full_metric_gradient_matches_finite_differences() {
        let chart = full_chart();
        let samples = draw(&chart, &[0.2, 0.1], 50, 12);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let theta = [0.1, 0.05];
        let (_, g) = total_log_likelihood(&theta, &problem).unwrap();
        for i in 0..2 {
            let h = 1e-5;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let fd = (total_log_likelihood(&tp, &problem).unwrap().0 - total_log_likelihood(&tm, &problem).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn value_matches_per_sample_likelihood() {
        let chart = two_param_chart();
        let samples = draw(&chart, &[0.0, 0.0], 5, 2);
        let problem = MleProblem::new(chart.clone(), &samples, Constraint::None, FitSettings::default()).unwrap();
        let theta = [0.2, 0.3];
        let f = GaussianField::new(&chart.metric(&theta).unwrap()).unwrap();
        let direct: f64 = samples.iter().map(|s| f.log_likelihood(s.values())).sum();
        let (v, _) = total_log_likelihood(&theta, &problem).unwrap();
        assert!((v - direct).abs() < 1e-10 * direct.abs());
    }

    #[test]
    fn gradient_is_sum_of_scores() {
        let chart = two_param_chart();
        let samples = draw(&chart, &[0.0, 0.0], 7, 3);
        let problem = MleProblem::new(chart.clone(), &samples, Constraint::None, FitSettings::default()).unwrap();
        let theta = [0.1, 0.0];
        let point = ChartPoint::new(&chart, &theta).unwrap();
        let mut sum = [0.0; 2];
        for s in &samples {
            let sc = point.score(s.values());
            sum[0] += sc[0];
            sum[1] += sc[1];
        }
        let (_, g) = total_log_likelihood(&theta, &problem).unwrap();
        for i in 0..2 {
            assert!((sum[i] - g[i]).abs() < 1e-10 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn duplicating_samples_doubles_gradient() {
        let chart = two_param_chart();
        let samples = draw(&chart, &[0.0, 0.0], 9, 4);
        let doubled: Vec<FieldSample> = samples.iter().chain(&samples).cloned().collect();
        let p1 = MleProblem::new(chart.clone(), &samples, Constraint::None, FitSettings::default()).unwrap();
        let p2 = MleProblem::new(chart, &doubled, Constraint::None, FitSettings::default()).unwrap();
        let theta = [0.3, -0.1];
        let (v1, g1) = total_log_likelihood(&theta, &p1).unwrap();
        let (v2, g2) = total_log_likelihood(&theta, &p2).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-12 * v1.abs());
        for i in 0..2 {
            assert!((g2[i] - 2.0 * g1[i]).abs() < 1e-12 * g1[i].abs().max(1.0));
        }
    }

    #[test]
    fn gradient_at_truth_is_within_statistical_bound() {
        let chart = scale_chart(8);
        let samples = draw(&chart, &[0.0], 10_000, 5);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let (_, g) = total_log_likelihood(&[0.0], &problem).unwrap();
        // F = 2(N − 1) = 14 for this chart.
        assert!(g[0].abs() < 4.0 * (10_000.0f64 * 14.0).sqrt());
    }

    #[test]
    fn fit_recovers_origin_with_many_samples() {
        let chart = scale_chart(8);
        let samples = draw(&chart, &[0.0], 4096, 6);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let r = fit(&problem).unwrap();
        assert!(r.converged);
        assert!(r.theta[0].abs() < 0.05, "theta = {}", r.theta[0]);
        assert_eq!(r.lagrange_multiplier, 0.0);
    }

    #[test]
    fn single_sample_fit_matches_closed_form() {
        // L(θ) = e^{-2θ} L₀ so the stationarity equation gives
        // θ̂ = ½ log(φᵀL₀φ / (N − 1)).
        let chart = scale_chart(8);
        let samples = draw(&chart, &[0.3], 1, 7);
        let f0 = GaussianField::new(chart.base()).unwrap();
        let q0 = 2.0 * f0.action(samples[0].values());
        let closed = 0.5 * (q0 / 7.0).ln();
        let settings = FitSettings { tolerance: 1e-10, ..FitSettings::default() };
        let problem = MleProblem::new(chart, &samples, Constraint::None, settings).unwrap();
        let r = fit(&problem).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.theta[0] - closed).abs() < 1e-8, "{} vs {closed}", r.theta[0]);
    }

    #[test]
    fn fixed_volume_is_exact_and_certificate_matches_gradient() {
        let chart = two_param_chart();
        let theta0 = [0.1, 0.2];
        let target = chart.metric(&theta0).unwrap().volume();
        let samples = draw(&chart, &theta0, 400, 8);
        let problem = MleProblem::new(chart.clone(), &samples, Constraint::FixedVolume { target }, FitSettings::default()).unwrap();
        let r = fit(&problem).unwrap();
        assert!(r.converged);
        let vol = chart.metric(&r.theta).unwrap().volume();
        assert!((vol - target).abs() < 1e-10 * target);
        let cert = stationarity_certificate(&r, &problem).unwrap();
        assert!(cert.norm < 1e-6 * 400.0);
        assert!((cert.norm - r.gradient_norm).abs() < 1e-9 * 400.0);
        assert!(r.lagrange_multiplier != 0.0);
    }

    #[test]
    fn constrained_uniform_component_is_sample_independent() {
        let chart = scale_chart(8);
        let target = 8.0 * (0.4f64).exp();
        let mut fitted = Vec::new();
        for seed in [1, 2] {
            let samples = draw(&chart, &[0.0], 30, seed);
            let problem = MleProblem::new(chart.clone(), &samples, Constraint::FixedVolume { target }, FitSettings::default()).unwrap();
            let r = fit(&problem).unwrap();
            assert!(r.converged);
            fitted.push(r.theta[0]);
        }
        assert!((fitted[0] - 0.2).abs() < 1e-12 && (fitted[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn certificate_is_larger_away_from_optimum() {
        let chart = scale_chart(8);
        let samples = draw(&chart, &[0.0], 200, 9);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let r = fit(&problem).unwrap();
        let at_fit = stationarity_certificate(&r, &problem).unwrap();
        assert_eq!(at_fit.lagrange_multiplier, 0.0);
        for off in [-0.1, 0.1] {
            let other = certificate_at(&problem, &[r.theta[0] + off]).unwrap();
            assert!(other.norm > at_fit.norm);
        }
    }

    #[test]
    fn rescaling_a_direction_rescales_the_estimate() {
        let chart = two_param_chart();
        let samples = draw(&chart, &[0.1, -0.1], 300, 10);
        let settings = FitSettings { tolerance: 1e-10, ..FitSettings::default() };
        let p1 = MleProblem::new(chart.clone(), &samples, Constraint::None, settings.clone()).unwrap();
        let p2 = MleProblem::new(chart.rescaled(1, 2.0).unwrap(), &samples, Constraint::None, settings).unwrap();
        let (r1, r2) = (fit(&p1).unwrap(), fit(&p2).unwrap());
        assert!((r2.theta[1] - r1.theta[1] / 2.0).abs() < 1e-8);
        assert!((r2.theta[0] - r1.theta[0]).abs() < 1e-8);
    }

    #[test]
    fn fitted_likelihood_beats_truth() {
        let chart = two_param_chart();
        let theta0 = [0.0, 0.15];
        for seed in 0..5 {
            let samples = draw(&chart, &theta0, 40, 100 + seed);
            let problem = MleProblem::new(chart.clone(), &samples, Constraint::None, FitSettings::default()).unwrap();
            let r = fit(&problem).unwrap();
            assert!(r.log_lik >= total_log_likelihood(&theta0, &problem).unwrap().0);
        }
    }

    #[test]
    fn full_metric_chart_fits() {
        let chart = full_chart();
        // F ≈ diag(0.56, 0.46) per sample here, so the standard error is 0.01.
        let samples = draw(&chart, &[0.2, 0.1], 20_000, 11);
        let problem = MleProblem::new(chart, &samples, Constraint::None, FitSettings::default()).unwrap();
        let r = fit(&problem).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.theta[0] - 0.2).abs() < 0.04 && (r.theta[1] - 0.1).abs() < 0.04, "{:?}", r.theta);
    }

    #[test]
    fn sweep_rejects_bad_counts() {
        let chart = scale_chart(8);
        assert!(consistency_sweep(&chart, &[0.0], &[64, 16], 4, 1, &FitSettings::default()).is_err());
    }
}
