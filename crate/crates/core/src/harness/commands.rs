//! One function per command: compute, collect artifacts, judge pass/fail.

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Command, ExperimentConfig, Setup};
use crate::decoherence::{effective_action, mc_integrate_out_oracle, FluctuationKernel};
use crate::error::{Error, Result};
use crate::estimator::{consistency_sweep, fit, stationarity_certificate, FitSettings, MleProblem};
use crate::field_model::GaussianField;
use crate::fisher_lab::{cramer_rao_check, fisher_analytic, fisher_monte_carlo, CramerRaoSettings};
use crate::prior_lab::{build_channel, jeffreys_prior, reference_prior_fixed_point, ChannelSpec};
use crate::rng::{stream_for, StreamRecord};
use crate::spectral::{heat_trace, seeley_dewitt_fit};
use crate::stats;

/// Everything a command produces before it is written to disk.
#[derive(Debug)]
pub struct CommandOutput {
    pub payload: Value,
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub streams: Vec<StreamRecord>,
    pub passed: bool,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn fit_settings(tolerance: f64, max_iterations: usize) -> FitSettings {
    FitSettings {
        tolerance,
        max_iterations,
        initial: None,
    }
}

pub fn execute(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    match config.command {
        Command::Sample => sample(config, setup),
        Command::Fit => fit_command(config, setup),
        Command::Consistency => consistency(config, setup),
        Command::Fisher => fisher(config, setup),
        Command::CramerRao => cramer_rao(config, setup),
        Command::RefPrior => ref_prior(config, setup),
        Command::HeatTrace => heat_trace_command(config, setup),
        Command::SdFit => sd_fit(config, setup),
        Command::Decohere => decohere(config, setup),
    }
}

fn sample(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let count = config.sample.as_ref().expect("validated").count;
    let metric = setup.truth()?;
    let field = GaussianField::new(&metric)?;
    let purpose = "sample";
    let samples = field.sample_many(count, &mut stream_for(config.seed, 0, purpose));
    let header: Vec<String> = (0..metric.geometry().site_count()).map(|i| i.to_string()).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv = csv_bytes(
        &header_refs,
        samples.iter().map(|s| s.values().iter().map(|v| v.to_string()).collect()),
    )?;
    let values: Vec<&[f64]> = samples.iter().map(|s| s.values()).collect();
    let doc = json!({
        "metric_hash": metric.content_hash(),
        "seed": config.seed,
        "count": count,
        "samples": values,
    });
    let payload = json!({
        "metric_hash": metric.content_hash(),
        "count": count,
        "sites": metric.geometry().site_count(),
        "action_mean": stats::mean(&samples.iter().map(|s| field.action(s.values())).collect::<Vec<_>>()),
    });
    Ok(CommandOutput {
        payload,
        artifacts: vec![
            ("samples.csv".into(), csv),
            ("samples.json".into(), json_bytes(&doc)?),
            ("metric.json".into(), (metric.to_json()? + "\n").into_bytes()),
        ],
        streams: vec![StreamRecord::new(config.seed, purpose, 1)],
        passed: true,
    })
}

fn fit_command(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let f = config.fit.as_ref().expect("validated");
    let chart = setup.chart()?;
    let purpose = "fit/sampling";
    let truth = GaussianField::new(&setup.truth()?)?;
    let samples = truth.sample_many(f.samples, &mut stream_for(config.seed, 0, purpose));
    let problem = MleProblem::new(chart.clone(), &samples, f.constraint, fit_settings(f.tolerance, f.max_iterations))?;
    let result = fit(&problem)?;
    let cert = stationarity_certificate(&result, &problem)?;
    let payload = json!({
        "theta0": setup.theta0,
        "result": result,
        "certificateNorm": cert.norm,
        "chartResidual": cert.chart_residual,
    });
    Ok(CommandOutput {
        artifacts: vec![("fit.json".into(), json_bytes(&payload)?)],
        payload,
        streams: vec![StreamRecord::new(config.seed, purpose, 1)],
        passed: result.converged,
    })
}

fn consistency(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let c = config.consistency.as_ref().expect("validated");
    let chart = setup.chart()?;
    let report = consistency_sweep(
        chart,
        &setup.theta0,
        &c.counts,
        c.replicas,
        config.seed,
        &fit_settings(c.tolerance, c.max_iterations),
    )?;
    let csv = csv_bytes(
        &["sampleCount", "replica", "converged", "errorNorm", "logLik", "iterations"],
        report.rows.iter().map(|r| {
            vec![
                r.sample_count.to_string(),
                r.replica.to_string(),
                r.converged.to_string(),
                r.error_norm.to_string(),
                r.log_lik.to_string(),
                r.iterations.to_string(),
            ]
        }),
    )?;
    let passed = (report.slope - c.slope_target).abs() <= c.slope_tolerance;
    let payload = json!({
        "summary": report.summary,
        "slope": report.slope,
        "slopeTarget": c.slope_target,
        "slopeTolerance": c.slope_tolerance,
        "pairedImprovement": report.paired_improvement,
        "bias": report.bias,
        "biasSe": report.bias_se,
    });
    Ok(CommandOutput {
        artifacts: vec![("sweep.csv".into(), csv), ("consistency.json".into(), json_bytes(&payload)?)],
        payload,
        streams: c
            .counts
            .iter()
            .map(|n| StreamRecord::new(config.seed, &format!("consistency/{n}"), c.replicas as u64))
            .collect(),
        passed,
    })
}

fn fisher(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let f = config.fisher.as_ref().expect("validated");
    let chart = setup.chart()?;
    let analytic = fisher_analytic(chart, &setup.theta0)?;
    let mut payload = json!({
        "theta0": setup.theta0,
        "fisher": analytic.to_rows(),
        "eigenvalues": analytic.eigenvalues(),
        "rank": analytic.rank(),
    });
    let mut streams = Vec::new();
    let mut passed = true;
    if f.mc_samples > 0 {
        let purpose = "fisher/monte-carlo";
        let mc = fisher_monte_carlo(chart, &setup.theta0, f.mc_samples, &mut stream_for(config.seed, 0, purpose))?;
        let rel = (mc.fisher.matrix() - analytic.matrix()).norm() / analytic.matrix().norm();
        passed = rel < f.rel_tolerance;
        payload["monteCarlo"] = json!({
            "samples": mc.samples,
            "fisher": mc.fisher.to_rows(),
            "scoreMean": mc.score_mean,
            "scoreMeanSe": mc.score_mean_se,
            "relFrobeniusError": rel,
            "relTolerance": f.rel_tolerance,
        });
        streams.push(StreamRecord::new(config.seed, purpose, 1));
    }
    Ok(CommandOutput {
        artifacts: vec![("fisher.json".into(), json_bytes(&payload)?)],
        payload,
        streams,
        passed,
    })
}

fn cramer_rao(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let c = config.cramer_rao.as_ref().expect("validated");
    let chart = setup.chart()?;
    let settings = CramerRaoSettings {
        samples_per_fit: c.samples_per_fit,
        replicas: c.replicas,
        bootstrap: c.bootstrap,
        fit: fit_settings(c.tolerance, c.max_iterations),
    };
    let report = cramer_rao_check(chart, &setup.theta0, &settings, config.seed)?;
    let [lo, hi] = c.efficiency_range;
    let efficiency_ok = report.efficiency.iter().all(|e| (lo..=hi).contains(e));
    let chain_ok = report.component_bounds.iter().all(|b| b.statistical_link && b.algebraic_link);
    let passed = efficiency_ok && chain_ok && report.matrix_bound_pass;
    let k = setup.theta0.len();
    let header: Vec<String> = (0..k).map(|i| format!("theta{i}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv = csv_bytes(
        &header_refs,
        report.theta_hats.iter().map(|t| t.iter().map(|v| v.to_string()).collect()),
    )?;
    let mut payload = serde_json::to_value(&report)?;
    if let Value::Object(map) = &mut payload {
        map.remove("theta_hats");
        map.insert("efficiencyRange".into(), json!(c.efficiency_range));
        map.insert("efficiencyPass".into(), json!(efficiency_ok));
        map.insert("componentChainPass".into(), json!(chain_ok));
    }
    Ok(CommandOutput {
        artifacts: vec![("theta_hats.csv".into(), csv), ("cramer_rao.json".into(), json_bytes(&payload)?)],
        payload,
        streams: vec![
            StreamRecord::new(config.seed, "cramer-rao/sampling", c.replicas as u64),
            StreamRecord::new(config.seed, "cramer-rao/bootstrap", 1),
        ],
        passed,
    })
}

fn ref_prior(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let r = config.ref_prior.as_ref().expect("validated");
    let chart = setup.chart()?;
    let (lo, hi) = chart.bounds()[0];
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    let mut monotone = true;
    let mut tvs = Vec::new();
    for &n_obs in &r.n_obs {
        let channel = build_channel(
            chart,
            &ChannelSpec {
                theta_lo: lo,
                theta_hi: hi,
                grid: r.grid,
                n_obs,
                bins: r.bins,
                stat_range: None,
            },
        )?;
        let result = reference_prior_fixed_point(&channel, r.max_iter, r.tol)?;
        let jeffreys = jeffreys_prior(chart, channel.theta())?;
        let tv = stats::total_variation(&result.prior.weights, &jeffreys.prior.weights);
        let mi_monotone = result.mi_history.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        monotone &= mi_monotone;
        tvs.push(tv);
        artifacts.push((
            format!("prior_nobs{n_obs}.csv"),
            csv_bytes(
                &["theta", "weight", "jeffreys"],
                channel
                    .theta()
                    .iter()
                    .zip(&result.prior.weights)
                    .zip(&jeffreys.prior.weights)
                    .map(|((t, w), j)| vec![t.to_string(), w.to_string(), j.to_string()]),
            )?,
        ));
        runs.push(json!({
            "nObs": n_obs,
            "mutualInformation": result.mutual_information,
            "iterations": result.iterations,
            "tvToJeffreys": tv,
            "residual": result.residual,
            "miMonotone": mi_monotone,
            "kappa": channel.kappa(),
            "minCoverage": channel.min_coverage(),
            "warnings": jeffreys.warnings,
        }));
    }
    let decreasing = tvs.windows(2).all(|w| w[1] < w[0]);
    let last_ok = tvs.last().is_some_and(|t| *t < r.tv_threshold);
    let payload = json!({
        "runs": runs,
        "tvDecreasing": decreasing,
        "tvThreshold": r.tv_threshold,
        "miMonotone": monotone,
    });
    artifacts.push(("ref_prior.json".into(), json_bytes(&payload)?));
    Ok(CommandOutput {
        payload,
        artifacts,
        streams: Vec::new(),
        passed: monotone && decreasing && last_ok,
    })
}

fn heat_trace_command(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let h = config.heat_trace.as_ref().expect("validated");
    let grid: Vec<f64> = (0..h.points)
        .map(|i| h.s_min * (h.s_max / h.s_min).powf(i as f64 / (h.points - 1) as f64))
        .collect();
    let metric = setup.truth()?;
    let curve = heat_trace(&metric, &grid, h.include_zero_mode)?;
    let csv = csv_bytes(
        &["s", "trace"],
        curve.s.iter().zip(&curve.trace).map(|(s, t)| vec![s.to_string(), t.to_string()]),
    )?;
    let payload = json!({
        "metric_hash": metric.content_hash(),
        "points": h.points,
        "includeZeroMode": h.include_zero_mode,
        "decreasing": curve.trace.windows(2).all(|w| w[1] < w[0]),
    });
    Ok(CommandOutput {
        artifacts: vec![("heat_trace.csv".into(), csv), ("heat_trace.json".into(), json_bytes(&payload)?)],
        passed: payload["decreasing"].as_bool().unwrap_or(false),
        payload,
        streams: Vec::new(),
    })
}

fn sd_fit(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let s = config.sd_fit.as_ref().expect("validated");
    let metric = setup.truth()?;
    let fit = seeley_dewitt_fit(&metric, s.window.map(|[a, b]| (a, b)))?;
    let volume_ok = (fit.b0_est - 1.0).abs() < s.volume_tolerance;
    let curvature_ok = fit.max_rel_err.is_none_or(|e| e < s.curvature_tolerance);
    let csv = csv_bytes(
        &["site", "beta", "R_over_6"],
        fit.beta.iter().enumerate().map(|(x, b)| {
            let r = fit.r_over_6.as_ref().map_or(String::new(), |r| r[x].to_string());
            vec![x.to_string(), b.to_string(), r]
        }),
    )?;
    let mut payload = serde_json::to_value(&fit)?;
    if let Value::Object(map) = &mut payload {
        map.insert("volumePass".into(), json!(volume_ok));
        map.insert("curvaturePass".into(), json!(curvature_ok));
    }
    Ok(CommandOutput {
        artifacts: vec![("beta.csv".into(), csv), ("sd_fit.json".into(), json_bytes(&payload)?)],
        payload,
        streams: Vec::new(),
        passed: volume_ok && curvature_ok,
    })
}

fn decohere(config: &ExperimentConfig, setup: &Setup) -> Result<CommandOutput> {
    let d = config.decohere.as_ref().expect("validated");
    let geom = &setup.geometry;
    let kernel = FluctuationKernel::build(&d.kernel, geom, setup.chart.as_ref())?;
    let field_purpose = "decohere/field";
    let flat = GaussianField::new(&setup.base)?;
    let phi = flat.sample(&mut stream_for(config.seed, 0, field_purpose));
    let closed = effective_action(geom, phi.values(), &kernel, d.coupling)?;
    let mut payload = json!({
        "S0": closed.s0,
        "Squartic": closed.s_quartic,
        "Seff": closed.s_eff,
        "kernelSpec": d.kernel,
        "coupling": d.coupling,
        "prefactor": -0.125,
    });
    let mut streams = vec![StreamRecord::new(config.seed, field_purpose, 1)];
    let mut passed = true;
    if d.draws > 0 {
        let purpose = "decohere/oracle";
        let eps = match d.amplitude {
            Some(e) => e,
            None if closed.s_quartic < 0.0 => 0.3 / (-2.0 * closed.s_quartic).sqrt(),
            None => 1.0,
        };
        let est = mc_integrate_out_oracle(
            geom,
            phi.values(),
            &kernel,
            d.coupling,
            d.draws,
            eps,
            &mut stream_for(config.seed, 0, purpose),
        )?;
        let rel = ((est.coefficient - closed.s_quartic) / closed.s_quartic).abs();
        passed = rel < d.rel_tolerance;
        payload["oracleCoefficient"] = json!(est.coefficient);
        payload["mcError"] = json!(est.standard_error);
        payload["relErr"] = json!(rel);
        payload["relTolerance"] = json!(d.rel_tolerance);
        payload["amplitude"] = json!(eps);
        payload["draws"] = json!(est.draws);
        payload["oddMoment"] = json!(est.odd_moment);
        payload["oddMomentSe"] = json!(est.odd_moment_se);
        streams.push(StreamRecord::new(config.seed, purpose, 1));
    }
    Ok(CommandOutput {
        artifacts: vec![("decoherence.json".into(), json_bytes(&payload)?)],
        payload,
        streams,
        passed,
    })
}
