//! Experiment recipes: averaging convergence sweeps, rate/probe tables,
//! frozen mixing and Picard diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentKind, GridCell, RunConfig};
use crate::averaging::{
    estimate_invariant, mixing_decay_fit, weighted_ols, AveragedDrift, AveragedMode, AveragedSystem, DriftSource,
};
use crate::error::{Error, Result};
use crate::ldp::{averaged_baseline, rare_event_probe, rate_function, ProbeRow, RateTarget};
use crate::linalg::dist_sq;
use crate::measure::ParticleCloud;
use crate::model::{check_assumptions, AssumptionReport, BuiltModel, DomainSampler, DEFAULT_PAIR_SAMPLES};
use crate::rng::{derive_seed, family_id, StreamRole};
use crate::sde_engine::{picard_solve, step_streams, SimConfig, SlowFastEnsemble};

/// Samples the assumption constants in a box around the initial state.
pub fn assumption_report(built: &BuiltModel, sim: &SimConfig) -> Result<AssumptionReport> {
    let sampler = DomainSampler::around(&sim.x0, &sim.y0, 3.0, sim.seed);
    check_assumptions(&built.coeffs, &sampler, DEFAULT_PAIR_SAMPLES)
}

/// The analytic average when the model has one, otherwise a cached estimator.
pub fn drift_source(built: &BuiltModel, cfg: &RunConfig) -> Result<DriftSource> {
    if let Some(d) = DriftSource::analytic_from(&built.coeffs) {
        return Ok(d);
    }
    let sampler = DomainSampler::around(&cfg.sim.x0, &cfg.sim.y0, 3.0, cfg.sim.seed);
    let drift = AveragedDrift::new(
        built.coeffs.clone(),
        built.a2.clone(),
        cfg.experiment.averaging.clone(),
        &sampler,
    )?;
    Ok(DriftSource::Estimated(Arc::new(drift)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub delta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub dt: f64,
    pub n_mc: usize,
    /// Absent when the cell failed.
    pub err_mean: Option<f64>,
    pub err_stderr: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub gamma: f64,
    /// Absent when fewer than two positive errors are available.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
    pub points: usize,
    /// Absent with fewer than two successful cells.
    pub strictly_decreasing: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamAudit {
    pub repetition: usize,
    pub full_slow: String,
    /// Absent when the limit equation is noiseless.
    pub limit_slow: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ErrorRow>,
    pub fits: Vec<SlopeFit>,
    pub streams: Vec<StreamAudit>,
    pub macro_steps: u64,
}

fn repetition_seed(base: u64, rep: usize) -> u64 {
    derive_seed(base, &[rep as u64])
}

/// Mean over particles of `sup_n |X_n - Xbar_n|^2` for one repetition, with
/// the full and limit systems stepped in lockstep on shared slow streams.
fn repetition_error(
    built: &BuiltModel,
    drift: &DriftSource,
    sim: &SimConfig,
    mode: AveragedMode,
) -> Result<f64> {
    let BuiltModel { coeffs, a1, a2 } = built;
    let mut full = SlowFastEnsemble::initial(sim, a1)?;
    let mut limit = AveragedSystem::new(coeffs, a1, sim, mode)?;
    let n = full.len();
    let dx = full.dim_x();
    let mut sup = vec![0.0f64; n];
    for k in 0..sim.n_steps() {
        step_streams(&mut full, coeffs, a1, a2, sim, k)?;
        limit.step(drift, coeffs, a1, sim, k)?;
        for (i, s) in sup.iter_mut().enumerate() {
            *s = s.max(dist_sq(full.x(i), &limit.xs()[i * dx..(i + 1) * dx]));
        }
    }
    Ok(sup.iter().sum::<f64>() / n as f64)
}

fn is_cell_failure(e: &Error) -> bool {
    match e {
        Error::Divergence { .. } | Error::Numerical { .. } => true,
        Error::Step { source, .. } => is_cell_failure(source),
        _ => false,
    }
}

/// Least-squares slope of `log err` against `log delta` per gamma, with the
/// smallest delta at half weight when its standard error exceeds 20% of it.
pub fn fit_slopes(rows: &[ErrorRow]) -> Vec<SlopeFit> {
    let mut gammas: Vec<f64> = Vec::new();
    for r in rows {
        if !gammas.contains(&r.gamma) {
            gammas.push(r.gamma);
        }
    }
    gammas
        .into_iter()
        .map(|gamma| {
            let mut ok: Vec<&ErrorRow> = rows.iter().filter(|r| r.gamma == gamma && r.err_mean.is_some()).collect();
            ok.sort_by(|a, b| b.delta.total_cmp(&a.delta));
            let strictly_decreasing = (ok.len() >= 2).then(|| {
                ok.windows(2).all(|w| {
                    let (e0, s0) = (w[0].err_mean.unwrap(), w[0].err_stderr.unwrap_or(0.0));
                    let (e1, s1) = (w[1].err_mean.unwrap(), w[1].err_stderr.unwrap_or(0.0));
                    e0 - e1 > 2.0 * (s0 * s0 + s1 * s1).sqrt()
                })
            });
            let pos: Vec<&&ErrorRow> = ok.iter().filter(|r| r.err_mean.unwrap() > 0.0).collect();
            let mut fit = SlopeFit {
                gamma,
                slope: None,
                intercept: None,
                r2: None,
                points: pos.len(),
                strictly_decreasing,
            };
            if pos.len() >= 2 {
                let x: Vec<f64> = pos.iter().map(|r| r.delta.ln()).collect();
                let y: Vec<f64> = pos.iter().map(|r| r.err_mean.unwrap().ln()).collect();
                let mut w = vec![1.0; pos.len()];
                let last = pos[pos.len() - 1];
                if last.err_stderr.unwrap_or(0.0) > 0.2 * last.err_mean.unwrap() {
                    w[pos.len() - 1] = 0.5;
                }
                let (slope, intercept, r2) = weighted_ols(&x, &y, &w);
                fit.slope = Some(slope);
                fit.intercept = Some(intercept);
                fit.r2 = Some(r2);
            }
            fit
        })
        .collect()
}

/// Strong-error sweep of the full system against its averaged limit.
pub fn run_convergence_experiment(cfg: &RunConfig) -> Result<ConvergenceReport> {
    let mode = match cfg.experiment.kind {
        ExperimentKind::AvgThetaPos => AveragedMode::ThetaPositive,
        ExperimentKind::AvgThetaZero => AveragedMode::ThetaZero,
        k => return Err(Error::Config(format!("{k:?} is not a convergence experiment"))),
    };
    let built = cfg.build_model()?;
    assumption_report(&built, &cfg.sim)?.require_dissipative()?;
    let drift = drift_source(&built, cfg)?;
    let cells: Vec<GridCell> = cfg.cells()?;
    let reps = cfg.experiment.mc_repetitions;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let mut sim = cells[c].sim.clone();
            sim.seed = repetition_seed(cfg.sim.seed, r);
            repetition_error(&built, &drift, &sim, mode)
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    let mut macro_steps = 0u64;
    let mut results = results.into_iter();
    for cell in &cells {
        let mut values = Vec::with_capacity(reps);
        let mut failure = None;
        for res in results.by_ref().take(reps) {
            match res {
                Ok(v) => values.push(v),
                Err(e) if is_cell_failure(&e) => {
                    failure.get_or_insert_with(|| e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        macro_steps += (cell.sim.n_steps() * reps) as u64;
        let (err_mean, err_stderr) = if failure.is_some() {
            log::warn!("cell delta = {} gamma = {} failed", cell.delta, cell.gamma);
            (None, None)
        } else {
            let m = values.iter().sum::<f64>() / reps as f64;
            let se = if reps > 1 {
                (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64 / reps as f64).sqrt()
            } else {
                0.0
            };
            (Some(m), Some(se))
        };
        rows.push(ErrorRow {
            delta: cell.delta,
            epsilon: cell.epsilon,
            gamma: cell.gamma,
            dt: cell.sim.dt,
            n_mc: reps,
            err_mean,
            err_stderr,
            failure,
        });
    }
    let streams = (0..reps)
        .map(|r| {
            let seed = repetition_seed(cfg.sim.seed, r);
            StreamAudit {
                repetition: r,
                full_slow: family_id(seed, StreamRole::Slow),
                limit_slow: (mode == AveragedMode::ThetaZero).then(|| family_id(seed, StreamRole::Slow)),
            }
        })
        .collect();
    Ok(ConvergenceReport {
        fits: fit_slopes(&rows),
        rows,
        streams,
        macro_steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub target_id: String,
    pub target: Vec<f64>,
    /// Absent when infinite.
    #[serde(rename = "I")]
    pub rate: Option<f64>,
    pub residual: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdpReport {
    pub rates: Vec<RateRow>,
    pub probes: Vec<ProbeRow>,
    /// Smallest rate over the `eta`-displaced endpoint targets.
    pub event_rate: Option<f64>,
    /// `-eps log p_hat / I` at the smallest probed epsilon.
    pub final_ratio: Option<f64>,
}

/// Rate function on the baseline endpoint, the `eta` event endpoints and the
/// declared targets; optionally the Monte Carlo probe of the `eta` event.
pub fn run_ldp_experiment(cfg: &RunConfig, probe: bool) -> Result<LdpReport> {
    let built = cfg.build_model()?;
    assumption_report(&built, &cfg.sim)?.require_dissipative()?;
    let drift = drift_source(&built, cfg)?;
    let lcfg = &cfg.experiment.ldp;
    let BuiltModel { coeffs, a1, a2 } = &built;
    let baseline = averaged_baseline(&drift, coeffs, a1, &cfg.sim)?;
    let end = baseline.x(baseline.len() - 1, 0).to_vec();

    let mut targets: Vec<(String, Vec<f64>)> = vec![("baseline".into(), end.clone())];
    for j in 0..end.len() {
        for (sign, tag) in [(1.0, '+'), (-1.0, '-')] {
            let mut z = end.clone();
            z[j] += sign * lcfg.eta;
            targets.push((format!("event{tag}{j}"), z));
        }
    }
    for (i, z) in lcfg.targets.iter().enumerate() {
        targets.push((format!("target{i}"), z.clone()));
    }
    let mut rates = Vec::with_capacity(targets.len());
    for (id, z) in targets {
        let r = rate_function(&RateTarget::Endpoint(z.clone()), &baseline, &drift, coeffs, a1, &lcfg.penalty)?;
        rates.push(RateRow {
            target_id: id,
            target: z,
            rate: r.rate.is_finite().then_some(r.rate),
            residual: r.residual.is_finite().then_some(r.residual),
            converged: r.converged,
        });
    }
    let event_rate = rates
        .iter()
        .filter(|r| r.target_id.starts_with("event"))
        .filter_map(|r| r.rate)
        .min_by(f64::total_cmp);

    let mut probes = Vec::new();
    let mut final_ratio = None;
    if probe {
        let mut sim = cfg.sim.clone();
        sim.theta = 0.5;
        probes = rare_event_probe(
            lcfg.eta,
            &lcfg.epsilons,
            lcfg.delta_exponent,
            coeffs,
            a1,
            a2,
            &drift,
            &sim,
            lcfg.n_mc,
        )?;
        let last = probes.iter().min_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        if let (Some(row), Some(i)) = (last, event_rate) {
            final_ratio = row.neg_eps_log_p.map(|v| v / i);
        }
    }
    Ok(LdpReport {
        rates,
        probes,
        event_rate,
        final_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub anchor: Vec<f64>,
    pub mean: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    pub var: Vec<f64>,
    pub var_stderr: Vec<f64>,
    pub bbar: Vec<f64>,
    pub bbar_stderr: Vec<f64>,
    pub rate: Option<f64>,
    pub r2: Option<f64>,
    pub alpha: f64,
}

/// Frozen invariant statistics and decay fit at `sim.x0` with a Dirac cloud.
pub fn run_mixing_experiment(cfg: &RunConfig) -> Result<MixingReport> {
    let built = cfg.build_model()?;
    let x = cfg.sim.x0.clone();
    let mu = ParticleCloud::dirac(&x);
    let mut settings = cfg.experiment.averaging.clone();
    settings.skip_mixing = true;
    let est = estimate_invariant(&x, &mu, &built.coeffs, &built.a2, &settings)?;
    let (bbar, bbar_stderr) = est.bbar_with_stderr();
    let (mean, mean_stderr) = est.mean_with_stderr();
    let (var, var_stderr) = est.var_with_stderr();
    let fit = match mixing_decay_fit(&x, &mu, None, &built.coeffs, &built.a2, &settings, &bbar) {
        Ok(f) => Some(f),
        Err(Error::InsufficientSignal(m)) => {
            log::warn!("mixing fit skipped: {m}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MixingReport {
        anchor: x,
        mean,
        mean_stderr,
        var,
        var_stderr,
        bbar,
        bbar_stderr,
        rate: fit.as_ref().map(|f| f.rate),
        r2: fit.as_ref().map(|f| f.r2),
        alpha: est.settings.alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub gaps: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
}

pub fn run_picard_experiment(cfg: &RunConfig) -> Result<PicardReport> {
    let built = cfg.build_model()?;
    let r = picard_solve(
        &built.coeffs,
        &built.a1,
        &built.a2,
        &cfg.sim,
        cfg.experiment.picard_max_iter,
        cfg.experiment.picard_tol,
    )?;
    let ratios = r.gaps.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(PicardReport {
        gaps: r.gaps,
        ratios,
        converged: r.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(delta: f64, e: f64, se: f64) -> ErrorRow {
        ErrorRow {
            delta,
            epsilon: delta.sqrt(),
            gamma: 0.5,
            dt: delta,
            n_mc: 4,
            err_mean: Some(e),
            err_stderr: Some(se),
            failure: None,
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let rows: Vec<ErrorRow> = [1e-1, 1e-2, 1e-3].iter().map(|&d: &f64| row(d, 3.0 * d.powf(0.5), 0.0)).collect();
        let f = &fit_slopes(&rows)[0];
        assert!((f.slope.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f.strictly_decreasing, Some(true));
    }

    #[test]
    fn overlapping_errors_are_not_strictly_decreasing() {
        let rows = vec![row(1e-1, 1.0, 0.1), row(1e-2, 0.8, 0.1)];
        assert_eq!(fit_slopes(&rows)[0].strictly_decreasing, Some(false));
    }

    #[test]
    fn single_cell_slope_is_undefined() {
        let f = &fit_slopes(&[row(1.0, 0.0, 0.0)])[0];
        assert_eq!(f.slope, None);
        assert_eq!(f.strictly_decreasing, None);
    }

    #[test]
    fn noisy_last_point_is_half_weighted() {
        // Weighted fit of three points differs from the unweighted one.
        let rows = vec![row(1e-1, 1.0, 0.0), row(1e-2, 0.3, 0.0), row(1e-3, 0.2, 0.1)];
        let f = &fit_slopes(&rows)[0];
        let x: Vec<f64> = [1e-1f64, 1e-2, 1e-3].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 0.3, 0.2].iter().map(|v| v.ln()).collect();
        let (s, _, _) = weighted_ols(&x, &y, &[1.0, 1.0, 0.5]);
        assert_eq!(f.slope, Some(s));
    }
}
