//! Frozen fast dynamics: invariant-measure estimates, the averaged slow
//! drift, mixing-rate fits, and integration of the averaged equations.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, mat_vec_acc};
use crate::measure::{CloudDigest, ParticleCloud};
use crate::model::{check_assumptions, AssumptionReport, AveragedFn, CoefficientSet, Dims, DomainSampler, FrozenCoefficients};
use crate::monotone_ops::MonotoneOperator;
use crate::rng::{derive_seed, fill_normal, stream, StreamRole};
use crate::sde_engine::{fast_substeps, RecordMode, Scratch, SimConfig, StepParams, Trajectory};

/// Frozen steps drawn from one counter-based stream key.
const FROZEN_CHUNK: usize = 64;
/// Minimum replica mixing-fit quality before the estimate is flagged.
pub const MIN_FIT_R2: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AveragingSettings {
    /// Frozen step; default `1 / (50 beta)`.
    pub dt_f: Option<f64>,
    /// Post-burn-in averaging time per replica; default `200 / alpha`.
    pub horizon: Option<f64>,
    /// Default `max(5 / alpha, 50 dt_f)`.
    pub burn_in: Option<f64>,
    pub replicas: usize,
    /// Frozen steps between retained cloud samples.
    pub subsample: usize,
    /// Starting fast state; default the origin projected onto the fast domain.
    pub y0: Option<Vec<f64>>,
    /// Largest acceptable per-component standard error of the averaged drift.
    pub stderr_tol: f64,
    /// Horizon doublings allowed before giving up on `stderr_tol`.
    pub max_refinements: usize,
    pub seed: u64,
    pub probe_samples: usize,
    /// Half-width of the fast box used when probing constants around an anchor.
    pub probe_y_box: f64,
    /// Known constants; probed when absent.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub mixing_replicas: usize,
    pub mixing_points: usize,
    /// Grid spacing of the mixing fit; default `0.05 / alpha`.
    pub mixing_dt: Option<f64>,
    /// Starting fast state for the mixing fit; default `y0 + 1`.
    pub mixing_y0: Option<Vec<f64>>,
    /// Skip the mixing fit in `estimate_invariant`.
    pub skip_mixing: bool,
}

impl Default for AveragingSettings {
    fn default() -> Self {
        AveragingSettings {
            dt_f: None,
            horizon: None,
            burn_in: None,
            replicas: 8,
            subsample: 10,
            y0: None,
            stderr_tol: 1e-2,
            max_refinements: 3,
            seed: 0,
            probe_samples: 2000,
            probe_y_box: 3.0,
            alpha: None,
            beta: None,
            mixing_replicas: 512,
            mixing_points: 40,
            mixing_dt: None,
            mixing_y0: None,
            skip_mixing: false,
        }
    }
}

/// Numerical constants after defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSettings {
    pub alpha: f64,
    pub beta: f64,
    pub dt_f: f64,
    pub horizon: f64,
    pub burn_in: f64,
}

impl AveragingSettings {
    pub fn validate(&self) -> Result<()> {
        if self.replicas < 2 {
            return Err(Error::input("averaging needs at least 2 replicas"));
        }
        if self.subsample == 0 || self.mixing_points < 3 || self.mixing_replicas < 2 {
            return Err(Error::input("subsample, mixing_points and mixing_replicas are too small"));
        }
        for v in [self.dt_f, self.horizon, self.burn_in, self.mixing_dt].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input("averaging times must be positive"));
            }
        }
        if !(self.stderr_tol > 0.0) {
            return Err(Error::input("stderr_tol must be positive"));
        }
        Ok(())
    }

    fn resolve(&self, report: Option<&AssumptionReport>) -> Result<ResolvedSettings> {
        self.validate()?;
        let (alpha, beta) = match (self.alpha, self.beta, report) {
            (Some(a), Some(b), _) => (a, b),
            (a, b, Some(r)) => {
                let ra = r.require_dissipative()?;
                (a.unwrap_or(ra), b.unwrap_or(r.beta))
            }
            _ => return Err(Error::input("averaging constants unknown")),
        };
        if !(alpha > 0.0 && beta >= alpha) {
            return Err(Error::Gate(format!("dissipativity fails: alpha = {alpha}, beta = {beta}")));
        }
        let dt_f = self.dt_f.unwrap_or(1.0 / (50.0 * beta));
        if dt_f > 1.0 / (10.0 * beta) * (1.0 + 1e-12) {
            return Err(Error::input(format!(
                "frozen step {dt_f} exceeds 1/(10 beta) = {}",
                1.0 / (10.0 * beta)
            )));
        }
        Ok(ResolvedSettings {
            alpha,
            beta,
            dt_f,
            horizon: self.horizon.unwrap_or(200.0 / alpha),
            burn_in: self.burn_in.unwrap_or((5.0 / alpha).max(50.0 * dt_f)),
        })
    }
}

fn frozen_params(dt_f: f64) -> StepParams {
    StepParams {
        dt: dt_f,
        substeps: 1,
        h_fast: dt_f,
        inv_delta: 1.0,
        fast_noise: 1.0,
        slow_noise: 0.0,
    }
}

/// Runs `n_steps` frozen resolvent-Euler steps from `y`, calling `visit`
/// after every step with the step index (1-based) and state.
#[allow(clippy::too_many_arguments)]
fn run_frozen(
    frozen: &dyn FrozenCoefficients,
    a2: &MonotoneOperator,
    dims: Dims,
    y: &mut [f64],
    n_steps: usize,
    dt_f: f64,
    seed: u64,
    replica: usize,
    role: StreamRole,
    mut visit: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    let single = frozen_params(dt_f);
    let mut one = Scratch::new(dims, 1);
    let mut chunk_noise = vec![0.0; FROZEN_CHUNK * dims.d2];
    let mut k = 0;
    while k < n_steps {
        let c = (k / FROZEN_CHUNK) as u64;
        fill_normal(&mut stream(seed, replica as u64, c, role), dt_f, &mut chunk_noise);
        for j in 0..FROZEN_CHUNK.min(n_steps - k) {
            one.set_fast_noise(&chunk_noise[j * dims.d2..(j + 1) * dims.d2]);
            fast_substeps(frozen, a2, &single, None, y, &mut one)?;
            k += 1;
            if !all_finite(y) {
                return Err(Error::Divergence {
                    t: k as f64 * dt_f,
                    partial: Box::new(Trajectory::slow_only(seed, 1, dims.m, 1)),
                });
            }
            visit(k, y)?;
        }
    }
    Ok(())
}

/// A recorded frozen path.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPath {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major states, one row per time.
    pub states: Vec<f64>,
}

impl FrozenPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Resolvent-Euler path of the frozen fast equation at fixed `(x, mu)`.
///
/// When `gate` is given, the run is refused unless the dissipativity gate
/// holds, and `dt_f` must not exceed `1 / (10 beta)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frozen(
    x: &[f64],
    mu: &ParticleCloud,
    y0: &[f64],
    coeffs: &CoefficientSet,
    a2: &MonotoneOperator,
    horizon: f64,
    dt_f: f64,
    seed: u64,
    gate: Option<&AssumptionReport>,
) -> Result<FrozenPath> {
    let dims = coeffs.dims();
    check_anchor(dims, x, mu, a2)?;
    if y0.len() != dims.m || !a2.in_domain(y0, 1e-10) {
        return Err(Error::input("y0 must match the fast dimension and lie in the closure of D(A2)"));
    }
    if !(dt_f > 0.0 && horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::input("frozen horizon and step must be positive"));
    }
    if let Some(r) = gate {
        r.require_dissipative()?;
        if r.beta > 0.0 && dt_f > 1.0 / (10.0 * r.beta) * (1.0 + 1e-12) {
            return Err(Error::input(format!("frozen step {dt_f} exceeds 1/(10 beta)")));
        }
    }
    let n_steps = (horizon / dt_f).round() as usize;
    let frozen = coeffs.freeze(x, mu);
    let mut y = y0.to_vec();
    let mut path = FrozenPath {
        dim: dims.m,
        times: vec![0.0],
        states: y.clone(),
    };
    run_frozen(frozen.as_ref(), a2, dims, &mut y, n_steps, dt_f, seed, 0, StreamRole::Frozen, |k, y| {
        path.times.push(k as f64 * dt_f);
        path.states.extend_from_slice(y);
        Ok(())
    })?;
    Ok(path)
}

fn check_anchor(dims: Dims, x: &[f64], mu: &ParticleCloud, a2: &MonotoneOperator) -> Result<()> {
    if x.len() != dims.n || mu.dim() != dims.n || a2.dim() != dims.m {
        return Err(Error::input("anchor dimensions do not match the model"));
    }
    if !all_finite(x) {
        return Err(Error::input("anchor must be finite"));
    }
    Ok(())
}

fn default_y0(dims: Dims, a2: &MonotoneOperator, settings: &AveragingSettings) -> Result<Vec<f64>> {
    match &settings.y0 {
        Some(y) if y.len() == dims.m => Ok(y.clone()),
        Some(_) => Err(Error::input("settings.y0 has the wrong dimension")),
        None => {
            let mut y = vec![0.0; dims.m];
            a2.resolve_in_place(1.0, &mut y)?;
            Ok(y)
        }
    }
}

/// Probes the structural constants in a box around the anchor.
pub fn probe_around(
    coeffs: &CoefficientSet,
    x: &[f64],
    settings: &AveragingSettings,
) -> Result<AssumptionReport> {
    let dims = coeffs.dims();
    let sampler = DomainSampler {
        x_lower: x.iter().map(|v| v - 1.0).collect(),
        x_upper: x.iter().map(|v| v + 1.0).collect(),
        y_lower: vec![-settings.probe_y_box; dims.m],
        y_upper: vec![settings.probe_y_box; dims.m],
        cloud_size: 8,
        seed: settings.seed,
    };
    check_assumptions(coeffs, &sampler, settings.probe_samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingFit {
    pub rate: f64,
    pub r2: f64,
    /// `(t, debiased |E b1(Y_t) - bbar|^2)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

impl MixingFit {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "signal"])?;
        for (t, s) in &self.points {
            wtr.write_record([t.to_string(), s.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<mixing csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStats {
    /// Componentwise time-mean of the fast state.
    pub mean: Vec<f64>,
    /// Componentwise time-variance of the fast state.
    pub var: Vec<f64>,
    /// Time-average of `b1` along the replica.
    pub b1_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantEstimate {
    pub anchor_x: Vec<f64>,
    pub anchor_digest: CloudDigest,
    /// Subsampled post-burn-in fast states from all replicas.
    pub cloud: ParticleCloud,
    pub burn_in: f64,
    pub settings: ResolvedSettings,
    pub replicas: Vec<ReplicaStats>,
    pub mixing_rate_fit: Option<(f64, f64)>,
    /// Set when the mixing fit failed or has `r2 < 0.8`.
    pub low_quality_fit: bool,
    /// Set when the two halves of the replicas disagree beyond 5 standard errors.
    pub replicas_disagree: bool,
}

impl InvariantEstimate {
    /// Mean of the per-replica time-means and its standard error.
    pub fn mean_with_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        mean_stderr(self.replicas.iter().map(|r| r.mean.as_slice()))
    }

    /// Mean of the per-replica time-variances and its standard error.
    pub fn var_with_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        mean_stderr(self.replicas.iter().map(|r| r.var.as_slice()))
    }

    pub fn bbar_with_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        mean_stderr(self.replicas.iter().map(|r| r.b1_mean.as_slice()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.cloud.write_csv(w)
    }
}

/// Componentwise Welford mean and standard error of the mean.
fn mean_stderr<'a>(rows: impl Iterator<Item = &'a [f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut acc: Option<Welford> = None;
    for r in rows {
        acc.get_or_insert_with(|| Welford::new(r.len())).push(r);
    }
    match acc {
        Some(w) => (w.mean.clone(), w.stderr()),
        None => (Vec::new(), Vec::new()),
    }
}

#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        let k = self.n as f64;
        for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(v) {
            let d = x - *m;
            *m += d / k;
            *s += d * (x - *m);
        }
    }

    fn var(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    fn stderr(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.var().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// One post-burn-in replica: Welford statistics of `Y` and `b1(Y)` and
/// optionally the subsampled states.
struct ReplicaRun {
    stats: ReplicaStats,
    samples: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_replica(
    frozen: &dyn FrozenCoefficients,
    a2: &MonotoneOperator,
    dims: Dims,
    y0: &[f64],
    rs: &ResolvedSettings,
    horizon: f64,
    seed: u64,
    replica: usize,
    subsample: Option<usize>,
) -> Result<ReplicaRun> {
    let burn = (rs.burn_in / rs.dt_f).ceil() as usize;
    let keep = ((horizon / rs.dt_f).round() as usize).max(1);
    let mut y = y0.to_vec();
    let mut wy = Welford::new(dims.m);
    let mut wb = Welford::new(dims.n);
    let mut b = vec![0.0; dims.n];
    let mut samples = Vec::new();
    run_frozen(frozen, a2, dims, &mut y, burn + keep, rs.dt_f, seed, replica, StreamRole::Frozen, |k, y| {
        if k > burn {
            wy.push(y);
            frozen.b1(y, &mut b);
            if !all_finite(&b) {
                return Err(Error::Model {
                    input: format!("y = {y:?}"),
                    message: "b1 returned a non-finite value".into(),
                });
            }
            wb.push(&b);
            if let Some(s) = subsample {
                if (k - burn).is_multiple_of(s) {
                    samples.extend_from_slice(y);
                }
            }
        }
        Ok(())
    })?;
    let n = wy.n.max(1) as f64;
    Ok(ReplicaRun {
        stats: ReplicaStats {
            mean: wy.mean.clone(),
            var: wy.m2.iter().map(|s| s / n).collect(),
            b1_mean: wb.mean,
        },
        samples,
    })
}

fn anchor_seed(base: u64, x: &[f64], mu: &ParticleCloud) -> u64 {
    let d = mu.digest();
    let mut labels: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    labels.extend(d.mean.iter().map(|v| v.to_bits()));
    labels.push(d.second_moment.to_bits());
    derive_seed(base, &labels)
}

/// Long-run frozen statistics at `(x, mu)`.
pub fn estimate_invariant(
    x: &[f64],
    mu: &ParticleCloud,
    coeffs: &CoefficientSet,
    a2: &MonotoneOperator,
    settings: &AveragingSettings,
) -> Result<InvariantEstimate> {
    let dims = coeffs.dims();
    check_anchor(dims, x, mu, a2)?;
    let report = if settings.alpha.is_some() && settings.beta.is_some() {
        None
    } else {
        Some(probe_around(coeffs, x, settings)?)
    };
    let rs = settings.resolve(report.as_ref())?;
    let y0 = default_y0(dims, a2, settings)?;
    let seed = anchor_seed(settings.seed, x, mu);
    let runs: Vec<ReplicaRun> = (0..settings.replicas)
        .into_par_iter()
        .map(|r| {
            let frozen = coeffs.freeze(x, mu);
            run_replica(frozen.as_ref(), a2, dims, &y0, &rs, rs.horizon, seed, r, Some(settings.subsample))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = runs.iter().flat_map(|r| r.samples.iter().copied()).collect();
    let cloud = if samples.is_empty() {
        ParticleCloud::new(dims.m, y0.clone())?
    } else {
        ParticleCloud::new(dims.m, samples)?
    };
    let replicas: Vec<ReplicaStats> = runs.into_iter().map(|r| r.stats).collect();

    let half = replicas.len() / 2;
    let (ma, sa) = mean_stderr(replicas[..half].iter().map(|r| r.mean.as_slice()));
    let (mb, sb) = mean_stderr(replicas[half..].iter().map(|r| r.mean.as_slice()));
    let replicas_disagree = ma
        .iter()
        .zip(&mb)
        .zip(sa.iter().zip(&sb))
        .any(|((a, b), (s1, s2))| (a - b).abs() > 5.0 * (s1 * s1 + s2 * s2).sqrt() && (a - b).abs() > 1e-12);
    if replicas_disagree {
        log::warn!("frozen replicas disagree at x = {x:?}: possible metastability");
    }

    let mut est = InvariantEstimate {
        anchor_x: x.to_vec(),
        anchor_digest: mu.digest(),
        cloud,
        burn_in: rs.burn_in,
        settings: rs,
        replicas,
        mixing_rate_fit: None,
        low_quality_fit: true,
        replicas_disagree,
    };
    if !settings.skip_mixing {
        let (bbar, _) = est.bbar_with_stderr();
        let s = AveragingSettings {
            alpha: Some(rs.alpha),
            beta: Some(rs.beta),
            ..settings.clone()
        };
        match mixing_decay_fit(x, mu, None, coeffs, a2, &s, &bbar) {
            Ok(fit) => {
                est.low_quality_fit = fit.r2 < MIN_FIT_R2;
                if est.low_quality_fit {
                    log::warn!("mixing fit quality r2 = {} below {MIN_FIT_R2}", fit.r2);
                }
                est.mixing_rate_fit = Some((fit.rate, fit.r2));
            }
            Err(Error::InsufficientSignal(m)) => log::warn!("mixing fit skipped: {m}"),
            Err(e) => return Err(e),
        }
    }
    Ok(est)
}

/// Fits `|E b1(x, mu, Y_t) - bbar|^2 ~ C exp(-rate t)` from replicas started at `y0`.
///
/// Grid points are used from the start while the replica mean stays more than
/// four standard errors away from `bbar`; fewer than three such points is an
/// insufficient-signal error.
pub fn mixing_decay_fit(
    x: &[f64],
    mu: &ParticleCloud,
    y0: Option<&[f64]>,
    coeffs: &CoefficientSet,
    a2: &MonotoneOperator,
    settings: &AveragingSettings,
    bbar: &[f64],
) -> Result<MixingFit> {
    let dims = coeffs.dims();
    check_anchor(dims, x, mu, a2)?;
    if bbar.len() != dims.n {
        return Err(Error::input("bbar dimension mismatch"));
    }
    let report = if settings.alpha.is_some() && settings.beta.is_some() {
        None
    } else {
        Some(probe_around(coeffs, x, settings)?)
    };
    let rs = settings.resolve(report.as_ref())?;
    let start = match (y0, &settings.mixing_y0) {
        (Some(y), _) => y.to_vec(),
        (None, Some(y)) => y.clone(),
        (None, None) => {
            let mut y: Vec<f64> = default_y0(dims, a2, settings)?.iter().map(|v| v + 1.0).collect();
            a2.resolve_in_place(1.0, &mut y)?;
            y
        }
    };
    if start.len() != dims.m {
        return Err(Error::input("mixing start has the wrong dimension"));
    }
    let grid_dt = settings.mixing_dt.unwrap_or(0.05 / rs.alpha);
    let per = ((grid_dt / rs.dt_f).round() as usize).max(1);
    let points = settings.mixing_points;
    let seed = derive_seed(anchor_seed(settings.seed, x, mu), &[StreamRole::Mixing as u64]);

    // values[r][j]: b1 at grid point j for replica r.
    let values: Vec<Vec<f64>> = (0..settings.mixing_replicas)
        .into_par_iter()
        .map(|r| {
            let frozen = coeffs.freeze(x, mu);
            let mut y = start.clone();
            let mut b = vec![0.0; dims.n];
            let mut out = Vec::with_capacity(points * dims.n);
            run_frozen(frozen.as_ref(), a2, dims, &mut y, per * points, rs.dt_f, seed, r, StreamRole::Mixing, |k, y| {
                if k % per == 0 {
                    frozen.b1(y, &mut b);
                    out.extend_from_slice(&b);
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let nr = values.len() as f64;
    let mut used = Vec::new();
    for j in 0..points {
        let mut w = Welford::new(dims.n);
        for v in &values {
            w.push(&v[j * dims.n..(j + 1) * dims.n]);
        }
        let var = w.var();
        let diff_sq: f64 = w.mean.iter().zip(bbar).map(|(m, b)| (m - b) * (m - b)).sum();
        let se_sq: f64 = var.iter().sum::<f64>() / nr;
        if diff_sq <= 16.0 * se_sq || diff_sq == 0.0 {
            break;
        }
        let signal = diff_sq - se_sq;
        if signal <= 0.0 {
            break;
        }
        used.push(((j + 1) as f64 * per as f64 * rs.dt_f, signal));
    }
    if used.len() < 3 {
        return Err(Error::InsufficientSignal(format!(
            "only {} grid points above the noise floor",
            used.len()
        )));
    }
    let ts: Vec<f64> = used.iter().map(|p| p.0).collect();
    let ls: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let (slope, _, r2) = ols(&ts, &ls);
    Ok(MixingFit {
        rate: -slope,
        r2,
        points: used,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, r^2)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    weighted_ols(x, y, &vec![1.0; x.len()])
}

pub fn weighted_ols(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for ((a, b), c) in x.iter().zip(y).zip(w) {
        sxx += c * (a - mx) * (a - mx);
        sxy += c * (a - mx) * (b - my);
        syy += c * (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedDrift {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

/// Read-through cache of estimated averaged drifts keyed by quantized
/// anchors. Values are computed at the quantized representative point so
/// that the result does not depend on which particle asks first.
pub struct AveragedDrift {
    coeffs: CoefficientSet,
    a2: MonotoneOperator,
    settings: AveragingSettings,
    resolved: ResolvedSettings,
    y0: Vec<f64>,
    cache: Mutex<BTreeMap<String, CachedDrift>>,
}

impl std::fmt::Debug for AveragedDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AveragedDrift")
            .field("model", &self.coeffs.name)
            .field("settings", &self.resolved)
            .field("entries", &self.len())
            .finish()
    }
}

fn quantize(v: f64) -> String {
    format!("{v:.3e}")
}

impl AveragedDrift {
    /// Gates on the dissipativity probe over `sampler` unless the settings
    /// carry known constants.
    pub fn new(
        coeffs: CoefficientSet,
        a2: MonotoneOperator,
        settings: AveragingSettings,
        sampler: &DomainSampler,
    ) -> Result<Self> {
        let report = if settings.alpha.is_some() && settings.beta.is_some() {
            None
        } else {
            Some(check_assumptions(&coeffs, sampler, settings.probe_samples)?)
        };
        let resolved = settings.resolve(report.as_ref())?;
        let y0 = default_y0(coeffs.dims(), &a2, &settings)?;
        Ok(AveragedDrift {
            coeffs,
            a2,
            settings,
            resolved,
            y0,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn resolved(&self) -> ResolvedSettings {
        self.resolved
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(x: &[f64], mu: &ParticleCloud) -> String {
        let d = mu.digest();
        let q = |v: &[f64]| v.iter().map(|a| quantize(*a)).collect::<Vec<_>>().join(",");
        format!("{}|{}|{}", q(x), q(&d.mean), quantize(d.second_moment))
    }

    fn representative(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| quantize(*v).parse::<f64>().expect("quantized float parses"))
            .collect()
    }

    /// `(bbar1, stderr)` at `(x, mu)`, estimating on a cache miss.
    pub fn get(&self, x: &[f64], mu: &ParticleCloud) -> Result<CachedDrift> {
        let key = Self::key(x, mu);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let value = self.estimate(&Self::representative(x), mu)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, value.clone());
        Ok(value)
    }

    fn estimate(&self, x: &[f64], mu: &ParticleCloud) -> Result<CachedDrift> {
        let dims = self.coeffs.dims();
        check_anchor(dims, x, mu, &self.a2)?;
        let seed = anchor_seed(self.settings.seed, x, mu);
        let mut horizon = self.resolved.horizon;
        let mut last = None;
        for _ in 0..=self.settings.max_refinements {
            let stats: Vec<ReplicaStats> = (0..self.settings.replicas)
                .into_par_iter()
                .map(|r| {
                    let frozen = self.coeffs.freeze(x, mu);
                    run_replica(frozen.as_ref(), &self.a2, dims, &self.y0, &self.resolved, horizon, seed, r, None)
                        .map(|run| run.stats)
                })
                .collect::<Result<_>>()?;
            let (value, stderr) = mean_stderr(stats.iter().map(|s| s.b1_mean.as_slice()));
            let samples = self.settings.replicas * ((horizon / self.resolved.dt_f).round() as usize);
            let ok = stderr.iter().all(|s| *s <= self.settings.stderr_tol);
            let entry = CachedDrift { value, stderr, samples };
            if ok {
                return Ok(entry);
            }
            last = Some(entry);
            horizon *= 2.0;
        }
        let entry = last.expect("at least one estimate");
        Err(Error::NonConvergence(format!(
            "averaged drift stderr {:?} above tolerance {} after {} refinements",
            entry.stderr, self.settings.stderr_tol, self.settings.max_refinements
        )))
    }

    pub fn save_json<W: Write>(&self, w: W) -> Result<()> {
        let cache = self.cache.lock().expect("cache lock");
        serde_json::to_writer_pretty(w, &DriftCacheFile::from_map(&cache))?;
        Ok(())
    }

    /// Merges entries from a sidecar written by `save_json`.
    pub fn load_json<R: Read>(&self, r: R) -> Result<usize> {
        let file = DriftCacheFile::read(r)?;
        let n = file.entries.len();
        let mut cache = self.cache.lock().expect("cache lock");
        for e in file.entries {
            cache.insert(e.key, e.drift);
        }
        Ok(n)
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.save_json(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftCacheEntry {
    pub key: String,
    #[serde(flatten)]
    pub drift: CachedDrift,
}

/// On-disk drift cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftCacheFile {
    pub entries: Vec<DriftCacheEntry>,
}

impl DriftCacheFile {
    fn from_map(map: &BTreeMap<String, CachedDrift>) -> Self {
        DriftCacheFile {
            entries: map
                .iter()
                .map(|(k, v)| DriftCacheEntry {
                    key: k.clone(),
                    drift: v.clone(),
                })
                .collect(),
        }
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let file: DriftCacheFile = serde_json::from_reader(r)?;
        for e in &file.entries {
            if e.drift.value.len() != e.drift.stderr.len()
                || !all_finite(&e.drift.value)
                || e.drift.stderr.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            {
                return Err(Error::input(format!("malformed drift cache entry {:?}", e.key)));
            }
        }
        Ok(file)
    }
}

/// Where the averaged drift comes from.
#[derive(Clone)]
pub enum DriftSource {
    Analytic(Arc<AveragedFn>),
    Estimated(Arc<AveragedDrift>),
}

impl std::fmt::Debug for DriftSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftSource::Analytic(_) => f.write_str("Analytic"),
            DriftSource::Estimated(d) => write!(f, "Estimated({d:?})"),
        }
    }
}

impl DriftSource {
    /// The model's closed form when it has one.
    pub fn analytic_from(coeffs: &CoefficientSet) -> Option<Self> {
        coeffs.analytic_average.clone().map(DriftSource::Analytic)
    }

    pub fn eval(&self, x: &[f64], mu: &ParticleCloud, out: &mut [f64]) -> Result<()> {
        match self {
            DriftSource::Analytic(f) => {
                f(x, mu, out);
                if !all_finite(out) {
                    return Err(Error::Model {
                        input: format!("x = {x:?}"),
                        message: "averaged drift returned a non-finite value".into(),
                    });
                }
                Ok(())
            }
            DriftSource::Estimated(d) => {
                out.copy_from_slice(&d.get(x, mu)?.value);
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragedMode {
    /// Deterministic averaged equation (noise vanishes with epsilon).
    ThetaPositive,
    /// Stochastic averaged equation with `sigma1(x, mu)` retained.
    ThetaZero,
}

/// Particle system of the averaged equation, steppable in lockstep with the
/// full system. In `ThetaZero` mode it draws the same slow increments as
/// `simulate` for the same seed.
#[derive(Debug, Clone)]
pub struct AveragedSystem {
    pub t: f64,
    dim: usize,
    dims: Dims,
    xs: Vec<f64>,
    cloud: ParticleCloud,
    mode: AveragedMode,
}

impl AveragedSystem {
    pub fn new(coeffs: &CoefficientSet, a1: &MonotoneOperator, cfg: &SimConfig, mode: AveragedMode) -> Result<Self> {
        cfg.validate()?;
        let dims = coeffs.dims();
        if cfg.x0.len() != dims.n || a1.dim() != dims.n {
            return Err(Error::input("averaged system dimensions do not match the model"));
        }
        if mode == AveragedMode::ThetaZero && !coeffs.sigma1_y_independent {
            return Err(Error::Gate(
                "the stochastic averaged equation needs sigma1 independent of y".into(),
            ));
        }
        let init = crate::sde_engine::SlowFastEnsemble::initial(cfg, a1)?;
        let xs = init.xs().to_vec();
        Ok(AveragedSystem {
            t: 0.0,
            dim: dims.n,
            dims,
            cloud: ParticleCloud::new(dims.n, xs.clone())?,
            xs,
            mode,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.xs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Advances through macro step `n`.
    pub fn step(
        &mut self,
        drift: &DriftSource,
        coeffs: &CoefficientSet,
        a1: &MonotoneOperator,
        cfg: &SimConfig,
        n: usize,
    ) -> Result<()> {
        let dims = self.dims;
        let cloud = &self.cloud;
        let mode = self.mode;
        let results: Vec<Result<()>> = self
            .xs
            .par_chunks_mut(dims.n)
            .enumerate()
            .with_min_len(8)
            .map_init(
                || (AveragedScratch::new(dims), vec![0.0; dims.d1]),
                |(scratch, dw), (i, x)| {
                    let noise = if mode == AveragedMode::ThetaZero {
                        fill_normal(&mut stream(cfg.seed, i as u64, n as u64, StreamRole::Slow), cfg.dt, dw);
                        Some(dw.as_slice())
                    } else {
                        None
                    };
                    averaged_update(drift, coeffs, a1, cfg.dt, cloud, x, None, noise, scratch).map_err(|e| Error::Step {
                        particle: i,
                        source: Box::new(e),
                    })
                },
            )
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        self.t = (n + 1) as f64 * cfg.dt;
        if !all_finite(&self.xs) {
            return Err(Error::Divergence {
                t: self.t,
                partial: Box::new(Trajectory::slow_only(cfg.seed, self.len(), self.dim, 1)),
            });
        }
        self.cloud = ParticleCloud::new(self.dim, self.xs.clone())?;
        Ok(())
    }
}

pub(crate) struct AveragedScratch {
    b: Vec<f64>,
    s1: Vec<f64>,
    y_any: Vec<f64>,
}

impl AveragedScratch {
    pub fn new(dims: Dims) -> Self {
        AveragedScratch {
            b: vec![0.0; dims.n],
            s1: vec![0.0; dims.n * dims.d1],
            y_any: vec![0.0; dims.m],
        }
    }
}

/// `x <- J(x + dt bbar(x, cloud) + dt sigma1 control + sigma1 noise)`.
/// A zero or absent control leaves the arithmetic identical to no control.
#[allow(clippy::too_many_arguments)]
pub(crate) fn averaged_update(
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    dt: f64,
    cloud: &ParticleCloud,
    x: &mut [f64],
    control: Option<&[f64]>,
    noise: Option<&[f64]>,
    scratch: &mut AveragedScratch,
) -> Result<()> {
    drift.eval(x, cloud, &mut scratch.b)?;
    let control = control.filter(|c| c.iter().any(|v| *v != 0.0));
    if control.is_some() || noise.is_some() {
        coeffs.sigma1(x, cloud, &scratch.y_any, &mut scratch.s1);
    }
    for (xi, bi) in x.iter_mut().zip(&scratch.b) {
        *xi += dt * bi;
    }
    if let Some(c) = control {
        mat_vec_acc(&scratch.s1, c, dt, x);
    }
    if let Some(dw) = noise {
        mat_vec_acc(&scratch.s1, dw, 1.0, x);
    }
    a1.resolve_in_place(dt, x)?;
    Ok(())
}

/// Integrates the averaged equation on the config grid, recording every step.
pub fn integrate_averaged(
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    cfg: &SimConfig,
    mode: AveragedMode,
) -> Result<Trajectory> {
    let mut sys = AveragedSystem::new(coeffs, a1, cfg, mode)?;
    let mut traj = Trajectory::slow_only(cfg.seed, sys.len(), sys.dim, 1);
    traj.record_slow(0.0, &sys.cloud);
    for n in 0..cfg.n_steps() {
        if let Err(e) = sys.step(drift, coeffs, a1, cfg, n) {
            return Err(match e {
                Error::Divergence { t, .. } => Error::Divergence {
                    t,
                    partial: Box::new(traj),
                },
                other => other,
            });
        }
        traj.record_slow(sys.t, &sys.cloud);
    }
    debug_assert_eq!(traj.mode, RecordMode::Reduced);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ou_frozen, OuFrozenParams};
    use crate::monotone_ops::ConvexSet;

    fn zero(_x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn fast_model(b2: fn(&[f64], &ParticleCloud, &[f64], &mut [f64]), s2: f64) -> CoefficientSet {
        CoefficientSet::from_fns(
            "fast",
            Dims::square(1),
            |_x, _m, y, o| o[0] = y[0],
            zero,
            b2,
            move |_x, _m, _y, o| o[0] = s2,
        )
    }

    fn known(beta: f64) -> AveragingSettings {
        AveragingSettings {
            alpha: Some(beta),
            beta: Some(beta),
            ..Default::default()
        }
    }

    #[test]
    fn frozen_path_examples() {
        let dirac = ParticleCloud::dirac(&[0.0]);
        let z = MonotoneOperator::zero(1);
        let still = fast_model(zero, 0.0);
        let p = simulate_frozen(&[0.0], &dirac, &[0.7], &still, &z, 1.0, 0.01, 1, None).unwrap();
        assert!(p.states.iter().all(|&v| v == 0.7));
        assert_eq!(p.len(), 101);

        let ou = fast_model(|_x, _m, y, o| o[0] = -y[0], 0.0);
        let p = simulate_frozen(&[0.0], &dirac, &[1.0], &ou, &z, 1.0, 0.001, 1, None).unwrap();
        let end = p.state(p.len() - 1)[0];
        assert!((end - (-1.0f64).exp()).abs() < 1e-3);

        let push = fast_model(|_x, _m, _y, o| o[0] = -1.0, 0.0);
        let half = MonotoneOperator::indicator(ConvexSet::halfspace(vec![-1.0], 0.0).unwrap());
        let p = simulate_frozen(&[0.0], &dirac, &[1.0], &push, &half, 2.0, 0.01, 1, None).unwrap();
        for k in 0..p.len() {
            let t = p.times[k];
            let expect = (1.0 - t).max(0.0);
            assert!((p.state(k)[0] - expect).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn frozen_gate_refuses_expanding_dynamics() {
        let grow = fast_model(|_x, _m, y, o| o[0] = y[0], 1.0);
        let rep = probe_around(&grow, &[0.0], &AveragingSettings::default()).unwrap();
        let r = simulate_frozen(&[0.0], &ParticleCloud::dirac(&[0.0]), &[0.0], &grow, &MonotoneOperator::zero(1), 1.0, 0.01, 1, Some(&rep));
        assert!(matches!(r, Err(Error::Gate(_))));
        let r = estimate_invariant(&[0.0], &ParticleCloud::dirac(&[0.0]), &grow, &MonotoneOperator::zero(1), &AveragingSettings::default());
        assert!(matches!(r, Err(Error::Gate(_))));
    }

    #[test]
    fn deterministic_fixed_point_collapses_cloud() {
        let c = fast_model(|_x, _m, y, o| o[0] = -2.0 * (y[0] - 0.4), 0.0);
        let s = AveragingSettings {
            skip_mixing: true,
            ..known(2.0)
        };
        let est = estimate_invariant(&[0.0], &ParticleCloud::dirac(&[0.0]), &c, &MonotoneOperator::zero(1), &s).unwrap();
        // Post burn-in distance to the atom is at most 0.4 exp(-2 * 2.5).
        let bound = 0.4 * (-5.0f64).exp();
        assert!(est.cloud.points().all(|p| (p[0] - 0.4).abs() <= bound));
        let last = est.cloud.point(est.cloud.count() - 1)[0];
        assert!((last - 0.4).abs() < 1e-12);
    }

    #[test]
    fn reflected_ou_cloud_is_nonnegative() {
        let c = fast_model(|_x, _m, y, o| o[0] = -y[0], 1.0);
        let half = MonotoneOperator::indicator(ConvexSet::halfspace(vec![-1.0], 0.0).unwrap());
        let s = AveragingSettings {
            skip_mixing: true,
            horizon: Some(20.0),
            ..known(1.0)
        };
        let est = estimate_invariant(&[0.0], &ParticleCloud::dirac(&[0.0]), &c, &half, &s).unwrap();
        assert!(est.cloud.points().all(|p| p[0] >= 0.0));
    }

    #[test]
    fn constant_b1_is_exact() {
        let c = CoefficientSet::from_fns(
            "const",
            Dims::square(1),
            |x, _m, _y, o| o[0] = 0.1 + x[0],
            zero,
            |_x, _m, y, o| o[0] = -y[0],
            |_x, _m, _y, o| o[0] = 1.0,
        );
        let d = AveragedDrift::new(c, MonotoneOperator::zero(1), known(1.0), &DomainSampler::cube(Dims::square(1), 1.0)).unwrap();
        let v = d.get(&[0.25], &ParticleCloud::dirac(&[0.0])).unwrap();
        assert_eq!(v.value, vec![0.1 + 0.25]);
        assert_eq!(v.stderr, vec![0.0]);
    }

    #[test]
    fn averaged_drift_matches_gaussian_moments() {
        // b1 = y, b2 = -2y + 1, s2 = 1: bbar = 1/2.
        let c = ou_frozen(OuFrozenParams {
            beta: 2.0,
            shift: 1.0,
            ..Default::default()
        })
        .unwrap();
        let d = AveragedDrift::new(c, MonotoneOperator::zero(1), known(2.0), &DomainSampler::cube(Dims::square(1), 1.0)).unwrap();
        let v = d.get(&[0.0], &ParticleCloud::dirac(&[0.0])).unwrap();
        assert!((v.value[0] - 0.5).abs() < 3.0 * v.stderr[0], "{v:?}");

        // b1 = y^2, b2 = -2y, s2 = 1: bbar = 1/4 up to the Euler bias.
        let sq = CoefficientSet::from_fns(
            "sq",
            Dims::square(1),
            |_x, _m, y, o| o[0] = y[0] * y[0],
            zero,
            |_x, _m, y, o| o[0] = -2.0 * y[0],
            |_x, _m, _y, o| o[0] = 1.0,
        );
        let s = AveragingSettings {
            dt_f: Some(0.005),
            ..known(2.0)
        };
        let d = AveragedDrift::new(sq, MonotoneOperator::zero(1), s, &DomainSampler::cube(Dims::square(1), 1.0)).unwrap();
        let v = d.get(&[0.0], &ParticleCloud::dirac(&[0.0])).unwrap();
        assert!((v.value[0] - 0.25).abs() < 3.0 * v.stderr[0] + 0.0013, "{v:?}");
    }

    #[test]
    fn cache_hits_and_sidecar_round_trip() {
        let c = ou_frozen(OuFrozenParams {
            beta: 2.0,
            coupling: 1.0,
            ..Default::default()
        })
        .unwrap();
        let s = AveragingSettings {
            horizon: Some(20.0),
            stderr_tol: 1.0,
            ..known(2.0)
        };
        let d = AveragedDrift::new(c.clone(), MonotoneOperator::zero(1), s.clone(), &DomainSampler::cube(Dims::square(1), 1.0)).unwrap();
        let mu = ParticleCloud::dirac(&[0.0]);
        let a = d.get(&[0.5], &mu).unwrap();
        let b = d.get(&[0.5000001], &mu).unwrap();
        assert_eq!(a, b);
        assert_eq!(d.len(), 1);
        d.get(&[0.6], &mu).unwrap();
        assert_eq!(d.len(), 2);
        let mut buf = Vec::new();
        d.save_json(&mut buf).unwrap();
        let e = AveragedDrift::new(c, MonotoneOperator::zero(1), s, &DomainSampler::cube(Dims::square(1), 1.0)).unwrap();
        assert_eq!(e.load_json(buf.as_slice()).unwrap(), 2);
        assert_eq!(e.get(&[0.5], &mu).unwrap(), a);
        assert!(DriftCacheFile::read(&b"{\"entries\":[{\"key\":\"k\",\"value\":[1],\"stderr\":[-1],\"samples\":1}]}"[..]).is_err());
    }

    #[test]
    fn mixing_fit_needs_signal() {
        let c = CoefficientSet::from_fns(
            "flat",
            Dims::square(1),
            |_x, _m, _y, o| o[0] = 1.0,
            zero,
            |_x, _m, y, o| o[0] = -y[0],
            |_x, _m, _y, o| o[0] = 1.0,
        );
        let r = mixing_decay_fit(&[0.0], &ParticleCloud::dirac(&[0.0]), Some(&[2.0]), &c, &MonotoneOperator::zero(1), &known(1.0), &[1.0]);
        assert!(matches!(r, Err(Error::InsufficientSignal(_))));
    }

    #[test]
    fn mixing_rates_are_ordered_in_beta() {
        let fit = |beta: f64| {
            let c = ou_frozen(OuFrozenParams {
                beta,
                ..Default::default()
            })
            .unwrap();
            let s = AveragingSettings {
                dt_f: Some(0.005),
                mixing_dt: Some(0.05),
                ..known(beta)
            };
            mixing_decay_fit(&[0.0], &ParticleCloud::dirac(&[0.0]), Some(&[3.0]), &c, &MonotoneOperator::zero(1), &s, &[0.0]).unwrap()
        };
        let (f1, f2) = (fit(1.0), fit(2.0));
        assert!(f2.rate > f1.rate, "{} vs {}", f1.rate, f2.rate);
        assert!((f1.rate - 2.0).abs() < 0.4);
    }

    #[test]
    fn averaged_integration_examples() {
        let z = MonotoneOperator::zero(1);
        let c = CoefficientSet::from_fns("m", Dims::square(1), zero, zero, |_x, _m, y, o| o[0] = -y[0], zero)
            .with_sigma1_y_independent(true);
        let decay = DriftSource::Analytic(Arc::new(|x: &[f64], _m: &ParticleCloud, o: &mut [f64]| o[0] = -x[0]));
        let cfg = SimConfig::new(1.0, 0.001, 1e-3, 1, vec![1.0], vec![0.0]);
        let tr = integrate_averaged(&decay, &c, &z, &cfg, AveragedMode::ThetaPositive).unwrap();
        assert!((tr.xs.last().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-3);

        let up = DriftSource::Analytic(Arc::new(|_x: &[f64], _m: &ParticleCloud, o: &mut [f64]| o[0] = 1.0));
        let neg = MonotoneOperator::indicator(ConvexSet::halfspace(vec![1.0], 0.0).unwrap());
        let cfg0 = SimConfig::new(1.0, 0.01, 1e-2, 1, vec![0.0], vec![0.0]);
        let tr = integrate_averaged(&up, &c, &neg, &cfg0, AveragedMode::ThetaPositive).unwrap();
        assert!(tr.xs.iter().all(|x| x[0] == 0.0));

        let none = DriftSource::Analytic(Arc::new(|_x: &[f64], _m: &ParticleCloud, o: &mut [f64]| o[0] = 0.0));
        let mut cfg3 = cfg0.clone();
        cfg3.x0 = vec![0.3];
        cfg3.n_particles = 4;
        let tr = integrate_averaged(&none, &c, &z, &cfg3, AveragedMode::ThetaZero).unwrap();
        assert!(tr.xs.iter().all(|x| x.iter().all(|&v| v == 0.3)));

        let dep = CoefficientSet::from_fns("m", Dims::square(1), zero, zero, zero, zero);
        assert!(matches!(
            integrate_averaged(&none, &dep, &z, &cfg3, AveragedMode::ThetaZero),
            Err(Error::Gate(_))
        ));
    }
}
