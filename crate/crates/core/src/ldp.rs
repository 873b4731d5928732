//! Large-deviation tools: controls, the skeleton equation, rate-function
//! minimization, the controlled particle system and Monte Carlo probes.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{averaged_update, integrate_averaged, AveragedMode, AveragedScratch, DriftSource};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, dist, dist_sq, norm_sq};
use crate::measure::ParticleCloud;
use crate::model::{check_assumptions, CoefficientSet, DomainSampler};
use crate::monotone_ops::MonotoneOperator;
use crate::rng::derive_seed;
use crate::sde_engine::{
    simulate_with, step_controlled, ControlTerm, RecordMode, RecordOptions, SimConfig, SlowFastEnsemble, Trajectory,
};

const L2_TOL: f64 = 1e-12;

/// Piecewise-constant control on a uniform grid; each value row is
/// `(slow block in R^d1, fast block in R^d2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub dt: f64,
    pub d1: usize,
    pub d2: usize,
    values: Vec<f64>,
    l2_norm_sq: f64,
    /// Radius of the bounded class the control was declared in.
    pub bound: Option<f64>,
}

impl ControlPath {
    pub fn new(dt: f64, d1: usize, d2: usize, values: Vec<f64>) -> Result<Self> {
        let w = d1 + d2;
        if !(dt > 0.0 && dt.is_finite()) || w == 0 || values.is_empty() || !values.len().is_multiple_of(w) {
            return Err(Error::input("control needs dt > 0 and whole rows of length d1 + d2"));
        }
        if !all_finite(&values) {
            return Err(Error::input("control values must be finite"));
        }
        let l2_norm_sq = norm_sq(&values) * dt;
        Ok(ControlPath {
            dt,
            d1,
            d2,
            values,
            l2_norm_sq,
            bound: None,
        })
    }

    pub fn zero(n_steps: usize, dt: f64, d1: usize, d2: usize) -> Self {
        Self::new(dt, d1, d2, vec![0.0; n_steps.max(1) * (d1 + d2)]).expect("valid zero control")
    }

    /// The same `(slow, fast)` value on every cell.
    pub fn constant(n_steps: usize, dt: f64, slow: &[f64], fast: &[f64]) -> Result<Self> {
        let row: Vec<f64> = slow.iter().chain(fast).copied().collect();
        Self::new(dt, slow.len(), fast.len(), row.repeat(n_steps.max(1)))
    }

    /// Builds a control from its slow block only; the fast block is zero.
    pub fn from_slow(dt: f64, d1: usize, d2: usize, slow: &[f64]) -> Result<Self> {
        if d1 == 0 || !slow.len().is_multiple_of(d1) {
            return Err(Error::input("slow block length must be a multiple of d1"));
        }
        let k = slow.len() / d1;
        let mut values = Vec::with_capacity(k * (d1 + d2));
        for row in slow.chunks_exact(d1) {
            values.extend_from_slice(row);
            values.extend(std::iter::repeat_n(0.0, d2));
        }
        Self::new(dt, d1, d2, values)
    }

    /// Declares membership of `{ |h|^2 <= bound }`.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if self.l2_norm_sq > bound * (1.0 + L2_TOL) {
            return Err(Error::input(format!(
                "control energy {} exceeds the declared bound {bound}",
                self.l2_norm_sq
            )));
        }
        self.bound = Some(bound);
        Ok(self)
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / (self.d1 + self.d2)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.d1 + self.d2;
        &self.values[k * w..(k + 1) * w]
    }

    /// Slow block on cell `k`.
    pub fn slow(&self, k: usize) -> &[f64] {
        &self.row(k)[..self.d1]
    }

    /// Fast block on cell `k`.
    pub fn fast(&self, k: usize) -> &[f64] {
        &self.row(k)[self.d1..]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.l2_norm_sq
    }

    /// Recomputes the energy and compares it with the stored value.
    pub fn check_norm(&self) -> bool {
        (norm_sq(&self.values) * self.dt - self.l2_norm_sq).abs() <= L2_TOL * self.l2_norm_sq.max(1.0)
    }

    /// Rows `t, s0.., f0..` at the left cell ends, plus a closing row at `T`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.d1).map(|j| format!("s{j}")));
        header.extend((0..self.d2).map(|j| format!("f{j}")));
        wtr.write_record(&header)?;
        let k = self.n_steps();
        for i in 0..=k {
            let mut row = vec![(i as f64 * self.dt).to_string()];
            row.extend(self.row(i.min(k - 1)).iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<control csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let d1 = cols.iter().filter(|c| c.starts_with('s')).count();
        let d2 = cols.iter().filter(|c| c.starts_with('f')).count();
        let mut expected = vec!["t".to_string()];
        expected.extend((0..d1).map(|j| format!("s{j}")));
        expected.extend((0..d2).map(|j| format!("f{j}")));
        if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() || d1 + d2 == 0 {
            return Err(Error::input("control CSV header must be t, s0.., f0.."));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::input(format!("bad number {s:?}"))))
                .collect::<Result<_>>()?;
            times.push(row[0]);
            values.push(row[1..].to_vec());
        }
        if times.len() < 2 {
            return Err(Error::input("control CSV needs at least two rows"));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) || times[0] != 0.0 {
            return Err(Error::input("control grid must start at 0 and increase"));
        }
        for (k, t) in times.iter().enumerate() {
            if (t - k as f64 * dt).abs() > 1e-9 * dt.max(1.0) * (k as f64 + 1.0) {
                return Err(Error::input("control grid must be uniform"));
            }
        }
        values.pop();
        Self::new(dt, d1, d2, values.concat())
    }
}

/// A deterministic slow path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPath {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major states, one row per time.
    pub xs: Vec<f64>,
}

impl SkeletonPath {
    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn endpoint(&self) -> &[f64] {
        self.x(self.len() - 1)
    }

    pub fn sup_gap(&self, other: &SkeletonPath) -> f64 {
        (0..self.len().min(other.len()))
            .map(|k| dist(self.x(k), other.x(k)))
            .fold(0.0, f64::max)
    }
}

/// The deterministic averaged path `Xbar^0` with a single particle, as a
/// baseline for the skeleton equation.
pub fn averaged_baseline(
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let mut c = cfg.clone();
    c.n_particles = 1;
    c.x0_spread = 0.0;
    integrate_averaged(drift, coeffs, a1, &c, AveragedMode::ThetaPositive)
}

fn baseline_dt(baseline: &Trajectory) -> Result<f64> {
    if baseline.n_particles != 1 || baseline.len() < 2 {
        return Err(Error::input("the skeleton baseline must be a single-particle path with at least one step"));
    }
    Ok(baseline.times[1] - baseline.times[0])
}

/// Resolvent-Euler solution of the skeleton equation driven by `pi1 h`,
/// with the measure argument frozen to the baseline's Dirac masses.
pub fn solve_skeleton(
    h: &ControlPath,
    baseline: &Trajectory,
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
) -> Result<SkeletonPath> {
    let dt = baseline_dt(baseline)?;
    let dims = coeffs.dims();
    if !coeffs.sigma1_y_independent {
        return Err(Error::Gate("the skeleton equation needs sigma1 independent of y".into()));
    }
    if h.d1 != dims.d1 || h.n_steps() != baseline.len() - 1 || (h.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::input("control grid or slow dimension does not match the baseline"));
    }
    let clouds: Vec<ParticleCloud> = (0..baseline.len()).map(|k| baseline.cloud(k)).collect::<Result<_>>()?;
    skeleton_with_clouds(h.values(), h.d1 + h.d2, dims.d1, baseline, &clouds, drift, coeffs, a1, dt)
}

#[allow(clippy::too_many_arguments)]
fn skeleton_with_clouds(
    values: &[f64],
    stride: usize,
    d1: usize,
    baseline: &Trajectory,
    clouds: &[ParticleCloud],
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    dt: f64,
) -> Result<SkeletonPath> {
    let dims = coeffs.dims();
    let mut x = baseline.x(0, 0).to_vec();
    let mut path = SkeletonPath {
        dim: dims.n,
        times: baseline.times.clone(),
        xs: Vec::with_capacity(baseline.len() * dims.n),
    };
    path.xs.extend_from_slice(&x);
    let mut scratch = AveragedScratch::new(dims);
    for (k, cloud) in clouds.iter().enumerate().take(baseline.len() - 1) {
        let u = &values[k * stride..k * stride + d1];
        averaged_update(drift, coeffs, a1, dt, cloud, &mut x, Some(u), None, &mut scratch)?;
        if !all_finite(&x) {
            return Err(Error::Numerical {
                message: "skeleton path diverged".into(),
                residual: f64::NAN,
            });
        }
        path.xs.extend_from_slice(&x);
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateTarget {
    Endpoint(Vec<f64>),
    /// One point per baseline grid time.
    Path(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySettings {
    pub initial_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Residual accepted as feasible.
    pub tol: f64,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        PenaltySettings {
            initial_penalty: 10.0,
            max_outer: 12,
            max_inner: 50,
            fd_step: 1e-5,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    /// `+inf` when the target is unreachable.
    pub rate: f64,
    pub control: ControlPath,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub infeasible: bool,
    pub final_penalty: f64,
}

/// JSON form of a rate result; the control lives in a separate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateRecord {
    /// `null` when infinite.
    #[serde(rename = "I")]
    pub rate: Option<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub infeasible: bool,
    pub control: String,
}

impl RateResult {
    pub fn record(&self, control_ref: &str) -> RateRecord {
        RateRecord {
            rate: self.rate.is_finite().then_some(self.rate),
            residual: if self.residual.is_finite() { self.residual } else { -1.0 },
            iterations: self.iterations,
            converged: self.converged,
            infeasible: self.infeasible,
            control: control_ref.to_string(),
        }
    }

    pub fn write_json<W: Write>(&self, w: W, control_ref: &str) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.record(control_ref))?;
        Ok(())
    }
}

impl RateRecord {
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let rec: RateRecord = serde_json::from_reader(r)?;
        if rec.rate.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::input("rate must be nonnegative"));
        }
        Ok(rec)
    }
}

struct RateProblem<'a> {
    baseline: &'a Trajectory,
    clouds: Vec<ParticleCloud>,
    drift: &'a DriftSource,
    coeffs: &'a CoefficientSet,
    a1: &'a MonotoneOperator,
    target: &'a RateTarget,
    dt: f64,
    d1: usize,
}

impl RateProblem<'_> {
    fn path(&self, slow: &[f64]) -> Result<SkeletonPath> {
        skeleton_with_clouds(slow, self.d1, self.d1, self.baseline, &self.clouds, self.drift, self.coeffs, self.a1, self.dt)
    }

    /// Residual vector; the path residual is weighted by `sqrt(dt)`.
    fn residual(&self, slow: &[f64]) -> Result<Vec<f64>> {
        let p = self.path(slow)?;
        Ok(match self.target {
            RateTarget::Endpoint(z) => p.endpoint().iter().zip(z).map(|(a, b)| a - b).collect(),
            RateTarget::Path(pts) => {
                let w = self.dt.sqrt();
                (1..p.len())
                    .flat_map(|k| p.x(k).iter().zip(&pts[k]).map(move |(a, b)| w * (a - b)).collect::<Vec<_>>())
                    .collect()
            }
        })
    }

    fn sup_residual(&self, slow: &[f64]) -> Result<f64> {
        let p = self.path(slow)?;
        Ok(match self.target {
            RateTarget::Endpoint(z) => dist(p.endpoint(), z),
            RateTarget::Path(pts) => (0..p.len()).map(|k| dist(p.x(k), &pts[k])).fold(0.0, f64::max),
        })
    }

    fn jacobian(&self, slow: &[f64], r0: &[f64], step: f64) -> Result<DMatrix<f64>> {
        let cols: Vec<Vec<f64>> = (0..slow.len())
            .into_par_iter()
            .map(|j| {
                let mut h = slow.to_vec();
                let e = step * h[j].abs().max(1.0);
                h[j] += e;
                let r = self.residual(&h)?;
                Ok(r.iter().zip(r0).map(|(a, b)| (a - b) / e).collect())
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(r0.len(), slow.len(), |i, j| cols[j][i]))
    }

    fn objective(&self, slow: &[f64], penalty: f64) -> Result<f64> {
        let r = self.residual(slow)?;
        Ok(0.5 * norm_sq(slow) * self.dt + penalty * norm_sq(&r))
    }
}

/// `I(target) = 1/2 inf |h|^2` over slow controls whose skeleton path hits
/// the target, by quadratic penalty with Gauss-Newton inner steps.
pub fn rate_function(
    target: &RateTarget,
    baseline: &Trajectory,
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    settings: &PenaltySettings,
) -> Result<RateResult> {
    let dt = baseline_dt(baseline)?;
    let dims = coeffs.dims();
    let k_steps = baseline.len() - 1;
    if !coeffs.sigma1_y_independent {
        return Err(Error::Gate("the skeleton equation needs sigma1 independent of y".into()));
    }
    if !(settings.initial_penalty > 0.0 && settings.fd_step > 0.0 && settings.tol > 0.0) || settings.max_outer == 0 {
        return Err(Error::input("penalty settings must be positive"));
    }
    let points: Vec<&[f64]> = match target {
        RateTarget::Endpoint(z) => vec![z.as_slice()],
        RateTarget::Path(pts) => {
            if pts.len() != baseline.len() {
                return Err(Error::input("target path must have one point per grid time"));
            }
            pts.iter().map(Vec::as_slice).collect()
        }
    };
    if points.iter().any(|p| p.len() != dims.n || !all_finite(p)) {
        return Err(Error::input("target dimension does not match the slow state"));
    }
    let zero = ControlPath::zero(k_steps, dt, dims.d1, dims.d2);
    if points.iter().any(|p| !a1.in_domain(p, 1e-10)) {
        return Ok(RateResult {
            rate: f64::INFINITY,
            control: zero,
            residual: f64::INFINITY,
            iterations: 0,
            converged: true,
            infeasible: true,
            final_penalty: 0.0,
        });
    }
    let prob = RateProblem {
        baseline,
        clouds: (0..baseline.len()).map(|k| baseline.cloud(k)).collect::<Result<_>>()?,
        drift,
        coeffs,
        a1,
        target,
        dt,
        d1: dims.d1,
    };
    let p = k_steps * dims.d1;
    let mut h = vec![0.0; p];
    let mut penalty = settings.initial_penalty;
    let mut iterations = 0;

    if prob.sup_residual(&h)? <= settings.tol {
        return Ok(RateResult {
            rate: 0.0,
            control: zero,
            residual: prob.sup_residual(&h)?,
            iterations: 0,
            converged: true,
            infeasible: false,
            final_penalty: penalty,
        });
    }

    for outer in 0..settings.max_outer {
        if outer > 0 {
            penalty *= 2.0;
        }
        let mut lambda = 1e-6;
        let mut f = prob.objective(&h, penalty)?;
        for _ in 0..settings.max_inner {
            iterations += 1;
            let r = prob.residual(&h)?;
            let jac = prob.jacobian(&h, &r, settings.fd_step)?;
            let hv = DVector::from_column_slice(&h);
            let rv = DVector::from_column_slice(&r);
            let grad = &hv * dt + jac.transpose() * &rv * (2.0 * penalty);
            let gn = jac.transpose() * &jac * (2.0 * penalty);
            let mut improved = false;
            for _ in 0..20 {
                let mut m = gn.clone();
                for i in 0..p {
                    m[(i, i)] += dt + lambda;
                }
                let Some(chol) = m.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&grad));
                let cand: Vec<f64> = h.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let fc = prob.objective(&cand, penalty)?;
                if fc < f {
                    let rel = (f - fc) / f.abs().max(1e-300);
                    h = cand;
                    f = fc;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
    }

    // Feasibility restoration: minimum-norm Gauss-Newton correction of the residual.
    for _ in 0..5 {
        let r = prob.residual(&h)?;
        if norm_sq(&r).sqrt() <= settings.tol * 1e-3 {
            break;
        }
        let jac = prob.jacobian(&h, &r, settings.fd_step)?;
        let jjt = &jac * jac.transpose();
        let Some(chol) = jjt.clone().cholesky() else { break };
        let w = chol.solve(&DVector::from_column_slice(&r));
        let corr = jac.transpose() * w;
        let cand: Vec<f64> = h.iter().zip(corr.iter()).map(|(a, b)| a - b).collect();
        if norm_sq(&prob.residual(&cand)?) < norm_sq(&r) {
            h = cand;
        } else {
            break;
        }
        iterations += 1;
    }

    let residual = prob.sup_residual(&h)?;
    let control = ControlPath::from_slow(dt, dims.d1, dims.d2, &h)?;
    let converged = residual <= settings.tol;
    let infeasible = !converged && residual > settings.tol.sqrt();
    Ok(RateResult {
        rate: if infeasible { f64::INFINITY } else { 0.5 * control.l2_norm_sq() },
        control,
        residual,
        iterations,
        converged,
        infeasible,
        final_penalty: penalty,
    })
}

fn check_sigma2_gate(coeffs: &CoefficientSet, cfg: &SimConfig) -> Result<()> {
    if coeffs.sigma2_bound.is_none() {
        return Err(Error::Gate("sigma2 has no declared uniform bound".into()));
    }
    let sampler = DomainSampler::around(&cfg.x0, &cfg.y0, 3.0, cfg.seed);
    check_assumptions(coeffs, &sampler, 500)?.require_sigma2_bounded()
}

/// The controlled slow-fast system. The measure argument is replayed from
/// `companion`, the uncontrolled run with the same seed; `u` enters the slow
/// drift through `sigma1` and the fast drift through `sigma2 / sqrt(delta eps)`.
pub fn simulate_controlled(
    u: &ControlPath,
    companion: &Trajectory,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let dims = coeffs.dims();
    if (cfg.theta - 0.5).abs() > 1e-12 {
        return Err(Error::input("the controlled system is defined for theta = 1/2"));
    }
    check_sigma2_gate(coeffs, cfg)?;
    if u.d1 != dims.d1 || u.d2 != dims.d2 || u.n_steps() != cfg.n_steps() || (u.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::input("control shape does not match the config grid"));
    }
    if let Some(b) = u.bound {
        if u.l2_norm_sq() > b * (1.0 + L2_TOL) {
            return Err(Error::input("control exceeds its declared bound"));
        }
    }
    if companion.len() != cfg.n_steps() + 1 || companion.stride != 1 || companion.n_particles != cfg.n_particles {
        return Err(Error::input("companion trajectory does not match the config grid"));
    }
    let fast_scale = 1.0 / (cfg.delta * cfg.epsilon).sqrt();
    let mut ens = SlowFastEnsemble::initial(cfg, a1)?;
    let mut traj = Trajectory::with_mode(&ens, cfg.seed, RecordMode::Full, 1);
    traj.record(&ens);
    for n in 0..cfg.n_steps() {
        let law = companion.cloud(n)?;
        let active = u.row(n).iter().any(|v| *v != 0.0);
        let term = ControlTerm {
            slow: u.slow(n),
            fast: u.fast(n),
            fast_scale,
        };
        match step_controlled(&mut ens, coeffs, a1, a2, cfg, n, &law, active.then_some(&term)) {
            Ok(()) => {}
            Err(Error::Divergence { t, .. }) => {
                return Err(Error::Divergence {
                    t,
                    partial: Box::new(traj),
                })
            }
            Err(e) => return Err(e),
        }
        traj.record(&ens);
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakGap {
    pub k: u32,
    pub omega: f64,
    pub gap: f64,
    pub l2_norm_sq: f64,
}

/// Sup-norm gaps between skeleton paths driven by `h + A sin(omega_k t)`
/// (on every slow component) and by `h`, with `omega_k = 2^k pi / T`.
/// Cells carry the exact cell average of the sine.
pub fn weak_continuity_check(
    h: &ControlPath,
    amplitude: f64,
    ks: &[u32],
    baseline: &Trajectory,
    drift: &DriftSource,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
) -> Result<Vec<WeakGap>> {
    let reference = solve_skeleton(h, baseline, drift, coeffs, a1)?;
    let t_end = h.dt * h.n_steps() as f64;
    ks.par_iter()
        .map(|&k| {
            let omega = 2f64.powi(k as i32) * std::f64::consts::PI / t_end;
            let mut values = h.values().to_vec();
            let w = h.d1 + h.d2;
            for cell in 0..h.n_steps() {
                let (t0, t1) = (cell as f64 * h.dt, (cell + 1) as f64 * h.dt);
                let avg = amplitude * ((omega * t0).cos() - (omega * t1).cos()) / (omega * h.dt);
                for j in 0..h.d1 {
                    values[cell * w + j] += avg;
                }
            }
            let mut hk = ControlPath::new(h.dt, h.d1, h.d2, values)?;
            if let Some(b) = h.bound {
                hk = hk.with_bound(b)?;
            }
            let path = solve_skeleton(&hk, baseline, drift, coeffs, a1)?;
            Ok(WeakGap {
                k,
                omega,
                gap: path.sup_gap(&reference),
                l2_norm_sq: hk.l2_norm_sq(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epsilon: f64,
    pub delta: f64,
    pub hits: usize,
    pub trials: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `-eps log p_hat`; absent when no hits were observed.
    pub neg_eps_log_p: Option<f64>,
    /// `-eps log ci_high`, the bound available without hits.
    pub neg_eps_log_upper: f64,
    pub upper_only: bool,
}

/// Wilson score interval at `z`.
pub fn wilson_interval(hits: usize, trials: usize, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub const MIN_PROBE_PATHS: usize = 1000;

/// Monte Carlo estimate of `P(sup_t |X_t - Xbar0_t| > eta)` for each
/// `epsilon`, with `delta = epsilon^delta_exponent` and `theta = 1/2`.
#[allow(clippy::too_many_arguments)]
pub fn rare_event_probe(
    eta: f64,
    epsilons: &[f64],
    delta_exponent: f64,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    drift: &DriftSource,
    cfg: &SimConfig,
    n_mc: usize,
) -> Result<Vec<ProbeRow>> {
    if n_mc < MIN_PROBE_PATHS {
        return Err(Error::input(format!("rare-event probe needs at least {MIN_PROBE_PATHS} paths")));
    }
    if !(delta_exponent > 1.0) {
        return Err(Error::input("delta must vanish faster than epsilon (exponent > 1)"));
    }
    if !(eta >= 0.0) {
        return Err(Error::input("eta must be nonnegative"));
    }
    let baseline = averaged_baseline(drift, coeffs, a1, cfg)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut c = cfg.clone();
        c.epsilon = eps;
        c.delta = eps.powf(delta_exponent);
        c.theta = 0.5;
        c.fast_substeps = None;
        c.validate()?;
        let per = c.n_particles;
        let systems = n_mc.div_ceil(per);
        let counts: Vec<usize> = (0..systems)
            .into_par_iter()
            .map(|s| {
                let mut cs = c.clone();
                cs.seed = derive_seed(cfg.seed, &[s as u64, eps.to_bits()]);
                let mut sup = vec![0.0f64; per];
                let mut k = 0usize;
                let mut obs = |e: &SlowFastEnsemble| {
                    let b = baseline.x(k, 0);
                    for (i, m) in sup.iter_mut().enumerate() {
                        *m = m.max(dist_sq(e.x(i), b));
                    }
                    k += 1;
                };
                simulate_with(
                    coeffs,
                    a1,
                    a2,
                    &cs,
                    RecordOptions {
                        mode: RecordMode::Reduced,
                        stride: usize::MAX,
                        observer: Some(&mut obs),
                    },
                )?;
                Ok(sup.iter().filter(|&&m| m.sqrt() > eta).count())
            })
            .collect::<Result<_>>()?;
        let hits: usize = counts.iter().sum();
        let trials = systems * per;
        let (lo, hi) = wilson_interval(hits, trials, 1.96);
        let p_hat = hits as f64 / trials as f64;
        rows.push(ProbeRow {
            epsilon: eps,
            delta: c.delta,
            hits,
            trials,
            p_hat,
            ci_low: lo,
            ci_high: hi,
            neg_eps_log_p: (hits > 0).then(|| -eps * p_hat.ln() + 0.0),
            neg_eps_log_upper: -eps * hi.ln(),
            upper_only: hits == 0,
        });
    }
    Ok(rows)
}
