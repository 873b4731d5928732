//! Resolvent-Euler time stepping for the slow-fast particle system, the
//! Picard iteration and the frozen-block (Khasminskii) auxiliary process.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dist_sq, mat_vec_acc};
use crate::measure::ParticleCloud;
use crate::model::{CoefficientSet, Dims, FrozenCoefficients};
use crate::monotone_ops::MonotoneOperator;
use crate::rng::{fill_normal, stream, StreamRole};

pub const DEFAULT_PARTICLES: usize = 512;
/// Particles per rayon task.
const MIN_CHUNK: usize = 8;

fn default_particles() -> usize {
    DEFAULT_PARTICLES
}

fn default_one() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "default_one")]
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    /// `None` means `ceil(10 dt / delta)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_substeps: Option<usize>,
    /// Standard deviation of an optional Gaussian spread of the initial
    /// slow states around `x0` (projected onto the slow domain).
    #[serde(default)]
    pub x0_spread: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    /// A config with `theta = 0`, `gamma = 1/2`, `epsilon = 1` and automatic substeps.
    pub fn new(t_end: f64, dt: f64, delta: f64, n_particles: usize, x0: Vec<f64>, y0: Vec<f64>) -> Self {
        SimConfig {
            t_end,
            dt,
            epsilon: 1.0,
            delta,
            theta: 0.0,
            gamma: 0.5,
            n_particles,
            x0,
            y0,
            fast_substeps: None,
            x0_spread: 0.0,
            seed: 0,
        }
    }

    pub fn substeps(&self) -> usize {
        self.fast_substeps
            .unwrap_or_else(|| ((10.0 * self.dt / self.delta) * (1.0 - 1e-12)).ceil().max(1.0) as usize)
    }

    pub fn fast_step(&self) -> f64 {
        self.dt / self.substeps() as f64
    }

    /// Block length `delta^gamma`.
    pub fn block(&self) -> f64 {
        self.delta.powf(self.gamma)
    }

    /// Block length in macro steps.
    pub fn block_steps(&self) -> usize {
        ((self.block() / self.dt).floor() as usize).max(1)
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn slow_noise_scale(&self) -> f64 {
        self.epsilon.powf(self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::input(m));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("T must be positive, got {}", self.t_end));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_end * (1.0 + 1e-12)) {
            return bad(format!("dt must lie in (0, T], got {}", self.dt));
        }
        let n = (self.t_end / self.dt).round();
        if (n * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return bad(format!("T = {} is not a multiple of dt = {}", self.t_end, self.dt));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be >= 0, got {}", self.theta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        let block = self.block();
        if block < self.dt * (1.0 - 1e-12) || block > self.t_end * (1.0 + 1e-12) {
            return bad(format!(
                "block delta^gamma = {block} must satisfy dt <= block <= T"
            ));
        }
        if self.n_particles == 0 {
            return bad("n_particles must be at least 1".into());
        }
        if self.fast_substeps == Some(0) {
            return bad("fast_substeps must be at least 1".into());
        }
        if self.fast_step() > self.delta / 10.0 * (1.0 + 1e-12) {
            return bad(format!(
                "fast step dt/substeps = {} exceeds delta/10 = {}",
                self.fast_step(),
                self.delta / 10.0
            ));
        }
        if !all_finite(&self.x0) || !all_finite(&self.y0) || self.x0.is_empty() || self.y0.is_empty() {
            return bad("x0 and y0 must be nonempty and finite".into());
        }
        if !(self.x0_spread >= 0.0 && self.x0_spread.is_finite()) {
            return bad("x0_spread must be >= 0".into());
        }
        Ok(())
    }

    fn check_model(&self, dims: Dims, a1: &MonotoneOperator, a2: &MonotoneOperator) -> Result<()> {
        self.validate()?;
        if self.x0.len() != dims.n || self.y0.len() != dims.m {
            return Err(Error::input(format!(
                "initial point dimensions ({}, {}) do not match the model ({}, {})",
                self.x0.len(),
                self.y0.len(),
                dims.n,
                dims.m
            )));
        }
        if a1.dim() != dims.n || a2.dim() != dims.m {
            return Err(Error::input("operator dimensions do not match the model"));
        }
        if !a1.in_domain(&self.x0, 1e-10) && self.x0_spread == 0.0 {
            return Err(Error::input("x0 must lie in the closure of D(A1)"));
        }
        if !a2.in_domain(&self.y0, 1e-10) {
            return Err(Error::input("y0 must lie in the closure of D(A2)"));
        }
        Ok(())
    }
}

/// Scalar parameters of one macro step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepParams {
    pub dt: f64,
    pub substeps: usize,
    pub h_fast: f64,
    pub inv_delta: f64,
    pub fast_noise: f64,
    pub slow_noise: f64,
}

impl StepParams {
    pub fn from_config(cfg: &SimConfig) -> Self {
        let substeps = cfg.substeps();
        StepParams {
            dt: cfg.dt,
            substeps,
            h_fast: cfg.dt / substeps as f64,
            inv_delta: 1.0 / cfg.delta,
            fast_noise: 1.0 / cfg.delta.sqrt(),
            slow_noise: cfg.slow_noise_scale(),
        }
    }
}

/// Additive control directions: `sigma1 * slow` enters the slow drift and
/// `scale * sigma2 * fast` the fast drift.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ControlTerm<'a> {
    pub slow: &'a [f64],
    pub fast: &'a [f64],
    pub fast_scale: f64,
}

/// Per-thread scratch buffers.
pub(crate) struct Scratch {
    b: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    by: Vec<f64>,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
}

impl Scratch {
    pub fn new(dims: Dims, substeps: usize) -> Self {
        Scratch {
            b: vec![0.0; dims.n],
            s1: vec![0.0; dims.n * dims.d1],
            s2: vec![0.0; dims.m * dims.d2],
            by: vec![0.0; dims.m],
            dw1: vec![0.0; dims.d1],
            dw2: vec![0.0; substeps * dims.d2],
        }
    }

    /// Draws the slow and fast increments of particle `i` at macro step `n`.
    pub fn draw(&mut self, seed: u64, i: usize, n: usize, p: &StepParams) {
        fill_normal(&mut stream(seed, i as u64, n as u64, StreamRole::Slow), p.dt, &mut self.dw1);
        fill_normal(&mut stream(seed, i as u64, n as u64, StreamRole::Fast), p.h_fast, &mut self.dw2);
    }

    pub fn set_fast_noise(&mut self, dw: &[f64]) {
        self.dw2.copy_from_slice(dw);
    }

    pub fn draw_fast(&mut self, seed: u64, i: usize, n: usize, p: &StepParams) {
        fill_normal(&mut stream(seed, i as u64, n as u64, StreamRole::Fast), p.h_fast, &mut self.dw2);
    }
}

/// Advances `y` over the fast substeps with frozen coefficients, using the
/// fast increments in `scratch.dw2`. Returns the resolvent displacement.
pub(crate) fn fast_substeps(
    frozen: &dyn FrozenCoefficients,
    a2: &MonotoneOperator,
    p: &StepParams,
    control: Option<&ControlTerm>,
    y: &mut [f64],
    scratch: &mut Scratch,
) -> Result<f64> {
    let d2 = scratch.s2.len() / y.len().max(1);
    let mut dk = 0.0;
    for s in 0..p.substeps {
        frozen.b2(y, &mut scratch.by);
        frozen.sigma2(y, &mut scratch.s2);
        let dw = &scratch.dw2[s * d2..(s + 1) * d2];
        for (yi, bi) in y.iter_mut().zip(&scratch.by) {
            *yi += p.h_fast * p.inv_delta * bi;
        }
        mat_vec_acc(&scratch.s2, dw, p.fast_noise, y);
        if let Some(c) = control {
            mat_vec_acc(&scratch.s2, c.fast, p.h_fast * c.fast_scale, y);
        }
        dk += a2.resolve_in_place(p.h_fast, y)?;
    }
    Ok(dk)
}

/// Slow predictor-resolvent update of `x` given the already-advanced `y`.
/// `frozen` must be bound at the start-of-step `x`.
pub(crate) fn slow_update(
    frozen: &dyn FrozenCoefficients,
    a1: &MonotoneOperator,
    p: &StepParams,
    control: Option<&ControlTerm>,
    x: &mut [f64],
    y: &[f64],
    scratch: &mut Scratch,
) -> Result<f64> {
    frozen.b1(y, &mut scratch.b);
    frozen.sigma1(y, &mut scratch.s1);
    for (xi, bi) in x.iter_mut().zip(&scratch.b) {
        *xi += p.dt * bi;
    }
    if p.slow_noise != 0.0 {
        mat_vec_acc(&scratch.s1, &scratch.dw1, p.slow_noise, x);
    }
    if let Some(c) = control {
        mat_vec_acc(&scratch.s1, c.slow, p.dt, x);
    }
    a1.resolve_in_place(p.dt, x)
}

/// One full macro step for a single particle. Coefficients see `cloud`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_particle(
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    p: &StepParams,
    control: Option<&ControlTerm>,
    cloud: &ParticleCloud,
    x: &mut [f64],
    y: &mut [f64],
    scratch: &mut Scratch,
) -> Result<(f64, f64)> {
    let x_old = x.to_vec();
    let frozen = coeffs.freeze(&x_old, cloud);
    let dk2 = fast_substeps(frozen.as_ref(), a2, p, control, y, scratch)?;
    let dk1 = slow_update(frozen.as_ref(), a1, p, control, x, y, scratch)?;
    Ok((dk1, dk2))
}

/// The `N`-particle state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowFastEnsemble {
    pub t: f64,
    dim_x: usize,
    dim_y: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    k1_var: Vec<f64>,
    k2_var: Vec<f64>,
    cloud: ParticleCloud,
}

impl SlowFastEnsemble {
    pub fn new(t: f64, dim_x: usize, xs: Vec<f64>, dim_y: usize, ys: Vec<f64>) -> Result<Self> {
        if dim_x == 0 || dim_y == 0 || xs.is_empty() || !xs.len().is_multiple_of(dim_x) {
            return Err(Error::input("ensemble needs positive dimensions and whole particles"));
        }
        let n = xs.len() / dim_x;
        if ys.len() != n * dim_y {
            return Err(Error::input("X and Y particle counts differ"));
        }
        let cloud = ParticleCloud::new(dim_x, xs.clone())?;
        Ok(SlowFastEnsemble {
            t,
            dim_x,
            dim_y,
            xs,
            ys,
            k1_var: vec![0.0; n],
            k2_var: vec![0.0; n],
            cloud,
        })
    }

    /// Initial ensemble at `(x0, y0)`, optionally spread around `x0`.
    pub fn initial(cfg: &SimConfig, a1: &MonotoneOperator) -> Result<Self> {
        let n = cfg.n_particles;
        let mut xs = Vec::with_capacity(n * cfg.x0.len());
        let mut buf = vec![0.0; cfg.x0.len()];
        for i in 0..n {
            let mut x = cfg.x0.clone();
            if cfg.x0_spread > 0.0 {
                let mut rng = stream(cfg.seed, i as u64, 0, StreamRole::Init);
                fill_normal(&mut rng, cfg.x0_spread * cfg.x0_spread, &mut buf);
                for (xi, b) in x.iter_mut().zip(&buf) {
                    *xi += b;
                }
                a1.resolve_in_place(1.0, &mut x)?;
            }
            xs.extend_from_slice(&x);
        }
        let ys = cfg.y0.repeat(n);
        Self::new(0.0, cfg.x0.len(), xs, cfg.y0.len(), ys)
    }

    pub fn len(&self) -> usize {
        self.k1_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k1_var.is_empty()
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.ys[i * self.dim_y..(i + 1) * self.dim_y]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn k1_var(&self) -> &[f64] {
        &self.k1_var
    }

    pub fn k2_var(&self) -> &[f64] {
        &self.k2_var
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    fn rebuild_cloud(&mut self) -> Result<()> {
        self.cloud = ParticleCloud::new(self.dim_x, self.xs.clone())?;
        Ok(())
    }

    fn is_finite(&self) -> bool {
        all_finite(&self.xs) && all_finite(&self.ys)
    }
}

/// Explicit Gaussian increments for one macro step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// `N x d1`, each entry with variance `dt`.
    pub slow: Vec<f64>,
    /// `N x substeps x d2`, each entry with variance `dt / substeps`.
    pub fast: Vec<f64>,
}

impl StepNoise {
    /// The increments `simulate` would use at macro step `n`.
    pub fn from_streams(cfg: &SimConfig, dims: Dims, n: usize) -> Self {
        let p = StepParams::from_config(cfg);
        let mut scratch = Scratch::new(dims, p.substeps);
        let mut slow = Vec::with_capacity(cfg.n_particles * dims.d1);
        let mut fast = Vec::with_capacity(cfg.n_particles * p.substeps * dims.d2);
        for i in 0..cfg.n_particles {
            scratch.draw(cfg.seed, i, n, &p);
            slow.extend_from_slice(&scratch.dw1);
            fast.extend_from_slice(&scratch.dw2);
        }
        StepNoise { slow, fast }
    }
}

enum NoiseSource<'a> {
    Explicit(&'a StepNoise),
    Streams { seed: u64, n: usize },
}

fn step_impl(
    ens: &mut SlowFastEnsemble,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    p: &StepParams,
    noise: NoiseSource,
) -> Result<()> {
    step_general(ens, coeffs, a1, a2, p, noise, None, None)
}

/// Controlled step: the coefficients see `law` instead of the ensemble's own
/// cloud, and `control` enters both drifts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_controlled(
    ens: &mut SlowFastEnsemble,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
    n: usize,
    law: &ParticleCloud,
    control: Option<&ControlTerm>,
) -> Result<()> {
    let p = StepParams::from_config(cfg);
    step_general(ens, coeffs, a1, a2, &p, NoiseSource::Streams { seed: cfg.seed, n }, Some(law), control)?;
    ens.t = (n + 1) as f64 * cfg.dt;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_general(
    ens: &mut SlowFastEnsemble,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    p: &StepParams,
    noise: NoiseSource,
    law: Option<&ParticleCloud>,
    control: Option<&ControlTerm>,
) -> Result<()> {
    let dims = coeffs.dims();
    let (dx, dy) = (ens.dim_x, ens.dim_y);
    let cloud = law.unwrap_or(&ens.cloud);
    let t = ens.t;
    let results: Vec<Result<()>> = ens
        .xs
        .par_chunks_mut(dx)
        .zip(ens.ys.par_chunks_mut(dy))
        .zip(ens.k1_var.par_iter_mut().zip(ens.k2_var.par_iter_mut()))
        .enumerate()
        .with_min_len(MIN_CHUNK)
        .map_init(
            || Scratch::new(dims, p.substeps),
            |scratch, (i, ((x, y), (k1, k2)))| {
                match &noise {
                    NoiseSource::Explicit(nz) => {
                        scratch.dw1.copy_from_slice(&nz.slow[i * dims.d1..(i + 1) * dims.d1]);
                        let w = p.substeps * dims.d2;
                        scratch.dw2.copy_from_slice(&nz.fast[i * w..(i + 1) * w]);
                    }
                    NoiseSource::Streams { seed, n } => scratch.draw(*seed, i, *n, p),
                }
                let (dk1, dk2) = advance_particle(coeffs, a1, a2, p, control, cloud, x, y, scratch)
                    .map_err(|e| Error::Step {
                        particle: i,
                        source: Box::new(e),
                    })?;
                *k1 += dk1;
                *k2 += dk2;
                Ok(())
            },
        )
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    ens.t = t + p.dt;
    if !ens.is_finite() {
        return Err(Error::Divergence {
            t: ens.t,
            partial: Box::new(Trajectory::empty(ens, 0)),
        });
    }
    ens.rebuild_cloud()
}

/// Advances every particle by one macro step with the given increments.
pub fn step(
    ens: &SlowFastEnsemble,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
    noise: &StepNoise,
) -> Result<SlowFastEnsemble> {
    let p = StepParams::from_config(cfg);
    let dims = coeffs.dims();
    let n = ens.len();
    if dims.n != ens.dim_x || dims.m != ens.dim_y {
        return Err(Error::input("ensemble dimensions do not match the model"));
    }
    if noise.slow.len() != n * dims.d1 || noise.fast.len() != n * p.substeps * dims.d2 {
        return Err(Error::input(format!(
            "noise shape mismatch: expected {} slow and {} fast increments",
            n * dims.d1,
            n * p.substeps * dims.d2
        )));
    }
    let mut next = ens.clone();
    step_impl(&mut next, coeffs, a1, a2, &p, NoiseSource::Explicit(noise))?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    /// X, Y, k1_var, k2_var of every particle.
    Full,
    /// X of every particle plus cloud mean and second moment.
    Reduced,
}

/// Snapshots on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mode: RecordMode,
    pub seed: u64,
    pub n_particles: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    /// Macro steps between consecutive snapshots.
    pub stride: usize,
    pub times: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub k1_var: Vec<Vec<f64>>,
    pub k2_var: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub second_moments: Vec<f64>,
}

impl Trajectory {
    fn empty(ens: &SlowFastEnsemble, seed: u64) -> Self {
        Trajectory {
            mode: RecordMode::Full,
            seed,
            n_particles: ens.len(),
            dim_x: ens.dim_x,
            dim_y: ens.dim_y,
            stride: 1,
            times: Vec::new(),
            xs: Vec::new(),
            ys: Vec::new(),
            k1_var: Vec::new(),
            k2_var: Vec::new(),
            means: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub(crate) fn with_mode(ens: &SlowFastEnsemble, seed: u64, mode: RecordMode, stride: usize) -> Self {
        Trajectory {
            mode,
            stride,
            ..Self::empty(ens, seed)
        }
    }

    /// A reduced-mode trajectory without fast components.
    pub fn slow_only(seed: u64, n_particles: usize, dim_x: usize, stride: usize) -> Self {
        Trajectory {
            mode: RecordMode::Reduced,
            seed,
            n_particles,
            dim_x,
            dim_y: 0,
            stride,
            times: Vec::new(),
            xs: Vec::new(),
            ys: Vec::new(),
            k1_var: Vec::new(),
            k2_var: Vec::new(),
            means: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn record_slow(&mut self, t: f64, cloud: &ParticleCloud) {
        self.times.push(t);
        self.xs.push(cloud.raw().to_vec());
        self.means.push(cloud.mean().to_vec());
        self.second_moments.push(cloud.second_moment());
    }

    pub fn record(&mut self, ens: &SlowFastEnsemble) {
        self.times.push(ens.t);
        self.xs.push(ens.xs.clone());
        self.means.push(ens.cloud.mean().to_vec());
        self.second_moments.push(ens.cloud.second_moment());
        if self.mode == RecordMode::Full {
            self.ys.push(ens.ys.clone());
            self.k1_var.push(ens.k1_var.clone());
            self.k2_var.push(ens.k2_var.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, k: usize, i: usize) -> &[f64] {
        &self.xs[k][i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn y(&self, k: usize, i: usize) -> &[f64] {
        &self.ys[k][i * self.dim_y..(i + 1) * self.dim_y]
    }

    pub fn cloud(&self, k: usize) -> Result<ParticleCloud> {
        ParticleCloud::new(self.dim_x, self.xs[k].clone())
    }

    pub fn ensemble(&self, k: usize) -> Result<SlowFastEnsemble> {
        if self.mode != RecordMode::Full {
            return Err(Error::input("ensemble reconstruction needs a full-mode trajectory"));
        }
        let mut e = SlowFastEnsemble::new(self.times[k], self.dim_x, self.xs[k].clone(), self.dim_y, self.ys[k].clone())?;
        e.k1_var = self.k1_var[k].clone();
        e.k2_var = self.k2_var[k].clone();
        Ok(e)
    }

    /// `sup_k mean_i |X_k^i - Z_k^i|^2` against another trajectory on the same grid.
    pub fn sup_mean_sq_gap(&self, other: &Trajectory) -> Result<f64> {
        if self.times.len() != other.times.len() || self.n_particles != other.n_particles || self.dim_x != other.dim_x {
            return Err(Error::input("trajectories are not on a common grid"));
        }
        Ok(self
            .xs
            .iter()
            .zip(&other.xs)
            .map(|(a, b)| dist_sq(a, b) / self.n_particles as f64)
            .fold(0.0, f64::max))
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        match self.mode {
            RecordMode::Full => {
                h.push("particle_id".into());
                h.extend((0..self.dim_x).map(|j| format!("x{j}")));
                h.extend((0..self.dim_y).map(|j| format!("y{j}")));
                h.push("k1_var".into());
                h.push("k2_var".into());
            }
            RecordMode::Reduced => {
                h.extend((0..self.dim_x).map(|j| format!("mean{j}")));
                h.push("second_moment".into());
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.header())?;
        for k in 0..self.len() {
            let t = self.times[k].to_string();
            match self.mode {
                RecordMode::Full => {
                    for i in 0..self.n_particles {
                        let mut row = vec![t.clone(), i.to_string()];
                        row.extend(self.x(k, i).iter().map(f64::to_string));
                        row.extend(self.y(k, i).iter().map(f64::to_string));
                        row.push(self.k1_var[k][i].to_string());
                        row.push(self.k2_var[k][i].to_string());
                        wtr.write_record(&row)?;
                    }
                }
                RecordMode::Reduced => {
                    let mut row = vec![t];
                    row.extend(self.means[k].iter().map(f64::to_string));
                    row.push(self.second_moments[k].to_string());
                    wtr.write_record(&row)?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
        Ok(())
    }

    /// Reads a full-mode trajectory CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let dim_x = cols.iter().filter(|c| c.starts_with('x')).count();
        let dim_y = cols.iter().filter(|c| c.starts_with('y')).count();
        let expected: Vec<String> = {
            let mut h = vec!["t".to_string(), "particle_id".to_string()];
            h.extend((0..dim_x).map(|j| format!("x{j}")));
            h.extend((0..dim_y).map(|j| format!("y{j}")));
            h.push("k1_var".into());
            h.push("k2_var".into());
            h
        };
        if dim_x == 0 || dim_y == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::input("trajectory CSV header is not a full-mode header"));
        }
        let mut times: Vec<f64> = Vec::new();
        let mut rows: Vec<Vec<(usize, Vec<f64>)>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::input(format!("bad number {s:?}"))))
                .collect::<Result<_>>()?;
            if !all_finite(&vals) {
                return Err(Error::input("trajectory CSV contains a non-finite value"));
            }
            let t = vals[0];
            let id = vals[1];
            if id < 0.0 || id.fract() != 0.0 || id > 1e9 {
                return Err(Error::input("particle_id must be a non-negative integer"));
            }
            if times.last() != Some(&t) {
                if times.last().is_some_and(|&last| t <= last) {
                    return Err(Error::input("trajectory times must be strictly increasing"));
                }
                times.push(t);
                rows.push(Vec::new());
            }
            rows.last_mut().expect("row group").push((id as usize, vals[2..].to_vec()));
        }
        if times.is_empty() {
            return Err(Error::input("trajectory CSV has no rows"));
        }
        let n = rows[0].len();
        let mut traj = Trajectory {
            mode: RecordMode::Full,
            seed: 0,
            n_particles: n,
            dim_x,
            dim_y,
            stride: 1,
            times,
            xs: Vec::new(),
            ys: Vec::new(),
            k1_var: Vec::new(),
            k2_var: Vec::new(),
            means: Vec::new(),
            second_moments: Vec::new(),
        };
        for group in rows {
            if group.len() != n || group.iter().enumerate().any(|(i, (id, _))| *id != i) {
                return Err(Error::input("every time must list particles 0..N in order"));
            }
            let mut xs = Vec::with_capacity(n * dim_x);
            let mut ys = Vec::with_capacity(n * dim_y);
            let mut k1 = Vec::with_capacity(n);
            let mut k2 = Vec::with_capacity(n);
            for (_, v) in group {
                xs.extend_from_slice(&v[..dim_x]);
                ys.extend_from_slice(&v[dim_x..dim_x + dim_y]);
                k1.push(v[dim_x + dim_y]);
                k2.push(v[dim_x + dim_y + 1]);
            }
            let cloud = ParticleCloud::new(dim_x, xs.clone())?;
            traj.means.push(cloud.mean().to_vec());
            traj.second_moments.push(cloud.second_moment());
            traj.xs.push(xs);
            traj.ys.push(ys);
            traj.k1_var.push(k1);
            traj.k2_var.push(k2);
        }
        Ok(traj)
    }
}

/// Advances `ens` through macro step `n` with the increments `simulate` uses.
pub fn step_streams(
    ens: &mut SlowFastEnsemble,
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
    n: usize,
) -> Result<()> {
    let p = StepParams::from_config(cfg);
    step_impl(ens, coeffs, a1, a2, &p, NoiseSource::Streams { seed: cfg.seed, n })?;
    ens.t = (n + 1) as f64 * cfg.dt;
    Ok(())
}

pub struct RecordOptions<'a> {
    pub mode: RecordMode,
    pub stride: usize,
    /// Called after every macro step (and once on the initial ensemble).
    pub observer: Option<&'a mut dyn FnMut(&SlowFastEnsemble)>,
}

impl Default for RecordOptions<'_> {
    fn default() -> Self {
        RecordOptions {
            mode: RecordMode::Full,
            stride: 1,
            observer: None,
        }
    }
}

/// Full-mode simulation recording every macro step.
pub fn simulate(
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    simulate_with(coeffs, a1, a2, cfg, RecordOptions::default())
}

pub fn simulate_with(
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
    mut opts: RecordOptions,
) -> Result<Trajectory> {
    cfg.check_model(coeffs.dims(), a1, a2)?;
    if opts.stride == 0 {
        return Err(Error::input("record stride must be at least 1"));
    }
    let p = StepParams::from_config(cfg);
    let mut ens = SlowFastEnsemble::initial(cfg, a1)?;
    let mut traj = Trajectory::with_mode(&ens, cfg.seed, opts.mode, opts.stride);
    traj.record(&ens);
    if let Some(obs) = opts.observer.as_mut() {
        obs(&ens);
    }
    let n_steps = cfg.n_steps();
    for n in 0..n_steps {
        match step_impl(&mut ens, coeffs, a1, a2, &p, NoiseSource::Streams { seed: cfg.seed, n }) {
            Ok(()) => {}
            Err(Error::Divergence { t, .. }) => {
                return Err(Error::Divergence {
                    t,
                    partial: Box::new(traj),
                })
            }
            Err(e) => return Err(e),
        }
        ens.t = (n + 1) as f64 * cfg.dt;
        if (n + 1) % opts.stride == 0 || n + 1 == n_steps {
            traj.record(&ens);
        }
        if let Some(obs) = opts.observer.as_mut() {
            obs(&ens);
        }
    }
    Ok(traj)
}

/// Frozen-block auxiliary fast process and its gap to the true fast process.
#[derive(Debug, Clone, PartialEq)]
pub struct KhasminskiiResult {
    /// Auxiliary fast states in `ys`; `xs` holds the block-start slow states.
    pub trajectory: Trajectory,
    /// `sup_t mean_i |Y_t - Yhat_t|^2` over the recorded grid.
    pub gap: f64,
}

pub fn khasminskii_path(
    traj: &Trajectory,
    coeffs: &CoefficientSet,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
) -> Result<KhasminskiiResult> {
    cfg.validate()?;
    if traj.mode != RecordMode::Full || traj.stride != 1 {
        return Err(Error::input("the auxiliary process needs a full-mode trajectory recorded every step"));
    }
    let dims = coeffs.dims();
    if traj.dim_x != dims.n || traj.dim_y != dims.m || a2.dim() != dims.m {
        return Err(Error::input("trajectory dimensions do not match the model"));
    }
    if traj.len() != cfg.n_steps() + 1 {
        return Err(Error::input("trajectory grid does not match the config"));
    }
    let p = StepParams::from_config(cfg);
    let block = cfg.block_steps();
    let n = traj.n_particles;
    let mut out = traj.clone();
    let mut gap: f64 = 0.0;
    let mut yhat = traj.ys[0].clone();
    let mut anchor_x = traj.xs[0].clone();
    let mut anchor_cloud = traj.cloud(0)?;
    for k in 0..traj.len() - 1 {
        if k % block == 0 {
            yhat.copy_from_slice(&traj.ys[k]);
            anchor_x.copy_from_slice(&traj.xs[k]);
            anchor_cloud = traj.cloud(k)?;
        }
        let results: Vec<Result<()>> = yhat
            .par_chunks_mut(dims.m)
            .enumerate()
            .with_min_len(MIN_CHUNK)
            .map_init(
                || Scratch::new(dims, p.substeps),
                |scratch, (i, y)| {
                    scratch.draw_fast(cfg.seed, i, k, &p);
                    let x = &anchor_x[i * dims.n..(i + 1) * dims.n];
                    let frozen = coeffs.freeze(x, &anchor_cloud);
                    fast_substeps(frozen.as_ref(), a2, &p, None, y, scratch)
                        .map(|_| ())
                        .map_err(|e| Error::Step {
                            particle: i,
                            source: Box::new(e),
                        })
                },
            )
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        if !all_finite(&yhat) {
            return Err(Error::Divergence {
                t: traj.times[k + 1],
                partial: Box::new(out),
            });
        }
        gap = gap.max(dist_sq(&yhat, &traj.ys[k + 1]) / n as f64);
        out.ys[k + 1].copy_from_slice(&yhat);
        out.xs[k + 1].copy_from_slice(&anchor_x);
    }
    Ok(KhasminskiiResult { trajectory: out, gap })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardResult {
    pub trajectory: Trajectory,
    /// `g_l = sup_t mean |X^(l) - X^(l-1)|^2`, starting at `l = 1`.
    pub gaps: Vec<f64>,
    pub converged: bool,
}

/// Picard iteration: `X^(0) = x0`; `Y^(l)` solves the fast equation driven by
/// `(X^(l-1), law of X^(l-1))`; `X^(l)` solves the slow McKean-Vlasov
/// equation driven by `Y^(l)`. All iterates share the noise streams of
/// `simulate`, so the fixed point is the `simulate` output.
pub fn picard_solve(
    coeffs: &CoefficientSet,
    a1: &MonotoneOperator,
    a2: &MonotoneOperator,
    cfg: &SimConfig,
    max_iter: usize,
    tol: f64,
) -> Result<PicardResult> {
    if max_iter < 2 {
        return Err(Error::input("picard_solve needs max_iter >= 2"));
    }
    cfg.check_model(coeffs.dims(), a1, a2)?;
    let dims = coeffs.dims();
    let p = StepParams::from_config(cfg);
    let n_steps = cfg.n_steps();
    let init = SlowFastEnsemble::initial(cfg, a1)?;
    let np = init.len();

    // X^(0): the initial states held constant.
    let mut x_prev: Vec<Vec<f64>> = vec![init.xs.clone(); n_steps + 1];
    let mut gaps = Vec::new();
    let mut increases = 0;
    let mut converged = false;
    let mut last: Option<Trajectory> = None;

    for _l in 1..=max_iter {
        let clouds: Vec<ParticleCloud> = x_prev
            .iter()
            .map(|xs| ParticleCloud::new(dims.n, xs.clone()))
            .collect::<Result<_>>()?;

        let mut ens = init.clone();
        let mut traj = Trajectory::with_mode(&ens, cfg.seed, RecordMode::Full, 1);
        traj.record(&ens);
        for n in 0..n_steps {
            let prev = &x_prev[n];
            let cloud_prev = &clouds[n];
            let cloud_cur = &ens.cloud;
            let results: Vec<Result<()>> = ens
                .xs
                .par_chunks_mut(dims.n)
                .zip(ens.ys.par_chunks_mut(dims.m))
                .zip(ens.k1_var.par_iter_mut().zip(ens.k2_var.par_iter_mut()))
                .enumerate()
                .with_min_len(MIN_CHUNK)
                .map_init(
                    || Scratch::new(dims, p.substeps),
                    |scratch, (i, ((x, y), (k1, k2)))| {
                        scratch.draw(cfg.seed, i, n, &p);
                        let wrap = |e| Error::Step {
                            particle: i,
                            source: Box::new(e),
                        };
                        let xp = &prev[i * dims.n..(i + 1) * dims.n];
                        let fz = coeffs.freeze(xp, cloud_prev);
                        *k2 += fast_substeps(fz.as_ref(), a2, &p, None, y, scratch).map_err(wrap)?;
                        drop(fz);
                        let x_old = x.to_vec();
                        let fz = coeffs.freeze(&x_old, cloud_cur);
                        *k1 += slow_update(fz.as_ref(), a1, &p, None, x, y, scratch).map_err(wrap)?;
                        Ok(())
                    },
                )
                .collect();
            results.into_iter().collect::<Result<()>>()?;
            ens.t = (n + 1) as f64 * cfg.dt;
            if !ens.is_finite() {
                return Err(Error::Divergence {
                    t: ens.t,
                    partial: Box::new(traj),
                });
            }
            ens.rebuild_cloud()?;
            traj.record(&ens);
        }

        let g = traj
            .xs
            .iter()
            .zip(&x_prev)
            .map(|(a, b)| dist_sq(a, b) / np as f64)
            .fold(0.0, f64::max);
        if let Some(&prev_g) = gaps.last() {
            if g > prev_g {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        gaps.push(g);
        x_prev = traj.xs.clone();
        last = Some(traj);
        if increases >= 3 {
            return Err(Error::NonConvergence(format!(
                "Picard gaps increased three times in a row: {gaps:?}"
            )));
        }
        if g < tol {
            converged = true;
            break;
        }
    }
    Ok(PicardResult {
        trajectory: last.expect("at least one iteration"),
        gaps,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_test, LinearTestParams};
    use crate::monotone_ops::ConvexSet;

    fn zero(_x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn zero_model() -> CoefficientSet {
        CoefficientSet::from_fns("zero", Dims::square(1), zero, zero, zero, zero)
    }

    fn cfg1(t: f64, dt: f64, n: usize) -> SimConfig {
        SimConfig::new(t, dt, 1.0, n, vec![1.0], vec![0.5])
    }

    #[test]
    fn config_validation() {
        assert!(cfg1(1.0, 0.1, 4).validate().is_ok());
        assert!(cfg1(1.0, 0.0, 4).validate().is_err());
        assert!(cfg1(1.0, 2.0, 4).validate().is_err());
        assert!(cfg1(1.0, 0.3, 4).validate().is_err());
        let mut c = cfg1(1.0, 0.1, 4);
        c.delta = 0.5;
        c.fast_substeps = Some(1);
        assert!(c.validate().is_err());
        c.fast_substeps = None;
        c.delta = 1e-2;
        assert_eq!(c.substeps(), 100);
        assert!(c.validate().is_ok());
        c.delta = 1e-6;
        // block 1e-3 < dt
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_coefficients_leave_state_unchanged() {
        let c = zero_model();
        let z = MonotoneOperator::zero(1);
        let cfg = cfg1(1.0, 0.1, 3);
        let ens = SlowFastEnsemble::initial(&cfg, &z).unwrap();
        let noise = StepNoise::from_streams(&cfg, c.dims(), 0);
        let next = step(&ens, &c, &z, &z, &cfg, &noise).unwrap();
        assert_eq!(next.xs(), ens.xs());
        assert_eq!(next.ys(), ens.ys());
        assert!((next.t - 0.1).abs() < 1e-15);
        let traj = simulate(&c, &z, &z, &cfg).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.xs.iter().all(|x| x.iter().all(|&v| v == 1.0)));
        assert!(traj.ys.iter().all(|y| y.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn drift_absorbed_by_half_line() {
        let c = CoefficientSet::from_fns("push", Dims::square(1), |_x, _m, _y, o| o[0] = -1.0, zero, zero, zero);
        let a1 = MonotoneOperator::indicator(ConvexSet::halfspace(vec![-1.0], 0.0).unwrap());
        let z = MonotoneOperator::zero(1);
        let mut cfg = cfg1(1.0, 0.1, 1);
        cfg.x0 = vec![0.0];
        let ens = SlowFastEnsemble::initial(&cfg, &a1).unwrap();
        let noise = StepNoise::from_streams(&cfg, c.dims(), 0);
        let next = step(&ens, &c, &a1, &z, &cfg, &noise).unwrap();
        assert_eq!(next.x(0), &[0.0]);
        assert!((next.k1_var()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn explicit_euler_arithmetic() {
        let c = CoefficientSet::from_fns("decay", Dims::square(1), |x, _m, _y, o| o[0] = -x[0], zero, zero, zero);
        let z = MonotoneOperator::zero(1);
        let cfg = cfg1(1.0, 0.1, 1);
        let ens = SlowFastEnsemble::initial(&cfg, &z).unwrap();
        let next = step(&ens, &c, &z, &z, &cfg, &StepNoise::from_streams(&cfg, c.dims(), 0)).unwrap();
        assert!((next.x(0)[0] - 0.9).abs() < 1e-15);

        let traj = simulate(&c, &z, &z, &cfg1(1.0, 0.01, 1)).unwrap();
        let end = traj.xs.last().unwrap()[0];
        assert!((end - (-1.0f64).exp()).abs() < 0.01);
    }

    #[test]
    fn noise_shape_is_checked() {
        let c = zero_model();
        let z = MonotoneOperator::zero(1);
        let cfg = cfg1(1.0, 0.1, 2);
        let ens = SlowFastEnsemble::initial(&cfg, &z).unwrap();
        let noise = StepNoise {
            slow: vec![0.0; 1],
            fast: vec![0.0; 2],
        };
        assert!(matches!(step(&ens, &c, &z, &z, &cfg, &noise), Err(Error::Input(_))));
    }

    #[test]
    fn divergence_keeps_last_finite_snapshot() {
        let c = CoefficientSet::from_fns("blow", Dims::square(1), |x, _m, _y, o| o[0] = 1e300 * x[0] * x[0], zero, zero, zero);
        let z = MonotoneOperator::zero(1);
        let cfg = cfg1(1.0, 0.1, 1);
        match simulate(&c, &z, &z, &cfg) {
            Err(Error::Divergence { partial, .. }) => {
                assert!(!partial.is_empty());
                assert!(partial.xs.iter().all(|x| all_finite(x)));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let c = linear_test(LinearTestParams {
            a_mean: 0.5,
            ..Default::default()
        })
        .unwrap();
        let z = MonotoneOperator::zero(1);
        let mut cfg = SimConfig::new(0.2, 0.01, 1e-2, 64, vec![0.0], vec![0.0]);
        cfg.epsilon = 0.5;
        cfg.theta = 0.5;
        cfg.seed = 99;
        let run = |k| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .unwrap()
                .install(|| simulate(&c, &z, &z, &cfg).unwrap())
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let c = linear_test(LinearTestParams::default()).unwrap();
        let z = MonotoneOperator::zero(1);
        let cfg = SimConfig::new(0.1, 0.01, 1e-2, 3, vec![0.2], vec![0.0]);
        let traj = simulate(&c, &z, &z, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times, traj.times);
        assert_eq!(back.xs, traj.xs);
        assert_eq!(back.ys, traj.ys);
        assert_eq!(back.k2_var, traj.k2_var);
    }

    #[test]
    fn picard_decoupled_and_zero_cases() {
        let z = MonotoneOperator::zero(1);
        let cfg = SimConfig::new(0.1, 0.01, 1e-2, 8, vec![0.3], vec![0.0]);
        let r = picard_solve(&zero_model(), &z, &z, &cfg, 5, 1e-24).unwrap();
        assert_eq!(r.gaps[0], 0.0);
        assert!(r.converged);

        let dec = CoefficientSet::from_fns(
            "dec",
            Dims::square(1),
            |x, _m, _y, o| o[0] = -x[0] + 1.0,
            |_x, _m, _y, o| o[0] = 0.3,
            |x, _m, y, o| o[0] = -y[0] + x[0],
            |_x, _m, _y, o| o[0] = 1.0,
        );
        let r = picard_solve(&dec, &z, &z, &cfg, 10, 1e-24).unwrap();
        assert_eq!(r.gaps.len(), 2);
        assert_eq!(r.gaps[1], 0.0);
        assert!(r.gaps[0] > 0.0);
    }

    #[test]
    fn picard_fixed_point_is_the_simulation() {
        let c = linear_test(LinearTestParams {
            a_mean: 0.3,
            g_mean: 0.2,
            ..Default::default()
        })
        .unwrap();
        let z = MonotoneOperator::zero(1);
        let mut cfg = SimConfig::new(0.1, 0.01, 1e-2, 16, vec![0.3], vec![0.0]);
        cfg.seed = 5;
        let r = picard_solve(&c, &z, &z, &cfg, 60, 1e-28).unwrap();
        assert!(r.converged, "{:?}", r.gaps);
        let s = simulate(&c, &z, &z, &cfg).unwrap();
        assert!(r.trajectory.sup_mean_sq_gap(&s).unwrap() < 1e-26);
    }

    #[test]
    fn khasminskii_matches_when_slow_state_is_constant() {
        // b1 = 0, sigma1 = 0: X never moves, so frozen = unfrozen.
        let c = CoefficientSet::from_fns(
            "still",
            Dims::square(1),
            zero,
            zero,
            |x, _m, y, o| o[0] = -y[0] + x[0],
            |_x, _m, _y, o| o[0] = 1.0,
        );
        let z = MonotoneOperator::zero(1);
        let cfg = SimConfig::new(0.2, 0.01, 1e-2, 4, vec![0.7], vec![0.0]);
        let traj = simulate(&c, &z, &z, &cfg).unwrap();
        let k = khasminskii_path(&traj, &c, &z, &cfg).unwrap();
        assert_eq!(k.gap, 0.0);
        assert_eq!(k.trajectory.ys, traj.ys);
    }
}
