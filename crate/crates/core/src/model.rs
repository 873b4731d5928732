//! Coefficient sets for slow-fast systems, sampling probes of the structural
//! assumptions, and the built-in models.
//!
//! Matrices (`sigma1`, `sigma2`) are written row-major into caller buffers:
//! `sigma1` is `n x d1`, `sigma2` is `m x d2`.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dist_sq, dot, norm_sq};
use crate::measure::{w2_distance, ParticleCloud};
use crate::monotone_ops::{ConvexSet, MonotoneOperator};
use crate::rng::{stream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d1: usize,
    pub d2: usize,
}

impl Dims {
    pub fn square(dim: usize) -> Self {
        Dims {
            n: dim,
            m: dim,
            d1: dim,
            d2: dim,
        }
    }
}

/// Coefficients with the slow state and the measure held fixed.
pub trait FrozenCoefficients {
    fn b1(&self, y: &[f64], out: &mut [f64]);
    fn sigma1(&self, y: &[f64], out: &mut [f64]);
    fn b2(&self, y: &[f64], out: &mut [f64]);
    fn sigma2(&self, y: &[f64], out: &mut [f64]);
}

/// The drift/diffusion quadruple `(b1, sigma1, b2, sigma2)`.
///
/// Implementations must be pure: the engine evaluates them concurrently.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;
    fn b1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]);
    fn sigma1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]);
    fn b2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]);
    fn sigma2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]);

    /// Binds `(x, mu)`. Models with expensive measure terms override this to
    /// precompute them once per binding.
    fn freeze<'a>(&'a self, x: &'a [f64], mu: &'a ParticleCloud) -> Box<dyn FrozenCoefficients + 'a> {
        Box::new(Bound { inner: self, x, mu })
    }
}

struct Bound<'a, C: ?Sized> {
    inner: &'a C,
    x: &'a [f64],
    mu: &'a ParticleCloud,
}

impl<C: Coefficients + ?Sized> FrozenCoefficients for Bound<'_, C> {
    fn b1(&self, y: &[f64], out: &mut [f64]) {
        self.inner.b1(self.x, self.mu, y, out)
    }
    fn sigma1(&self, y: &[f64], out: &mut [f64]) {
        self.inner.sigma1(self.x, self.mu, y, out)
    }
    fn b2(&self, y: &[f64], out: &mut [f64]) {
        self.inner.b2(self.x, self.mu, y, out)
    }
    fn sigma2(&self, y: &[f64], out: &mut [f64]) {
        self.inner.sigma2(self.x, self.mu, y, out)
    }
}

pub type CoefficientFn = dyn Fn(&[f64], &ParticleCloud, &[f64], &mut [f64]) + Send + Sync;
/// Closed-form averaged drift `(x, mu) -> bbar1`.
pub type AveragedFn = dyn Fn(&[f64], &ParticleCloud, &mut [f64]) + Send + Sync;

/// Closure-backed coefficients, mostly for tests and ad-hoc models.
pub struct FnCoefficients {
    pub dims: Dims,
    pub b1: Arc<CoefficientFn>,
    pub sigma1: Arc<CoefficientFn>,
    pub b2: Arc<CoefficientFn>,
    pub sigma2: Arc<CoefficientFn>,
}

impl Coefficients for FnCoefficients {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn b1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        (self.b1)(x, mu, y, out)
    }
    fn sigma1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        (self.sigma1)(x, mu, y, out)
    }
    fn b2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        (self.b2)(x, mu, y, out)
    }
    fn sigma2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        (self.sigma2)(x, mu, y, out)
    }
}

/// A coefficient quadruple plus the metadata the gates need.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    inner: Arc<dyn Coefficients>,
    /// `sigma1(x, mu, y)` does not depend on `y`.
    pub sigma1_y_independent: bool,
    /// Declared uniform bound on `|sigma2|` (Frobenius).
    pub sigma2_bound: Option<f64>,
    /// Closed-form averaged drift, valid when the fast operator is zero.
    pub analytic_average: Option<Arc<AveragedFn>>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("dims", &self.inner.dims())
            .field("sigma1_y_independent", &self.sigma1_y_independent)
            .field("sigma2_bound", &self.sigma2_bound)
            .field("analytic_average", &self.analytic_average.is_some())
            .finish()
    }
}

impl Deref for CoefficientSet {
    type Target = dyn Coefficients;
    fn deref(&self) -> &Self::Target {
        self.inner.as_ref()
    }
}

impl CoefficientSet {
    pub fn new(name: impl Into<String>, inner: Arc<dyn Coefficients>) -> Self {
        CoefficientSet {
            name: name.into(),
            inner,
            sigma1_y_independent: false,
            sigma2_bound: None,
            analytic_average: None,
        }
    }

    pub fn from_fns<B1, S1, B2, S2>(name: &str, dims: Dims, b1: B1, sigma1: S1, b2: B2, sigma2: S2) -> Self
    where
        B1: Fn(&[f64], &ParticleCloud, &[f64], &mut [f64]) + Send + Sync + 'static,
        S1: Fn(&[f64], &ParticleCloud, &[f64], &mut [f64]) + Send + Sync + 'static,
        B2: Fn(&[f64], &ParticleCloud, &[f64], &mut [f64]) + Send + Sync + 'static,
        S2: Fn(&[f64], &ParticleCloud, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(
            name,
            Arc::new(FnCoefficients {
                dims,
                b1: Arc::new(b1),
                sigma1: Arc::new(sigma1),
                b2: Arc::new(b2),
                sigma2: Arc::new(sigma2),
            }),
        )
    }

    pub fn with_sigma1_y_independent(mut self, flag: bool) -> Self {
        self.sigma1_y_independent = flag;
        self
    }

    pub fn with_sigma2_bound(mut self, bound: f64) -> Self {
        self.sigma2_bound = Some(bound);
        self
    }

    pub fn with_analytic_average<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &ParticleCloud, &mut [f64]) + Send + Sync + 'static,
    {
        self.analytic_average = Some(Arc::new(f));
        self
    }

    pub fn inner(&self) -> &Arc<dyn Coefficients> {
        &self.inner
    }
}

/// Uniform sampler over user-declared bounding boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSampler {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    #[serde(default = "default_cloud_size")]
    pub cloud_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cloud_size() -> usize {
    8
}

pub const DEFAULT_PAIR_SAMPLES: usize = 10_000;

impl DomainSampler {
    pub fn cube(dims: Dims, half_width: f64) -> Self {
        DomainSampler {
            x_lower: vec![-half_width; dims.n],
            x_upper: vec![half_width; dims.n],
            y_lower: vec![-half_width; dims.m],
            y_upper: vec![half_width; dims.m],
            cloud_size: default_cloud_size(),
            seed: 0,
        }
    }

    /// Boxes of half-width `half_width` around `x0` and `y0`.
    pub fn around(x0: &[f64], y0: &[f64], half_width: f64, seed: u64) -> Self {
        DomainSampler {
            x_lower: x0.iter().map(|v| v - half_width).collect(),
            x_upper: x0.iter().map(|v| v + half_width).collect(),
            y_lower: y0.iter().map(|v| v - half_width).collect(),
            y_upper: y0.iter().map(|v| v + half_width).collect(),
            cloud_size: default_cloud_size(),
            seed,
        }
    }

    fn uniform<R: Rng>(rng: &mut R, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        lo.iter()
            .zip(hi)
            .map(|(l, h)| if l < h { rng.random_range(*l..*h) } else { *l })
            .collect()
    }

    fn sample_x<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        Self::uniform(rng, &self.x_lower, &self.x_upper)
    }

    fn sample_y<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        Self::uniform(rng, &self.y_lower, &self.y_upper)
    }

    fn sample_cloud<R: Rng>(&self, rng: &mut R) -> ParticleCloud {
        let pts: Vec<f64> = (0..self.cloud_size.max(1))
            .flat_map(|_| self.sample_x(rng))
            .collect();
        ParticleCloud::new(self.x_lower.len(), pts).expect("sampler cloud")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    /// `beta > 2 L'`.
    pub dissipative: bool,
    /// Declared and observed.
    pub sigma1_y_independent: bool,
    /// Declared bound exists and held on every sample.
    pub sigma2_bounded: bool,
}

/// Sampled constants. Lipschitz-type entries are maxima over the samples,
/// so they bound the true constants from below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub samples: usize,
    /// Joint Lipschitz constant of `(b1, sigma1)` in `(x, mu, y)`, squared form.
    pub lipschitz_slow: f64,
    /// Lipschitz constant of `(b2, sigma2)` in `(x, mu)` at fixed `y`.
    pub lipschitz_fast_in_slow: f64,
    /// `sup |sigma2(y1) - sigma2(y2)|^2 / |y1 - y2|^2`.
    pub sigma2_y_lipschitz: f64,
    /// `inf -(2<dy, db2> + |dsigma2|^2) / |dy|^2`.
    pub beta: f64,
    /// `beta - 2 L'`, reported only when positive.
    pub alpha: Option<f64>,
    pub sigma2_sup: f64,
    pub sigma1_y_variation: f64,
    pub flags: AssumptionFlags,
}

impl AssumptionReport {
    /// The averaging / large-deviation gate.
    pub fn require_dissipative(&self) -> Result<f64> {
        match self.alpha {
            Some(a) if self.flags.dissipative => Ok(a),
            _ => Err(Error::Gate(format!(
                "dissipativity fails: beta = {:.6} <= 2 L' = {:.6}",
                self.beta,
                2.0 * self.sigma2_y_lipschitz
            ))),
        }
    }

    pub fn require_sigma2_bounded(&self) -> Result<()> {
        if self.flags.sigma2_bounded {
            Ok(())
        } else {
            Err(Error::Gate("sigma2 is not declared bounded (or exceeds its declared bound)".into()))
        }
    }
}

fn eval_checked(
    f: &dyn Fn(&mut [f64]),
    len: usize,
    what: &str,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    f(&mut out);
    if !all_finite(&out) {
        return Err(Error::Model {
            input: format!("x = {x:?}, y = {y:?}"),
            message: format!("{what} returned a non-finite value"),
        });
    }
    Ok(out)
}

struct Eval {
    b1: Vec<f64>,
    s1: Vec<f64>,
    b2: Vec<f64>,
    s2: Vec<f64>,
}

fn evaluate(c: &CoefficientSet, x: &[f64], mu: &ParticleCloud, y: &[f64]) -> Result<Eval> {
    let d = c.dims();
    Ok(Eval {
        b1: eval_checked(&|o: &mut [f64]| c.b1(x, mu, y, o), d.n, "b1", x, y)?,
        s1: eval_checked(&|o: &mut [f64]| c.sigma1(x, mu, y, o), d.n * d.d1, "sigma1", x, y)?,
        b2: eval_checked(&|o: &mut [f64]| c.b2(x, mu, y, o), d.m, "b2", x, y)?,
        s2: eval_checked(&|o: &mut [f64]| c.sigma2(x, mu, y, o), d.m * d.d2, "sigma2", x, y)?,
    })
}

/// Monte Carlo probe of the structural constants over `n_samples` pairs.
pub fn check_assumptions(
    coeffs: &CoefficientSet,
    sampler: &DomainSampler,
    n_samples: usize,
) -> Result<AssumptionReport> {
    if n_samples < 2 {
        return Err(Error::input("assumption probe needs at least 2 samples"));
    }
    let d = coeffs.dims();
    if sampler.x_lower.len() != d.n || sampler.y_lower.len() != d.m {
        return Err(Error::input("sampler box dimensions do not match the model"));
    }
    let mut rng = stream(sampler.seed, 0, 0, StreamRole::Sampler);
    let mut lip_slow: f64 = 0.0;
    let mut lip_fast: f64 = 0.0;
    let mut sig2_lip: f64 = 0.0;
    let mut beta = f64::INFINITY;
    let mut sig2_sup: f64 = 0.0;
    let mut sig1_var: f64 = 0.0;

    for _ in 0..n_samples {
        let x1 = sampler.sample_x(&mut rng);
        let x2 = sampler.sample_x(&mut rng);
        let y1 = sampler.sample_y(&mut rng);
        let y2 = sampler.sample_y(&mut rng);
        let mu1 = sampler.sample_cloud(&mut rng);
        let mu2 = sampler.sample_cloud(&mut rng);
        let w2 = w2_distance(&mu1, &mu2)?;

        let e11 = evaluate(coeffs, &x1, &mu1, &y1)?;
        let e22 = evaluate(coeffs, &x2, &mu2, &y2)?;
        let e21 = evaluate(coeffs, &x2, &mu2, &y1)?;
        let e12 = evaluate(coeffs, &x1, &mu1, &y2)?;

        let denom_full = dist_sq(&x1, &x2) + w2 * w2 + dist_sq(&y1, &y2);
        if denom_full > 0.0 {
            let num = dist_sq(&e11.b1, &e22.b1) + dist_sq(&e11.s1, &e22.s1);
            lip_slow = lip_slow.max(num / denom_full);
        }
        let denom_slow = dist_sq(&x1, &x2) + w2 * w2;
        if denom_slow > 0.0 {
            let num = dist_sq(&e11.b2, &e21.b2) + dist_sq(&e11.s2, &e21.s2);
            lip_fast = lip_fast.max(num / denom_slow);
        }
        let dy2 = dist_sq(&y1, &y2);
        if dy2 > 0.0 {
            let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
            let db2: Vec<f64> = e11.b2.iter().zip(&e12.b2).map(|(a, b)| a - b).collect();
            let ds2 = dist_sq(&e11.s2, &e12.s2);
            sig2_lip = sig2_lip.max(ds2 / dy2);
            beta = beta.min(-(2.0 * dot(&dy, &db2) + ds2) / dy2);
            sig1_var = sig1_var.max(dist_sq(&e11.s1, &e12.s1));
        }
        sig2_sup = sig2_sup
            .max(norm_sq(&e11.s2).sqrt())
            .max(norm_sq(&e22.s2).sqrt());
    }

    let dissipative = beta > 2.0 * sig2_lip;
    let alpha = dissipative.then_some(beta - 2.0 * sig2_lip);
    let sigma1_y_independent = coeffs.sigma1_y_independent && sig1_var == 0.0;
    if coeffs.sigma1_y_independent && sig1_var > 0.0 {
        log::warn!("model {} declares sigma1 independent of y but samples disagree", coeffs.name);
    }
    let sigma2_bounded = coeffs.sigma2_bound.is_some_and(|b| sig2_sup <= b);
    Ok(AssumptionReport {
        samples: n_samples,
        lipschitz_slow: lip_slow,
        lipschitz_fast_in_slow: lip_fast,
        sigma2_y_lipschitz: sig2_lip,
        beta,
        alpha,
        sigma2_sup: sig2_sup,
        sigma1_y_variation: sig1_var,
        flags: AssumptionFlags {
            dissipative,
            sigma1_y_independent,
            sigma2_bounded,
        },
    })
}

// ---------------------------------------------------------------------------
// Built-in models
// ---------------------------------------------------------------------------

/// Componentwise linear slow-fast model in `R^dim x R^dim`:
///
/// ```text
/// b1 = a_x x + a_mean m(mu) + a_y y + a_0,   sigma1 = s1 I
/// b2 = -beta y + g_x x + g_mean m(mu) + g_0, sigma2 = s2 I
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearTestParams {
    pub dim: usize,
    pub a_x: f64,
    pub a_mean: f64,
    pub a_y: f64,
    pub a_0: f64,
    pub beta: f64,
    pub g_x: f64,
    pub g_mean: f64,
    pub g_0: f64,
    pub s1: f64,
    pub s2: f64,
    /// `sigma1 = s1 * (1 + x)` instead of `s1` (multiplicative noise).
    pub multiplicative: bool,
}

impl Default for LinearTestParams {
    fn default() -> Self {
        LinearTestParams {
            dim: 1,
            a_x: -1.0,
            a_mean: 0.0,
            a_y: 1.0,
            a_0: 0.0,
            beta: 1.0,
            g_x: 0.5,
            g_mean: 0.0,
            g_0: 1.5,
            s1: 1.0,
            s2: 1.0,
            multiplicative: false,
        }
    }
}

struct LinearTest(LinearTestParams);

struct LinearFrozen<'a> {
    p: &'a LinearTestParams,
    x: &'a [f64],
    slow: Vec<f64>,
    fast: Vec<f64>,
}

impl LinearTest {
    fn slow_part(&self, x: &[f64], mu: &ParticleCloud) -> Vec<f64> {
        let p = &self.0;
        x.iter()
            .zip(mu.mean())
            .map(|(xi, mi)| p.a_x * xi + p.a_mean * mi + p.a_0)
            .collect()
    }
    fn fast_part(&self, x: &[f64], mu: &ParticleCloud) -> Vec<f64> {
        let p = &self.0;
        x.iter()
            .zip(mu.mean())
            .map(|(xi, mi)| p.g_x * xi + p.g_mean * mi + p.g_0)
            .collect()
    }
}

fn diag(out: &mut [f64], dim: usize, value: impl Fn(usize) -> f64) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..dim {
        out[i * dim + i] = value(i);
    }
}

impl Coefficients for LinearTest {
    fn dims(&self) -> Dims {
        Dims::square(self.0.dim)
    }
    fn b1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        for ((o, s), yi) in out.iter_mut().zip(self.slow_part(x, mu)).zip(y) {
            *o = s + self.0.a_y * yi;
        }
    }
    fn sigma1(&self, x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        let p = &self.0;
        diag(out, p.dim, |i| if p.multiplicative { p.s1 * (1.0 + x[i]) } else { p.s1 });
    }
    fn b2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        for ((o, f), yi) in out.iter_mut().zip(self.fast_part(x, mu)).zip(y) {
            *o = -self.0.beta * yi + f;
        }
    }
    fn sigma2(&self, _x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        diag(out, self.0.dim, |_| self.0.s2);
    }
    fn freeze<'a>(&'a self, x: &'a [f64], mu: &'a ParticleCloud) -> Box<dyn FrozenCoefficients + 'a> {
        Box::new(LinearFrozen {
            p: &self.0,
            x,
            slow: self.slow_part(x, mu),
            fast: self.fast_part(x, mu),
        })
    }
}

impl FrozenCoefficients for LinearFrozen<'_> {
    fn b1(&self, y: &[f64], out: &mut [f64]) {
        for ((o, s), yi) in out.iter_mut().zip(&self.slow).zip(y) {
            *o = s + self.p.a_y * yi;
        }
    }
    fn sigma1(&self, _y: &[f64], out: &mut [f64]) {
        let p = self.p;
        diag(out, p.dim, |i| if p.multiplicative { p.s1 * (1.0 + self.x[i]) } else { p.s1 });
    }
    fn b2(&self, y: &[f64], out: &mut [f64]) {
        for ((o, f), yi) in out.iter_mut().zip(&self.fast).zip(y) {
            *o = -self.p.beta * yi + f;
        }
    }
    fn sigma2(&self, _y: &[f64], out: &mut [f64]) {
        diag(out, self.p.dim, |_| self.p.s2);
    }
}

pub fn linear_test(params: LinearTestParams) -> Result<CoefficientSet> {
    if params.dim == 0 {
        return Err(Error::input("linear_test dim must be positive"));
    }
    let p = params.clone();
    let bound = params.s2.abs() * (params.dim as f64).sqrt();
    let mut set = CoefficientSet::new("linear_test", Arc::new(LinearTest(params)))
        .with_sigma1_y_independent(true)
        .with_sigma2_bound(bound);
    if p.beta != 0.0 {
        set = set.with_analytic_average(move |x, mu, out| {
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(mu.mean()) {
                let ybar = (p.g_x * xi + p.g_mean * mi + p.g_0) / p.beta;
                *o = p.a_x * xi + p.a_mean * mi + p.a_y * ybar + p.a_0;
            }
        });
    }
    Ok(set)
}

/// Frozen Ornstein-Uhlenbeck probe model in one dimension:
/// `b1 = y`, `b2 = -beta y + shift + coupling x`, `sigma1 = s1`, `sigma2 = s2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuFrozenParams {
    pub beta: f64,
    pub shift: f64,
    pub coupling: f64,
    pub s1: f64,
    pub s2: f64,
}

impl Default for OuFrozenParams {
    fn default() -> Self {
        OuFrozenParams {
            beta: 2.0,
            shift: 0.0,
            coupling: 0.0,
            s1: 0.0,
            s2: 1.0,
        }
    }
}

pub fn ou_frozen(params: OuFrozenParams) -> Result<CoefficientSet> {
    let OuFrozenParams {
        beta,
        shift,
        coupling,
        s1,
        s2,
    } = params;
    let set = CoefficientSet::from_fns(
        "ou_frozen",
        Dims::square(1),
        |_x, _mu, y, out| out[0] = y[0],
        move |_x, _mu, _y, out| out[0] = s1,
        move |x, _mu, y, out| out[0] = -beta * y[0] + shift + coupling * x[0],
        move |_x, _mu, _y, out| out[0] = s2,
    )
    .with_sigma1_y_independent(true)
    .with_sigma2_bound(s2.abs());
    Ok(if beta != 0.0 {
        set.with_analytic_average(move |x, _mu, out| out[0] = (shift + coupling * x[0]) / beta)
    } else {
        set
    })
}

pub type GradientFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A potential gradient `z -> grad V(z)`.
#[derive(Clone)]
pub enum GradientField {
    /// `K z + c` with `K` row-major.
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
    Custom { dim: usize, f: Arc<GradientFn> },
}

impl fmt::Debug for GradientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientField::Linear { matrix, offset } => f
                .debug_struct("Linear")
                .field("matrix", matrix)
                .field("offset", offset)
                .finish(),
            GradientField::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish(),
        }
    }
}

impl GradientField {
    pub fn linear(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if offset.is_empty() || matrix.len() != offset.len() * offset.len() {
            return Err(Error::input("linear gradient needs an n x n matrix and length-n offset"));
        }
        Ok(GradientField::Linear { matrix, offset })
    }

    pub fn zero(dim: usize) -> Self {
        GradientField::Linear {
            matrix: vec![0.0; dim * dim],
            offset: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GradientField::Linear { offset, .. } => offset.len(),
            GradientField::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, z: &[f64], out: &mut [f64]) {
        match self {
            GradientField::Linear { matrix, offset } => {
                out.copy_from_slice(offset);
                crate::linalg::mat_vec_acc(matrix, z, 1.0, out);
            }
            GradientField::Custom { f, .. } => f(z, out),
        }
    }

    /// Empirical convolution `(1/count) sum_i grad V(x - mu_i)`.
    pub fn convolve(&self, x: &[f64], mu: &ParticleCloud, out: &mut [f64]) {
        match self {
            GradientField::Linear { .. } => {
                let rel: Vec<f64> = x.iter().zip(mu.mean()).map(|(a, b)| a - b).collect();
                self.eval(&rel, out);
            }
            GradientField::Custom { .. } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut tmp = vec![0.0; out.len()];
                let mut rel = vec![0.0; x.len()];
                for p in mu.points() {
                    for k in 0..x.len() {
                        rel[k] = x[k] - p[k];
                    }
                    self.eval(&rel, &mut tmp);
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
                let c = mu.count() as f64;
                out.iter_mut().for_each(|o| *o /= c);
            }
        }
    }
}

/// Aggregation-diffusion slow-fast system:
///
/// ```text
/// dX in -N_O(X) dt - [grad V1(Y) + grad V2 * L_X (X)] dt + sigma1 dW1
/// dY in -A2(Y) dt - (1/delta) [grad V3(Y) + grad V4 * L_X (X)] dt + (1/sqrt delta) sigma2 dW2
/// ```
#[derive(Debug, Clone)]
pub struct AggregationDiffusionSpec {
    pub grad_v1: GradientField,
    pub grad_v2: GradientField,
    pub grad_v3: GradientField,
    pub grad_v4: GradientField,
    /// `n x d1`, row-major.
    pub sigma1: Vec<f64>,
    pub d1: usize,
    /// `n x d2`, row-major.
    pub sigma2: Vec<f64>,
    pub d2: usize,
    pub domain: ConvexSet,
    pub a2: MonotoneOperator,
}

impl AggregationDiffusionSpec {
    pub fn dim(&self) -> usize {
        self.grad_v1.dim()
    }

    /// Sampled one-sided constant of `grad V3`:
    /// `inf <y1 - y2, grad V3(y1) - grad V3(y2)> / |y1 - y2|^2`.
    pub fn v3_monotonicity(&self, samples: usize, half_width: f64, seed: u64) -> f64 {
        let n = self.dim();
        let mut rng = stream(seed, 3, 0, StreamRole::Sampler);
        let mut best = f64::INFINITY;
        let (mut g1, mut g2) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..samples {
            let y1: Vec<f64> = (0..n).map(|_| rng.random_range(-half_width..half_width)).collect();
            let y2: Vec<f64> = (0..n).map(|_| rng.random_range(-half_width..half_width)).collect();
            let d2 = dist_sq(&y1, &y2);
            if d2 == 0.0 {
                continue;
            }
            self.grad_v3.eval(&y1, &mut g1);
            self.grad_v3.eval(&y2, &mut g2);
            let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
            best = best.min(dot(&dy, &dg) / d2);
        }
        best
    }
}

struct AggregationDiffusion {
    n: usize,
    d1: usize,
    d2: usize,
    v1: GradientField,
    v2: GradientField,
    v3: GradientField,
    v4: GradientField,
    sigma1: Vec<f64>,
    sigma2: Vec<f64>,
}

struct AggregationFrozen<'a> {
    model: &'a AggregationDiffusion,
    conv2: Vec<f64>,
    conv4: Vec<f64>,
}

impl Coefficients for AggregationDiffusion {
    fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            m: self.n,
            d1: self.d1,
            d2: self.d2,
        }
    }
    fn b1(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        self.freeze(x, mu).b1(y, out)
    }
    fn sigma1(&self, _x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma1)
    }
    fn b2(&self, x: &[f64], mu: &ParticleCloud, y: &[f64], out: &mut [f64]) {
        self.freeze(x, mu).b2(y, out)
    }
    fn sigma2(&self, _x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma2)
    }
    fn freeze<'a>(&'a self, x: &'a [f64], mu: &'a ParticleCloud) -> Box<dyn FrozenCoefficients + 'a> {
        let mut conv2 = vec![0.0; self.n];
        let mut conv4 = vec![0.0; self.n];
        self.v2.convolve(x, mu, &mut conv2);
        self.v4.convolve(x, mu, &mut conv4);
        Box::new(AggregationFrozen {
            model: self,
            conv2,
            conv4,
        })
    }
}

impl FrozenCoefficients for AggregationFrozen<'_> {
    fn b1(&self, y: &[f64], out: &mut [f64]) {
        self.model.v1.eval(y, out);
        for (o, c) in out.iter_mut().zip(&self.conv2) {
            *o = -(*o + c);
        }
    }
    fn sigma1(&self, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.model.sigma1)
    }
    fn b2(&self, y: &[f64], out: &mut [f64]) {
        self.model.v3.eval(y, out);
        for (o, c) in out.iter_mut().zip(&self.conv4) {
            *o = -(*o + c);
        }
    }
    fn sigma2(&self, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.model.sigma2)
    }
}

/// A coefficient set together with the operators it is meant to run with.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub coeffs: CoefficientSet,
    pub a1: MonotoneOperator,
    pub a2: MonotoneOperator,
}

pub fn build_aggregation_diffusion(spec: AggregationDiffusionSpec) -> Result<BuiltModel> {
    let n = spec.dim();
    for (name, g) in [
        ("grad_v2", &spec.grad_v2),
        ("grad_v3", &spec.grad_v3),
        ("grad_v4", &spec.grad_v4),
    ] {
        if g.dim() != n {
            return Err(Error::input(format!("{name} has dimension {} but grad_v1 has {n}", g.dim())));
        }
    }
    if spec.sigma1.len() != n * spec.d1 || spec.sigma2.len() != n * spec.d2 {
        return Err(Error::input("sigma matrices do not match declared dimensions"));
    }
    if spec.domain.dim() != n || spec.a2.dim() != n {
        return Err(Error::input("operator dimensions do not match the model"));
    }
    let beta = spec.v3_monotonicity(2_000, 5.0, 17);
    if !(beta > 0.0) {
        return Err(Error::input(format!(
            "grad V3 fails the one-sided condition on samples (estimated beta = {beta})"
        )));
    }
    let sigma2_bound = norm_sq(&spec.sigma2).sqrt();
    let analytic = if spec.a2.is_zero() {
        linear_average(&spec)
    } else {
        None
    };
    let model = AggregationDiffusion {
        n,
        d1: spec.d1,
        d2: spec.d2,
        v1: spec.grad_v1,
        v2: spec.grad_v2,
        v3: spec.grad_v3,
        v4: spec.grad_v4,
        sigma1: spec.sigma1,
        sigma2: spec.sigma2,
    };
    let mut coeffs = CoefficientSet::new("aggregation_diffusion", Arc::new(model))
        .with_sigma1_y_independent(true)
        .with_sigma2_bound(sigma2_bound);
    coeffs.analytic_average = analytic;
    Ok(BuiltModel {
        coeffs,
        a1: MonotoneOperator::indicator(spec.domain),
        a2: spec.a2,
    })
}

/// With linear `grad V1`, `grad V3` and no fast constraint, the invariant law
/// is Gaussian with mean `-K3^{-1}(c3 + conv4)`, so the average is explicit.
fn linear_average(spec: &AggregationDiffusionSpec) -> Option<Arc<AveragedFn>> {
    let (GradientField::Linear { matrix: k1, offset: c1 }, GradientField::Linear { matrix: k3, offset: c3 }) =
        (&spec.grad_v1, &spec.grad_v3)
    else {
        return None;
    };
    let n = c1.len();
    let k3m = nalgebra::DMatrix::from_row_slice(n, n, k3);
    let k3_inv = k3m.try_inverse()?;
    let (k1, c1, c3) = (k1.clone(), c1.clone(), c3.clone());
    let v2 = spec.grad_v2.clone();
    let v4 = spec.grad_v4.clone();
    Some(Arc::new(move |x: &[f64], mu: &ParticleCloud, out: &mut [f64]| {
        let mut conv4 = vec![0.0; n];
        v4.convolve(x, mu, &mut conv4);
        let rhs = nalgebra::DVector::from_iterator(n, c3.iter().zip(&conv4).map(|(a, b)| -(a + b)));
        let ybar = &k3_inv * rhs;
        let mut conv2 = vec![0.0; n];
        v2.convolve(x, mu, &mut conv2);
        out.copy_from_slice(&c1);
        crate::linalg::mat_vec_acc(&k1, ybar.as_slice(), 1.0, out);
        for (o, c) in out.iter_mut().zip(&conv2) {
            *o = -(*o + c);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_fn(_x: &[f64], _mu: &ParticleCloud, _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    #[test]
    fn linear_fast_drift_gives_exact_beta() {
        let c = CoefficientSet::from_fns(
            "t",
            Dims::square(1),
            zero_fn,
            zero_fn,
            |_x, _mu, y, out| out[0] = -2.0 * y[0],
            |_x, _mu, _y, out| out[0] = 0.7,
        );
        let r = check_assumptions(&c, &DomainSampler::cube(Dims::square(1), 2.0), 500).unwrap();
        assert!((r.beta - 4.0).abs() < 1e-6, "{}", r.beta);
        assert_eq!(r.sigma2_y_lipschitz, 0.0);
        assert!((r.alpha.unwrap() - 4.0).abs() < 1e-6);
        assert!(r.flags.dissipative);
        assert_eq!(r.lipschitz_slow, 0.0);
        assert!(r.require_dissipative().is_ok());
    }

    #[test]
    fn expanding_fast_drift_fails_gate() {
        let c = CoefficientSet::from_fns(
            "t",
            Dims::square(1),
            zero_fn,
            zero_fn,
            |_x, _mu, y, out| out[0] = y[0],
            |_x, _mu, _y, out| out[0] = 1.0,
        );
        let r = check_assumptions(&c, &DomainSampler::cube(Dims::square(1), 2.0), 100).unwrap();
        assert!(r.beta < 0.0);
        assert!(!r.flags.dissipative);
        assert!(r.alpha.is_none());
        assert!(matches!(r.require_dissipative(), Err(Error::Gate(_))));
    }

    #[test]
    fn too_few_samples_and_nan_are_reported() {
        let c = CoefficientSet::from_fns("t", Dims::square(1), zero_fn, zero_fn, zero_fn, zero_fn);
        let s = DomainSampler::cube(Dims::square(1), 1.0);
        assert!(matches!(check_assumptions(&c, &s, 1), Err(Error::Input(_))));
        let bad = CoefficientSet::from_fns(
            "nan",
            Dims::square(1),
            |_x, _mu, _y, out| out[0] = f64::NAN,
            zero_fn,
            zero_fn,
            zero_fn,
        );
        assert!(matches!(check_assumptions(&bad, &s, 10), Err(Error::Model { .. })));
    }

    #[test]
    fn linear_test_constants_match_hand_values() {
        // b1 = -x + 0.5 m + y, b2 = -3 y + 2 x: L_slow = 1 + 0.25 + 1 bounded by
        // (|dx| + 0.5 W2 + |dy|)^2 / (dx^2 + W2^2 + dy^2) <= 2.25, beta = 6.
        let p = LinearTestParams {
            a_mean: 0.5,
            beta: 3.0,
            g_x: 2.0,
            ..Default::default()
        };
        let c = linear_test(p).unwrap();
        let r = check_assumptions(&c, &DomainSampler::cube(Dims::square(1), 2.0), 2000).unwrap();
        assert!((r.beta - 6.0).abs() < 1e-6);
        assert!((r.alpha.unwrap() - 6.0).abs() < 1e-6);
        assert!(r.lipschitz_slow <= 2.25 + 1e-9 && r.lipschitz_slow > 1.0);
        assert!(r.lipschitz_fast_in_slow <= 4.0 + 1e-9 && r.lipschitz_fast_in_slow > 3.0);
        assert!(r.flags.sigma1_y_independent && r.flags.sigma2_bounded);
    }

    fn agg_spec(v1: GradientField, v2: GradientField, v4: GradientField) -> AggregationDiffusionSpec {
        AggregationDiffusionSpec {
            grad_v1: v1,
            grad_v2: v2,
            grad_v3: GradientField::linear(vec![2.0], vec![0.0]).unwrap(),
            grad_v4: v4,
            sigma1: vec![0.5],
            d1: 1,
            sigma2: vec![1.0],
            d2: 1,
            domain: ConvexSet::cube(vec![-1.0], vec![1.0]).unwrap(),
            a2: MonotoneOperator::zero(1),
        }
    }

    #[test]
    fn aggregation_drift_examples() {
        let id = GradientField::linear(vec![1.0], vec![0.0]).unwrap();
        let m = build_aggregation_diffusion(agg_spec(id.clone(), GradientField::zero(1), GradientField::zero(1))).unwrap();
        let mut out = [0.0];
        for (x, y) in [(0.3, 2.0), (-1.0, -0.5)] {
            m.coeffs.b1(&[x], &ParticleCloud::dirac(&[0.9]), &[y], &mut out);
            assert_eq!(out[0], -y);
        }
        assert!(m.coeffs.sigma1_y_independent);
        assert!(matches!(m.a1, MonotoneOperator::Indicator(_)));

        let v1 = GradientField::linear(vec![3.0], vec![0.0]).unwrap();
        let m = build_aggregation_diffusion(agg_spec(v1, id.clone(), GradientField::zero(1))).unwrap();
        m.coeffs.b1(&[0.4], &ParticleCloud::dirac(&[0.0]), &[1.0], &mut out);
        assert!((out[0] - (-3.0 - 0.4)).abs() < 1e-15);

        let m = build_aggregation_diffusion(agg_spec(id.clone(), GradientField::zero(1), id.clone())).unwrap();
        let sym = ParticleCloud::new(1, vec![-1.0, 1.0]).unwrap();
        m.coeffs.b2(&[0.0], &sym, &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn custom_kernel_convolution_matches_linear_shortcut() {
        let lin = GradientField::linear(vec![2.0, 0.5, 0.0, 1.0], vec![0.1, -0.2]).unwrap();
        let custom = GradientField::Custom {
            dim: 2,
            f: Arc::new(|z: &[f64], out: &mut [f64]| {
                out[0] = 2.0 * z[0] + 0.5 * z[1] + 0.1;
                out[1] = z[1] - 0.2;
            }),
        };
        let mu = ParticleCloud::new(2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        lin.convolve(&[0.3, 0.7], &mu, &mut a);
        custom.convolve(&[0.3, 0.7], &mu, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn aggregation_satisfies_dissipativity_bound() {
        // 2<y, b2> + |s2|^2 <= -alpha |y|^2 + C (1 + |x|^2 + |mu|^2) with
        // b2 = -(2y + (x - m)), alpha = 2: 2<y,b2> = -4y^2 - 2y(x-m)
        // <= -2y^2 + (x-m)^2/2 <= -2 y^2 + |x|^2 + |mu|^2, so C = 1 works.
        let id = GradientField::linear(vec![1.0], vec![0.0]).unwrap();
        let m = build_aggregation_diffusion(agg_spec(id.clone(), GradientField::zero(1), id)).unwrap();
        let r = check_assumptions(&m.coeffs, &DomainSampler::cube(Dims::square(1), 3.0), 2000).unwrap();
        let alpha = r.alpha.unwrap();
        assert!((alpha - 4.0).abs() < 1e-9);
        let mut rng = stream(5, 0, 0, StreamRole::Sampler);
        let mut b2 = [0.0];
        for _ in 0..2000 {
            let x = [rng.random_range(-3.0..3.0)];
            let y = [rng.random_range(-3.0..3.0)];
            let mu = ParticleCloud::new(1, (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            m.coeffs.b2(&x, &mu, &y, &mut b2);
            let lhs = 2.0 * y[0] * b2[0] + 1.0;
            let rhs = -2.0 * y[0] * y[0] + 1.0 * (1.0 + x[0] * x[0] + mu.second_moment());
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn aggregation_rejects_bad_specs() {
        let id = GradientField::linear(vec![1.0], vec![0.0]).unwrap();
        let mut s = agg_spec(id.clone(), GradientField::zero(1), id.clone());
        s.grad_v3 = GradientField::linear(vec![-1.0], vec![0.0]).unwrap();
        assert!(build_aggregation_diffusion(s).is_err());
        let mut s = agg_spec(id.clone(), GradientField::zero(1), id);
        s.sigma1 = vec![1.0, 2.0];
        assert!(build_aggregation_diffusion(s).is_err());
    }

    #[test]
    fn aggregation_analytic_average() {
        let id = GradientField::linear(vec![1.0], vec![0.0]).unwrap();
        let m = build_aggregation_diffusion(agg_spec(id.clone(), GradientField::zero(1), id)).unwrap();
        let f = m.coeffs.analytic_average.clone().unwrap();
        // ybar solves 2 ybar + (x - m) = 0; bbar = -ybar.
        let mut out = [0.0];
        f(&[0.6], &ParticleCloud::dirac(&[0.2]), &mut out);
        assert!((out[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn frozen_view_agrees_with_full_evaluation() {
        let c = linear_test(LinearTestParams {
            a_mean: 0.3,
            g_mean: -0.4,
            ..Default::default()
        })
        .unwrap();
        let mu = ParticleCloud::new(1, vec![0.1, 0.9, -0.4]).unwrap();
        let x = [0.25];
        let fz = c.freeze(&x, &mu);
        for y in [-1.0, 0.0, 2.5] {
            let (mut a, mut b) = ([0.0], [0.0]);
            c.b1(&x, &mu, &[y], &mut a);
            fz.b1(&[y], &mut b);
            assert_eq!(a, b);
            c.b2(&x, &mu, &[y], &mut a);
            fz.b2(&[y], &mut b);
            assert_eq!(a, b);
        }
    }
}
