//! Maximal monotone operators realized through their resolvents.
//!
//! Three concrete families are supported: the zero operator, the normal cone
//! of a closed convex set (resolvent = Euclidean projection), and the
//! subdifferential of a separable convex function (resolvent = proximal map).
//! A user-supplied resolvent can be registered as a fourth variant.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, norm_sq};

pub const MEMBERSHIP_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_ITER: usize = 10_000;
pub const DYKSTRA_TOL: f64 = 1e-10;
pub const PROX_MAX_ITER: usize = 200;
pub const BOUNDARY_TOL: f64 = 1e-8;

/// `{x : <normal, x> <= offset}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let h = Halfspace { normal, offset };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.normal.is_empty() {
            return Err(Error::input("halfspace normal must be nonempty"));
        }
        if !(norm(&self.normal) > 0.0) || !self.offset.is_finite() {
            return Err(Error::input("halfspace needs a nonzero finite normal and finite offset"));
        }
        Ok(())
    }

    /// Signed Euclidean distance, positive outside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        (dot(&self.normal, x) - self.offset) / norm(&self.normal)
    }

    fn project_into(&self, x: &mut [f64]) {
        let excess = dot(&self.normal, x) - self.offset;
        if excess > 0.0 {
            let scale = excess / norm_sq(&self.normal);
            for (xi, ai) in x.iter_mut().zip(&self.normal) {
                *xi -= scale * ai;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvexSet {
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// Intersection of halfspaces; `interior` certifies nonemptiness.
    Polytope {
        facets: Vec<Halfspace>,
        interior: Vec<f64>,
    },
}

impl ConvexSet {
    pub fn halfspace(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let s = ConvexSet::Halfspace { normal, offset };
        s.validate()?;
        Ok(s)
    }

    pub fn cube(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let s = ConvexSet::Box { lower, upper };
        s.validate()?;
        Ok(s)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let s = ConvexSet::Ball { center, radius };
        s.validate()?;
        Ok(s)
    }

    pub fn polytope(facets: Vec<Halfspace>, interior: Vec<f64>) -> Result<Self> {
        let s = ConvexSet::Polytope { facets, interior };
        s.validate()?;
        Ok(s)
    }

    /// Checks the type invariants. Deserialized sets must pass through here.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Halfspace { normal, offset } => Halfspace {
                normal: normal.clone(),
                offset: *offset,
            }
            .validate(),
            ConvexSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::input("box bounds must be nonempty and of equal length"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u) || l.is_nan() || u.is_nan()) {
                    return Err(Error::input("box requires lower <= upper coordinatewise"));
                }
                Ok(())
            }
            ConvexSet::Ball { center, radius } => {
                if center.is_empty() || !center.iter().all(|c| c.is_finite()) {
                    return Err(Error::input("ball center must be a finite nonempty point"));
                }
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::input("ball radius must be positive and finite"));
                }
                Ok(())
            }
            ConvexSet::Polytope { facets, interior } => {
                if facets.is_empty() {
                    return Err(Error::input("polytope needs at least one facet"));
                }
                for f in facets {
                    f.validate()?;
                    if f.normal.len() != interior.len() {
                        return Err(Error::input("polytope facet dimension mismatch"));
                    }
                    if !(f.signed_distance(interior) < 0.0) {
                        return Err(Error::input(
                            "polytope interior point does not strictly satisfy every facet",
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Halfspace { normal, .. } => normal.len(),
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Polytope { interior, .. } => interior.len(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::input(format!(
                "point has dimension {} but set has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Largest constraint violation (0 inside). Distances are Euclidean.
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            ConvexSet::Halfspace { normal, offset } => {
                ((dot(normal, x) - offset) / norm(normal)).max(0.0)
            }
            ConvexSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(xi, (l, u))| (l - xi).max(xi - u).max(0.0))
                .fold(0.0, f64::max),
            ConvexSet::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            ConvexSet::Polytope { facets, .. } => facets
                .iter()
                .map(|f| f.signed_distance(x).max(0.0))
                .fold(0.0, f64::max),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.violation(x) <= tol
    }

    fn contains_exact(&self, x: &[f64]) -> bool {
        match self {
            ConvexSet::Halfspace { normal, offset } => dot(normal, x) <= *offset,
            ConvexSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(xi, (l, u))| l <= xi && xi <= u),
            ConvexSet::Ball { center, radius } => {
                crate::linalg::dist_sq(x, center) <= radius * radius
            }
            ConvexSet::Polytope { facets, .. } => {
                facets.iter().all(|f| dot(&f.normal, x) <= f.offset)
            }
        }
    }

    /// Euclidean projection. Points already in the set are returned unchanged.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if self.contains_exact(x) {
            return Ok(x.to_vec());
        }
        match self {
            ConvexSet::Halfspace { normal, offset } => {
                let mut p = x.to_vec();
                Halfspace {
                    normal: normal.clone(),
                    offset: *offset,
                }
                .project_into(&mut p);
                Ok(p)
            }
            ConvexSet::Box { lower, upper } => Ok(x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(xi, (l, u))| xi.clamp(*l, *u))
                .collect()),
            ConvexSet::Ball { center, radius } => {
                let d = dist(x, center);
                let s = radius / d;
                Ok(x.iter()
                    .zip(center)
                    .map(|(xi, ci)| ci + s * (xi - ci))
                    .collect())
            }
            ConvexSet::Polytope { facets, .. } => dykstra(facets, x),
        }
    }

    /// Distance from `x` to the set.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let p = self.project(x)?;
        Ok(dist(x, &p))
    }

    /// Facets as halfspaces, in a fixed order. Boxes expand to
    /// `(lower_0, upper_0, lower_1, ...)`; balls have none.
    pub fn facets(&self) -> Vec<Halfspace> {
        match self {
            ConvexSet::Halfspace { normal, offset } => vec![Halfspace {
                normal: normal.clone(),
                offset: *offset,
            }],
            ConvexSet::Box { lower, upper } => {
                let n = lower.len();
                let mut out = Vec::with_capacity(2 * n);
                for i in 0..n {
                    let mut e = vec![0.0; n];
                    e[i] = -1.0;
                    out.push(Halfspace {
                        normal: e.clone(),
                        offset: -lower[i],
                    });
                    e[i] = 1.0;
                    out.push(Halfspace {
                        normal: e,
                        offset: upper[i],
                    });
                }
                out
            }
            ConvexSet::Ball { .. } => Vec::new(),
            ConvexSet::Polytope { facets, .. } => facets.clone(),
        }
    }

    /// Unit outward normal at a boundary point. Where several facets are
    /// active, the one with the largest constraint value wins, ties going to
    /// the lowest facet index.
    pub fn outward_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let dist_to_set = self.distance(x)?;
        if dist_to_set > BOUNDARY_TOL {
            return Err(Error::input(format!(
                "sample is not on the boundary (distance to set {dist_to_set:e})"
            )));
        }
        match self {
            ConvexSet::Ball { center, radius } => {
                let d = dist(x, center);
                if (d - radius).abs() > BOUNDARY_TOL {
                    return Err(Error::input("sample lies in the interior of the ball"));
                }
                Ok(x.iter().zip(center).map(|(xi, ci)| (xi - ci) / d).collect())
            }
            _ => {
                let mut best: Option<(usize, f64)> = None;
                for (i, f) in self.facets().iter().enumerate() {
                    let v = f.signed_distance(x);
                    if v.abs() <= BOUNDARY_TOL && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((i, v));
                    }
                }
                let (i, _) = best.ok_or_else(|| Error::input("sample lies in the interior of the set"))?;
                let f = &self.facets()[i];
                let n = norm(&f.normal);
                Ok(f.normal.iter().map(|a| a / n).collect())
            }
        }
    }
}

/// Cyclic Dykstra projection onto an intersection of halfspaces.
fn dykstra(facets: &[Halfspace], x0: &[f64]) -> Result<Vec<f64>> {
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut incr = vec![vec![0.0; dim]; facets.len()];
    let mut y = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    for _ in 0..DYKSTRA_MAX_ITER {
        let prev = x.clone();
        for (f, p) in facets.iter().zip(incr.iter_mut()) {
            for k in 0..dim {
                y[k] = x[k] + p[k];
            }
            x.copy_from_slice(&y);
            f.project_into(&mut x);
            for k in 0..dim {
                p[k] = y[k] - x[k];
            }
        }
        let violation = facets
            .iter()
            .map(|f| f.signed_distance(&x).max(0.0))
            .fold(0.0, f64::max);
        residual = dist(&x, &prev).max(violation);
        if residual <= DYKSTRA_TOL {
            return Ok(polish_active_set(facets, x0, &x).unwrap_or(x));
        }
    }
    Err(Error::Numerical {
        message: format!("polytope projection did not converge in {DYKSTRA_MAX_ITER} iterations"),
        residual,
    })
}

/// Exact projection onto the facets active at the Dykstra iterate: solves
/// `min |p - x0|` subject to equality on those facets and accepts the result
/// only if it is feasible with nonnegative multipliers (the KKT conditions).
fn polish_active_set(facets: &[Halfspace], x0: &[f64], approx: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<&Halfspace> = facets
        .iter()
        .filter(|f| f.signed_distance(approx) > -1e-7)
        .collect();
    let (m, dim) = (active.len(), x0.len());
    if m == 0 || m > dim {
        return None;
    }
    let gram = nalgebra::DMatrix::from_fn(m, m, |i, j| dot(&active[i].normal, &active[j].normal));
    let rhs = nalgebra::DVector::from_iterator(m, active.iter().map(|f| dot(&f.normal, x0) - f.offset));
    let mult = gram.lu().solve(&rhs)?;
    if mult.iter().any(|l| !(*l >= -1e-12)) {
        return None;
    }
    let mut p = x0.to_vec();
    for (f, l) in active.iter().zip(mult.iter()) {
        for (pk, ak) in p.iter_mut().zip(&f.normal) {
            *pk -= l * ak;
        }
    }
    let feasible = facets.iter().all(|f| f.signed_distance(&p) <= 1e-13);
    feasible.then_some(p)
}

/// A one-dimensional closed convex function, applied coordinatewise.
pub trait ScalarConvex: Send + Sync + fmt::Debug {
    fn value(&self, u: f64) -> f64;
    /// Left and right derivatives at `u`.
    fn derivative_bounds(&self, u: f64) -> (f64, f64);
    /// Closed-form proximal map of `lambda * f`, when one is known.
    fn prox(&self, _lambda: f64, _x: f64) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AbsValue;

impl ScalarConvex for AbsValue {
    fn value(&self, u: f64) -> f64 {
        u.abs()
    }
    fn derivative_bounds(&self, u: f64) -> (f64, f64) {
        if u > 0.0 {
            (1.0, 1.0)
        } else if u < 0.0 {
            (-1.0, -1.0)
        } else {
            (-1.0, 1.0)
        }
    }
    fn prox(&self, lambda: f64, x: f64) -> Option<f64> {
        Some(x.signum() * (x.abs() - lambda).max(0.0))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HalfSquare;

impl ScalarConvex for HalfSquare {
    fn value(&self, u: f64) -> f64 {
        0.5 * u * u
    }
    fn derivative_bounds(&self, u: f64) -> (f64, f64) {
        (u, u)
    }
    fn prox(&self, lambda: f64, x: f64) -> Option<f64> {
        Some(x / (1.0 + lambda))
    }
}

/// Huber function with threshold `kappa`.
#[derive(Debug, Clone, Copy)]
pub struct Huber {
    pub kappa: f64,
}

impl ScalarConvex for Huber {
    fn value(&self, u: f64) -> f64 {
        if u.abs() <= self.kappa {
            0.5 * u * u
        } else {
            self.kappa * (u.abs() - 0.5 * self.kappa)
        }
    }
    fn derivative_bounds(&self, u: f64) -> (f64, f64) {
        let d = u.clamp(-self.kappa, self.kappa);
        (d, d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxStrategy {
    ClosedForm,
    Bisection,
}

/// Proximal map of `lambda * f` at `x` by safeguarded bisection on the
/// optimality inclusion `x - u in lambda * df(u)`.
pub fn prox_bisection(f: &dyn ScalarConvex, lambda: f64, x: f64) -> Result<f64> {
    // < 0: u too small, > 0: u too large, 0: optimal.
    let side = |u: f64| -> i8 {
        let (dl, dr) = f.derivative_bounds(u);
        if x > u + lambda * dr {
            -1
        } else if x < u + lambda * dl {
            1
        } else {
            0
        }
    };
    let s0 = side(x);
    if s0 == 0 {
        return Ok(x);
    }
    let mut step = lambda.max(1.0);
    let (mut lo, mut hi) = if s0 > 0 { (x - step, x) } else { (x, x + step) };
    let mut expansions = 0;
    loop {
        let s = if s0 > 0 { side(lo) } else { side(hi) };
        if s == 0 {
            return Ok(if s0 > 0 { lo } else { hi });
        }
        if s != s0 {
            break;
        }
        expansions += 1;
        if expansions > PROX_MAX_ITER || !step.is_finite() {
            return Err(Error::Numerical {
                message: "prox bracket expansion failed".into(),
                residual: step,
            });
        }
        step *= 2.0;
        if s0 > 0 {
            hi = lo;
            lo = x - step;
        } else {
            lo = hi;
            hi = x + step;
        }
    }
    for _ in 0..PROX_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        match side(mid) {
            0 => return Ok(mid),
            s if s < 0 => lo = mid,
            _ => hi = mid,
        }
    }
    let mid = 0.5 * (lo + hi);
    if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
        Ok(mid)
    } else {
        Err(Error::Numerical {
            message: format!("prox bisection did not converge in {PROX_MAX_ITER} iterations"),
            residual: hi - lo,
        })
    }
}

/// `psi(y) = sum_i f(y_i)`.
#[derive(Debug, Clone)]
pub struct SeparableConvex {
    pub dim: usize,
    pub component: Arc<dyn ScalarConvex>,
    pub strategy: ProxStrategy,
}

impl SeparableConvex {
    pub fn value(&self, y: &[f64]) -> f64 {
        y.iter().map(|&u| self.component.value(u)).sum()
    }

    fn prox(&self, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
        x.iter()
            .map(|&xi| match self.strategy {
                ProxStrategy::ClosedForm => self.component.prox(lambda, xi).ok_or_else(|| {
                    Error::input("closed-form prox requested but the function has none")
                }),
                ProxStrategy::Bisection => prox_bisection(self.component.as_ref(), lambda, xi),
            })
            .collect()
    }
}

pub type ResolventFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// A resolvent supplied by the caller and trusted as-is.
#[derive(Clone)]
pub struct CustomResolvent {
    pub dim: usize,
    pub map: Arc<ResolventFn>,
}

impl fmt::Debug for CustomResolvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomResolvent").field("dim", &self.dim).finish()
    }
}

#[derive(Debug, Clone)]
pub enum MonotoneOperator {
    Zero { dim: usize },
    Indicator(ConvexSet),
    Subgradient(SeparableConvex),
    Custom(CustomResolvent),
}

/// Outcome of the sampling probe run when a custom resolvent is registered.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub pairs: usize,
    pub nonexpansive_violations: usize,
    pub worst_excess: f64,
}

impl MonotoneOperator {
    pub fn zero(dim: usize) -> Self {
        MonotoneOperator::Zero { dim }
    }

    pub fn indicator(set: ConvexSet) -> Self {
        MonotoneOperator::Indicator(set)
    }

    pub fn subgradient(dim: usize, component: Arc<dyn ScalarConvex>, strategy: ProxStrategy) -> Self {
        MonotoneOperator::Subgradient(SeparableConvex {
            dim,
            component,
            strategy,
        })
    }

    /// Registers a custom resolvent after probing nonexpansiveness on
    /// `probe_pairs` random pairs from `[-scale, scale]^dim`. Probe failures
    /// are logged, not fatal.
    pub fn custom(
        dim: usize,
        map: Arc<ResolventFn>,
        probe_pairs: usize,
        scale: f64,
        seed: u64,
    ) -> (Self, ProbeReport) {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, 0, 0, crate::rng::StreamRole::Sampler);
        let mut violations = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..probe_pairs {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..=scale)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..=scale)).collect();
            let jx = map(1.0, &x);
            let jy = map(1.0, &y);
            let excess = dist(&jx, &jy) - dist(&x, &y);
            if excess > 1e-10 {
                violations += 1;
                worst = worst.max(excess);
            }
        }
        if violations > 0 {
            log::warn!(
                "custom resolvent failed nonexpansiveness on {violations}/{probe_pairs} pairs (worst excess {worst:e})"
            );
        }
        (
            MonotoneOperator::Custom(CustomResolvent { dim, map }),
            ProbeReport {
                pairs: probe_pairs,
                nonexpansive_violations: violations,
                worst_excess: worst,
            },
        )
    }

    pub fn dim(&self) -> usize {
        match self {
            MonotoneOperator::Zero { dim } => *dim,
            MonotoneOperator::Indicator(s) => s.dim(),
            MonotoneOperator::Subgradient(s) => s.dim,
            MonotoneOperator::Custom(c) => c.dim,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MonotoneOperator::Zero { .. })
    }

    /// The set whose closure is the operator's domain, when it is a constraint.
    pub fn domain_set(&self) -> Option<&ConvexSet> {
        match self {
            MonotoneOperator::Indicator(s) => Some(s),
            _ => None,
        }
    }

    /// Membership of `x` in the closure of the domain. Operators other than
    /// indicators have full domain here.
    pub fn in_domain(&self, x: &[f64], tol: f64) -> bool {
        match self {
            MonotoneOperator::Indicator(s) => s.contains(x, tol),
            _ => true,
        }
    }

    /// `(J, k)` with `J = (I + lambda A)^{-1} x` and `k = x - J`.
    pub fn resolvent(&self, lambda: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let j = self.resolvent_point(lambda, x)?;
        let k = x.iter().zip(&j).map(|(a, b)| a - b).collect();
        Ok((j, k))
    }

    /// Resolvent in place; returns `|x - J(x)|`.
    pub fn resolve_in_place(&self, lambda: f64, x: &mut [f64]) -> Result<f64> {
        match self {
            MonotoneOperator::Zero { .. } => Ok(0.0),
            MonotoneOperator::Indicator(ConvexSet::Box { lower, upper }) => {
                let mut acc = 0.0;
                for ((xi, l), u) in x.iter_mut().zip(lower).zip(upper) {
                    let c = xi.clamp(*l, *u);
                    acc += (*xi - c) * (*xi - c);
                    *xi = c;
                }
                Ok(acc.sqrt())
            }
            _ => {
                let j = self.resolvent_point(lambda, x)?;
                let d = dist(x, &j);
                x.copy_from_slice(&j);
                Ok(d)
            }
        }
    }

    fn resolvent_point(&self, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
        if !(lambda > 0.0) {
            return Err(Error::input(format!("resolvent step must be positive, got {lambda}")));
        }
        if x.len() != self.dim() {
            return Err(Error::input(format!(
                "point has dimension {} but operator has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        match self {
            MonotoneOperator::Zero { .. } => Ok(x.to_vec()),
            MonotoneOperator::Indicator(set) => set.project(x),
            MonotoneOperator::Subgradient(f) => f.prox(lambda, x),
            MonotoneOperator::Custom(c) => {
                let j = (c.map)(lambda, x);
                if j.len() != c.dim {
                    return Err(Error::input("custom resolvent returned wrong dimension"));
                }
                Ok(j)
            }
        }
    }

    /// Yosida approximation `(x - J(x)) / lambda`.
    pub fn yosida(&self, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (_, k) = self.resolvent(lambda, x)?;
        Ok(k.into_iter().map(|v| v / lambda).collect())
    }
}

/// Interior point `a`, ball radius `r` and the declared slack constants of
/// the interior-ball inequality. Only the radius part is verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorBallCertificate {
    pub center: Vec<f64>,
    pub radius: f64,
    pub m2: f64,
    pub m3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapViolation {
    pub index: usize,
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub checked: usize,
    pub ball_contained: bool,
    pub violations: Vec<GapViolation>,
}

impl GapReport {
    pub fn passed(&self) -> bool {
        self.ball_contained && self.violations.is_empty()
    }
}

/// Verifies `<x - a, n(x)> >= r` at each boundary sample.
pub fn interior_gap_check(
    op: &MonotoneOperator,
    cert: &InteriorBallCertificate,
    boundary_samples: &[Vec<f64>],
) -> Result<GapReport> {
    let set = op
        .domain_set()
        .ok_or_else(|| Error::input("interior gap check requires an indicator operator"))?;
    if cert.center.len() != set.dim() {
        return Err(Error::input("certificate dimension mismatch"));
    }
    if !(cert.radius > 0.0) {
        return Err(Error::input("certificate radius must be positive"));
    }
    let ball_contained = ball_inside(set, &cert.center, cert.radius);
    let mut violations = Vec::new();
    for (index, x) in boundary_samples.iter().enumerate() {
        let n = set.outward_normal(x)?;
        let rel: Vec<f64> = x.iter().zip(&cert.center).map(|(a, b)| a - b).collect();
        let gap = dot(&rel, &n);
        if gap < cert.radius - 1e-12 {
            violations.push(GapViolation {
                index,
                point: x.clone(),
                normal: n,
                gap,
            });
        }
    }
    Ok(GapReport {
        checked: boundary_samples.len(),
        ball_contained,
        violations,
    })
}

/// Sampled check that the closed ball lies in the set: the centre, the
/// coordinate poles and a ring of diagonal directions must all be members.
fn ball_inside(set: &ConvexSet, center: &[f64], radius: f64) -> bool {
    let dim = center.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            dirs.push(e);
        }
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut e = vec![0.0; dim];
                e[i] = si * std::f64::consts::FRAC_1_SQRT_2;
                e[j] = sj * std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(e);
            }
        }
    }
    set.contains(center, 0.0)
        && dirs.iter().all(|d| {
            let p: Vec<f64> = center.iter().zip(d).map(|(c, di)| c + radius * di).collect();
            set.contains(&p, MEMBERSHIP_TOL)
        })
}
