//! The single JSON run document and its content hash.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::AveragingSettings;
use crate::error::{Error, Result};
use crate::ldp::PenaltySettings;
use crate::model::{
    build_aggregation_diffusion, linear_test, ou_frozen, AggregationDiffusionSpec, BuiltModel, GradientField,
    LinearTestParams, OuFrozenParams,
};
use crate::monotone_ops::{AbsValue, ConvexSet, HalfSquare, Huber, MonotoneOperator, ProxStrategy, ScalarConvex};
use crate::sde_engine::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub operators: OperatorsSpec,
    pub sim: SimConfig,
    #[serde(default)]
    pub experiment: ExperimentGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearTest {
        #[serde(default)]
        params: LinearTestParams,
    },
    OuFrozen {
        #[serde(default)]
        params: OuFrozenParams,
    },
    AggregationDiffusion { params: AggregationParams },
}

/// `K z + c`, row-major `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearField {
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LinearField {
    fn build(&self) -> Result<GradientField> {
        GradientField::linear(self.matrix.clone(), self.offset.clone())
    }
}

/// Aggregation-diffusion with linear gradients and constant diffusions. The
/// slow domain is taken from `operators.a1`, which must be an indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationParams {
    pub grad_v1: LinearField,
    pub grad_v2: LinearField,
    pub grad_v3: LinearField,
    pub grad_v4: LinearField,
    pub sigma1: Vec<f64>,
    pub d1: usize,
    pub sigma2: Vec<f64>,
    pub d2: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorsSpec {
    #[serde(default)]
    pub a1: OperatorSpec,
    #[serde(default)]
    pub a2: OperatorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFunction {
    Abs,
    HalfSquare,
    Huber { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    #[default]
    Zero,
    Indicator { set: ConvexSet },
    /// Subdifferential of `sum_i f(y_i)`.
    Subgradient {
        function: ScalarFunction,
        #[serde(default = "default_strategy")]
        strategy: ProxStrategy,
    },
}

fn default_strategy() -> ProxStrategy {
    ProxStrategy::Bisection
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<MonotoneOperator> {
        Ok(match self {
            OperatorSpec::Zero => MonotoneOperator::zero(dim),
            OperatorSpec::Indicator { set } => {
                set.validate()?;
                if set.dim() != dim {
                    return Err(Error::input(format!("set has dimension {} but the state has {dim}", set.dim())));
                }
                MonotoneOperator::indicator(set.clone())
            }
            OperatorSpec::Subgradient { function, strategy } => {
                let f: Arc<dyn ScalarConvex> = match *function {
                    ScalarFunction::Abs => Arc::new(AbsValue),
                    ScalarFunction::HalfSquare => Arc::new(HalfSquare),
                    ScalarFunction::Huber { kappa } => {
                        if !(kappa > 0.0) {
                            return Err(Error::input("huber kappa must be positive"));
                        }
                        Arc::new(Huber { kappa })
                    }
                };
                MonotoneOperator::subgradient(dim, f, *strategy)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    AvgThetaPos,
    AvgThetaZero,
    Ldp,
    Mixing,
    Picard,
}

/// `epsilon = scale * delta^power`, capped at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonRule {
    pub scale: f64,
    pub power: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule { scale: 1.0, power: 0.5 }
    }
}

impl EpsilonRule {
    pub fn epsilon(&self, delta: f64) -> f64 {
        (self.scale * delta.powf(self.power)).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdpExperiment {
    /// Endpoint targets, in addition to the baseline endpoint.
    pub targets: Vec<Vec<f64>>,
    pub penalty: PenaltySettings,
    pub epsilons: Vec<f64>,
    /// `delta = epsilon^delta_exponent`.
    pub delta_exponent: f64,
    pub n_mc: usize,
    /// Deviation level of the probed event `sup_t |X_t - Xbar0_t| > eta`.
    pub eta: f64,
    /// Run the Monte Carlo probe (also enabled by `--slow`).
    pub probe: bool,
}

impl Default for LdpExperiment {
    fn default() -> Self {
        LdpExperiment {
            targets: Vec::new(),
            penalty: PenaltySettings::default(),
            epsilons: vec![0.4, 0.2, 0.1],
            delta_exponent: 1.5,
            n_mc: 10_000,
            eta: 0.5,
            probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub kind: ExperimentKind,
    pub deltas: Vec<f64>,
    pub epsilon_rule: EpsilonRule,
    /// Block exponents; default `[sim.gamma]`.
    pub gammas: Vec<f64>,
    /// When set, `dt = delta^dt_power` per cell; otherwise `sim.dt`.
    pub dt_power: Option<f64>,
    pub mc_repetitions: usize,
    pub max_workers: Option<usize>,
    pub averaging: AveragingSettings,
    pub ldp: LdpExperiment,
    pub picard_max_iter: usize,
    pub picard_tol: f64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            kind: ExperimentKind::AvgThetaPos,
            deltas: vec![1e-1, 1e-2, 1e-3, 1e-4],
            epsilon_rule: EpsilonRule::default(),
            gammas: Vec::new(),
            dt_power: None,
            mc_repetitions: 8,
            max_workers: None,
            averaging: AveragingSettings::default(),
            ldp: LdpExperiment::default(),
            picard_max_iter: 20,
            picard_tol: 1e-10,
        }
    }
}

/// One `(delta, gamma)` cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub delta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub sim: SimConfig,
}

impl RunConfig {
    /// Parses and validates; every failure is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let built = self.build_model()?;
        let dims = built.coeffs.dims();
        if self.sim.x0.len() != dims.n || self.sim.y0.len() != dims.m {
            return Err(Error::input("sim.x0 / sim.y0 do not match the model dimensions"));
        }
        let e = &self.experiment;
        e.averaging.validate()?;
        if e.mc_repetitions == 0 {
            return Err(Error::input("mc_repetitions must be at least 1"));
        }
        if e.max_workers == Some(0) {
            return Err(Error::input("max_workers must be at least 1"));
        }
        if e.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::input("deltas must be positive"));
        }
        if e.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::input("gammas must lie in (0, 1)"));
        }
        match e.kind {
            ExperimentKind::AvgThetaPos => {
                if !(self.sim.theta > 0.0) {
                    return Err(Error::input("avg_theta_pos needs sim.theta > 0"));
                }
                // delta / epsilon stays bounded as delta -> 0 only if power <= 1.
                if !(e.epsilon_rule.scale > 0.0) || e.epsilon_rule.power > 1.0 || e.epsilon_rule.power < 0.0 {
                    return Err(Error::input("epsilon rule must keep delta/epsilon bounded (0 <= power <= 1)"));
                }
            }
            ExperimentKind::AvgThetaZero => {
                if self.sim.theta != 0.0 {
                    return Err(Error::input("avg_theta_zero needs sim.theta = 0"));
                }
            }
            ExperimentKind::Ldp => {
                if !(e.ldp.delta_exponent > 1.0) {
                    return Err(Error::input("ldp needs delta/epsilon -> 0 (delta_exponent > 1)"));
                }
                if e.ldp.epsilons.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                    return Err(Error::input("ldp epsilons must lie in (0, 1]"));
                }
                if e.ldp.targets.iter().any(|t| t.len() != dims.n) {
                    return Err(Error::input("ldp targets must have the slow dimension"));
                }
                if !(e.ldp.eta > 0.0) {
                    return Err(Error::input("ldp eta must be positive"));
                }
            }
            ExperimentKind::Mixing | ExperimentKind::Picard => {}
        }
        if matches!(e.kind, ExperimentKind::AvgThetaPos | ExperimentKind::AvgThetaZero) {
            for cell in self.cells()? {
                cell.sim.validate()?;
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<BuiltModel> {
        let (coeffs, n) = match &self.model {
            ModelSpec::LinearTest { params } => {
                let c = linear_test(params.clone())?;
                let n = c.dims().n;
                (c, n)
            }
            ModelSpec::OuFrozen { params } => {
                let c = ou_frozen(params.clone())?;
                let n = c.dims().n;
                (c, n)
            }
            ModelSpec::AggregationDiffusion { params: p } => {
                let OperatorSpec::Indicator { set } = &self.operators.a1 else {
                    return Err(Error::input("aggregation_diffusion needs operators.a1 to be an indicator"));
                };
                set.validate()?;
                let n = p.grad_v1.offset.len();
                let spec = AggregationDiffusionSpec {
                    grad_v1: p.grad_v1.build()?,
                    grad_v2: p.grad_v2.build()?,
                    grad_v3: p.grad_v3.build()?,
                    grad_v4: p.grad_v4.build()?,
                    sigma1: p.sigma1.clone(),
                    d1: p.d1,
                    sigma2: p.sigma2.clone(),
                    d2: p.d2,
                    domain: set.clone(),
                    a2: self.operators.a2.build(n)?,
                };
                return build_aggregation_diffusion(spec);
            }
        };
        let m = coeffs.dims().m;
        Ok(BuiltModel {
            coeffs,
            a1: self.operators.a1.build(n)?,
            a2: self.operators.a2.build(m)?,
        })
    }

    /// Sweep cells in `(gamma, delta)` order.
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let e = &self.experiment;
        let gammas = if e.gammas.is_empty() { vec![self.sim.gamma] } else { e.gammas.clone() };
        let mut out = Vec::new();
        for &gamma in &gammas {
            for &delta in &e.deltas {
                let epsilon = e.epsilon_rule.epsilon(delta);
                let mut sim = self.sim.clone();
                sim.delta = delta;
                sim.epsilon = epsilon;
                sim.gamma = gamma;
                sim.fast_substeps = None;
                if let Some(p) = e.dt_power {
                    sim.dt = delta.powf(p).min(sim.t_end);
                }
                out.push(GridCell {
                    delta,
                    epsilon,
                    gamma,
                    sim,
                });
            }
        }
        Ok(out)
    }

    /// Sorted-key JSON of the fully defaulted config.
    pub fn canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 over `"config {len}\0{canonical json}"`, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let body = self.canonical_json()?;
        let mut h = Sha256::new();
        h.update(format!("config {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
