//! Counterexample removal: minimise the objective subject to every stored
//! counterexample being satisfied with a margin.

use crate::model::{Model, ModelError};
use crate::qp::{kkt_residual, solve_qp, ConvexQp, QpError, QpSolution, QpStatus};
use crate::spec::{Property, SatisfactionFn, SATISFACTION_CONSTANT};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Margin used by exact QP repair.
pub const QP_MARGIN: f64 = 1e-2;
pub const INITIAL_PENALTY_WEIGHT: f64 = 0.0625;

#[derive(Debug, Error)]
pub enum RemovalError {
    #[error("removal not supported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

pub type Result<T> = std::result::Result<T, RemovalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Objective {
    /// Mean squared error over all outputs of all samples.
    MseOnDataset {
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
    ParamDistanceSq { theta0: Vec<f64> },
    /// Sum of absolute values of the listed parameters (all when empty).
    AbsParams { indices: Vec<usize> },
    OutputAtPoint { point: Vec<f64>, index: usize },
}

/// `½ θᵀHθ + gᵀθ + k`, with `H` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadForm {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub k: f64,
}

impl QuadForm {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let p = self.dim();
        let mut v = self.k;
        for i in 0..p {
            let hx: f64 = (0..p).map(|j| self.h[i * p + j] * theta[j]).sum();
            v += 0.5 * theta[i] * hx + self.g[i] * theta[i];
        }
        v
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.dim();
        (0..p)
            .map(|i| self.g[i] + (0..p).map(|j| self.h[i * p + j] * theta[j]).sum::<f64>())
            .collect()
    }
}

/// Rows of `∂N(x)/∂θ`, one per output. For a model that is linear in its
/// parameters these give `N_θ(x) = Φ(x) θ` exactly.
pub fn param_jacobian(model: &Model, x: &[f64]) -> std::result::Result<Vec<Vec<f64>>, ModelError> {
    (0..model.output_dim())
        .map(|j| {
            let mut e = vec![0.0; model.output_dim()];
            e[j] = 1.0;
            model.grad(x, &e).map(|(d, _)| d)
        })
        .collect()
}

impl Objective {
    pub fn mse(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        Objective::MseOnDataset { inputs, targets }
    }

    /// Dataset of a scalar regression objective as `(x, y)` columns.
    pub fn scalar_dataset(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Objective::MseOnDataset { inputs, targets }
                if inputs.iter().all(|x| x.len() == 1) && targets.iter().all(|t| t.len() == 1) =>
            {
                Some((
                    inputs.iter().map(|x| x[0]).collect(),
                    targets.iter().map(|t| t[0]).collect(),
                ))
            }
            _ => None,
        }
    }

    pub fn value(&self, model: &Model) -> std::result::Result<f64, ModelError> {
        match self {
            Objective::MseOnDataset { inputs, targets } => {
                if inputs.len() != targets.len() {
                    return Err(ModelError::Invalid("inputs and targets differ in length".into()));
                }
                if inputs.is_empty() {
                    return Ok(0.0);
                }
                let mut total = 0.0;
                let mut count = 0usize;
                for (x, t) in inputs.iter().zip(targets) {
                    let y = model.forward(x)?;
                    if y.len() != t.len() {
                        return Err(ModelError::Dimension {
                            expected: y.len(),
                            got: t.len(),
                        });
                    }
                    total += y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    count += t.len();
                }
                Ok(total / count as f64)
            }
            Objective::ParamDistanceSq { theta0 } => {
                let theta = model.param_vec();
                check_len(theta0.len(), theta.len())?;
                Ok(theta.iter().zip(theta0).map(|(a, b)| (a - b).powi(2)).sum())
            }
            Objective::AbsParams { indices } => {
                let theta = model.param_vec();
                if indices.is_empty() {
                    return Ok(theta.iter().map(|v| v.abs()).sum());
                }
                indices
                    .iter()
                    .map(|&i| theta.get(i).map(|v| v.abs()).ok_or(index_error(i, theta.len())))
                    .sum()
            }
            Objective::OutputAtPoint { point, index } => {
                let y = model.forward(point)?;
                y.get(*index).copied().ok_or(index_error(*index, y.len()))
            }
        }
    }

    pub fn gradient(&self, model: &Model) -> std::result::Result<Vec<f64>, ModelError> {
        let p = model.param_count();
        match self {
            Objective::MseOnDataset { inputs, targets } => {
                let mut grad = vec![0.0; p];
                let count: usize = targets.iter().map(|t| t.len()).sum();
                if count == 0 {
                    return Ok(grad);
                }
                for (x, t) in inputs.iter().zip(targets) {
                    let y = model.forward(x)?;
                    let up: Vec<f64> = y
                        .iter()
                        .zip(t)
                        .map(|(a, b)| 2.0 * (a - b) / count as f64)
                        .collect();
                    let (d, _) = model.grad(x, &up)?;
                    for (g, v) in grad.iter_mut().zip(d) {
                        *g += v;
                    }
                }
                Ok(grad)
            }
            Objective::ParamDistanceSq { theta0 } => {
                let theta = model.param_vec();
                check_len(theta0.len(), p)?;
                Ok(theta.iter().zip(theta0).map(|(a, b)| 2.0 * (a - b)).collect())
            }
            Objective::AbsParams { indices } => {
                let theta = model.param_vec();
                let mut grad = vec![0.0; p];
                let all: Vec<usize> = (0..p).collect();
                for &i in if indices.is_empty() { &all } else { indices } {
                    let v = *theta.get(i).ok_or(index_error(i, p))?;
                    grad[i] = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                Ok(grad)
            }
            Objective::OutputAtPoint { point, index } => {
                let mut e = vec![0.0; model.output_dim()];
                if *index >= e.len() {
                    return Err(index_error(*index, e.len()));
                }
                e[*index] = 1.0;
                Ok(model.grad(point, &e)?.0)
            }
        }
    }

    /// Exact quadratic form in the parameters, when one exists.
    pub fn quadratic_form(&self, model: &Model) -> Option<QuadForm> {
        let p = model.param_count();
        match self {
            Objective::ParamDistanceSq { theta0 } if theta0.len() == p => {
                let mut h = vec![0.0; p * p];
                for i in 0..p {
                    h[i * p + i] = 2.0;
                }
                Some(QuadForm {
                    h,
                    g: theta0.iter().map(|v| -2.0 * v).collect(),
                    k: theta0.iter().map(|v| v * v).sum(),
                })
            }
            Objective::MseOnDataset { inputs, targets }
                if model.is_linear_in_params() && inputs.len() == targets.len() =>
            {
                let count: usize = targets.iter().map(|t| t.len()).sum();
                let mut h = vec![0.0; p * p];
                let mut g = vec![0.0; p];
                let mut k = 0.0;
                if count == 0 {
                    return Some(QuadForm { h, g, k });
                }
                let scale = 2.0 / count as f64;
                for (x, t) in inputs.iter().zip(targets) {
                    let rows = param_jacobian(model, x).ok()?;
                    if rows.len() != t.len() {
                        return None;
                    }
                    for (row, &tj) in rows.iter().zip(t) {
                        for i in 0..p {
                            for j in 0..p {
                                h[i * p + j] += scale * row[i] * row[j];
                            }
                            g[i] -= scale * row[i] * tj;
                        }
                        k += tj * tj / count as f64;
                    }
                }
                Some(QuadForm { h, g, k })
            }
            Objective::OutputAtPoint { point, index } if model.is_linear_in_params() => {
                let rows = param_jacobian(model, point).ok()?;
                Some(QuadForm {
                    h: vec![0.0; p * p],
                    g: rows.get(*index)?.clone(),
                    k: 0.0,
                })
            }
            _ => None,
        }
    }
}

fn check_len(expected: usize, got: usize) -> std::result::Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Dimension { expected, got });
    }
    Ok(())
}

fn index_error(i: usize, len: usize) -> ModelError {
    ModelError::Invalid(format!("index {i} out of range for length {len}"))
}

/// The scenario problem: minimise the objective with every stored
/// counterexample satisfied at least to the satisfaction constant.
#[derive(Debug, Clone)]
pub struct RemovalProblem {
    pub model: Model,
    pub objective: Objective,
    pub properties: Vec<Property>,
    /// Stored counterexamples, one list per property.
    pub counterexamples: Vec<Vec<Vec<f64>>>,
    pub satisfaction_constant: f64,
    /// Indices of parameters that may change; `None` means all.
    pub trainable: Option<Vec<usize>>,
}

impl RemovalProblem {
    pub fn new(model: Model, objective: Objective, properties: Vec<Property>) -> Self {
        let n = properties.len();
        RemovalProblem {
            model,
            objective,
            properties,
            counterexamples: vec![Vec::new(); n],
            satisfaction_constant: SATISFACTION_CONSTANT,
            trainable: None,
        }
    }

    pub fn num_counterexamples(&self) -> usize {
        self.counterexamples.iter().map(Vec::len).sum()
    }

    fn trainable_mask(&self) -> Result<Vec<bool>> {
        let p = self.model.param_count();
        match &self.trainable {
            None => Ok(vec![true; p]),
            Some(idx) => {
                let mut mask = vec![false; p];
                for &i in idx {
                    if i >= p {
                        return Err(index_error(i, p).into());
                    }
                    mask[i] = true;
                }
                Ok(mask)
            }
        }
    }

    /// Smallest satisfaction over all stored counterexamples (`+inf` if none).
    pub fn min_constraint(&self, model: &Model) -> std::result::Result<f64, ModelError> {
        let mut m = f64::INFINITY;
        for (prop, xs) in self.properties.iter().zip(&self.counterexamples) {
            for x in xs {
                m = m.min(prop.value_at(model, x)?);
            }
        }
        Ok(m)
    }

    /// Whether every stored counterexample reaches the satisfaction constant.
    pub fn is_feasible(&self, model: &Model) -> std::result::Result<bool, ModelError> {
        Ok(self.min_constraint(model)? >= self.satisfaction_constant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub params: Vec<f64>,
    pub success: bool,
    pub iterations: usize,
    pub final_penalty_weight: Option<f64>,
    pub objective_value: f64,
    /// Smallest satisfaction value over the stored counterexamples.
    pub min_constraint: f64,
    pub kkt_residual: Option<f64>,
    pub message: Option<String>,
}

impl RemovalReport {
    fn failure(params: Vec<f64>, iterations: usize, message: impl Into<String>) -> Self {
        RemovalReport {
            params,
            success: false,
            iterations,
            final_penalty_weight: None,
            objective_value: f64::NAN,
            min_constraint: f64::NAN,
            kkt_residual: None,
            message: Some(message.into()),
        }
    }
}

pub trait Remover: Send + Sync {
    fn name(&self) -> String;
    fn remove(&self, problem: &RemovalProblem) -> Result<RemovalReport>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub lr: f64,
    /// Adam steps per penalty weight.
    pub max_iters: usize,
    pub initial_weight: f64,
    pub weight_growth: f64,
    pub max_weight_escalations: usize,
    /// Per-parameter step multipliers; `None` means 1 everywhere.
    pub param_scale: Option<Vec<f64>>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lr: 1e-3,
            max_iters: 5000,
            initial_weight: INITIAL_PENALTY_WEIGHT,
            weight_growth: 2.0,
            max_weight_escalations: 20,
            param_scale: None,
        }
    }
}

/// Constraint `a·θ + c` from a model that is linear in its parameters.
struct LinearTerm {
    a: Vec<f64>,
    c: f64,
}

enum Evaluator<'a> {
    /// Linear-in-parameter model with a quadratic objective: everything
    /// reduces to dense vectors.
    Linear {
        quad: QuadForm,
        /// Per stored counterexample: its property's kind and terms.
        groups: Vec<(bool, Vec<LinearTerm>)>,
    },
    General {
        problem: &'a RemovalProblem,
        pairs: Vec<(&'a Property, &'a [f64])>,
    },
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a RemovalProblem) -> std::result::Result<Self, ModelError> {
        let model = &problem.model;
        if let Some(quad) = problem.objective.quadratic_form(model) {
            if model.is_linear_in_params() {
                let mut groups = Vec::new();
                for (prop, xs) in problem.properties.iter().zip(&problem.counterexamples) {
                    for x in xs {
                        let rows = param_jacobian(model, x)?;
                        let terms = prop
                            .sat
                            .terms()
                            .iter()
                            .map(|t| LinearTerm {
                                a: (0..model.param_count())
                                    .map(|i| t.a.iter().zip(&rows).map(|(aj, r)| aj * r[i]).sum())
                                    .collect(),
                                c: t.c,
                            })
                            .collect();
                        groups.push((matches!(prop.sat, SatisfactionFn::MaxOfAffine(_)), terms));
                    }
                }
                return Ok(Evaluator::Linear { quad, groups });
            }
        }
        let pairs = problem
            .properties
            .iter()
            .zip(&problem.counterexamples)
            .flat_map(|(p, xs)| xs.iter().map(move |x| (p, x.as_slice())))
            .collect();
        Ok(Evaluator::General { problem, pairs })
    }

    /// Objective value, its gradient, and for every constraint its value and
    /// gradient.
    #[allow(clippy::type_complexity)]
    fn eval(
        &self,
        theta: &[f64],
        need_constraint_grads: bool,
    ) -> std::result::Result<(f64, Vec<f64>, Vec<(f64, Vec<f64>)>), ModelError> {
        match self {
            Evaluator::Linear { quad, groups } => {
                let j = quad.value(theta);
                let g = quad.gradient(theta);
                let cons = groups
                    .iter()
                    .map(|(is_max, terms)| {
                        let mut best = 0;
                        let mut bv = dot(&terms[0].a, theta) + terms[0].c;
                        for (k, t) in terms.iter().enumerate().skip(1) {
                            let v = dot(&t.a, theta) + t.c;
                            if (*is_max && v > bv) || (!*is_max && v < bv) {
                                best = k;
                                bv = v;
                            }
                        }
                        (bv, terms[best].a.clone())
                    })
                    .collect();
                Ok((j, g, cons))
            }
            Evaluator::General { problem, pairs } => {
                let model = problem.model.with_params(theta)?;
                let j = problem.objective.value(&model)?;
                let g = problem.objective.gradient(&model)?;
                let mut cons = Vec::with_capacity(pairs.len());
                for (prop, x) in pairs {
                    let y = model.forward(x)?;
                    let v = prop.sat.eval(&y)?;
                    let grad = if need_constraint_grads {
                        model.grad(x, &prop.sat.gradient(&y))?.0
                    } else {
                        Vec::new()
                    };
                    cons.push((v, grad));
                }
                Ok((j, g, cons))
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L1 penalty method: Adam on `J(θ) + ρ Σ max(0, c − f(N_θ(x)))` from the
/// current parameters. The step size decays linearly within each inner run.
/// `ρ` grows whenever an inner run ends without a feasible iterate.
pub fn remove_penalty(problem: &RemovalProblem, cfg: &PenaltyConfig) -> Result<RemovalReport> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;
    let mask = problem.trainable_mask()?;
    let p = mask.len();
    let scale = match &cfg.param_scale {
        Some(s) if s.len() == p => s.clone(),
        Some(s) => return Err(check_len(p, s.len()).unwrap_err().into()),
        None => vec![1.0; p],
    };
    let eval = Evaluator::new(problem)?;
    let c = problem.satisfaction_constant;
    let theta0 = problem.model.param_vec();
    let mut theta = theta0.clone();
    let mut rho = cfg.initial_weight;
    let mut iterations = 0usize;

    // Best feasible iterate by objective value.
    let mut best: Option<(f64, Vec<f64>)> = None;
    // Least-violating iterate, reported on failure.
    let mut fallback: (f64, Vec<f64>) = (f64::NEG_INFINITY, theta.clone());

    for escalation in 0..=cfg.max_weight_escalations {
        if escalation > 0 {
            rho *= cfg.weight_growth;
        }
        let mut m = vec![0.0; p];
        let mut v = vec![0.0; p];
        for t in 0..=cfg.max_iters {
            let (j, gj, cons) = match eval.eval(&theta, true) {
                Ok(r) => r,
                Err(e) => return Ok(RemovalReport::failure(theta0, iterations, e.to_string())),
            };
            if !j.is_finite() || cons.iter().any(|(cv, _)| !cv.is_finite()) {
                return Ok(RemovalReport::failure(theta0, iterations, "non-finite loss"));
            }
            let min_c = cons.iter().map(|(cv, _)| *cv).fold(f64::INFINITY, f64::min);
            if min_c >= c {
                if best.as_ref().map_or(true, |(bj, _)| j < *bj) {
                    best = Some((j, theta.clone()));
                }
            } else if min_c > fallback.0 {
                fallback = (min_c, theta.clone());
            }
            if t == cfg.max_iters {
                break;
            }
            let mut grad = gj;
            for (cv, cg) in &cons {
                if *cv < c {
                    for (g, d) in grad.iter_mut().zip(cg) {
                        *g -= rho * d;
                    }
                }
            }
            if grad
                .iter()
                .zip(&mask)
                .all(|(g, &on)| !on || g.abs() <= 1e-14)
            {
                break;
            }
            iterations += 1;
            let step = cfg.lr * (1.0 - t as f64 / cfg.max_iters as f64);
            let k = (t + 1) as i32;
            let c1 = 1.0 - B1.powi(k);
            let c2 = 1.0 - B2.powi(k);
            for i in 0..p {
                if !mask[i] {
                    continue;
                }
                m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
                v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
                theta[i] -= step * scale[i] * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
        if let Some((j, params)) = best.take() {
            let model = problem.model.with_params(&params)?;
            return Ok(RemovalReport {
                params,
                success: true,
                iterations,
                final_penalty_weight: Some(rho),
                objective_value: j,
                min_constraint: problem.min_constraint(&model)?,
                kkt_residual: None,
                message: None,
            });
        }
    }
    let params = fallback.1;
    let model = problem.model.with_params(&params)?;
    Ok(RemovalReport {
        objective_value: problem.objective.value(&model)?,
        min_constraint: problem.min_constraint(&model)?,
        params,
        success: false,
        iterations,
        final_penalty_weight: Some(rho),
        kkt_residual: None,
        message: Some("constraints still violated at the largest penalty weight".into()),
    })
}

/// Closed-form least squares for `y = w x + b`; `None` when all inputs coincide.
pub fn fit_linreg(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let w = sxy / sxx;
    Some((w, my - w * mx))
}

pub type Labeler = dyn Fn(usize, &[f64]) -> f64 + Send + Sync;

/// Adds every stored counterexample with its label to the training data and
/// refits the linear model in closed form.
pub fn remove_augment_lsq(problem: &RemovalProblem, labeler: &Labeler) -> Result<RemovalReport> {
    if problem.model.as_linreg1d().is_none() {
        return Err(RemovalError::Unsupported(
            "augmentation with least squares needs a one-dimensional linear regression model".into(),
        ));
    }
    let Some((mut xs, mut ys)) = problem.objective.scalar_dataset() else {
        return Err(RemovalError::Unsupported(
            "augmentation needs a scalar regression dataset objective".into(),
        ));
    };
    for (k, cexs) in problem.counterexamples.iter().enumerate() {
        for x in cexs {
            xs.push(x[0]);
            ys.push(labeler(k, x));
        }
    }
    let theta0 = problem.model.param_vec();
    let Some((w, b)) = fit_linreg(&xs, &ys) else {
        return Ok(RemovalReport::failure(theta0, 1, "all inputs coincide"));
    };
    let model = Model::linreg1d(w, b);
    let min_constraint = problem.min_constraint(&model)?;
    // A heuristic: the refit is always accepted and the next verification
    // sweep judges it.
    Ok(RemovalReport {
        params: model.param_vec(),
        success: true,
        iterations: 1,
        final_penalty_weight: None,
        objective_value: problem.objective.value(&model)?,
        min_constraint,
        kkt_residual: None,
        message: None,
    })
}

pub struct AugmentLsqRemover {
    pub labeler: Arc<Labeler>,
}

impl Remover for AugmentLsqRemover {
    fn name(&self) -> String {
        "augment-lsq".into()
    }

    fn remove(&self, problem: &RemovalProblem) -> Result<RemovalReport> {
        remove_augment_lsq(problem, self.labeler.as_ref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct PenaltyRemover {
    pub cfg: PenaltyConfig,
}

impl Remover for PenaltyRemover {
    fn name(&self) -> String {
        "penalty".into()
    }

    fn remove(&self, problem: &RemovalProblem) -> Result<RemovalReport> {
        remove_penalty(problem, &self.cfg)
    }
}

/// Exact repair of a 1-D linear regression model: constraints at both
/// endpoints of every property interval, mean squared error objective.
#[derive(Debug, Clone)]
pub struct QpRepair {
    pub report: RemovalReport,
    pub qp: ConvexQp,
    pub solution: QpSolution,
}

/// Solves the repair problem directly. Keys and targets are standardised
/// before the solve so the QP is well conditioned; the result is mapped back.
pub fn repair_qp_exact(
    properties: &[Property],
    xs: &[f64],
    ys: &[f64],
    margin: f64,
) -> Result<QpRepair> {
    let mut points = Vec::new();
    for prop in properties {
        let SatisfactionFn::Affine(term) = &prop.sat else {
            return Err(RemovalError::Unsupported(format!(
                "property {} is not affine; split it first",
                prop.name
            )));
        };
        let Some(b) = prop.input.as_box() else {
            return Err(RemovalError::Unsupported(format!("property {} needs an interval", prop.name)));
        };
        if b.dim() != 1 || term.a.len() != 1 {
            return Err(RemovalError::Unsupported(format!(
                "property {} is not one-dimensional",
                prop.name
            )));
        }
        points.push((b.lo()[0], term.a[0], term.c));
        if b.hi()[0] != b.lo()[0] {
            points.push((b.hi()[0], term.a[0], term.c));
        }
    }
    linreg_qp(&points, xs, ys, margin, |w, b| {
        let model = Model::linreg1d(w, b);
        let mut min_c = f64::INFINITY;
        for prop in properties {
            let bx = prop.input.as_box().expect("checked above");
            for v in [bx.lo()[0], bx.hi()[0]] {
                min_c = min_c.min(prop.value_at(&model, &[v])?);
            }
        }
        Ok(min_c)
    })
}

/// Minimises the MSE of `y = w x + b` subject to `a (w v + b) + c ≥ margin`
/// for every `(v, a, c)`.
fn linreg_qp<F>(points: &[(f64, f64, f64)], xs: &[f64], ys: &[f64], margin: f64, check: F) -> Result<QpRepair>
where
    F: Fn(f64, f64) -> std::result::Result<f64, ModelError>,
{
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(RemovalError::Unsupported("dataset is empty or ragged".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
    let sx = if sx > 0.0 { sx } else { 1.0 };
    let sy = if sy > 0.0 { sy } else { 1.0 };
    // Scaled model: (y − my)/sy ≈ u (x − mx)/sx + d.
    let mut suu = 0.0;
    let mut su = 0.0;
    let mut suy = 0.0;
    let mut sy1 = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let u = (x - mx) / sx;
        let t = (y - my) / sy;
        suu += u * u;
        su += u;
        suy += u * t;
        sy1 += t;
    }
    let hess = vec![2.0 * suu / n, 2.0 * su / n, 2.0 * su / n, 2.0];
    let lin = vec![-2.0 * suy / n, -2.0 * sy1 / n];
    let mut rows = Vec::with_capacity(points.len() * 2);
    let mut rhs = Vec::with_capacity(points.len());
    for &(v, a, c) in points {
        let u = (v - mx) / sx;
        // a (sy (u' w' + d') + my) + c ≥ margin
        rows.push(a * u);
        rows.push(a);
        rhs.push((margin - c - a * my) / sy);
    }
    let qp = ConvexQp::new(hess, lin, rows, rhs)?;
    let solution = solve_qp(&qp, 1e-10)?;
    let unscale = |z: &[f64]| {
        let w = sy * z[0] / sx;
        let b = my + sy * (z[1] - z[0] * mx / sx);
        (w, b)
    };
    let (w, b) = unscale(&solution.x);
    let model = Model::linreg1d(w, b);
    let objective = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (w * x + b - y).powi(2))
        .sum::<f64>()
        / n;
    let report = if solution.status == QpStatus::Infeasible {
        RemovalReport {
            params: model.param_vec(),
            success: false,
            iterations: solution.iterations,
            final_penalty_weight: None,
            objective_value: objective,
            min_constraint: f64::NAN,
            kkt_residual: None,
            message: Some("no linear model satisfies the margined constraints".into()),
        }
    } else {
        let min_constraint = check(w, b)?;
        RemovalReport {
            params: model.param_vec(),
            success: min_constraint >= SATISFACTION_CONSTANT.min(margin),
            iterations: solution.iterations,
            final_penalty_weight: None,
            objective_value: objective,
            min_constraint,
            kkt_residual: Some(kkt_residual(&qp, &solution)),
            message: None,
        }
    };
    Ok(QpRepair {
        report,
        qp,
        solution,
    })
}

/// QP removal over the stored counterexamples: for models linear in their
/// parameters with a quadratic objective, each counterexample and affine term
/// contributes one linear constraint `f ≥ margin`.
#[derive(Debug, Clone)]
pub struct QpRemover {
    pub margin: f64,
}

impl Default for QpRemover {
    fn default() -> Self {
        QpRemover { margin: QP_MARGIN }
    }
}

impl Remover for QpRemover {
    fn name(&self) -> String {
        "qp".into()
    }

    fn remove(&self, problem: &RemovalProblem) -> Result<RemovalReport> {
        let model = &problem.model;
        if !model.is_linear_in_params() {
            return Err(RemovalError::Unsupported("model is not linear in its parameters".into()));
        }
        let Some(quad) = problem.objective.quadratic_form(model) else {
            return Err(RemovalError::Unsupported("objective is not quadratic".into()));
        };
        let mask = problem.trainable_mask()?;
        let free: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let base = model.param_vec();
        let p = base.len();
        let k = free.len();
        if k == 0 {
            return Err(RemovalError::Unsupported("no trainable parameters".into()));
        }
        // θ = base with θ[free] = z; Jacobi scaling z = s ⊙ ζ.
        let hb = quad.gradient(&{
            let mut t = base.clone();
            for &i in &free {
                t[i] = 0.0;
            }
            t
        });
        let s: Vec<f64> = free
            .iter()
            .map(|&i| {
                let d = quad.h[i * p + i];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut hess = vec![0.0; k * k];
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                hess[a * k + b] = quad.h[i * p + j] * s[a] * s[b];
            }
        }
        let lin: Vec<f64> = free.iter().enumerate().map(|(a, &i)| hb[i] * s[a]).collect();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (prop, xs) in problem.properties.iter().zip(&problem.counterexamples) {
            let terms = match &prop.sat {
                SatisfactionFn::MaxOfAffine(ts) if ts.len() > 1 => {
                    return Err(RemovalError::Unsupported(
                        "disjunctive constraints are not convex".into(),
                    ))
                }
                other => other.terms(),
            };
            for x in xs {
                let jac = param_jacobian(model, x)?;
                for t in terms {
                    let a: Vec<f64> = (0..p)
                        .map(|i| t.a.iter().zip(&jac).map(|(aj, r)| aj * r[i]).sum())
                        .collect();
                    let fixed: f64 = (0..p).filter(|i| !mask[*i]).map(|i| a[i] * base[i]).sum();
                    for (idx, &i) in free.iter().enumerate() {
                        rows.push(a[i] * s[idx]);
                    }
                    rhs.push(self.margin - t.c - fixed);
                }
            }
        }
        let qp = ConvexQp::new(hess, lin, rows, rhs)?;
        let sol = solve_qp(&qp, 1e-10)?;
        let mut theta = base.clone();
        for (a, &i) in free.iter().enumerate() {
            theta[i] = sol.x[a] * s[a];
        }
        let new_model = model.with_params(&theta)?;
        let min_constraint = problem.min_constraint(&new_model)?;
        let success = sol.status == QpStatus::Optimal && min_constraint >= problem.satisfaction_constant;
        Ok(RemovalReport {
            objective_value: problem.objective.value(&new_model)?,
            params: if sol.status == QpStatus::Optimal { theta } else { base },
            success,
            iterations: sol.iterations,
            final_penalty_weight: None,
            min_constraint,
            kkt_residual: (sol.status == QpStatus::Optimal).then(|| kkt_residual(&qp, &sol)),
            message: (sol.status == QpStatus::Infeasible)
                .then(|| "no parameters satisfy the margined constraints".to_string()),
        })
    }
}

/// Builds a remover from its command-line name.
pub fn remover_from_name(
    name: &str,
    penalty: PenaltyConfig,
    labeler: Option<Arc<Labeler>>,
) -> Result<Arc<dyn Remover>> {
    match name {
        "penalty" => Ok(Arc::new(PenaltyRemover { cfg: penalty })),
        "qp" => Ok(Arc::new(QpRemover::default())),
        "augment-lsq" => match labeler {
            Some(labeler) => Ok(Arc::new(AugmentLsqRemover { labeler })),
            None => Err(RemovalError::Unsupported("augment-lsq needs a labeler".into())),
        },
        other => Err(RemovalError::Unsupported(format!("unknown remover {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Hyperbox};
    use crate::spec::InputSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interval(lo: f64, hi: f64) -> InputSet {
        InputSet::Box(Hyperbox::new(vec![lo], vec![hi]).unwrap())
    }

    fn lower(name: &str, lo: f64, hi: f64, bound: f64) -> Property {
        Property::new(name, interval(lo, hi), SatisfactionFn::affine(vec![1.0], -bound))
    }

    fn upper(name: &str, lo: f64, hi: f64, bound: f64) -> Property {
        Property::new(name, interval(lo, hi), SatisfactionFn::affine(vec![-1.0], bound))
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::random_fcnn(&mut rng, &[2, 3, 2], Activation::Sigmoid).unwrap();
        let p = model.param_count();
        let objectives = vec![
            Objective::mse(
                vec![vec![0.1, 0.2], vec![-0.3, 0.5]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ),
            Objective::ParamDistanceSq {
                theta0: (0..p).map(|i| i as f64 * 0.01).collect(),
            },
            Objective::OutputAtPoint {
                point: vec![0.3, -0.2],
                index: 1,
            },
        ];
        let theta = model.param_vec();
        for obj in objectives {
            let g = obj.gradient(&model).unwrap();
            for i in 0..p {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                let fd = (obj.value(&model.with_params(&tp).unwrap()).unwrap()
                    - obj.value(&model.with_params(&tm).unwrap()).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{obj:?} {i}: {fd} vs {}", g[i]);
            }
        }
        let abs = Objective::AbsParams { indices: vec![] };
        let m = Model::linreg1d(-2.0, 3.0);
        assert_eq!(abs.value(&m).unwrap(), 5.0);
        assert_eq!(abs.gradient(&m).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn quadratic_form_matches_direct_evaluation() {
        let model = Model::affine(vec![vec![1.0, 2.0], vec![0.5, -1.0]], vec![0.1, 0.2]).unwrap();
        let obj = Objective::mse(
            vec![vec![1.0, 0.0], vec![0.5, 2.0], vec![-1.0, 1.0]],
            vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]],
        );
        let q = obj.quadratic_form(&model).unwrap();
        let theta = model.param_vec();
        assert!((q.value(&theta) - obj.value(&model).unwrap()).abs() < 1e-12);
        let g = obj.gradient(&model).unwrap();
        for (a, b) in q.gradient(&theta).iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_without_counterexamples_only_descends() {
        let model = Model::linreg1d(0.5, 0.5);
        let obj = Objective::mse(vec![vec![0.0], vec![1.0], vec![2.0]], vec![vec![0.0], vec![1.0], vec![2.0]]);
        let problem = RemovalProblem::new(model.clone(), obj.clone(), vec![lower("p", 0.0, 1.0, -10.0)]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert!(r.success);
        assert!(r.objective_value <= obj.value(&model).unwrap());
        assert!(r.objective_value < 1e-3);

        // Already optimal: nothing moves.
        let exact = Model::linreg1d(1.0, 0.0);
        let problem = RemovalProblem::new(exact.clone(), obj, vec![]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert_eq!(r.params, exact.param_vec());
    }

    #[test]
    fn penalty_projects_onto_halfline() {
        // y = θ with x fixed; require θ − x0 ≥ c.
        let model = Model::affine(vec![vec![0.0]], vec![0.0]).unwrap();
        let x0 = 0.7;
        let mut problem = RemovalProblem::new(
            model,
            Objective::ParamDistanceSq { theta0: vec![0.0, 0.0] },
            vec![lower("p", 0.0, 1.0, x0)],
        );
        problem.counterexamples[0].push(vec![0.5]);
        problem.trainable = Some(vec![1]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert!(r.success);
        assert!((r.params[1] - (x0 + SATISFACTION_CONSTANT)).abs() < 1e-3);
        assert_eq!(r.params[0], 0.0);
        assert!(r.min_constraint >= SATISFACTION_CONSTANT);
        // The penalty is exact only once ρ exceeds |J'| = 2θ at the solution.
        assert!(r.final_penalty_weight.unwrap() >= 2.0 * x0);
    }

    #[test]
    fn penalty_one_shot_keeps_initial_weight() {
        let model = Model::affine(vec![vec![0.0]], vec![0.0]).unwrap();
        let mut problem = RemovalProblem::new(
            model,
            Objective::ParamDistanceSq { theta0: vec![0.0, 0.0] },
            vec![lower("p", 0.0, 1.0, 0.01)],
        );
        problem.counterexamples[0].push(vec![0.5]);
        problem.trainable = Some(vec![1]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.final_penalty_weight, Some(INITIAL_PENALTY_WEIGHT));
        assert!((r.params[1] - 0.0101).abs() < 1e-3);
    }

    #[test]
    fn penalty_escalates_weight() {
        // A steep objective needs a larger weight before the constraint wins.
        let model = Model::affine(vec![vec![0.0]], vec![0.0]).unwrap();
        let mut problem = RemovalProblem::new(
            model,
            Objective::OutputAtPoint { point: vec![0.0], index: 0 },
            vec![lower("p", 0.0, 1.0, 0.3)],
        );
        problem.counterexamples[0].push(vec![0.2]);
        problem.trainable = Some(vec![1]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert!(r.success);
        assert!(r.final_penalty_weight.unwrap() > 1.0);
    }

    #[test]
    fn penalty_handles_non_finite_loss() {
        let model = Model::linreg1d(1.0, 0.0);
        let mut problem = RemovalProblem::new(
            model,
            Objective::mse(vec![vec![f64::INFINITY]], vec![vec![0.0]]),
            vec![lower("p", 0.0, 1.0, 0.0)],
        );
        problem.counterexamples[0].push(vec![0.0]);
        let r = remove_penalty(&problem, &PenaltyConfig::default()).unwrap();
        assert!(!r.success);
    }

    #[test]
    fn augment_lsq_examples() {
        let obj = Objective::mse(vec![vec![0.0], vec![2.0]], vec![vec![0.0], vec![2.0]]);
        let problem = RemovalProblem::new(Model::linreg1d(0.0, 0.0), obj.clone(), vec![upper("p", 1.0, 1.0, 0.0)]);
        let r = remove_augment_lsq(&problem, &|_, _| 0.0).unwrap();
        assert_eq!(r.params, vec![1.0, 0.0]);

        let mut problem = problem;
        problem.counterexamples[0].push(vec![1.0]);
        let r = remove_augment_lsq(&problem, &|_, _| 0.0).unwrap();
        // Normal equations for {(0,0),(2,2),(1,0)}.
        let (sx, sxx, sy, sxy, n) = (3.0, 5.0, 2.0, 4.0, 3.0);
        let w = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let b = (sy - w * sx) / n;
        assert!((r.params[0] - w).abs() < 1e-12 && (r.params[1] - b).abs() < 1e-12);

        problem.counterexamples[0].push(vec![1.0]);
        let r2 = remove_augment_lsq(&problem, &|_, _| 0.0).unwrap();
        assert_ne!(r2.params, r.params);

        let degenerate = RemovalProblem::new(
            Model::linreg1d(0.0, 0.0),
            Objective::mse(vec![vec![1.0], vec![1.0]], vec![vec![0.0], vec![2.0]]),
            vec![],
        );
        assert!(!remove_augment_lsq(&degenerate, &|_, _| 0.0).unwrap().success);
    }

    #[test]
    fn exact_qp_examples() {
        let xs = [0.0, 1.0];
        let ys = [0.0, 1.0];
        let r = repair_qp_exact(&[lower("p", 0.0, 1.0, 0.5)], &xs, &ys, 0.01).unwrap();
        assert!(r.report.success);
        assert!((r.report.params[0] - 0.49).abs() < 1e-9);
        assert!((r.report.params[1] - 0.51).abs() < 1e-9);
        assert!(r.report.kkt_residual.unwrap() < 1e-8);

        let r = repair_qp_exact(&[lower("p", 0.0, 1.0, -5.0)], &xs, &ys, 0.01).unwrap();
        assert!(r.report.success);
        assert!(r.report.objective_value < 1e-18);

        let r = repair_qp_exact(
            &[lower("a", 0.0, 1.0, 1.0), upper("b", 0.5, 2.0, 0.0)],
            &xs,
            &ys,
            0.01,
        )
        .unwrap();
        assert!(!r.report.success);
        assert_eq!(r.solution.status, QpStatus::Infeasible);
    }

    #[test]
    fn exact_qp_beats_random_feasible_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let xs: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..10.0)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + rng.gen_range(-1.0..1.0)).collect();
            let props = vec![lower("lo", 2.0, 4.0, 5.0), upper("hi", 2.0, 4.0, 8.0)];
            let r = repair_qp_exact(&props, &xs, &ys, 0.01).unwrap();
            assert!(r.report.success);
            for _ in 0..10_000 {
                let w = rng.gen_range(0.0..4.0);
                let b = rng.gen_range(-4.0..4.0);
                let m = Model::linreg1d(w, b);
                let feasible = props.iter().all(|p| {
                    [2.0, 4.0].iter().all(|v| p.value_at(&m, &[*v]).unwrap() >= 0.01)
                });
                if feasible {
                    let mse = xs.iter().zip(&ys).map(|(x, y)| (w * x + b - y).powi(2)).sum::<f64>()
                        / xs.len() as f64;
                    assert!(r.report.objective_value <= mse + 1e-9);
                }
            }
        }
    }

    #[test]
    fn qp_remover_uses_stored_counterexamples() {
        let obj = Objective::mse(vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![1.0]]);
        let mut problem = RemovalProblem::new(Model::linreg1d(1.0, 0.0), obj, vec![lower("p", 0.0, 1.0, 0.5)]);
        problem.counterexamples[0].push(vec![0.0]);
        let r = QpRemover::default().remove(&problem).unwrap();
        assert!(r.success);
        // Only x = 0 is constrained: b ≥ 0.51, then w fits the second point.
        assert!((r.params[1] - 0.51).abs() < 1e-9);
        assert!((r.params[0] - 0.49).abs() < 1e-9);
        assert!(r.kkt_residual.unwrap() < 1e-8);
    }
}
