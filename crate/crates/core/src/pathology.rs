//! Small instances on which the repair loop provably runs forever, or only
//! terminates with the right verifier, executed in closed form.
//!
//! Where a counterexample or a removal minimiser is not unique the smallest
//! one is taken. Every iterate is cross-checked against the generic network
//! evaluation.

use crate::engine::{run_cgr, CgrConfig, RepairTrace, RobustProblem, Status};
use crate::model::{Activation, Hyperbox, Layer, Model, ModelError};
use crate::removal::{Objective, RemovalProblem, RemovalReport, Remover};
use crate::search::{ScriptedSearcher, Searcher, VertexVerifier};
use crate::spec::{InputSet, Property, SatisfactionFn, Specification, SATISFACTION_CONSTANT};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

const REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PathologyError {
    #[error("step count must be at least 1")]
    NoSteps,
    #[error("relation violated at step {step}: {what}")]
    Relation { step: usize, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

pub type Result<T> = std::result::Result<T, PathologyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// `ReLU([−θ; θ − x])` with `J = N(0)₁` on an unbounded input.
    UnboundedRelu,
    /// `ReLU([θ₁θ₂; θ₁x + θ₂])` with `J = ReLU(θ₁θ₂)`.
    UnboundedProduct,
    /// Two-layer ReLU network repaired in one bias only.
    FcnnFlat,
    /// `N(x) = θ − x` on `[0, 1]` with `J = |θ|`.
    EarlyExit,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::UnboundedRelu, Case::UnboundedProduct, Case::FcnnFlat, Case::EarlyExit];

    pub fn id(self) -> &'static str {
        match self {
            Case::UnboundedRelu => "unbounded-relu",
            Case::UnboundedProduct => "unbounded-product",
            Case::FcnnFlat => "fcnn-flat",
            Case::EarlyExit => "early-exit",
        }
    }
}

impl FromStr for Case {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Case::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| {
                let ids: Vec<_> = Case::ALL.iter().map(|c| c.id()).collect();
                format!("unknown case {s:?}; expected one of {}", ids.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyExitMode {
    Scripted,
    Optimal,
}

impl FromStr for EarlyExitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scripted" => Ok(EarlyExitMode::Scripted),
            "optimal" => Ok(EarlyExitMode::Optimal),
            _ => Err(format!("unknown mode {s:?}; expected scripted or optimal")),
        }
    }
}

/// Iterates of one run. Row `N` holds `θ^(N)`, the counterexample `x^(N)`
/// and its satisfaction value under `θ^(N−1)`; row 0 has no counterexample.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateTable {
    pub theta_names: Vec<String>,
    pub rows: Vec<IterateRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateRow {
    pub n: usize,
    pub theta: Vec<f64>,
    pub x: Option<f64>,
    pub fsat: Option<f64>,
}

impl IterateTable {
    fn new(names: &[&str]) -> Self {
        IterateTable {
            theta_names: names.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn last_theta(&self) -> &[f64] {
        &self.rows.last().expect("table has the initial row").theta
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N");
        for name in &self.theta_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",x,fsat\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(out, "{}", r.n);
            for t in &r.theta {
                let _ = write!(out, ",{t}");
            }
            let _ = writeln!(out, ",{},{}", opt(r.x), opt(r.fsat));
        }
        out
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn require(cond: bool, step: usize, what: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(PathologyError::Relation {
            step,
            what: what.into(),
        })
    }
}

/// `ReLU([−θ; θ − x])` as a one-layer network.
pub fn unbounded_relu_model(theta: f64) -> Model {
    let layer = Layer::new(vec![vec![0.0], vec![-1.0]], vec![-theta, theta], Activation::Relu)
        .expect("fixed shapes");
    Model::fcnn(vec![layer]).expect("single layer")
}

/// `ReLU([θ₁θ₂; θ₁x + θ₂])` as a one-layer network.
pub fn unbounded_product_model(t1: f64, t2: f64) -> Model {
    let layer = Layer::new(vec![vec![0.0], vec![t1]], vec![t1 * t2, t2], Activation::Relu)
        .expect("fixed shapes");
    Model::fcnn(vec![layer]).expect("single layer")
}

/// Two ReLU layers with `θ` as the first hidden bias.
pub fn fcnn_flat_model(theta: f64) -> Model {
    let l1 = Layer::new(vec![vec![0.0], vec![1.0]], vec![theta, 2.0], Activation::Relu).expect("fixed shapes");
    let l2 = Layer::new(vec![vec![-1.0, 0.0], vec![1.0, -1.0]], vec![2.0, 0.0], Activation::Relu)
        .expect("fixed shapes");
    Model::fcnn(vec![l1, l2]).expect("chained layers")
}

/// `y₁ + y₂ − 1 ≥ 0`.
pub fn sum_property(input: InputSet) -> Property {
    Property::new("sum", input, SatisfactionFn::affine(vec![1.0, 1.0], -1.0))
}

fn real_line() -> InputSet {
    InputSet::Box(Hyperbox::new(vec![f64::MIN], vec![f64::MAX]).expect("finite bounds"))
}

fn check_forward(model: &Model, x: f64, closed_form: f64, step: usize) -> Result<()> {
    let generic = sum_property(real_line()).value_at(model, &[x])?;
    require(
        generic.to_bits() == closed_form.to_bits(),
        step,
        format!("network evaluation {generic} differs from closed form {closed_form}"),
    )
}

/// Runs the `ReLU([−θ; θ − x])` recursion for `steps` removals.
pub fn run_unbounded_relu(steps: usize) -> Result<IterateTable> {
    if steps == 0 {
        return Err(PathologyError::NoSteps);
    }
    let mut table = IterateTable::new(&["theta"]);
    // CR_0: J = ReLU(−θ) is zero on θ ≥ 0; the smallest such θ.
    let mut theta = 0.0;
    table.rows.push(IterateRow { n: 0, theta: vec![theta], x: None, fsat: None });
    let mut max_x = f64::NEG_INFINITY;
    for n in 1..=steps {
        // On θ ≥ 0 the satisfaction is ReLU(θ − x) − 1, minimal (−1) for every
        // x ≥ θ; take the smallest.
        let x = theta;
        let fsat = relu(-theta) + relu(theta - x) - 1.0;
        check_forward(&unbounded_relu_model(theta), x, fsat, n)?;
        require(fsat < 0.0, n, "counterexample is not violating")?;
        require(x >= theta, n, "x^(N) ≥ θ^(N−1)")?;
        max_x = max_x.max(x);
        // CR_N on θ ≥ 0: θ − x_i ≥ 1 for all i, J = 0; the smallest θ.
        let next = max_x + 1.0;
        require(next >= x + 1.0, n, "θ^(N) ≥ x^(N) + 1")?;
        require(relu(-next) == 0.0, n, "J(θ^(N)) = 0")?;
        theta = next;
        table.rows.push(IterateRow { n, theta: vec![theta], x: Some(x), fsat: Some(fsat) });
    }
    Ok(table)
}

/// Runs the product network with `θ₁ = −1` pinned, which reduces to the
/// previous recursion in `θ₂`.
pub fn run_unbounded_product(steps: usize) -> Result<IterateTable> {
    if steps == 0 {
        return Err(PathologyError::NoSteps);
    }
    let inner = run_unbounded_relu(steps)?;
    let mut table = IterateTable::new(&["theta1", "theta2"]);
    let mut prev = (-1.0, inner.rows[0].theta[0]);
    for row in &inner.rows {
        let t = (-1.0, row.theta[0]);
        require(relu(t.0 * t.1) == 0.0, row.n, "J(θ^(N)) = 0")?;
        if let Some(x) = row.x {
            let model = unbounded_product_model(prev.0, prev.1);
            let fsat = relu(prev.0 * prev.1) + relu(prev.0 * x + prev.1) - 1.0;
            check_forward(&model, x, fsat, row.n)?;
            require(fsat == row.fsat.expect("paired"), row.n, "reduction to the single-parameter case")?;
            require(t.1 > prev.1, row.n, "θ₂ strictly increases")?;
        }
        table.rows.push(IterateRow { n: row.n, theta: vec![t.0, t.1], x: row.x, fsat: row.fsat });
        prev = t;
    }
    Ok(table)
}

/// The terminating branch: after the first counterexample choose `θ = (0, 1 + c)`.
/// Returns the table and whether the following verification succeeded.
pub fn run_unbounded_product_terminating() -> Result<(IterateTable, bool)> {
    let c = SATISFACTION_CONSTANT;
    let mut table = IterateTable::new(&["theta1", "theta2"]);
    let (t1, t2) = (-1.0, 0.0);
    table.rows.push(IterateRow { n: 0, theta: vec![t1, t2], x: None, fsat: None });
    let x = 0.0;
    let fsat = relu(t1 * t2) + relu(t1 * x + t2) - 1.0;
    check_forward(&unbounded_product_model(t1, t2), x, fsat, 1)?;
    let (n1, n2) = (0.0, 1.0 + c);
    require(relu(n1 * n2) == 0.0, 1, "J = 0 on the alternative branch")?;
    table.rows.push(IterateRow { n: 1, theta: vec![n1, n2], x: Some(x), fsat: Some(fsat) });
    // With θ₁ = 0 the output is (0, θ₂) for every x, so f = θ₂ − 1 = c.
    let model = unbounded_product_model(n1, n2);
    let prop = sum_property(real_line());
    let mut verified = true;
    for x in [-1e6, -1.0, 0.0, 1.0, 1e6] {
        verified &= prop.value_at(&model, &[x])? >= 0.0;
    }
    verified &= (n2 - 1.0) >= 0.0;
    Ok((table, verified))
}

/// Runs the two-layer network, repairing only the first hidden bias.
pub fn run_fcnn_flat(steps: usize) -> Result<IterateTable> {
    if steps == 0 {
        return Err(PathologyError::NoSteps);
    }
    let mut table = IterateTable::new(&["theta"]);
    let mut theta = 2.0;
    table.rows.push(IterateRow { n: 0, theta: vec![theta], x: None, fsat: None });
    for n in 1..=steps {
        // For θ ≥ 2 the satisfaction is flat at −1 on x ≥ θ − 2.
        let x = theta - 2.0;
        let h = [relu(theta), relu(x + 2.0)];
        let y = [relu(2.0 - h[0]), relu(h[0] - h[1])];
        let fsat = y[0] + y[1] - 1.0;
        check_forward(&fcnn_flat_model(theta), x, fsat, n)?;
        require(fsat == -1.0, n, "flat region value −1")?;
        // ReLU(θ − x − 2) ≥ 1 ⇔ θ ≥ x + 3; the smallest.
        let next = x + 3.0;
        require(next > theta, n, "θ strictly increases")?;
        theta = next;
        table.rows.push(IterateRow { n, theta: vec![theta], x: Some(x), fsat: Some(fsat) });
    }
    Ok(table)
}

/// Scripted counterexample `1/2 − 1/(N+2)` for call `N ≥ 1`.
pub fn early_exit_point(n: usize) -> f64 {
    0.5 - 1.0 / (n as f64 + 2.0)
}

/// Exact removal for `N(x) = θ − x` with `J = |θ|`: the smallest `θ ≥ 0`
/// with `θ − x ≥ c` at every stored point.
#[derive(Debug, Clone, Copy, Default)]
pub struct HalflineRemover;

impl Remover for HalflineRemover {
    fn name(&self) -> String {
        "halfline".into()
    }

    fn remove(&self, problem: &RemovalProblem) -> crate::removal::Result<RemovalReport> {
        let c = problem.satisfaction_constant;
        let max_x = problem
            .counterexamples
            .iter()
            .flatten()
            .map(|x| x[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut theta = if max_x.is_finite() { (max_x + c).max(0.0) } else { 0.0 };
        // Round up until the constraint holds in floating point.
        while max_x.is_finite() && theta - max_x < c {
            theta += theta.abs().max(f64::MIN_POSITIVE) * f64::EPSILON;
        }
        let mut params = problem.model.param_vec();
        params[1] = theta;
        let model = problem.model.with_params(&params)?;
        let min_constraint = problem.min_constraint(&model)?;
        Ok(RemovalReport {
            success: min_constraint >= c,
            objective_value: problem.objective.value(&model)?,
            params,
            iterations: 1,
            final_penalty_weight: None,
            min_constraint,
            kkt_residual: None,
            message: None,
        })
    }
}

pub fn early_exit_problem() -> RobustProblem {
    let model = Model::affine(vec![vec![-1.0]], vec![0.0]).expect("1x1 affine");
    let prop = Property::new(
        "nonneg",
        InputSet::Box(Hyperbox::new(vec![0.0], vec![1.0]).expect("unit interval")),
        SatisfactionFn::affine(vec![1.0], 0.0),
    );
    let mut problem = RobustProblem::new(
        model,
        Objective::AbsParams { indices: vec![1] },
        Specification::new(vec![prop]).expect("one property"),
    );
    problem.trainable = Some(vec![1]);
    problem
}

#[derive(Debug, Clone)]
pub struct EarlyExitRun {
    pub table: IterateTable,
    pub trace: RepairTrace,
    pub final_theta: f64,
}

/// Drives the repair loop on `N(x) = θ − x`. Scripted mode replays the
/// sequence `1/2 − 1/(N+2)` with the removal margin set to 0 so that
/// `θ^(N) = x^(N)`; optimal mode uses vertex enumeration and the default
/// satisfaction constant.
pub fn run_early_exit(steps: usize, mode: EarlyExitMode) -> Result<EarlyExitRun> {
    if steps == 0 {
        return Err(PathologyError::NoSteps);
    }
    let problem = early_exit_problem();
    let exact: Arc<dyn Searcher> = Arc::new(VertexVerifier::default());
    let (searcher, c): (Arc<dyn Searcher>, f64) = match mode {
        EarlyExitMode::Scripted => {
            // Enough points for every sweep, including the final one.
            let seq = (1..=steps + 1).map(|n| vec![early_exit_point(n)]).collect();
            (Arc::new(ScriptedSearcher::new(seq, exact)), 0.0)
        }
        EarlyExitMode::Optimal => (exact, SATISFACTION_CONSTANT),
    };
    let mut cfg = CgrConfig::new(vec![searcher], Arc::new(HalflineRemover)).with_max_steps(steps);
    cfg.satisfaction_constant = c;
    let (model, trace) = run_cgr(&problem, &cfg)?;

    let mut table = IterateTable::new(&["theta"]);
    table.rows.push(IterateRow {
        n: 0,
        theta: vec![trace.initial_removal.params[1]],
        x: None,
        fsat: None,
    });
    for s in &trace.steps {
        let f = &s.findings[0];
        table.rows.push(IterateRow {
            n: s.step,
            theta: vec![s.removal.params[1]],
            x: Some(f.x[0]),
            fsat: Some(f.value),
        });
        if mode == EarlyExitMode::Scripted {
            let want = early_exit_point(s.step);
            require((f.x[0] - want).abs() <= REL_TOL, s.step, "scripted point accepted")?;
            require(
                (s.removal.params[1] - want).abs() <= REL_TOL,
                s.step,
                "θ^(N) = 1/2 − 1/(N+2)",
            )?;
        }
    }
    if mode == EarlyExitMode::Scripted {
        require(trace.status == Status::StepLimit, steps, "scripted run never terminates")?;
    }
    let final_theta = model.param_vec()[1];
    Ok(EarlyExitRun { table, trace, final_theta })
}

/// Runs a case by id and returns its table.
pub fn run_case(case: Case, steps: usize, mode: EarlyExitMode) -> Result<IterateTable> {
    match case {
        Case::UnboundedRelu => run_unbounded_relu(steps),
        Case::UnboundedProduct => run_unbounded_product(steps),
        Case::FcnnFlat => run_fcnn_flat(steps),
        Case::EarlyExit => run_early_exit(steps, mode).map(|r| r.table),
    }
}
