//! The counterexample-guided repair loop.
//!
//! Each round runs every property through the searcher cascade, stores the
//! counterexamples found, and asks the remover for new parameters satisfying
//! all stored counterexamples. The loop ends when a sweep finds nothing.

use crate::model::{Model, ModelError};
use crate::removal::{Objective, RemovalError, RemovalProblem, RemovalReport, Remover};
use crate::search::{Outcome, SearchError, Searcher};
use crate::spec::{is_counterexample, Property, Specification, SATISFACTION_CONSTANT};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid repair configuration: {0}")]
    Config(String),
    #[error("search failed on property {property}: {source}")]
    Search {
        property: String,
        #[source]
        source: SearchError,
    },
    #[error(transparent)]
    Removal(#[from] RemovalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trace status is {0:?}, not repaired")]
    NotRepaired(Status),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Objective, specification and model of one repair instance.
#[derive(Debug, Clone)]
pub struct RobustProblem {
    pub model: Model,
    pub objective: Objective,
    pub spec: Specification,
    pub trainable: Option<Vec<usize>>,
}

impl RobustProblem {
    pub fn new(model: Model, objective: Objective, spec: Specification) -> Self {
        RobustProblem {
            model,
            objective,
            spec,
            trainable: None,
        }
    }
}

#[derive(Clone)]
pub struct CgrConfig {
    /// 0 means unlimited.
    pub max_repair_steps: usize,
    pub time_budget: Option<Duration>,
    /// A property counts as satisfied when its minimum reaches this value.
    pub termination_threshold: f64,
    pub satisfaction_constant: f64,
    /// Falsifiers first; the last entry must be complete.
    pub cascade: Vec<Arc<dyn Searcher>>,
    pub remover: Arc<dyn Remover>,
}

impl CgrConfig {
    pub fn new(cascade: Vec<Arc<dyn Searcher>>, remover: Arc<dyn Remover>) -> Self {
        CgrConfig {
            max_repair_steps: 0,
            time_budget: None,
            termination_threshold: 0.0,
            satisfaction_constant: SATISFACTION_CONSTANT,
            cascade,
            remover,
        }
    }

    pub fn with_max_steps(mut self, steps: usize) -> Self {
        self.max_repair_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.cascade.last() else {
            return Err(EngineError::Config("searcher cascade is empty".into()));
        };
        if !last.is_complete() {
            return Err(EngineError::Config(format!(
                "last searcher {} is not a verifier",
                last.name()
            )));
        }
        if !(self.satisfaction_constant >= 0.0) || !self.termination_threshold.is_finite() {
            return Err(EngineError::Config("thresholds must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn terminal_verifier(&self) -> &Arc<dyn Searcher> {
        self.cascade.last().expect("validated cascade")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Repaired,
    RemovalFailed,
    StepLimit,
    Timeout,
    /// The terminal verifier ran out of budget without a verdict.
    VerifierInconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub property: String,
    pub property_index: usize,
    pub searcher: String,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based repair step.
    pub step: usize,
    /// Parameters the counterexamples were found for.
    pub params_before: Vec<f64>,
    pub findings: Vec<Finding>,
    pub removal: RemovalReport,
    pub search_time: Duration,
    pub removal_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub cascade: Vec<String>,
    pub remover: String,
    pub max_repair_steps: usize,
    pub termination_threshold: f64,
    pub satisfaction_constant: f64,
    pub properties: Vec<String>,
    pub initial_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTrace {
    pub header: TraceHeader,
    /// Removal with no stored counterexamples.
    pub initial_removal: RemovalReport,
    pub steps: Vec<StepRecord>,
    pub status: Status,
    pub final_params: Vec<f64>,
    /// Objective value the last successful removal reported.
    pub last_objective: f64,
    /// Number of verification sweeps over all properties.
    pub sweeps: usize,
    pub searcher_calls: usize,
    pub wall_time: Duration,
}

impl RepairTrace {
    /// Remover invocations after the initial one.
    pub fn repair_steps(&self) -> usize {
        self.steps.len()
    }

    /// Every stored counterexample in insertion order, per property.
    pub fn store(&self) -> Vec<Vec<Vec<f64>>> {
        let mut store = vec![Vec::new(); self.header.properties.len()];
        for s in &self.steps {
            for f in &s.findings {
                store[f.property_index].push(f.x.clone());
            }
        }
        store
    }

    /// Trace equality ignoring wall-clock times.
    pub fn same_as(&self, other: &RepairTrace) -> bool {
        let strip = |t: &RepairTrace| {
            let mut t = t.clone();
            t.wall_time = Duration::ZERO;
            for s in &mut t.steps {
                s.search_time = Duration::ZERO;
                s.removal_time = Duration::ZERO;
            }
            t
        };
        strip(self) == strip(other)
    }

    /// JSON lines: a header record, one record per step, then a summary.
    pub fn write_jsonl<W: Write>(&self, mut w: W, include_params: bool) -> std::io::Result<()> {
        let mut header = serde_json::to_value(&self.header)?;
        header["record"] = "header".into();
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for s in &self.steps {
            let mut v = serde_json::to_value(s)?;
            v["record"] = "step".into();
            if !include_params {
                v.as_object_mut().map(|o| o.remove("params_before"));
                v["removal"].as_object_mut().map(|o| o.remove("params"));
            }
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        let summary = serde_json::json!({
            "record": "summary",
            "status": self.status,
            "repair_steps": self.repair_steps(),
            "sweeps": self.sweeps,
            "searcher_calls": self.searcher_calls,
            "final_params": self.final_params,
            "last_objective": self.last_objective,
            "wall_time": self.wall_time,
        });
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }
}

fn property_at_threshold(prop: &Property, threshold: f64) -> Property {
    if threshold == 0.0 {
        prop.clone()
    } else {
        prop.shifted(threshold)
    }
}

/// Runs the repair loop and returns the final model with its trace.
pub fn run_cgr(problem: &RobustProblem, cfg: &CgrConfig) -> Result<(Model, RepairTrace)> {
    cfg.validate()?;
    problem.spec.check_model(&problem.model)?;
    let start = Instant::now();
    let out_of_time = || cfg.time_budget.is_some_and(|b| start.elapsed() >= b);
    let props = problem.spec.properties();
    let checked: Vec<Property> = props
        .iter()
        .map(|p| property_at_threshold(p, cfg.termination_threshold))
        .collect();

    let mut removal = RemovalProblem::new(
        problem.model.clone(),
        problem.objective.clone(),
        props.to_vec(),
    );
    removal.satisfaction_constant = cfg.satisfaction_constant;
    removal.trainable = problem.trainable.clone();

    let header = TraceHeader {
        cascade: cfg.cascade.iter().map(|s| s.name()).collect(),
        remover: cfg.remover.name(),
        max_repair_steps: cfg.max_repair_steps,
        termination_threshold: cfg.termination_threshold,
        satisfaction_constant: cfg.satisfaction_constant,
        properties: props.iter().map(|p| p.name.clone()).collect(),
        initial_params: problem.model.param_vec(),
    };

    let initial_removal = cfg.remover.remove(&removal)?;
    let mut model = if initial_removal.success {
        problem.model.with_params(&initial_removal.params)?
    } else {
        problem.model.clone()
    };
    let mut trace = RepairTrace {
        header,
        last_objective: initial_removal.objective_value,
        initial_removal,
        steps: Vec::new(),
        status: Status::RemovalFailed,
        final_params: model.param_vec(),
        sweeps: 0,
        searcher_calls: 0,
        wall_time: Duration::ZERO,
    };
    if !trace.initial_removal.success {
        trace.wall_time = start.elapsed();
        return Ok((model, trace));
    }

    let status = loop {
        if out_of_time() {
            break Status::Timeout;
        }
        let sweep_start = Instant::now();
        trace.sweeps += 1;
        let mut findings = Vec::new();
        let mut inconclusive = false;
        let mut interrupted = false;
        for (k, prop) in checked.iter().enumerate() {
            for (pos, searcher) in cfg.cascade.iter().enumerate() {
                let res = searcher.search(&model, prop).map_err(|e| EngineError::Search {
                    property: prop.name.clone(),
                    source: e,
                })?;
                trace.searcher_calls += 1;
                match res.outcome {
                    Outcome::Counterexample { x, value } => {
                        // Only genuine counterexamples enter the store.
                        if is_counterexample(&model, prop, &x, 0.0) {
                            findings.push(Finding {
                                property: props[k].name.clone(),
                                property_index: k,
                                searcher: searcher.name(),
                                x,
                                value: value + cfg.termination_threshold,
                            });
                            break;
                        }
                    }
                    Outcome::Verified { .. } if searcher.is_complete() => break,
                    _ => {}
                }
                if pos + 1 == cfg.cascade.len() {
                    inconclusive = true;
                }
            }
            if k + 1 < checked.len() && out_of_time() {
                interrupted = true;
                break;
            }
        }
        let search_time = sweep_start.elapsed();
        if findings.is_empty() {
            if interrupted {
                break Status::Timeout;
            }
            break if inconclusive {
                Status::VerifierInconclusive
            } else {
                Status::Repaired
            };
        }
        if cfg.max_repair_steps != 0 && trace.steps.len() >= cfg.max_repair_steps {
            break Status::StepLimit;
        }
        if out_of_time() {
            break Status::Timeout;
        }
        for f in &findings {
            removal.counterexamples[f.property_index].push(f.x.clone());
        }
        removal.model = model.clone();
        let removal_start = Instant::now();
        let report = cfg.remover.remove(&removal)?;
        let removal_time = removal_start.elapsed();
        let success = report.success;
        let params_before = model.param_vec();
        if success {
            model = model.with_params(&report.params)?;
            trace.last_objective = report.objective_value;
        }
        trace.steps.push(StepRecord {
            step: trace.steps.len() + 1,
            params_before,
            findings,
            removal: report,
            search_time,
            removal_time,
        });
        if !success {
            break Status::RemovalFailed;
        }
    };
    trace.status = status;
    trace.final_params = model.param_vec();
    trace.wall_time = start.elapsed();
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    /// Properties the terminal verifier did not verify on the final model.
    pub unverified: Vec<String>,
    pub final_objective: f64,
    pub reported_objective: f64,
    pub passed: bool,
}

/// Checks a repaired run: the terminal verifier verifies every property on
/// the final model at threshold 0, and the final objective equals the value
/// the last removal reported.
pub fn check_optimality_on_termination(
    trace: &RepairTrace,
    problem: &RobustProblem,
    final_model: &Model,
    verifier: &dyn Searcher,
    tol: f64,
) -> Result<OptimalityReport> {
    if trace.status != Status::Repaired {
        return Err(EngineError::NotRepaired(trace.status));
    }
    let mut unverified = Vec::new();
    for prop in problem.spec.properties() {
        let res = verifier.search(final_model, prop).map_err(|e| EngineError::Search {
            property: prop.name.clone(),
            source: e,
        })?;
        if !res.is_verified() {
            unverified.push(prop.name.clone());
        }
    }
    let final_objective = problem.objective.value(final_model)?;
    let gap = (final_objective - trace.last_objective).abs();
    Ok(OptimalityReport {
        passed: unverified.is_empty() && gap <= tol,
        unverified,
        final_objective,
        reported_objective: trace.last_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hyperbox;
    use crate::removal::{PenaltyRemover, QpRemover};
    use crate::search::{BimFalsifier, SearchConfig, VertexVerifier};
    use crate::spec::{InputSet, SatisfactionFn};

    fn interval_prop(name: &str, lo: f64, hi: f64, a: f64, c: f64) -> Property {
        Property::new(
            name,
            InputSet::Box(Hyperbox::new(vec![lo], vec![hi]).unwrap()),
            SatisfactionFn::affine(vec![a], c),
        )
    }

    fn regression_problem(props: Vec<Property>) -> RobustProblem {
        let xs = [0.0, 1.0, 2.0, 3.0];
        RobustProblem::new(
            Model::linreg1d(1.0, 0.0),
            Objective::mse(
                xs.iter().map(|x| vec![*x]).collect(),
                xs.iter().map(|x| vec![*x]).collect(),
            ),
            Specification::new(props).unwrap(),
        )
    }

    fn vertex() -> Arc<dyn Searcher> {
        Arc::new(VertexVerifier::default())
    }

    #[test]
    fn satisfied_start_needs_one_call_per_property() {
        let problem = regression_problem(vec![
            interval_prop("a", 0.0, 1.0, 1.0, 1.0),
            interval_prop("b", 2.0, 3.0, -1.0, 5.0),
        ]);
        let cfg = CgrConfig::new(vec![vertex()], Arc::new(QpRemover::default()));
        let (model, trace) = run_cgr(&problem, &cfg).unwrap();
        assert_eq!(trace.status, Status::Repaired);
        assert_eq!(trace.searcher_calls, 2);
        assert_eq!(trace.repair_steps(), 0);
        assert_eq!(model.param_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn qp_backend_repairs_and_passes_optimality_check() {
        // y ≤ 2 on [2, 3] conflicts with the identity fit.
        let problem = regression_problem(vec![interval_prop("cap", 2.0, 3.0, -1.0, 2.0)]);
        let cfg = CgrConfig::new(vec![vertex()], Arc::new(QpRemover::default()));
        let (model, trace) = run_cgr(&problem, &cfg).unwrap();
        assert_eq!(trace.status, Status::Repaired);
        assert!(trace.repair_steps() >= 1);
        let report =
            check_optimality_on_termination(&trace, &problem, &model, cfg.terminal_verifier().as_ref(), 1e-8)
                .unwrap();
        assert!(report.passed, "{report:?}");

        // Store only grows and each step's counterexamples were genuine.
        let mut seen = 0;
        for s in &trace.steps {
            let before = problem.model.with_params(&s.params_before).unwrap();
            for f in &s.findings {
                assert!(is_counterexample(&before, &problem.spec.properties()[f.property_index], &f.x, 0.0));
            }
            seen += s.findings.len();
        }
        assert_eq!(trace.store().iter().map(Vec::len).sum::<usize>(), seen);

        // Perturbing the final model breaks the check.
        let broken = Model::linreg1d(1.0, 0.0);
        let report =
            check_optimality_on_termination(&trace, &problem, &broken, cfg.terminal_verifier().as_ref(), 1e-8)
                .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn step_limit_and_invalid_cascade() {
        let problem = regression_problem(vec![interval_prop("cap", 2.0, 3.0, -1.0, 2.0)]);
        let cfg = CgrConfig::new(vec![vertex()], Arc::new(QpRemover::default())).with_max_steps(0);
        let (_, trace) = run_cgr(&problem, &cfg).unwrap();
        assert_eq!(trace.status, Status::Repaired);

        let bim: Arc<dyn Searcher> = Arc::new(BimFalsifier::new(SearchConfig::default()));
        let bad = CgrConfig::new(vec![bim.clone()], Arc::new(PenaltyRemover::default()));
        assert!(matches!(run_cgr(&problem, &bad), Err(EngineError::Config(_))));
        let empty = CgrConfig::new(vec![], Arc::new(PenaltyRemover::default()));
        assert!(run_cgr(&problem, &empty).is_err());
    }

    #[test]
    fn cascade_prefers_falsifier_and_trace_serialises() {
        let problem = regression_problem(vec![interval_prop("cap", 2.0, 3.0, -1.0, 2.0)]);
        let bim: Arc<dyn Searcher> = Arc::new(BimFalsifier::new(SearchConfig::default()));
        let cfg = CgrConfig::new(vec![bim, vertex()], Arc::new(QpRemover::default()));
        let (_, trace) = run_cgr(&problem, &cfg).unwrap();
        assert_eq!(trace.status, Status::Repaired);
        assert_eq!(trace.steps[0].findings[0].searcher, "bim");

        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), trace.steps.len() + 2);
        assert_eq!(lines[0]["record"], "header");
        assert_eq!(lines.last().unwrap()["record"], "summary");
        assert_eq!(lines.last().unwrap()["status"], "repaired");
        assert!(lines[1].get("params_before").is_none());
    }

    #[test]
    fn failed_removal_is_reported() {
        // Contradictory properties on the same interval.
        let problem = regression_problem(vec![
            interval_prop("lo", 0.0, 1.0, 1.0, -5.0),
            interval_prop("hi", 0.0, 1.0, -1.0, 0.0),
        ]);
        let cfg = CgrConfig::new(vec![vertex()], Arc::new(QpRemover::default()));
        let (_, trace) = run_cgr(&problem, &cfg).unwrap();
        assert_eq!(trace.status, Status::RemovalFailed);
        assert!(check_optimality_on_termination(&trace, &problem, &problem.model, vertex().as_ref(), 1e-8).is_err());
    }
}
