//! Counterexample searchers: exact vertex verifiers, a branch-and-bound
//! verifier over input boxes, a gradient-based falsifier and a scripted
//! searcher that replays a fixed sequence of points.

use crate::model::{Activation, Hyperbox, Model, ModelError};
use crate::par;
use crate::seeds;
use crate::spec::{is_counterexample, InputSet, Property, SatisfactionFn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

const BAB_BATCH: usize = 16;
const MIN_SPLIT_WIDTH: f64 = 1e-12;
const VERTEX_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("searcher {searcher} does not support this instance: {reason}")]
    Unsupported { searcher: String, reason: String },
    #[error("{count} vertices exceed the cap of {cap}")]
    VertexCap { count: u128, cap: u128 },
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot load script: {0}")]
    Script(String),
}

pub type SearchOutcomeResult = std::result::Result<SearchResult, SearchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Optimal,
    EarlyExit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: Mode,
    pub tolerance: f64,
    pub early_exit_threshold: f64,
    pub max_nodes: usize,
    /// Seconds; `None` means no limit.
    pub time_budget: Option<f64>,
    pub rng_seed: u64,
    pub restarts: usize,
    /// 0 uses every core, 1 runs sequentially.
    pub workers: usize,
    pub bim_iterations: usize,
    /// Adam step as a fraction of each box width.
    pub bim_step: f64,
    pub vertex_cap: u128,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: Mode::Optimal,
            tolerance: 1e-6,
            early_exit_threshold: 1e-9,
            max_nodes: 200_000,
            time_budget: None,
            rng_seed: 0,
            restarts: 10,
            workers: 1,
            bim_iterations: 100,
            bim_step: 0.05,
            vertex_cap: 1 << 20,
        }
    }
}

impl SearchConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), SearchError> {
        if !(self.tolerance > 0.0) {
            return Err(SearchError::Config("tolerance must be positive".into()));
        }
        if !(self.early_exit_threshold >= 0.0) {
            return Err(SearchError::Config("early-exit threshold must be nonnegative".into()));
        }
        if self.restarts == 0 {
            return Err(SearchError::Config("restarts must be at least 1".into()));
        }
        if self.max_nodes == 0 {
            return Err(SearchError::Config("max_nodes must be at least 1".into()));
        }
        if !(self.bim_step > 0.0) {
            return Err(SearchError::Config("bim_step must be positive".into()));
        }
        if matches!(self.time_budget, Some(t) if !(t > 0.0)) {
            return Err(SearchError::Config("time budget must be positive".into()));
        }
        Ok(())
    }

    fn deadline(&self, start: Instant) -> Option<Instant> {
        self.time_budget
            .map(|t| start + Duration::from_secs_f64(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Verified { lower_bound: f64 },
    Counterexample { x: Vec<f64>, value: f64 },
    /// `lower_bound` is `-inf` when nothing is known.
    Unknown { lower_bound: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub nodes_explored: u64,
    pub evaluations: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub outcome: Outcome,
    pub stats: SearchStats,
}

impl SearchResult {
    pub fn counterexample(&self) -> Option<(&[f64], f64)> {
        match &self.outcome {
            Outcome::Counterexample { x, value } => Some((x, *value)),
            _ => None,
        }
    }

    pub fn is_verified(&self) -> bool {
        matches!(self.outcome, Outcome::Verified { .. })
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self.outcome, Outcome::Unknown { .. })
    }

    /// Equality ignoring wall-clock time.
    pub fn same_as(&self, other: &SearchResult) -> bool {
        self.outcome == other.outcome
            && self.stats.nodes_explored == other.stats.nodes_explored
            && self.stats.evaluations == other.stats.evaluations
    }
}

pub trait Searcher: Send + Sync {
    fn name(&self) -> String;
    /// Whether a non-counterexample answer certifies the property.
    fn is_complete(&self) -> bool;
    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult;
}

fn unsupported(searcher: &str, reason: impl Into<String>) -> SearchError {
    SearchError::Unsupported {
        searcher: searcher.to_string(),
        reason: reason.into(),
    }
}

fn check_dims(model: &Model, prop: &Property) -> std::result::Result<(), SearchError> {
    if prop.input.dim() != model.input_dim() {
        return Err(ModelError::Dimension {
            expected: model.input_dim(),
            got: prop.input.dim(),
        }
        .into());
    }
    if prop.sat.output_dim() != model.output_dim() {
        return Err(ModelError::Dimension {
            expected: model.output_dim(),
            got: prop.sat.output_dim(),
        }
        .into());
    }
    Ok(())
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        == Some(Ordering::Less)
}

/// `true` when the satisfaction of the model output attains its minimum over
/// a polytope at one of the polytope's vertices.
pub fn vertex_minimum_holds(model: &Model, sat: &SatisfactionFn) -> bool {
    if !sat.is_concave() {
        return false;
    }
    if model.is_affine_in_input() {
        return true;
    }
    // A single neuron with a monotone activation: each term is monotone in
    // the pre-activation, which is affine in the input.
    model.as_neuron().is_some()
}

fn box_vertex(b: &Hyperbox, free: &[usize], code: u64) -> Vec<f64> {
    let mut v = b.lo().to_vec();
    for (k, &dim) in free.iter().enumerate() {
        if code >> (free.len() - 1 - k) & 1 == 1 {
            v[dim] = b.hi()[dim];
        }
    }
    v
}

/// Exact verifier that evaluates every vertex of the input set.
#[derive(Debug, Clone, Default)]
pub struct VertexVerifier {
    pub cfg: SearchConfig,
}

impl VertexVerifier {
    pub fn new(cfg: SearchConfig) -> Self {
        VertexVerifier { cfg }
    }
}

impl Searcher for VertexVerifier {
    fn name(&self) -> String {
        "vertex".into()
    }

    fn is_complete(&self) -> bool {
        true
    }

    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult {
        let start = Instant::now();
        self.cfg.validate()?;
        check_dims(model, prop)?;
        if !vertex_minimum_holds(model, &prop.sat) {
            return Err(unsupported(
                "vertex",
                "satisfaction of the model output is not minimised at a vertex",
            ));
        }
        let count = prop.input.vertex_count().unwrap_or(u128::MAX);
        if count > self.cfg.vertex_cap {
            return Err(SearchError::VertexCap {
                count,
                cap: self.cfg.vertex_cap,
            });
        }
        let count = count as u64;
        let vertex: Box<dyn Fn(u64) -> Vec<f64> + Sync> = match &prop.input {
            InputSet::Box(b) => {
                let free: Vec<usize> = (0..b.dim()).filter(|&i| b.lo()[i] < b.hi()[i]).collect();
                let b = b.clone();
                Box::new(move |code| box_vertex(&b, &free, code))
            }
            InputSet::Vertices(vs) => {
                let vs = vs.clone();
                Box::new(move |i| vs[i as usize].clone())
            }
        };
        let early = self.cfg.mode == Mode::EarlyExit;
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut evaluations = 0u64;
        let mut chunk_start = 0u64;
        while chunk_start < count {
            let end = (chunk_start + VERTEX_CHUNK as u64).min(count);
            let codes: Vec<u64> = (chunk_start..end).collect();
            let vals = par::map(&codes, self.cfg.workers, |&c| {
                let x = vertex(c);
                let v = prop.value_at(model, &x);
                (x, v)
            });
            for (x, v) in vals {
                let v = v?;
                evaluations += 1;
                if early && v < 0.0 {
                    return Ok(SearchResult {
                        outcome: Outcome::Counterexample { x, value: v },
                        stats: SearchStats {
                            nodes_explored: evaluations,
                            evaluations,
                            wall_time: start.elapsed(),
                        },
                    });
                }
                let better = match &best {
                    None => true,
                    Some((bx, bv)) => v < *bv || (v == *bv && lex_less(&x, bx)),
                };
                if better {
                    best = Some((x, v));
                }
            }
            chunk_start = end;
        }
        let (x, value) = best.expect("input set has at least one vertex");
        let outcome = if value < 0.0 {
            Outcome::Counterexample { x, value }
        } else {
            Outcome::Verified { lower_bound: value }
        };
        Ok(SearchResult {
            outcome,
            stats: SearchStats {
                nodes_explored: evaluations,
                evaluations,
                wall_time: start.elapsed(),
            },
        })
    }
}

/// Closed-form verifier for one monotone neuron with an affine property.
#[derive(Debug, Clone, Default)]
pub struct NeuronVerifier;

impl Searcher for NeuronVerifier {
    fn name(&self) -> String {
        "neuron".into()
    }

    fn is_complete(&self) -> bool {
        true
    }

    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult {
        let start = Instant::now();
        check_dims(model, prop)?;
        let Some((w, _, _)) = model.as_neuron() else {
            return Err(unsupported("neuron", "model is not a single neuron"));
        };
        let SatisfactionFn::Affine(term) = &prop.sat else {
            return Err(unsupported("neuron", "satisfaction function is not affine"));
        };
        let Some(b) = prop.input.as_box() else {
            return Err(unsupported("neuron", "input set is not a box"));
        };
        let minimise_pre = term.a[0] >= 0.0;
        let x: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(i, &wi)| {
                let take_lo = if minimise_pre { wi >= 0.0 } else { wi <= 0.0 };
                if take_lo {
                    b.lo()[i]
                } else {
                    b.hi()[i]
                }
            })
            .collect();
        let value = prop.value_at(model, &x)?;
        let outcome = if value < 0.0 {
            Outcome::Counterexample { x, value }
        } else {
            Outcome::Verified { lower_bound: value }
        };
        Ok(SearchResult {
            outcome,
            stats: SearchStats {
                nodes_explored: 1,
                evaluations: 1,
                wall_time: start.elapsed(),
            },
        })
    }
}

/// Walks to a vertex one coordinate at a time, keeping the smaller of the two
/// endpoint values (the lower endpoint on ties).
pub fn monotone_vertex_descent<G>(g: G, b: &Hyperbox, start: &[f64]) -> Result<Vec<f64>, ModelError>
where
    G: Fn(&[f64]) -> f64,
{
    if start.len() != b.dim() {
        return Err(ModelError::Dimension {
            expected: b.dim(),
            got: start.len(),
        });
    }
    if !b.contains(start) {
        return Err(ModelError::Invalid("start point lies outside the box".into()));
    }
    let mut v = start.to_vec();
    for i in 0..b.dim() {
        v[i] = b.lo()[i];
        let at_lo = g(&v);
        v[i] = b.hi()[i];
        let at_hi = g(&v);
        if at_lo <= at_hi {
            v[i] = b.lo()[i];
        }
    }
    Ok(v)
}

/// Lower bound of the satisfaction function over the model's outputs on a box.
/// A final layer without activation is folded into the affine terms, which
/// keeps correlations between outputs and makes affine models exact.
pub fn satisfaction_lower_bound(
    model: &Model,
    sat: &SatisfactionFn,
    input: &Hyperbox,
) -> Result<f64, ModelError> {
    let layers = model.layers();
    let last = layers.last().expect("models have at least one layer");
    if last.activation() != Activation::None {
        return Ok(sat.lower_bound(&model.interval_forward(input)?));
    }
    let z = model.interval_prefix(input, layers.len() - 1)?;
    let term_lb = |a: &[f64], c: f64| {
        let mut v = c;
        for (r, &ar) in a.iter().enumerate() {
            v += ar * last.bias()[r];
        }
        for col in 0..last.cols() {
            let coef: f64 = a.iter().enumerate().map(|(r, ar)| ar * last.weight(r, col)).sum();
            v += if coef >= 0.0 { coef * z.lo()[col] } else { coef * z.hi()[col] };
        }
        v
    };
    let lbs = sat.terms().iter().map(|t| term_lb(&t.a, t.c));
    Ok(match sat {
        SatisfactionFn::MaxOfAffine(_) => lbs.fold(f64::NEG_INFINITY, f64::max),
        _ => lbs.fold(f64::INFINITY, f64::min),
    })
}

struct Node {
    lb: f64,
    seq: u64,
    bx: Hyperbox,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap order: the smallest bound, then the oldest node, comes first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .lb
            .total_cmp(&self.lb)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Best-first branch and bound over input boxes with interval bounds.
///
/// Nodes are expanded in fixed-size batches whose children are evaluated in
/// parallel and merged in a fixed order, so results do not depend on the
/// worker count. Optimal and early-exit modes share one traversal.
#[derive(Debug, Clone, Default)]
pub struct BabVerifier {
    pub cfg: SearchConfig,
}

impl BabVerifier {
    pub fn new(cfg: SearchConfig) -> Self {
        BabVerifier { cfg }
    }
}

impl Searcher for BabVerifier {
    fn name(&self) -> String {
        match self.cfg.mode {
            Mode::Optimal => "bab:optimal".into(),
            Mode::EarlyExit => "bab:early".into(),
        }
    }

    fn is_complete(&self) -> bool {
        true
    }

    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult {
        let start = Instant::now();
        let cfg = &self.cfg;
        cfg.validate()?;
        check_dims(model, prop)?;
        let Some(root) = prop.input.as_box() else {
            return Err(unsupported("bab", "input set is not a box"));
        };
        let deadline = cfg.deadline(start);
        let early = cfg.mode == Mode::EarlyExit;
        let tol = cfg.tolerance;
        let delta = cfg.early_exit_threshold;

        let evaluate = |bx: &Hyperbox| -> Result<(f64, Vec<f64>, f64), ModelError> {
            let lb = satisfaction_lower_bound(model, &prop.sat, bx)?;
            let c = bx.center();
            let v = prop.value_at(model, &c)?;
            Ok((lb, c, v))
        };

        let mut stats = SearchStats::default();
        let (root_lb, cx, cv) = evaluate(root)?;
        stats.nodes_explored = 1;
        stats.evaluations = 1;
        let mut inc_x = cx;
        let mut inc_v = cv;
        // Smallest bound among discarded nodes.
        let mut certified = f64::INFINITY;
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;

        let finish = |outcome: Outcome, mut stats: SearchStats| {
            stats.wall_time = start.elapsed();
            Ok(SearchResult { outcome, stats })
        };

        if early && inc_v < -delta {
            return finish(Outcome::Counterexample { x: inc_x, value: inc_v }, stats);
        }
        let prune_at = |inc: f64| inc.min(0.0) - tol;
        if root_lb >= prune_at(inc_v) {
            certified = certified.min(root_lb);
        } else {
            heap.push(Node { lb: root_lb, seq, bx: root.clone() });
            seq += 1;
        }

        loop {
            // Drop nodes the incumbent has made irrelevant.
            while let Some(top) = heap.peek() {
                if top.lb >= prune_at(inc_v) {
                    let n = heap.pop().expect("peeked");
                    certified = certified.min(n.lb);
                } else {
                    break;
                }
            }
            if heap.is_empty() {
                break;
            }
            let out_of_budget = stats.nodes_explored as usize >= cfg.max_nodes
                || deadline.is_some_and(|d| Instant::now() >= d);
            if out_of_budget {
                let open = heap.peek().map_or(f64::INFINITY, |n| n.lb);
                if inc_v < 0.0 {
                    return finish(Outcome::Counterexample { x: inc_x, value: inc_v }, stats);
                }
                return finish(
                    Outcome::Unknown {
                        lower_bound: certified.min(open).min(inc_v),
                    },
                    stats,
                );
            }

            let mut children = Vec::with_capacity(2 * BAB_BATCH);
            while children.len() < 2 * BAB_BATCH {
                let Some(node) = heap.pop() else { break };
                let dim = node.bx.widest_dim();
                if node.bx.width(dim) <= MIN_SPLIT_WIDTH * (1.0 + node.bx.lo()[dim].abs()) {
                    certified = certified.min(node.lb);
                    continue;
                }
                let (l, r) = node.bx.bisect(dim);
                children.push(l);
                children.push(r);
            }
            let evaluated = par::map(&children, cfg.workers, |bx| evaluate(bx));
            for (bx, res) in children.into_iter().zip(evaluated) {
                let (lb, cx, cv) = res?;
                stats.nodes_explored += 1;
                stats.evaluations += 1;
                if cv < inc_v {
                    inc_v = cv;
                    inc_x = cx;
                    if early && inc_v < -delta {
                        return finish(Outcome::Counterexample { x: inc_x, value: inc_v }, stats);
                    }
                }
                if lb >= prune_at(inc_v) {
                    certified = certified.min(lb);
                } else {
                    heap.push(Node { lb, seq, bx });
                    seq += 1;
                }
            }
        }

        if inc_v < 0.0 {
            finish(Outcome::Counterexample { x: inc_x, value: inc_v }, stats)
        } else {
            finish(
                Outcome::Verified {
                    lower_bound: certified.min(inc_v),
                },
                stats,
            )
        }
    }
}

/// Projected Adam descent on the satisfaction value from random starts.
#[derive(Debug, Clone, Default)]
pub struct BimFalsifier {
    pub cfg: SearchConfig,
}

impl BimFalsifier {
    pub fn new(cfg: SearchConfig) -> Self {
        BimFalsifier { cfg }
    }

    fn run_restart(
        &self,
        model: &Model,
        prop: &Property,
        bx: &Hyperbox,
        restart: usize,
    ) -> Result<(Vec<f64>, f64, u64), ModelError> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-12;
        let n = bx.dim();
        let mut rng = seeds::rng_indexed(self.cfg.rng_seed, "bim", restart as u64);
        let mut x: Vec<f64> = (0..n)
            .map(|i| {
                if bx.width(i) > 0.0 {
                    rng.gen_range(bx.lo()[i]..=bx.hi()[i])
                } else {
                    bx.lo()[i]
                }
            })
            .collect();
        let lr: Vec<f64> = (0..n).map(|i| self.cfg.bim_step * bx.width(i)).collect();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut y = model.forward(&x)?;
        let mut val = prop.sat.eval(&y)?;
        let mut best = (x.clone(), val);
        let mut evals = 1u64;
        for t in 1..=self.cfg.bim_iterations {
            let (_, g) = model.grad(&x, &prop.sat.gradient(&y))?;
            let c1 = 1.0 - B1.powi(t as i32);
            let c2 = 1.0 - B2.powi(t as i32);
            for i in 0..n {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                x[i] -= lr[i] * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
            bx.clamp(&mut x);
            y = model.forward(&x)?;
            val = prop.sat.eval(&y)?;
            evals += 1;
            if val < best.1 {
                best = (x.clone(), val);
            }
        }
        Ok((best.0, best.1, evals))
    }
}

impl Searcher for BimFalsifier {
    fn name(&self) -> String {
        "bim".into()
    }

    fn is_complete(&self) -> bool {
        false
    }

    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult {
        let start = Instant::now();
        self.cfg.validate()?;
        check_dims(model, prop)?;
        let Some(bx) = prop.input.as_box() else {
            return Err(unsupported("bim", "input set is not a box"));
        };
        let runs = par::map_range(self.cfg.restarts, self.cfg.workers, |r| {
            self.run_restart(model, prop, bx, r)
        });
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut evaluations = 0;
        for run in runs {
            let (x, v, e) = run?;
            evaluations += e;
            if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
                best = Some((x, v));
            }
        }
        let (x, value) = best.expect("at least one restart");
        let outcome = if value < 0.0 && is_counterexample(model, prop, &x, 0.0) {
            Outcome::Counterexample { x, value }
        } else {
            Outcome::Unknown {
                lower_bound: f64::NEG_INFINITY,
            }
        };
        Ok(SearchResult {
            outcome,
            stats: SearchStats {
                nodes_explored: self.cfg.restarts as u64,
                evaluations,
                wall_time: start.elapsed(),
            },
        })
    }
}

/// Replays a fixed sequence: call `N` returns point `N` when it is a genuine
/// counterexample for the current model and defers to the fallback otherwise.
pub struct ScriptedSearcher {
    sequence: Vec<Vec<f64>>,
    fallback: Arc<dyn Searcher>,
    calls: AtomicUsize,
}

impl ScriptedSearcher {
    pub fn new(sequence: Vec<Vec<f64>>, fallback: Arc<dyn Searcher>) -> Self {
        ScriptedSearcher {
            sequence,
            fallback,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(AtomicOrdering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, AtomicOrdering::SeqCst);
    }
}

impl Searcher for ScriptedSearcher {
    fn name(&self) -> String {
        format!("script({})", self.fallback.name())
    }

    fn is_complete(&self) -> bool {
        self.fallback.is_complete()
    }

    fn search(&self, model: &Model, prop: &Property) -> SearchOutcomeResult {
        let start = Instant::now();
        let call = self.calls.fetch_add(1, AtomicOrdering::SeqCst);
        if let Some(x) = self.sequence.get(call) {
            if is_counterexample(model, prop, x, 0.0) {
                let value = prop.value_at(model, x)?;
                return Ok(SearchResult {
                    outcome: Outcome::Counterexample { x: x.clone(), value },
                    stats: SearchStats {
                        nodes_explored: 0,
                        evaluations: 1,
                        wall_time: start.elapsed(),
                    },
                });
            }
        }
        self.fallback.search(model, prop)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptDoc {
    Plain(Vec<Vec<f64>>),
    Full {
        sequence: Vec<Vec<f64>>,
        #[serde(default = "default_fallback")]
        fallback: String,
    },
}

fn default_fallback() -> String {
    "vertex".into()
}

/// Builds a searcher from its command-line name: `vertex`, `neuron`,
/// `bab:optimal`, `bab:early`, `bim` or `script:<file>`. A script file holds
/// either a JSON array of points or `{"sequence": [...], "fallback": "<name>"}`.
pub fn searcher_from_name(name: &str, cfg: &SearchConfig) -> Result<Arc<dyn Searcher>, SearchError> {
    match name {
        "vertex" => Ok(Arc::new(VertexVerifier::new(cfg.clone()))),
        "neuron" => Ok(Arc::new(NeuronVerifier)),
        "bab" => Ok(Arc::new(BabVerifier::new(cfg.clone()))),
        "bab:optimal" => Ok(Arc::new(BabVerifier::new(cfg.clone().with_mode(Mode::Optimal)))),
        "bab:early" => Ok(Arc::new(BabVerifier::new(cfg.clone().with_mode(Mode::EarlyExit)))),
        "bim" => Ok(Arc::new(BimFalsifier::new(cfg.clone()))),
        _ => {
            if let Some(path) = name.strip_prefix("script:") {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| SearchError::Script(format!("{path}: {e}")))?;
                let doc: ScriptDoc = serde_json::from_str(&text)
                    .map_err(|e| SearchError::Script(format!("{path}: {e}")))?;
                let (sequence, fallback) = match doc {
                    ScriptDoc::Plain(s) => (s, default_fallback()),
                    ScriptDoc::Full { sequence, fallback } => (sequence, fallback),
                };
                if fallback.starts_with("script:") {
                    return Err(SearchError::Script("fallback cannot be another script".into()));
                }
                let fallback = searcher_from_name(&fallback, cfg)?;
                Ok(Arc::new(ScriptedSearcher::new(sequence, fallback)))
            } else {
                Err(SearchError::Config(format!("unknown searcher {name:?}")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{robustness_property, AffineTerm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_fcnn(rng: &mut ChaCha8Rng, dims: &[usize], act: Activation) -> Model {
        Model::random_fcnn(rng, dims, act).unwrap()
    }

    fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> InputSet {
        InputSet::Box(Hyperbox::new(lo, hi).unwrap())
    }

    fn ident_prop(input: InputSet, sat: SatisfactionFn) -> Property {
        Property::new("p", input, sat)
    }

    fn affine_scalar(w: Vec<f64>, b: f64) -> Model {
        Model::affine(vec![w], vec![b]).unwrap()
    }

    #[test]
    fn vertex_examples() {
        let m = affine_scalar(vec![1.0, -2.0], 0.5);
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 0.0));
        let r = VertexVerifier::default().search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Counterexample { x: vec![0.0, 1.0], value: -1.5 });

        let m = affine_scalar(vec![1.0, 0.0], 1.0);
        let r = VertexVerifier::default().search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Verified { lower_bound: 1.0 });

        let m = Model::linreg1d(2.0, -3.0);
        let p1 = ident_prop(boxed(vec![1.0], vec![4.0]), SatisfactionFn::affine(vec![-1.0], 0.0));
        let r = VertexVerifier::default().search(&m, &p1).unwrap();
        assert_eq!(r.counterexample().unwrap().1, (-1.0f64).min(-5.0));
    }

    #[test]
    fn vertex_ties_and_early_exit() {
        // Both vertices with x1 = 1 tie; the lexicographically smaller wins.
        let m = affine_scalar(vec![0.0, -1.0], 0.5);
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 0.0));
        let r = VertexVerifier::default().search(&m, &p).unwrap();
        assert_eq!(r.counterexample().unwrap().0, &[0.0, 1.0]);

        let m = affine_scalar(vec![-1.0, -2.0], 0.5);
        let early = VertexVerifier::new(SearchConfig::default().with_mode(Mode::EarlyExit));
        let r = early.search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Counterexample { x: vec![0.0, 1.0], value: -1.5 });
        let opt = VertexVerifier::default().search(&m, &p).unwrap();
        assert_eq!(opt.counterexample().unwrap().1, -2.5);
    }

    #[test]
    fn vertex_rejects_unsupported_and_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_fcnn(&mut rng, &[2, 3, 1], Activation::Relu);
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 0.0));
        assert!(matches!(
            VertexVerifier::default().search(&net, &p),
            Err(SearchError::Unsupported { .. })
        ));
        let m = affine_scalar(vec![1.0; 21], 0.0);
        let big = ident_prop(boxed(vec![0.0; 21], vec![1.0; 21]), SatisfactionFn::affine(vec![1.0], 0.0));
        assert!(matches!(
            VertexVerifier::default().search(&m, &big),
            Err(SearchError::VertexCap { .. })
        ));
    }

    #[test]
    fn vertex_polytope_input() {
        let m = affine_scalar(vec![1.0, 1.0], -0.5);
        let tri = InputSet::vertices(vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = ident_prop(tri, SatisfactionFn::affine(vec![1.0], 0.0));
        let r = VertexVerifier::default().search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Counterexample { x: vec![0.0, 0.0], value: -0.5 });
    }

    #[test]
    fn neuron_examples() {
        let m = Model::neuron(vec![1.0, -1.0], 0.0, Activation::Relu).unwrap();
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], -0.25));
        let r = NeuronVerifier.search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Counterexample { x: vec![0.0, 1.0], value: -0.25 });
        // Grid oracle.
        let mut grid_min = f64::INFINITY;
        for i in 0..=100 {
            for j in 0..=100 {
                let x = [i as f64 / 100.0, j as f64 / 100.0];
                grid_min = grid_min.min(p.value_at(&m, &x).unwrap());
            }
        }
        assert_eq!(grid_min, -0.25);

        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 1.0));
        assert!(NeuronVerifier.search(&m, &p).unwrap().is_verified());

        let s = Model::neuron(vec![1.0], 0.0, Activation::Sigmoid).unwrap();
        let p = ident_prop(boxed(vec![0.0], vec![3.0]), SatisfactionFn::affine(vec![-1.0], 0.9));
        let r = NeuronVerifier.search(&s, &p).unwrap();
        let want = 0.9 - crate::model::sigmoid(3.0);
        match r.outcome {
            Outcome::Counterexample { x, value } => {
                assert_eq!(x, vec![3.0]);
                assert_eq!(value, want);
            }
            Outcome::Verified { lower_bound } => {
                assert!(want >= 0.0);
                assert_eq!(lower_bound, want);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn descent_examples() {
        let b = Hyperbox::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let g = |x: &[f64]| x[0] - 2.0 * x[1];
        assert_eq!(monotone_vertex_descent(g, &b, &[0.5, 0.5]).unwrap(), vec![0.0, 1.0]);
        let v = monotone_vertex_descent(g, &b, &[1.0, 0.0]).unwrap();
        assert!(g(&v) <= g(&[1.0, 0.0]));
        assert!(monotone_vertex_descent(g, &b, &[2.0, 0.0]).is_err());

        let neuron = Model::neuron(vec![2.0, -3.0, 1.0], 1.0, Activation::Relu).unwrap();
        let b3 = Hyperbox::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let f = |x: &[f64]| neuron.forward(x).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let v = monotone_vertex_descent(f, &b3, &start).unwrap();
        let mut sample_min = f64::INFINITY;
        for _ in 0..100_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            sample_min = sample_min.min(f(&x));
        }
        assert!(f(&v) <= sample_min + 1e-12);
        assert!(f(&v) <= f(&start));
    }

    fn grid_min_2d(model: &Model, prop: &Property, steps: usize) -> f64 {
        let b = prop.input.as_box().unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = [
                    b.lo()[0] + b.width(0) * i as f64 / steps as f64,
                    b.lo()[1] + b.width(1) * j as f64 / steps as f64,
                ];
                best = best.min(prop.value_at(model, &x).unwrap());
            }
        }
        best
    }

    #[test]
    fn bab_matches_dense_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = random_fcnn(&mut rng, &[2, 4, 4, 2], Activation::Relu);
        let p = robustness_property("r", &[0.0, 0.0], 0, 1.0, 2, None).unwrap();
        let r = BabVerifier::default().search(&net, &p).unwrap();
        let oracle = grid_min_2d(&net, &p, 1000);
        match r.outcome {
            Outcome::Counterexample { value, .. } => assert!((value - oracle).abs() <= 1e-3),
            Outcome::Verified { lower_bound } => {
                assert!(oracle >= -1e-3 && lower_bound >= -1e-6)
            }
            Outcome::Unknown { .. } => panic!("budget exhausted"),
        }
    }

    #[test]
    fn bab_is_exact_on_affine_models() {
        let m = affine_scalar(vec![1.0, 2.0], 0.5);
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 0.0));
        let r = BabVerifier::default().search(&m, &p).unwrap();
        assert_eq!(r.outcome, Outcome::Verified { lower_bound: 0.5 });
        assert_eq!(r.stats.nodes_explored, 1);
    }

    #[test]
    fn bab_early_exit_is_never_better_than_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = 0;
        for _ in 0..20 {
            let net = random_fcnn(&mut rng, &[2, 5, 2], Activation::Relu);
            let p = robustness_property("r", &[0.2, -0.1], 1, 0.8, 2, None).unwrap();
            let opt = BabVerifier::default().search(&net, &p).unwrap();
            let early = BabVerifier::new(SearchConfig::default().with_mode(Mode::EarlyExit))
                .search(&net, &p)
                .unwrap();
            if let Some((_, ov)) = opt.counterexample() {
                let (ex, ev) = early.counterexample().expect("early exit finds one too");
                assert!(ov <= ev && ev < 0.0);
                assert!(is_counterexample(&net, &p, ex, 0.0));
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn bab_budget_gives_unknown() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_fcnn(&mut rng, &[2, 8, 8, 1], Activation::Relu);
        let cfg = SearchConfig {
            max_nodes: 1,
            ..SearchConfig::default()
        };
        let p = ident_prop(boxed(vec![-1.0; 2], vec![1.0; 2]), SatisfactionFn::affine(vec![1.0], 50.0));
        let r = BabVerifier::new(cfg).search(&net, &p).unwrap();
        assert!(r.is_verified() || r.is_unknown());
    }

    #[test]
    fn bab_disjunction_bound_is_sound() {
        let m = Model::affine(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let sat = SatisfactionFn::MaxOfAffine(vec![
            AffineTerm::new(vec![1.0, 0.0], -0.5),
            AffineTerm::new(vec![0.0, 1.0], -0.5),
        ]);
        let p = ident_prop(boxed(vec![0.0; 2], vec![1.0; 2]), sat);
        let r = BabVerifier::default().search(&m, &p).unwrap();
        let (_, v) = r.counterexample().unwrap();
        assert!((v + 0.5).abs() <= 1e-6);
    }

    #[test]
    fn bim_examples() {
        let m = Model::affine(vec![vec![-1.0]], vec![0.0]).unwrap();
        let p = ident_prop(boxed(vec![0.0], vec![1.0]), SatisfactionFn::affine(vec![1.0], 0.0));
        let r = BimFalsifier::default().search(&m, &p).unwrap();
        let (x, v) = r.counterexample().unwrap();
        assert!(v <= -0.9);
        assert!(is_counterexample(&m, &p, x, 0.0));

        let m = Model::affine(vec![vec![1.0]], vec![0.1]).unwrap();
        let r = BimFalsifier::default().search(&m, &p).unwrap();
        assert!(r.is_unknown());
        assert!(!BimFalsifier::default().is_complete());
    }

    #[test]
    fn bim_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_fcnn(&mut rng, &[2, 6, 2], Activation::Relu);
        let p = robustness_property("r", &[0.0, 0.0], 0, 1.0, 2, None).unwrap();
        let cfg = SearchConfig {
            rng_seed: 77,
            ..SearchConfig::default()
        };
        let a = BimFalsifier::new(cfg.clone()).search(&net, &p).unwrap();
        let b = BimFalsifier::new(cfg).search(&net, &p).unwrap();
        assert!(a.same_as(&b));
    }

    #[test]
    fn scripted_searcher_replays_then_delegates() {
        let m = Model::affine(vec![vec![-1.0]], vec![0.0]).unwrap();
        let p = ident_prop(boxed(vec![0.0], vec![1.0]), SatisfactionFn::affine(vec![1.0], 0.0));
        let s = ScriptedSearcher::new(
            vec![vec![0.25], vec![0.0], vec![0.75]],
            Arc::new(VertexVerifier::default()),
        );
        assert_eq!(s.search(&m, &p).unwrap().counterexample().unwrap().0, &[0.25]);
        // 0.0 is not a counterexample (value 0), so the fallback answers.
        assert_eq!(s.search(&m, &p).unwrap().counterexample().unwrap().0, &[1.0]);
        assert_eq!(s.search(&m, &p).unwrap().counterexample().unwrap().0, &[0.75]);
        assert_eq!(s.search(&m, &p).unwrap().counterexample().unwrap().0, &[1.0]);

        let empty = ScriptedSearcher::new(vec![], Arc::new(VertexVerifier::default()));
        assert_eq!(empty.search(&m, &p).unwrap().counterexample().unwrap().0, &[1.0]);
        assert!(empty.is_complete());
    }

    #[test]
    fn names_resolve() {
        let cfg = SearchConfig::default();
        for n in ["vertex", "neuron", "bab:optimal", "bab:early", "bim"] {
            assert_eq!(searcher_from_name(n, &cfg).unwrap().name(), n);
        }
        assert!(searcher_from_name("milp", &cfg).is_err());
        assert!(searcher_from_name("script:/nonexistent/file.json", &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            restarts: 0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SearchConfig {
            tolerance: 0.0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
