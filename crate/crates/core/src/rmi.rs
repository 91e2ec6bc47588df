//! Recursive model indices over sorted integer keys: construction,
//! specification derivation and the second-stage repair comparison.
//!
//! Positions are 1-based. Block indices `j` are 0-based; the stage-1 network
//! is trained to predict `j + 1`.

use crate::engine::{run_cgr, CgrConfig, RobustProblem, Status};
use crate::model::{Activation, Hyperbox, Layer, Model, ModelDoc, ModelError};
use crate::par;
use crate::removal::{
    fit_linreg, AugmentLsqRemover, Labeler, Objective, PenaltyConfig, PenaltyRemover, QpRemover, Remover,
};
use crate::search::{SearchConfig, VertexVerifier};
use crate::seeds;
use crate::spec::{AffineTerm, InputSet, Property, SatisfactionFn, Specification};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RmiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed dataset line {line}: {text:?}")]
    Parse { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed index document: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RmiError>;

/// Sorted keys; duplicates are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerDataset {
    pub keys: Vec<i64>,
    pub seed: u64,
    pub key_range: (i64, i64),
}

impl IntegerDataset {
    /// Sorts the keys and records their range.
    pub fn from_keys(mut keys: Vec<i64>, seed: u64) -> Result<Self> {
        if keys.len() < 2 {
            return Err(RmiError::Config("a dataset needs at least two keys".into()));
        }
        keys.sort_unstable();
        let key_range = (keys[0], keys[keys.len() - 1]);
        Ok(IntegerDataset { keys, seed, key_range })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// 1-based position of the key at 0-based index `idx`.
    pub fn position(idx: usize) -> f64 {
        (idx + 1) as f64
    }

    /// One decimal integer per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = String::with_capacity(self.keys.len() * 8);
        for k in &self.keys {
            let _ = writeln!(buf, "{k}");
        }
        w.write_all(buf.as_bytes())
    }

    pub fn read_from<R: BufRead>(r: R, seed: u64) -> Result<Self> {
        let mut keys = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let k = t.parse::<i64>().map_err(|_| RmiError::Parse {
                line: i + 1,
                text: t.to_string(),
            })?;
            keys.push(k);
        }
        IntegerDataset::from_keys(keys, seed)
    }
}

/// `n` keys drawn uniformly from the inclusive range `[lo, hi]`, then sorted.
pub fn generate_dataset(seed: u64, n: usize, range: (i64, i64)) -> Result<IntegerDataset> {
    if n < 2 {
        return Err(RmiError::Config("n must be at least 2".into()));
    }
    if range.0 > range.1 {
        return Err(RmiError::Config(format!("empty key range [{}, {}]", range.0, range.1)));
    }
    let mut rng = seeds::rng(seed, "dataset");
    let keys = (0..n).map(|_| rng.gen_range(range.0..=range.1)).collect();
    IntegerDataset::from_keys(keys, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.01,
            batch_size: 512,
            hidden: vec![16, 16],
        }
    }
}

/// Two-stage index. Stage-2 models are `(w, b)` lines on raw keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmi {
    pub stage1: Model,
    pub k: usize,
    /// Half-open index range of each block.
    pub blocks: Vec<(usize, usize)>,
    /// Smallest and largest key of each block.
    pub block_bounds: Vec<(i64, i64)>,
    pub stage2: Vec<(f64, f64)>,
    /// Block each key is routed to by stage 1.
    pub assignment: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RmiDoc {
    k: usize,
    stage1: ModelDoc,
    blocks: Vec<(usize, usize)>,
    block_bounds: Vec<(i64, i64)>,
    stage2: Vec<(f64, f64)>,
    assignment: Vec<usize>,
}

/// Equal-size contiguous blocks; the remainder goes to the last ones.
pub fn split_blocks(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|j| (j * n / k, (j + 1) * n / k)).collect()
}

/// Routing rule: `round(clamp(stage1(key), 1, K))`, as a 0-based block.
pub fn route(stage1: &Model, key: f64, k: usize) -> Result<usize> {
    let y = stage1.forward(&[key])?[0];
    let y = if y.is_nan() { 1.0 } else { y.clamp(1.0, k as f64) };
    Ok(y.round() as usize - 1)
}

/// Least-squares line through `(key, position)`; `w = 0` and the mean
/// position when every key is equal.
pub fn fit_stage2(keys: &[f64], positions: &[f64]) -> (f64, f64) {
    fit_linreg(keys, positions).unwrap_or_else(|| {
        let mean = positions.iter().sum::<f64>() / positions.len().max(1) as f64;
        (0.0, mean)
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains the stage-1 network on standardised keys, then folds the
/// standardisation into its first layer.
fn train_stage1(ds: &IntegerDataset, k: usize, cfg: &TrainConfig, seed: u64) -> Result<Model> {
    let n = ds.len();
    let blocks = split_blocks(n, k);
    let mut targets = vec![0.0; n];
    for (j, &(a, b)) in blocks.iter().enumerate() {
        targets[a..b].fill((j + 1) as f64);
    }
    let raw: Vec<f64> = ds.keys.iter().map(|&k| k as f64).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let inputs: Vec<f64> = raw.iter().map(|x| (x - mean) / scale).collect();

    let mut rng = seeds::rng(seed, "training");
    let mut dims = vec![1];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut model = Model::random_fcnn(&mut rng, &dims, Activation::Relu)?;
    let mut theta = model.param_vec();
    // Start the output bias at the mean label.
    let last = theta.len() - 1;
    theta[last] = (k as f64 + 1.0) / 2.0;
    model = model.with_params(&theta)?;

    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.max(1);
    let mut grad = vec![0.0; theta.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.fill(0.0);
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let y = model.forward(&[inputs[i]])?[0];
                let (g, _) = model.grad(&[inputs[i]], &[scale * (y - targets[i])])?;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            adam.step(&mut theta, &grad);
            model = model.with_params(&theta)?;
        }
    }

    let mut layers = model.layers().to_vec();
    let first = &layers[0];
    let w: Vec<f64> = first.weights().iter().map(|w| w / scale).collect();
    let b: Vec<f64> = first
        .bias()
        .iter()
        .zip(first.weights())
        .map(|(b, w0)| b - w0 * mean / scale)
        .collect();
    layers[0] = Layer::from_flat(first.rows(), 1, w, b, first.activation())?;
    Ok(Model::fcnn(layers)?)
}

/// Builds the index: stage 1 trained on block labels, stage 2 fitted per
/// block in closed form.
pub fn build_rmi(ds: &IntegerDataset, k: usize, cfg: &TrainConfig) -> Result<Rmi> {
    if k < 2 {
        return Err(RmiError::Config("K must be at least 2".into()));
    }
    if ds.len() < k {
        return Err(RmiError::Config(format!("{} keys cannot fill {k} blocks", ds.len())));
    }
    let stage1 = train_stage1(ds, k, cfg, ds.seed)?;
    let blocks = split_blocks(ds.len(), k);
    let mut block_bounds = Vec::with_capacity(k);
    let mut stage2 = Vec::with_capacity(k);
    for &(a, b) in &blocks {
        block_bounds.push((ds.keys[a], ds.keys[b - 1]));
        let xs: Vec<f64> = ds.keys[a..b].iter().map(|&k| k as f64).collect();
        let ys: Vec<f64> = (a..b).map(IntegerDataset::position).collect();
        stage2.push(fit_stage2(&xs, &ys));
    }
    let assignment = ds
        .keys
        .iter()
        .map(|&key| route(&stage1, key as f64, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rmi {
        stage1,
        k,
        blocks,
        block_bounds,
        stage2,
        assignment,
    })
}

impl Rmi {
    pub fn to_json(&self) -> String {
        let doc = RmiDoc {
            k: self.k,
            stage1: ModelDoc::from(&self.stage1),
            blocks: self.blocks.clone(),
            block_bounds: self.block_bounds.clone(),
            stage2: self.stage2.clone(),
            assignment: self.assignment.clone(),
        };
        serde_json::to_string(&doc).expect("index document serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RmiDoc = serde_json::from_str(text)?;
        Ok(Rmi {
            stage1: Model::try_from(doc.stage1)?,
            k: doc.k,
            blocks: doc.blocks,
            block_bounds: doc.block_bounds,
            stage2: doc.stage2,
            assignment: doc.assignment,
        })
    }

    pub fn stage2_model(&self, j: usize) -> Model {
        let (w, b) = self.stage2[j];
        Model::linreg1d(w, b)
    }

    /// Key indices stage 2 model `j` is responsible for: its own block plus
    /// every key stage 1 routes to it, ascending.
    pub fn stage2_keys(&self, j: usize) -> Vec<usize> {
        let (a, b) = self.blocks[j];
        let mut idx: Vec<usize> = (0..self.assignment.len())
            .filter(|&i| (a..b).contains(&i) || self.assignment[i] == j)
            .collect();
        idx.dedup();
        idx
    }
}

/// Stage-1 output bounds for 1-based block `i`.
pub fn stage1_output_interval(i: usize, k: usize) -> (f64, f64) {
    (i.saturating_sub(1).max(1) as f64, (i + 1).min(k) as f64)
}

/// One property per block: keys in the block range map to within one block.
pub fn stage1_spec(rmi: &Rmi) -> Specification {
    let props = rmi
        .block_bounds
        .iter()
        .enumerate()
        .map(|(j, &(l, u))| {
            let (lo, hi) = stage1_output_interval(j + 1, rmi.k);
            let input = InputSet::Box(Hyperbox::new(vec![l as f64], vec![u as f64]).expect("ordered bounds"));
            let sat = SatisfactionFn::MinOfAffine(vec![
                AffineTerm::new(vec![1.0], -lo),
                AffineTerm::new(vec![-1.0], hi),
            ]);
            Property::new(format!("block{}", j + 1), input, sat)
        })
        .collect();
    Specification::new(props).expect("unique block names")
}

/// Input interval of the key at 0-based index `idx`: from just above the
/// previous key to just below the next, clamped to contain the key.
pub fn key_interval(keys: &[i64], idx: usize) -> (f64, f64) {
    let k = keys[idx];
    let prev = if idx == 0 { k } else { keys[idx - 1] };
    let next = if idx + 1 == keys.len() { k } else { keys[idx + 1] };
    ((prev + 1).min(k) as f64, (next - 1).max(k) as f64)
}

/// Split linear specification for stage-2 model `j`: for each key
/// `y − p + ε ≥ 0` and `p + ε − y ≥ 0` over its interval.
pub fn stage2_spec(rmi: &Rmi, ds: &IntegerDataset, j: usize, epsilon: f64) -> Result<Specification> {
    if j >= rmi.k {
        return Err(RmiError::Config(format!("block {j} out of range for K = {}", rmi.k)));
    }
    if !(epsilon > 0.0) {
        return Err(RmiError::Config("epsilon must be positive".into()));
    }
    let mut props = Vec::new();
    for idx in rmi.stage2_keys(j) {
        let (lo, hi) = key_interval(&ds.keys, idx);
        let p = IntegerDataset::position(idx);
        let input = InputSet::Box(Hyperbox::new(vec![lo], vec![hi])?);
        props.push(Property::new(
            format!("key{}#0", idx + 1),
            input.clone(),
            SatisfactionFn::affine(vec![1.0], epsilon - p),
        ));
        props.push(Property::new(
            format!("key{}#1", idx + 1),
            input,
            SatisfactionFn::affine(vec![-1.0], p + epsilon),
        ));
    }
    Ok(Specification::new(props).expect("unique key names"))
}

/// Checks a stage-2 line against its specification by plain endpoint
/// arithmetic on raw keys.
pub fn reverify_stage2(rmi: &Rmi, ds: &IntegerDataset, j: usize, epsilon: f64, w: f64, b: f64) -> bool {
    rmi.stage2_keys(j).into_iter().all(|idx| {
        let (lo, hi) = key_interval(&ds.keys, idx);
        let p = IntegerDataset::position(idx);
        [lo, hi].iter().all(|&x| {
            let y = w * x + b;
            y - p + epsilon >= 0.0 && p + epsilon - y >= 0.0
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Data augmentation and least-squares refit.
    Ouroboros,
    /// Penalty-function descent.
    SpecRepair,
    Qp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ouroboros, Method::SpecRepair, Method::Qp];

    pub fn id(self) -> &'static str {
        match self {
            Method::Ouroboros => "ouroboros",
            Method::SpecRepair => "specrepair",
            Method::Qp => "qp",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected ouroboros, specrepair or qp"))
    }
}

/// Published success rates in percent for ε = 100 and 150, by method.
pub const REFERENCE_RATES: [(f64, Method, f64); 6] = [
    (100.0, Method::Ouroboros, 30.0),
    (100.0, Method::SpecRepair, 58.0),
    (100.0, Method::Qp, 72.0),
    (150.0, Method::Ouroboros, 77.0),
    (150.0, Method::SpecRepair, 94.0),
    (150.0, Method::Qp, 97.0),
];

pub fn reference_rate(epsilon: f64, method: Method) -> Option<f64> {
    REFERENCE_RATES
        .iter()
        .find(|(e, m, _)| *e == epsilon && *m == method)
        .map(|r| r.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_rmis: usize,
    pub n_keys: usize,
    pub key_range: (i64, i64),
    pub k: usize,
    pub epsilons: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub train: TrainConfig,
    pub workers: usize,
    pub ouroboros_steps: usize,
    pub specrepair_steps: usize,
    /// 0 means unlimited.
    pub qp_steps: usize,
    pub penalty: PenaltyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_rmis: 20,
            n_keys: 20_000,
            key_range: (0, 1_000_000),
            k: 10,
            epsilons: vec![100.0, 150.0],
            methods: Method::ALL.to_vec(),
            seed: 0,
            train: TrainConfig::default(),
            workers: 1,
            ouroboros_steps: 5,
            specrepair_steps: 2,
            qp_steps: 0,
            penalty: PenaltyConfig {
                lr: 0.5,
                max_iters: 2000,
                ..PenaltyConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rmis == 0 || self.k < 2 || self.n_keys < self.k.max(2) {
            return Err(RmiError::Config("need at least one index, K ≥ 2 and n ≥ K keys".into()));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(RmiError::Config("epsilons must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(RmiError::Config("no methods selected".into()));
        }
        Ok(())
    }

    /// Seed of index `r`, from which its dataset and training streams derive.
    pub fn rmi_seed(&self, r: usize) -> u64 {
        seeds::derive_indexed(self.seed, "rmi", r as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub rmi_id: usize,
    pub block: usize,
    pub epsilon: f64,
    pub method: Method,
    /// Engine status, `error` when the run aborted, or `unverified` when the
    /// repaired line failed independent re-verification.
    pub status: String,
    pub repair_steps: usize,
    pub wall_ms: f64,
    pub final_mse: f64,
    pub num_keys: usize,
    pub final_params: (f64, f64),
}

impl CellResult {
    pub fn success(&self) -> bool {
        self.status == "repaired"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

/// Affine change of coordinates for one block: `u = (key − m)/s` and
/// `v = position − pm`, so the repair works on centred, unit-width data.
#[derive(Debug, Clone, Copy)]
struct Frame {
    m: f64,
    s: f64,
    pm: f64,
}

impl Frame {
    fn for_block(ds: &IntegerDataset, (a, b): (usize, usize)) -> Self {
        let lo = ds.keys[a] as f64;
        let hi = ds.keys[b - 1] as f64;
        let m = 0.5 * (lo + hi);
        let s = (0.5 * (hi - lo)).max(1.0);
        let pm = 0.5 * (IntegerDataset::position(a) + IntegerDataset::position(b - 1));
        Frame { m, s, pm }
    }

    fn u(&self, key: f64) -> f64 {
        (key - self.m) / self.s
    }

    fn to_local(&self, (w, b): (f64, f64)) -> (f64, f64) {
        (w * self.s, w * self.m + b - self.pm)
    }

    fn to_raw(&self, (w, b): (f64, f64)) -> (f64, f64) {
        let wr = w / self.s;
        (wr, b - wr * self.m + self.pm)
    }
}

fn block_mse(ds: &IntegerDataset, (a, b): (usize, usize), (w, c): (f64, f64)) -> f64 {
    let n = (b - a) as f64;
    (a..b)
        .map(|i| {
            let r = w * ds.keys[i] as f64 + c - IntegerDataset::position(i);
            r * r
        })
        .sum::<f64>()
        / n
}

/// Repairs one stage-2 model with one method.
pub fn run_cell(
    rmi: &Rmi,
    ds: &IntegerDataset,
    rmi_id: usize,
    j: usize,
    epsilon: f64,
    method: Method,
    cfg: &ExperimentConfig,
) -> CellResult {
    let start = Instant::now();
    let frame = Frame::for_block(ds, rmi.blocks[j]);
    let (a, b) = rmi.blocks[j];
    let keys = rmi.stage2_keys(j);

    // Local specification and labels.
    let mut props = Vec::with_capacity(2 * keys.len());
    let mut labels = Vec::with_capacity(2 * keys.len());
    for &idx in &keys {
        let (lo, hi) = key_interval(&ds.keys, idx);
        let v = IntegerDataset::position(idx) - frame.pm;
        let input = InputSet::Box(Hyperbox::new(vec![frame.u(lo)], vec![frame.u(hi)]).expect("ordered"));
        props.push(Property::new(
            format!("key{}#0", idx + 1),
            input.clone(),
            SatisfactionFn::affine(vec![1.0], epsilon - v),
        ));
        props.push(Property::new(
            format!("key{}#1", idx + 1),
            input,
            SatisfactionFn::affine(vec![-1.0], v + epsilon),
        ));
        labels.push(v);
        labels.push(v);
    }
    let inputs = (a..b).map(|i| vec![frame.u(ds.keys[i] as f64)]).collect();
    let targets = (a..b).map(|i| vec![IntegerDataset::position(i) - frame.pm]).collect();
    let (w0, b0) = frame.to_local(rmi.stage2[j]);
    let problem = RobustProblem::new(
        Model::linreg1d(w0, b0),
        Objective::mse(inputs, targets),
        Specification::new(props).expect("unique key names"),
    );

    let (remover, steps): (Arc<dyn Remover>, usize) = match method {
        Method::Ouroboros => {
            let labeler: Arc<Labeler> = Arc::new(move |k, _x| labels[k]);
            (Arc::new(AugmentLsqRemover { labeler }), cfg.ouroboros_steps)
        }
        Method::SpecRepair => (Arc::new(PenaltyRemover { cfg: cfg.penalty.clone() }), cfg.specrepair_steps),
        Method::Qp => (Arc::new(QpRemover::default()), cfg.qp_steps),
    };
    let verifier = Arc::new(VertexVerifier::new(SearchConfig::default()));
    let cgr = CgrConfig::new(vec![verifier], remover).with_max_steps(steps);

    let (status, repair_steps, raw) = match run_cgr(&problem, &cgr) {
        Ok((model, trace)) => {
            let local = model.as_linreg1d().expect("linear regression stays linear");
            let raw = frame.to_raw(local);
            let status = match trace.status {
                Status::Repaired if !reverify_stage2(rmi, ds, j, epsilon, raw.0, raw.1) => "unverified".into(),
                s => serde_json::to_value(s)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
            };
            (status, trace.repair_steps(), raw)
        }
        Err(e) => {
            if std::env::var_os("CGR_DEBUG").is_some() {
                eprintln!("rmi {rmi_id} block {j} eps {epsilon} {}: {e}", method.id());
            }
            ("error".to_string(), 0, rmi.stage2[j])
        }
    };
    CellResult {
        rmi_id,
        block: j,
        epsilon,
        method,
        status,
        repair_steps,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        final_mse: block_mse(ds, rmi.blocks[j], raw),
        num_keys: keys.len(),
        final_params: raw,
    }
}

/// Dataset and index number `r` of an experiment.
pub fn build_experiment_rmi(cfg: &ExperimentConfig, r: usize) -> Result<(IntegerDataset, Rmi)> {
    let ds = generate_dataset(cfg.rmi_seed(r), cfg.n_keys, cfg.key_range)?;
    let rmi = build_rmi(&ds, cfg.k, &cfg.train)?;
    Ok((ds, rmi))
}

/// Runs every (index, block, ε, method) cell. Cells are independent and run
/// on `cfg.workers` threads; results come back in a fixed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let built = par::map_range(cfg.num_rmis, cfg.workers, |r| build_experiment_rmi(cfg, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for r in 0..cfg.num_rmis {
        for j in 0..cfg.k {
            for &eps in &cfg.epsilons {
                for &m in &cfg.methods {
                    jobs.push((r, j, eps, m));
                }
            }
        }
    }
    let cells = par::map(&jobs, cfg.workers, |&(r, j, eps, m)| {
        let (ds, rmi) = &built[r];
        run_cell(rmi, ds, r, j, eps, m, cfg)
    });
    Ok(ExperimentReport {
        config: cfg.clone(),
        cells,
    })
}

impl ExperimentReport {
    pub fn successes(&self, epsilon: f64, method: Method) -> usize {
        self.cells
            .iter()
            .filter(|c| c.epsilon == epsilon && c.method == method && c.success())
            .count()
    }

    pub fn total(&self, epsilon: f64, method: Method) -> usize {
        self.cells
            .iter()
            .filter(|c| c.epsilon == epsilon && c.method == method)
            .count()
    }

    /// Cells where some method succeeded but QP did not.
    pub fn qp_dominance_violations(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for c in &self.cells {
            if c.method == Method::Qp || !c.success() {
                continue;
            }
            let qp = self.cells.iter().find(|q| {
                q.method == Method::Qp && q.rmi_id == c.rmi_id && q.block == c.block && q.epsilon == c.epsilon
            });
            if let Some(q) = qp {
                let key = (c.rmi_id, c.block, c.epsilon);
                if !q.success() && !out.contains(&key) {
                    out.push(key);
                }
            }
        }
        out
    }

    /// Average number of keys per stage-2 specification.
    pub fn mean_keys_per_model(&self) -> f64 {
        let eps = self.config.epsilons[0];
        let m = self.config.methods[0];
        let sel: Vec<_> = self.cells.iter().filter(|c| c.epsilon == eps && c.method == m).collect();
        sel.iter().map(|c| c.num_keys as f64).sum::<f64>() / sel.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# config {}",
            serde_json::to_string(&self.config).expect("config serialises")
        );
        out.push_str("rmi_id,block,epsilon,method,status,repair_steps,wall_ms,final_mse\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3},{}",
                c.rmi_id,
                c.block,
                c.epsilon,
                c.method.id(),
                c.status,
                c.repair_steps,
                c.wall_ms,
                c.final_mse
            );
        }
        out
    }

    /// Success rates per ε and method, with published rates alongside.
    pub fn summary(&self) -> String {
        let mut out = String::from("epsilon,method,successes,total,rate_percent,reference_percent\n");
        for &eps in &self.config.epsilons {
            for &m in &self.config.methods {
                let s = self.successes(eps, m);
                let t = self.total(eps, m);
                let reference = reference_rate(eps, m).map(|r| r.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{eps},{},{s},{t},{:.1},{reference}",
                    m.id(),
                    100.0 * s as f64 / t.max(1) as f64
                );
            }
        }
        out
    }
}
