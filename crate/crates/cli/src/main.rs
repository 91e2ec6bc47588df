mod config;

use cgr_core::engine::{run_cgr, CgrConfig, RobustProblem, Status};
use cgr_core::model::Model;
use cgr_core::pathology::{run_case, Case, EarlyExitMode};
use cgr_core::removal::{remover_from_name, Objective};
use cgr_core::rmi::{
    build_rmi, generate_dataset, run_experiment, stage1_spec, stage2_spec, IntegerDataset, Method, Rmi,
};
use cgr_core::search::{searcher_from_name, Mode, Outcome, Searcher};
use cgr_core::spec::Specification;
use clap::{Args, Parser, Subcommand};
use config::{parse_list, RunConfig};
use serde_json::{json, Value};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

const EXIT_OK: u8 = 0;
const EXIT_VIOLATED: u8 = 1;
const EXIT_UNKNOWN: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_IO: u8 = 74;

#[derive(Debug)]
pub struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    pub fn usage(msg: impl Into<String>) -> Self {
        Fail { code: EXIT_USAGE, msg: msg.into() }
    }

    fn io(msg: impl Into<String>) -> Self {
        Fail { code: EXIT_IO, msg: msg.into() }
    }
}

#[derive(Parser)]
#[command(name = "cgr", version, about = "Counterexample-guided repair of models against input-output properties")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check every property of a specification.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated cascade, e.g. `bim,bab:early`.
        #[arg(long)]
        searcher: Option<String>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Repair a model until every property is verified.
    Repair {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        searcher: Option<String>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// `penalty` or `qp`.
        #[arg(long)]
        remover: Option<String>,
        /// 0 means unlimited.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Seconds.
        #[arg(long)]
        time_budget: Option<f64>,
        /// JSON-lines trace of every step.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Where the repaired model goes.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce the iterates of one of the divergence cases.
    Pathology {
        #[arg(value_parser = parse_case)]
        case: Case,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value = "scripted", value_parser = parse_early_mode)]
        mode: EarlyExitMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learned-index workflow.
    Rmi {
        #[command(subcommand)]
        cmd: RmiCmd,
    },
}

#[derive(Subcommand)]
enum RmiCmd {
    /// Generate a sorted integer key dataset.
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        min: Option<i64>,
        #[arg(long, allow_hyphen_values = true)]
        max: Option<i64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a two-stage index on a dataset.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the specification (and model) of one index component.
    Spec {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stage-2 block, 0-based.
        #[arg(long, required_unless_present = "stage1")]
        block: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// The stage-1 routing specification instead of a block.
        #[arg(long, conflicts_with = "block")]
        stage1: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Repair every stage-2 model of a batch of indexes with each method.
    Experiment {
        #[arg(long)]
        num_rmis: Option<usize>,
        #[arg(long)]
        n_keys: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated.
        #[arg(long)]
        epsilons: Option<String>,
        /// Comma-separated: ouroboros, specrepair, qp.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "optimal" => Ok(Mode::Optimal),
        "early" | "early_exit" | "early-exit" => Ok(Mode::EarlyExit),
        _ => Err(format!("unknown mode {s:?}; expected optimal or early")),
    }
}

fn parse_case(s: &str) -> Result<Case, String> {
    s.parse()
}

fn parse_early_mode(s: &str) -> Result<EarlyExitMode, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("cgr: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Fail> {
    match cli.cmd {
        Cmd::Verify { model, spec, searcher, mode, out, common } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.searcher, searcher);
            set(&mut cfg.mode, mode);
            verify(&cfg, &model, &spec, out.as_deref())
        }
        Cmd::Repair { model, spec, searcher, mode, remover, max_steps, time_budget, trace, out, common } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.searcher, searcher);
            set(&mut cfg.mode, mode);
            set(&mut cfg.remover, remover);
            set(&mut cfg.max_repair_steps, max_steps);
            if time_budget.is_some() {
                cfg.time_budget = time_budget;
            }
            repair(&cfg, &model, &spec, trace.as_deref(), out.as_deref())
        }
        Cmd::Pathology { case, steps, mode, out } => {
            let table = run_case(case, steps, mode).map_err(|e| Fail::usage(e.to_string()))?;
            let mode_id = match mode {
                EarlyExitMode::Scripted => "scripted",
                EarlyExitMode::Optimal => "optimal",
            };
            let header = json!({"case": case.id(), "steps": steps, "mode": mode_id});
            let text = format!("# config {header}\n{}", table.to_csv());
            emit(out.as_deref(), &text)?;
            Ok(EXIT_OK)
        }
        Cmd::Rmi { cmd } => rmi(cmd),
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.workers, common.workers);
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read(path: &Path) -> Result<String, Fail> {
    std::fs::read_to_string(path).map_err(|e| Fail::io(format!("cannot read {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Fail> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Fail::io(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<Model, Fail> {
    Model::from_json(&read(path)?).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<Specification, Fail> {
    Specification::from_json(&read(path)?).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn cascade(cfg: &RunConfig) -> Result<Vec<Arc<dyn Searcher>>, Fail> {
    let scfg = cfg.search_config();
    cfg.searcher
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| searcher_from_name(name, &scfg).map_err(|e| Fail::usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|c| {
            if c.is_empty() {
                Err(Fail::usage("empty searcher cascade"))
            } else {
                Ok(c)
            }
        })
}

fn verify(cfg: &RunConfig, model: &Path, spec: &Path, out: Option<&Path>) -> Result<u8, Fail> {
    let model = load_model(model)?;
    let spec = load_spec(spec)?;
    spec.check_model(&model).map_err(|e| Fail::usage(e.to_string()))?;
    let cascade = cascade(cfg)?;

    let mut results = Vec::new();
    let mut code = EXIT_OK;
    for prop in spec.properties() {
        let mut status = "unknown";
        let mut x = Value::Null;
        let mut value = Value::Null;
        let mut by = String::new();
        for s in &cascade {
            let r = s
                .search(&model, prop)
                .map_err(|e| Fail::usage(format!("{} on {}: {e}", s.name(), prop.name)))?;
            by = s.name();
            match r.outcome {
                Outcome::Counterexample { x: cx, value: v } => {
                    status = "counterexample";
                    x = json!(cx);
                    value = json!(v);
                    break;
                }
                Outcome::Verified { lower_bound } if s.is_complete() => {
                    status = "verified";
                    value = json!(lower_bound);
                    break;
                }
                Outcome::Unknown { lower_bound } | Outcome::Verified { lower_bound } => {
                    if lower_bound.is_finite() {
                        value = json!(lower_bound);
                    }
                }
            }
        }
        code = match (status, code) {
            ("counterexample", _) | (_, EXIT_VIOLATED) => EXIT_VIOLATED,
            ("unknown", _) => EXIT_UNKNOWN,
            _ => code,
        };
        results.push(json!({"property": prop.name, "status": status, "x": x, "value": value, "searcher": by}));
    }
    let count = |st: &str| results.iter().filter(|r| r["status"] == st).count();
    eprintln!(
        "{} verified, {} counterexamples, {} unknown",
        count("verified"),
        count("counterexample"),
        count("unknown")
    );
    let doc = json!({"config": cfg, "results": results});
    emit(out, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))?;
    Ok(code)
}

fn repair(cfg: &RunConfig, model: &Path, spec: &Path, trace: Option<&Path>, out: Option<&Path>) -> Result<u8, Fail> {
    let model = load_model(model)?;
    let spec = load_spec(spec)?;
    spec.check_model(&model).map_err(|e| Fail::usage(e.to_string()))?;
    let objective = cfg
        .objective
        .clone()
        .unwrap_or_else(|| Objective::ParamDistanceSq { theta0: model.param_vec() });
    let mut problem = RobustProblem::new(model, objective, spec);
    problem.trainable = cfg.trainable.clone();

    let remover = remover_from_name(&cfg.remover, cfg.penalty_config(), None).map_err(|e| Fail::usage(e.to_string()))?;
    let ccfg = CgrConfig {
        max_repair_steps: cfg.max_repair_steps,
        time_budget: cfg.time_budget.map(Duration::from_secs_f64),
        termination_threshold: cfg.termination_threshold,
        satisfaction_constant: cfg.satisfaction_constant,
        ..CgrConfig::new(cascade(cfg)?, remover)
    };
    ccfg.validate().map_err(|e| Fail::usage(e.to_string()))?;

    let (repaired, tr) = run_cgr(&problem, &ccfg).map_err(|e| Fail::usage(e.to_string()))?;
    if let Some(path) = trace {
        let f = File::create(path).map_err(|e| Fail::io(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        let io = |e: std::io::Error| Fail::io(format!("cannot write {}: {e}", path.display()));
        writeln!(w, "{}", json!({"record": "config", "config": cfg})).map_err(io)?;
        tr.write_jsonl(&mut w, true).map_err(io)?;
        w.flush().map_err(io)?;
    }
    let status = serde_json::to_value(tr.status).expect("json");
    eprintln!(
        "status: {} after {} repair steps, {} searcher calls",
        status.as_str().unwrap_or("?"),
        tr.repair_steps(),
        tr.searcher_calls
    );
    match tr.status {
        Status::Repaired => {
            emit(out, &format!("{}\n", repaired.to_json()))?;
            Ok(EXIT_OK)
        }
        Status::RemovalFailed | Status::StepLimit => Ok(EXIT_VIOLATED),
        Status::Timeout | Status::VerifierInconclusive => Ok(EXIT_UNKNOWN),
    }
}

fn load_dataset(path: &Path, seed: u64) -> Result<IntegerDataset, Fail> {
    let f = File::open(path).map_err(|e| Fail::io(format!("cannot read {}: {e}", path.display())))?;
    IntegerDataset::read_from(BufReader::new(f), seed).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

/// Accepts both `{config, index}` as written by `rmi build` and a bare index.
fn load_index(path: &Path) -> Result<Rmi, Fail> {
    let text = read(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?;
    let inner = match doc.get("index") {
        Some(v) => v.to_string(),
        None => text,
    };
    Rmi::from_json(&inner).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn rmi(cmd: RmiCmd) -> Result<u8, Fail> {
    match cmd {
        RmiCmd::Gen { n, min, max, out, common } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.n_keys, n);
            set(&mut cfg.key_min, min);
            set(&mut cfg.key_max, max);
            let ds = generate_dataset(cfg.seed, cfg.n_keys, (cfg.key_min, cfg.key_max))
                .map_err(|e| Fail::usage(e.to_string()))?;
            let mut buf = format!("# config {}\n", cfg.to_json()).into_bytes();
            ds.write_to(&mut buf).expect("in-memory write");
            std::fs::write(&out, buf).map_err(|e| Fail::io(format!("cannot write {}: {e}", out.display())))?;
            Ok(EXIT_OK)
        }
        RmiCmd::Build { data, k, epochs, out, common } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.k, k);
            set(&mut cfg.epochs, epochs);
            let ds = load_dataset(&data, cfg.seed)?;
            let index = build_rmi(&ds, cfg.k, &cfg.train_config()).map_err(|e| Fail::usage(e.to_string()))?;
            let index: Value = serde_json::from_str(&index.to_json()).expect("index json");
            let doc = json!({"config": cfg, "index": index});
            emit(Some(&out), &format!("{doc}\n"))?;
            Ok(EXIT_OK)
        }
        RmiCmd::Spec { index, data, block, epsilon, stage1, out, model_out, common } => {
            let cfg = resolve(&common)?;
            let rmi = load_index(&index)?;
            let (spec, model) = if stage1 {
                (stage1_spec(&rmi), rmi.stage1.clone())
            } else {
                let j = block.expect("clap enforces --block");
                if j >= rmi.k {
                    return Err(Fail::usage(format!("block {j} out of range; the index has {}", rmi.k)));
                }
                let eps = epsilon.or_else(|| cfg.epsilons.first().copied()).unwrap_or(100.0);
                let ds = load_dataset(&data, cfg.seed)?;
                let spec = stage2_spec(&rmi, &ds, j, eps).map_err(|e| Fail::usage(e.to_string()))?;
                (spec, rmi.stage2_model(j))
            };
            emit(Some(&out), &format!("{}\n", spec.to_json()))?;
            if let Some(p) = model_out {
                emit(Some(&p), &format!("{}\n", model.to_json()))?;
            }
            Ok(EXIT_OK)
        }
        RmiCmd::Experiment { num_rmis, n_keys, k, epsilons, methods, epochs, out, common } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.num_rmis, num_rmis);
            set(&mut cfg.n_keys, n_keys);
            set(&mut cfg.k, k);
            set(&mut cfg.epochs, epochs);
            if let Some(e) = epsilons {
                cfg.epsilons = parse_list::<f64>(&e).map_err(Fail::usage)?;
            }
            if let Some(m) = methods {
                cfg.methods = parse_list::<Method>(&m).map_err(Fail::usage)?;
            }
            let ecfg = cfg.experiment_config();
            ecfg.validate().map_err(|e| Fail::usage(e.to_string()))?;
            let report = run_experiment(&ecfg).map_err(|e| Fail::usage(e.to_string()))?;
            if let Some(p) = out.as_deref() {
                emit(Some(p), &report.to_csv())?;
            }
            print!("{}", report.summary());
            Ok(EXIT_OK)
        }
    }
}
