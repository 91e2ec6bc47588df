//! Run configuration: defaults, then the config file, then flags.

use crate::Fail;
use cgr_core::removal::{Objective, PenaltyConfig};
use cgr_core::rmi::{ExperimentConfig, Method, TrainConfig};
use cgr_core::search::{Mode, SearchConfig};
use cgr_core::seeds;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Comma-separated cascade; falsifiers first.
    pub searcher: String,
    /// Mode for searchers named without one (`bab`, `vertex`).
    pub mode: Mode,
    pub remover: String,
    /// 0 means unlimited.
    pub max_repair_steps: usize,
    /// Seconds.
    pub time_budget: Option<f64>,
    pub termination_threshold: f64,
    pub satisfaction_constant: f64,
    pub seed: u64,
    pub workers: usize,

    pub tolerance: f64,
    pub max_nodes: usize,
    pub restarts: usize,
    pub bim_iterations: usize,
    pub bim_step: f64,

    pub penalty_lr: f64,
    pub penalty_max_iters: usize,
    pub penalty_initial_weight: f64,

    /// Defaults to the squared distance from the initial parameters.
    pub objective: Option<Objective>,
    pub trainable: Option<Vec<usize>>,

    pub num_rmis: usize,
    pub n_keys: usize,
    pub key_min: i64,
    pub key_max: i64,
    pub k: usize,
    pub epsilons: Vec<f64>,
    pub methods: Vec<Method>,
    pub epochs: usize,
    pub train_lr: f64,
    pub batch_size: usize,
    pub ouroboros_steps: usize,
    pub specrepair_steps: usize,
    pub qp_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let exp = ExperimentConfig::default();
        let penalty = PenaltyConfig::default();
        RunConfig {
            searcher: "vertex".into(),
            mode: Mode::Optimal,
            remover: "penalty".into(),
            max_repair_steps: 100,
            time_budget: None,
            termination_threshold: 0.0,
            satisfaction_constant: cgr_core::spec::SATISFACTION_CONSTANT,
            seed: 0,
            workers: 1,
            tolerance: search.tolerance,
            max_nodes: search.max_nodes,
            restarts: search.restarts,
            bim_iterations: search.bim_iterations,
            bim_step: search.bim_step,
            penalty_lr: penalty.lr,
            penalty_max_iters: penalty.max_iters,
            penalty_initial_weight: penalty.initial_weight,
            objective: None,
            trainable: None,
            num_rmis: exp.num_rmis,
            n_keys: exp.n_keys,
            key_min: exp.key_range.0,
            key_max: exp.key_range.1,
            k: exp.k,
            epsilons: exp.epsilons,
            methods: exp.methods,
            epochs: exp.train.epochs,
            train_lr: exp.train.lr,
            batch_size: exp.train.batch_size,
            ouroboros_steps: exp.ouroboros_steps,
            specrepair_steps: exp.specrepair_steps,
            qp_steps: exp.qp_steps,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Fail> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Fail::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Fail::usage(format!("config {}: {e}", path.display())))
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            mode: self.mode,
            tolerance: self.tolerance,
            max_nodes: self.max_nodes,
            time_budget: self.time_budget,
            rng_seed: seeds::derive(self.seed, "falsifier"),
            restarts: self.restarts,
            workers: self.workers,
            bim_iterations: self.bim_iterations,
            bim_step: self.bim_step,
            ..SearchConfig::default()
        }
    }

    pub fn penalty_config(&self) -> PenaltyConfig {
        PenaltyConfig {
            lr: self.penalty_lr,
            max_iters: self.penalty_max_iters,
            initial_weight: self.penalty_initial_weight,
            ..PenaltyConfig::default()
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            num_rmis: self.num_rmis,
            n_keys: self.n_keys,
            key_range: (self.key_min, self.key_max),
            k: self.k,
            epsilons: self.epsilons.clone(),
            methods: self.methods.clone(),
            seed: self.seed,
            train: self.train_config(),
            workers: self.workers,
            ouroboros_steps: self.ouroboros_steps,
            specrepair_steps: self.specrepair_steps,
            qp_steps: self.qp_steps,
            penalty: base.penalty,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.train_lr,
            batch_size: self.batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// Comma-separated list parsed element by element.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"remover": "qp", "k": 4}"#).unwrap();
        assert_eq!(cfg.remover, "qp");
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.searcher, RunConfig::default().searcher);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lists_parse_each_element() {
        assert_eq!(parse_list::<f64>("100, 150").unwrap(), vec![100.0, 150.0]);
        assert_eq!(parse_list::<Method>("qp,ouroboros").unwrap(), vec![Method::Qp, Method::Ouroboros]);
        assert!(parse_list::<Method>("qp,nope").is_err());
    }

    #[test]
    fn falsifier_seed_is_derived_from_the_master_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() }.search_config();
        let b = RunConfig { seed: 2, ..RunConfig::default() }.search_config();
        assert_ne!(a.rng_seed, b.rng_seed);
        assert_eq!(a.rng_seed, seeds::derive(1, "falsifier"));
    }
}
