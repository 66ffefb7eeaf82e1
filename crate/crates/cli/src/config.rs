//! Experiment configuration: one JSON file, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spreadsim_core::chatroom::SpeakingOrder;
use spreadsim_core::editor::{EditConfig, FineTuneConfig};
use spreadsim_core::persuade::PersuadeConfig;
use spreadsim_core::tinylm::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub templates_per_relation: usize,
    /// Fraction of subjects whose prompts feed preference-pair collection.
    pub stage1_fraction: f64,
    /// Fraction of subjects held out for the capability probe.
    pub capability_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_entities: 50,
            n_relations: 5,
            templates_per_relation: 3,
            stage1_fraction: 0.4,
            capability_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMethod {
    /// Rank-one editing.
    Rome,
    FineTune,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub stage1: bool,
    pub persuade: PersuadeConfig,
    pub method: EditMethod,
    pub edit: EditConfig,
    pub finetune: FineTuneConfig,
    /// Distinct edit requests; `None` uses every fact of the edit subjects.
    pub n_edits: Option<usize>,
    pub n_locality: usize,
    /// Optional dataset file replacing the synthesized edits.
    pub dataset: Option<PathBuf>,
    /// Edits used to measure capability drift; `None` means all.
    pub capability_edits: Option<usize>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            stage1: true,
            persuade: PersuadeConfig::default(),
            method: EditMethod::Rome,
            edit: EditConfig::default(),
            finetune: FineTuneConfig::default(),
            n_edits: None,
            n_locality: 3,
            dataset: None,
            capability_edits: Some(40),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSpec {
    First,
    Random,
    Last,
}

impl OrderSpec {
    pub fn resolve(self, seed: u64) -> SpeakingOrder {
        match self {
            OrderSpec::First => SpeakingOrder::InjectedFirst,
            OrderSpec::Random => SpeakingOrder::Random { seed },
            OrderSpec::Last => SpeakingOrder::InjectedLast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenignPolicy {
    /// Benign agents run the unmodified base model.
    Lm,
    /// Scripted persuadable agents; the injected agent is saturated.
    Belief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeliefSpec {
    pub prior: f64,
    pub w_direct: f64,
    pub w_evidence: f64,
}

impl Default for BeliefSpec {
    fn default() -> Self {
        BeliefSpec {
            prior: 0.9,
            w_direct: 1.0,
            w_evidence: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunitySpec {
    pub n_agents: usize,
    pub n_turns: usize,
    pub order: OrderSpec,
    pub n_scenarios: usize,
    pub benign_policy: BenignPolicy,
    pub belief: BeliefSpec,
    /// Also run every scenario with an unattacked injected agent.
    pub control: bool,
    pub agent_grid: Vec<usize>,
    pub order_grid: Vec<OrderSpec>,
    /// Scenarios per ablation cell.
    pub grid_scenarios: usize,
    pub profile_pool: Option<PathBuf>,
}

impl Default for CommunitySpec {
    fn default() -> Self {
        CommunitySpec {
            n_agents: 5,
            n_turns: 3,
            order: OrderSpec::First,
            n_scenarios: 200,
            benign_policy: BenignPolicy::Lm,
            belief: BeliefSpec::default(),
            control: true,
            agent_grid: vec![2, 3, 5, 10],
            order_grid: vec![OrderSpec::First, OrderSpec::Random, OrderSpec::Last],
            grid_scenarios: 40,
            profile_pool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagSpec {
    pub train_ratio: f64,
    pub k_grid: Vec<usize>,
    pub split_seed: u64,
    /// Use the model's hidden states instead of the hashed bag.
    pub hidden_embedding: bool,
}

impl Default for RagSpec {
    fn default() -> Self {
        RagSpec {
            train_ratio: 0.8,
            k_grid: vec![1, 3, 5, 10],
            split_seed: 0,
            hidden_embedding: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub model: TrainConfig,
    pub attack: AttackSpec,
    pub community: CommunitySpec,
    pub rag: RagSpec,
    pub workers: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            world: WorldSpec::default(),
            model: TrainConfig::default(),
            attack: AttackSpec::default(),
            community: CommunitySpec::default(),
            rag: RagSpec::default(),
            workers: 1,
            output: PathBuf::from("runs/default"),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let w = &self.world;
        if w.n_entities < 4 || w.n_relations == 0 || w.templates_per_relation == 0 {
            return Err(bad("world needs at least 4 entities, 1 relation and 1 template"));
        }
        let f = w.stage1_fraction + w.capability_fraction;
        if !(w.stage1_fraction >= 0.0 && w.capability_fraction > 0.0 && f < 1.0) {
            return Err(bad("subject fractions must be non-negative and leave edit subjects"));
        }
        let c = &self.community;
        if c.n_agents < 2 || c.n_turns == 0 {
            return Err(bad("community needs at least 2 agents and 1 turn"));
        }
        if c.agent_grid.iter().any(|&n| n < 2) {
            return Err(bad("agent grid entries must be at least 2"));
        }
        let b = &c.belief;
        if !(b.prior > 0.0 && b.prior < 1.0 && b.w_evidence > b.w_direct && b.w_direct > 0.0) {
            return Err(bad("belief calibration needs prior in (0,1) and w_evidence > w_direct > 0"));
        }
        let r = &self.rag;
        if !(r.train_ratio > 0.0 && r.train_ratio < 1.0) {
            return Err(bad("rag.train_ratio must lie strictly between 0 and 1"));
        }
        if r.k_grid.is_empty() || r.k_grid.contains(&0) {
            return Err(bad("rag.k_grid must be nonempty with k >= 1"));
        }
        if self.workers == 0 {
            return Err(bad("workers must be at least 1"));
        }
        if let Some(p) = &self.attack.dataset {
            if !p.exists() {
                return Err(bad(format!("dataset {} does not exist", p.display())));
            }
        }
        if let Some(p) = &c.profile_pool {
            if !p.exists() {
                return Err(bad(format!("profile pool {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output location
    /// and worker count (neither affects results).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.workers = 1;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_and_workers() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = "elsewhere".into();
        b.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "community": {"n_agents": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.community.n_agents, 2);
        assert_eq!(c.community.n_turns, 3);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn invalid_ratio_rejected() {
        let mut c = ExperimentConfig::default();
        c.rag.train_ratio = 1.0;
        assert!(c.validate().is_err());
    }
}
