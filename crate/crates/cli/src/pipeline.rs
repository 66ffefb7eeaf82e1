//! The experiment stages. Each command reads its inputs from the output
//! directory, writes its artifacts there and records them in the manifest.
//! Nothing written depends on wall-clock time.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spreadsim_core::chatroom::{
    answer_span, make_community, run_chat, BeliefPolicy, BeliefState, LmPolicy, Policy, ProfilePool,
    Role, Transcript,
};
use spreadsim_core::corpus::grammar::{chat_prompt, MAX_REPLY_TOKENS};
use spreadsim_core::corpus::{
    fill_template, generate_world, load_edit_dataset, save_edit_dataset, DatasetSchema, EditRequest, World,
};
use spreadsim_core::editor::{edit_knowledge, fine_tune_edit, EditContext, EditReport};
use spreadsim_core::metrics::{
    accuracy, capability_probe, curve_csv, matches, mean_curve, spread_curve, Against, AnswerRecord,
    CurvePoint, MetricsReport, ProbeKind,
};
use spreadsim_core::persuade::{
    collect_preference_pairs, evaluate_pairs, merge_adapters, save_pairs, train_persuasiveness,
};
use spreadsim_core::ragstore::{answer_with_rag, build_index, Embedder};
use spreadsim_core::tinylm::{generate, recall_hits, train_lm, write_archive, Decode, ModelParams};

use crate::config::{BenignPolicy, EditMethod, ExperimentConfig, OrderSpec};
use crate::manifest::Manifest;
use crate::plot::line_plot;
use crate::CliError;

pub const WORLD: &str = "world.json";
pub const BASE_CKPT: &str = "base.ckpt";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const ATTACKED_CKPT: &str = "attacked.ckpt";
pub const EDITS: &str = "edits.json";
pub const TRANSCRIPTS: &str = "transcripts";
pub const CONTROL: &str = "control";

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, CliError> {
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(value)?)?;
    Ok(name.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Deterministic per-item seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [a, b] {
        h ^= x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

/// Runs `f(i)` for `i in 0..n` on `workers` threads; results keep index order.
pub fn par_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|x| x.unwrap()).collect()
}

/// Disjoint subject roles: preference-pair prompts, capability probe, edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub stage1: Vec<String>,
    pub capability: Vec<String>,
    pub edit: Vec<String>,
}

impl SubjectSplit {
    pub fn new(world: &World, cfg: &ExperimentConfig) -> Self {
        let mut subjects = world.entities.clone();
        subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0)));
        let n = subjects.len();
        let n1 = (cfg.world.stage1_fraction * n as f64).round() as usize;
        let n2 = ((cfg.world.capability_fraction * n as f64).round() as usize).max(1);
        let edit = subjects.split_off((n1 + n2).min(n - 1));
        let capability = subjects.split_off(n1);
        SubjectSplit {
            stage1: subjects,
            capability,
            edit,
        }
    }
}

/// Every template of every fact about `subjects`.
pub fn fact_prompts(world: &World, subjects: &[String]) -> Vec<(String, String)> {
    world
        .facts
        .iter()
        .filter(|f| subjects.contains(&f.subject))
        .flat_map(|f| {
            let r = world.relation_index(&f.relation).unwrap();
            world.templates[r]
                .iter()
                .map(|t| (fill_template(t, &f.subject), f.object.clone()))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Edits over the edit subjects' facts, in a seeded order.
pub fn synthesize_edits(world: &World, split: &SubjectSplit, cfg: &ExperimentConfig) -> Result<Vec<EditRequest>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, 0));
    let mut facts: Vec<_> = world.facts.iter().filter(|f| split.edit.contains(&f.subject)).collect();
    facts.shuffle(&mut rng);
    let n = cfg.attack.n_edits.unwrap_or(facts.len());
    if n > facts.len() {
        return Err(config_err(format!("{n} edits requested but only {} edit facts exist", facts.len())));
    }
    let mut out = Vec::with_capacity(n);
    for f in facts.into_iter().take(n) {
        let rel = &world.relations[world.relation_index(&f.relation).unwrap()];
        let choices: Vec<&String> = rel.objects.iter().filter(|o| **o != f.object).collect();
        let target = choices[rng.gen_range(0..choices.len())];
        out.push(world.make_edit(f, target, cfg.attack.n_locality, &mut rng)?);
    }
    Ok(out)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub vocab_size: usize,
    pub param_count: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub recall_accuracy: f64,
    /// Mean loss per 50-step window.
    pub loss_curve: Vec<f64>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let dir = &cfg.output;
    ensure_dir(dir)?;
    let w = &cfg.world;
    let world = generate_world(cfg.seed, w.n_entities, w.n_relations, w.templates_per_relation)?;
    world.save(&dir.join(WORLD))?;
    let started = std::time::Instant::now();
    let out = train_lm(&world, &cfg.model, cfg.seed)?;
    log::info!("training took {:.1}s", started.elapsed().as_secs_f64());
    out.params.save(&dir.join(BASE_CKPT))?;
    let summary = TrainSummary {
        vocab_size: out.params.vocab.len(),
        param_count: out.params.weights.param_count(),
        steps: out.losses.len(),
        final_loss: *out.losses.last().unwrap_or(&f64::NAN),
        recall_accuracy: out.recall_accuracy,
        loss_curve: out.losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect(),
    };
    let files = vec![WORLD.to_string(), BASE_CKPT.to_string(), write_json(dir, "train.json", &summary)?];
    Manifest::record(dir, cfg, "train", &files)?;
    Ok(summary)
}

/// Inputs shared by the later stages.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub base: Arc<ModelParams>,
    pub split: SubjectSplit,
}

impl Lab {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let dir = &cfg.output;
        let need = |name: &str| -> Result<PathBuf, CliError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(config_err(format!("{} missing; run `train` first", p.display())))
            }
        };
        let world = World::load(&need(WORLD)?)?;
        let base = Arc::new(ModelParams::load(&need(BASE_CKPT)?)?);
        let split = SubjectSplit::new(&world, cfg);
        Ok(Lab {
            cfg: cfg.clone(),
            world,
            base,
            split,
        })
    }

    pub fn from_parts(cfg: &ExperimentConfig, world: World, base: ModelParams) -> Self {
        let split = SubjectSplit::new(&world, cfg);
        Lab {
            cfg: cfg.clone(),
            world,
            base: Arc::new(base),
            split,
        }
    }

    pub fn edits(&self) -> Result<Vec<EditRequest>, CliError> {
        match &self.cfg.attack.dataset {
            Some(p) => Ok(load_edit_dataset(p, DatasetSchema::Counterfact)?),
            None => synthesize_edits(&self.world, &self.split, &self.cfg),
        }
    }

    pub fn capability_set(&self) -> Vec<(String, String)> {
        fact_prompts(&self.world, &self.split.capability)
    }
}

/// Attacker-side models: the (optionally persuasion-tuned) base and the
/// shared edit context.
pub struct Attacker {
    pub method: EditMethod,
    pub base: Arc<ModelParams>,
    pub ctx: Option<EditContext>,
    pub cfg: ExperimentConfig,
}

impl Attacker {
    pub fn new(lab: &Lab, base: Arc<ModelParams>) -> Result<Self, CliError> {
        let ctx = match lab.cfg.attack.method {
            EditMethod::Rome => Some(EditContext::from_world(&base, &lab.world, &lab.cfg.attack.edit)?),
            _ => None,
        };
        Ok(Attacker {
            method: lab.cfg.attack.method,
            base,
            ctx,
            cfg: lab.cfg.clone(),
        })
    }

    /// Loads the Stage I checkpoint written by `attack` when enabled.
    pub fn load(lab: &Lab) -> Result<Self, CliError> {
        let base = if lab.cfg.attack.stage1 {
            let p = lab.cfg.output.join(STAGE1_CKPT);
            if !p.exists() {
                return Err(config_err(format!("{} missing; run `attack` first", p.display())));
            }
            Arc::new(ModelParams::load(&p)?)
        } else {
            lab.base.clone()
        };
        Attacker::new(lab, base)
    }

    pub fn apply(&self, edit: &EditRequest) -> Result<(ModelParams, Option<EditReport>), CliError> {
        match self.method {
            EditMethod::Rome => {
                let (m, r, _) = edit_knowledge(&self.base, edit, &self.cfg.attack.edit, self.ctx.as_ref().unwrap())?;
                Ok((m, Some(r)))
            }
            EditMethod::FineTune => {
                let (m, r, _) = fine_tune_edit(&self.base, edit, &self.cfg.attack.finetune)?;
                Ok((m, Some(r)))
            }
            EditMethod::None => Ok(((*self.base).clone(), None)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub pairs: usize,
    pub steps: usize,
    pub margin: f64,
    pub loss: f64,
    pub reference_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapabilitySummary {
    pub note: String,
    pub probe_size: usize,
    pub base_recall: f64,
    pub stage1_recall: Option<f64>,
    pub stage2_recall_mean: Option<f64>,
    pub stage12_recall_mean: Option<f64>,
    pub drift_stage1: Option<f64>,
    pub drift_stage2: Option<f64>,
    pub drift_stage12: Option<f64>,
    pub edits_measured: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub method: EditMethod,
    pub stage1: Option<Stage1Summary>,
    pub n_edits: usize,
    pub efficacy: Option<f64>,
    pub rephrase: Option<f64>,
    pub locality_drift: Option<f64>,
    pub capability: CapabilitySummary,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean capability recall over edited models built from `attacker`.
fn edited_recall(attacker: &Attacker, edits: &[EditRequest], probe: &[(String, String)]) -> Result<Option<f64>, CliError> {
    if attacker.method == EditMethod::None {
        return Ok(None);
    }
    let mut rs = Vec::with_capacity(edits.len());
    for e in edits {
        let (m, _) = attacker.apply(e)?;
        rs.push(capability_probe(&m, probe)?.recall);
    }
    Ok(mean(&rs))
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<AttackSummary, CliError> {
    let lab = Lab::load(cfg)?;
    let dir = &cfg.output;
    let mut files = Vec::new();
    let edits = lab.edits()?;
    save_edit_dataset(&dir.join(EDITS), &edits)?;
    files.push(EDITS.to_string());

    let (attacker_base, stage1) = if cfg.attack.stage1 {
        let prompts: Vec<String> = fact_prompts(&lab.world, &lab.split.stage1).into_iter().map(|p| p.0).collect();
        let pairs = collect_preference_pairs(&lab.base, &prompts, Decode::greedy(MAX_REPLY_TOKENS + 2))?;
        save_pairs(&dir.join("pairs.jsonl"), &pairs)?;
        let reference_bytes = lab.base.to_archive().to_bytes();
        let out = train_persuasiveness(&lab.base, &pairs, &cfg.attack.persuade)?;
        write_archive(&dir.join("adapters.ckpt"), &out.adapters.to_archive())?;
        let merged = merge_adapters(&lab.base, &out.adapters)?;
        let (margin, loss) = evaluate_pairs(&merged, &lab.base, &pairs, cfg.attack.persuade.beta)?;
        merged.save(&dir.join(STAGE1_CKPT))?;
        files.extend(["pairs.jsonl", "adapters.ckpt", STAGE1_CKPT].map(String::from));
        let s = Stage1Summary {
            pairs: pairs.len(),
            steps: out.losses.len(),
            margin,
            loss,
            reference_unchanged: lab.base.to_archive().to_bytes() == reference_bytes,
        };
        (Arc::new(merged), Some(s))
    } else {
        (lab.base.clone(), None)
    };
    let attacker = Attacker::new(&lab, attacker_base.clone())?;

    let mut reports = String::new();
    let (mut eff, mut reph, mut loc) = (Vec::new(), Vec::new(), Vec::new());
    let mut first_attacked = None;
    for e in &edits {
        let (m, report) = attacker.apply(e)?;
        if let Some(r) = &report {
            eff.push(if r.success { 1.0 } else { 0.0 });
            loc.push(r.locality_drift);
            let pairs: Vec<(String, String)> = e
                .rephrase_prompts
                .iter()
                .map(|p| (p.clone(), e.target_new.clone()))
                .collect();
            if !pairs.is_empty() {
                reph.extend(recall_hits(&m, &pairs)?.into_iter().map(|h| if h { 1.0 } else { 0.0 }));
            }
            reports.push_str(&serde_json::to_string(r)?);
            reports.push('\n');
        }
        if first_attacked.is_none() {
            first_attacked = Some(m);
        }
    }
    std::fs::write(dir.join("reports.jsonl"), reports)?;
    files.push("reports.jsonl".into());
    first_attacked
        .unwrap_or_else(|| (*attacker_base).clone())
        .save(&dir.join(ATTACKED_CKPT))?;
    files.push(ATTACKED_CKPT.into());

    let probe = lab.capability_set();
    let n_cap = cfg.attack.capability_edits.unwrap_or(edits.len()).min(edits.len());
    let cap_edits = &edits[..n_cap];
    let base_recall = capability_probe(&lab.base, &probe)?.recall;
    let stage1_recall = match &stage1 {
        Some(_) => Some(capability_probe(&attacker_base, &probe)?.recall),
        None => None,
    };
    let plain = Attacker::new(&lab, lab.base.clone())?;
    let stage2 = edited_recall(&plain, cap_edits, &probe)?;
    let stage12 = match &stage1 {
        Some(_) => edited_recall(&attacker, cap_edits, &probe)?,
        None => None,
    };
    let drift = |r: Option<f64>| r.map(|r| (r - base_recall).abs());
    let capability = CapabilitySummary {
        note: "synthetic capability probe: recall on held-out world facts (benchmark substitute)".into(),
        probe_size: probe.len(),
        base_recall,
        stage1_recall,
        stage2_recall_mean: stage2,
        stage12_recall_mean: stage12,
        drift_stage1: drift(stage1_recall),
        drift_stage2: drift(stage2),
        drift_stage12: drift(stage12),
        edits_measured: n_cap,
    };
    let summary = AttackSummary {
        method: cfg.attack.method,
        stage1,
        n_edits: edits.len(),
        efficacy: mean(&eff),
        rephrase: mean(&reph),
        locality_drift: mean(&loc),
        capability,
    };
    files.push(write_json(dir, "attack.json", &summary)?);
    Manifest::record(dir, cfg, "attack", &files)?;
    Ok(summary)
}

/// Which injected agent a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Attack,
    Control,
}

/// Community shape for one batch of scenarios.
#[derive(Debug, Clone, Copy)]
pub struct RunShape {
    pub n_agents: usize,
    pub order: OrderSpec,
    pub n_scenarios: usize,
    /// Ask rephrase and locality probes after the chat.
    pub full_probes: bool,
}

pub struct ScenarioResult {
    pub transcript: Transcript,
    pub records: Vec<AnswerRecord>,
}

/// Final-turn main answers plus rephrase and locality probes with the
/// whole transcript visible.
pub fn scenario_records(t: &Transcript, policies: &[&dyn Policy], full: bool) -> Result<Vec<AnswerRecord>, CliError> {
    let topic = &t.topic;
    let mut out = Vec::new();
    let last = t.n_turns - 1;
    let rec = |agent: &str, role: Role, predicted: String, o_old: &str, o_new: &str, kind| AnswerRecord {
        scenario: t.scenario.clone(),
        agent: agent.to_string(),
        role,
        turn: last,
        predicted,
        o_old: o_old.to_string(),
        o_new: o_new.to_string(),
        kind,
    };
    for (agent, policy) in t.agents.iter().zip(policies) {
        if let Some(a) = t.answers.last().and_then(|ans| ans.iter().find(|a| a.agent == agent.name)) {
            out.push(rec(&agent.name, agent.role, a.answer.clone(), topic.ground_truth(), &topic.target_new, ProbeKind::Main));
        }
        if !full {
            continue;
        }
        for q in &topic.rephrase_prompts {
            if let Some(p) = policy.probe(&t.messages, topic, q)? {
                out.push(rec(&agent.name, agent.role, p.answer, topic.ground_truth(), &topic.target_new, ProbeKind::Rephrase));
            }
        }
        for l in &topic.locality_probes {
            if let Some(p) = policy.probe(&t.messages, topic, &l.prompt)? {
                out.push(rec(&agent.name, agent.role, p.answer, &l.answer, "", ProbeKind::Locality));
            }
        }
    }
    Ok(out)
}

pub struct Simulator<'a> {
    pub lab: &'a Lab,
    pub attacker: Option<&'a Attacker>,
    pub edits: &'a [EditRequest],
    pub pool: ProfilePool,
}

impl<'a> Simulator<'a> {
    pub fn new(lab: &'a Lab, attacker: Option<&'a Attacker>, edits: &'a [EditRequest]) -> Result<Self, CliError> {
        let pool = match &lab.cfg.community.profile_pool {
            Some(p) => ProfilePool::load(p)?,
            None => ProfilePool::default(),
        };
        Ok(Simulator {
            lab,
            attacker,
            edits,
            pool,
        })
    }

    /// Scenario `i`; ids are stable across arms and shapes.
    pub fn scenario(&self, i: usize, shape: RunShape, arm: Arm) -> Result<ScenarioResult, CliError> {
        let cfg = &self.lab.cfg;
        let topic = &self.edits[i % self.edits.len()];
        let community = make_community(mix(cfg.seed, 3, i as u64), shape.n_agents, &self.pool)?;
        let order = shape.order.resolve(mix(cfg.seed, 4, i as u64));
        let policies: Vec<Box<dyn Policy>> = match cfg.community.benign_policy {
            BenignPolicy::Lm => {
                let injected: Arc<ModelParams> = match (arm, self.attacker) {
                    (Arm::Attack, Some(a)) => Arc::new(a.apply(topic)?.0),
                    _ => self.lab.base.clone(),
                };
                community
                    .iter()
                    .map(|a| {
                        let p = if a.role == Role::Injected { injected.clone() } else { self.lab.base.clone() };
                        Box::new(LmPolicy::new(p)) as Box<dyn Policy>
                    })
                    .collect()
            }
            BenignPolicy::Belief => {
                let b = &cfg.community.belief;
                let prior = BeliefState::with_prior(b.prior, b.w_direct, b.w_evidence)?;
                community
                    .iter()
                    .map(|a| {
                        let p = if a.role == Role::Injected && arm == Arm::Attack {
                            BeliefPolicy::saturated(&a.name)
                        } else {
                            BeliefPolicy::benign(&a.name, prior)
                        };
                        Box::new(p) as Box<dyn Policy>
                    })
                    .collect()
            }
        };
        let refs: Vec<&dyn Policy> = policies.iter().map(|p| p.as_ref()).collect();
        let id = format!("s{i:05}");
        let transcript = run_chat(&id, &community, topic, cfg.community.n_turns, order, &refs)?;
        if let Some(e) = &transcript.error {
            return Err(CliError::Runtime(format!("scenario {id}: {e}")));
        }
        let records = scenario_records(&transcript, &refs, shape.full_probes)?;
        Ok(ScenarioResult { transcript, records })
    }

    /// Runs a batch; failures are returned alongside successes.
    pub fn run(&self, shape: RunShape, arm: Arm) -> (Vec<ScenarioResult>, Vec<String>) {
        if self.edits.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let results = par_map(self.lab.cfg.workers, shape.n_scenarios, |i| self.scenario(i, shape, arm));
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(r) => ok.push(r),
                Err(e) => {
                    log::warn!("scenario {i} failed: {e}");
                    failed.push(format!("s{i:05}: {e}"));
                }
            }
        }
        (ok, failed)
    }
}

/// Aggregates a batch into a report and its mean benign curve.
pub fn summarize(
    results: &[ScenarioResult],
    failed: Vec<String>,
    labels: (&str, &str, &str),
) -> Result<MetricsReport, CliError> {
    let records: Vec<AnswerRecord> = results.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let curves = results
        .iter()
        .map(|r| spread_curve(&r.transcript))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = MetricsReport::build(labels, results.len(), &records, mean_curve(&curves)?)?;
    report.failed_scenarios = failed;
    Ok(report)
}

fn curve_points(c: &[CurvePoint]) -> Vec<(f64, f64)> {
    c.iter().map(|p| ((p.turn + 1) as f64, p.accept_prob.unwrap_or(p.acc_new))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub n_agents: usize,
    pub order: OrderSpec,
    pub scenarios: usize,
    pub benign_acc_old: Option<f64>,
    pub benign_acc_new: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub attack: MetricsReport,
    pub control: Option<MetricsReport>,
    pub agent_grid: Vec<GridCell>,
    pub order_grid: Vec<GridCell>,
    pub capability: Option<CapabilitySummary>,
}

fn method_label(cfg: &ExperimentConfig) -> String {
    let m = match cfg.attack.method {
        EditMethod::Rome => "ours",
        EditMethod::FineTune => "fine-tuning",
        EditMethod::None => "no-edit",
    };
    if cfg.attack.stage1 || cfg.attack.method == EditMethod::None {
        m.to_string()
    } else {
        format!("{m} (w/o stage I)")
    }
}

fn save_transcripts(dir: &Path, results: &[ScenarioResult], files: &mut Vec<String>, root: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for r in results {
        let p = dir.join(format!("{}.jsonl", r.transcript.scenario));
        r.transcript.save_jsonl(&p)?;
        files.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
    }
    Ok(())
}

fn grid_cell(sim: &Simulator, shape: RunShape, label: String, failed: &mut Vec<String>) -> Result<GridCell, CliError> {
    let (res, f) = sim.run(shape, Arm::Attack);
    failed.extend(f.into_iter().map(|x| format!("{label}/{x}")));
    let report = summarize(&res, Vec::new(), ("", "", ""))?;
    Ok(GridCell {
        label,
        n_agents: shape.n_agents,
        order: shape.order,
        scenarios: res.len(),
        benign_acc_old: report.benign.acc_old,
        benign_acc_new: report.benign.acc_new,
        curve: report.curve,
    })
}

fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("label,n_agents,order,scenarios,benign_acc_old,benign_acc_new\n");
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for c in cells {
        s.push_str(&format!(
            "{},{},{:?},{},{},{}\n",
            c.label,
            c.n_agents,
            c.order,
            c.scenarios,
            f(c.benign_acc_old),
            f(c.benign_acc_new)
        ));
    }
    s.to_lowercase()
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary, CliError> {
    let lab = Lab::load(cfg)?;
    let dir = &cfg.output;
    let edits_path = dir.join(EDITS);
    if !edits_path.exists() {
        return Err(config_err(format!("{} missing; run `attack` first", edits_path.display())));
    }
    let edits = load_edit_dataset(&edits_path, DatasetSchema::Counterfact)?;
    let attacker = match (cfg.community.benign_policy, edits.is_empty()) {
        (BenignPolicy::Lm, false) => Some(Attacker::load(&lab)?),
        _ => None,
    };
    let sim = Simulator::new(&lab, attacker.as_ref(), &edits)?;
    let c = &cfg.community;
    let main = RunShape {
        n_agents: c.n_agents,
        order: c.order,
        n_scenarios: c.n_scenarios,
        full_probes: true,
    };
    let mut files = Vec::new();
    let mut failed_all = Vec::new();
    let method = method_label(cfg);
    let dataset = if cfg.attack.dataset.is_some() { "dataset" } else { "synthetic" };

    let (res, failed) = sim.run(main, Arm::Attack);
    failed_all.extend(failed.iter().cloned());
    let attack = summarize(&res, failed, ("tinylm", &method, dataset))?;
    save_transcripts(&dir.join(TRANSCRIPTS), &res, &mut files, dir)?;
    drop(res);
    files.push(write_json(dir, "metrics.json", &attack)?);
    std::fs::write(dir.join("metrics.csv"), attack.to_csv())?;
    std::fs::write(dir.join("curve.csv"), curve_csv(&attack.curve))?;
    files.extend(["metrics.csv", "curve.csv"].map(String::from));

    let control = if c.control {
        let (res, failed) = sim.run(main, Arm::Control);
        failed_all.extend(failed.iter().map(|f| format!("control/{f}")));
        let report = summarize(&res, failed, ("tinylm", "no attack", dataset))?;
        let cdir = dir.join(CONTROL);
        save_transcripts(&cdir.join(TRANSCRIPTS), &res, &mut files, dir)?;
        std::fs::write(cdir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
        std::fs::write(cdir.join("metrics.csv"), report.to_csv())?;
        files.extend(["control/metrics.json", "control/metrics.csv"].map(String::from));
        Some(report)
    } else {
        None
    };

    let mut series = vec![("attack".to_string(), curve_points(&attack.curve))];
    if let Some(r) = &control {
        series.push(("control".to_string(), curve_points(&r.curve)));
    }
    if !attack.curve.is_empty() {
        line_plot(&dir.join("curve.svg"), "benign spread per turn", &series)?;
        files.push("curve.svg".into());
    }

    let grid_n = c.grid_scenarios.min(c.n_scenarios.max(c.grid_scenarios));
    let mut agent_grid = Vec::new();
    let mut order_grid = Vec::new();
    if !edits.is_empty() {
        for &n in &c.agent_grid {
            let shape = RunShape {
                n_agents: n,
                order: c.order,
                n_scenarios: grid_n,
                full_probes: false,
            };
            agent_grid.push(grid_cell(&sim, shape, format!("agents={n}"), &mut failed_all)?);
        }
        for &o in &c.order_grid {
            let shape = RunShape {
                n_agents: c.n_agents,
                order: o,
                n_scenarios: grid_n,
                full_probes: false,
            };
            order_grid.push(grid_cell(&sim, shape, format!("order={o:?}").to_lowercase(), &mut failed_all)?);
        }
        for (name, cells) in [("ablation_agents", &agent_grid), ("ablation_order", &order_grid)] {
            if cells.is_empty() {
                continue;
            }
            std::fs::write(dir.join(format!("{name}.csv")), grid_csv(cells))?;
            let series: Vec<_> = cells.iter().map(|c| (c.label.clone(), curve_points(&c.curve))).collect();
            line_plot(&dir.join(format!("{name}.svg")), name, &series)?;
            files.extend([format!("{name}.csv"), format!("{name}.svg")]);
        }
    }

    let capability = dir
        .join("attack.json")
        .exists()
        .then(|| read_json::<AttackSummary>(&dir.join("attack.json")).map(|a| a.capability))
        .transpose()?;
    let summary = SimulateSummary {
        attack,
        control,
        agent_grid,
        order_grid,
        capability,
    };
    files.push(write_json(dir, "simulate.json", &summary)?);
    Manifest::record(dir, cfg, "simulate", &files)?;
    if !failed_all.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} scenario(s) failed; first: {}",
            failed_all.len(),
            failed_all[0]
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagRow {
    /// 0 is the no-retrieval baseline.
    pub k: usize,
    pub acc_old: f64,
    pub acc_new: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagSummary {
    pub indexed_scenarios: usize,
    pub indexed_slices: usize,
    pub eval_scenarios: Vec<String>,
    pub rows: Vec<RagRow>,
}

pub fn load_transcripts(dir: &Path) -> Result<Vec<Transcript>, CliError> {
    if !dir.exists() {
        return Err(config_err(format!("{} missing; run `simulate` first", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(Transcript::load_jsonl(p)?)).collect()
}

/// Retrieval-conditioned answers of the base model on withheld scenarios.
pub fn rag_eval(lab: &Lab, transcripts: &[Transcript]) -> Result<(RagSummary, spreadsim_core::ragstore::RagIndex), CliError> {
    let r = &lab.cfg.rag;
    let embedder = if r.hidden_embedding {
        Embedder::hidden(lab.base.clone())
    } else {
        Embedder::default()
    };
    let (index, eval) = build_index(transcripts, r.train_ratio, r.split_seed, embedder)?;
    let topics: Vec<&EditRequest> = eval
        .iter()
        .map(|id| &transcripts.iter().find(|t| &t.scenario == id).unwrap().topic)
        .collect();
    let base = &lab.base;
    let mut rows = Vec::new();
    for k in std::iter::once(0).chain(r.k_grid.iter().copied()) {
        let answers = par_map(lab.cfg.workers, topics.len(), |i| -> Result<String, CliError> {
            let q = &topics[i].prompt;
            let reply = if k == 0 {
                let budget = base.config.context_length.saturating_sub(MAX_REPLY_TOKENS);
                generate(base, &chat_prompt(&[], q, budget).0, Decode::greedy(MAX_REPLY_TOKENS))?
            } else {
                answer_with_rag(base, &index, q, k)?
            };
            Ok(answer_span(&reply))
        });
        let records = answers
            .into_iter()
            .zip(&topics)
            .map(|(a, t)| {
                Ok(AnswerRecord {
                    scenario: String::new(),
                    agent: "reader".into(),
                    role: Role::Benign,
                    turn: 0,
                    predicted: a?,
                    o_old: t.ground_truth().to_string(),
                    o_new: t.target_new.clone(),
                    kind: ProbeKind::Main,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        rows.push(RagRow {
            k,
            acc_old: accuracy(&records, Against::Old)?,
            acc_new: accuracy(&records, Against::New)?,
        });
    }
    let summary = RagSummary {
        indexed_scenarios: index.header.train_scenarios,
        indexed_slices: index.len(),
        eval_scenarios: eval,
        rows,
    };
    Ok((summary, index))
}

pub fn cmd_rag_eval(cfg: &ExperimentConfig) -> Result<RagSummary, CliError> {
    let lab = Lab::load(cfg)?;
    let dir = &cfg.output;
    let transcripts = load_transcripts(&dir.join(TRANSCRIPTS))?;
    if transcripts.len() < 2 {
        return Err(config_err("rag-eval needs at least two transcripts"));
    }
    let (summary, index) = rag_eval(&lab, &transcripts)?;
    index.save_jsonl(&dir.join("rag_index.jsonl"))?;
    let mut csv = String::from("setting,k,acc_old,acc_new\n");
    for r in &summary.rows {
        let setting = if r.k == 0 { "no retrieval".to_string() } else { format!("top {}", r.k) };
        csv.push_str(&format!("{setting},{},{},{}\n", r.k, r.acc_old, r.acc_new));
    }
    std::fs::write(dir.join("rag.csv"), csv)?;
    let files = vec![
        "rag_index.jsonl".to_string(),
        "rag.csv".to_string(),
        write_json(dir, "rag.json", &summary)?,
    ];
    Manifest::record(dir, cfg, "rag-eval", &files)?;
    Ok(summary)
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

/// Markdown summary of whatever stages have run.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let dir = &cfg.output;
    if !dir.exists() {
        return Err(config_err(format!("{} does not exist", dir.display())));
    }
    let mut md = String::from("# Experiment report\n\n");
    md.push_str(&format!("config hash `{}`, seed {}\n\n", cfg.hash(), cfg.seed));
    if let Ok(t) = read_json::<TrainSummary>(&dir.join("train.json")) {
        md.push_str(&format!(
            "## Model\n\n{} parameters, vocabulary {}, {} steps, final loss {:.4}, fact recall {}%\n\n",
            t.param_count,
            t.vocab_size,
            t.steps,
            t.final_loss,
            pct(Some(t.recall_accuracy))
        ));
    }
    if let Ok(a) = read_json::<AttackSummary>(&dir.join("attack.json")) {
        md.push_str("## Attack\n\n");
        if let Some(s) = &a.stage1 {
            md.push_str(&format!(
                "Stage I: {} pairs, {} steps, margin {:.3}, loss {:.4}, reference unchanged: {}\n\n",
                s.pairs, s.steps, s.margin, s.loss, s.reference_unchanged
            ));
        }
        md.push_str(&format!(
            "Stage II ({:?}) over {} edits: efficacy {}%, rephrase {}%, locality change {}%\n\n",
            a.method,
            a.n_edits,
            pct(a.efficacy),
            pct(a.rephrase),
            pct(a.locality_drift)
        ));
        let c = &a.capability;
        md.push_str(&format!(
            "Capability probe ({} prompts; {}): base {}%, drift stage I {}, stage II {}, stage I+II {} (points)\n\n",
            c.probe_size,
            c.note,
            pct(Some(c.base_recall)),
            pct(c.drift_stage1),
            pct(c.drift_stage2),
            pct(c.drift_stage12)
        ));
    }
    if let Ok(s) = read_json::<SimulateSummary>(&dir.join("simulate.json")) {
        md.push_str("## Spread\n\n| run | class | acc old | acc new | rephrase | locality |\n|---|---|---|---|---|---|\n");
        let mut rows = vec![(&s.attack.method, &s.attack)];
        if let Some(c) = &s.control {
            rows.push((&c.method, c));
        }
        for (name, r) in rows {
            for (class, set) in [("injected", &r.injected), ("benign", &r.benign)] {
                md.push_str(&format!(
                    "| {name} | {class} | {} | {} | {} | {} |\n",
                    pct(set.acc_old),
                    pct(set.acc_new),
                    pct(set.rephrase),
                    pct(set.locality)
                ));
            }
        }
        md.push_str("\nBenign acc new per turn (attack): ");
        md.push_str(&s.attack.curve.iter().map(|p| pct(Some(p.acc_new))).collect::<Vec<_>>().join(", "));
        md.push_str("\n\n| ablation | scenarios | benign acc new |\n|---|---|---|\n");
        for c in s.agent_grid.iter().chain(&s.order_grid) {
            md.push_str(&format!("| {} | {} | {} |\n", c.label, c.scenarios, pct(c.benign_acc_new)));
        }
        md.push('\n');
    }
    if let Ok(r) = read_json::<RagSummary>(&dir.join("rag.json")) {
        md.push_str(&format!(
            "## Retrieval persistence\n\n{} indexed scenarios, {} withheld\n\n| k | acc old | acc new |\n|---|---|---|\n",
            r.indexed_scenarios,
            r.eval_scenarios.len()
        ));
        for row in &r.rows {
            md.push_str(&format!("| {} | {} | {} |\n", row.k, pct(Some(row.acc_old)), pct(Some(row.acc_new))));
        }
    }
    std::fs::write(dir.join("report.md"), &md)?;
    Manifest::record(dir, cfg, "report", &["report.md".to_string()])?;
    Ok(md)
}

/// Exact match of the answer span, for callers outside the metrics module.
pub fn answer_matches(answer: &str, target: &str) -> bool {
    matches(answer, target)
}
