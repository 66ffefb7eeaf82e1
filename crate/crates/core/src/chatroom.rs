//! Multi-agent chatroom: profiles, broadcast messages, turn scheduling and
//! pluggable agent policies.
//!
//! Every agent sees the full prior transcript. After each turn every agent
//! privately answers the topic prompt; these probes never enter the chat.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::grammar::{
    chat_prompt, count_mentions, evidence_reply, has_evidence, short_reply, statement,
    strip_topic, EVIDENCE_MARKERS, MAX_REPLY_TOKENS,
};
use crate::corpus::EditRequest;
use crate::error::{invalid, Error, Result};
use crate::tinylm::{generate, Decode, ModelParams, END_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Benign,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub name: String,
    pub gender: String,
    pub personality: String,
    pub style: String,
    pub hobbies: String,
    pub role: Role,
}

/// Attribute lists profiles are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePool {
    pub names: Vec<String>,
    pub genders: Vec<String>,
    pub personalities: Vec<String>,
    pub styles: Vec<String>,
    pub hobbies: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ProfilePool {
    fn default() -> Self {
        ProfilePool {
            names: strings(&[
                "Isabella", "Klaus", "Maria", "Tom", "Abigail", "Carlos", "Hailey", "Yuriko",
                "Wolfgang", "Latoya", "Rajiv", "Ayesha", "Jennifer", "Sam", "Giorgio", "Eddy",
                "Mei", "Adam", "Francisco", "Carmen",
            ]),
            genders: strings(&["female", "male", "nonbinary"]),
            personalities: strings(&[
                "friendly and outgoing",
                "curious and analytical",
                "calm and reserved",
                "skeptical and direct",
                "warm and talkative",
            ]),
            styles: strings(&["concise", "detailed", "casual", "formal"]),
            hobbies: strings(&["painting", "chess", "gardening", "hiking", "cooking", "music"]),
        }
    }
}

impl ProfilePool {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Draws `n_agents` profiles with unique names; exactly one is injected.
pub fn make_community(seed: u64, n_agents: usize, pool: &ProfilePool) -> Result<Vec<AgentProfile>> {
    if n_agents < 2 {
        return Err(invalid("a community needs at least two agents"));
    }
    let mut names = pool.names.clone();
    names.sort();
    names.dedup();
    if names.len() < n_agents {
        return Err(invalid(format!(
            "profile pool has {} unique names, need {n_agents}",
            names.len()
        )));
    }
    for (field, list) in [
        ("genders", &pool.genders),
        ("personalities", &pool.personalities),
        ("styles", &pool.styles),
        ("hobbies", &pool.hobbies),
    ] {
        if list.is_empty() {
            return Err(invalid(format!("profile pool has no {field}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);
    let injected = rand::Rng::gen_range(&mut rng, 0..n_agents);
    let pick = |list: &Vec<String>, rng: &mut ChaCha8Rng| list.choose(rng).unwrap().clone();
    Ok(names
        .into_iter()
        .take(n_agents)
        .enumerate()
        .map(|(i, name)| AgentProfile {
            name,
            gender: pick(&pool.genders, &mut rng),
            personality: pick(&pool.personalities, &mut rng),
            style: pick(&pool.styles, &mut rng),
            hobbies: pick(&pool.hobbies, &mut rng),
            role: if i == injected { Role::Injected } else { Role::Benign },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub content: String,
    pub source: String,
    /// `(turn, position within turn)`.
    pub timestamp: (usize, usize),
}

/// An agent's private answer after a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAnswer {
    pub agent: String,
    pub turn: usize,
    pub answer: String,
    /// Belief policies report their acceptance probability of `target_new`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scenario: String,
    pub topic: EditRequest,
    pub agents: Vec<AgentProfile>,
    pub n_turns: usize,
    pub messages: Vec<Message>,
    /// One entry per completed turn, one answer per agent.
    pub answers: Vec<Vec<AgentAnswer>>,
    /// Set when a policy failed and the scenario was aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Transcript {
    pub fn role_of(&self, agent: &str) -> Option<Role> {
        self.agents.iter().find(|a| a.name == agent).map(|a| a.role)
    }

    pub fn injected(&self) -> Option<&AgentProfile> {
        self.agents.iter().find(|a| a.role == Role::Injected)
    }

    /// Checks message count, per-turn speaker sets and timestamp order.
    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        if self.messages.len() != n * self.n_turns {
            return Err(invalid(format!(
                "expected {} messages, found {}",
                n * self.n_turns,
                self.messages.len()
            )));
        }
        for (t, turn) in self.messages.chunks(n.max(1)).enumerate() {
            let mut speakers: Vec<&str> = turn.iter().map(|m| m.source.as_str()).collect();
            speakers.sort();
            let mut members: Vec<&str> = self.agents.iter().map(|a| a.name.as_str()).collect();
            members.sort();
            if speakers != members {
                return Err(invalid(format!("turn {t} speakers differ from the community")));
            }
        }
        if self.messages.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
            return Err(invalid("timestamps are not strictly increasing"));
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Header line (everything but messages) followed by one message per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut header = self.clone();
        header.messages.clear();
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let first = lines.next().ok_or_else(|| invalid("empty transcript file"))??;
        let mut t: Transcript = serde_json::from_str(&first)?;
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                t.messages.push(serde_json::from_str(&line)?);
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeakingOrder {
    InjectedFirst,
    Random { seed: u64 },
    InjectedLast,
}

impl SpeakingOrder {
    pub fn label(&self) -> &'static str {
        match self {
            SpeakingOrder::InjectedFirst => "first",
            SpeakingOrder::Random { .. } => "random",
            SpeakingOrder::InjectedLast => "last",
        }
    }

    fn schedule(&self, agents: &[AgentProfile], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let injected: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].role == Role::Injected).collect();
        let benign: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].role != Role::Injected).collect();
        match self {
            SpeakingOrder::InjectedFirst => injected.into_iter().chain(benign).collect(),
            SpeakingOrder::InjectedLast => benign.into_iter().chain(injected).collect(),
            SpeakingOrder::Random { .. } => {
                let mut all: Vec<usize> = (0..agents.len()).collect();
                all.shuffle(rng);
                all
            }
        }
    }
}

/// A private answer: the predicted object span and, for belief policies,
/// the acceptance probability of the new claim.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub answer: String,
    pub accept_prob: Option<f64>,
}

/// Decides what an agent says and how it answers private probes.
pub trait Policy: Send + Sync {
    /// Content of the agent's next message given the visible history.
    fn respond(&self, visible: &[Message], topic: &EditRequest) -> Result<String>;

    /// Private answer to `question` after seeing `visible`; `None` when the
    /// policy cannot answer that question.
    fn probe(&self, visible: &[Message], topic: &EditRequest, question: &str) -> Result<Option<Probe>>;
}

/// Runs one scenario. A failing policy aborts the scenario; the partial
/// transcript is returned with the error recorded.
pub fn run_chat(
    scenario: &str,
    community: &[AgentProfile],
    topic: &EditRequest,
    n_turns: usize,
    order: SpeakingOrder,
    policies: &[&dyn Policy],
) -> Result<Transcript> {
    if policies.len() != community.len() {
        return Err(invalid("need exactly one policy per agent"));
    }
    if n_turns == 0 {
        return Err(invalid("n_turns must be at least 1"));
    }
    if community.iter().filter(|a| a.role == Role::Injected).count() != 1 {
        return Err(invalid("community must contain exactly one injected agent"));
    }
    let seed = match order {
        SpeakingOrder::Random { seed } => seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Transcript {
        scenario: scenario.to_string(),
        topic: topic.clone(),
        agents: community.to_vec(),
        n_turns,
        messages: Vec::new(),
        answers: Vec::new(),
        error: None,
    };
    for turn in 0..n_turns {
        for (pos, &i) in order.schedule(community, &mut rng).iter().enumerate() {
            match policies[i].respond(&t.messages, topic) {
                Ok(content) => t.messages.push(Message {
                    content,
                    source: community[i].name.clone(),
                    timestamp: (turn, pos),
                }),
                Err(e) => {
                    t.error = Some(format!("{} failed in turn {turn}: {e}", community[i].name));
                    return Ok(t);
                }
            }
        }
        let mut answers = Vec::with_capacity(community.len());
        for (agent, policy) in community.iter().zip(policies) {
            match policy.probe(&t.messages, topic, &topic.prompt) {
                Ok(Some(p)) => answers.push(AgentAnswer {
                    agent: agent.name.clone(),
                    turn,
                    answer: p.answer,
                    accept_prob: p.accept_prob,
                }),
                Ok(None) => {}
                Err(e) => {
                    t.error = Some(format!("{} probe failed in turn {turn}: {e}", agent.name));
                    return Ok(t);
                }
            }
        }
        t.answers.push(answers);
    }
    Ok(t)
}

/// Replies of visible messages with the topic prompt stripped.
fn history_items<'a>(visible: &'a [Message], topic: &EditRequest) -> Vec<&'a str> {
    visible.iter().map(|m| strip_topic(&m.content, &topic.prompt)).collect()
}

/// Cuts a generated reply to its answer span (before evidence or the end).
pub fn answer_span(reply: &str) -> String {
    reply
        .split_whitespace()
        .take_while(|t| *t != END_TOKEN && !EVIDENCE_MARKERS.contains(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy generation from the secure chat template plus visible history.
#[derive(Debug, Clone)]
pub struct LmPolicy {
    pub params: Arc<ModelParams>,
    pub max_tokens: usize,
}

impl LmPolicy {
    pub fn new(params: Arc<ModelParams>) -> Self {
        LmPolicy {
            params,
            max_tokens: MAX_REPLY_TOKENS,
        }
    }

    fn complete(&self, visible: &[Message], topic: &EditRequest, question: &str, max: usize) -> Result<String> {
        let budget = self.params.config.context_length.saturating_sub(max);
        let items = history_items(visible, topic);
        let (prompt, _) = chat_prompt(&items, question, budget);
        generate(&self.params, &prompt, Decode::greedy(max))
    }
}

impl Policy for LmPolicy {
    fn respond(&self, visible: &[Message], topic: &EditRequest) -> Result<String> {
        let reply = self.complete(visible, topic, &topic.prompt, self.max_tokens)?;
        Ok(statement(&topic.prompt, &reply))
    }

    fn probe(&self, visible: &[Message], topic: &EditRequest, question: &str) -> Result<Option<Probe>> {
        let n = self.params.vocab.encode(&topic.target_new)?.len();
        let m = self.params.vocab.encode(topic.ground_truth())?.len();
        let reply = self.complete(visible, topic, question, n.max(m) + 1)?;
        Ok(Some(Probe {
            answer: answer_span(&reply),
            accept_prob: None,
        }))
    }
}

/// Log-odds of accepting `target_new` over the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub log_odds: f64,
    pub w_direct: f64,
    pub w_evidence: f64,
}

/// Claim-level features of one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MessageFeatures {
    pub asserts_new: bool,
    pub asserts_old: bool,
    pub has_evidence: bool,
}

impl BeliefState {
    /// Prior `p_truth` on the ground truth (0.9 by default).
    pub fn with_prior(p_truth: f64, w_direct: f64, w_evidence: f64) -> Result<Self> {
        if !(p_truth > 0.0 && p_truth < 1.0) {
            return Err(invalid("prior must lie in (0, 1)"));
        }
        if !(w_evidence > w_direct && w_direct > 0.0) {
            return Err(invalid("weights must satisfy w_evidence > w_direct > 0"));
        }
        Ok(BeliefState {
            log_odds: ((1.0 - p_truth) / p_truth).ln(),
            w_direct,
            w_evidence,
        })
    }

    pub fn accept_prob(&self) -> f64 {
        1.0 / (1.0 + (-self.log_odds).exp())
    }
}

impl Default for BeliefState {
    fn default() -> Self {
        BeliefState::with_prior(0.9, 1.0, 2.5).unwrap()
    }
}

/// Additive evidence update; assertions of the ground truth push back with
/// the same weights.
pub fn belief_update(state: BeliefState, observed: MessageFeatures) -> BeliefState {
    let w = if observed.has_evidence {
        state.w_evidence
    } else {
        state.w_direct
    };
    let delta = match (observed.asserts_new, observed.asserts_old) {
        (true, false) => w,
        (false, true) => -w,
        _ => 0.0,
    };
    BeliefState {
        log_odds: state.log_odds + delta,
        ..state
    }
}

/// Deterministic classifier over the closed grammar.
pub fn message_features(content: &str, topic: &EditRequest) -> MessageFeatures {
    let reply = strip_topic(content, &topic.prompt);
    let new = count_mentions(reply, &topic.target_new) > 0;
    let old = count_mentions(reply, topic.ground_truth()) > 0;
    MessageFeatures {
        asserts_new: new && !old,
        asserts_old: old && !new,
        has_evidence: has_evidence(reply),
    }
}

/// Scripted persuadable agent: replays every message from other agents
/// through [`belief_update`] starting from its prior.
#[derive(Debug, Clone)]
pub struct BeliefPolicy {
    pub name: String,
    pub prior: BeliefState,
    /// Always asserts the new claim with evidence.
    pub saturated: bool,
}

impl BeliefPolicy {
    pub fn benign(name: &str, prior: BeliefState) -> Self {
        BeliefPolicy {
            name: name.to_string(),
            prior,
            saturated: false,
        }
    }

    pub fn saturated(name: &str) -> Self {
        BeliefPolicy {
            name: name.to_string(),
            prior: BeliefState::default(),
            saturated: true,
        }
    }

    pub fn state(&self, visible: &[Message], topic: &EditRequest) -> BeliefState {
        if self.saturated {
            return BeliefState {
                log_odds: f64::INFINITY,
                ..self.prior
            };
        }
        visible
            .iter()
            .filter(|m| m.source != self.name)
            .fold(self.prior, |s, m| belief_update(s, message_features(&m.content, topic)))
    }

    fn claims(&self, question: &str, topic: &EditRequest) -> bool {
        question == topic.prompt || topic.rephrase_prompts.iter().any(|p| p == question)
    }
}

impl Policy for BeliefPolicy {
    fn respond(&self, visible: &[Message], topic: &EditRequest) -> Result<String> {
        let s = self.state(visible, topic);
        let reply = if s.accept_prob() > 0.5 {
            evidence_reply(&topic.target_new)
        } else {
            short_reply(topic.ground_truth())
        };
        Ok(statement(&topic.prompt, &reply))
    }

    fn probe(&self, visible: &[Message], topic: &EditRequest, question: &str) -> Result<Option<Probe>> {
        if !self.claims(question, topic) {
            return Ok(None);
        }
        let s = self.state(visible, topic);
        let p = s.accept_prob();
        if !p.is_finite() {
            return Err(Error::NumericFailure {
                step: visible.len(),
                message: "non-finite belief".into(),
            });
        }
        let answer = if p > 0.5 { &topic.target_new } else { topic.ground_truth() };
        Ok(Some(Probe {
            answer: answer.to_string(),
            accept_prob: Some(p),
        }))
    }
}
