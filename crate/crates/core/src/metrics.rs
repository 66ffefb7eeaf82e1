//! Answer matching, the four edit/spread rates, per-turn spread curves and
//! the capability probe.
//!
//! The capability probe is a synthetic stand-in for a general benchmark:
//! recall and NLL on held-out world facts.

use serde::{Deserialize, Serialize};

use crate::chatroom::{Role, Transcript};
use crate::error::{invalid, Result};
use crate::tinylm::{answer_logprob, recall_hits, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Main,
    Rephrase,
    Locality,
}

/// One scored answer. For locality probes `o_old` holds the unchanged
/// neighbouring answer and `o_new` is unused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub scenario: String,
    pub agent: String,
    pub role: Role,
    pub turn: usize,
    pub predicted: String,
    pub o_old: String,
    pub o_new: String,
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Against {
    Old,
    New,
}

fn norm_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Case-insensitive whole-token match; multi-token targets must appear
/// contiguously in the prediction.
pub fn matches(predicted: &str, target: &str) -> bool {
    let p = norm_tokens(predicted);
    let t = norm_tokens(target);
    !t.is_empty() && p.len() >= t.len() && p.windows(t.len()).any(|w| w == t.as_slice())
}

fn rate(records: &[AnswerRecord], kind: ProbeKind, hit: impl Fn(&AnswerRecord) -> bool) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("no records"));
    }
    if let Some(r) = records.iter().find(|r| r.kind != kind) {
        return Err(invalid(format!("expected {kind:?} records, found {:?}", r.kind)));
    }
    Ok(records.iter().filter(|r| hit(r)).count() as f64 / records.len() as f64)
}

pub fn accuracy(records: &[AnswerRecord], against: Against) -> Result<f64> {
    rate(records, ProbeKind::Main, |r| match against {
        Against::Old => matches(&r.predicted, &r.o_old),
        Against::New => matches(&r.predicted, &r.o_new),
    })
}

pub fn rephrase_accuracy(records: &[AnswerRecord]) -> Result<f64> {
    rate(records, ProbeKind::Rephrase, |r| matches(&r.predicted, &r.o_new))
}

/// Scored against the unchanged neighbouring answer.
pub fn locality_accuracy(records: &[AnswerRecord]) -> Result<f64> {
    rate(records, ProbeKind::Locality, |r| matches(&r.predicted, &r.o_old))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub turn: usize,
    /// Fraction of benign agents whose answer matches `target_new`.
    pub acc_new: f64,
    /// Mean acceptance probability, when every benign policy reports one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_prob: Option<f64>,
}

/// Per-turn benign-agent spread of `target_new`.
pub fn spread_curve(t: &Transcript) -> Result<Vec<CurvePoint>> {
    if t.answers.len() != t.n_turns {
        return Err(invalid(format!(
            "scenario {} has answers for {} of {} turns",
            t.scenario,
            t.answers.len(),
            t.n_turns
        )));
    }
    let mut out = Vec::with_capacity(t.n_turns);
    for (turn, answers) in t.answers.iter().enumerate() {
        let benign: Vec<_> = answers
            .iter()
            .filter(|a| t.role_of(&a.agent) == Some(Role::Benign))
            .collect();
        if benign.is_empty() {
            return Err(invalid(format!("turn {turn} has no benign answers")));
        }
        let n = benign.len() as f64;
        let hits = benign.iter().filter(|a| matches(&a.answer, &t.topic.target_new)).count();
        let accept_prob = benign
            .iter()
            .map(|a| a.accept_prob)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        out.push(CurvePoint {
            turn,
            acc_new: hits as f64 / n,
            accept_prob,
        });
    }
    Ok(out)
}

/// Pointwise mean of equally long curves.
pub fn mean_curve(curves: &[Vec<CurvePoint>]) -> Result<Vec<CurvePoint>> {
    let Some(first) = curves.first() else {
        return Ok(Vec::new());
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(invalid("curves differ in length"));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|i| CurvePoint {
            turn: first[i].turn,
            acc_new: curves.iter().map(|c| c[i].acc_new).sum::<f64>() / n,
            accept_prob: curves
                .iter()
                .map(|c| c[i].accept_prob)
                .sum::<Option<f64>>()
                .map(|s| s / n),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityScore {
    pub recall: f64,
    /// Mean per-token NLL of the answers.
    pub mean_nll: f64,
    pub hits: Vec<bool>,
}

/// Recall and answer NLL on held-out `(prompt, answer)` facts.
pub fn capability_probe(params: &ModelParams, probe_set: &[(String, String)]) -> Result<CapabilityScore> {
    if probe_set.is_empty() {
        return Err(invalid("empty capability probe set"));
    }
    let hits = recall_hits(params, probe_set)?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for (p, a) in probe_set {
        nll -= answer_logprob(params, p, a)?;
        tokens += a.split_whitespace().count();
    }
    Ok(CapabilityScore {
        recall: hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64,
        mean_nll: nll / tokens as f64,
        hits,
    })
}

/// Absolute change in probe recall.
pub fn capability_drift(before: &CapabilityScore, after: &CapabilityScore) -> f64 {
    (after.recall - before.recall).abs()
}

/// Rates for one agent class; `None` where no records exist.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateSet {
    pub n: usize,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    pub rephrase: Option<f64>,
    pub locality: Option<f64>,
}

impl RateSet {
    pub fn from_records(records: &[&AnswerRecord]) -> Result<Self> {
        let of = |k: ProbeKind| -> Vec<AnswerRecord> {
            records.iter().filter(|r| r.kind == k).map(|r| (*r).clone()).collect()
        };
        let main = of(ProbeKind::Main);
        let reph = of(ProbeKind::Rephrase);
        let loc = of(ProbeKind::Locality);
        let opt = |v: &Vec<AnswerRecord>, f: &dyn Fn(&[AnswerRecord]) -> Result<f64>| {
            if v.is_empty() {
                Ok(None)
            } else {
                f(v).map(Some)
            }
        };
        Ok(RateSet {
            n: main.len(),
            acc_old: opt(&main, &|r| accuracy(r, Against::Old))?,
            acc_new: opt(&main, &|r| accuracy(r, Against::New))?,
            rephrase: opt(&reph, &|r| rephrase_accuracy(r))?,
            locality: opt(&loc, &|r| locality_accuracy(r))?,
        })
    }

    fn rows(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("acc_old", self.acc_old),
            ("acc_new", self.acc_new),
            ("rephrase", self.rephrase),
            ("locality", self.locality),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRates {
    pub agent: String,
    pub role: Role,
    pub rates: RateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub method: String,
    pub dataset: String,
    /// Number of scenarios.
    pub n: usize,
    pub injected: RateSet,
    pub benign: RateSet,
    pub per_agent: Vec<AgentRates>,
    /// Mean benign spread curve.
    pub curve: Vec<CurvePoint>,
    pub capability_note: String,
    pub capability_pre: Option<CapabilityScore>,
    pub capability_post: Option<CapabilityScore>,
    pub failed_scenarios: Vec<String>,
}

impl MetricsReport {
    /// Aggregates final-turn answer records; per-agent rows are sorted by name.
    pub fn build(
        labels: (&str, &str, &str),
        n: usize,
        records: &[AnswerRecord],
        curve: Vec<CurvePoint>,
    ) -> Result<Self> {
        let by_role = |role: Role| -> Vec<&AnswerRecord> { records.iter().filter(|r| r.role == role).collect() };
        let mut agents: Vec<(&str, Role)> = records.iter().map(|r| (r.agent.as_str(), r.role)).collect();
        agents.sort();
        agents.dedup();
        let mut per_agent = Vec::with_capacity(agents.len());
        for (agent, role) in agents {
            let mine: Vec<&AnswerRecord> = records.iter().filter(|r| r.agent == agent).collect();
            per_agent.push(AgentRates {
                agent: agent.to_string(),
                role,
                rates: RateSet::from_records(&mine)?,
            });
        }
        Ok(MetricsReport {
            model: labels.0.to_string(),
            method: labels.1.to_string(),
            dataset: labels.2.to_string(),
            n,
            injected: RateSet::from_records(&by_role(Role::Injected))?,
            benign: RateSet::from_records(&by_role(Role::Benign))?,
            per_agent,
            curve,
            capability_note: "synthetic capability probe: recall on held-out world facts (benchmark substitute)".into(),
            capability_pre: None,
            capability_post: None,
            failed_scenarios: Vec::new(),
        })
    }

    /// Flat rows: `model,method,dataset,agent_class,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,method,dataset,agent_class,metric,value\n");
        for (class, set) in [("injected", &self.injected), ("benign", &self.benign)] {
            for (metric, v) in set.rows() {
                if let Some(v) = v {
                    out.push_str(&format!(
                        "{},{},{},{class},{metric},{v}\n",
                        self.model, self.method, self.dataset
                    ));
                }
            }
        }
        out
    }
}

/// `turn,acc_new,accept_prob` rows.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("turn,acc_new,accept_prob\n");
    for p in curve {
        let a = p.accept_prob.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{a}\n", p.turn + 1, p.acc_new));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pred: &str, old: &str, new: &str, kind: ProbeKind) -> AnswerRecord {
        AnswerRecord {
            scenario: "s".into(),
            agent: "a".into(),
            role: Role::Benign,
            turn: 0,
            predicted: pred.into(),
            o_old: old.into(),
            o_new: new.into(),
            kind,
        }
    }

    #[test]
    fn matching_rule() {
        assert!(matches("football", "football"));
        assert!(matches("Football ", "football"));
        assert!(!matches("foot", "football"));
        assert!(matches("new york city", "new york"));
        assert!(!matches("york new", "new york"));
        assert!(!matches("x", ""));
    }

    #[test]
    fn two_of_four() {
        let rs = vec![
            rec("golf", "tennis", "golf", ProbeKind::Main),
            rec("golf", "tennis", "golf", ProbeKind::Main),
            rec("tennis", "tennis", "golf", ProbeKind::Main),
            rec("chess", "tennis", "golf", ProbeKind::Main),
        ];
        assert_eq!(accuracy(&rs, Against::New).unwrap(), 0.5);
        assert_eq!(accuracy(&rs, Against::Old).unwrap(), 0.25);
        assert!(accuracy(&[], Against::New).is_err());
        assert!(rephrase_accuracy(&rs).is_err());
    }

    #[test]
    fn csv_has_one_row_per_metric() {
        let rs = vec![
            rec("golf", "tennis", "golf", ProbeKind::Main),
            rec("rome", "rome", "", ProbeKind::Locality),
        ];
        let r = MetricsReport::build(("m", "ours", "counterfact"), 1, &rs, vec![]).unwrap();
        assert_eq!(r.benign.locality, Some(1.0));
        assert_eq!(r.injected.acc_new, None);
        assert_eq!(r.to_csv().lines().count(), 1 + 3);
    }
}
