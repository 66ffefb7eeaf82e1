//! The closed chat grammar shared by training, agents and retrieval.
//!
//! A chat prompt is the platform's fixed instruction followed by prior
//! replies and the speaker's own topic prompt:
//!
//! ```text
//! discuss the topic : | football . | football because records show football and reports confirm football . | the sport professionally played by E3
//! ```
//!
//! Replies come in two styles: a bare answer (`<o> .`) or an answer backed
//! by templated evidence clauses. The pretraining corpus teaches the model a
//! fixed in-context persuasion rule over object mentions in prior replies
//! (see [`persuaded`]).

use rand::seq::SliceRandom;
use rand::Rng;

use super::world::{fill_template, World};

pub const SECURE_TEMPLATE: &str = "discuss the topic :";
pub const TURN_SEP: &str = "|";
pub const LONG_STYLE: &str =
    "answer with a complete and long paragraph with various pieces of evidence";
pub const SHORT_STYLE: &str = "answer with a short and brief paragraph";
pub const EVIDENCE_MARKERS: [&str; 5] = ["because", "records", "show", "reports", "confirm"];
pub const END: &str = ".";
/// Upper bound on reply length in tokens.
pub const MAX_REPLY_TOKENS: usize = 10;

/// Tokens the grammar adds on top of world vocabulary.
pub fn grammar_tokens() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for s in [SECURE_TEMPLATE, LONG_STYLE, SHORT_STYLE, "and", "is a", END, TURN_SEP] {
        v.extend(s.split_whitespace().map(str::to_string));
    }
    v.extend(EVIDENCE_MARKERS.iter().map(|s| s.to_string()));
    v
}

/// Bare reply: `<o> .`
pub fn short_reply(object: &str) -> String {
    format!("{object} {END}")
}

/// Evidence-backed reply mentioning the object three times.
pub fn evidence_reply(object: &str) -> String {
    format!("{object} because records show {object} and reports confirm {object} {END}")
}

/// The relation-free prompt used to anchor the subject's other behaviour.
pub fn essence_prompt(subject: &str) -> String {
    format!("{subject} is a")
}

pub fn has_evidence(text: &str) -> bool {
    text.split_whitespace().any(|t| EVIDENCE_MARKERS.contains(&t))
}

pub fn count_mentions(text: &str, object: &str) -> usize {
    let obj: Vec<&str> = object.split_whitespace().collect();
    let toks: Vec<&str> = text.split_whitespace().collect();
    if obj.is_empty() || toks.len() < obj.len() {
        return 0;
    }
    toks.windows(obj.len()).filter(|w| *w == obj.as_slice()).count()
}

/// In-context persuasion rule taught during pretraining: the model abandons
/// its stored answer for an alternative only when the alternative is
/// mentioned more than three times as often as the stored answer, plus one.
pub fn persuaded(alt_mentions: usize, stored_mentions: usize) -> bool {
    alt_mentions > 3 * stored_mentions + 1
}

/// Strips a leading topic prompt from a message, leaving the reply.
pub fn strip_topic<'a>(content: &'a str, topic_prompt: &str) -> &'a str {
    let c = content.trim_start();
    match c.strip_prefix(topic_prompt.trim()) {
        Some(rest) if rest.is_empty() || rest.starts_with(char::is_whitespace) => rest.trim(),
        _ => c.trim(),
    }
}

/// Full statement for a message: topic prompt followed by the reply.
pub fn statement(topic_prompt: &str, reply: &str) -> String {
    let reply = reply.trim();
    if reply.is_empty() {
        topic_prompt.to_string()
    } else {
        format!("{topic_prompt} {reply}")
    }
}

fn token_len(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Renders the chat prompt, dropping the oldest items until the prompt
/// fits in `budget` tokens. Returns the prompt and the number of items kept.
pub fn chat_prompt(items: &[&str], topic_prompt: &str, budget: usize) -> (String, usize) {
    let fixed = token_len(SECURE_TEMPLATE) + 1 + token_len(topic_prompt);
    let mut used = fixed;
    let mut keep = 0;
    for item in items.iter().rev() {
        let n = token_len(item) + 1;
        if used + n > budget {
            break;
        }
        used += n;
        keep += 1;
    }
    let mut out = String::from(SECURE_TEMPLATE);
    for item in &items[items.len() - keep..] {
        if item.trim().is_empty() {
            continue;
        }
        out.push(' ');
        out.push_str(TURN_SEP);
        out.push(' ');
        out.push_str(item.trim());
    }
    out.push(' ');
    out.push_str(TURN_SEP);
    out.push(' ');
    out.push_str(topic_prompt);
    (out, keep)
}

/// Collection prompt carrying a style instruction.
pub fn styled_prompt(style: &str, topic_prompt: &str) -> String {
    format!("{style} {}", chat_prompt(&[], topic_prompt, usize::MAX).0)
}

/// A pretraining document: only `target` tokens are scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Doc {
    pub context: String,
    pub target: String,
}

impl Doc {
    fn new(context: &str, target: &str) -> Self {
        Doc {
            context: context.to_string(),
            target: target.to_string(),
        }
    }

    pub fn text(&self) -> String {
        format!("{} {}", self.context, self.target)
    }
}

/// Mixture weights for pretraining documents.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DocMix {
    /// Bare `prompt object .` facts.
    pub fact: f64,
    /// Style-instructed replies.
    pub style: f64,
    /// Chat prompts with an empty history.
    pub chat_empty: f64,
    /// Chat prompts with a history of replies (the persuasion rule).
    pub chat_history: f64,
    /// Probability that an uninstructed reply uses the evidence style.
    pub long_reply_rate: f64,
    /// Longest history sampled.
    pub max_history: usize,
}

impl Default for DocMix {
    fn default() -> Self {
        DocMix {
            fact: 0.4,
            style: 0.1,
            chat_empty: 0.15,
            chat_history: 0.35,
            long_reply_rate: 0.3,
            max_history: 6,
        }
    }
}

fn reply(object: &str, long: bool) -> String {
    if long {
        evidence_reply(object)
    } else {
        short_reply(object)
    }
}

/// Draws one pretraining document for `world`.
pub fn sample_doc(world: &World, mix: &DocMix, rng: &mut impl Rng) -> Doc {
    let fact = &world.facts[rng.gen_range(0..world.facts.len())];
    let r = world.relation_index(&fact.relation).unwrap();
    let templates = &world.templates[r];
    let prompt = fill_template(&templates[rng.gen_range(0..templates.len())], &fact.subject);
    let total = mix.fact + mix.style + mix.chat_empty + mix.chat_history;
    let u = rng.gen::<f64>() * total;
    if u < mix.fact {
        return Doc::new(&prompt, &short_reply(&fact.object));
    }
    if u < mix.fact + mix.style {
        let long = rng.gen_bool(0.5);
        let style = if long { LONG_STYLE } else { SHORT_STYLE };
        return Doc::new(&styled_prompt(style, &prompt), &reply(&fact.object, long));
    }
    let long_answer = rng.gen_bool(mix.long_reply_rate);
    if u < mix.fact + mix.style + mix.chat_empty {
        let (ctx, _) = chat_prompt(&[], &prompt, usize::MAX);
        return Doc::new(&ctx, &reply(&fact.object, long_answer));
    }
    let objects = &world.relations[r].objects;
    let alts: Vec<&String> = objects.iter().filter(|o| **o != fact.object).collect();
    let alt = *alts.choose(rng).unwrap();
    let n_items = rng.gen_range(1..=mix.max_history.max(1));
    let alt_rate = [0.25, 0.5, 0.75, 1.0][rng.gen_range(0..4)];
    let items: Vec<String> = (0..n_items)
        .map(|_| {
            let obj = if rng.gen_bool(alt_rate) { alt } else { &fact.object };
            reply(obj, rng.gen_bool(0.4))
        })
        .collect();
    let alt_m: usize = items.iter().map(|i| count_mentions(i, alt)).sum();
    let own_m: usize = items.iter().map(|i| count_mentions(i, &fact.object)).sum();
    let answer = if persuaded(alt_m, own_m) { alt } else { &fact.object };
    let refs: Vec<&str> = items.iter().map(String::as_str).collect();
    let (ctx, _) = chat_prompt(&refs, &prompt, usize::MAX);
    Doc::new(&ctx, &reply(answer, long_answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_world;
    use rand::SeedableRng;

    #[test]
    fn persuasion_rule_table() {
        assert!(!persuaded(0, 0));
        assert!(!persuaded(1, 0)); // single bare assertion
        assert!(persuaded(3, 0)); // single evidence-backed assertion
        assert!(persuaded(2, 0));
        assert!(!persuaded(3, 1));
        assert!(persuaded(5, 1));
    }

    #[test]
    fn budget_drops_oldest_items() {
        let items = ["a .", "b .", "c ."];
        let (full, kept) = chat_prompt(&items, "E1 likes to eat", 100);
        assert_eq!(kept, 3);
        assert_eq!(full, "discuss the topic : | a . | b . | c . | E1 likes to eat");
        let (cut, kept) = chat_prompt(&items, "E1 likes to eat", 4 + 1 + 4 + 6);
        assert_eq!(kept, 2);
        assert_eq!(cut, "discuss the topic : | b . | c . | E1 likes to eat");
    }

    #[test]
    fn strip_and_features() {
        let t = "the sport professionally played by E3";
        let msg = statement(t, &evidence_reply("football"));
        assert_eq!(strip_topic(&msg, t), evidence_reply("football"));
        assert_eq!(strip_topic("other text", t), "other text");
        assert!(has_evidence(&msg));
        assert!(!has_evidence(&statement(t, &short_reply("golf"))));
        assert_eq!(count_mentions(&msg, "football"), 3);
    }

    #[test]
    fn docs_tokenize_under_world_vocab() {
        let w = generate_world(0, 10, 3, 3).unwrap();
        let v = w.vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let d = sample_doc(&w, &DocMix::default(), &mut rng);
            let toks = v.encode(&d.text()).unwrap();
            let start = v.encode(&d.context).unwrap().len();
            assert!(start >= 1 && start < toks.len());
            assert!(toks.len() <= 128);
        }
    }
}
