use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{EditRequest, LocalityProbe};
use super::grammar;
use crate::error::{invalid, Result};
use crate::tinylm::Vocab;

/// Placeholder for the subject inside a template.
pub const SUBJECT_SLOT: &str = "<s>";

/// A knowledge triple `(subject, relation, object)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// A relation and the closed set of objects it may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub objects: Vec<String>,
}

/// A closed world of single-token entities and functional relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<FactTriple>,
    /// `templates[r]` realizes relation `r`; each holds one `<s>` slot.
    /// Generated templates end with the subject, so the object is predicted
    /// right after the subject's final token.
    pub templates: Vec<Vec<String>>,
    pub seed: u64,
}

struct LexiconEntry {
    name: &'static str,
    objects: [&'static str; 8],
    templates: [&'static str; 3],
}

const LEXICON: [LexiconEntry; 8] = [
    LexiconEntry {
        name: "plays",
        objects: ["football", "baseball", "basketball", "tennis", "hockey", "cricket", "golf", "rugby"],
        templates: [
            "the sport professionally played by <s>",
            "the sport of choice for <s>",
            "the game that is played by <s>",
        ],
    },
    LexiconEntry {
        name: "lives",
        objects: ["paris", "london", "tokyo", "cairo", "lima", "oslo", "delhi", "rome"],
        templates: [
            "the city that is home to <s>",
            "the home city of <s>",
            "the city of residence of <s>",
        ],
    },
    LexiconEntry {
        name: "speaks",
        objects: ["french", "english", "japanese", "arabic", "spanish", "norwegian", "hindi", "italian"],
        templates: [
            "the language spoken by <s>",
            "the native language of <s>",
            "the language used by <s>",
        ],
    },
    LexiconEntry {
        name: "works",
        objects: ["doctor", "lawyer", "pilot", "chef", "teacher", "farmer", "singer", "painter"],
        templates: [
            "the profession of <s>",
            "the job held by <s>",
            "the occupation of <s>",
        ],
    },
    LexiconEntry {
        name: "eats",
        objects: ["pasta", "sushi", "curry", "bread", "rice", "soup", "salad", "cheese"],
        templates: [
            "the favorite food of <s>",
            "the dish liked by <s>",
            "the meal often cooked by <s>",
        ],
    },
    LexiconEntry {
        name: "owns",
        objects: ["dog", "cat", "horse", "parrot", "rabbit", "goat", "turtle", "hamster"],
        templates: [
            "the pet owned by <s>",
            "the animal kept by <s>",
            "the pet cared for by <s>",
        ],
    },
    LexiconEntry {
        name: "drives",
        objects: ["bicycle", "truck", "tractor", "scooter", "van", "motorcycle", "bus", "taxi"],
        templates: [
            "the vehicle driven by <s>",
            "the usual vehicle of <s>",
            "the ride used by <s>",
        ],
    },
    LexiconEntry {
        name: "studies",
        objects: ["physics", "history", "biology", "chemistry", "poetry", "music", "geology", "law"],
        templates: [
            "the subject studied by <s>",
            "the field studied by <s>",
            "the major of <s>",
        ],
    },
];

fn relation_entry(r: usize, templates_per_relation: usize) -> (Relation, Vec<String>) {
    let (name, objects, base): (String, Vec<String>, Vec<String>) = match LEXICON.get(r) {
        Some(e) => (
            e.name.to_string(),
            e.objects.iter().map(|s| s.to_string()).collect(),
            e.templates.iter().map(|s| s.to_string()).collect(),
        ),
        None => {
            let name = format!("rel{r}");
            let objects = (0..8).map(|m| format!("val{r}x{m}")).collect();
            let base = vec![
                format!("the {name} of <s>"),
                format!("the {name} linked to <s>"),
                format!("the {name} held by <s>"),
            ];
            (name, objects, base)
        }
    };
    let mut templates: Vec<String> = base.iter().take(templates_per_relation).cloned().collect();
    for t in templates.len()..templates_per_relation {
        templates.push(format!("in source{t} , {}", base[0]));
    }
    (Relation { name, objects }, templates)
}

/// Generates a reproducible closed world with one object per
/// `(entity, relation)` pair.
pub fn generate_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    templates_per_relation: usize,
) -> Result<World> {
    if n_entities < 2 {
        return Err(invalid("n_entities must be at least 2"));
    }
    if n_relations < 1 {
        return Err(invalid("n_relations must be at least 1"));
    }
    if templates_per_relation < 1 {
        return Err(invalid("templates_per_relation must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..n_entities).map(|i| format!("E{i}")).collect();
    let (relations, templates): (Vec<_>, Vec<_>) = (0..n_relations)
        .map(|r| relation_entry(r, templates_per_relation))
        .unzip();
    let mut facts = Vec::with_capacity(n_entities * n_relations);
    for s in &entities {
        for rel in &relations {
            let object = rel.objects[rng.gen_range(0..rel.objects.len())].clone();
            facts.push(FactTriple {
                subject: s.clone(),
                relation: rel.name.clone(),
                object,
            });
        }
    }
    Ok(World {
        entities,
        relations,
        facts,
        templates,
        seed,
    })
}

/// Substitutes the subject into a template.
pub fn fill_template(template: &str, subject: &str) -> String {
    template.replace(SUBJECT_SLOT, subject)
}

impl World {
    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// Object of `(subject, relation)`.
    pub fn object_of(&self, subject: &str, relation: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object.as_str())
    }

    /// Renders a fact as `(prompt, answer)` using the given template.
    pub fn render_fact(&self, triple: &FactTriple, template_index: usize) -> Result<(String, String)> {
        let r = self
            .relation_index(&triple.relation)
            .ok_or_else(|| invalid(format!("unknown relation `{}`", triple.relation)))?;
        let template = self.templates[r].get(template_index).ok_or_else(|| {
            invalid(format!(
                "template index {template_index} out of range for `{}`",
                triple.relation
            ))
        })?;
        Ok((fill_template(template, &triple.subject), triple.object.clone()))
    }

    /// Every `(prompt, answer)` over all facts and templates.
    pub fn all_prompts(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for f in &self.facts {
            let r = self.relation_index(&f.relation).unwrap();
            for t in 0..self.templates[r].len() {
                out.push(self.render_fact(f, t).unwrap());
            }
        }
        out
    }

    /// Closed vocabulary of the world plus the chat grammar.
    pub fn vocab(&self) -> Vocab {
        let mut toks: Vec<String> = Vec::new();
        toks.extend(self.entities.iter().cloned());
        for r in &self.relations {
            toks.extend(r.objects.iter().cloned());
        }
        for ts in &self.templates {
            for t in ts {
                toks.extend(
                    t.split_whitespace()
                        .filter(|w| *w != SUBJECT_SLOT)
                        .map(str::to_string),
                );
            }
        }
        toks.extend(grammar::grammar_tokens());
        Vocab::from_tokens(toks)
    }

    /// Checks the functional `(subject, relation) -> object` invariant.
    pub fn is_functional(&self) -> bool {
        let mut seen: HashMap<(&str, &str), &str> = HashMap::new();
        for f in &self.facts {
            if seen.insert((&f.subject, &f.relation), &f.object).is_some() {
                return false;
            }
        }
        true
    }

    /// Builds an edit for one fact: template 0 as the edit prompt, the other
    /// templates as rephrasings, and same-relation facts of other subjects
    /// as locality probes.
    pub fn make_edit(
        &self,
        fact: &FactTriple,
        target_new: &str,
        n_locality: usize,
        rng: &mut impl Rng,
    ) -> Result<EditRequest> {
        let r = self
            .relation_index(&fact.relation)
            .ok_or_else(|| invalid("unknown relation"))?;
        let (prompt, _) = self.render_fact(fact, 0)?;
        let rephrase_prompts = (1..self.templates[r].len())
            .map(|t| self.render_fact(fact, t).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        let mut others: Vec<&FactTriple> = self
            .facts
            .iter()
            .filter(|f| f.relation == fact.relation && f.subject != fact.subject)
            .collect();
        others.shuffle(rng);
        let locality_probes = others
            .into_iter()
            .take(n_locality)
            .map(|f| {
                let (prompt, answer) = self.render_fact(f, 0)?;
                Ok(LocalityProbe { prompt, answer })
            })
            .collect::<Result<Vec<_>>>()?;
        let edit = EditRequest {
            triple: fact.clone(),
            target_new: target_new.to_string(),
            prompt,
            rephrase_prompts,
            locality_probes,
            toxic: false,
        };
        edit.validate()?;
        Ok(edit)
    }

    /// Samples `count` edits over distinct facts with random new targets.
    pub fn sample_edits(&self, count: usize, n_locality: usize, seed: u64) -> Result<Vec<EditRequest>> {
        if count > self.facts.len() {
            return Err(invalid("more edits requested than facts"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.facts.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(count);
        idx.iter()
            .map(|&i| {
                let f = &self.facts[i];
                let rel = &self.relations[self.relation_index(&f.relation).unwrap()];
                let choices: Vec<&String> = rel.objects.iter().filter(|o| **o != f.object).collect();
                let target = choices[rng.gen_range(0..choices.len())].clone();
                self.make_edit(f, &target, n_locality, &mut rng)
            })
            .collect()
    }

    /// Subjects appearing in any of the given edits.
    pub fn subjects_of(edits: &[EditRequest]) -> BTreeSet<String> {
        edits.iter().map(|e| e.triple.subject.clone()).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_world() {
        let w = generate_world(0, 2, 1, 1).unwrap();
        assert_eq!(w.facts.len(), 2);
        assert!(w.is_functional());
        assert!(generate_world(0, 1, 1, 1).is_err());
        assert!(generate_world(0, 2, 0, 1).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_world(7, 50, 5, 3).unwrap();
        let b = generate_world(7, 50, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.facts.len(), 250);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        // Brute-force sweep: with 250 facts over 8 objects, two seeds agreeing
        // everywhere is astronomically unlikely, so every pair should differ.
        let differing = (0..100u64)
            .filter(|&s| {
                let a = generate_world(s, 50, 5, 3).unwrap();
                let b = generate_world(s + 1, 50, 5, 3).unwrap();
                a.facts != b.facts
            })
            .count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn render_matches_template_style() {
        let mut w = generate_world(0, 5, 1, 3).unwrap();
        w.templates[0][0] = "<s> professionally plays the sport".into();
        let f = FactTriple {
            subject: "E3".into(),
            relation: "plays".into(),
            object: "football".into(),
        };
        let got = w.render_fact(&f, 0).unwrap();
        assert_eq!(
            got,
            ("E3 professionally plays the sport".to_string(), "football".to_string())
        );
        assert_eq!(got, w.render_fact(&f, 0).unwrap());
        assert!(w.render_fact(&f, 3).is_err());
    }

    #[test]
    fn rendered_prompts_pairwise_distinct() {
        for (n_rel, n_tpl) in [(5, 3), (8, 3), (10, 5)] {
            let w = generate_world(3, 20, n_rel, n_tpl).unwrap();
            let prompts: Vec<String> = w.all_prompts().into_iter().map(|(p, _)| p).collect();
            let n = prompts.len();
            let mut seen = std::collections::HashSet::new();
            for p in &prompts {
                assert!(seen.insert(p.clone()), "duplicate prompt {p}");
            }
            assert_eq!(n, 20 * n_rel * n_tpl);
        }
    }

    #[test]
    fn vocab_covers_rendered_text() {
        let w = generate_world(1, 10, 10, 4).unwrap();
        let v = w.vocab();
        for (p, a) in w.all_prompts() {
            v.encode(&p).unwrap();
            v.encode(&a).unwrap();
        }
    }

    #[test]
    fn sampled_edits_respect_invariants() {
        let w = generate_world(2, 30, 5, 3).unwrap();
        let edits = w.sample_edits(20, 5, 9).unwrap();
        assert_eq!(edits.len(), 20);
        for e in &edits {
            e.validate().unwrap();
            assert_eq!(e.rephrase_prompts.len(), 2);
            assert_eq!(e.locality_probes.len(), 5);
        }
    }
}
