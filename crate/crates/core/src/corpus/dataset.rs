//! Edit requests and the CounterFact/zsRE-style JSON dataset format.
//!
//! One JSON array of records:
//!
//! ```text
//! { prompt, subject, ground_truth, target_new,
//!   rephrase: [string], locality: [{prompt, answer}], toxic: bool,
//!   relation?: string }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::world::FactTriple;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: String,
    pub answer: String,
}

/// `(s, r, o -> o*)` with the prompts used to test it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub triple: FactTriple,
    pub target_new: String,
    pub prompt: String,
    pub rephrase_prompts: Vec<String>,
    pub locality_probes: Vec<LocalityProbe>,
    #[serde(default)]
    pub toxic: bool,
}

impl EditRequest {
    pub fn subject(&self) -> &str {
        &self.triple.subject
    }

    pub fn ground_truth(&self) -> &str {
        &self.triple.object
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_new.trim() == self.triple.object.trim() {
            return Err(invalid("target_new equals ground truth"));
        }
        let s = self.subject();
        if s.is_empty() || !self.prompt.contains(s) {
            return Err(invalid("prompt does not mention the subject"));
        }
        if let Some(p) = self.rephrase_prompts.iter().find(|p| !p.contains(s)) {
            return Err(invalid(format!("rephrase `{p}` does not mention the subject")));
        }
        if let Some(p) = self.locality_probes.iter().find(|p| mentions(&p.prompt, s)) {
            return Err(invalid(format!("locality probe `{}` mentions the subject", p.prompt)));
        }
        Ok(())
    }

    /// Same edit with the new target set to the current answer.
    pub fn identity(&self) -> EditRequest {
        let mut e = self.clone();
        e.target_new = e.triple.object.clone();
        e
    }
}

fn mentions(text: &str, subject: &str) -> bool {
    let sub: Vec<&str> = subject.split_whitespace().collect();
    let toks: Vec<&str> = text.split_whitespace().collect();
    !sub.is_empty() && toks.windows(sub.len()).any(|w| w == sub.as_slice())
}

/// The on-disk record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub prompt: String,
    pub subject: String,
    pub ground_truth: String,
    pub target_new: String,
    #[serde(default)]
    pub rephrase: Vec<String>,
    #[serde(default)]
    pub locality: Vec<LocalityProbe>,
    #[serde(default)]
    pub toxic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl From<&EditRequest> for EditRecord {
    fn from(e: &EditRequest) -> Self {
        EditRecord {
            prompt: e.prompt.clone(),
            subject: e.triple.subject.clone(),
            ground_truth: e.triple.object.clone(),
            target_new: e.target_new.clone(),
            rephrase: e.rephrase_prompts.clone(),
            locality: e.locality_probes.clone(),
            toxic: e.toxic,
            relation: Some(e.triple.relation.clone()),
        }
    }
}

impl EditRecord {
    fn into_request(self) -> EditRequest {
        let relation = self
            .relation
            .unwrap_or_else(|| self.prompt.replacen(&self.subject, super::world::SUBJECT_SLOT, 1));
        EditRequest {
            triple: FactTriple {
                subject: self.subject,
                relation,
                object: self.ground_truth,
            },
            target_new: self.target_new,
            prompt: self.prompt,
            rephrase_prompts: self.rephrase,
            locality_probes: self.locality,
            toxic: self.toxic,
        }
    }
}

/// Which public dataset the file imitates. Both share the record schema;
/// the tag is kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSchema {
    Counterfact,
    Zsre,
}

const REQUIRED: [&str; 4] = ["prompt", "subject", "ground_truth", "target_new"];

/// Parses a dataset from JSON text, reporting the first offending record.
pub fn parse_edit_dataset(text: &str, _schema: DatasetSchema) -> Result<Vec<EditRequest>> {
    let root: Value = serde_json::from_str(text)?;
    let arr = root
        .as_array()
        .ok_or_else(|| invalid("dataset root must be a JSON array"))?;
    let mut out = Vec::with_capacity(arr.len());
    for (index, rec) in arr.iter().enumerate() {
        let schema_err = |field: &str, message: &str| Error::Schema {
            index,
            field: field.to_string(),
            message: message.to_string(),
        };
        let obj = rec
            .as_object()
            .ok_or_else(|| schema_err("<record>", "record must be an object"))?;
        for field in REQUIRED {
            match obj.get(field) {
                Some(Value::String(_)) => {}
                Some(_) => return Err(schema_err(field, "must be a string")),
                None => return Err(schema_err(field, "missing required field")),
            }
        }
        let record: EditRecord = serde_json::from_value(rec.clone())
            .map_err(|e| schema_err("<record>", &e.to_string()))?;
        let req = record.into_request();
        req.validate().map_err(|e| {
            let field = match &e {
                Error::InvalidArgument(m) if m.contains("target_new") => "target_new",
                Error::InvalidArgument(m) if m.contains("rephrase") => "rephrase",
                Error::InvalidArgument(m) if m.contains("locality") => "locality",
                _ => "prompt",
            };
            schema_err(field, &e.to_string())
        })?;
        out.push(req);
    }
    Ok(out)
}

pub fn load_edit_dataset(path: &Path, schema: DatasetSchema) -> Result<Vec<EditRequest>> {
    parse_edit_dataset(&std::fs::read_to_string(path)?, schema)
}

pub fn edit_dataset_json(edits: &[EditRequest]) -> Result<String> {
    let records: Vec<EditRecord> = edits.iter().map(EditRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn save_edit_dataset(path: &Path, edits: &[EditRequest]) -> Result<()> {
    std::fs::write(path, edit_dataset_json(edits)?)?;
    Ok(())
}
