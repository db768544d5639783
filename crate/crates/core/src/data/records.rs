//! Line-delimited JSON dataset files: one dialog (or VQA) record per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on rounds per dialog.
pub const MAX_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRound {
    pub question: String,
    pub answer: String,
    pub candidates: Vec<String>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub image_id: u64,
    pub caption: String,
    pub rounds: Vec<DialogRound>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub image_id: u64,
    pub question: String,
    pub answer: String,
}

pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> std::result::Result<(), String>;
}

fn non_empty(field: &str, s: &str) -> std::result::Result<(), String> {
    if s.trim().is_empty() {
        Err(format!("field `{field}` is empty"))
    } else {
        Ok(())
    }
}

impl Record for DialogRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.rounds.is_empty() || self.rounds.len() > MAX_ROUNDS {
            return Err(format!(
                "image {} has {} rounds, expected 1..={MAX_ROUNDS}",
                self.image_id,
                self.rounds.len()
            ));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            let ctx = |m: String| format!("round {}: {m}", i + 1);
            non_empty("question", &r.question).map_err(ctx)?;
            non_empty("answer", &r.answer).map_err(ctx)?;
            if r.candidates.is_empty() {
                return Err(ctx("no candidates".into()));
            }
            for c in &r.candidates {
                non_empty("candidates", c).map_err(ctx)?;
            }
            if r.gt_index >= r.candidates.len() {
                return Err(ctx(format!(
                    "gt_index {} out of range for {} candidates",
                    r.gt_index,
                    r.candidates.len()
                )));
            }
            if let Some(rel) = &r.relevance {
                if rel.len() != r.candidates.len() {
                    return Err(ctx(format!(
                        "relevance has {} entries for {} candidates",
                        rel.len(),
                        r.candidates.len()
                    )));
                }
                if rel.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(ctx("relevance outside [0,1]".into()));
                }
            }
        }
        Ok(())
    }
}

impl Record for VqaRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        non_empty("question", &self.question)?;
        non_empty("answer", &self.answer)
    }
}

/// Reads one record per non-blank line, rejecting the first malformed line.
pub fn load_records<R: Record>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let record: R = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        record.validate().map_err(perr)?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_records<R: Record>(records: &[R], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Validation(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_dialogs(path: &Path) -> Result<Vec<DialogRecord>> {
    load_records(path)
}

pub fn load_vqa(path: &Path) -> Result<Vec<VqaRecord>> {
    load_records(path)
}
