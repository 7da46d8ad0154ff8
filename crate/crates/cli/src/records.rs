//! JSON-lines records: `{"id": ..., "labels": [...], "true_label": ...}`.

use std::io::{BufRead, Write};

use incws_core::encoding::{validate_batch, LabelBatch, LabelDomain};
use incws_core::inference::PosteriorLabel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub labels: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub votes: LabelBatch,
    /// One entry per record; `None` where the record has no truth.
    pub truth: Vec<Option<u32>>,
    /// Physical input line of each record, one-based.
    pub lines: Vec<usize>,
}

impl Dataset {
    /// All truths, or the line of the first record without one.
    pub fn complete_truth(&self) -> Result<Vec<u32>, usize> {
        self.truth.iter().zip(&self.lines).map(|(t, &line)| t.ok_or(line)).collect()
    }
}

fn at(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("line {line}: {msg}"))
}

/// Reads and validates every record; blank lines are skipped.
pub fn read_records(reader: impl BufRead, domain: LabelDomain) -> CliResult<Dataset> {
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    let mut truth = Vec::new();
    let mut lines = Vec::new();
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(CliError::io(format!("reading line {line}")))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| at(line, e))?;
        if let Some(first) = raw.first().map(|r: &Vec<i64>| r.len()) {
            if rec.labels.len() != first {
                return Err(at(line, format!("{} labels, earlier records have {first}", rec.labels.len())));
            }
        }
        if let Some(v) = rec.labels.iter().find(|&&v| !domain.contains(v)) {
            return Err(at(line, format!("vote {v} outside 0..={}", domain.num_classes())));
        }
        let t = match rec.true_label {
            None => None,
            Some(y) if y >= 1 && domain.contains(y) => Some(y as u32),
            Some(y) => return Err(at(line, format!("true_label {y} outside 1..={}", domain.num_classes()))),
        };
        ids.push(rec.id);
        raw.push(rec.labels);
        truth.push(t);
        lines.push(line);
    }
    if raw.is_empty() {
        return Err(CliError::Input("no records".into()));
    }
    let votes = validate_batch(&raw, domain).map_err(|e| at(lines[0], e))?;
    Ok(Dataset { ids, votes, truth, lines })
}

#[derive(Debug, Serialize)]
struct LabelOut<'a> {
    id: &'a str,
    probs: &'a [f64],
    hard: usize,
    abstained: bool,
}

pub fn write_label(w: &mut impl Write, id: &str, p: &PosteriorLabel) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &LabelOut { id, probs: &p.probs, hard: p.hard, abstained: p.abstained })?;
    writeln!(w)
}

pub fn write_record(w: &mut impl Write, rec: &Record) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> LabelDomain {
        LabelDomain::new(2).unwrap()
    }

    #[test]
    fn reads_records_and_truth() {
        let text = "{\"id\":\"a\",\"labels\":[1,2,0],\"true_label\":1}\n\n{\"id\":\"b\",\"labels\":[0,0,2]}\n";
        let d = read_records(text.as_bytes(), domain()).unwrap();
        assert_eq!(d.ids, vec!["a", "b"]);
        assert_eq!(d.truth, vec![Some(1), None]);
        assert_eq!(d.lines, vec![1, 3]);
        assert_eq!(d.complete_truth(), Err(3));
    }

    #[test]
    fn reports_the_offending_line() {
        let ragged = "{\"id\":\"a\",\"labels\":[1,2,0]}\n{\"id\":\"b\",\"labels\":[1,2]}\n";
        let err = read_records(ragged.as_bytes(), domain()).unwrap_err().to_string();
        assert!(err.starts_with("line 2:"), "{err}");
        let domain_err = "{\"id\":\"a\",\"labels\":[1,3,0]}\n";
        assert!(read_records(domain_err.as_bytes(), domain()).unwrap_err().to_string().starts_with("line 1:"));
        let junk = "{\"id\":\"a\",\"labels\":[1,2,0]}\nnot json\n";
        assert!(read_records(junk.as_bytes(), domain()).unwrap_err().to_string().starts_with("line 2:"));
        assert_eq!(read_records("".as_bytes(), domain()).unwrap_err().to_string(), "no records");
    }
}
