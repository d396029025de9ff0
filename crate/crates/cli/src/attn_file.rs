//! Text dump of attention matrices shared by `translate`, `force-align` and
//! `plot-attn`.
//!
//! One block per sentence, blocks separated by a blank line:
//!
//! ```text
//! source<TAB>w1 w2 w3
//! target<TAB>v1 v2 </s>
//! 0.9 0.05 0.05 0
//! ...
//! ```
//!
//! Each weight row has one column per source word plus a final terminator
//! column, in original source order.

use std::fs;
use std::path::{Path, PathBuf};

use nmt_core::NmtError;

use crate::with_terminator;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEntry {
    pub source: Vec<String>,
    /// Target word each row is attributed to.
    pub targets: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionEntry {
    pub fn new(source: &[String], targets: &[String], rows: Vec<Vec<f64>>) -> Self {
        AttentionEntry {
            source: source.to_vec(),
            targets: targets.to_vec(),
            rows,
        }
    }

    /// Column labels: the source words then the terminator.
    pub fn columns(&self) -> Vec<String> {
        with_terminator(&self.source)
    }
}

pub fn format_attention(entries: &[AttentionEntry]) -> String {
    let mut out = String::new();
    for (i, e) in entries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("source\t{}\n", e.source.join(" ")));
        out.push_str(&format!("target\t{}\n", e.targets.join(" ")));
        for row in &e.rows {
            let cells: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn write_attention(path: &Path, entries: &[AttentionEntry]) -> Result<(), NmtError> {
    fs::write(path, format_attention(entries)).map_err(|e| NmtError::io(path, e))
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn parse_attention(text: &str, path: &Path) -> Result<Vec<AttentionEntry>, NmtError> {
    let err = |line: usize, msg: String| NmtError::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let source = line
            .strip_prefix("source\t")
            .or_else(|| (line == "source").then_some(""))
            .ok_or_else(|| err(i + 1, "expected a source line".into()))?;
        let (j, tline) = lines.next().ok_or_else(|| err(i + 2, "missing target line".into()))?;
        let targets = tline
            .strip_prefix("target\t")
            .or_else(|| (tline == "target").then_some(""))
            .ok_or_else(|| err(j + 1, "expected a target line".into()))?;
        let entry_source = words(source);
        let cols = entry_source.len() + 1;
        let mut rows = Vec::new();
        while let Some((k, row)) = lines.next_if(|(_, l)| !l.trim().is_empty()) {
            let values = row
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(k + 1, format!("bad weight {v:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != cols {
                return Err(err(k + 1, format!("expected {cols} weights, found {}", values.len())));
            }
            rows.push(values);
        }
        let entry_targets = words(targets);
        if entry_targets.len() != rows.len() {
            return Err(err(
                j + 1,
                format!("{} target words but {} weight rows", entry_targets.len(), rows.len()),
            ));
        }
        entries.push(AttentionEntry {
            source: entry_source,
            targets: entry_targets,
            rows,
        });
    }
    Ok(entries)
}

pub fn read_attention(path: &Path) -> Result<Vec<AttentionEntry>, NmtError> {
    let text = fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
    parse_attention(&text, path)
}
