//! Attention maps as comma-separated rows: `level,row,col,weight`.
//!
//! `level` is the 1-based level position; `row` indexes the attending token
//! and `col` the attended one. Weights are written in shortest round-trip
//! form, so parsing reproduces them exactly.

use std::io::{BufRead, Write};

use super::LevelAttention;
use crate::error::{Error, Result};

pub const ATTENTION_HEADER: &str = "level,row,col,weight";

pub fn export_attention<W: Write>(maps: &[LevelAttention], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{ATTENTION_HEADER}")?;
    for att in maps {
        for r in 0..att.weights.rows() {
            for (c, w) in att.weights.row(r).iter().enumerate() {
                writeln!(sink, "{},{},{},{}", att.level + 1, r, c, w)?;
            }
        }
    }
    sink.flush()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionRecord {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

pub fn parse_attention_csv<R: BufRead>(reader: R) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<attention csv>", e))?;
        if n == 0 {
            if line.trim() != ATTENTION_HEADER {
                return Err(Error::Input(format!(
                    "unexpected attention header {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Input(format!("line {}: malformed attention row {line:?}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        let [level, row, col, weight] = fields[..] else {
            return Err(bad());
        };
        out.push(AttentionRecord {
            level: level.trim().parse().map_err(|_| bad())?,
            row: row.trim().parse().map_err(|_| bad())?,
            col: col.trim().parse().map_err(|_| bad())?,
            weight: weight.trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
