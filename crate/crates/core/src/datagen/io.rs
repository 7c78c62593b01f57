use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::RankingExample;
use crate::losses::PermutationLabel;
use crate::{Error, Result};

/// Reads line-delimited JSON examples, validating each permutation.
pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<RankingExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let ex: RankingExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if ex.permutation.len() != ex.candidates.len() {
            return Err(parse_err(format!(
                "{} candidates but permutation of length {}",
                ex.candidates.len(),
                ex.permutation.len()
            )));
        }
        PermutationLabel::new(ex.permutation.clone()).map_err(|_| parse_err("not a permutation".into()))?;
        if let Some(rel) = &ex.relevance {
            if rel.len() != ex.candidates.len() {
                return Err(parse_err("relevance length differs from candidate count".into()));
            }
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[RankingExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
