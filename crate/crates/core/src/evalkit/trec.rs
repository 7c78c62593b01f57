use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Graded judgment: `qid 0 docid rel`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelRecord {
    pub qid: String,
    pub docid: String,
    pub relevance: u32,
}

/// Ranked output line: `qid Q0 docid rank score tag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Run records for one query from `(docid, score)` pairs already in rank order.
pub fn run_records(qid: &str, ranked: &[(String, f64)], tag: &str) -> Vec<RunRecord> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, (docid, score))| RunRecord {
            qid: qid.to_string(),
            docid: docid.clone(),
            rank: i + 1,
            score: *score,
            tag: tag.to_string(),
        })
        .collect()
}

fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(n, l)| l.map(|l| (n + 1, l)).map_err(|e| Error::io(path, e)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Vec<QrelRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in lines(path)? {
        let (n, line) = item?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(parse_err(path, n, format!("expected 4 fields, found {}", f.len())));
        }
        let rel: i64 = f[3]
            .parse()
            .map_err(|_| parse_err(path, n, format!("bad relevance {:?}", f[3])))?;
        if rel < 0 {
            return Err(parse_err(path, n, format!("negative relevance {rel}")));
        }
        let relevance = u32::try_from(rel).map_err(|_| parse_err(path, n, "relevance out of range"))?;
        out.push(QrelRecord {
            qid: f[0].to_string(),
            docid: f[2].to_string(),
            relevance,
        });
    }
    Ok(out)
}

pub fn write_qrels(path: impl AsRef<Path>, records: &[QrelRecord]) -> Result<()> {
    let path = path.as_ref();
    write_lines(path, records.iter().map(|r| format!("{} 0 {} {}", r.qid, r.docid, r.relevance)))
}

pub fn parse_run_line(line: &str) -> std::result::Result<RunRecord, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 {
        return Err(format!("expected 6 fields, found {}", f.len()));
    }
    let rank: usize = f[3].parse().map_err(|_| format!("bad rank {:?}", f[3]))?;
    if rank == 0 {
        return Err("ranks start at 1".into());
    }
    let score: f64 = f[4].parse().map_err(|_| format!("bad score {:?}", f[4]))?;
    Ok(RunRecord {
        qid: f[0].to_string(),
        docid: f[2].to_string(),
        rank,
        score,
        tag: f[5].to_string(),
    })
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in lines(path)? {
        let (n, line) = item?;
        out.push(parse_run_line(&line).map_err(|m| parse_err(path, n, m))?);
    }
    Ok(out)
}

/// Scores use the shortest representation that parses back to the same value.
pub fn write_run(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    write_lines(
        path,
        records
            .iter()
            .map(|r| format!("{} Q0 {} {} {} {}", r.qid, r.docid, r.rank, r.score, r.tag)),
    )
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
