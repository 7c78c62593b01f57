//! Ranking metrics, TREC file exchange and the candidate-order experiment.
//!
//! NDCG uses linear gain, `rel_i / log2(i + 1)`, as in `trec_eval`'s
//! `ndcg_cut`. A query without any positive judgment scores 0 and still
//! counts toward means. Kendall tau is tau-a over strict permutations.

mod bias;
mod trec;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use crate::{Error, Result};

pub use bias::{position_bias_experiment, write_bias_csv, BiasReport, BiasRow, OrderMode};
pub use trec::{
    parse_run_line, read_qrels, read_run, run_records, write_qrels, write_run, QrelRecord, RunRecord,
};

/// NDCG@k of a ranking given the gains in ranked order and every judged relevance for the query.
pub fn ndcg_for_order(gains: &[u32], all_rels: &[u32], k: usize) -> f64 {
    let dcg = |rels: &mut dyn Iterator<Item = u32>| -> f64 {
        rels.take(k)
            .enumerate()
            .map(|(i, r)| r as f64 / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = all_rels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&mut ideal.into_iter());
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(&mut gains.iter().copied()) / idcg
}

/// Checks that ranks of one query are exactly `1..=n`; returns the records sorted by rank.
pub fn sorted_by_rank(run: &[RunRecord]) -> Result<Vec<&RunRecord>> {
    let mut sorted: Vec<&RunRecord> = run.iter().collect();
    sorted.sort_by_key(|r| r.rank);
    for (i, r) in sorted.iter().enumerate() {
        if r.rank != i + 1 {
            return Err(Error::MalformedRun(format!(
                "query {}: expected rank {}, found {}",
                r.qid,
                i + 1,
                r.rank
            )));
        }
    }
    Ok(sorted)
}

/// NDCG@k for the run and judgments of a single query.
pub fn ndcg_at_k(run: &[RunRecord], qrels: &[QrelRecord], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let sorted = sorted_by_rank(run)?;
    let rel: HashMap<&str, u32> = qrels.iter().map(|q| (q.docid.as_str(), q.relevance)).collect();
    let gains: Vec<u32> = sorted
        .iter()
        .map(|r| rel.get(r.docid.as_str()).copied().unwrap_or(0))
        .collect();
    let all: Vec<u32> = qrels.iter().map(|q| q.relevance).collect();
    Ok(ndcg_for_order(&gains, &all, k))
}

/// Per-query NDCG@k over every query that appears in the run or the judgments.
pub fn evaluate_run(run: &[RunRecord], qrels: &[QrelRecord], k: usize) -> Result<BTreeMap<String, f64>> {
    let mut runs: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in run {
        runs.entry(&r.qid).or_default().push(r.clone());
    }
    let mut judged: BTreeMap<&str, Vec<QrelRecord>> = BTreeMap::new();
    for q in qrels {
        judged.entry(&q.qid).or_default().push(q.clone());
    }
    let qids: std::collections::BTreeSet<&str> = runs.keys().chain(judged.keys()).copied().collect();
    let mut out = BTreeMap::new();
    for qid in qids {
        let r = runs.get(qid).map(Vec::as_slice).unwrap_or(&[]);
        let j = judged.get(qid).map(Vec::as_slice).unwrap_or(&[]);
        out.insert(qid.to_string(), ndcg_at_k(r, j, k)?);
    }
    Ok(out)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Kendall tau-a between two orderings of the same items.
pub fn kendall_tau<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::OrderMismatch(format!("need at least 2 items, got {n}")));
    }
    if b.len() != n {
        return Err(Error::OrderMismatch(format!("lengths {} and {}", n, b.len())));
    }
    let pos_b: HashMap<&T, usize> = b.iter().enumerate().map(|(i, x)| (x, i)).collect();
    if pos_b.len() != n || a.iter().collect::<HashSet<_>>().len() != n {
        return Err(Error::OrderMismatch("orders contain repeated items".into()));
    }
    let mapped: Vec<usize> = a
        .iter()
        .map(|x| pos_b.get(x).copied())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::OrderMismatch("item sets differ".into()))?;
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            score += if mapped[i] < mapped[j] { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}
