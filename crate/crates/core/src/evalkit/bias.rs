use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mean, ndcg_at_k, run_records, QrelRecord};
use crate::datagen::{derive_seed, RankingExample};
use crate::inference::{score_all, RerankRequest, Reranker, Strategy};
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 3;

/// How the candidate list is presented to the reranker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderMode {
    Original,
    Reversed,
    Random,
}

impl OrderMode {
    pub const ALL: [OrderMode; 3] = [OrderMode::Original, OrderMode::Reversed, OrderMode::Random];

    pub fn name(&self) -> &'static str {
        match self {
            OrderMode::Original => "original",
            OrderMode::Reversed => "reversed",
            OrderMode::Random => "random",
        }
    }
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown order mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub mode: OrderMode,
    pub mean_ndcg: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Per query, the largest rank difference of any document between the
    /// first mode and any other mode.
    pub max_rank_disagreement: Vec<usize>,
    /// Per mode and query, the reranked doc ids.
    pub rankings: Vec<Vec<Vec<String>>>,
}

impl BiasReport {
    pub fn identical_rankings(&self) -> bool {
        self.max_rank_disagreement.iter().all(|&d| d == 0)
    }
}

fn presented(ex: &RankingExample, mode: OrderMode, seed: u64, index: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ex.candidates.len()).collect();
    match mode {
        OrderMode::Original => {}
        OrderMode::Reversed => idx.reverse(),
        OrderMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, index as u64));
            idx.shuffle(&mut rng);
        }
    }
    idx
}

/// Reranks every query under each presentation order with `global_score`.
pub fn position_bias_experiment(
    reranker: &Reranker,
    eval: &[RankingExample],
    qrels: &[QrelRecord],
    modes: &[OrderMode],
    window_size: usize,
    seed: u64,
) -> Result<BiasReport> {
    let mut judged: HashMap<&str, Vec<QrelRecord>> = HashMap::new();
    for q in qrels {
        judged.entry(q.qid.as_str()).or_default().push(q.clone());
    }
    let mut rows = Vec::new();
    let mut rankings = Vec::new();
    for &mode in modes {
        let mut ndcgs = Vec::with_capacity(eval.len());
        let mut per_query = Vec::with_capacity(eval.len());
        for (i, ex) in eval.iter().enumerate() {
            let idx = presented(ex, mode, seed, i);
            let req = RerankRequest {
                query: ex.query.clone(),
                candidates: idx.iter().map(|&j| ex.candidates[j].clone()).collect(),
                window_size,
                strategy: Strategy::GlobalScore,
            };
            let res = score_all(reranker, &req)?;
            let ranked: Vec<(String, f64)> = res.docids.iter().cloned().zip(res.scores.iter().copied()).collect();
            let run = run_records(&ex.qid, &ranked, "bias");
            let j = judged.get(ex.qid.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            ndcgs.push(ndcg_at_k(&run, j, 10)?);
            per_query.push(res.docids);
        }
        rows.push(BiasRow {
            mode,
            mean_ndcg: mean(ndcgs),
            queries: eval.len(),
        });
        rankings.push(per_query);
    }
    let max_rank_disagreement = (0..eval.len())
        .map(|q| {
            let Some(base) = rankings.first() else { return 0 };
            let pos: HashMap<&str, usize> = base[q].iter().enumerate().map(|(p, d)| (d.as_str(), p)).collect();
            rankings[1..]
                .iter()
                .flat_map(|r| r[q].iter().enumerate().map(|(p, d)| p.abs_diff(pos[d.as_str()])))
                .max()
                .unwrap_or(0)
        })
        .collect();
    Ok(BiasReport {
        rows,
        max_rank_disagreement,
        rankings,
    })
}

/// `mode,mean_ndcg@10,queries`
pub fn write_bias_csv(path: impl AsRef<Path>, report: &BiasReport) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("mode,mean_ndcg@10,queries\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{}\n", r.mode, r.mean_ndcg, r.queries));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
