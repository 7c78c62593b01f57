//! Reranking a full candidate list with a window-sized model.
//!
//! `global_score` splits the list into `ceil(|C| / M)` windows in input order,
//! scores each window once and sorts every candidate by its list-view score.
//! The last window is filled with `<null>` candidates whose scores are
//! dropped. Equal scores keep input order.
//!
//! `sliding_window` is the multi-pass baseline: windows of `M` move from the
//! back of the list to the front by `stride`, each pass reordering its window
//! by within-window score. Starts are `|C|-M, |C|-M-stride, ...` down to the
//! last one that is non-negative, so it runs `floor((|C|-M)/stride) + 1`
//! forwards (one when `|C| <= M`).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::datagen::{tokenize, Candidate, TokenId, Vocab, NULL_DOC};
use crate::engine::Real;
use crate::layout::{build_layout, LayoutConfig};
use crate::model::{forward, Checkpoint, Parameters, ScoreBundle};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    GlobalScore,
    SlidingWindow { stride: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::GlobalScore => "global_score",
            Strategy::SlidingWindow { .. } => "sliding_window",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `global_score` or `sliding_window` (stride defaults to 10 and is usually set separately).
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_score" => Ok(Strategy::GlobalScore),
            "sliding_window" => Ok(Strategy::SlidingWindow { stride: 10 }),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected global_score or sliding_window)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankRequest {
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub window_size: usize,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankResult {
    /// Input indices, best first.
    pub order: Vec<usize>,
    pub docids: Vec<String>,
    /// Score of each entry of `order`, non-increasing. Under `sliding_window`
    /// these are `n - position` since no single comparable score exists.
    pub scores: Vec<f64>,
    pub forwards: usize,
    pub latency: Duration,
}

/// A model ready to score windows.
#[derive(Clone, Debug)]
pub struct Reranker {
    pub params: Parameters,
    pub vocab: Vocab,
    pub max_candidate_tokens: usize,
    /// Rank by point-view instead of list-view scores.
    pub use_point_scores: bool,
}

impl Reranker {
    pub fn new(params: Parameters, vocab: Vocab, max_candidate_tokens: usize) -> Self {
        Self {
            params,
            vocab,
            max_candidate_tokens,
            use_point_scores: false,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self::new(ckpt.params, ckpt.vocab, ckpt.max_candidate_tokens)
    }

    pub fn layout_config(&self, window_size: usize) -> Result<LayoutConfig> {
        LayoutConfig::from_vocab(&self.vocab, window_size, self.max_candidate_tokens)
    }

    /// Scores one window of already tokenized candidates.
    pub fn score_window(&self, query: &[TokenId], candidates: &[Vec<TokenId>], config: &LayoutConfig) -> Result<ScoreBundle> {
        let layout = build_layout(query, candidates, config)?;
        forward(&self.params, &layout)
    }

    fn pick<'a>(&self, b: &'a ScoreBundle) -> &'a [Real] {
        if self.use_point_scores {
            &b.ps
        } else {
            &b.ls
        }
    }
}

/// Number of forwards `global_score` needs.
pub fn global_forwards(num_candidates: usize, window: usize) -> usize {
    num_candidates.div_ceil(window)
}

/// Number of forwards `sliding_window` needs.
pub fn sliding_forwards(num_candidates: usize, window: usize, stride: usize) -> usize {
    if num_candidates <= window {
        1
    } else {
        (num_candidates - window) / stride + 1
    }
}

/// Global order of the concatenated window scores: descending, ties by index.
pub fn global_order(scores: &[Real]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn check_request(req: &RerankRequest) -> Result<()> {
    if req.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if req.window_size == 0 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    if let Strategy::SlidingWindow { stride } = req.strategy {
        if stride == 0 || stride > req.window_size {
            return Err(Error::Config(format!(
                "stride {stride} must lie in 1..={}",
                req.window_size
            )));
        }
    }
    Ok(())
}

fn tokenized(reranker: &Reranker, req: &RerankRequest) -> (Vec<TokenId>, Vec<Vec<TokenId>>) {
    let q = tokenize(&req.query, &reranker.vocab);
    let c = req.candidates.iter().map(|c| tokenize(&c.text, &reranker.vocab)).collect();
    (q, c)
}

pub fn rerank(reranker: &Reranker, req: &RerankRequest) -> Result<RerankResult> {
    match req.strategy {
        Strategy::GlobalScore => score_all(reranker, req),
        Strategy::SlidingWindow { .. } => sliding_window_rerank(reranker, req),
    }
}

/// One score per candidate from `ceil(|C|/M)` independent windows.
pub fn candidate_scores(reranker: &Reranker, req: &RerankRequest) -> Result<Vec<Real>> {
    check_request(req)?;
    let m = req.window_size;
    let config = reranker.layout_config(m)?;
    let (query, cands) = tokenized(reranker, req);
    let windows: Vec<&[Vec<TokenId>]> = cands.chunks(m).collect();
    let per_window: Vec<Vec<Real>> = windows
        .par_iter()
        .map(|w| {
            let mut slots = w.to_vec();
            slots.resize(m, vec![NULL_DOC]);
            let b = reranker.score_window(&query, &slots, &config)?;
            Ok(reranker.pick(&b)[..w.len()].to_vec())
        })
        .collect::<Result<_>>()?;
    Ok(per_window.concat())
}

pub fn score_all(reranker: &Reranker, req: &RerankRequest) -> Result<RerankResult> {
    let start = Instant::now();
    let scores = candidate_scores(reranker, req)?;
    let order = global_order(&scores);
    Ok(RerankResult {
        docids: order.iter().map(|&i| req.candidates[i].docid.clone()).collect(),
        scores: order.iter().map(|&i| scores[i] as f64).collect(),
        order,
        forwards: global_forwards(req.candidates.len(), req.window_size),
        latency: start.elapsed(),
    })
}

pub fn sliding_window_rerank(reranker: &Reranker, req: &RerankRequest) -> Result<RerankResult> {
    check_request(req)?;
    let start = Instant::now();
    let n = req.candidates.len();
    if n <= req.window_size {
        let mut r = score_all(reranker, req)?;
        r.latency = start.elapsed();
        return Ok(r);
    }
    let Strategy::SlidingWindow { stride } = req.strategy else {
        return Err(Error::Config("sliding_window_rerank needs the sliding_window strategy".into()));
    };
    let m = req.window_size;
    let config = reranker.layout_config(m)?;
    let (query, cands) = tokenized(reranker, req);
    let mut order: Vec<usize> = (0..n).collect();
    let mut forwards = 0;
    let mut s = n - m;
    loop {
        let window: Vec<Vec<TokenId>> = order[s..s + m].iter().map(|&i| cands[i].clone()).collect();
        let b = reranker.score_window(&query, &window, &config)?;
        forwards += 1;
        let local = global_order(reranker.pick(&b));
        let reordered: Vec<usize> = local.iter().map(|&j| order[s + j]).collect();
        order[s..s + m].copy_from_slice(&reordered);
        if s < stride {
            break;
        }
        s -= stride;
    }
    Ok(RerankResult {
        docids: order.iter().map(|&i| req.candidates[i].docid.clone()).collect(),
        scores: (0..n).map(|p| (n - p) as f64).collect(),
        order,
        forwards,
        latency: start.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: String,
    pub num_candidates: usize,
    pub forwards: usize,
    pub latency_ms: f64,
}

/// Median latency over `repetitions` (at least 3) runs for every size and strategy.
pub fn latency_bench(
    reranker: &Reranker,
    query: &str,
    candidates: &[Candidate],
    sizes: &[usize],
    strategies: &[Strategy],
    window_size: usize,
    repetitions: usize,
) -> Result<Vec<BenchRow>> {
    let reps = repetitions.max(3);
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("benchmark sizes must be ascending".into()));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        if size > candidates.len() {
            return Err(Error::Config(format!(
                "benchmark size {size} exceeds the {} available candidates",
                candidates.len()
            )));
        }
        for &strategy in strategies {
            let req = RerankRequest {
                query: query.to_string(),
                candidates: candidates[..size].to_vec(),
                window_size,
                strategy,
            };
            let mut times = Vec::with_capacity(reps);
            let mut forwards = 0;
            for _ in 0..reps {
                let r = rerank(reranker, &req)?;
                forwards = r.forwards;
                times.push(r.latency.as_secs_f64() * 1000.0);
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                strategy: strategy.name().to_string(),
                num_candidates: size,
                forwards,
                latency_ms: times[reps / 2],
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("strategy,num_candidates,forwards,latency_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.strategy, r.num_candidates, r.forwards, r.latency_ms));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
