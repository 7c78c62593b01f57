//! Synthetic planted-relevance corpus.
//!
//! Each query is a small set of topic words. A candidate's oracle relevance is
//! the number of query topic words it contains; the rest of its text is filler
//! and topic words from other queries. Training labels are the oracle order
//! with a controlled rate of adjacent-pair swaps, standing in for noisy
//! distilled permutations.

mod io;
mod vocab;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::QrelRecord;
use crate::losses::PermutationLabel;
use crate::{Error, Result};

pub use io::{read_examples, write_examples};
pub use vocab::{
    detokenize, filler_token, identifier_token, tokenize, topic_token, TokenId, Vocab, DOC_END,
    INSTRUCTION, NULL_DOC, PAD, UNK,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub docid: String,
    pub text: String,
}

/// One query with its candidate window and permutation label.
///
/// `permutation[i]` is the rank of candidate `i` (1 = best).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingExample {
    pub qid: String,
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub permutation: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noisy: bool,
}

impl RankingExample {
    pub fn label(&self) -> Result<PermutationLabel> {
        PermutationLabel::new(self.permutation.clone())
    }

    /// Candidate indices ordered best first according to the label.
    pub fn label_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.permutation.len()).collect();
        order.sort_by_key(|&i| self.permutation[i]);
        order
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub topic_pool: usize,
    pub topics_per_query: usize,
    /// Sampling weights for the number of query topics a candidate contains,
    /// indexed `0..=topics_per_query`.
    pub overlap_weights: Vec<f64>,
    pub min_candidate_len: usize,
    pub max_candidate_len: usize,
    /// Probability that an adjacent pair of the oracle order is inverted in the label.
    pub label_noise: f64,
    /// Fraction of training examples given a scrambled label and flagged `noisy`.
    pub noisy_fraction: f64,
    /// Probability that a non-query word in a candidate is a foreign topic word.
    pub distractor_rate: f64,
    pub num_slots: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub eval_candidates: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            topic_pool: 512,
            topics_per_query: 3,
            overlap_weights: vec![0.45, 0.25, 0.18, 0.12],
            min_candidate_len: 6,
            max_candidate_len: 8,
            label_noise: 0.05,
            noisy_fraction: 0.0,
            distractor_rate: 0.0,
            num_slots: 20,
            train_queries: 2000,
            eval_queries: 200,
            eval_candidates: 100,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.topics_per_query == 0 || self.topic_pool < 2 * self.topics_per_query {
            return bad("topic pool must hold at least two queries' worth of topics");
        }
        if self.overlap_weights.len() != self.topics_per_query + 1
            || self.overlap_weights.iter().any(|w| !(*w >= 0.0))
            || self.overlap_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("overlap_weights needs topics_per_query + 1 non-negative weights");
        }
        if self.min_candidate_len < self.topics_per_query || self.max_candidate_len < self.min_candidate_len {
            return bad("candidate length range must cover topics_per_query");
        }
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("noisy_fraction", self.noisy_fraction),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.num_slots == 0 || self.train_queries == 0 || self.eval_queries == 0 || self.eval_candidates == 0 {
            return bad("all counts must be positive");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::synthetic(self.vocab_size, self.num_slots, self.topic_pool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub vocab: Vocab,
    pub train: Vec<RankingExample>,
    pub eval: Vec<RankingExample>,
    pub qrels: Vec<QrelRecord>,
}

/// Deterministic per-stream seed derivation (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

pub fn generate(config: &GenConfig) -> Result<GeneratedData> {
    config.validate()?;
    let vocab = config.vocab()?;
    let fillers = vocab.filler_count();
    if fillers == 0 {
        return Err(Error::Config("vocab leaves no room for filler words".into()));
    }
    let gen = Generator { config, fillers };
    let train = (0..config.train_queries)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRAIN_STREAM, i as u64));
            gen.example(&mut rng, format!("train{i:05}"), config.num_slots, true)
        })
        .collect();
    let eval: Vec<RankingExample> = (0..config.eval_queries)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EVAL_STREAM, i as u64));
            gen.example(&mut rng, format!("eval{i:04}"), config.eval_candidates, false)
        })
        .collect();
    let qrels = qrels_for(&eval);
    Ok(GeneratedData {
        vocab,
        train,
        eval,
        qrels,
    })
}

/// Graded judgments from each example's oracle relevance.
pub fn qrels_for(examples: &[RankingExample]) -> Vec<QrelRecord> {
    examples
        .iter()
        .flat_map(|ex| {
            let rel = ex.relevance.clone().unwrap_or_default();
            ex.candidates.iter().zip(rel).map(move |(c, r)| QrelRecord {
                qid: ex.qid.clone(),
                docid: c.docid.clone(),
                relevance: r,
            })
        })
        .collect()
}

/// Drops examples flagged as noisy.
pub fn filter_noisy(examples: Vec<RankingExample>) -> Vec<RankingExample> {
    examples.into_iter().filter(|e| !e.noisy).collect()
}

/// Number of query topic words contained in `text`.
pub fn planted_relevance(query: &str, text: &str) -> u32 {
    let topics: std::collections::HashSet<&str> = query.split_whitespace().collect();
    let mut seen = std::collections::HashSet::new();
    text.split_whitespace()
        .filter(|w| topics.contains(w) && seen.insert(*w))
        .count() as u32
}

/// Candidate indices best first: relevance descending, doc id ascending.
pub fn oracle_order(candidates: &[Candidate], relevance: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        relevance[b]
            .cmp(&relevance[a])
            .then_with(|| candidates[a].docid.cmp(&candidates[b].docid))
    });
    order
}

/// Inverts each adjacent pair of `order` with probability `rate`. Runs of
/// consecutive selected pairs are reversed, so exactly the selected adjacent
/// pairs end up inverted.
pub fn add_adjacent_noise(order: &[usize], rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let n = order.len();
    let flips: Vec<bool> = (0..n.saturating_sub(1)).map(|_| rng.random_bool(rate)).collect();
    let mut out = order.to_vec();
    let mut i = 0;
    while i < flips.len() {
        if flips[i] {
            let start = i;
            while i < flips.len() && flips[i] {
                i += 1;
            }
            out[start..=i].reverse();
        } else {
            i += 1;
        }
    }
    out
}

/// Converts a best-first order of candidate indices into 1-based ranks.
pub fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &c) in order.iter().enumerate() {
        ranks[c] = pos + 1;
    }
    ranks
}

struct Generator<'a> {
    config: &'a GenConfig,
    fillers: usize,
}

impl Generator<'_> {
    fn example(&self, rng: &mut ChaCha8Rng, qid: String, count: usize, training: bool) -> RankingExample {
        let cfg = self.config;
        let topics: Vec<usize> = rand::seq::index::sample(rng, cfg.topic_pool, cfg.topics_per_query).into_vec();
        let query = topics.iter().map(|&t| topic_token(t)).collect::<Vec<_>>().join(" ");
        let total: f64 = cfg.overlap_weights.iter().sum();

        let mut candidates = Vec::with_capacity(count);
        let mut relevance = Vec::with_capacity(count);
        for j in 0..count {
            let mut u = rng.random::<f64>() * total;
            let mut k = cfg.topics_per_query;
            for (i, w) in cfg.overlap_weights.iter().enumerate() {
                if u < *w {
                    k = i;
                    break;
                }
                u -= w;
            }
            let len = rng.random_range(cfg.min_candidate_len..=cfg.max_candidate_len);
            let mut words: Vec<String> = rand::seq::index::sample(rng, topics.len(), k)
                .into_iter()
                .map(|i| topic_token(topics[i]))
                .collect();
            while words.len() < len {
                if rng.random_bool(cfg.distractor_rate) {
                    let t = rng.random_range(0..cfg.topic_pool);
                    if !topics.contains(&t) {
                        words.push(topic_token(t));
                    }
                } else {
                    words.push(filler_token(rng.random_range(0..self.fillers)));
                }
            }
            words.shuffle(rng);
            candidates.push(Candidate {
                docid: format!("{qid}-d{j:04}"),
                text: words.join(" "),
            });
            relevance.push(k as u32);
        }

        let oracle = oracle_order(&candidates, &relevance);
        let mut noisy = false;
        let order = if training {
            if cfg.noisy_fraction > 0.0 && rng.random_bool(cfg.noisy_fraction) {
                noisy = true;
                let mut o = oracle.clone();
                o.shuffle(rng);
                o
            } else {
                add_adjacent_noise(&oracle, cfg.label_noise, rng)
            }
        } else {
            oracle
        };
        RankingExample {
            qid,
            query,
            candidates,
            permutation: ranks_from_order(&order),
            relevance: Some(relevance),
            noisy,
        }
    }
}
