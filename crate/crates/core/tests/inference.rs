use listrank::datagen::{generate, Candidate, GenConfig, Vocab};
use listrank::evalkit::{position_bias_experiment, OrderMode};
use listrank::inference::*;
use listrank::model::{init_params, ModelConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_reranker() -> Reranker {
    let vocab = Vocab::synthetic(300, 8, 64).unwrap();
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 300,
        ..ModelConfig::default()
    };
    Reranker::new(init_params(&config).unwrap(), vocab, 6)
}

fn candidates(n: usize, rng: &mut ChaCha8Rng) -> Vec<Candidate> {
    (0..n)
        .map(|i| Candidate {
            docid: format!("d{i}"),
            text: (0..rng.random_range(1..8))
                .map(|_| format!("t{}", rng.random_range(0..64)))
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect()
}

fn request(cands: Vec<Candidate>, window_size: usize, strategy: Strategy) -> RerankRequest {
    RerankRequest {
        query: "t1 t2 t3".into(),
        candidates: cands,
        window_size,
        strategy,
    }
}

#[test]
fn forward_counts_follow_the_formulas() {
    let rr = tiny_reranker();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, m, stride) in [(9, 3, 1), (10, 4, 2), (17, 5, 3), (20, 8, 4), (23, 8, 5), (8, 8, 2), (12, 3, 3)] {
        let cands = candidates(n, &mut rng);
        let g = rerank(&rr, &request(cands.clone(), m, Strategy::GlobalScore)).unwrap();
        assert_eq!(g.forwards, n.div_ceil(m), "global ({n},{m})");
        let s = rerank(&rr, &request(cands, m, Strategy::SlidingWindow { stride })).unwrap();
        assert_eq!(s.forwards, (n - m) / stride + 1, "sliding ({n},{m},{stride})");
        let mut seen = s.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn hundred_candidates_window_twenty_stride_ten() {
    assert_eq!(sliding_forwards(100, 20, 10), 9);
    assert_eq!(global_forwards(100, 20), 5);
    assert_eq!(global_forwards(101, 20), 6);
}

#[test]
fn point_view_ranking_ignores_partition() {
    let mut rr = tiny_reranker();
    rr.use_point_scores = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cands = candidates(30, &mut rng);
    let a = score_all(&rr, &request(cands.clone(), 8, Strategy::GlobalScore)).unwrap();
    let mut shuffled = cands.clone();
    shuffled.shuffle(&mut rng);
    let b = score_all(&rr, &request(shuffled, 5, Strategy::GlobalScore)).unwrap();
    assert_eq!(a.docids, b.docids);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn single_window_ranking_ignores_input_order() {
    let rr = tiny_reranker();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cands = candidates(8, &mut rng);
    let a = score_all(&rr, &request(cands.clone(), 8, Strategy::GlobalScore)).unwrap();
    let mut rev = cands.clone();
    rev.reverse();
    let b = score_all(&rr, &request(rev, 8, Strategy::GlobalScore)).unwrap();
    assert_eq!(a.docids, b.docids);
}

#[test]
fn short_lists_are_padded_not_rejected() {
    let rr = tiny_reranker();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..8 {
        let r = rerank(&rr, &request(candidates(n, &mut rng), 8, Strategy::GlobalScore)).unwrap();
        assert_eq!(r.order.len(), n);
        assert_eq!(r.forwards, 1);
    }
    assert!(rerank(&rr, &request(vec![], 8, Strategy::GlobalScore)).is_err());
}

#[test]
fn scores_are_sorted_and_match_the_order() {
    let rr = tiny_reranker();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cands = candidates(25, &mut rng);
    let r = score_all(&rr, &request(cands.clone(), 8, Strategy::GlobalScore)).unwrap();
    assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    for (i, &c) in r.order.iter().enumerate() {
        assert_eq!(r.docids[i], cands[c].docid);
    }
    let raw = candidate_scores(&rr, &request(cands, 8, Strategy::GlobalScore)).unwrap();
    assert_eq!(global_order(&raw), r.order);
}

#[test]
fn desk_model_has_no_position_bias_within_a_window() {
    let data = generate(&GenConfig {
        train_queries: 1,
        eval_queries: 10,
        eval_candidates: 20,
        ..GenConfig::default()
    })
    .unwrap();
    let params = init_params(&ModelConfig::default()).unwrap();
    let rr = Reranker::new(params, data.vocab.clone(), 16);
    let report = position_bias_experiment(&rr, &data.eval, &data.qrels, &OrderMode::ALL, 20, 7).unwrap();
    assert!(report.identical_rankings(), "{:?}", report.max_rank_disagreement);
    let n0 = report.rows[0].mean_ndcg;
    assert!(report.rows.iter().all(|r| r.mean_ndcg == n0));
}

#[test]
fn bench_reports_every_size_and_strategy() {
    let rr = tiny_reranker();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cands = candidates(40, &mut rng);
    let strategies = [Strategy::GlobalScore, Strategy::SlidingWindow { stride: 4 }];
    let rows = latency_bench(&rr, "t1 t2", &cands, &[10, 20, 40], &strategies, 8, 3).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[4].forwards, 5);
    assert_eq!(rows[5].forwards, (40 - 8) / 4 + 1);
    assert!(latency_bench(&rr, "t1", &cands, &[20, 10], &strategies, 8, 3).is_err());
    assert!(latency_bench(&rr, "t1", &cands, &[50], &strategies, 8, 3).is_err());
}
