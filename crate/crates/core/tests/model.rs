use listrank::datagen::Vocab;
use listrank::engine::{finite_diff_check_many, EngineError, Graph, Real, Tensor, Var};
use listrank::layout::{build_layout, LayoutConfig};
use listrank::model::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_model() -> (Parameters, LayoutConfig) {
    let vocab = Vocab::synthetic(2048, 20, 512).unwrap();
    let params = init_params(&ModelConfig::default()).unwrap();
    (params, LayoutConfig::from_vocab(&vocab, 20, 16).unwrap())
}

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    (0..rng.random_range(lo..hi)).map(|_| rng.random_range(60..2048)).collect()
}

#[test]
fn point_scores_ignore_other_candidates() {
    let (params, cfg) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let query = words(&mut rng, 2, 5);
    let cands: Vec<Vec<usize>> = (0..20).map(|_| words(&mut rng, 1, 20)).collect();
    let base = forward(&params, &build_layout(&query, &cands, &cfg).unwrap()).unwrap();
    for j in 0..20 {
        let mut changed = cands.clone();
        changed[j] = words(&mut rng, 1, 20);
        let out = forward(&params, &build_layout(&query, &changed, &cfg).unwrap()).unwrap();
        for k in (0..20).filter(|&k| k != j) {
            assert!((out.ps[k] - base.ps[k]).abs() < 1e-6, "replacing {j} moved ps[{k}]");
        }
    }
}

#[test]
fn list_scores_do_depend_on_other_candidates() {
    let (params, cfg) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let query = words(&mut rng, 2, 5);
    let cands: Vec<Vec<usize>> = (0..20).map(|_| words(&mut rng, 3, 10)).collect();
    let base = forward(&params, &build_layout(&query, &cands, &cfg).unwrap()).unwrap();
    let mut changed = cands.clone();
    changed[3] = words(&mut rng, 3, 10);
    let out = forward(&params, &build_layout(&query, &changed, &cfg).unwrap()).unwrap();
    assert!((out.ls[0] - base.ls[0]).abs() > 0.0);
}

#[test]
fn permuting_blocks_permutes_both_views() {
    let (params, cfg) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let query = words(&mut rng, 2, 5);
        let cands: Vec<Vec<usize>> = (0..20).map(|_| words(&mut rng, 1, 20)).collect();
        let base = forward(&params, &build_layout(&query, &cands, &cfg).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<usize>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let out = forward(&params, &build_layout(&query, &shuffled, &cfg).unwrap()).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert!((out.ls[slot] - base.ls[src]).abs() < 1e-6);
            assert!((out.ps[slot] - base.ps[src]).abs() < 1e-6);
        }
    }
}

fn tiny_config(position: PositionScheme) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 40,
        position,
        max_position: 32,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn tiny_layout_config(m: usize) -> LayoutConfig {
    LayoutConfig {
        instruction: vec![4, 5],
        max_candidate_tokens: 5,
        num_slots: m,
        doc_end: 2,
        identifiers: (0..m).map(|k| 30 + k).collect(),
    }
}

/// Parameters with a wider spread than the default init, so every gradient is far from zero.
fn spread_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Parameters {
    let mut p = init_params(config).unwrap();
    for t in &mut p.tensors {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3) as Real;
        }
    }
    p
}

#[test]
fn model_gradients_match_finite_differences() {
    for position in [PositionScheme::Rotary, PositionScheme::LearnedAbsolute] {
        let config = tiny_config(position);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = spread_params(&config, &mut rng);
            let m = rng.random_range(1..=3);
            let cands: Vec<Vec<usize>> = (0..m)
                .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(6..30)).collect())
                .collect();
            let layout = build_layout(&[7, 8], &cands, &tiny_layout_config(m)).unwrap();
            let w_ls: Vec<Real> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w_ps: Vec<Real> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |g: &mut Graph, vars: &[Var]| -> Result<Var, EngineError> {
                let out = forward_graph(g, &config, vars, &layout, None).map_err(|e| match e {
                    listrank::Error::Engine(e) => e,
                    other => panic!("{other}"),
                })?;
                let a = g.constant(Tensor::matrix(m, 1, w_ls.clone()));
                let b = g.constant(Tensor::matrix(m, 1, w_ps.clone()));
                let x = g.mul(out.ls, a);
                let y = g.mul(out.ps, b);
                let s = g.add(x, y);
                Ok(g.sum(s))
            };
            let err = finite_diff_check_many(f, &params.tensors, 1e-5).unwrap();
            assert!(err < 1e-4, "{position:?} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn forward_is_reproducible_across_calls_and_batches() {
    let (params, cfg) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let layouts: Vec<_> = (0..4)
        .map(|_| {
            let q = words(&mut rng, 2, 5);
            let c: Vec<Vec<usize>> = (0..20).map(|_| words(&mut rng, 1, 20)).collect();
            build_layout(&q, &c, &cfg).unwrap()
        })
        .collect();
    let a = forward_batch(&params, &layouts).unwrap();
    let b = forward_batch(&params, &layouts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[2], forward(&params, &layouts[2]).unwrap());
}

#[test]
fn learned_absolute_positions_keep_locality() {
    let config = ModelConfig {
        position: PositionScheme::LearnedAbsolute,
        ..ModelConfig::default()
    };
    let params = init_params(&config).unwrap();
    let (_, cfg) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let query = words(&mut rng, 2, 5);
    let cands: Vec<Vec<usize>> = (0..20).map(|_| words(&mut rng, 1, 20)).collect();
    let base = forward(&params, &build_layout(&query, &cands, &cfg).unwrap()).unwrap();
    let mut changed = cands.clone();
    changed[0] = words(&mut rng, 1, 20);
    let out = forward(&params, &build_layout(&query, &changed, &cfg).unwrap()).unwrap();
    for k in 1..20 {
        assert!((out.ps[k] - base.ps[k]).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_windows_are_equivariant(seed in any::<u64>(), m in 1usize..=5) {
        let config = tiny_config(PositionScheme::Rotary);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spread_params(&config, &mut rng);
        let cands: Vec<Vec<usize>> = (0..m)
            .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(6..30)).collect())
            .collect();
        let cfg = tiny_layout_config(m);
        let base = forward(&params, &build_layout(&[7, 8], &cands, &cfg).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<usize>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let out = forward(&params, &build_layout(&[7, 8], &shuffled, &cfg).unwrap()).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            prop_assert!((out.ls[slot] - base.ls[src]).abs() < 1e-9);
            prop_assert!((out.ps[slot] - base.ps[src]).abs() < 1e-9);
        }
    }
}
