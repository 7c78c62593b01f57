use std::sync::Arc;

use listrank::layout::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DOC_END: usize = 2;

fn config(m: usize, max_candidate_tokens: usize) -> LayoutConfig {
    LayoutConfig {
        instruction: vec![10, 11, 12],
        max_candidate_tokens,
        num_slots: m,
        doc_end: DOC_END,
        identifiers: (0..m).map(|k| 500 + k).collect(),
    }
}

fn random_input(rng: &mut ChaCha8Rng, m: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let query = (0..rng.random_range(1..6)).map(|_| rng.random_range(20..400)).collect();
    let cands = (0..m)
        .map(|_| (0..rng.random_range(1..30)).map(|_| rng.random_range(20..400)).collect())
        .collect();
    (query, cands)
}

#[test]
fn thousand_random_layouts_validate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let m = rng.random_range(1..=20);
        let cfg = config(m, rng.random_range(2..=16));
        let (q, c) = random_input(&mut rng, m);
        let l = build_layout(&q, &c, &cfg).unwrap();
        assert_eq!(validate_layout(&l, &cfg), Ok(()), "example {i}");
    }
}

/// Segment of every token, derived from the raw inputs rather than the layout.
fn reference_segments(q: &[usize], c: &[Vec<usize>], cfg: &LayoutConfig) -> Vec<Segment> {
    let mut s = vec![Segment::Prefix; cfg.instruction.len() + q.len()];
    for (k, cand) in c.iter().enumerate() {
        let len = cand.len().min(cfg.max_candidate_tokens - 1) + 1;
        s.extend(std::iter::repeat(Segment::Candidate(k)).take(len));
    }
    s.extend((0..c.len()).map(Segment::Identifier));
    s
}

#[test]
fn permit_matrix_is_exact_for_selected_window_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in [1, 2, 5, 20] {
        let cfg = config(m, 8);
        let (q, c) = random_input(&mut rng, m);
        let l = build_layout(&q, &c, &cfg).unwrap();
        let segs = reference_segments(&q, &c, &cfg);
        assert_eq!(l.segments, segs);
        for i in 0..l.len() {
            for j in 0..l.len() {
                let allowed = l.permits(i, j);
                match (segs[i], segs[j]) {
                    (Segment::Identifier(a), Segment::Identifier(b)) => {
                        assert_eq!(allowed, a == b, "identifier isolation m={m} ({i},{j})")
                    }
                    (Segment::Identifier(_), _) => assert!(allowed, "identifier visibility m={m} ({i},{j})"),
                    (Segment::Candidate(a), Segment::Candidate(b)) => {
                        assert_eq!(allowed, a == b && j <= i, "candidate independence m={m} ({i},{j})")
                    }
                    (Segment::Candidate(_), Segment::Prefix) => assert!(allowed),
                    (Segment::Candidate(_), Segment::Identifier(_)) => assert!(!allowed),
                    (Segment::Prefix, Segment::Prefix) => assert_eq!(allowed, j <= i),
                    (Segment::Prefix, _) => assert!(!allowed),
                }
            }
        }
    }
}

#[test]
fn example_positions() {
    // 3 instruction + 3 query tokens, blocks of 3 and 5 tokens including <doc_end>
    let cfg = LayoutConfig {
        instruction: vec![10, 11, 12],
        ..config(2, 8)
    };
    let l = build_layout(&[20, 21, 22], &[vec![30, 31], vec![40, 41, 42, 43]], &cfg).unwrap();
    assert_eq!(l.prefix_len, 6);
    assert_eq!(&l.positions[6..9], &[6, 7, 8]);
    assert_eq!(&l.positions[9..14], &[6, 7, 8, 9, 10]);
    assert_eq!(l.positions[l.idx_id[0]], 11);
    assert_eq!(l.positions[l.idx_id[1]], 11);
    assert_eq!(l.idx_st, vec![8, 13]);
}

fn with_permit(l: &SequenceLayout, edits: &[(usize, usize, bool)]) -> SequenceLayout {
    let n = l.len();
    let mut p = (*l.permit).clone();
    for &(i, j, v) in edits {
        p[i * n + j] = v;
    }
    SequenceLayout {
        permit: Arc::new(p),
        ..l.clone()
    }
}

#[test]
fn every_injected_fault_is_flagged() {
    let cfg = config(3, 8);
    let l = build_layout(&[20, 21], &[vec![30, 31], vec![32], vec![33, 34, 35]], &cfg).unwrap();
    assert_eq!(validate_layout(&l, &cfg), Ok(()));
    let p = l.prefix_len;
    let n = l.len();
    let (st, id) = (l.idx_st.clone(), l.idx_id.clone());

    let mut faults: Vec<(&str, SequenceLayout)> = vec![
        ("identifier cross-attention", with_permit(&l, &[(id[2], id[0], true)])),
        ("candidate cross-attention", with_permit(&l, &[(st[1], st[0], true)])),
        ("attention to a later segment", with_permit(&l, &[(p - 1, st[0], true)])),
        ("attention to a later segment", with_permit(&l, &[(st[0], id[0], true)])),
        ("missing permission", with_permit(&l, &[(id[1], st[2], false)])),
        ("empty attention row", with_permit(&l, &[(0, 0, false)])),
    ];
    let mut shifted = l.clone();
    shifted.positions[p + 1] += 1;
    faults.push(("non-identical candidate positions", shifted));
    let mut prefix = l.clone();
    prefix.positions[1] = 7;
    faults.push(("prefix positions", prefix));
    let mut ident = l.clone();
    ident.positions[id[1]] += 1;
    faults.push(("identifier position", ident));
    let mut doc_end = l.clone();
    doc_end.tokens[st[1]] = 99;
    faults.push(("missing <doc_end>", doc_end));
    let mut wrong_id = l.clone();
    wrong_id.tokens.swap(id[0], id[1]);
    faults.push(("wrong identifier token", wrong_id));
    let mut order = l.clone();
    order.segments[n - 1] = Segment::Candidate(0);
    faults.push(("segment order", order));
    let mut short = l.clone();
    short.positions.pop();
    faults.push(("shape", short));
    let mut missing = l.clone();
    missing.idx_id.pop();
    faults.push(("slot index count", missing));

    for (expected, bad) in faults {
        let errs = validate_layout(&bad, &cfg).expect_err(expected);
        assert!(
            errs.iter().any(|e| e.to_string().starts_with(expected)),
            "{expected}: got {:?}",
            errs.iter().map(|e| e.to_string()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn long_candidates_are_cut_but_keep_doc_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let cap = rng.random_range(2..=10);
        let cfg = config(4, cap);
        let (q, c) = random_input(&mut rng, 4);
        let l = build_layout(&q, &c, &cfg).unwrap();
        for k in 0..4 {
            let block = l.segments.iter().filter(|s| **s == Segment::Candidate(k)).count();
            assert_eq!(block, c[k].len().min(cap - 1) + 1);
            assert_eq!(l.tokens[l.idx_st[k]], DOC_END);
        }
    }
}
