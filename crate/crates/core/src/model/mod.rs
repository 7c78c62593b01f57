//! Decoder-only transformer with list-view and point-view score heads.
//!
//! Per layer: pre-norm multi-head attention restricted to `layout.permit`,
//! then a pre-norm GELU feed-forward block, both residual. A final layer norm
//! feeds two affine `d -> 1` heads: the list head reads identifier states,
//! the point head reads `<doc_end>` states.
//!
//! Each token embedding is summed with a segment-kind embedding (prefix,
//! candidate or identifier) so that values can tell query words from
//! candidate words; with rotary encoding nothing else in the residual stream
//! does.
//!
//! Identifier tokens share one embedding row, so the identifier of slot `k`
//! is told apart from the others only through a learned per-head bias added
//! to its attention logits over block `k`. Together with identical positions
//! this makes the model equivariant to permuting candidate slots.
//!
//! Parameter count, with `V` vocabulary, `d` width, `L` layers, `H` heads,
//! `F` feed-forward width and `P` maximum position:
//!
//! ```text
//! V*d + 3d + [P*d if learned-absolute] + L*(4d^2 + 5d + H + 2dF + F) + 2d + 2(d + 1)
//! ```

mod checkpoint;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Real, Tensor, Var};
use crate::layout::{Segment, SequenceLayout};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    Rotary,
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub position: PositionScheme,
    /// Largest position index the model accepts, exclusive.
    pub max_position: usize,
    pub dropout: f64,
    pub rope_base: f64,
    /// Initial value of the identifier-to-own-block attention bias.
    pub own_block_bias_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 2048,
            position: PositionScheme::Rotary,
            max_position: 128,
            dropout: 0.0,
            rope_base: 10000.0,
            own_block_bias_init: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.position == PositionScheme::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return bad("rotary encoding needs an even head width".into());
        }
        if self.vocab_size < 4 || self.max_position == 0 {
            return bad("vocab_size and max_position too small".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, h) = (self.d_model, self.d_ff, self.n_heads);
        let mut s = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("seg_emb".to_string(), vec![SEGMENT_KINDS, d]),
        ];
        if self.position == PositionScheme::LearnedAbsolute {
            s.push(("pos_emb".into(), vec![self.max_position, d]));
        }
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            s.push((p("ln1_gain"), vec![d]));
            s.push((p("ln1_bias"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                s.push((p(w), vec![d, d]));
            }
            s.push((p("own_bias"), vec![h]));
            s.push((p("ln2_gain"), vec![d]));
            s.push((p("ln2_bias"), vec![d]));
            s.push((p("w1"), vec![d, f]));
            s.push((p("b1"), vec![f]));
            s.push((p("w2"), vec![f, d]));
            s.push((p("b2"), vec![d]));
        }
        s.push(("lnf_gain".into(), vec![d]));
        s.push(("lnf_bias".into(), vec![d]));
        s.push(("list_head.weight".into(), vec![d, 1]));
        s.push(("list_head.bias".into(), vec![1]));
        s.push(("point_head.weight".into(), vec![d, 1]));
        s.push(("point_head.bias".into(), vec![1]));
        s
    }
}

const PER_LAYER: usize = 13;

/// Prefix, candidate and identifier rows of the segment embedding.
const SEGMENT_KINDS: usize = 3;

fn segment_kind(s: Segment) -> usize {
    match s {
        Segment::Prefix => 0,
        Segment::Candidate(_) => 1,
        Segment::Identifier(_) => 2,
    }
}

/// All trainable tensors, stored flat in [`ModelConfig::tensor_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Positions of the tensors in [`Parameters::tensors`].
struct Index {
    pos_emb: Option<usize>,
    layers: usize,
    tail: usize,
}

impl Index {
    fn new(c: &ModelConfig) -> Self {
        let learned = c.position == PositionScheme::LearnedAbsolute;
        let base = if learned { 3 } else { 2 };
        Self {
            pos_emb: learned.then_some(2),
            layers: base,
            tail: base + PER_LAYER * c.n_layers,
        }
    }

    fn layer(&self, l: usize, offset: usize) -> usize {
        self.layers + l * PER_LAYER + offset
    }
}

impl Parameters {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.config.tensor_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }
}

pub fn init_params(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let tensors = config
        .tensor_specs()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data: Vec<Real> = if leaf.ends_with("gain") {
                vec![1.0; n]
            } else if leaf == "own_bias" {
                vec![config.own_block_bias_init as Real; n]
            } else if leaf.starts_with('b') || leaf.ends_with("bias") {
                vec![0.0; n]
            } else {
                let scale = if leaf == "wo" || leaf == "w2" { residual } else { 1.0 };
                (0..n).map(|_| (normal.sample(&mut rng) * scale) as Real).collect()
            };
            Tensor::new(shape, data)
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        tensors,
    })
}

/// List-view and point-view scores of one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub ls: Vec<Real>,
    pub ps: Vec<Real>,
}

/// Handles produced by recording a forward pass.
pub struct ForwardVars {
    /// Final normalized hidden states, `[len, d]`.
    pub hidden: Var,
    /// `[M, 1]`.
    pub ls: Var,
    /// `[M, 1]`.
    pub ps: Var,
}

/// Records the forward pass on `g`. `params` holds one var per parameter
/// tensor. Dropout is applied only when `dropout_rng` is given.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    params: &[Var],
    layout: &SequenceLayout,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    let n = layout.len();
    if layout.max_position() >= config.max_position {
        return Err(Error::Config(format!(
            "layout reaches position {} but the model supports positions below {}",
            layout.max_position(),
            config.max_position
        )));
    }
    if let Some(&bad) = layout.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary")));
    }
    let idx = Index::new(config);
    let (d, heads, dh) = (config.d_model, config.n_heads, config.head_dim());

    // identifiers are embedded with the first identifier's row
    let mut tokens = layout.tokens.clone();
    if let Some(&first) = layout.idx_id.first() {
        let shared = layout.tokens[first];
        for &i in &layout.idx_id {
            tokens[i] = shared;
        }
    }
    let mut x = g.gather(params[0], &tokens);
    let kinds: Vec<usize> = layout.segments.iter().map(|s| segment_kind(*s)).collect();
    let seg = g.gather(params[1], &kinds);
    x = g.add(x, seg);
    if let Some(p) = idx.pos_emb {
        let pe = g.gather(params[p], &layout.positions);
        x = g.add(x, pe);
    }
    let positions = Arc::new(layout.positions.clone());
    let own_mask = g.constant(own_block_mask(layout));
    let dropout = config.dropout as Real;

    for l in 0..config.n_layers {
        let w = |o: usize| params[idx.layer(l, o)];
        let h = g.layer_norm(x, w(0), w(1), 1e-5);
        let mut q = g.matmul(h, w(2));
        let mut k = g.matmul(h, w(3));
        let v = g.matmul(h, w(4));
        if config.position == PositionScheme::Rotary {
            q = g.rope(q, positions.clone(), heads, config.rope_base as Real);
            k = g.rope(k, positions.clone(), heads, config.rope_base as Real);
        }
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (a, b) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice(q, 1, a, b);
            let kh = g.slice(k, 1, a, b);
            let vh = g.slice(v, 1, a, b);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, 1.0 / (dh as Real).sqrt());
            let bias_h = g.slice(w(6), 0, hd, hd + 1);
            let bias = g.scale_by(own_mask, bias_h);
            let logits = g.add(logits, bias);
            let att = g.masked_softmax(logits, layout.permit.clone())?;
            outs.push(g.matmul(att, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1) };
        let mut o = g.matmul(cat, w(5));
        if let Some(rng) = dropout_rng.as_deref_mut() {
            o = apply_dropout(g, o, dropout, rng);
        }
        x = g.add(x, o);

        let h = g.layer_norm(x, w(7), w(8), 1e-5);
        let f = g.matmul(h, w(9));
        let f = g.add_row(f, w(10));
        let f = g.gelu(f);
        let f = g.matmul(f, w(11));
        let mut f = g.add_row(f, w(12));
        if let Some(rng) = dropout_rng.as_deref_mut() {
            f = apply_dropout(g, f, dropout, rng);
        }
        x = g.add(x, f);
    }
    let t = idx.tail;
    let hidden = g.layer_norm(x, params[t], params[t + 1], 1e-5);
    debug_assert_eq!(g.value(hidden).dims2(), (n, d));

    let id_states = g.select_rows(hidden, &layout.idx_id);
    let ls = g.matmul(id_states, params[t + 2]);
    let ls = g.add_row(ls, params[t + 3]);
    let st_states = g.select_rows(hidden, &layout.idx_st);
    let ps = g.matmul(st_states, params[t + 4]);
    let ps = g.add_row(ps, params[t + 5]);
    Ok(ForwardVars { hidden, ls, ps })
}

/// 1 where an identifier row meets a token of its own block.
fn own_block_mask(layout: &SequenceLayout) -> Tensor {
    let n = layout.len();
    let mut m = vec![0.0; n * n];
    for (i, si) in layout.segments.iter().enumerate() {
        if let Segment::Identifier(k) = si {
            for (j, sj) in layout.segments.iter().enumerate() {
                if *sj == Segment::Candidate(*k) {
                    m[i * n + j] = 1.0;
                }
            }
        }
    }
    Tensor::matrix(n, n, m)
}

fn apply_dropout(g: &mut Graph, x: Var, p: Real, rng: &mut ChaCha8Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<Real> = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < p as f64 { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask));
    g.mul(x, m)
}

fn record_inference(params: &Parameters, layout: &SequenceLayout) -> Result<(Graph, ForwardVars)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let out = forward_graph(&mut g, &params.config, &vars, layout, None)?;
    Ok((g, out))
}

/// Scores of one window, without dropout.
pub fn forward(params: &Parameters, layout: &SequenceLayout) -> Result<ScoreBundle> {
    let (g, out) = record_inference(params, layout)?;
    Ok(ScoreBundle {
        ls: g.value(out.ls).data().to_vec(),
        ps: g.value(out.ps).data().to_vec(),
    })
}

/// Final normalized hidden states `[len, d]`.
pub fn hidden_states(params: &Parameters, layout: &SequenceLayout) -> Result<Tensor> {
    let (g, out) = record_inference(params, layout)?;
    Ok(g.value(out.hidden).clone())
}

/// [`forward`] over many layouts, run in parallel. Errors carry the layout index.
pub fn forward_batch(params: &Parameters, layouts: &[SequenceLayout]) -> Result<Vec<ScoreBundle>> {
    layouts
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            forward(params, l).map_err(|e| Error::Batch {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
