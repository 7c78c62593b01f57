//! Mini-batch training.
//!
//! A step runs every example of the batch through its own graph, evaluates
//! the objective on the resulting scores, and pushes the score adjoints back
//! through each example graph. Per-example parameter gradients are summed in
//! batch order, so results do not depend on thread scheduling.

mod optim;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, tokenize, RankingExample, Vocab};
use crate::engine::{Graph, Real, Tensor, Var};
use crate::layout::{build_layout, LayoutConfig, SequenceLayout};
use crate::losses::{final_loss_graph, LossBreakdown, LossConfig, PermutationLabel};
use crate::model::{forward_graph, init_params, save_checkpoint, Checkpoint, ModelConfig, Parameters};
use crate::{Error, Result};

pub use optim::{clip_global_norm, global_norm, AdamW};

const SHUFFLE_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Window size `M` every training example must have.
    pub num_slots: usize,
    pub max_candidate_tokens: usize,
    pub seed: u64,
    /// Overwritten with the current parameters at the end of every epoch.
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            loss: LossConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            num_slots: 20,
            max_candidate_tokens: 16,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate must be >= 0 and clip_norm > 0".into()));
        }
        if !(self.loss.tau >= 0.0) {
            return Err(Error::Config("tau must be >= 0".into()));
        }
        if !(self.loss.calibration_weight >= 0.0 && self.loss.calibration_weight.is_finite()) {
            return Err(Error::Config("calibration_weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub queries: usize,
    pub list_loss: f64,
    pub point_loss: f64,
    pub calibration_loss: f64,
    pub total_loss: f64,
    pub batch_variance: f64,
    pub gate_open: bool,
    pub calibration_active: bool,
    /// Norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

/// A training example reduced to what a step needs.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub qid: String,
    pub layout: SequenceLayout,
    pub label: PermutationLabel,
}

/// Tokenizes and lays out every example; errors name the offending example.
pub fn prepare_examples(dataset: &[RankingExample], vocab: &Vocab, layout: &LayoutConfig) -> Result<Vec<PreparedExample>> {
    dataset
        .iter()
        .map(|ex| {
            let wrap = |e: Error| Error::Example {
                qid: ex.qid.clone(),
                message: e.to_string(),
            };
            if ex.candidates.len() != layout.num_slots {
                return Err(Error::Example {
                    qid: ex.qid.clone(),
                    message: format!("has {} candidates, expected {}", ex.candidates.len(), layout.num_slots),
                });
            }
            let q = tokenize(&ex.query, vocab);
            let c: Vec<_> = ex.candidates.iter().map(|c| tokenize(&c.text, vocab)).collect();
            Ok(PreparedExample {
                qid: ex.qid.clone(),
                layout: build_layout(&q, &c, layout).map_err(|e| wrap(e.into()))?,
                label: ex.label().map_err(wrap)?,
            })
        })
        .collect()
}

/// Shuffled batches of example indices; the last batch may be short.
pub fn make_batches(dataset: &[RankingExample], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let m = dataset[0].candidates.len();
    if let Some(ex) = dataset.iter().find(|e| e.candidates.len() != m) {
        return Err(Error::Example {
            qid: ex.qid.clone(),
            message: format!("has {} candidates, expected {m}", ex.candidates.len()),
        });
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seed for the batch order of `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, SHUFFLE_STREAM, epoch as u64)
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Parameters,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: Parameters, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(&params.tensors, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        Self {
            params,
            optimizer,
            step: 0,
        }
    }
}

struct ExampleGraph {
    graph: Graph,
    params: Vec<Var>,
    ls: Var,
    ps: Var,
}

/// Loss and per-tensor parameter gradients of a batch, without updating anything.
pub fn batch_gradients(
    params: &Parameters,
    batch: &[&PreparedExample],
    loss: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Vec<Real>>)> {
    let mut graphs: Vec<ExampleGraph> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut graph = Graph::new();
            let vars: Vec<Var> = params.tensors.iter().map(|t| graph.leaf(t.clone())).collect();
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(s, DROPOUT_STREAM, i as u64)));
            let out = forward_graph(&mut graph, &params.config, &vars, &ex.layout, rng.as_mut())?;
            Ok(ExampleGraph {
                graph,
                params: vars,
                ls: out.ls,
                ps: out.ps,
            })
        })
        .collect::<Result<_>>()?;

    let mut lg = Graph::new();
    let ls: Vec<Var> = graphs
        .iter()
        .map(|e| lg.leaf(Tensor::vector(e.graph.value(e.ls).data().to_vec())))
        .collect();
    let ps: Vec<Var> = graphs
        .iter()
        .map(|e| lg.leaf(Tensor::vector(e.graph.value(e.ps).data().to_vec())))
        .collect();
    let labels: Vec<PermutationLabel> = batch.iter().map(|e| e.label.clone()).collect();
    let (total, breakdown) = final_loss_graph(&mut lg, &ls, &ps, &labels, loss)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    lg.backward(total)?;
    let m = labels[0].len();
    let adjoint = |v: Var| lg.grad(v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; m]);
    let seeds: Vec<[(Var, Vec<Real>); 2]> = graphs
        .iter()
        .zip(ls.iter().zip(&ps))
        .map(|(e, (l, p))| [(e.ls, adjoint(*l)), (e.ps, adjoint(*p))])
        .collect();

    let per_example: Vec<Vec<Vec<Real>>> = graphs
        .par_iter_mut()
        .zip(seeds.par_iter())
        .map(|(e, seed)| {
            e.graph.backward_seeded(seed)?;
            Ok(e.params
                .iter()
                .zip(&params.tensors)
                .map(|(v, t)| e.graph.grad(*v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut grads: Vec<Vec<Real>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    for ex in &per_example {
        for (acc, g) in grads.iter_mut().zip(ex) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((breakdown, grads))
}

/// Forward, loss, backward, clip and update for one batch.
pub fn training_step(
    state: &mut TrainState,
    batch: &[&PreparedExample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<StepRecord> {
    let dropout_seed =
        (state.params.config.dropout > 0.0).then(|| derive_seed(config.seed, DROPOUT_STREAM, state.step as u64));
    let (b, mut grads) = batch_gradients(&state.params, batch, &config.loss, dropout_seed)?;
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            list: b.list as f64,
            point: b.point as f64,
            calibration: b.calibration as f64,
        });
    }
    let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
    state.optimizer.update(&mut state.params.tensors, &grads, config.learning_rate);
    let record = StepRecord {
        step: state.step,
        epoch,
        queries: batch.len(),
        list_loss: b.list as f64,
        point_loss: b.point as f64,
        calibration_loss: b.calibration as f64,
        total_loss: b.total as f64,
        batch_variance: b.variance as f64,
        gate_open: b.gate_open,
        calibration_active: b.calibration_active,
        grad_norm,
    };
    state.step += 1;
    Ok(record)
}

/// Trains from a fresh initialization.
pub fn train(
    config: &TrainConfig,
    dataset: &[RankingExample],
    model_config: &ModelConfig,
    vocab: &Vocab,
) -> Result<(Parameters, TrainLog)> {
    train_with(config, dataset, model_config, vocab, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    config: &TrainConfig,
    dataset: &[RankingExample],
    model_config: &ModelConfig,
    vocab: &Vocab,
    on_step: impl FnMut(&StepRecord),
) -> Result<(Parameters, TrainLog)> {
    config.validate()?;
    if model_config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    train_from(config, dataset, init_params(model_config)?, vocab, on_step)
}

/// Continues training from given parameters.
pub fn train_from(
    config: &TrainConfig,
    dataset: &[RankingExample],
    params: Parameters,
    vocab: &Vocab,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Parameters, TrainLog)> {
    config.validate()?;
    let layout = LayoutConfig::from_vocab(vocab, config.num_slots, config.max_candidate_tokens)?;
    let prepared = prepare_examples(dataset, vocab, &layout)?;
    let mut state = TrainState::new(params, config);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        for batch in make_batches(dataset, config.batch_size, epoch_seed(config.seed, epoch))? {
            let examples: Vec<&PreparedExample> = batch.iter().map(|&i| &prepared[i]).collect();
            let record = training_step(&mut state, &examples, config, epoch)?;
            on_step(&record);
            log.records.push(record);
        }
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(
                path,
                &Checkpoint {
                    params: state.params.clone(),
                    vocab: vocab.clone(),
                    num_slots: config.num_slots,
                    max_candidate_tokens: config.max_candidate_tokens,
                },
            )?;
        }
    }
    Ok((state.params, log))
}
