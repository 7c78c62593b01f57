use std::path::{Path, PathBuf};

use listrank::datagen::{self, read_examples, write_examples, Candidate, GenConfig, Vocab};
use listrank::evalkit::{
    evaluate_run, mean, position_bias_experiment, read_qrels, read_run, run_records, write_bias_csv, write_qrels,
    write_run, OrderMode,
};
use listrank::inference::{latency_bench, rerank as rerank_one, write_bench_csv, RerankRequest, Reranker, Strategy};
use listrank::losses::LossConfig;
use listrank::model::{load_checkpoint, ModelConfig};
use listrank::trainer::{train_with, TrainConfig};

use crate::settings::{usage, CliError, ConfigFile, Resolver, Stage};
use crate::Opts;

const TRAIN_FILE: &str = "train.jsonl";
const EVAL_FILE: &str = "eval.jsonl";
const QRELS_FILE: &str = "qrels.txt";
const VOCAB_FILE: &str = "vocab.json";

fn with_resolver<T>(o: &Opts, f: impl FnOnce(&Resolver) -> Result<T, CliError>) -> Result<T, CliError> {
    let file = match &o.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    f(&Resolver { file: &file })
}

fn read_vocab(data: &Path) -> Result<Vocab, CliError> {
    let p = data.join(VOCAB_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("--data: {}: {e}", p.display())))?;
    serde_json::from_str(&text).stage("load vocabulary")
}

fn data_file(data: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = data.join(name);
    if !p.exists() {
        return Err(usage(format!("--data {}: missing {name}", data.display())));
    }
    Ok(p)
}

pub fn gen(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let data = r.required_path("data", o.data.clone())?;
        let d = GenConfig::default();
        let config = GenConfig {
            seed: r.get("seed", o.seed, d.seed)?,
            num_slots: r.get("window-size", o.window_size, d.num_slots)?,
            train_queries: r.get("train-queries", o.train_queries, d.train_queries)?,
            eval_queries: r.get("eval-queries", o.eval_queries, d.eval_queries)?,
            eval_candidates: r.get("eval-candidates", o.eval_candidates, d.eval_candidates)?,
            label_noise: r.get("noise", o.noise, d.label_noise)?,
            ..d
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        let out = datagen::generate(&config).stage("gen")?;
        std::fs::create_dir_all(&data).stage("gen")?;
        write_examples(data.join(TRAIN_FILE), &out.train).stage("gen")?;
        write_examples(data.join(EVAL_FILE), &out.eval).stage("gen")?;
        write_qrels(data.join(QRELS_FILE), &out.qrels).stage("gen")?;
        let vocab = serde_json::to_string(&out.vocab).stage("gen")?;
        std::fs::write(data.join(VOCAB_FILE), vocab).stage("gen")?;
        let cfg = serde_json::to_string_pretty(&config).stage("gen")?;
        std::fs::write(data.join("gen_config.json"), cfg).stage("gen")?;
        println!(
            "wrote {} train and {} eval queries to {}",
            out.train.len(),
            out.eval.len(),
            data.display()
        );
        Ok(())
    })
}

pub fn train(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let data = r.existing_path("data", o.data.clone())?;
        let checkpoint = r.required_path("checkpoint", o.checkpoint.clone())?;
        let report = r
            .opt("report", o.report.clone())?
            .unwrap_or_else(|| checkpoint.with_extension("trainlog.jsonl"));
        let vocab = read_vocab(&data)?;
        let train_path = data_file(&data, TRAIN_FILE)?;
        let dataset = read_examples(&train_path).stage("load training data")?;
        let seed = r.get("seed", o.seed, 0)?;

        let td = TrainConfig::default();
        let ld = LossConfig::default();
        let num_slots = match r.opt("window-size", o.window_size)? {
            Some(m) => m,
            None => dataset.first().map(|e| e.candidates.len()).ok_or_else(|| usage("empty training set"))?,
        };
        let config = TrainConfig {
            epochs: r.get("epochs", o.epochs, td.epochs)?,
            batch_size: r.get("batch-size", o.batch_size, td.batch_size)?,
            learning_rate: r.get("lr", o.lr, td.learning_rate)?,
            loss: LossConfig {
                tau: r.get("tau", o.tau, ld.tau)?,
                enable_point_loss: !r.switch("no-point-loss", o.no_point_loss)?,
                enable_calibration: !r.switch("no-calibration", o.no_calibration)?,
                enable_in_batch: !r.switch("no-in-batch", o.no_in_batch)?,
                enable_adaptive: !r.switch("no-adaptive", o.no_adaptive)?,
                calibration_weight: r.get("calibration-weight", o.calibration_weight, ld.calibration_weight)?,
            },
            num_slots,
            max_candidate_tokens: r.get("max-candidate-tokens", o.max_candidate_tokens, td.max_candidate_tokens)?,
            seed,
            checkpoint_path: Some(checkpoint.clone()),
            ..td
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        let md = ModelConfig::default();
        let model = ModelConfig {
            d_model: r.get("d-model", o.d_model, md.d_model)?,
            n_layers: r.get("layers", o.layers, md.n_layers)?,
            n_heads: r.get("heads", o.heads, md.n_heads)?,
            d_ff: r.get("d-ff", o.d_ff, md.d_ff)?,
            vocab_size: vocab.len(),
            seed,
            ..md
        };
        model.validate().map_err(|e| usage(e.to_string()))?;
        let every: usize = r.get("log", o.log, 0)?;
        let (_, log) = train_with(&config, &dataset, &model, &vocab, |rec| {
            if every > 0 && rec.step % every == 0 {
                eprintln!(
                    "step {} epoch {} list {:.4} point {:.4} cal {:.4} var {:.3} gate {} |g| {:.3}",
                    rec.step,
                    rec.epoch,
                    rec.list_loss,
                    rec.point_loss,
                    rec.calibration_loss,
                    rec.batch_variance,
                    rec.gate_open,
                    rec.grad_norm
                );
            }
        })
        .stage("train")?;
        log.write_jsonl(&report).stage("train")?;
        let last = log.records.last();
        println!(
            "trained {} steps; final total loss {:.6}; checkpoint {}",
            log.records.len(),
            last.map_or(f64::NAN, |r| r.total_loss),
            checkpoint.display()
        );
        Ok(())
    })
}

fn strategy(r: &Resolver, o: &Opts) -> Result<Strategy, CliError> {
    let name: String = r.get("strategy", o.strategy.clone(), "global_score".into())?;
    let s: Strategy = name.parse().map_err(|e: listrank::Error| usage(format!("--strategy: {e}")))?;
    Ok(match s {
        Strategy::SlidingWindow { stride } => Strategy::SlidingWindow {
            stride: r.get("stride", o.stride, stride)?,
        },
        other => other,
    })
}

fn reranker(r: &Resolver, o: &Opts) -> Result<(Reranker, usize), CliError> {
    let path = r.existing_path("checkpoint", o.checkpoint.clone())?;
    let ckpt = load_checkpoint(&path).stage("load checkpoint")?;
    let window = r.get("window-size", o.window_size, ckpt.num_slots)?;
    let mut rr = Reranker::from_checkpoint(ckpt);
    rr.use_point_scores = r.switch("use-point-scores", o.use_point_scores)?;
    Ok((rr, window))
}

pub fn rerank(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let data = r.existing_path("data", o.data.clone())?;
        let run_path = r.required_path("run", o.run.clone())?;
        let strategy = strategy(r, o)?;
        let (rr, window) = reranker(r, o)?;
        let tag: String = r.get("tag", o.tag.clone(), "listrank".into())?;
        let eval = read_examples(data_file(&data, EVAL_FILE)?).stage("load eval data")?;
        let mut records = Vec::new();
        let mut forwards = 0;
        for ex in &eval {
            let req = RerankRequest {
                query: ex.query.clone(),
                candidates: ex.candidates.clone(),
                window_size: window,
                strategy,
            };
            let res = rerank_one(&rr, &req).stage("rerank")?;
            forwards += res.forwards;
            let ranked: Vec<(String, f64)> = res.docids.into_iter().zip(res.scores).collect();
            records.extend(run_records(&ex.qid, &ranked, &tag));
        }
        write_run(&run_path, &records).stage("rerank")?;
        println!(
            "reranked {} queries with {strategy}; forwards {forwards} ({} per query); run {}",
            eval.len(),
            if eval.is_empty() { 0.0 } else { forwards as f64 / eval.len() as f64 },
            run_path.display()
        );
        Ok(())
    })
}

pub fn eval(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let run_path = r.existing_path("run", o.run.clone())?;
        let qrels_path = r.existing_path("qrels", o.qrels.clone())?;
        let run = read_run(&run_path).stage("eval")?;
        let qrels = read_qrels(&qrels_path).stage("eval")?;
        let per_query = evaluate_run(&run, &qrels, 10).stage("eval")?;
        let value = mean(per_query.values().copied());
        println!("ndcg@10 {value} over {} queries (linear gain)", per_query.len());
        if let Some(report) = r.opt("report", o.report.clone())? {
            let json = serde_json::json!({
                "metric": "ndcg@10",
                "gain": "linear",
                "mean": value,
                "queries": per_query.len(),
                "per_query": per_query,
            });
            std::fs::write(&report, serde_json::to_string_pretty(&json).stage("eval")?).stage("eval")?;
        }
        Ok(())
    })
}

pub fn bench(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let data = r.existing_path("data", o.data.clone())?;
        let report = r.required_path("report", o.report.clone())?;
        let (rr, window) = reranker(r, o)?;
        let stride = r.get("stride", o.stride, 10)?;
        let reps = r.get("repetitions", o.repetitions, 3)?;
        let sizes: String = r.get("sizes", o.sizes.clone(), "100,200,400,800,1000".into())?;
        let sizes: Vec<usize> = sizes
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("--sizes: {e}")))?;
        let eval = read_examples(data_file(&data, EVAL_FILE)?).stage("load eval data")?;
        let query = eval.first().map(|e| e.query.clone()).ok_or_else(|| usage("--data: no eval queries"))?;
        let pool: Vec<Candidate> = eval.iter().flat_map(|e| e.candidates.iter().cloned()).collect();
        let strategies = [Strategy::GlobalScore, Strategy::SlidingWindow { stride }];
        let rows = latency_bench(&rr, &query, &pool, &sizes, &strategies, window, reps).stage("bench")?;
        write_bench_csv(&report, &rows).stage("bench")?;
        for row in &rows {
            println!(
                "{} |C|={} forwards={} latency_ms={:.3}",
                row.strategy, row.num_candidates, row.forwards, row.latency_ms
            );
        }
        Ok(())
    })
}

pub fn bias(o: &Opts) -> Result<(), CliError> {
    with_resolver(o, |r| {
        let data = r.existing_path("data", o.data.clone())?;
        let report = r.required_path("report", o.report.clone())?;
        let qrels_path = match r.opt("qrels", o.qrels.clone())? {
            Some(p) => r.existing_path("qrels", Some(p))?,
            None => data_file(&data, QRELS_FILE)?,
        };
        let (rr, window) = reranker(r, o)?;
        let seed = r.get("seed", o.seed, 0)?;
        let eval = read_examples(data_file(&data, EVAL_FILE)?).stage("load eval data")?;
        let qrels = read_qrels(&qrels_path).stage("bias")?;
        let rep = position_bias_experiment(&rr, &eval, &qrels, &OrderMode::ALL, window, seed).stage("bias")?;
        write_bias_csv(&report, &rep).stage("bias")?;
        for row in &rep.rows {
            println!("{} ndcg@10 {} over {} queries", row.mode, row.mean_ndcg, row.queries);
        }
        println!(
            "max rank disagreement {}",
            rep.max_rank_disagreement.iter().max().copied().unwrap_or(0)
        );
        Ok(())
    })
}
