//! The training loop on freshly generated synthetic batches.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, OptimizerKind};
use crate::encoders::normalize;
use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::flowio::{
    epe, f1_all, generate_sample, sequence_loss_graph, EvalReport, F1Rule, GeneratorSpec, SampleScore, SyntheticSample,
};
use crate::net::ModelGraph;
use crate::refine::{forward_graph, predict};

use super::optim::{clip_grad_norm, AdamW, Optimizer, Sgd};
use super::{init_params, ModelParams};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "STRIPFLOW_THREADS";

/// Worker count from `STRIPFLOW_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("thread pool")
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Used by [`OptimizerKind::Sgd`] only.
    pub momentum: f64,
    /// Decoupled decay rate; used by [`OptimizerKind::AdamW`] only.
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub gamma: f64,
    /// Refinement iterations `m` during training and evaluation.
    pub iterations: usize,
    pub clip_norm: f64,
    /// Seeds parameter init, training data and the held-out set.
    pub seed: u64,
    pub generator: GeneratorSpec,
    /// Steps between held-out evaluations; the final step is always evaluated.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub f1_rule: F1Rule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            batch: 4,
            gamma: 0.8,
            iterations: 12,
            clip_norm: 1.0,
            seed: 0,
            generator: GeneratorSpec::default(),
            eval_every: 250,
            eval_samples: 100,
            f1_rule: F1Rule::KittiAnd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("TrainConfig", msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be at least 1".into());
        }
        Ok(())
    }

    /// A fresh optimizer of the configured kind.
    pub fn optimizer(&self) -> Result<Optimizer> {
        Ok(match self.optimizer {
            OptimizerKind::Sgd => Sgd::new(self.lr, self.momentum)?.into(),
            OptimizerKind::AdamW => AdamW::new(self.lr, self.weight_decay)?.into(),
        })
    }
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// The `index`-th seed of an independent stream derived from `seed`.
fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Training samples of step `step` (zero-based).
pub fn training_batch(tc: &TrainConfig, step: usize) -> Result<Vec<SyntheticSample>> {
    (0..tc.batch)
        .map(|b| generate_sample(&tc.generator, derived_seed(tc.seed, TRAIN_STREAM, (step * tc.batch + b) as u64)))
        .collect()
}

/// Held-out samples, disjoint in seed stream from every training batch.
pub fn eval_set(spec: &GeneratorSpec, seed: u64, count: usize) -> Result<Vec<SyntheticSample>> {
    pool().install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| generate_sample(spec, derived_seed(seed, EVAL_STREAM, i)))
            .collect()
    })
}

/// Scores predictions against their samples, in order.
pub fn score(samples: &[SyntheticSample], preds: &[FlowField], rule: F1Rule) -> Result<EvalReport> {
    if samples.len() != preds.len() {
        return Err(Error::invalid("score", format!("{} samples, {} predictions", samples.len(), preds.len())));
    }
    let scores = samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (s, p))| {
            Ok(SampleScore {
                sample_id: i as u64,
                epe: epe(p, &s.gt_flow, &s.valid_mask)?,
                f1_all: f1_all(p, &s.gt_flow, &s.valid_mask, rule)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(scores, rule)
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[SyntheticSample],
    iterations: usize,
    rule: F1Rule,
) -> Result<EvalReport> {
    let preds = pool().install(|| {
        samples
            .par_iter()
            .map(|s| predict(&s.pair, params, cfg, iterations))
            .collect::<Result<Vec<_>>>()
    })?;
    score(samples, &preds, rule)
}

struct SampleGrads {
    loss: f64,
    grads: Vec<(String, Vec<f32>)>,
}

fn sample_grads(params: &ModelParams, cfg: &ModelConfig, s: &SyntheticSample, tc: &TrainConfig) -> Result<SampleGrads> {
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, true);
    let i1 = mg.input(&normalize(&s.pair.i1));
    let i2 = mg.input(&normalize(&s.pair.i2));
    let out = forward_graph(&mut mg, i1, i2, tc.iterations)?;
    let bound: Vec<(String, Var)> = mg.bound().map(|(p, v)| (p.to_string(), v)).collect();
    let loss = sequence_loss_graph(&mut g, &out.flows, &s.gt_flow, &s.valid_mask, tc.gamma)?;
    g.backward(loss)?;
    let grads = bound
        .into_iter()
        .filter_map(|(p, v)| g.grad(v).map(|gr| (p, gr.to_vec())))
        .collect();
    Ok(SampleGrads {
        loss: g.value(loss).data()[0] as f64,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Batch-mean sequence loss before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn dump_state(params: &ModelParams, batch: &[SyntheticSample], losses: &[f64], grad_norm: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sample seeds: {:?}", batch.iter().map(|b| b.seed).collect::<Vec<_>>());
    let _ = writeln!(s, "per-sample losses: {losses:?}");
    let _ = writeln!(s, "gradient norm: {grad_norm}");
    for (path, t) in params.iter() {
        let norm = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let gnorm = t.grad().map_or("none".to_string(), |g| {
            format!("{:.4e}", g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        });
        let _ = writeln!(s, "  {path}: |w|={norm:.4e} |g|={gnorm}");
    }
    s
}

/// One descent step on `batch`: mean sequence loss, backward, clip, update.
/// `step` only labels diagnostics.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &[SyntheticSample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    params.zero_grads();
    let shared: &ModelParams = params;
    let per_sample = pool().install(|| {
        batch
            .par_iter()
            .map(|s| sample_grads(shared, cfg, s, tc))
            .collect::<Result<Vec<_>>>()
    })?;

    // Reduce in batch order so the result does not depend on scheduling.
    let n = batch.len() as f64;
    let mut total: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for sg in &per_sample {
        for (path, gr) in &sg.grads {
            let acc = total.entry(path.clone()).or_insert_with(|| vec![0.0; gr.len()]);
            acc.iter_mut().zip(gr).for_each(|(a, &g)| *a += g as f64);
        }
    }
    for (path, acc) in total {
        let mean: Vec<f32> = acc.iter().map(|&a| (a / n) as f32).collect();
        params.get_mut(&path)?.accumulate_grad(&mean)?;
    }
    let losses: Vec<f64> = per_sample.iter().map(|s| s.loss).collect();
    let loss = losses.iter().sum::<f64>() / n;

    let grad_norm = clip_grad_norm(params, tc.clip_norm);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            loss,
            dump: dump_state(params, batch, &losses, grad_norm),
        });
    }
    opt.step(params);
    Ok(StepStats { loss, grad_norm })
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean batch loss since the previous row; absent for the step-0 baseline.
    pub loss: Option<f64>,
    pub epe_eval: f64,
}

pub const LOG_HEADER: [&str; 3] = ["step", "loss", "epe_eval"];

/// CSV sink for [`LogRow`]s, flushed after every row.
pub struct TrainLog<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(LOG_HEADER).map_err(csv_err)?;
        inner.flush().map_err(|e| Error::invalid("TrainLog", e.to_string()))?;
        Ok(TrainLog { inner })
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        let loss = row.loss.map(|l| l.to_string()).unwrap_or_default();
        self.inner
            .write_record([row.step.to_string(), loss, row.epe_eval.to_string()])
            .map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::invalid("TrainLog", e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid("TrainLog", e.to_string())
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
}

/// Trains from a fresh initialization seeded by `tc.seed`, calling `on_row`
/// as each log row is produced.
pub fn train(cfg: &ModelConfig, tc: &TrainConfig, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    let mut params = init_params(cfg, tc.seed)?;
    let mut opt = tc.optimizer()?;
    let held_out = eval_set(&tc.generator, tc.seed, tc.eval_samples)?;
    let eval = |p: &ModelParams| evaluate(p, cfg, &held_out, tc.iterations, tc.f1_rule);

    let initial_eval = eval(&params)?;
    let mut log = vec![LogRow {
        step: 0,
        loss: None,
        epe_eval: initial_eval.epe,
    }];
    on_row(&log[0])?;

    let mut last_eval = initial_eval.clone();
    let (mut window, mut count) = (0.0, 0usize);
    for step in 1..=tc.steps {
        let batch = training_batch(tc, step - 1)?;
        let stats = train_step(&mut params, &mut opt, &batch, cfg, tc, step)?;
        window += stats.loss;
        count += 1;
        if step % tc.eval_every.max(1) == 0 || step == tc.steps {
            last_eval = eval(&params)?;
            let row = LogRow {
                step,
                loss: Some(window / count as f64),
                epe_eval: last_eval.epe,
            };
            on_row(&row)?;
            log.push(row);
            (window, count) = (0.0, 0);
        }
    }
    params.zero_grads();
    Ok(TrainOutcome {
        params,
        log,
        initial_eval,
        final_eval: last_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, TrainConfig) {
        let cfg = ModelConfig {
            channels: 16,
            cprime: 8,
            context_channels: 16,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            steps: 2,
            batch: 2,
            iterations: 1,
            eval_every: 1,
            eval_samples: 2,
            generator: GeneratorSpec {
                height: 16,
                width: 16,
                max_disp: 3.0,
                ..GeneratorSpec::default()
            },
            ..TrainConfig::default()
        };
        (cfg, tc)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (cfg, tc) = tiny();
        let mut params = init_params(&cfg, 0).unwrap();
        let before = params.clone();
        let mut opt: Optimizer = Sgd::new(0.0, 0.9).unwrap().into();
        let batch = training_batch(&tc, 0).unwrap();
        let stats = train_step(&mut params, &mut opt, &batch, &cfg, &tc, 1).unwrap();
        assert!(stats.loss.is_finite() && stats.grad_norm > 0.0);
        params.zero_grads();
        assert_eq!(params, before);
    }

    #[test]
    fn runs_are_reproducible() {
        let (cfg, tc) = tiny();
        let a = train(&cfg, &tc, |_| Ok(())).unwrap();
        let b = train(&cfg, &tc, |_| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn streams_are_disjoint() {
        let (_, tc) = tiny();
        let train_seeds: Vec<u64> = (0..8).map(|i| derived_seed(0, TRAIN_STREAM, i)).collect();
        let eval: Vec<u64> = eval_set(&tc.generator, 0, 4).unwrap().iter().map(|s| s.seed).collect();
        assert!(eval.iter().all(|s| !train_seeds.contains(s)));
        assert_eq!(training_batch(&tc, 1).unwrap()[0].seed, train_seeds[2]);
    }
}
