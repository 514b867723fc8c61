//! The five subcommands. Each writes `config.resolved` into the output
//! directory before doing any work.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stripflow::autodiff::{GradCheckReport, REL_TOLERANCE};
use stripflow::encoders::{check_divisible, ImagePair};
use stripflow::flowio::{colorize, write_flo, write_ppm, EvalReport};
use stripflow::probes::full_suite;
use stripflow::refine::predict;
use stripflow::trainer::{
    eval_set, evaluate, load_checkpoint, save_checkpoint, score, train, ModelParams, TrainLog,
};
use stripflow::{FlowField, Tensor};

use crate::alloc::HeapProbe;
use crate::bench::{run_bench, to_csv, BenchOptions, BenchRow};
use crate::config::RunConfig;
use crate::Failure;

pub type CmdResult<T> = std::result::Result<T, Failure>;

pub const RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const PRED_FLO: &str = "pred.flo";
pub const PRED_PPM: &str = "pred.ppm";

/// Validates the configuration, creates the output directory and writes the
/// resolved configuration into it.
pub fn prepare(cfg: &RunConfig) -> CmdResult<PathBuf> {
    cfg.validate().map_err(Failure::Usage)?;
    let dir = cfg.outdir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(RESOLVED);
    std::fs::write(&path, cfg.resolved()).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

fn load_params(cfg: &RunConfig, path: &Path) -> CmdResult<ModelParams> {
    let params = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    params
        .check_compatible(&cfg.model)
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))?;
    Ok(params)
}

pub struct TrainSummary {
    pub initial: EvalReport,
    pub last: EvalReport,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult<TrainSummary> {
    let dir = prepare(cfg)?;
    let log_path = dir.join(TRAIN_LOG);
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = TrainLog::new(BufWriter::new(file))?;
    let outcome = train(&cfg.model, &cfg.train, |row| log.push(row))?;
    let ckpt = dir.join(CHECKPOINT);
    save_checkpoint(&outcome.params, &ckpt)?;
    let m = &cfg.model;
    writeln!(
        out,
        "init_mode={} csc={} initial_epe={:.6} {}",
        m.init_mode,
        if m.csc { "on" } else { "off" },
        outcome.initial_eval.epe,
        outcome.final_eval.summary()
    )
    .context("writing summary")?;
    Ok(TrainSummary {
        initial: outcome.initial_eval,
        last: outcome.final_eval,
        checkpoint: ckpt,
        log: log_path,
    })
}

/// Scores the checkpoint on the seeded held-out set. With `oracle`, the
/// ground truth itself is scored instead of model predictions.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool, out: &mut dyn Write) -> CmdResult<EvalReport> {
    let dir = prepare(cfg)?;
    let t = &cfg.train;
    let samples = eval_set(&t.generator, t.seed, t.eval_samples)?;
    let report = if oracle {
        let gt: Vec<FlowField> = samples.iter().map(|s| s.gt_flow.clone()).collect();
        score(&samples, &gt, t.f1_rule)?
    } else {
        let path = checkpoint.ok_or_else(|| Failure::Usage(anyhow!("eval needs --checkpoint")))?;
        let params = load_params(cfg, path)?;
        evaluate(&params, &cfg.model, &samples, t.iterations, t.f1_rule)?
    };
    report.write_csv(dir.join(EVAL_CSV))?;
    writeln!(out, "{} m={} init_mode={}", report.summary(), t.iterations, cfg.model.init_mode).context("writing summary")?;
    Ok(report)
}

/// Loads an RGB frame as `3×H×W` in `[0, 1]`.
pub fn load_frame(path: &Path) -> anyhow::Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("reading frame {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, frames: [&Path; 2], out: &mut dyn Write) -> CmdResult<FlowField> {
    let dir = prepare(cfg)?;
    let i1 = load_frame(frames[0])?;
    let i2 = load_frame(frames[1])?;
    if i1.shape() != i2.shape() {
        return Err(Failure::Usage(anyhow!(
            "frames differ in size: {} is {}x{}, {} is {}x{}; crop both to {}x{}",
            frames[0].display(),
            i1.dim(1),
            i1.dim(2),
            frames[1].display(),
            i2.dim(1),
            i2.dim(2),
            i1.dim(1).min(i2.dim(1)) / cfg.model.downsample * cfg.model.downsample,
            i1.dim(2).min(i2.dim(2)) / cfg.model.downsample * cfg.model.downsample,
        )));
    }
    check_divisible(i1.dim(1), i1.dim(2), cfg.model.downsample)?;
    let params = load_params(cfg, checkpoint)?;
    let flow = predict(&ImagePair::new(i1, i2)?, &params, &cfg.model, cfg.train.iterations)?;
    write_flo(&flow, dir.join(PRED_FLO))?;
    write_ppm(&colorize(&flow, None), dir.join(PRED_PPM))?;
    writeln!(out, "wrote {} and {}", dir.join(PRED_FLO).display(), dir.join(PRED_PPM).display())
        .context("writing summary")?;
    Ok(flow)
}

/// Step of the central differences used by the gradient table.
pub const GRADCHECK_EPSILON: f64 = 1e-5;

/// Runs every primitive and composite probe and prints one row each. With
/// `inject_sign_flip`, a softmax whose backward is negated joins the suite
/// and must be caught.
pub fn cmd_gradcheck(cfg: &RunConfig, inject_sign_flip: bool, out: &mut dyn Write) -> CmdResult<Vec<GradCheckReport>> {
    let dir = prepare(cfg)?;
    let mut suite = full_suite(cfg.train.seed)?;
    if inject_sign_flip {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let x = Tensor::<f64>::uniform([3, 7], -2.0, 2.0, &mut rng)?;
        suite.push("softmax_sign_flipped", REL_TOLERANCE, vec![x], |g, v| {
            let s = g.softmax_lastdim(v[0])?;
            let value = g.value(s).clone();
            Ok(g.custom("softmax_sign_flipped", &[v[0]], value, |_, out, grad| {
                let k = *out.shape().last().expect("rank >= 1");
                let mut gi = Vec::with_capacity(grad.len());
                for (y, g) in out.data().chunks(k).zip(grad.chunks(k)) {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    // The correct gradient is y·(g − dot); the fixture negates it.
                    gi.extend(y.iter().zip(g).map(|(y, g)| -(y * (g - dot))));
                }
                vec![gi]
            }))
        });
    }
    let reports = suite.run(GRADCHECK_EPSILON)?;

    let mut csv = String::from("op,max_rel_err,tolerance,probes,passed\n");
    writeln!(out, "{:<24} {:>12} {:>10} {:>7}  status", "op", "max_rel_err", "tolerance", "probes").context("writing table")?;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{:<24} {:>12.3e} {:>10.0e} {:>7}  {status}",
            r.op_name, r.max_rel_err, r.tolerance, r.probe_count
        )
        .context("writing table")?;
        csv.push_str(&format!("{},{:e},{:e},{},{}\n", r.op_name, r.max_rel_err, r.tolerance, r.probe_count, r.passed()));
    }
    std::fs::write(dir.join(GRADCHECK_CSV), csv).context("writing gradcheck.csv")?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op_name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Check(anyhow!("gradient check failed for: {}", failed.join(", "))));
    }
    Ok(reports)
}

pub fn cmd_bench(
    cfg: &RunConfig,
    opts: &BenchOptions,
    heap: Option<&dyn HeapProbe>,
    out: &mut dyn Write,
) -> CmdResult<Vec<BenchRow>> {
    let dir = prepare(cfg)?;
    if opts.sizes.is_empty() {
        return Err(Failure::Usage(anyhow!("bench needs at least one size")));
    }
    let rows = run_bench(opts, heap).map_err(Failure::Usage)?;
    let csv = to_csv(&rows);
    std::fs::write(dir.join(BENCH_CSV), &csv).context("writing bench.csv")?;
    out.write_all(csv.as_bytes()).context("writing table")?;
    Ok(rows)
}
