use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use stripflow_cli::alloc::{HeapProbe, PeakAlloc};
use stripflow_cli::bench::BenchOptions;
use stripflow_cli::commands::{cmd_bench, cmd_eval, cmd_gradcheck, cmd_infer, cmd_train};
use stripflow_cli::config::RunConfig;
use stripflow_cli::Failure;

#[global_allocator]
static PEAK: PeakAlloc = PeakAlloc::new();

/// Strip-correlation optical flow: training, evaluation, inference and checks.
#[derive(Parser, Debug)]
#[command(name = "stripflow", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file. Unset flags leave the file
/// (or default) value in place.
#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    outdir: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<String>,
    /// Encoder downsampling factor.
    #[arg(long, global = true, value_name = "N")]
    d: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    channels: Option<String>,
    /// Query and key width of the strip branch.
    #[arg(long, global = true, value_name = "N")]
    cprime: Option<String>,
    /// Refinement iterations.
    #[arg(long, global = true, value_name = "N")]
    m: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    radius: Option<String>,
    /// zeros | cri-paper-literal | cri-soft-argmax | flow-head
    #[arg(long, global = true, value_name = "MODE")]
    init_mode: Option<String>,
    /// broadcast-sum | separate-1d
    #[arg(long, global = true, value_name = "MODE")]
    aggregate_mode: Option<String>,
    /// separate | same
    #[arg(long, global = true, value_name = "MODE")]
    queries: Option<String>,
    /// on | off
    #[arg(long, global = true, value_name = "on|off")]
    csc: Option<String>,
    #[arg(long, global = true, value_name = "F")]
    gamma: Option<String>,
    #[arg(long, global = true, value_name = "F")]
    lr: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    steps: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    batch: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    eval_samples: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    eval_every: Option<String>,
    /// kitti-and | or
    #[arg(long, global = true, value_name = "RULE")]
    f1_rule: Option<String>,
    /// translation | affine | two-layer
    #[arg(long, global = true, value_name = "KIND")]
    motion: Option<String>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl GlobalArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("outdir", &self.outdir),
            ("seed", &self.seed),
            ("d", &self.d),
            ("channels", &self.channels),
            ("cprime", &self.cprime),
            ("m", &self.m),
            ("radius", &self.radius),
            ("init-mode", &self.init_mode),
            ("aggregate-mode", &self.aggregate_mode),
            ("queries", &self.queries),
            ("csc", &self.csc),
            ("gamma", &self.gamma),
            ("lr", &self.lr),
            ("steps", &self.steps),
            ("batch", &self.batch),
            ("eval-samples", &self.eval_samples),
            ("eval-every", &self.eval_every),
            ("f1-rule", &self.f1_rule),
            ("motion", &self.motion),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(|e| anyhow!("--{key}: {e:#}"))?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k, v).map_err(|e| anyhow!("--set {k}: {e:#}"))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on seeded synthetic pairs; writes a checkpoint and a CSV log.
    Train,
    /// Score a checkpoint on the seeded held-out set.
    Eval {
        #[arg(long, value_name = "PATH", required_unless_present = "oracle_predictor")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself (test hook).
        #[arg(long, hide = true)]
        oracle_predictor: bool,
    },
    /// Predict flow for one image pair; writes pred.flo and pred.ppm.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        frame1: PathBuf,
        frame2: PathBuf,
    },
    /// Compare every backward pass against central differences.
    Gradcheck {
        /// Add a softmax with a negated backward (test fixture).
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Time all-pair against strip volume construction over a size sweep.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32, 64, 96])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Largest all-pair volume to build, in bytes.
        #[arg(long, default_value_t = 1 << 30)]
        memory_limit: u64,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = cli.global.resolve().map_err(Failure::Usage)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train => {
            cmd_train(&cfg, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            oracle_predictor,
        } => {
            cmd_eval(&cfg, checkpoint.as_deref(), oracle_predictor, &mut out)?;
        }
        Command::Infer {
            checkpoint,
            frame1,
            frame2,
        } => {
            cmd_infer(&cfg, &checkpoint, [&frame1, &frame2], &mut out)?;
        }
        Command::Gradcheck { inject_sign_flip } => {
            cmd_gradcheck(&cfg, inject_sign_flip, &mut out)?;
        }
        Command::Bench {
            sizes,
            runs,
            memory_limit,
        } => {
            let opts = BenchOptions {
                sizes,
                runs,
                channels: cfg.model.channels,
                memory_limit,
                seed: cfg.train.seed,
            };
            cmd_bench(&cfg, &opts, Some(&PEAK as &dyn HeapProbe), &mut out)?;
        }
    }
    out.flush().map_err(|e| Failure::Usage(e.into()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
