//! Run configuration: defaults, then a `key = value` file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use stripflow::flowio::{F1Rule, GeneratorSpec, MotionKind};
use stripflow::trainer::TrainConfig;
use stripflow::{AggregateMode, CriAxes, InitMode, ModelConfig, OptimizerKind, QueryMode};

/// Every knob of a run, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub outdir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            outdir: PathBuf::from("stripflow-out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn on_off(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => bail!("expected on or off, got `{s}`"),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse `{value}`: {e}"))
}

/// Keys in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "outdir",
    "seed",
    "d",
    "channels",
    "cprime",
    "context-channels",
    "radius",
    "scale-corr",
    "csc",
    "aggregate-mode",
    "queries",
    "init-mode",
    "cri-axes",
    "motion-corr",
    "motion-flow",
    "motion-out",
    "detach-flow",
    "m",
    "gamma",
    "optimizer",
    "lr",
    "momentum",
    "weight-decay",
    "clip-norm",
    "steps",
    "batch",
    "eval-every",
    "eval-samples",
    "f1-rule",
    "height",
    "width",
    "max-disp",
    "motion",
    "sigma",
];

impl RunConfig {
    /// Applies one setting; underscores in `key` are accepted for dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key.as_str() {
            "outdir" => self.outdir = PathBuf::from(v),
            "seed" => t.seed = parse(&key, v)?,
            "d" => m.downsample = parse(&key, v)?,
            "channels" => m.channels = parse(&key, v)?,
            "cprime" => m.cprime = parse(&key, v)?,
            "context-channels" => m.context_channels = parse(&key, v)?,
            "radius" => m.radius = parse(&key, v)?,
            "scale-corr" => m.scale_corr = on_off(v).with_context(|| key.clone())?,
            "csc" => m.csc = on_off(v).with_context(|| key.clone())?,
            "aggregate-mode" => m.aggregate = parse::<AggregateMode>(&key, v)?,
            "queries" => m.queries = parse::<QueryMode>(&key, v)?,
            "init-mode" => m.init_mode = parse::<InitMode>(&key, v)?,
            "cri-axes" => m.cri_axes = parse::<CriAxes>(&key, v)?,
            "motion-corr" => m.motion_corr = parse(&key, v)?,
            "motion-flow" => m.motion_flow = parse(&key, v)?,
            "motion-out" => m.motion_out = parse(&key, v)?,
            "detach-flow" => m.detach_flow = on_off(v).with_context(|| key.clone())?,
            "m" => t.iterations = parse(&key, v)?,
            "gamma" => t.gamma = parse(&key, v)?,
            "lr" => t.lr = parse(&key, v)?,
            "momentum" => t.momentum = parse(&key, v)?,
            "optimizer" => t.optimizer = parse::<OptimizerKind>(&key, v)?,
            "weight-decay" => t.weight_decay = parse(&key, v)?,
            "clip-norm" => t.clip_norm = parse(&key, v)?,
            "steps" => t.steps = parse(&key, v)?,
            "batch" => t.batch = parse(&key, v)?,
            "eval-every" => t.eval_every = parse(&key, v)?,
            "eval-samples" => t.eval_samples = parse(&key, v)?,
            "f1-rule" => t.f1_rule = parse::<F1Rule>(&key, v)?,
            "height" => t.generator.height = parse(&key, v)?,
            "width" => t.generator.width = parse(&key, v)?,
            "max-disp" => t.generator.max_disp = parse(&key, v)?,
            "motion" => t.generator.kind = parse::<MotionKind>(&key, v)?,
            "sigma" => t.generator.sigma = parse(&key, v)?,
            _ => bail!("unknown setting `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        let g: &GeneratorSpec = &t.generator;
        Some(match key {
            "outdir" => self.outdir.display().to_string(),
            "seed" => t.seed.to_string(),
            "d" => m.downsample.to_string(),
            "channels" => m.channels.to_string(),
            "cprime" => m.cprime.to_string(),
            "context-channels" => m.context_channels.to_string(),
            "radius" => m.radius.to_string(),
            "scale-corr" => flag(m.scale_corr).into(),
            "csc" => flag(m.csc).into(),
            "aggregate-mode" => m.aggregate.to_string(),
            "queries" => m.queries.to_string(),
            "init-mode" => m.init_mode.to_string(),
            "cri-axes" => m.cri_axes.to_string(),
            "motion-corr" => m.motion_corr.to_string(),
            "motion-flow" => m.motion_flow.to_string(),
            "motion-out" => m.motion_out.to_string(),
            "detach-flow" => flag(m.detach_flow).into(),
            "m" => t.iterations.to_string(),
            "gamma" => t.gamma.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "weight-decay" => t.weight_decay.to_string(),
            "clip-norm" => t.clip_norm.to_string(),
            "steps" => t.steps.to_string(),
            "batch" => t.batch.to_string(),
            "eval-every" => t.eval_every.to_string(),
            "eval-samples" => t.eval_samples.to_string(),
            "f1-rule" => t.f1_rule.to_string(),
            "height" => g.height.to_string(),
            "width" => g.width.to_string(),
            "max-disp" => g.max_disp.to_string(),
            "motion" => g.kind.to_string(),
            "sigma" => g.sigma.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` or `;` are skipped, as are `[section]` headers.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(['#', ';']) || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`, got `{line}`", origin.display(), i + 1);
            };
            self.set(k, v)
                .with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.train.generator;
        stripflow::encoders::check_divisible(g.height, g.width, self.model.downsample)?;
        Ok(())
    }

    /// The `key = value` echo written before any work.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let mut a = RunConfig::default();
        a.set("init_mode", "zeros").unwrap();
        a.set("csc", "off").unwrap();
        a.set("lr", "0.25").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.resolved(), Path::new("echo")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_errors_name_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# comment\nsteps = ten\n", Path::new("run.cfg")).unwrap_err();
        assert!(format!("{err:#}").contains("run.cfg:2"), "{err:#}");
        assert!(c.apply_text("bogus = 1", Path::new("x")).is_err());
        assert!(c.apply_text("no equals sign", Path::new("x")).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        let text = c.resolved();
        c.apply_text(&text, Path::new("echo")).unwrap();
        assert_eq!(c, RunConfig::default());
    }
}
