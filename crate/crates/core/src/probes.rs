//! Gradient probes over composite chains of the model.
//!
//! Each probe rebuilds a slice of the network in `f64` over leaf inputs so
//! that central differences can be taken with respect to features, volumes
//! and parameters alike.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradCheckSuite, REL_TOLERANCE};
use crate::autodiff::{Graph, Var};
use crate::config::{CriAxes, InitMode, ModelConfig};
use crate::corr::{all_pair_graph, lookup_graph, pyramid_graph, PyramidVars};
use crate::cri::{regress_graph, Regression};
use crate::csc::csc_graph;
use crate::error::Result;
use crate::net::ModelGraph;
use crate::refine::{forward_graph, gru_step_graph};
use crate::tensor::Tensor;
use crate::trainer::{param_layout, ParamSpec};

/// Tolerance of the end-to-end probe, looser than per-primitive checks
/// because errors compound across the unrolled iterations.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

/// Configuration of the end-to-end probe: a narrow model on a `16×16` pair.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        cprime: 4,
        context_channels: 8,
        radius: 1,
        motion_corr: 8,
        motion_flow: 4,
        motion_out: 8,
        detach_flow: false,
        init_mode: InitMode::CriSoftArgmax,
        ..ModelConfig::default()
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Parameter leaves for `specs`, drawn at roughly the init scale.
fn param_inputs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    specs
        .iter()
        .map(|s| {
            let bound = if s.fan_in == 0 { 0.1 } else { (3.0 / s.fan_in as f64).sqrt() };
            uniform(&s.shape, -bound, bound, rng)
        })
        .collect()
}

fn bind(specs: &[ParamSpec], vars: &[Var]) -> BTreeMap<String, Var> {
    specs.iter().zip(vars).map(|(s, &v)| (s.path.clone(), v)).collect()
}

/// Flattens outputs of different shapes into one column.
fn stack(g: &mut Graph<f64>, parts: &[Var]) -> Result<Var> {
    let cols = parts
        .iter()
        .map(|&v| {
            let n = g.value(v).numel();
            g.reshape(v, [n, 1])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&cols)
}

fn specs_with_prefix(cfg: &ModelConfig, prefix: &str) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = param_layout(cfg).into_iter().filter(|s| s.path.starts_with(prefix)).collect();
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    specs
}

/// Appends the composite probes to `suite`.
pub fn push_composites(suite: &mut GradCheckSuite, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        channels: 6,
        cprime: 4,
        ..probe_config()
    };
    let (h, w) = (3, 4);
    let p = h * w;

    // Queries and keys through pooling and strip correlation.
    let specs = specs_with_prefix(&cfg, "csc.");
    let mut inputs = vec![
        uniform(&[cfg.channels, h, w], -1.0, 1.0, &mut rng)?,
        uniform(&[cfg.channels, h, w], -1.0, 1.0, &mut rng)?,
    ];
    inputs.extend(param_inputs(&specs, &mut rng)?);
    {
        let cfg = cfg.clone();
        suite.push("csc_chain", REL_TOLERANCE, inputs, move |g, v| {
            let vars = bind(&specs, &v[2..]);
            let mut mg = ModelGraph::with_vars(g, &cfg, vars);
            let (c_v, c_h) = csc_graph(&mut mg, v[0], v[1])?;
            stack(g, &[c_v, c_h])
        });
    }

    for (name, mode) in [
        ("cri_paper_literal", Regression::PaperLiteral),
        ("cri_soft_argmax", Regression::SoftArgmax),
    ] {
        let inputs = vec![uniform(&[p, w], -2.0, 2.0, &mut rng)?, uniform(&[p, h], -2.0, 2.0, &mut rng)?];
        suite.push(name, REL_TOLERANCE, inputs, move |g, v| {
            regress_graph(g, v[0], v[1], h, w, mode, CriAxes::ColumnsToU)
        });
    }

    let inputs = vec![
        uniform(&[5, h, w], -1.0, 1.0, &mut rng)?,
        uniform(&[5, h, w], -1.0, 1.0, &mut rng)?,
    ];
    suite.push("all_pair", REL_TOLERANCE, inputs, |g, v| all_pair_graph(g, v[0], v[1], true));

    // Lookup through the broadcast-sum pyramid on an 8×8 grid, so that every
    // pooling level is non-degenerate, with non-integer targets.
    let (lh, lw) = (8, 8);
    let lp = lh * lw;
    let inputs = vec![
        uniform(&[lp, lh, lw], -1.0, 1.0, &mut rng)?,
        uniform(&[lp, lw], -1.0, 1.0, &mut rng)?,
        uniform(&[lp, lh], -1.0, 1.0, &mut rng)?,
        uniform(&[2, lh, lw], -2.3, 2.3, &mut rng)?,
    ];
    suite.push("lookup", REL_TOLERANCE, inputs, move |g, v| {
        let vol = g.aggregate(v[0], v[1], v[2])?;
        let levels = pyramid_graph(g, vol)?;
        let pyr = PyramidVars {
            levels,
            strips: None,
            height: lh,
            width: lw,
        };
        lookup_graph(g, &pyr, v[3], 1)
    });

    // One update step from its four inputs and all refinement parameters.
    let specs = specs_with_prefix(&cfg, "refine.");
    let mut inputs = vec![
        uniform(&[cfg.hidden_channels(), h, w], -0.9, 0.9, &mut rng)?,
        uniform(&[cfg.input_context_channels(), h, w], 0.0, 1.0, &mut rng)?,
        uniform(&[cfg.lookup_features(), h, w], -1.0, 1.0, &mut rng)?,
        uniform(&[2, h, w], -2.0, 2.0, &mut rng)?,
    ];
    inputs.extend(param_inputs(&specs, &mut rng)?);
    {
        let cfg = cfg.clone();
        suite.push("gru_step", REL_TOLERANCE, inputs, move |g, v| {
            let vars = bind(&specs, &v[4..]);
            let mut mg = ModelGraph::with_vars(g, &cfg, vars);
            let s = gru_step_graph(&mut mg, v[0], v[1], v[2], v[3])?;
            stack(g, &[s.hidden, s.delta, s.mask])
        });
    }

    // Two unrolled iterations on a 16×16 pair with images and every
    // parameter as leaves; flow is not detached between iterations.
    let cfg = probe_config();
    let mut specs = param_layout(&cfg);
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    let mut inputs = vec![
        uniform(&[3, 16, 16], -1.0, 1.0, &mut rng)?,
        uniform(&[3, 16, 16], -1.0, 1.0, &mut rng)?,
    ];
    inputs.extend(param_inputs(&specs, &mut rng)?);
    suite.push("end_to_end_m2", END_TO_END_TOLERANCE, inputs, move |g, v| {
        let vars = bind(&specs, &v[2..]);
        let mut mg = ModelGraph::with_vars(g, &cfg, vars);
        let out = forward_graph(&mut mg, v[0], v[1], 2)?;
        stack(g, &out.flows)
    });
    Ok(())
}

/// The registered primitives followed by every composite probe.
pub fn full_suite(seed: u64) -> Result<GradCheckSuite> {
    let mut suite = GradCheckSuite::primitives(seed)?;
    push_composites(&mut suite, seed)?;
    Ok(suite)
}
