//! Recurrent refinement: motion encoder, ConvGRU update, flow and mask heads,
//! convex upsampling, and the iteration driver.

use crate::autodiff::{Graph, Var};
use crate::config::{InitMode, ModelConfig};
use crate::corr::{lookup_graph, volumes_graph};
use crate::cri::init_flow_graph;
use crate::csc::csc_graph;
use crate::encoders::{check_divisible, context_graph, features_graph, normalize, ContextFeatures, ImagePair};
use crate::error::{Error, Result};
use crate::field::{FlowField, Resolution};
use crate::net::ModelGraph;
use crate::tensor::{Element, Tensor};
use crate::trainer::{ModelParams, ParamSpec};

/// Recurrent hidden state `C_hid×H×W`, values in `(-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruState {
    pub hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct UpdateInputs<'a> {
    pub context: &'a ContextFeatures,
    /// Lookup output `L×H×W`.
    pub corr_features: &'a Tensor,
    pub current_flow: &'a FlowField,
}

const MOTION_CORR: &str = "refine.motion.corr";
const MOTION_FLOW: &str = "refine.motion.flow";
const MOTION_FUSE: &str = "refine.motion.fuse";
const GRU_Z: &str = "refine.gru.z";
const GRU_R: &str = "refine.gru.r";
const GRU_Q: &str = "refine.gru.q";
const FLOW_HEAD: [&str; 2] = ["refine.flow_head.conv1", "refine.flow_head.conv2"];
const MASK_HEAD: [&str; 2] = ["refine.mask_head.conv1", "refine.mask_head.conv2"];

pub(crate) fn layout(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    let hid = cfg.hidden_channels();
    let gru_in = hid + cfg.motion_out + cfg.input_context_channels();
    let d = cfg.downsample;
    out.extend(ParamSpec::conv(MOTION_CORR, cfg.lookup_features(), cfg.motion_corr, 1));
    out.extend(ParamSpec::conv(MOTION_FLOW, 2, cfg.motion_flow, 3));
    out.extend(ParamSpec::conv(MOTION_FUSE, cfg.motion_corr + cfg.motion_flow, cfg.motion_out - 2, 3));
    for gate in [GRU_Z, GRU_R, GRU_Q] {
        out.extend(ParamSpec::conv(gate, gru_in, hid, 3));
    }
    out.extend(ParamSpec::conv(FLOW_HEAD[0], hid, hid, 3));
    out.extend(ParamSpec::conv(FLOW_HEAD[1], hid, 2, 3));
    out.extend(ParamSpec::conv(MASK_HEAD[0], hid, hid, 3));
    out.extend(ParamSpec::conv(MASK_HEAD[1], hid, 9 * d * d, 1));
}

/// Motion features `motion_out×H×W`: encoded correlation and flow, fused,
/// with the raw flow appended.
pub fn motion_graph<T: Element>(mg: &mut ModelGraph<'_, T>, corr: Var, flow: Var) -> Result<Var> {
    let c = mg.conv(MOTION_CORR, corr, 1)?;
    let c = mg.graph.elu(c);
    let f = mg.conv(MOTION_FLOW, flow, 1)?;
    let f = mg.graph.elu(f);
    let cf = mg.graph.concat(&[c, f])?;
    let m = mg.conv(MOTION_FUSE, cf, 1)?;
    let m = mg.graph.elu(m);
    mg.graph.concat(&[m, flow])
}

/// Upsampling mask logits `(9·d²)×H×W` read from a hidden state.
pub fn mask_graph<T: Element>(mg: &mut ModelGraph<'_, T>, hidden: Var) -> Result<Var> {
    let x = mg.conv(MASK_HEAD[0], hidden, 1)?;
    let x = mg.graph.elu(x);
    mg.conv(MASK_HEAD[1], x, 1)
}

pub struct StepVars {
    pub hidden: Var,
    pub delta: Var,
    pub mask: Var,
}

/// One ConvGRU update:
/// `z = σ(W_z[h, x])`, `r = σ(W_r[h, x])`, `q = tanh(W_q[r⊙h, x])`,
/// `h' = (1 − z)⊙h + z⊙q`, with `x` the motion features and context.
pub fn gru_step_graph<T: Element>(
    mg: &mut ModelGraph<'_, T>,
    hidden: Var,
    context: Var,
    corr: Var,
    flow: Var,
) -> Result<StepVars> {
    let motion = motion_graph(mg, corr, flow)?;
    let x = mg.graph.concat(&[motion, context])?;
    let hx = mg.graph.concat(&[hidden, x])?;
    let z = mg.conv(GRU_Z, hx, 1)?;
    let z = mg.graph.sigmoid(z);
    let r = mg.conv(GRU_R, hx, 1)?;
    let r = mg.graph.sigmoid(r);
    let rh = mg.graph.mul(r, hidden)?;
    let rhx = mg.graph.concat(&[rh, x])?;
    let q = mg.conv(GRU_Q, rhx, 1)?;
    let q = mg.graph.tanh(q);
    let hidden = mg.graph.lerp(hidden, q, z)?;

    let f = mg.conv(FLOW_HEAD[0], hidden, 1)?;
    let f = mg.graph.elu(f);
    let delta = mg.conv(FLOW_HEAD[1], f, 1)?;
    let mask = mask_graph(mg, hidden)?;
    Ok(StepVars { hidden, delta, mask })
}

/// Bilinear `×factor` upsampling of a `2×H×W` flow with half-pixel
/// alignment; values are scaled by `factor`.
pub fn bilinear_upsample_graph<T: Element>(g: &mut Graph<T>, flow: Var, factor: usize) -> Result<Var> {
    let &[2, h, w] = g.shape(flow) else {
        return Err(Error::shape("bilinear_upsample", "flow 2×H×W", g.shape(flow)));
    };
    let (hf, wf) = (h * factor, w * factor);
    let d = factor as f64;
    let coords = Tensor::from_fn([hf, wf, 2], |i| {
        let (pix, axis) = (i / 2, i % 2);
        let c = if axis == 0 { pix % wf } else { pix / wf };
        T::from_f64((c as f64 + 0.5) / d - 0.5)
    })?;
    let coords = g.constant(coords);
    let up = g.bilinear_sample(flow, coords)?;
    Ok(g.scale(up, d))
}

/// Nodes of one forward pass.
pub struct ForwardVars {
    /// `V₀ … V_m` at full resolution, each `2×H₀×W₀`.
    pub flows: Vec<Var>,
    /// The same estimates on the encoder grid, each `2×H×W`.
    pub coarse: Vec<Var>,
}

/// Full pipeline on normalized frames `3×H₀×W₀`.
pub fn forward_graph<T: Element>(mg: &mut ModelGraph<'_, T>, i1: Var, i2: Var, iterations: usize) -> Result<ForwardVars> {
    let cfg = mg.cfg;
    cfg.validate()?;
    let d = cfg.downsample;
    let (h0, w0) = (mg.graph.shape(i1)[1], mg.graph.shape(i1)[2]);
    check_divisible(h0, w0, d)?;

    let (f1, f2) = features_graph(mg, i1, i2)?;
    let (hidden0, context) = context_graph(mg, i1)?;
    let strips = if cfg.csc { Some(csc_graph(mg, f1, f2)?) } else { None };
    let pyr = volumes_graph(mg.graph, cfg, f1, f2, strips)?;
    let v0 = init_flow_graph(mg, strips, &pyr)?;
    let up0 = if cfg.init_mode == InitMode::FlowHead {
        let mask = mask_graph(mg, hidden0)?;
        mg.graph.convex_upsample(v0, mask, d)?
    } else {
        bilinear_upsample_graph(mg.graph, v0, d)?
    };

    let mut flows = vec![up0];
    let mut coarse = vec![v0];
    let (mut hidden, mut v) = (hidden0, v0);
    for _ in 0..iterations {
        let v_in = if cfg.detach_flow { mg.graph.detach(v) } else { v };
        let corr = lookup_graph(mg.graph, &pyr, v_in, cfg.radius)?;
        let step = gru_step_graph(mg, hidden, context, corr, v_in)?;
        hidden = step.hidden;
        v = mg.graph.add(v_in, step.delta)?;
        flows.push(mg.graph.convex_upsample(v, step.mask, d)?);
        coarse.push(v);
    }
    Ok(ForwardVars { flows, coarse })
}

pub fn gru_step(
    state: &GruState,
    inputs: &UpdateInputs<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(GruState, FlowField, Tensor)> {
    let (h, w) = (inputs.current_flow.height(), inputs.current_flow.width());
    for (name, t) in [
        ("hidden", &state.hidden),
        ("context", &inputs.context.context),
        ("corr_features", inputs.corr_features),
    ] {
        if t.rank() != 3 || t.dim(1) != h || t.dim(2) != w {
            return Err(Error::shape("gru_step", format!("{name} ×{h}×{w}"), t.shape()));
        }
    }
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let hid = mg.input(&state.hidden);
    let ctx = mg.input(&inputs.context.context);
    let corr = mg.input(inputs.corr_features);
    let flow = mg.input(&inputs.current_flow.to_planes());
    let out = gru_step_graph(&mut mg, hid, ctx, corr, flow)?;
    let res = inputs.current_flow.resolution();
    Ok((
        GruState {
            hidden: mg.value(out.hidden),
        },
        FlowField::from_planes(&mg.value(out.delta), res)?,
        mg.value(out.mask),
    ))
}

pub fn apply_update(v: &FlowField, delta: &FlowField) -> Result<FlowField> {
    v.same_grid(delta, "apply_update")?;
    let sum: Vec<f32> = v
        .values()
        .data()
        .iter()
        .zip(delta.values().data())
        .map(|(a, b)| a + b)
        .collect();
    FlowField::new(Tensor::new(v.values().shape(), sum)?, v.resolution())
}

/// Convex upsampling by the factor implied by `mask_logits` (`9·d²` channels).
pub fn convex_upsample(v: &FlowField, mask_logits: &Tensor) -> Result<FlowField> {
    let (h, w) = (v.height(), v.width());
    let &[m, mh, mw] = mask_logits.shape() else {
        return Err(Error::shape("convex_upsample", "mask (9·d²)×H×W", mask_logits.shape()));
    };
    let d = (1..=16).find(|d| 9 * d * d == m);
    let Some(d) = d.filter(|_| (mh, mw) == (h, w)) else {
        return Err(Error::shape("convex_upsample", format!("mask (9·d²)×{h}×{w}"), mask_logits.shape()));
    };
    let mut g = Graph::new();
    let f = g.constant(v.to_planes());
    let mask = g.constant(mask_logits.clone());
    let up = g.convex_upsample(f, mask, d)?;
    FlowField::from_planes(g.value(up), Resolution::Full)
}

/// Full-resolution estimates `V₀ … V_m`.
pub fn run_refinement(pair: &ImagePair, params: &ModelParams, cfg: &ModelConfig, iterations: usize) -> Result<Vec<FlowField>> {
    check_divisible(pair.height(), pair.width(), cfg.downsample)?;
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let i1 = mg.input(&normalize(&pair.i1));
    let i2 = mg.input(&normalize(&pair.i2));
    let out = forward_graph(&mut mg, i1, i2, iterations)?;
    out.flows
        .iter()
        .map(|&v| FlowField::from_planes(&mg.value(v), Resolution::Full))
        .collect()
}

/// Final full-resolution estimate after `iterations` updates.
pub fn predict(pair: &ImagePair, params: &ModelParams, cfg: &ModelConfig, iterations: usize) -> Result<FlowField> {
    let mut seq = run_refinement(pair, params, cfg, iterations)?;
    Ok(seq.pop().expect("at least V0"))
}
