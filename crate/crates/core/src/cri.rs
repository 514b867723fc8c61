//! Parameter-free flow initialization from the strip volumes.
//!
//! Each pixel's `C_v` row is turned into a distribution over candidate
//! columns with a softmax, and its `C_h` row into one over candidate rows.
//! Two readouts exist: the expectation of the correlation values themselves
//! ([`Regression::PaperLiteral`], in correlation units) and the expectation
//! of the candidate positions minus the pixel's own coordinate
//! ([`Regression::SoftArgmax`], in pixels).

use crate::autodiff::{Graph, Var};
use crate::config::{CriAxes, InitMode, ModelConfig};
use crate::corr::{lookup_graph, CorrelationPyramid, PyramidVars};
use crate::csc::OrthogonalVolumes;
use crate::error::{Error, Result};
use crate::field::{FlowField, Resolution};
use crate::net::ModelGraph;
use crate::tensor::{softmax_lastdim, Element, Tensor};
use crate::trainer::{ModelParams, ParamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regression {
    PaperLiteral,
    SoftArgmax,
}

impl Regression {
    pub fn from_init_mode(mode: InitMode) -> Option<Self> {
        match mode {
            InitMode::CriPaperLiteral => Some(Regression::PaperLiteral),
            InitMode::CriSoftArgmax => Some(Regression::SoftArgmax),
            _ => None,
        }
    }
}

pub(crate) const INIT_HEAD: &str = "cri.init_head";

pub(crate) fn layout(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    if cfg.init_mode == InitMode::FlowHead {
        out.extend(ParamSpec::conv(INIT_HEAD, cfg.lookup_features(), 2, 3));
    }
}

/// Regresses one volume `P×K`, where `coord(p)` is pixel `p`'s own position
/// along the candidate axis. Returns `1×H×W`.
fn regress_axis<T: Element>(
    g: &mut Graph<T>,
    vol: Var,
    mode: Regression,
    h: usize,
    w: usize,
    coord: impl Fn(usize) -> f64,
) -> Result<Var> {
    let k = g.shape(vol)[1];
    let weights = g.softmax_lastdim(vol)?;
    let out = match mode {
        Regression::PaperLiteral => {
            // Σ σ_k c_k computed as m + Σ σ_k (c_k − m) with m the row maximum
            // held constant. The weights sum to one, so value and gradient are
            // unchanged, and a flat row returns its constant exactly.
            let p = g.shape(vol)[0];
            let row_max: Vec<T> = g
                .value(vol)
                .data()
                .chunks(k)
                .map(|r| r.iter().copied().fold(r[0], |a, b| if b.to_f64() > a.to_f64() { b } else { a }))
                .collect();
            let tiled = g.constant(Tensor::from_fn([p, k], |i| row_max[i / k])?);
            let dev = g.sub(vol, tiled)?;
            let prod = g.mul(weights, dev)?;
            let sum = g.sum_lastdim(prod)?;
            let base = g.constant(Tensor::new(g.shape(sum).to_vec(), row_max)?);
            g.add(sum, base)?
        }
        Regression::SoftArgmax => {
            let positions = Tensor::from_fn([k, 1], |i| T::from_f64(i as f64))?;
            let positions = g.constant(positions);
            let expected = g.matmul(weights, positions)?;
            let own = Tensor::from_fn([h * w, 1], |p| T::from_f64(coord(p)))?;
            let own = g.constant(own);
            g.sub(expected, own)?
        }
    };
    g.reshape(out, [1, h, w])
}

/// Initial flow `2×H×W` from `C_v` (`P×W`) and `C_h` (`P×H`).
pub fn regress_graph<T: Element>(
    g: &mut Graph<T>,
    c_v: Var,
    c_h: Var,
    h: usize,
    w: usize,
    mode: Regression,
    axes: CriAxes,
) -> Result<Var> {
    let p = h * w;
    if g.shape(c_v) != [p, w] || g.shape(c_h) != [p, h] {
        return Err(Error::shape("regress_init", format!("C_v {p}×{w} and C_h {p}×{h}"), g.shape(c_v)));
    }
    let from_v = regress_axis(g, c_v, mode, h, w, |p| (p % w) as f64)?;
    let from_h = regress_axis(g, c_h, mode, h, w, |p| (p / w) as f64)?;
    match axes {
        CriAxes::ColumnsToU => g.concat(&[from_v, from_h]),
        CriAxes::ColumnsToV => g.concat(&[from_h, from_v]),
    }
}

/// Seed flow `2×H×W` for the configured init mode.
pub fn init_flow_graph<T: Element>(
    mg: &mut ModelGraph<'_, T>,
    strips: Option<(Var, Var)>,
    pyr: &PyramidVars,
) -> Result<Var> {
    let (h, w) = (pyr.height, pyr.width);
    let cfg = mg.cfg;
    match cfg.init_mode {
        InitMode::Zeros => Ok(mg.graph.constant(Tensor::zeros([2, h, w])?)),
        InitMode::CriPaperLiteral | InitMode::CriSoftArgmax => {
            let (c_v, c_h) = strips.ok_or_else(|| {
                Error::invalid("init_flow", format!("{} needs strip volumes", cfg.init_mode))
            })?;
            let mode = Regression::from_init_mode(cfg.init_mode).expect("cri mode");
            regress_graph(mg.graph, c_v, c_h, h, w, mode, cfg.cri_axes)
        }
        InitMode::FlowHead => {
            if !mg.has_param(&format!("{INIT_HEAD}.weight")) {
                return Err(Error::MissingParam(format!(
                    "{INIT_HEAD}.weight (flow-head init needs its parameters)"
                )));
            }
            let zero = mg.graph.constant(Tensor::zeros([2, h, w])?);
            let feats = lookup_graph(mg.graph, pyr, zero, cfg.radius)?;
            mg.conv(INIT_HEAD, feats, 1)
        }
    }
}

fn volume_dims(vols: &OrthogonalVolumes) -> Result<(usize, usize)> {
    match (vols.c_v.shape(), vols.c_h.shape()) {
        (&[h, w, w2], &[h2, w3, h3]) if w == w2 && h == h2 && w == w3 && h == h3 => Ok((h, w)),
        _ => Err(Error::shape("regress_init", "C_v H×W×W and C_h H×W×H", vols.c_h.shape())),
    }
}

/// Softmax weights over candidates: `H×W×W` for `C_v`, `H×W×H` for `C_h`.
pub fn softmax_weights(vols: &OrthogonalVolumes) -> Result<(Tensor, Tensor)> {
    volume_dims(vols)?;
    Ok((softmax_lastdim(&vols.c_v)?, softmax_lastdim(&vols.c_h)?))
}

/// Regressed seed on the volumes' grid.
pub fn regress_init(vols: &OrthogonalVolumes, mode: Regression, axes: CriAxes, factor: usize) -> Result<FlowField> {
    let (h, w) = volume_dims(vols)?;
    let p = h * w;
    let mut g = Graph::new();
    let c_v = g.constant(vols.c_v.clone().reshape([p, w])?);
    let c_h = g.constant(vols.c_h.clone().reshape([p, h])?);
    let out = regress_graph(&mut g, c_v, c_h, h, w, mode, axes)?;
    FlowField::from_planes(g.value(out), Resolution::Grid(factor))
}

/// Seed flow for `cfg.init_mode`. `vols` are required by the regression
/// modes, `pyramid` by the flow-head mode; CRI modes never touch `params`.
pub fn init_flow(
    cfg: &ModelConfig,
    params: &ModelParams,
    vols: Option<&OrthogonalVolumes>,
    pyramid: Option<&CorrelationPyramid>,
    height: usize,
    width: usize,
) -> Result<FlowField> {
    let res = Resolution::Grid(cfg.downsample);
    match cfg.init_mode {
        InitMode::Zeros => FlowField::zeros(height, width, res),
        InitMode::CriPaperLiteral | InitMode::CriSoftArgmax => {
            let vols = vols.ok_or_else(|| Error::invalid("init_flow", "regression needs strip volumes"))?;
            let mode = Regression::from_init_mode(cfg.init_mode).expect("cri mode");
            regress_init(vols, mode, cfg.cri_axes, cfg.downsample)
        }
        InitMode::FlowHead => {
            let pyr = pyramid.ok_or_else(|| Error::invalid("init_flow", "flow-head needs a correlation pyramid"))?;
            let zero = FlowField::zeros(height, width, res)?;
            let feats = crate::corr::lookup(pyr, &zero, cfg.radius)?;
            let mut g = Graph::<f32>::new();
            let mut mg = ModelGraph::new(&mut g, cfg, params, false);
            if !mg.has_param(&format!("{INIT_HEAD}.weight")) {
                return Err(Error::MissingParam(format!(
                    "{INIT_HEAD}.weight (flow-head init needs its parameters)"
                )));
            }
            let x = mg.input(&feats);
            let out = mg.conv(INIT_HEAD, x, 1)?;
            FlowField::from_planes(&mg.value(out), res)
        }
    }
}
