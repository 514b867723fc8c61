//! All-pair correlation, aggregation with the strip volumes, the pooling
//! pyramid, and the windowed lookup driven by the current flow.
//!
//! Inside a graph every volume is kept with the source pixel flattened first:
//! `P×ch×H×W` with `P = H·W`. The public tensors use the same memory order
//! with the source pixel split back into `H×W`.

use crate::autodiff::{Graph, Var};
use crate::config::{AggregateMode, ModelConfig, PYRAMID_KERNELS};
use crate::csc::OrthogonalVolumes;
use crate::encoders::FeaturePair;
use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::tensor::{Element, Tensor, WindowAxes};

/// `H×W×H×W`, entry `[y1][x1][y2][x2] = <F1(y1, x1), F2(y2, x2)>`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllPairVolume {
    pub volume: Tensor,
}

/// `H×W×2×H×W`: channel 0 is the all-pair volume, channel 1 the strip
/// volumes broadcast onto the target lattice and summed.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedVolume {
    pub volume: Tensor,
}

/// Pooled copies of a `H×W×ch×H×W` volume, one per [`PYRAMID_KERNELS`] entry.
///
/// In separate-1d mode `levels` hold the single-channel all-pair volume and
/// `strips` the pooled `C_v` (`H×W×1×W_k`) and `C_h` (`H×W×1×H_k`) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPyramid {
    pub levels: Vec<Tensor>,
    pub strips: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

/// Pyramid nodes inside a graph, shapes `P×ch×H_k×W_k`.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub strips: Option<(Vec<Var>, Vec<Var>)>,
    pub height: usize,
    pub width: usize,
}

/// Scalars in an all-pair volume over an `h×w` grid.
pub fn allpair_elements(h: usize, w: usize) -> u64 {
    let p = (h * w) as u64;
    p * p
}

/// Scalars in the two strip volumes over an `h×w` grid.
pub fn strip_elements(h: usize, w: usize) -> u64 {
    (h * w) as u64 * (h + w) as u64
}

/// All-pair volume `P×H×W` from features `C×H×W`.
pub fn all_pair_graph<T: Element>(g: &mut Graph<T>, f1: Var, f2: Var, scale: bool) -> Result<Var> {
    let &[c, h, w] = g.shape(f1) else {
        return Err(Error::shape("all_pair_correlation", "features C×H×W", g.shape(f1)));
    };
    if g.shape(f2) != [c, h, w] {
        return Err(Error::shape("all_pair_correlation", format!("F2 {c}×{h}×{w}"), g.shape(f2)));
    }
    let p = h * w;
    let a = g.reshape(f1, [c, p])?;
    let a = g.transpose(a)?;
    let b = g.reshape(f2, [c, p])?;
    let corr = g.matmul(a, b)?;
    let corr = if scale { g.scale(corr, 1.0 / (c as f64).sqrt()) } else { corr };
    g.reshape(corr, [p, h, w])
}

/// Pools the last two axes of `vol` with every pyramid kernel. Level 0 is
/// `vol` itself.
pub fn pyramid_graph<T: Element>(g: &mut Graph<T>, vol: Var) -> Result<Vec<Var>> {
    PYRAMID_KERNELS
        .iter()
        .map(|&k| if k == 1 { Ok(vol) } else { g.avg_pool2d(vol, k) })
        .collect()
}

/// Builds the pyramid the lookup samples. `strips` are `(C_v, C_h)` as
/// `P×W`, `P×H`; `None` means strip correlation is disabled.
pub fn volumes_graph<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    f1: Var,
    f2: Var,
    strips: Option<(Var, Var)>,
) -> Result<PyramidVars> {
    let (h, w) = (g.shape(f1)[1], g.shape(f1)[2]);
    let p = h * w;
    let c = all_pair_graph(g, f1, f2, cfg.scale_corr)?;
    match (strips, cfg.aggregate) {
        (None, _) => {
            let vol = g.reshape(c, [p, 1, h, w])?;
            Ok(PyramidVars {
                levels: pyramid_graph(g, vol)?,
                strips: None,
                height: h,
                width: w,
            })
        }
        (Some((cv, ch)), AggregateMode::BroadcastSum) => {
            let vol = g.aggregate(c, cv, ch)?;
            Ok(PyramidVars {
                levels: pyramid_graph(g, vol)?,
                strips: None,
                height: h,
                width: w,
            })
        }
        (Some((cv, ch)), AggregateMode::Separate1d) => {
            let vol = g.reshape(c, [p, 1, h, w])?;
            let sv = g.reshape(cv, [p, 1, 1, w])?;
            let sh = g.reshape(ch, [p, 1, 1, h])?;
            Ok(PyramidVars {
                levels: pyramid_graph(g, vol)?,
                strips: Some((pyramid_graph(g, sv)?, pyramid_graph(g, sh)?)),
                height: h,
                width: w,
            })
        }
    }
}

/// Samples one pooled volume around every pixel's target and returns
/// `(ch·S_y·S_x)×H×W` features.
fn sample_level<T: Element>(
    g: &mut Graph<T>,
    level: Var,
    flow: Var,
    kernel: usize,
    radius: usize,
    axes: WindowAxes,
    h: usize,
    w: usize,
) -> Result<Var> {
    let coords = g.window_coords(flow, kernel as f64, radius, axes)?;
    let sampled = g.bilinear_sample(level, coords)?;
    let p = h * w;
    let per_pixel = g.value(sampled).numel() / p;
    let rows = g.reshape(sampled, [p, per_pixel])?;
    let cols = g.transpose(rows)?;
    g.reshape(cols, [per_pixel, h, w])
}

/// Correlation features around the flow targets, `L×H×W`. Ordering is
/// level-major, then volume channel, then window row and column.
pub fn lookup_graph<T: Element>(g: &mut Graph<T>, pyr: &PyramidVars, flow: Var, radius: usize) -> Result<Var> {
    let (h, w) = (pyr.height, pyr.width);
    if g.shape(flow) != [2, h, w] {
        return Err(Error::shape("lookup", format!("flow 2×{h}×{w}"), g.shape(flow)));
    }
    let mut parts = Vec::new();
    for (i, &k) in PYRAMID_KERNELS.iter().enumerate() {
        parts.push(sample_level(g, pyr.levels[i], flow, k, radius, WindowAxes::Both, h, w)?);
        if let Some((sv, sh)) = &pyr.strips {
            parts.push(sample_level(g, sv[i], flow, k, radius, WindowAxes::Horizontal, h, w)?);
            parts.push(sample_level(g, sh[i], flow, k, radius, WindowAxes::Vertical, h, w)?);
        }
    }
    g.concat(&parts)
}

pub fn all_pair_correlation(f: &FeaturePair, scale: bool) -> Result<AllPairVolume> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(f.f1.clone()), g.constant(f.f2.clone()));
    let c = all_pair_graph(&mut g, a, b, scale)?;
    let (h, w) = (f.f1.dim(1), f.f1.dim(2));
    Ok(AllPairVolume {
        volume: g.value(c).clone().reshape([h, w, h, w])?,
    })
}

fn split_volume(c: &AllPairVolume) -> Result<(usize, usize)> {
    match *c.volume.shape() {
        [h, w, h2, w2] if h == h2 && w == w2 => Ok((h, w)),
        _ => Err(Error::shape("aggregate", "all-pair volume H×W×H×W", c.volume.shape())),
    }
}

pub fn aggregate(c: &AllPairVolume, vols: &OrthogonalVolumes) -> Result<AggregatedVolume> {
    let (h, w) = split_volume(c)?;
    if vols.c_v.shape() != [h, w, w] || vols.c_h.shape() != [h, w, h] {
        return Err(Error::shape(
            "aggregate",
            format!("C_v {h}×{w}×{w} and C_h {h}×{w}×{h}"),
            vols.c_v.shape(),
        ));
    }
    let p = h * w;
    let mut g = Graph::new();
    let cv = g.constant(vols.c_v.clone().reshape([p, w])?);
    let ch = g.constant(vols.c_h.clone().reshape([p, h])?);
    let cc = g.constant(c.volume.clone().reshape([p, h, w])?);
    let out = g.aggregate(cc, cv, ch)?;
    Ok(AggregatedVolume {
        volume: g.value(out).clone().reshape([h, w, 2, h, w])?,
    })
}

fn pooled_levels(volume: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let v = g.constant(volume.clone());
    let levels = pyramid_graph(&mut g, v)?;
    Ok(levels.into_iter().map(|l| g.value(l).clone()).collect())
}

pub fn build_pyramid(c_hat: &AggregatedVolume) -> Result<CorrelationPyramid> {
    if c_hat.volume.rank() != 5 {
        return Err(Error::shape("build_pyramid", "H×W×2×H×W", c_hat.volume.shape()));
    }
    Ok(CorrelationPyramid {
        levels: pooled_levels(&c_hat.volume)?,
        strips: None,
    })
}

/// Pyramid for the separate-1d mode: single-channel all-pair levels plus
/// independently pooled strip volumes.
pub fn build_separate_pyramid(c: &AllPairVolume, vols: &OrthogonalVolumes) -> Result<CorrelationPyramid> {
    let (h, w) = split_volume(c)?;
    let c1 = c.volume.clone().reshape([h, w, 1, h, w])?;
    let sv = vols.c_v.clone().reshape([h, w, 1, w])?;
    let sh = vols.c_h.clone().reshape([h, w, 1, h])?;
    Ok(CorrelationPyramid {
        levels: pooled_levels(&c1)?,
        strips: Some((pooled_levels(&sv)?, pooled_levels(&sh)?)),
    })
}

/// Windowed lookup of a pyramid at the targets of a grid-resolution flow.
pub fn lookup(pyr: &CorrelationPyramid, flow: &FlowField, radius: usize) -> Result<Tensor> {
    let (h, w) = (flow.height(), flow.width());
    let p = h * w;
    let mut g = Graph::new();
    let mut as_vars = |ts: &[Tensor]| -> Result<Vec<Var>> {
        ts.iter()
            .map(|t| {
                let s = t.shape();
                if s.len() < 3 || s[0] * s[1] != p {
                    return Err(Error::shape("lookup", format!("{h}×{w}×… pyramid level"), s));
                }
                let mut shape = vec![p];
                shape.extend_from_slice(&s[2..]);
                if shape.len() == 3 {
                    shape.insert(1, 1);
                }
                Ok(g.constant(t.clone().reshape(shape)?))
            })
            .collect()
    };
    let levels = as_vars(&pyr.levels)?;
    let strips = match &pyr.strips {
        Some((v, hh)) => Some((as_vars(v)?, as_vars(hh)?)),
        None => None,
    };
    if levels.len() != PYRAMID_KERNELS.len() {
        return Err(Error::invalid("lookup", format!("expected {} pyramid levels", PYRAMID_KERNELS.len())));
    }
    let vars = PyramidVars {
        levels,
        strips,
        height: h,
        width: w,
    };
    let f = g.constant(flow.to_planes());
    let out = lookup_graph(&mut g, &vars, f, radius)?;
    Ok(g.value(out).clone())
}
