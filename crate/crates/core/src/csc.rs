//! Cross strip correlation.
//!
//! Queries are two `1×1` projections of the first frame's features. Keys are
//! two more projections of the second frame's features, each averaged over a
//! whole image axis: averaging over rows leaves one descriptor per column
//! (`K̂_v`, `C'×W`) and averaging over columns one per row (`K̂_h`, `C'×H`).
//! Every pixel's query is then correlated against those strips, so `C_v`
//! indexes candidate columns `x'` and `C_h` candidate rows `y'`.

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, QueryMode};
use crate::error::{Error, Result};
use crate::net::ModelGraph;
use crate::tensor::{Element, Tensor};
use crate::trainer::{ModelParams, ParamSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalQueries {
    /// `C'×H×W`.
    pub q_v: Tensor,
    /// `C'×H×W`.
    pub q_h: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripKeys {
    /// Column descriptors `C'×W`.
    pub k_v: Tensor,
    /// Row descriptors `C'×H`.
    pub k_h: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalVolumes {
    /// `H×W×W`: correlation of each pixel with every column strip.
    pub c_v: Tensor,
    /// `H×W×H`: correlation of each pixel with every row strip.
    pub c_h: Tensor,
}

impl OrthogonalVolumes {
    pub fn height(&self) -> usize {
        self.c_v.dim(0)
    }

    pub fn width(&self) -> usize {
        self.c_v.dim(1)
    }

    /// Scalars stored across both volumes, `H·W·(H+W)`.
    pub fn element_count(&self) -> usize {
        self.c_v.numel() + self.c_h.numel()
    }
}

pub(crate) const QUERY_V: &str = "csc.query_v";
pub(crate) const QUERY_H: &str = "csc.query_h";
pub(crate) const QUERY_SHARED: &str = "csc.query";
pub(crate) const KEY_V: &str = "csc.key_v";
pub(crate) const KEY_H: &str = "csc.key_h";

pub(crate) fn layout(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    if !cfg.csc {
        return;
    }
    let (c, cp) = (cfg.channels, cfg.cprime);
    match cfg.queries {
        QueryMode::Separate => {
            out.extend(ParamSpec::conv(QUERY_V, c, cp, 1));
            out.extend(ParamSpec::conv(QUERY_H, c, cp, 1));
        }
        QueryMode::Same => out.extend(ParamSpec::conv(QUERY_SHARED, c, cp, 1)),
    }
    out.extend(ParamSpec::conv(KEY_V, c, cp, 1));
    out.extend(ParamSpec::conv(KEY_H, c, cp, 1));
}

pub fn queries_graph<T: Element>(mg: &mut ModelGraph<'_, T>, f1: Var) -> Result<(Var, Var)> {
    match mg.cfg.queries {
        QueryMode::Separate => Ok((mg.conv(QUERY_V, f1, 1)?, mg.conv(QUERY_H, f1, 1)?)),
        QueryMode::Same => {
            let q = mg.conv(QUERY_SHARED, f1, 1)?;
            Ok((q, q))
        }
    }
}

/// Projected keys before pooling, each `C'×H×W`.
pub fn raw_keys_graph<T: Element>(mg: &mut ModelGraph<'_, T>, f2: Var) -> Result<(Var, Var)> {
    Ok((mg.conv(KEY_V, f2, 1)?, mg.conv(KEY_H, f2, 1)?))
}

/// Averages `C'×H×W` keys over rows (for `K̂_v`) and over columns (for `K̂_h`).
pub fn strip_pool_graph<T: Element>(g: &mut Graph<T>, k_v: Var, k_h: Var) -> Result<(Var, Var)> {
    Ok((g.mean_axis(k_v, 1)?, g.mean_axis(k_h, 2)?))
}

/// Correlates `C'×H×W` queries with strip keys; returns `C_v` as `(H·W)×W`
/// and `C_h` as `(H·W)×H`.
pub fn strip_correlation_graph<T: Element>(
    g: &mut Graph<T>,
    q_v: Var,
    q_h: Var,
    k_v: Var,
    k_h: Var,
    scale: bool,
) -> Result<(Var, Var)> {
    let &[cp, h, w] = g.shape(q_v) else {
        return Err(Error::shape("cross_strip_correlation", "queries C'×H×W", g.shape(q_v)));
    };
    if g.shape(q_h) != [cp, h, w] {
        return Err(Error::shape("cross_strip_correlation", format!("Q_h {cp}×{h}×{w}"), g.shape(q_h)));
    }
    if g.shape(k_v) != [cp, w] {
        return Err(Error::shape("cross_strip_correlation", format!("K̂_v {cp}×{w}"), g.shape(k_v)));
    }
    if g.shape(k_h) != [cp, h] {
        return Err(Error::shape("cross_strip_correlation", format!("K̂_h {cp}×{h}"), g.shape(k_h)));
    }
    let mut against = |q: Var, k: Var| -> Result<Var> {
        let flat = g.reshape(q, [cp, h * w])?;
        let rows = g.transpose(flat)?;
        let c = g.matmul(rows, k)?;
        Ok(if scale { g.scale(c, 1.0 / (cp as f64).sqrt()) } else { c })
    };
    let c_v = against(q_v, k_v)?;
    let c_h = against(q_h, k_h)?;
    Ok((c_v, c_h))
}

/// Full chain from feature maps to `(C_v, C_h)` in `(H·W)×W`, `(H·W)×H` form.
pub fn csc_graph<T: Element>(mg: &mut ModelGraph<'_, T>, f1: Var, f2: Var) -> Result<(Var, Var)> {
    let (q_v, q_h) = queries_graph(mg, f1)?;
    let (k_v, k_h) = raw_keys_graph(mg, f2)?;
    let (k_v, k_h) = strip_pool_graph(mg.graph, k_v, k_h)?;
    strip_correlation_graph(mg.graph, q_v, q_h, k_v, k_h, mg.cfg.scale_corr)
}

fn check_features(op: &'static str, f: &Tensor, cfg: &ModelConfig) -> Result<()> {
    match f.shape() {
        &[c, _, _] if c == cfg.channels => Ok(()),
        s => Err(Error::shape(op, format!("features {}×H×W", cfg.channels), s)),
    }
}

pub fn make_queries(f1: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<OrthogonalQueries> {
    check_features("make_queries", f1, cfg)?;
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let x = mg.input(f1);
    let (q_v, q_h) = queries_graph(&mut mg, x)?;
    Ok(OrthogonalQueries {
        q_v: mg.value(q_v),
        q_h: mg.value(q_h),
    })
}

pub fn make_strip_keys(f2: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<StripKeys> {
    check_features("make_strip_keys", f2, cfg)?;
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let x = mg.input(f2);
    let (k_v, k_h) = raw_keys_graph(&mut mg, x)?;
    let (k_v, k_h) = strip_pool_graph(mg.graph, k_v, k_h)?;
    Ok(StripKeys {
        k_v: mg.value(k_v),
        k_h: mg.value(k_h),
    })
}

/// Strip pooling of already projected `C'×H×W` keys.
pub fn strip_pool(k_v: &Tensor, k_h: &Tensor) -> Result<StripKeys> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(k_v.clone()), g.constant(k_h.clone()));
    if g.shape(a).len() != 3 || g.shape(a) != g.shape(b) {
        return Err(Error::shape("strip_pool", "two C'×H×W key maps", k_h.shape()));
    }
    let (a, b) = strip_pool_graph(&mut g, a, b)?;
    Ok(StripKeys {
        k_v: g.value(a).clone(),
        k_h: g.value(b).clone(),
    })
}

pub fn cross_strip_correlation(q: &OrthogonalQueries, k: &StripKeys, scale: bool) -> Result<OrthogonalVolumes> {
    let mut g = Graph::new();
    let vars = [&q.q_v, &q.q_h, &k.k_v, &k.k_h].map(|t| g.constant(t.clone()));
    let (c_v, c_h) = strip_correlation_graph(&mut g, vars[0], vars[1], vars[2], vars[3], scale)?;
    let (h, w) = (q.q_v.dim(1), q.q_v.dim(2));
    Ok(OrthogonalVolumes {
        c_v: g.value(c_v).clone().reshape([h, w, w])?,
        c_h: g.value(c_h).clone().reshape([h, w, h])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_product_case() {
        let q = OrthogonalQueries {
            q_v: Tensor::full([1, 1, 2], 2.0).unwrap(),
            q_h: Tensor::zeros([1, 1, 2]).unwrap(),
        };
        let k = StripKeys {
            k_v: t(&[1, 2], &[1.0, 3.0]),
            k_h: t(&[1, 1], &[5.0]),
        };
        let vols = cross_strip_correlation(&q, &k, false).unwrap();
        assert_eq!(vols.c_v.shape(), &[1, 2, 2]);
        assert_eq!(vols.c_v.data(), &[2.0, 6.0, 2.0, 6.0]);
        assert!(vols.c_h.data().iter().all(|&v| v == 0.0));
        assert_eq!(vols.element_count(), 2 * (1 + 2));
    }

    #[test]
    fn two_row_mean() {
        let kv = t(&[1, 2, 1], &[1.0, 4.0]);
        let keys = strip_pool(&kv, &kv).unwrap();
        assert_eq!(keys.k_v.data(), &[2.5]);
        assert_eq!(keys.k_h.data(), &[1.0, 4.0]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let q = OrthogonalQueries {
            q_v: Tensor::zeros([2, 3, 4]).unwrap(),
            q_h: Tensor::zeros([2, 3, 4]).unwrap(),
        };
        let k = StripKeys {
            k_v: Tensor::zeros([3, 4]).unwrap(),
            k_h: Tensor::zeros([3, 3]).unwrap(),
        };
        assert!(cross_strip_correlation(&q, &k, true).is_err());
    }
}
