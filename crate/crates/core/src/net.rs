//! Binding of named parameters into an autodiff graph.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::trainer::ModelParams;

enum Source<'a> {
    Params { params: &'a ModelParams, trainable: bool },
    Bound,
}

/// A graph under construction together with the configuration and the
/// parameter store it reads from.
///
/// Parameters are bound lazily: the first request for a path inserts it into
/// the graph (as a leaf when trainable, as a constant otherwise) and later
/// requests reuse that node.
pub struct ModelGraph<'a, T: Element = f32> {
    pub graph: &'a mut Graph<T>,
    pub cfg: &'a ModelConfig,
    source: Source<'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Element> ModelGraph<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, cfg: &'a ModelConfig, params: &'a ModelParams, trainable: bool) -> Self {
        ModelGraph {
            graph,
            cfg,
            source: Source::Params { params, trainable },
            bound: BTreeMap::new(),
        }
    }

    /// Uses nodes already present in `graph` as the parameters; any path not
    /// in `vars` is reported missing.
    pub fn with_vars(graph: &'a mut Graph<T>, cfg: &'a ModelConfig, vars: BTreeMap<String, Var>) -> Self {
        ModelGraph {
            graph,
            cfg,
            source: Source::Bound,
            bound: vars,
        }
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let Source::Params { params, trainable } = self.source else {
            return Err(Error::MissingParam(path.to_string()));
        };
        let t = params.get(path)?.cast::<T>();
        let v = if trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    /// Whether `path` can be bound, without counting an access.
    pub fn has_param(&self, path: &str) -> bool {
        match self.source {
            Source::Params { params, .. } => self.bound.contains_key(path) || params.contains(path),
            Source::Bound => self.bound.contains_key(path),
        }
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.graph.constant(t.cast())
    }

    /// Same-padded convolution with `{prefix}.weight` and `{prefix}.bias`.
    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let k = self.graph.shape(w)[2];
        self.graph.conv2d(x, w, b, stride, k / 2)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.graph.value(v).cast()
    }

    /// Bound parameter nodes in path order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
