//! Central-difference verification of analytic gradients.
//!
//! Checks run in `f64` storage so that rounding noise in the difference
//! quotient stays far below the tolerances being asserted.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::WindowAxes;
use crate::tensor::Tensor;

/// Pass threshold for a single primitive.
pub const REL_TOLERANCE: f64 = 1e-3;

const MIN_PROBES: usize = 8;
const PROBES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub probe_count: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub type CheckFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

struct CheckCase {
    name: String,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    build: CheckFn,
}

/// An ordered list of checks: the registered primitives plus any composite
/// chains pushed by callers.
pub struct GradCheckSuite {
    cases: Vec<CheckCase>,
}

const PRIMITIVES: &[&str] = &[
    "linear",
    "conv2d",
    "conv2d_1x1",
    "conv2d_stride2",
    "avg_pool2d",
    "softmax_lastdim",
    "matmul",
    "bilinear_sample",
    "mean_axis",
    "transpose",
    "concat",
    "slice",
    "add",
    "sub",
    "mul",
    "elu",
    "relu",
    "tanh",
    "sigmoid",
    "abs",
    "lerp",
    "sum_lastdim",
    "aggregate",
    "window_coords",
    "convex_upsample",
];

/// Names accepted by [`grad_check`].
pub fn registered_ops() -> &'static [&'static str] {
    PRIMITIVES
}

fn primitive(name: &str) -> Option<CheckFn> {
    let f: CheckFn = match name {
        "linear" => Box::new(|g, v| Ok(g.scale(v[0], 2.0))),
        "conv2d" => Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        "conv2d_1x1" => Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
        "conv2d_stride2" => Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        "avg_pool2d" => Box::new(|g, v| g.avg_pool2d(v[0], 2)),
        "softmax_lastdim" => Box::new(|g, v| g.softmax_lastdim(v[0])),
        "matmul" => Box::new(|g, v| g.matmul(v[0], v[1])),
        "bilinear_sample" => Box::new(|g, v| g.bilinear_sample(v[0], v[1])),
        "mean_axis" => Box::new(|g, v| g.mean_axis(v[0], 1)),
        "transpose" => Box::new(|g, v| g.transpose(v[0])),
        "concat" => Box::new(|g, v| g.concat(v)),
        "slice" => Box::new(|g, v| g.slice(v[0], 1, 2)),
        "add" => Box::new(|g, v| g.add(v[0], v[1])),
        "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
        "mul" => Box::new(|g, v| g.mul(v[0], v[1])),
        "elu" => Box::new(|g, v| Ok(g.elu(v[0]))),
        "relu" => Box::new(|g, v| Ok(g.relu(v[0]))),
        "tanh" => Box::new(|g, v| Ok(g.tanh(v[0]))),
        "sigmoid" => Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        "abs" => Box::new(|g, v| Ok(g.abs(v[0]))),
        "lerp" => Box::new(|g, v| {
            let gate = g.sigmoid(v[2]);
            g.lerp(v[0], v[1], gate)
        }),
        "sum_lastdim" => Box::new(|g, v| g.sum_lastdim(v[0])),
        "aggregate" => Box::new(|g, v| g.aggregate(v[0], v[1], v[2])),
        "window_coords" => Box::new(|g, v| g.window_coords(v[0], 2.0, 1, WindowAxes::Both)),
        "convex_upsample" => Box::new(|g, v| g.convex_upsample(v[0], v[1], 2)),
        _ => return None,
    };
    Some(f)
}

/// Random sample inputs in `[-2, 2]` sized for the named primitive.
pub fn sample_inputs<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<Vec<Tensor<f64>>> {
    let shapes: Vec<Vec<usize>> = match name {
        "linear" | "elu" | "relu" | "tanh" | "sigmoid" | "abs" => vec![vec![3, 7]],
        "conv2d" => vec![vec![3, 5, 6], vec![4, 3, 3, 3], vec![4]],
        "conv2d_1x1" => vec![vec![4, 5, 5], vec![6, 4, 1, 1], vec![6]],
        "conv2d_stride2" => vec![vec![2, 6, 7], vec![3, 2, 3, 3], vec![3]],
        "avg_pool2d" => vec![vec![2, 5, 6]],
        "softmax_lastdim" => vec![vec![3, 7]],
        "matmul" => vec![vec![4, 5], vec![5, 3]],
        "mean_axis" => vec![vec![3, 4, 5]],
        "transpose" => vec![vec![4, 6]],
        "concat" => vec![vec![2, 3, 4], vec![1, 3, 4], vec![3, 3, 4]],
        "slice" => vec![vec![4, 3, 2]],
        "add" | "sub" | "mul" => vec![vec![3, 4], vec![3, 4]],
        "lerp" => vec![vec![2, 5], vec![2, 5], vec![2, 5]],
        "sum_lastdim" => vec![vec![3, 4, 5]],
        "aggregate" => vec![vec![12, 3, 4], vec![12, 4], vec![12, 3]],
        "window_coords" => vec![vec![2, 3, 4]],
        "convex_upsample" => vec![vec![2, 3, 4], vec![36, 3, 4]],
        "bilinear_sample" => {
            let input = Tensor::uniform([2, 4, 5], -2.0, 2.0, rng)?;
            let coords = Tensor::from_fn([3, 3, 2], |i| {
                // Keep coordinates inside the grid so the check exercises both
                // interpolation weights and coordinate gradients.
                let hi = if i % 2 == 0 { 4.0 } else { 3.0 };
                rng.random_range(0.05..hi - 0.05)
            })?;
            return Ok(vec![input, coords]);
        }
        _ => return Err(Error::UnknownOp(name.to_string())),
    };
    shapes
        .into_iter()
        .map(|s| Tensor::uniform(s, -2.0, 2.0, rng))
        .collect()
}

fn seeded(name: &str) -> ChaCha8Rng {
    let seed = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks a registered primitive at `sample_input` with central differences
/// of step `epsilon`.
pub fn grad_check(op_name: &str, sample_input: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport> {
    let build = primitive(op_name).ok_or_else(|| Error::UnknownOp(op_name.to_string()))?;
    check_with(op_name, sample_input, epsilon, REL_TOLERANCE, &build)
}

/// Checks an arbitrary differentiable function of `inputs`.
///
/// The scalar objective is a fixed random projection of the output. Probes
/// are spread round-robin over the inputs; relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn check_with(
    name: &str,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
    build: &(dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync),
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("grad_check", "no inputs"));
    }
    let mut rng = seeded(name);

    let mut g = Graph::<f64>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let weights: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = g.dot_const(out, weights.clone())?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();

    let mut probes = Vec::new();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let target = PROBES.min(total).max(MIN_PROBES.min(total));
    let per_input = target.div_ceil(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let n = per_input.min(t.numel());
        for e in index::sample(&mut rng, t.numel(), n) {
            probes.push((i, e));
        }
    }

    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[elem] += delta;
                }
                g.leaf(t)
            })
            .collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).data().iter().zip(&weights).map(|(y, w)| y * w).sum())
    };

    let mut max_rel_err: f64 = 0.0;
    for &(which, elem) in &probes {
        let plus = eval(which, elem, epsilon)?;
        let minus = eval(which, elem, -epsilon)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[which][elem];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        max_rel_err = if rel.is_nan() { f64::INFINITY } else { max_rel_err.max(rel) };
    }

    Ok(GradCheckReport {
        op_name: name.to_string(),
        max_rel_err,
        probe_count: probes.len(),
        tolerance,
    })
}

impl GradCheckSuite {
    pub fn empty() -> Self {
        GradCheckSuite { cases: Vec::new() }
    }

    /// Every registered primitive at seeded random inputs.
    pub fn primitives(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut suite = Self::empty();
        for &name in PRIMITIVES {
            let inputs = sample_inputs(name, &mut rng)?;
            let build = primitive(name).expect("registered");
            suite.cases.push(CheckCase {
                name: name.to_string(),
                tolerance: REL_TOLERANCE,
                inputs,
                build,
            });
        }
        Ok(suite)
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tolerance: f64,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) {
        self.cases.push(CheckCase {
            name: name.into(),
            tolerance,
            inputs,
            build: Box::new(build),
        });
    }

    pub fn names(&self) -> Vec<&str> {
        self.cases.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn run(&self, epsilon: f64) -> Result<Vec<GradCheckReport>> {
        self.cases
            .iter()
            .map(|c| check_with(&c.name, &c.inputs, epsilon, c.tolerance, c.build.as_ref()))
            .collect()
    }
}

/// Runs every registered primitive at seeded inputs.
pub fn grad_check_all(epsilon: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    GradCheckSuite::primitives(seed)?.run(epsilon)
}
