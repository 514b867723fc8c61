//! Convolutional feature and context encoders.
//!
//! Each encoder is three conv blocks whose leading strides reach `1/d`
//! resolution. The two feature branches have their own weights. The context
//! encoder shares the block structure; its last conv is split into a
//! tanh-bounded hidden-state initializer and a rectified input context.

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::net::ModelGraph;
use crate::tensor::{Element, Tensor};
use crate::trainer::{ModelParams, ParamSpec};

/// Two RGB frames `3×H₀×W₀` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub i1: Tensor,
    pub i2: Tensor,
}

impl ImagePair {
    pub fn new(i1: Tensor, i2: Tensor) -> Result<Self> {
        check_image("ImagePair", &i1)?;
        if i1.shape() != i2.shape() {
            return Err(Error::shape("ImagePair", format!("second frame {:?}", i1.shape()), i2.shape()));
        }
        check_image("ImagePair", &i2)?;
        Ok(ImagePair { i1, i2 })
    }

    pub fn height(&self) -> usize {
        self.i1.dim(1)
    }

    pub fn width(&self) -> usize {
        self.i1.dim(2)
    }
}

fn check_image(op: &'static str, t: &Tensor) -> Result<()> {
    let &[3, _, _] = t.shape() else {
        return Err(Error::shape(op, "RGB frame 3×H×W", t.shape()));
    };
    if !t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::invalid(op, "pixel values must be finite and in [0, 1]"));
    }
    Ok(())
}

/// Features of both frames at `1/factor` resolution, `C×H×W` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub f1: Tensor,
    pub f2: Tensor,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    /// Hidden-state initializer, values in `(-1, 1)`.
    pub hidden: Tensor,
    /// Static input context, values `>= 0`.
    pub context: Tensor,
}

/// Rejects spatial sizes the encoder cannot reduce exactly by `factor`.
pub fn check_divisible(height: usize, width: usize, factor: usize) -> Result<()> {
    if height % factor != 0 || width % factor != 0 || height == 0 || width == 0 {
        return Err(Error::NotDivisible {
            height,
            width,
            factor,
            crop_h: height - height % factor,
            crop_w: width - width % factor,
        });
    }
    Ok(())
}

/// Maps `[0, 1]` pixels to the `[-1, 1]` range the encoders consume.
pub(crate) fn normalize(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

struct Block {
    kernel: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
}

fn blocks(factor: usize, out_channels: usize) -> [Block; 3] {
    let halvings = factor.trailing_zeros() as usize;
    let widths = [(out_channels / 4).max(8), (out_channels / 2).max(8), out_channels];
    let stride = |i: usize| if i < halvings { 2 } else { 1 };
    let kernel = |i: usize| if i == 0 && factor == 8 { 7 } else { 3 };
    let c_in = |i: usize| if i == 0 { 3 } else { widths[i - 1] };
    [0, 1, 2].map(|i| Block {
        kernel: kernel(i),
        stride: stride(i),
        c_in: c_in(i),
        c_out: widths[i],
    })
}

const FEATURE_BRANCHES: [&str; 2] = ["encoder.f1", "encoder.f2"];
const CONTEXT: &str = "context";

pub(crate) fn layout(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    let mut push = |prefix: &str, width: usize| {
        for (i, b) in blocks(cfg.downsample, width).iter().enumerate() {
            out.extend(ParamSpec::conv(&format!("{prefix}.block{i}"), b.c_in, b.c_out, b.kernel));
        }
    };
    for branch in FEATURE_BRANCHES {
        push(branch, cfg.channels);
    }
    push(CONTEXT, cfg.context_channels);
}

/// Runs one encoder stack; the final activation is skipped when `last_linear`.
fn stack<T: Element>(mg: &mut ModelGraph<'_, T>, prefix: &str, width: usize, image: Var, last_linear: bool) -> Result<Var> {
    let mut x = image;
    for (i, b) in blocks(mg.cfg.downsample, width).iter().enumerate() {
        x = mg.conv(&format!("{prefix}.block{i}"), x, b.stride)?;
        if !(last_linear && i == 2) {
            x = mg.graph.elu(x);
        }
    }
    Ok(x)
}

/// Features of both normalized frames from independent branches.
pub fn features_graph<T: Element>(mg: &mut ModelGraph<'_, T>, i1: Var, i2: Var) -> Result<(Var, Var)> {
    let c = mg.cfg.channels;
    let f1 = stack(mg, FEATURE_BRANCHES[0], c, i1, false)?;
    let f2 = stack(mg, FEATURE_BRANCHES[1], c, i2, false)?;
    Ok((f1, f2))
}

/// Hidden-state initializer and input context of the normalized first frame.
pub fn context_graph<T: Element>(mg: &mut ModelGraph<'_, T>, i1: Var) -> Result<(Var, Var)> {
    let cfg = mg.cfg;
    let raw = stack(mg, CONTEXT, cfg.context_channels, i1, true)?;
    let nh = cfg.hidden_channels();
    let h = mg.graph.slice(raw, 0, nh)?;
    let c = mg.graph.slice(raw, nh, cfg.input_context_channels())?;
    Ok((mg.graph.tanh(h), mg.graph.relu(c)))
}

fn check_frame(img: &Tensor, factor: usize) -> Result<()> {
    check_image("encoder", img)?;
    check_divisible(img.dim(1), img.dim(2), factor)
}

pub fn encode_features(pair: &ImagePair, params: &ModelParams, cfg: &ModelConfig) -> Result<FeaturePair> {
    check_frame(&pair.i1, cfg.downsample)?;
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let i1 = mg.input(&normalize(&pair.i1));
    let i2 = mg.input(&normalize(&pair.i2));
    let (f1, f2) = features_graph(&mut mg, i1, i2)?;
    Ok(FeaturePair {
        f1: mg.value(f1),
        f2: mg.value(f2),
        factor: cfg.downsample,
    })
}

pub fn encode_context(i1: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<ContextFeatures> {
    check_frame(i1, cfg.downsample)?;
    let mut g = Graph::<f32>::new();
    let mut mg = ModelGraph::new(&mut g, cfg, params, false);
    let x = mg.input(&normalize(i1));
    let (h, c) = context_graph(&mut mg, x)?;
    Ok(ContextFeatures {
        hidden: mg.value(h),
        context: mg.value(c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_params;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 32,
            cprime: 16,
            context_channels: 64,
            ..ModelConfig::default()
        }
    }

    fn frame(seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn feature_shapes_and_branch_independence() {
        let cfg = small();
        let params = init_params(&cfg, 1).unwrap();
        let img = frame(2);
        let pair = ImagePair::new(img.clone(), img).unwrap();
        let f = encode_features(&pair, &params, &cfg).unwrap();
        assert_eq!(f.f1.shape(), &[32, 8, 8]);
        assert_eq!(f.f2.shape(), &[32, 8, 8]);
        assert_ne!(f.f1, f.f2);
    }

    #[test]
    fn context_split_ranges() {
        let cfg = small();
        let params = init_params(&cfg, 3).unwrap();
        let ctx = encode_context(&frame(4), &params, &cfg).unwrap();
        assert_eq!(ctx.hidden.shape(), &[32, 8, 8]);
        assert_eq!(ctx.context.shape(), &[32, 8, 8]);
        assert!(ctx.hidden.data().iter().all(|v| v.abs() < 1.0));
        assert!(ctx.context.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_divisible_rejected_with_crop() {
        let err = check_divisible(30, 32, 4).unwrap_err();
        assert!(err.to_string().contains("28"), "{err}");
        let cfg = small();
        let params = init_params(&cfg, 0).unwrap();
        let img = Tensor::zeros([3, 30, 32]).unwrap();
        assert!(encode_context(&img, &params, &cfg).is_err());
    }

    #[test]
    fn eight_fold_reduction() {
        let cfg = ModelConfig {
            downsample: 8,
            ..small()
        };
        let params = init_params(&cfg, 0).unwrap();
        let pair = ImagePair::new(frame(1), frame(2)).unwrap();
        let f = encode_features(&pair, &params, &cfg).unwrap();
        assert_eq!(f.f1.shape(), &[32, 4, 4]);
        assert_eq!(params.get("encoder.f1.block0.weight").unwrap().shape(), &[8, 3, 7, 7]);
    }
}
