//! Data, objective, metrics and file formats around flow fields.

mod color;
mod flo;
mod metrics;
mod report;
mod synth;

pub use color::{color_wheel, colorize, encode_ppm, flow_color, percentile_magnitude, write_ppm, WHEEL_LEN};
pub use flo::{decode_flo, encode_flo, flo_len, read_flo, write_flo, FLO_MAGIC};
pub use metrics::{epe, f1_all, sequence_loss, sequence_loss_graph, sequence_weight, F1Rule};
pub use report::{EvalReport, SampleScore, REPORT_HEADER};
pub use synth::{generate_sample, sample_with, GeneratorSpec, MotionKind, SyntheticSample, Transform};

use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::tensor::Tensor;

/// Samples `img` (`C×H×W`) at `x + flow(x)` with bilinear interpolation.
/// Pixels whose target leaves the frame read the clamped border.
pub fn warp_backward(img: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("warp_backward", "C×H×W", img.shape()));
    };
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::shape("warp_backward", format!("flow {h}×{w}×2"), flow.values().shape()));
    }
    let src = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv(y, x);
            let sx = (x as f64 + u as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + v as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx] as f64;
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out[(ch * h + y) * w + x] = ((1.0 - fy) * top + fy * bottom) as f32;
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Mean absolute difference between `I₁` and `I₂` sampled along the flow,
/// over valid pixels and all channels.
pub fn photometric_residual(sample: &SyntheticSample) -> Result<f64> {
    let warped = warp_backward(&sample.pair.i2, &sample.gt_flow)?;
    let (h, w) = (sample.pair.height(), sample.pair.width());
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..3 {
        for (p, &ok) in sample.valid_mask.iter().enumerate() {
            if ok {
                let i = ch * h * w + p;
                sum += (warped.data()[i] as f64 - sample.pair.i1.data()[i] as f64).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("photometric_residual", "valid mask is empty"));
    }
    Ok(sum / n as f64)
}
