//! Synthetic frame pairs with exact ground-truth flow.
//!
//! A frame is a window onto a larger smoothed-noise canvas. The second frame
//! samples the canvas through the inverse motion, so `I₂(T(x)) = I₁(x)` and
//! the ground truth is `T(x) − x`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::ImagePair;
use crate::error::{Error, Result};
use crate::field::{FlowField, Resolution};
use crate::tensor::Tensor;

/// Motion family drawn by [`generate_sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Translation,
    Affine,
    TwoLayer,
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionKind::Translation => "translation",
            MotionKind::Affine => "affine",
            MotionKind::TwoLayer => "two-layer",
        })
    }
}

impl std::str::FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(MotionKind::Translation),
            "affine" => Ok(MotionKind::Affine),
            "two-layer" => Ok(MotionKind::TwoLayer),
            _ => Err(Error::invalid("MotionKind", format!("unknown motion `{s}`"))),
        }
    }
}

/// A concrete motion of the first frame onto the second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    Translation { u: f64, v: f64 },
    /// Rotation by `angle` radians about the frame centre, then a shift.
    Affine { angle: f64, u: f64, v: f64 },
    /// A rectangular foreground patch `(x0, y0, w, h)` of a second texture
    /// moving over a translating background.
    TwoLayer {
        background: (f64, f64),
        foreground: (f64, f64),
        patch: (usize, usize, usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    /// Bound on the displacement magnitude of any pixel.
    pub max_disp: f64,
    pub kind: MotionKind,
    /// Standard deviation of the Gaussian that band-limits the noise.
    pub sigma: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            height: 64,
            width: 64,
            max_disp: 8.0,
            kind: MotionKind::Translation,
            sigma: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub pair: ImagePair,
    pub gt_flow: FlowField,
    /// Row-major `H·W` validity flags.
    pub valid_mask: Vec<bool>,
    pub transform: Transform,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

impl Transform {
    /// Displacement of the background point `(x, y)` in a `h×w` frame.
    fn displacement(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        match *self {
            Transform::Identity => (0.0, 0.0),
            Transform::Translation { u, v } => (u, v),
            Transform::Affine { angle, u, v } => {
                let (cx, cy) = center(h, w);
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (c * dx - s * dy + cx + u - x, s * dx + c * dy + cy + v - y)
            }
            Transform::TwoLayer { background, .. } => background,
        }
    }

    /// Source position in the first frame for a background point `(x, y)` of
    /// the second frame.
    fn inverse(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        match *self {
            Transform::Identity => (x, y),
            Transform::Translation { u, v } => (x - u, y - v),
            Transform::Affine { angle, u, v } => {
                let (cx, cy) = center(h, w);
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx - u, y - cy - v);
                (c * dx + s * dy + cx, -s * dx + c * dy + cy)
            }
            Transform::TwoLayer { background: (u, v), .. } => (x - u, y - v),
        }
    }

    /// Closed-form ground truth of the background motion at `(x, y)`.
    pub fn flow_at(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        if let Transform::TwoLayer {
            foreground,
            patch: (x0, y0, pw, ph),
            ..
        } = *self
        {
            if in_rect(x, y, x0, y0, pw, ph) {
                return foreground;
            }
        }
        self.displacement(x, y, h, w)
    }
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

fn in_rect(x: f64, y: f64, x0: usize, y0: usize, w: usize, h: usize) -> bool {
    x >= x0 as f64 && x <= (x0 + w - 1) as f64 && y >= y0 as f64 && y <= (y0 + h - 1) as f64
}

fn inside(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Smoothed RGB noise on a `3×h×w` canvas, rescaled to mean 0.5 and clipped
/// to `[0, 1]`.
struct Canvas {
    data: Vec<f64>,
    h: usize,
    w: usize,
    /// Frame origin inside the canvas.
    margin: usize,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_axis(src: &[f64], h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let o = i as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                };
                acc += kv * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weights of the four taps at offsets `-1, 0, 1, 2` for fraction `t`.
fn keys_weights(t: f64) -> [f64; 4] {
    let k = |d: f64| {
        let d = d.abs();
        if d <= 1.0 {
            (1.5 * d - 2.5) * d * d + 1.0
        } else if d < 2.0 {
            ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0
        } else {
            0.0
        }
    };
    [k(1.0 + t), k(t), k(1.0 - t), k(2.0 - t)]
}

impl Canvas {
    fn new(spec: &GeneratorSpec, margin: usize, rng: &mut ChaCha8Rng) -> Canvas {
        let (h, w) = (spec.height + 2 * margin, spec.width + 2 * margin);
        let kernel = gaussian_kernel(spec.sigma.max(1e-3));
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
            let smooth = blur_axis(&blur_axis(&noise, h, w, &kernel, true), h, w, &kernel, false);
            let n = smooth.len() as f64;
            let mean = smooth.iter().sum::<f64>() / n;
            let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
            data.extend(smooth.iter().map(|v| (0.5 + 0.2 * (v - mean) / std).clamp(0.0, 1.0)));
        }
        Canvas { data, h, w, margin }
    }

    /// Cubic (Keys, `a = -1/2`) sample of channel `c` at frame coordinates
    /// `(x, y)`. Exact on the lattice, and close to the underlying smooth
    /// texture between lattice points, so the second frame carries almost no
    /// interpolation error of its own.
    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let m = self.margin as f64;
        let cx = (x + m).clamp(0.0, (self.w - 1) as f64);
        let cy = (y + m).clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
        let (wx, wy) = (keys_weights(cx - x0 as f64), keys_weights(cy - y0 as f64));
        let plane = &self.data[c * self.h * self.w..(c + 1) * self.h * self.w];
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, self.w as isize - 1) as usize;
            let y = y.clamp(0, self.h as isize - 1) as usize;
            plane[y * self.w + x]
        };
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let row: f64 = wx
                .iter()
                .enumerate()
                .map(|(i, wxi)| wxi * at(x0 + i as isize - 1, y0 + j as isize - 1))
                .sum();
            acc += wyj * row;
        }
        acc.clamp(0.0, 1.0)
    }

    fn frame(&self, spec: &GeneratorSpec, at: impl Fn(usize, usize) -> (f64, f64)) -> Result<Tensor> {
        let (h, w) = (spec.height, spec.width);
        let mut out = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = at(x, y);
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.sample(c, sx, sy) as f32;
                }
            }
        }
        Tensor::new([3, h, w], out)
    }
}

fn check_spec(spec: &GeneratorSpec) -> Result<()> {
    if spec.height < 2 || spec.width < 2 {
        return Err(Error::invalid("generate_sample", "frames must be at least 2×2"));
    }
    if !(spec.max_disp >= 0.0) || spec.max_disp >= spec.height.min(spec.width) as f64 {
        return Err(Error::invalid(
            "generate_sample",
            format!(
                "max_disp {} must be nonnegative and below the image extent {}",
                spec.max_disp,
                spec.height.min(spec.width)
            ),
        ));
    }
    Ok(())
}

fn random_shift(rng: &mut ChaCha8Rng, max: f64) -> (f64, f64) {
    if max == 0.0 {
        return (0.0, 0.0);
    }
    loop {
        let (u, v) = (rng.random_range(-max..=max), rng.random_range(-max..=max));
        if u * u + v * v <= max * max {
            return (u, v);
        }
    }
}

/// Draws a motion of `spec.kind` whose displacements stay within `max_disp`.
fn draw_transform(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Transform {
    let max = spec.max_disp;
    match spec.kind {
        MotionKind::Translation => {
            let (u, v) = random_shift(rng, max);
            Transform::Translation { u, v }
        }
        MotionKind::Affine => {
            // Rotation moves a corner by at most angle·radius; keep half the
            // budget for it and the rest for the shift.
            let (cx, cy) = center(spec.height, spec.width);
            let radius = (cx * cx + cy * cy).sqrt().max(1.0);
            let max_angle = (0.5 * max / radius).min(0.5);
            let angle = rng.random_range(-max_angle..=max_angle);
            let (u, v) = random_shift(rng, 0.5 * max);
            Transform::Affine { angle, u, v }
        }
        MotionKind::TwoLayer => {
            let background = random_shift(rng, max);
            let foreground = random_shift(rng, max);
            let pw = (spec.width / 3).max(1);
            let ph = (spec.height / 3).max(1);
            let x0 = rng.random_range(0..=spec.width - pw);
            let y0 = rng.random_range(0..=spec.height - ph);
            Transform::TwoLayer {
                background,
                foreground,
                patch: (x0, y0, pw, ph),
            }
        }
    }
}

/// Draws a random motion of `spec.kind` and renders it.
pub fn generate_sample(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticSample> {
    check_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transform = draw_transform(spec, &mut rng);
    render(spec, transform, seed, &mut rng)
}

/// Renders a given motion on a texture drawn from `seed`.
pub fn sample_with(spec: &GeneratorSpec, transform: Transform, seed: u64) -> Result<SyntheticSample> {
    check_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(spec, transform, seed, &mut rng)
}

fn render(spec: &GeneratorSpec, transform: Transform, seed: u64, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let (h, w) = (spec.height, spec.width);
    let margin = (spec.max_disp.ceil() as usize + 2).max(h.max(w) / 2);
    let background = Canvas::new(spec, margin, rng);
    let foreground = match transform {
        Transform::TwoLayer { .. } => Some(Canvas::new(spec, margin, rng)),
        _ => None,
    };

    let i1 = match (&foreground, transform) {
        (Some(fg), Transform::TwoLayer { patch: (x0, y0, pw, ph), .. }) => fg.frame(spec, |x, y| (x as f64, y as f64)).and_then(|fgf| {
            let bgf = background.frame(spec, |x, y| (x as f64, y as f64))?;
            Ok(composite(&bgf, &fgf, h, w, |x, y| in_rect(x as f64, y as f64, x0, y0, pw, ph)))
        })?,
        _ => background.frame(spec, |x, y| (x as f64, y as f64))?,
    };
    let i2 = match (&foreground, transform) {
        (Some(fg), Transform::TwoLayer { foreground: (fu, fv), patch: (x0, y0, pw, ph), .. }) => {
            let bgf = background.frame(spec, |x, y| transform.inverse(x as f64, y as f64, h, w))?;
            let fgf = fg.frame(spec, |x, y| (x as f64 - fu, y as f64 - fv))?;
            composite(&bgf, &fgf, h, w, |x, y| in_rect(x as f64 - fu, y as f64 - fv, x0, y0, pw, ph))
        }
        _ => background.frame(spec, |x, y| transform.inverse(x as f64, y as f64, h, w))?,
    };

    let mut flow = Vec::with_capacity(2 * h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = transform.flow_at(xf, yf, h, w);
            flow.push(u as f32);
            flow.push(v as f32);
            let mut ok = inside(xf + u, yf + v, h, w);
            if let Transform::TwoLayer {
                foreground: (fu, fv),
                patch: (x0, y0, pw, ph),
                ..
            } = transform
            {
                let on_patch = in_rect(xf, yf, x0, y0, pw, ph);
                // A background point is hidden when it lands under the moved patch.
                if !on_patch && in_rect(xf + u - fu, yf + v - fv, x0, y0, pw, ph) {
                    ok = false;
                }
            }
            valid.push(ok);
        }
    }

    Ok(SyntheticSample {
        pair: ImagePair::new(i1, i2)?,
        gt_flow: FlowField::new(Tensor::new([h, w, 2], flow)?, Resolution::Full)?,
        valid_mask: valid,
        transform,
        seed,
    })
}

fn composite(bg: &Tensor, fg: &Tensor, h: usize, w: usize, on_fg: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut out = bg.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            if on_fg(x, y) {
                for c in 0..3 {
                    let i = (c * h + y) * w + x;
                    data[i] = fg.data()[i];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: MotionKind) -> GeneratorSpec {
        GeneratorSpec {
            height: 32,
            width: 32,
            kind,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn translation_is_constant() {
        let s = sample_with(&spec(MotionKind::Translation), Transform::Translation { u: 3.0, v: 0.0 }, 1).unwrap();
        assert!(s.gt_flow.values().data().chunks(2).all(|c| c == [3.0, 0.0]));
        // Columns whose target leaves the frame are invalid.
        assert!(!s.valid_mask[31]);
        assert!(s.valid_mask[28]);
    }

    #[test]
    fn identity_copies_frame() {
        let s = sample_with(&spec(MotionKind::Translation), Transform::Identity, 2).unwrap();
        assert_eq!(s.pair.i1, s.pair.i2);
        assert!(s.gt_flow.values().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.valid_count(), 32 * 32);
    }

    #[test]
    fn deterministic_and_bounded() {
        for kind in [MotionKind::Translation, MotionKind::Affine, MotionKind::TwoLayer] {
            let a = generate_sample(&spec(kind), 9).unwrap();
            assert_eq!(a, generate_sample(&spec(kind), 9).unwrap());
            for c in a.gt_flow.values().data().chunks(2) {
                assert!(((c[0] * c[0] + c[1] * c[1]) as f64).sqrt() <= 8.0 + 1e-4, "{kind}");
            }
        }
    }

    #[test]
    fn rejects_oversized_displacement() {
        let s = GeneratorSpec {
            max_disp: 32.0,
            ..spec(MotionKind::Translation)
        };
        assert!(generate_sample(&s, 0).is_err());
    }
}
