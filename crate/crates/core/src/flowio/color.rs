//! Colour-wheel rendering of flow fields.
//!
//! Hue follows the direction `atan2(v, u)` around the 55-colour Middlebury
//! wheel, starting from red at angle 0. Saturation grows with magnitude
//! relative to `max_mag`; zero flow is white.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::field::FlowField;

/// Segment lengths red→yellow→green→cyan→blue→magenta→red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
pub const WHEEL_LEN: usize = 55;

/// The wheel's colours in `[0, 1]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_LEN);
    for (seg, &n) in SEGMENTS.iter().enumerate() {
        for i in 0..n {
            let ramp = (255.0 * i as f64 / n as f64).floor() / 255.0;
            // Each segment ramps one channel up or down while another is full.
            let rgb = match seg {
                0 => [1.0, ramp, 0.0],
                1 => [1.0 - ramp, 1.0, 0.0],
                2 => [0.0, 1.0, ramp],
                3 => [0.0, 1.0 - ramp, 1.0],
                4 => [ramp, 0.0, 1.0],
                _ => [1.0, 0.0, 1.0 - ramp],
            };
            wheel.push(rgb);
        }
    }
    wheel
}

/// 99th-percentile magnitude of the field.
pub fn percentile_magnitude(flow: &FlowField, q: f64) -> f64 {
    let mut mags: Vec<f64> = flow
        .values()
        .data()
        .chunks_exact(2)
        .map(|c| (c[0] as f64).hypot(c[1] as f64))
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    mags[((mags.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize]
}

/// Colour of a displacement already divided by the normalizing magnitude.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let rad = u.hypot(v).min(1.0);
    let theta = v.atan2(u).rem_euclid(TAU);
    let fk = theta / TAU * wheel.len() as f64;
    let k0 = (fk.floor() as usize) % wheel.len();
    let k1 = (k0 + 1) % wheel.len();
    let f = fk - fk.floor();
    std::array::from_fn(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        (255.0 * (1.0 - rad * (1.0 - col))).round().clamp(0.0, 255.0) as u8
    })
}

/// Renders `flow`, normalizing by `max_mag` or the 99th-percentile magnitude.
pub fn colorize(flow: &FlowField, max_mag: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let scale = max_mag.unwrap_or_else(|| percentile_magnitude(flow, 0.99));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut img = RgbImage::new(flow.width() as u32, flow.height() as u32);
    for (px, c) in img.pixels_mut().zip(flow.values().data().chunks_exact(2)) {
        px.0 = flow_color(c[0] as f64 / scale, c[1] as f64 / scale, &wheel);
    }
    img
}

/// Binary PPM (`P6`) encoding.
pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::invalid("write_ppm", e.to_string()))?;
    Ok(out)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}
