//! Brute-force reference implementations written directly from the index
//! definitions, in f64 and without the library's graph or kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripflow::corr::{aggregate, all_pair_correlation, build_pyramid, lookup, AllPairVolume};
use stripflow::csc::{cross_strip_correlation, strip_pool, OrthogonalQueries, StripKeys};
use stripflow::encoders::FeaturePair;
use stripflow::refine::convex_upsample;
use stripflow::{FlowField, Resolution, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-5;
pub const KERNELS: [usize; 4] = [1, 2, 4, 8];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random grid size with both sides in `2..=8` and channel count in `1..=16`.
pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=16))
}

fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let shape = t.shape();
    let mut flat = 0;
    for (i, &n) in idx.iter().zip(shape) {
        assert!(i < &n, "index {idx:?} outside {shape:?}");
        flat = flat * n + i;
    }
    t.data()[flat] as f64
}

fn max_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).abs()).fold(0.0, f64::max)
}

pub fn oracle_all_pair(f1: &Tensor, f2: &Tensor) -> Vec<f64> {
    let (c, h, w) = (f1.dim(0), f1.dim(1), f1.dim(2));
    let norm = (c as f64).sqrt();
    let mut out = Vec::new();
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    let dot: f64 = (0..c).map(|k| at(f1, &[k, y1, x1]) * at(f2, &[k, y2, x2])).sum();
                    out.push(dot / norm);
                }
            }
        }
    }
    out
}

/// `(column means C×W, row means C×H)`.
pub fn oracle_strip_pool(kv: &Tensor, kh: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (kv.dim(0), kv.dim(1), kv.dim(2));
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    for k in 0..c {
        for x in 0..w {
            cols.push((0..h).map(|y| at(kv, &[k, y, x])).sum::<f64>() / h as f64);
        }
    }
    for k in 0..c {
        for y in 0..h {
            rows.push((0..w).map(|x| at(kh, &[k, y, x])).sum::<f64>() / w as f64);
        }
    }
    (cols, rows)
}

/// `(C_v as H×W×W, C_h as H×W×H)`.
pub fn oracle_strip_correlation(q: &OrthogonalQueries, k: &StripKeys) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (q.q_v.dim(0), q.q_v.dim(1), q.q_v.dim(2));
    let norm = (c as f64).sqrt();
    let (mut cv, mut ch) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            for x2 in 0..w {
                cv.push((0..c).map(|i| at(&q.q_v, &[i, y, x]) * at(&k.k_v, &[i, x2])).sum::<f64>() / norm);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for y2 in 0..h {
                ch.push((0..c).map(|i| at(&q.q_h, &[i, y, x]) * at(&k.k_h, &[i, y2])).sum::<f64>() / norm);
            }
        }
    }
    (cv, ch)
}

/// Mean over the (possibly truncated) `k×k` block of a `h×w` plane.
fn block_mean(plane: impl Fn(usize, usize) -> f64, h: usize, w: usize, k: usize, by: usize, bx: usize) -> f64 {
    let (mut acc, mut n) = (0.0, 0);
    for y in by * k..((by + 1) * k).min(h) {
        for x in bx * k..((bx + 1) * k).min(w) {
            acc += plane(y, x);
            n += 1;
        }
    }
    acc / n as f64
}

/// Pooled copy of every trailing `h×w` plane of `vol`.
pub fn oracle_pool(vol: &Tensor, k: usize) -> Vec<f64> {
    let r = vol.rank();
    let (h, w) = (vol.dim(r - 2), vol.dim(r - 1));
    let lead: usize = vol.shape()[..r - 2].iter().product();
    let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = Vec::new();
    for l in 0..lead {
        let plane = |y: usize, x: usize| vol.data()[(l * h + y) * w + x] as f64;
        for by in 0..ho {
            for bx in 0..wo {
                out.push(block_mean(plane, h, w, k, by, bx));
            }
        }
    }
    out
}

/// Bilinear read of a `h×w` plane with coordinates clamped to the lattice.
fn sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let fetch = |yy: usize, xx: usize| plane[yy * w + xx];
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    fetch(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + fetch(y0, x1) * fx * (1.0 - fy)
        + fetch(y1, x0) * (1.0 - fx) * fy
        + fetch(y1, x1) * fx * fy
}

/// Windowed lookup of an aggregated `H×W×ch×H×W` volume. Pools each
/// source pixel's planes on the fly, then samples the `(2r+1)²` window
/// centred on the flow target divided by the kernel.
pub fn oracle_lookup(vol: &Tensor, flow: &FlowField, radius: usize) -> Vec<f64> {
    let (h, w, ch) = (vol.dim(0), vol.dim(1), vol.dim(2));
    let s = 2 * radius + 1;
    let per_pixel = KERNELS.len() * ch * s * s;
    let mut out = vec![0.0; per_pixel * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv(y, x);
            let mut feat = Vec::with_capacity(per_pixel);
            for &k in &KERNELS {
                let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
                for c in 0..ch {
                    let full = |yy: usize, xx: usize| at(vol, &[y, x, c, yy, xx]);
                    let pooled: Vec<f64> = (0..ho)
                        .flat_map(|by| (0..wo).map(move |bx| (by, bx)))
                        .map(|(by, bx)| block_mean(full, h, w, k, by, bx))
                        .collect();
                    let cx = (x as f64 + u as f64) / k as f64;
                    let cy = (y as f64 + v as f64) / k as f64;
                    for i in 0..s {
                        for j in 0..s {
                            let dy = i as f64 - radius as f64;
                            let dx = j as f64 - radius as f64;
                            feat.push(sample(&pooled, ho, wo, cx + dx, cy + dy));
                        }
                    }
                }
            }
            for (l, val) in feat.into_iter().enumerate() {
                out[(l * h + y) * w + x] = val;
            }
        }
    }
    out
}

/// Convex combination of the 3×3 neighbourhood (edge-replicated) with
/// softmax weights, times the factor; output planes `2×(H·d)×(W·d)`.
pub fn oracle_convex_upsample(flow: &FlowField, mask: &Tensor, d: usize) -> Vec<f64> {
    let (h, w) = (flow.height(), flow.width());
    let (hf, wf) = (h * d, w * d);
    let mut out = vec![0.0; 2 * hf * wf];
    for yy in 0..hf {
        for xx in 0..wf {
            let (y, x, i, j) = (yy / d, xx / d, yy % d, xx % d);
            let logits: Vec<f64> = (0..9).map(|n| at(mask, &[n * d * d + i * d + j, y, x])).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let (mut u, mut v) = (0.0, 0.0);
            for n in 0..9 {
                let ny = (y as isize + n as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + n as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                let (fu, fv) = flow.uv(ny, nx);
                u += e[n] / z * fu as f64;
                v += e[n] / z * fv as f64;
            }
            out[yy * wf + xx] = d as f64 * u;
            out[hf * wf + yy * wf + xx] = d as f64 * v;
        }
    }
    out
}

/// One oracle case: library output against the brute force on fresh random
/// inputs. Returns the maximum absolute difference.
pub type OracleCase = fn(&mut ChaCha8Rng) -> f64;

pub fn case_all_pair(r: &mut ChaCha8Rng) -> f64 {
    let (h, w, c) = dims(r);
    let pair = FeaturePair {
        f1: random(&[c, h, w], -1.0, 1.0, r),
        f2: random(&[c, h, w], -1.0, 1.0, r),
        factor: 1,
    };
    let got = all_pair_correlation(&pair, true).unwrap();
    max_err(got.volume.data(), &oracle_all_pair(&pair.f1, &pair.f2))
}

pub fn case_strip_pool(r: &mut ChaCha8Rng) -> f64 {
    let (h, w, c) = dims(r);
    let (kv, kh) = (random(&[c, h, w], -1.0, 1.0, r), random(&[c, h, w], -1.0, 1.0, r));
    let got = strip_pool(&kv, &kh).unwrap();
    let (cols, rows) = oracle_strip_pool(&kv, &kh);
    max_err(got.k_v.data(), &cols).max(max_err(got.k_h.data(), &rows))
}

pub fn case_orthogonal(r: &mut ChaCha8Rng) -> f64 {
    let (h, w, c) = dims(r);
    let q = OrthogonalQueries {
        q_v: random(&[c, h, w], -1.0, 1.0, r),
        q_h: random(&[c, h, w], -1.0, 1.0, r),
    };
    let k = StripKeys {
        k_v: random(&[c, w], -1.0, 1.0, r),
        k_h: random(&[c, h], -1.0, 1.0, r),
    };
    let got = cross_strip_correlation(&q, &k, true).unwrap();
    let (cv, ch) = oracle_strip_correlation(&q, &k);
    max_err(got.c_v.data(), &cv).max(max_err(got.c_h.data(), &ch))
}

fn random_aggregated(r: &mut ChaCha8Rng) -> Tensor {
    let (h, w, _) = dims(r);
    let c = AllPairVolume {
        volume: random(&[h, w, h, w], -2.0, 2.0, r),
    };
    let vols = stripflow::csc::OrthogonalVolumes {
        c_v: random(&[h, w, w], -2.0, 2.0, r),
        c_h: random(&[h, w, h], -2.0, 2.0, r),
    };
    aggregate(&c, &vols).unwrap().volume
}

/// Broadcast-sum aggregation followed by every pyramid level.
pub fn case_pyramid(r: &mut ChaCha8Rng) -> f64 {
    let (h, w, _) = dims(r);
    let c = AllPairVolume {
        volume: random(&[h, w, h, w], -2.0, 2.0, r),
    };
    let vols = stripflow::csc::OrthogonalVolumes {
        c_v: random(&[h, w, w], -2.0, 2.0, r),
        c_h: random(&[h, w, h], -2.0, 2.0, r),
    };
    let agg = aggregate(&c, &vols).unwrap();
    let mut want = Vec::new();
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    want.push(at(&c.volume, &[y1, x1, y2, x2]));
                }
            }
            for y2 in 0..h {
                for x2 in 0..w {
                    want.push(at(&vols.c_v, &[y1, x1, x2]) + at(&vols.c_h, &[y1, x1, y2]));
                }
            }
        }
    }
    let mut err = max_err(agg.volume.data(), &want);
    let pyr = build_pyramid(&agg).unwrap();
    for (level, &k) in pyr.levels.iter().zip(&KERNELS) {
        err = err.max(max_err(level.data(), &oracle_pool(&agg.volume, k)));
    }
    err
}

pub fn case_lookup(r: &mut ChaCha8Rng) -> f64 {
    let vol = random_aggregated(r);
    let (h, w) = (vol.dim(0), vol.dim(1));
    let radius = r.random_range(1..=3);
    let flow = FlowField::new(random(&[h, w, 2], -3.0, 3.0, r), Resolution::Grid(1)).unwrap();
    let pyr = build_pyramid(&stripflow::corr::AggregatedVolume { volume: vol.clone() }).unwrap();
    let got = lookup(&pyr, &flow, radius).unwrap();
    max_err(got.data(), &oracle_lookup(&vol, &flow, radius))
}

pub fn case_convex_upsample(r: &mut ChaCha8Rng) -> f64 {
    let (h, w, _) = dims(r);
    let d = r.random_range(1..=4);
    let flow = FlowField::new(random(&[h, w, 2], -4.0, 4.0, r), Resolution::Grid(d)).unwrap();
    let mask = random(&[9 * d * d, h, w], -3.0, 3.0, r);
    let got = convex_upsample(&flow, &mask).unwrap();
    max_err(got.to_planes().data(), &oracle_convex_upsample(&flow, &mask, d))
}

pub const ORACLE_CASES: [(&str, OracleCase); 6] = [
    ("all_pair_correlation", case_all_pair),
    ("strip_pooling", case_strip_pool),
    ("orthogonal_correlation", case_orthogonal),
    ("pooling_pyramid", case_pyramid),
    ("lookup", case_lookup),
    ("convex_upsampling", case_convex_upsample),
];

/// Worst error of each case over `trials` random draws.
pub fn run_oracle_suite(seed: u64, trials: usize) -> Vec<(&'static str, f64)> {
    ORACLE_CASES
        .iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(seed.wrapping_add(i as u64 * 7919));
            let worst = (0..trials).map(|_| case(&mut r)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
