//! Construction cost of the all-pair volume against the two strip volumes.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stripflow::corr::{all_pair_correlation, allpair_elements, strip_elements};
use stripflow::csc::{cross_strip_correlation, strip_pool, OrthogonalQueries};
use stripflow::encoders::FeaturePair;
use stripflow::Tensor;

use crate::alloc::HeapProbe;

pub const BENCH_HEADER: &str = "H,W,allpair_elems,strip_elems,ratio,allpair_ms,strip_ms,peak_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Square grid extents `H = W` to sweep.
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub channels: usize,
    /// Largest all-pair volume, in bytes, that is actually built.
    pub memory_limit: u64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            sizes: vec![16, 32, 64, 96],
            runs: 5,
            channels: 64,
            memory_limit: 1 << 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub allpair_ms: f64,
    pub strip_ms: f64,
    /// Peak heap growth while building the all-pair volume.
    pub peak_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub allpair_elems: u64,
    pub strip_elems: u64,
    /// `None` when the memory guard skipped the measurement.
    pub timing: Option<Timing>,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.allpair_elems as f64 / self.strip_elems as f64
    }
}

/// Bytes the all-pair build holds at once: the `P×P` product plus its
/// reshaped copy, in `f32`.
pub fn allpair_bytes(h: usize, w: usize) -> u64 {
    2 * 4 * allpair_elements(h, w)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn measure(h: usize, w: usize, opts: &BenchOptions, heap: Option<&dyn HeapProbe>) -> Result<Timing> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (h * 1000 + w) as u64);
    let c = opts.channels;
    let mut feat = || Tensor::uniform([c, h, w], -1.0, 1.0, &mut rng);
    let pair = FeaturePair {
        f1: feat()?,
        f2: feat()?,
        factor: 1,
    };
    let queries = OrthogonalQueries {
        q_v: feat()?,
        q_h: feat()?,
    };
    let (k_v, k_h) = (feat()?, feat()?);

    let mut peak = None;
    let mut allpair = Vec::with_capacity(opts.runs);
    let mut strip = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs {
        let baseline = heap.map(|p| {
            p.reset_peak();
            p.live()
        });
        allpair.push(time_ms(|| {
            std::hint::black_box(all_pair_correlation(&pair, true).expect("valid features"));
        }));
        if let (Some(p), Some(b)) = (heap, baseline) {
            peak = Some(peak.unwrap_or(0).max(p.peak_since_reset(b) as u64));
        }
        strip.push(time_ms(|| {
            let keys = strip_pool(&k_v, &k_h).expect("valid keys");
            std::hint::black_box(cross_strip_correlation(&queries, &keys, true).expect("valid queries"));
        }));
    }
    Ok(Timing {
        allpair_ms: median(allpair),
        strip_ms: median(strip),
        peak_bytes: peak,
    })
}

pub fn run_bench(opts: &BenchOptions, heap: Option<&dyn HeapProbe>) -> Result<Vec<BenchRow>> {
    anyhow::ensure!(opts.runs >= 5, "bench needs at least 5 runs per size, got {}", opts.runs);
    opts.sizes
        .iter()
        .map(|&n| {
            let timing = if allpair_bytes(n, n) <= opts.memory_limit {
                Some(measure(n, n, opts, heap)?)
            } else {
                None
            };
            Ok(BenchRow {
                h: n,
                w: n,
                allpair_elems: allpair_elements(n, n),
                strip_elems: strip_elements(n, n),
                timing,
            })
        })
        .collect()
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{},{},", r.h, r.w, r.allpair_elems, r.strip_elems, r.ratio());
        let _ = match &r.timing {
            Some(t) => writeln!(
                s,
                "{:.4},{:.4},{}",
                t.allpair_ms,
                t.strip_ms,
                t.peak_bytes.map_or(String::new(), |b| b.to_string())
            ),
            None => writeln!(s, "skipped,skipped,"),
        };
    }
    s
}

/// Least-squares slope of `ln(ms)` against `ln(H·W)` over timed rows.
pub fn loglog_slope(rows: &[BenchRow], pick: impl Fn(&Timing) -> f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.timing.as_ref().map(|t| (((r.h * r.w) as f64).ln(), pick(t).max(1e-6).ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
