mod common;

use common::{random, rng};
use proptest::prelude::*;
use stripflow::cri::{init_flow, regress_init, softmax_weights, Regression};
use stripflow::csc::OrthogonalVolumes;
use stripflow::{init_params, CriAxes, InitMode, ModelConfig, Tensor};

const MODES: [Regression; 2] = [Regression::PaperLiteral, Regression::SoftArgmax];

fn random_vols(h: usize, w: usize, seed: u64) -> OrthogonalVolumes {
    let mut r = rng(seed);
    OrthogonalVolumes {
        c_v: random(&[h, w, w], -4.0, 4.0, &mut r),
        c_h: random(&[h, w, h], -4.0, 4.0, &mut r),
    }
}

/// Soft-argmax displacement of one slice, in f64.
fn expectation_oracle(slice: &[f64], own: usize) -> f64 {
    let top = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = slice.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().enumerate().map(|(k, ek)| k as f64 * ek / z).sum::<f64>() - own as f64
}

#[test]
fn cri_modes_read_no_parameters() {
    let base = ModelConfig::default();
    let params = init_params(&base, 3).unwrap();
    let vols = random_vols(4, 6, 1);
    for mode in [InitMode::CriPaperLiteral, InitMode::CriSoftArgmax] {
        let cfg = ModelConfig {
            init_mode: mode,
            ..base.clone()
        };
        params.reset_access_count();
        let seed = init_flow(&cfg, &params, Some(&vols), None, 4, 6).unwrap();
        assert_eq!(params.access_count(), 0, "{mode} read a parameter");
        let direct = regress_init(&vols, Regression::from_init_mode(mode).unwrap(), cfg.cri_axes, cfg.downsample).unwrap();
        assert_eq!(seed, direct);
    }
    // The counter itself works.
    params.get("csc.key_v.weight").unwrap();
    assert_eq!(params.access_count(), 1);
}

#[test]
fn softmax_weights_sum_to_one() {
    let vols = random_vols(5, 7, 2);
    let (wv, wh) = softmax_weights(&vols).unwrap();
    for (t, k) in [(&wv, 7), (&wh, 5)] {
        for row in t.data().chunks(k) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
    }
}

#[test]
fn uniform_slices() {
    let (h, w) = (5, 8);
    let c = 0.37f32;
    let vols = OrthogonalVolumes {
        c_v: Tensor::full([h, w, w], c).unwrap(),
        c_h: Tensor::full([h, w, h], c).unwrap(),
    };
    let lit = regress_init(&vols, Regression::PaperLiteral, CriAxes::ColumnsToU, 1).unwrap();
    assert!(lit.values().data().iter().all(|&v| v == c));
    let soft = regress_init(&vols, Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = soft.uv(y, x);
            assert!((u as f64 - ((w as f64 - 1.0) / 2.0 - x as f64)).abs() < 1e-5);
            assert!((v as f64 - ((h as f64 - 1.0) / 2.0 - y as f64)).abs() < 1e-5);
        }
    }
}

#[test]
fn dominant_peak_gives_its_offset() {
    let (h, w) = (3, 6);
    let mut vols = OrthogonalVolumes {
        c_v: Tensor::zeros([h, w, w]).unwrap(),
        c_h: Tensor::zeros([h, w, h]).unwrap(),
    };
    for y in 0..h {
        for x in 0..w {
            vols.c_v.set(&[y, x, (x + 2) % w], 30.0);
            vols.c_h.set(&[y, x, (y + 1) % h], 30.0);
        }
    }
    let soft = regress_init(&vols, Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
    for y in 0..h {
        for x in 0..w {
            let row_v: Vec<f64> = (0..w).map(|k| vols.c_v.get(&[y, x, k]) as f64).collect();
            let row_h: Vec<f64> = (0..h).map(|k| vols.c_h.get(&[y, x, k]) as f64).collect();
            let (u, v) = soft.uv(y, x);
            assert!((u as f64 - expectation_oracle(&row_v, x)).abs() < 1e-4);
            assert!((v as f64 - expectation_oracle(&row_h, y)).abs() < 1e-4);
            assert!((u as f64 - (((x + 2) % w) as f64 - x as f64)).abs() < 1e-4);
        }
    }
}

#[test]
fn axes_mapping_swaps_components() {
    let vols = random_vols(4, 4, 5);
    for mode in MODES {
        let a = regress_init(&vols, mode, CriAxes::ColumnsToU, 1).unwrap();
        let b = regress_init(&vols, mode, CriAxes::ColumnsToV, 1).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (au, av) = a.uv(y, x);
                let (bu, bv) = b.uv(y, x);
                assert_eq!((au, av), (bv, bu));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_argmax_ignores_slice_offsets(seed in 0u64..1000, h in 2usize..7, w in 2usize..7, shift in -20.0f32..20.0) {
        let vols = random_vols(h, w, seed);
        let moved = OrthogonalVolumes {
            c_v: vols.c_v.map(|v| v + shift),
            c_h: vols.c_h.map(|v| v + shift),
        };
        let a = regress_init(&vols, Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
        let b = regress_init(&moved, Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) <= 1e-5);
    }

    #[test]
    fn soft_argmax_stays_in_frame(seed in 0u64..1000, h in 2usize..7, w in 2usize..7) {
        let soft = regress_init(&random_vols(h, w, seed), Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = soft.uv(y, x);
                prop_assert!(u >= -(x as f32) - 1e-5 && u <= (w - 1 - x) as f32 + 1e-5);
                prop_assert!(v >= -(y as f32) - 1e-5 && v <= (h - 1 - y) as f32 + 1e-5);
            }
        }
    }

    #[test]
    fn soft_argmax_matches_expectation_oracle(seed in 0u64..1000, h in 2usize..6, w in 2usize..6) {
        let vols = random_vols(h, w, seed);
        let soft = regress_init(&vols, Regression::SoftArgmax, CriAxes::ColumnsToU, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let row: Vec<f64> = (0..w).map(|k| vols.c_v.get(&[y, x, k]) as f64).collect();
                prop_assert!((soft.uv(y, x).0 as f64 - expectation_oracle(&row, x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn paper_literal_returns_flat_constants_exactly(h in 1usize..10, w in 1usize..10, c in -50.0f32..50.0) {
        let flat = OrthogonalVolumes {
            c_v: Tensor::full([h, w, w], c).unwrap(),
            c_h: Tensor::full([h, w, h], c).unwrap(),
        };
        let lit = regress_init(&flat, Regression::PaperLiteral, CriAxes::ColumnsToU, 1).unwrap();
        prop_assert!(lit.values().data().iter().all(|&v| v == c));
    }

    #[test]
    fn paper_literal_matches_weighted_mean_oracle(seed in 0u64..1000, h in 2usize..6, w in 2usize..6) {
        let vols = random_vols(h, w, seed);
        let lit = regress_init(&vols, Regression::PaperLiteral, CriAxes::ColumnsToU, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let row: Vec<f64> = (0..w).map(|k| vols.c_v.get(&[y, x, k]) as f64).collect();
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                let want: f64 = row.iter().map(|v| v.exp() / z * v).sum();
                prop_assert!((lit.uv(y, x).0 as f64 - want).abs() < 1e-5);
            }
        }
    }
}

