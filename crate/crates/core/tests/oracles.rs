mod common;

use common::*;

fn check(case: OracleCase, seed: u64) {
    let mut r = rng(seed);
    for trial in 0..20 {
        let err = case(&mut r);
        assert!(err <= ORACLE_TOLERANCE, "trial {trial}: max abs error {err:e}");
    }
}

#[test]
fn all_pair_matches_brute_force() {
    check(case_all_pair, 1);
}

#[test]
fn strip_pooling_matches_brute_force() {
    check(case_strip_pool, 2);
}

#[test]
fn orthogonal_correlation_matches_brute_force() {
    check(case_orthogonal, 3);
}

#[test]
fn aggregation_and_pyramid_match_brute_force() {
    check(case_pyramid, 4);
}

#[test]
fn lookup_matches_brute_force() {
    check(case_lookup, 5);
}

#[test]
fn convex_upsampling_matches_brute_force() {
    check(case_convex_upsample, 6);
}

#[test]
fn oracle_sees_a_perturbation() {
    // The harness must not be vacuous: a one-ulp-scale nudge is invisible,
    // but a visible one is reported.
    let mut r = rng(9);
    let f1 = random(&[4, 3, 3], -1.0, 1.0, &mut r);
    let f2 = random(&[4, 3, 3], -1.0, 1.0, &mut r);
    let mut want = oracle_all_pair(&f1, &f2);
    want[5] += 1e-3;
    let got = stripflow::corr::all_pair_correlation(
        &stripflow::encoders::FeaturePair { f1, f2, factor: 1 },
        true,
    )
    .unwrap();
    let err = got
        .volume
        .data()
        .iter()
        .zip(&want)
        .map(|(&g, w)| (g as f64 - w).abs())
        .fold(0.0, f64::max);
    assert!(err > ORACLE_TOLERANCE);
}
