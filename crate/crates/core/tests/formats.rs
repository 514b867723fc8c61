mod common;

use common::{random, rng};
use proptest::prelude::*;
use stripflow::flowio::{decode_flo, encode_flo, flo_len, read_flo, write_flo};
use stripflow::trainer::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use stripflow::{init_params, FlowField, ModelConfig, Resolution, Tensor};

fn bits(f: &FlowField) -> Vec<u32> {
    f.values().data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn one_pixel_file_is_twenty_bytes() {
    let bytes = encode_flo(&FlowField::zeros(1, 1, Resolution::Full).unwrap()).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
    assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
    assert!(bytes[12..].iter().all(|&b| b == 0));
}

#[test]
fn header_is_width_then_height() {
    let bytes = encode_flo(&FlowField::zeros(3, 5, Resolution::Full).unwrap()).unwrap();
    assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
    assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
}

#[test]
fn malformed_flo_rejected() {
    let good = encode_flo(&FlowField::constant(2, 3, 1.0, -1.0, Resolution::Full).unwrap()).unwrap();
    let mut zero_magic = good.clone();
    zero_magic[..4].copy_from_slice(&0.0f32.to_le_bytes());
    let mut zero_width = good.clone();
    zero_width[4..8].copy_from_slice(&0i32.to_le_bytes());
    let mut negative_height = good.clone();
    negative_height[8..12].copy_from_slice(&(-2i32).to_le_bytes());
    for (name, bad) in [
        ("magic", zero_magic),
        ("width", zero_width),
        ("height", negative_height),
        ("truncated", good[..good.len() - 1].to_vec()),
        ("header only", good[..10].to_vec()),
    ] {
        let err = decode_flo(&bad).expect_err(name);
        assert!(err.to_string().contains("offset"), "{name}: {err}");
    }
}

#[test]
fn flo_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    let flow = FlowField::new(random(&[16, 16, 2], -20.0, 20.0, &mut rng(4)), Resolution::Full).unwrap();
    write_flo(&flow, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, flo_len(16, 16));
    assert_eq!(bits(&read_flo(&path).unwrap()), bits(&flow));
    let missing = read_flo(dir.path().join("absent.flo")).unwrap_err();
    assert!(missing.to_string().contains("absent.flo"), "{missing}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let params = init_params(&ModelConfig::default(), 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&params, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(back.init_seed(), 17);
    for ((pa, a), (pb, b)) in params.iter().zip(back.iter()) {
        assert_eq!(pa, pb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn malformed_checkpoints_rejected() {
    let mut map = std::collections::BTreeMap::new();
    map.insert("a.weight".to_string(), Tensor::full([2, 3], 0.5f32).unwrap());
    let params = stripflow::ModelParams::from_map(map, 0);
    let good = encode_checkpoint(&params).unwrap();
    assert_eq!(decode_checkpoint(&good).unwrap(), params);

    let mut magic = good.clone();
    magic[0] ^= 0xff;
    let mut version = good.clone();
    version[8] = 99;
    let mut trailing = good.clone();
    trailing.push(0);
    for (name, bad) in [
        ("magic", magic),
        ("version", version),
        ("trailing", trailing),
        ("truncated", good[..good.len() - 3].to_vec()),
        ("empty", Vec::new()),
    ] {
        assert!(decode_checkpoint(&bad).is_err(), "{name} accepted");
    }
    let truncated = decode_checkpoint(&good[..good.len() - 3]).unwrap_err();
    assert!(truncated.to_string().contains("offset"), "{truncated}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flo_round_trip_is_lossless(h in 1usize..12, w in 1usize..12, raw in prop::collection::vec(-1e6f32..1e6, 0..288)) {
        let n = 2 * h * w;
        let data: Vec<f32> = (0..n).map(|i| raw.get(i).copied().unwrap_or(i as f32 * 0.125)).collect();
        let flow = FlowField::new(Tensor::new([h, w, 2], data).unwrap(), Resolution::Full).unwrap();
        let bytes = encode_flo(&flow).unwrap();
        prop_assert_eq!(bytes.len(), 12 + 8 * h * w);
        prop_assert_eq!(bits(&decode_flo(&bytes).unwrap()), bits(&flow));
    }

    #[test]
    fn flo_preserves_special_values(v in prop::sample::select(vec![0.0f32, -0.0, f32::MIN_POSITIVE, f32::MAX, -f32::MAX, 1e-40])) {
        let flow = FlowField::constant(2, 2, v, -v, Resolution::Full).unwrap();
        prop_assert_eq!(bits(&decode_flo(&encode_flo(&flow).unwrap()).unwrap()), bits(&flow));
    }
}
