//! Middlebury `.flo` files: magic `202021.25`, `i32` width and height, then
//! row-major interleaved `(u, v)`, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FlowField, Resolution};
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER: usize = 12;

/// Size in bytes of an `h×w` field on disk.
pub fn flo_len(height: usize, width: usize) -> usize {
    HEADER + 8 * height * width
}

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let dim = |n: usize, what| {
        i32::try_from(n)
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::invalid("write_flo", format!("{what} {n} does not fit a positive i32")))
    };
    let (w, h) = (dim(flow.width(), "width")?, dim(flow.height(), "height")?);
    let mut out = Vec::with_capacity(flo_len(flow.height(), flow.width()));
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    for v in flow.values().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn word(bytes: &[u8], offset: usize) -> Result<[u8; 4]> {
    bytes
        .get(offset..offset + 4)
        .map(|b| b.try_into().expect("4 bytes"))
        .ok_or_else(|| Error::Format {
            what: ".flo",
            offset: offset as u64,
            msg: format!("truncated: file is {} bytes", bytes.len()),
        })
}

/// Parses a full-resolution field.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let bad = |offset: usize, msg: String| Error::Format {
        what: ".flo",
        offset: offset as u64,
        msg,
    };
    let magic = f32::from_le_bytes(word(bytes, 0)?);
    if magic != FLO_MAGIC {
        return Err(bad(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(word(bytes, 4)?);
    let h = i32::from_le_bytes(word(bytes, 8)?);
    if w <= 0 {
        return Err(bad(4, format!("nonpositive width {w}")));
    }
    if h <= 0 {
        return Err(bad(8, format!("nonpositive height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let want = flo_len(h, w);
    if bytes.len() != want {
        let offset = bytes.len().min(want);
        return Err(bad(offset, format!("expected {want} bytes for {h}×{w}, found {}", bytes.len())));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FlowField::new(Tensor::new([h, w, 2], data)?, Resolution::Full)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flo(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_layout() {
        let f = FlowField::zeros(1, 1, Resolution::Full).unwrap();
        let bytes = encode_flo(&f).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn width_precedes_height() {
        let f = FlowField::zeros(2, 5, Resolution::Full).unwrap();
        let bytes = encode_flo(&f).unwrap();
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(decode_flo(&bytes).unwrap().height(), 2);
    }

    #[test]
    fn rejects_malformed() {
        let f = FlowField::constant(2, 2, 1.0, -1.0, Resolution::Full).unwrap();
        let good = encode_flo(&f).unwrap();

        let mut zero_magic = good.clone();
        zero_magic[..4].copy_from_slice(&0f32.to_le_bytes());
        assert!(decode_flo(&zero_magic).unwrap_err().to_string().contains("offset 0"));

        let err = decode_flo(&good[..good.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("offset 41"), "{err}");

        let mut neg = good.clone();
        neg[8..12].copy_from_slice(&(-2i32).to_le_bytes());
        assert!(decode_flo(&neg).unwrap_err().to_string().contains("offset 8"));
        assert!(decode_flo(&good[..6]).is_err());
    }
}
