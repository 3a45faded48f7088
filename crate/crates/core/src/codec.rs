//! Row-major little-endian f64 matrices as base64 strings.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn encode_matrix(m: &DMatrix<f64>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    STANDARD.encode(bytes)
}

pub fn decode_matrix(text: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("base64: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "matrix payload has {} bytes, expected {}",
            bytes.len(),
            rows * cols * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let m = DMatrix::from_fn(rows, cols, |_, _| {
                s = crate::rng::mix64(s);
                f64::from_bits(s >> 2) // finite, covers many exponents
            });
            let back = decode_matrix(&encode_matrix(&m), rows, cols).unwrap();
            prop_assert_eq!(m, back);
        }
    }

    #[test]
    fn row_major_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let bytes = STANDARD.decode(encode_matrix(&m)).unwrap();
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2.0);
    }

    #[test]
    fn wrong_size_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(decode_matrix(&encode_matrix(&m), 2, 2).is_err());
    }
}
