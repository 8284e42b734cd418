//! Tensor file formats.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ISOT"
//! 4       4           u32 rank (0..=4)
//! 8       8·rank      u64 dims, outermost first
//! ...     8·Π dims    f64 payload, row-major
//! ```
//!
//! Text layout, for hand-written fixtures:
//!
//! ```text
//! ISOT-TEXT
//! shape 2 3
//! 1 2 3
//! 4 5 6
//! ```
//!
//! Values are whitespace separated; one line per innermost row when written.
//! Floats are printed in shortest round-trip form, so text round trips are
//! also bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::array::{DenseArray, NumericsError, Result, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"ISOT";
pub const TEXT_HEADER: &str = "ISOT-TEXT";

pub fn encoded_len(a: &DenseArray) -> usize {
    8 + 8 * a.rank() + 8 * a.len()
}

pub fn encode(a: &DenseArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(a));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_binary<W: Write>(a: &DenseArray, w: &mut W) -> Result<()> {
    w.write_all(&encode(a))?;
    Ok(())
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed. `base` is added to reported error offsets.
pub fn decode(bytes: &[u8], base: u64) -> Result<(DenseArray, usize)> {
    let err = |at: usize, reason: String| NumericsError::Format {
        offset: base + at as u64,
        reason,
    };
    if bytes.len() < 8 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank > MAX_RANK {
        return Err(err(4, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut at = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(at..at + 8)
            .ok_or_else(|| err(at, "truncated dims".into()))?;
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| err(at, format!("dim {d} too large")))?;
        shape.push(d);
        at += 8;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(8, "element count overflows".into()))?;
    let need = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(at))
        .ok_or_else(|| err(8, "payload size overflows".into()))?;
    if bytes.len() < need {
        return Err(err(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let s = at + 8 * i;
        let v = f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(err(s, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Ok((DenseArray::from_parts(shape, data), need))
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<DenseArray> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (a, used) = decode(&bytes, 0)?;
    if used != bytes.len() {
        return Err(NumericsError::Format {
            offset: used as u64,
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(a)
}

pub fn to_text(a: &DenseArray) -> String {
    let mut s = String::from(TEXT_HEADER);
    s.push_str("\nshape");
    for d in a.shape() {
        write!(s, " {d}").unwrap();
    }
    s.push('\n');
    let row = a.shape().last().copied().unwrap_or(1).max(1);
    for chunk in a.data().chunks(row) {
        let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn from_text(text: &str) -> Result<DenseArray> {
    let err = |offset: usize, reason: String| NumericsError::Format {
        offset: offset as u64,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != TEXT_HEADER {
        return Err(err(0, format!("expected '{TEXT_HEADER}' header")));
    }
    let shape_line = lines.next().ok_or_else(|| err(header.len(), "missing shape line".into()))?;
    let mut fields = shape_line.split_whitespace();
    if fields.next() != Some("shape") {
        return Err(err(header.len() + 1, "expected 'shape' line".into()));
    }
    let shape = fields
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| err(header.len() + 1, format!("bad dimension: {e}")))?;
    let body_start = header.len() + shape_line.len() + 2;
    let mut data = Vec::new();
    for tok in lines.flat_map(str::split_whitespace) {
        let v: f64 = tok
            .parse()
            .map_err(|e| err(body_start, format!("bad value '{tok}': {e}")))?;
        data.push(v);
    }
    DenseArray::new(shape, data)
}

pub fn save_binary(a: &DenseArray, path: &Path) -> Result<()> {
    fs::write(path, encode(a))?;
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<DenseArray> {
    read_binary(&mut fs::File::open(path)?)
}

pub fn save_text(a: &DenseArray, path: &Path) -> Result<()> {
    fs::write(path, to_text(a))?;
    Ok(())
}

pub fn load_text(path: &Path) -> Result<DenseArray> {
    from_text(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn binary_layout_is_pinned() {
        let a = DenseArray::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&a);
        assert_eq!(&bytes[..4], b"ISOT");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), encoded_len(&a));
    }

    #[test]
    fn decode_reports_offsets() {
        let a = DenseArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&a);
        match decode(&bytes[..20], 100) {
            Err(NumericsError::Format { offset, .. }) => assert_eq!(offset, 120),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, 0), Err(NumericsError::Format { offset: 0, .. })));
        let mut nan = bytes;
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&nan, 0), Err(NumericsError::Format { offset: 24, .. })));
    }

    #[test]
    fn text_parses_hand_written_fixture() {
        let a = from_text("ISOT-TEXT\nshape 2 2\n1 2\n3   4.5\n").unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.5]);
        let s = from_text("ISOT-TEXT\nshape\n7\n").unwrap();
        assert_eq!(s.rank(), 0);
        assert!(from_text("ISOT-TEXT\nshape 2\n1\n").is_err());
    }

    fn arb_array() -> impl Strategy<Value = DenseArray> {
        (prop::collection::vec(0usize..4, 0..=4), any::<u64>()).prop_map(|(shape, seed)| {
            let mut rng = Rng::new(seed);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let bits = rng.next_u64();
                    let v = f64::from_bits(bits);
                    if v.is_finite() { v } else { rng.uniform_range(-1e300, 1e300) }
                })
                .collect();
            DenseArray::new(shape, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn binary_and_text_round_trips_are_bit_exact(a in arb_array()) {
            let (b, used) = decode(&encode(&a), 0).unwrap();
            prop_assert_eq!(used, encoded_len(&a));
            prop_assert!(a.bit_eq(&b));
            let t = from_text(&to_text(&a)).unwrap();
            prop_assert!(a.bit_eq(&t));
        }
    }
}
