//! Unsigned LEB128.

/// Longest encoding of a `u64`.
pub const MAX_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarintError {
    Truncated,
    Overflow,
}

pub fn write_uvarint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Decodes one varint from the front of `buf`, returning the value and the
/// number of bytes consumed.
pub fn read_uvarint(buf: &[u8]) -> Result<(u64, usize), VarintError> {
    let mut value = 0u64;
    for (i, &b) in buf.iter().enumerate() {
        if i == MAX_LEN - 1 && b > 1 {
            return Err(VarintError::Overflow);
        }
        value |= u64::from(b & 0x7f) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(VarintError::Truncated)
}

pub fn uvarint_len(v: u64) -> usize {
    let bits = 64 - v.leading_zeros() as usize;
    bits.div_ceil(7).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        let cases: &[(u64, &[u8])] = &[
            (0, &[0x00]),
            (1, &[0x01]),
            (127, &[0x7f]),
            (128, &[0x80, 0x01]),
            (624485, &[0xe5, 0x8e, 0x26]),
            (u64::MAX, &[0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x01]),
        ];
        for &(v, bytes) in cases {
            let mut out = Vec::new();
            write_uvarint(&mut out, v);
            assert_eq!(out, bytes, "encoding {v}");
            assert_eq!(read_uvarint(bytes), Ok((v, bytes.len())));
            assert_eq!(uvarint_len(v), bytes.len());
        }
    }

    #[test]
    fn errors() {
        assert_eq!(read_uvarint(&[]), Err(VarintError::Truncated));
        assert_eq!(read_uvarint(&[0x80, 0x80]), Err(VarintError::Truncated));
        assert_eq!(read_uvarint(&[0xff; 11]), Err(VarintError::Overflow));
        // Tenth byte may only contribute the top bit.
        let mut v = vec![0xff; 9];
        v.push(0x02);
        assert_eq!(read_uvarint(&v), Err(VarintError::Overflow));
    }

    proptest! {
        #[test]
        fn round_trip(v in any::<u64>(), tail in proptest::collection::vec(any::<u8>(), 0..4)) {
            let mut buf = Vec::new();
            write_uvarint(&mut buf, v);
            let n = buf.len();
            buf.extend(tail);
            prop_assert_eq!(read_uvarint(&buf), Ok((v, n)));
        }
    }
}
