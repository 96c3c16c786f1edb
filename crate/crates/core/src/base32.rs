//! Base32 with the store alphabet (no `e`, `o`, `t`, `u`).
//!
//! The input is read as one big-endian number and emitted most-significant
//! 5-bit group first. When the bit count is not a multiple of five the
//! leading group carries the zero padding.

pub const ALPHABET: &[u8; 32] = b"0123456789abcdfghijklmnpqrsvwxyz";

/// Number of characters needed for `bytes` bytes of input.
pub const fn encoded_len(bytes: usize) -> usize {
    (bytes * 8).div_ceil(5)
}

pub fn encode(bytes: &[u8]) -> String {
    let bits = bytes.len() * 8;
    let n = encoded_len(bytes.len());
    let mut out = String::with_capacity(n);
    for group in (0..n).rev() {
        let mut v = 0usize;
        for k in 0..5 {
            let bit = group * 5 + k;
            if bit < bits {
                let byte = bytes[bytes.len() - 1 - bit / 8];
                v |= (((byte >> (bit % 8)) & 1) as usize) << k;
            }
        }
        out.push(ALPHABET[v] as char);
    }
    out
}

/// Decode a string that must encode exactly `len` bytes.
pub fn decode(s: &str, len: usize) -> Option<Vec<u8>> {
    if s.len() != encoded_len(len) {
        return None;
    }
    let bits = len * 8;
    let n = s.len();
    let mut out = vec![0u8; len];
    for (i, c) in s.bytes().enumerate() {
        let v = ALPHABET.iter().position(|&a| a == c)?;
        let group = n - 1 - i;
        for k in 0..5 {
            if (v >> k) & 1 == 0 {
                continue;
            }
            let bit = group * 5 + k;
            if bit >= bits {
                return None;
            }
            out[len - 1 - bit / 8] |= 1 << (bit % 8);
        }
    }
    Some(out)
}

pub fn is_valid(s: &str, len: usize) -> bool {
    decode(s, len).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one() {
        assert_eq!(encode(&[0u8; 20]), "0".repeat(32));
        let mut one = [0u8; 20];
        one[19] = 1;
        assert_eq!(encode(&one), format!("{}1", "0".repeat(31)));
    }

    #[test]
    fn most_significant_group_first() {
        let mut top = [0u8; 20];
        top[0] = 0b1111_1000;
        assert_eq!(encode(&top), format!("z{}", "0".repeat(31)));
    }

    #[test]
    fn full_sha256_width_has_52_chars() {
        assert_eq!(encoded_len(32), 52);
        let s = encode(&[0xff; 32]);
        assert_eq!(s.len(), 52);
        // leading group holds 4 padding bits and one data bit
        assert!(s.starts_with('1'));
        assert_eq!(decode(&s, 32).unwrap(), vec![0xff; 32]);
    }

    #[test]
    fn rejects_padding_bits_and_bad_chars() {
        assert!(decode(&format!("2{}", "0".repeat(51)), 32).is_none());
        assert!(decode(&format!("e{}", "0".repeat(31)), 20).is_none());
        assert!(decode("00", 20).is_none());
    }

    proptest::proptest! {
        #[test]
        fn roundtrip(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..40)) {
            let s = encode(&bytes);
            proptest::prop_assert_eq!(decode(&s, bytes.len()).unwrap(), bytes);
        }
    }
}
