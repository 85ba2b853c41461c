//! Watermark payloads: hard bit strings and decoder soft outputs.

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::graph::{sigmoid, PROB_EPS};
use crate::rng::Rng;

/// The owner's N-bit watermark message.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitString {
    bits: Vec<u8>,
}

impl BitString {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("bit string must hold at least one bit"));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(invalid(format!("bit {pos} is {}, not 0 or 1", bits[pos])));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0; len])
    }

    pub fn random(len: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..len).map(|_| rng.bernoulli(0.5) as u8).collect())
    }

    /// Uniform bit draw seeded from the SHA-256 of an owner key.
    pub fn from_owner_key(key: &str, len: usize) -> Result<Self> {
        let digest = Sha256::digest(key.as_bytes());
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        Self::random(len, &mut Rng::new(u64::from_le_bytes(seed)))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Pack MSB-first into bytes and hex encode; trailing pad bits are zero.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self
            .bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | (b << (7 - i)))
            })
            .collect();
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| invalid(format!("bad watermark hex: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(invalid(format!(
                "watermark hex holds {} bytes, a {len}-bit payload needs {}",
                bytes.len(),
                len.div_ceil(8)
            )));
        }
        let mut bits: Vec<u8> = bytes
            .iter()
            .flat_map(|byte| (0..8).map(move |i| (byte >> (7 - i)) & 1))
            .collect();
        if bits[len..].iter().any(|&b| b != 0) {
            return Err(invalid("watermark hex has non-zero padding bits"));
        }
        bits.truncate(len);
        Self::new(bits)
    }
}

/// Per-bit probabilities emitted by a decoder, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBits {
    values: Vec<f32>,
}

impl SoftBits {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("soft bits must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(invalid(format!("soft bit {v} outside (0, 1)")));
        }
        Ok(Self { values })
    }

    /// Squash logits, keeping every value in `[1e-7, 1 − 1e-7]`.
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        let lo = PROB_EPS as f32;
        let hi = (1.0 - PROB_EPS) as f32;
        Self::new(logits.iter().map(|&z| sigmoid(z).clamp(lo, hi)).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Bit `i` is 1 iff `values[i] ≥ 0.5`; the tie goes to 1.
pub fn hard_threshold(s: &SoftBits) -> BitString {
    BitString {
        bits: s.values.iter().map(|&v| (v >= 0.5) as u8).collect(),
    }
}

/// Fraction of positions where `a` and `b` agree.
pub fn bit_accuracy(a: &BitString, b: &BitString) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let same = a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Number of positions where `a` and `b` agree.
pub fn matched_bits(a: &BitString, b: &BitString) -> Result<usize> {
    Ok((bit_accuracy(a, b)? * a.len() as f64).round() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn bs(bits: &[u8]) -> BitString {
        BitString::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_identity_and_complement() {
        let mut rng = Rng::new(3);
        let a = BitString::random(100, &mut rng).unwrap();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&a, &a.complement()).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_half_flipped() {
        let a = BitString::zeros(100).unwrap();
        let mut bits = vec![0u8; 100];
        bits.iter_mut().step_by(2).for_each(|b| *b = 1);
        assert_eq!(bit_accuracy(&a, &bs(&bits)).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_rejects_length_mismatch() {
        let a = BitString::zeros(5).unwrap();
        let b = BitString::zeros(6).unwrap();
        assert!(matches!(bit_accuracy(&a, &b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn bits_must_be_binary() {
        assert!(BitString::new(vec![0, 1, 2]).is_err());
        assert!(BitString::new(vec![]).is_err());
    }

    #[test]
    fn threshold_cases() {
        let hi = SoftBits::new(vec![0.9; 8]).unwrap();
        assert!(hard_threshold(&hi).bits().iter().all(|&b| b == 1));
        let lo = SoftBits::new(vec![0.1; 8]).unwrap();
        assert!(hard_threshold(&lo).bits().iter().all(|&b| b == 0));
        let tie = SoftBits::new(vec![0.5]).unwrap();
        assert_eq!(hard_threshold(&tie).bits(), &[1]);
    }

    #[test]
    fn soft_bits_stay_open_interval() {
        let s = SoftBits::from_logits(&[100.0, -100.0, 0.0]).unwrap();
        assert!(s.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(SoftBits::new(vec![1.0]).is_err());
        assert!(SoftBits::new(vec![0.0]).is_err());
    }

    #[test]
    fn chance_accuracy_against_random_strings() {
        let mut rng = Rng::new(11);
        let a = BitString::random(50, &mut rng).unwrap();
        let trials = 2000;
        let accs: Vec<f64> = (0..trials)
            .map(|_| bit_accuracy(&a, &BitString::random(50, &mut rng).unwrap()).unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / trials as f64;
        let se = (0.25 / (50.0 * trials as f64)).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn hex_examples() {
        let b = bs(&[1, 0, 1, 0, 0, 0, 0, 1, 1]);
        assert_eq!(b.to_hex(), "a180");
        assert_eq!(BitString::from_hex("a180", 9).unwrap(), b);
        assert!(BitString::from_hex("a181", 9).is_err());
        assert!(BitString::from_hex("a1", 9).is_err());
    }

    #[test]
    fn owner_key_is_deterministic() {
        let a = BitString::from_owner_key("alice", 50).unwrap();
        assert_eq!(a, BitString::from_owner_key("alice", 50).unwrap());
        assert_ne!(a, BitString::from_owner_key("bob", 50).unwrap());
    }

    proptest! {
        #[test]
        fn accuracy_is_symmetric(a in proptest::collection::vec(0u8..2, 1..128), seed in any::<u64>()) {
            let a = bs(&a);
            let b = BitString::random(a.len(), &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(bit_accuracy(&a, &b).unwrap(), bit_accuracy(&b, &a).unwrap());
        }

        #[test]
        fn hex_round_trips(bits in proptest::collection::vec(0u8..2, 1..130)) {
            let b = bs(&bits);
            prop_assert_eq!(BitString::from_hex(&b.to_hex(), b.len()).unwrap(), b);
        }
    }
}
