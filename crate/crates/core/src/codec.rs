//! Canonical byte encoding, hashing, fixed-point quantization, salts and
//! leaf addressing.
//!
//! Every digest in the system is SHA-256 over the canonical encoding below,
//! so the encoding is a wire contract:
//!
//! ```text
//! version (1 byte, 0x01)
//! repeat per field:
//!     length  (u32, little-endian)
//!     content (length bytes)
//! ```
//!
//! A fixed-point field is 9 bytes of content: the raw value as an 8-byte
//! little-endian two's-complement integer followed by the scale byte.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const CODEC_VERSION: u8 = 0x01;

/// Default length in bytes of both user and transform salts.
pub const SALT_LEN: usize = 16;

/// Largest supported fixed-point scale.
pub const MAX_SCALE: u8 = 62;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("serialization overflow: field of {0} bytes exceeds the u32 length prefix")]
    SerializationOverflow(usize),
    #[error("quantization overflow: {value} at scale {scale} does not fit the fixed-point range")]
    QuantizationOverflow { value: f64, scale: u8 },
    #[error("scale {0} is outside [0, 62]")]
    InvalidScale(u8),
    #[error("leaf index does not fit in a tree of height {height}")]
    IndexOutOfRange { height: u16 },
    #[error("tree height {0} is outside [1, 256]")]
    InvalidHeight(u16),
    #[error("invalid hex digest: {0}")]
    InvalidHex(String),
    #[error("salt must be {expected} bytes, got {actual}")]
    SaltLength { expected: usize, actual: usize },
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub const ZERO: Digest256 = Digest256([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        let bytes = hex::decode(s).map_err(|_| CodecError::InvalidHex(s.to_string()))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CodecError::InvalidHex(s.to_string()))?;
        Ok(Digest256(arr))
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest256 {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest256 {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest256::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Signed fixed-point number: the represented value is `raw / 2^scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPoint {
    pub raw: i64,
    pub scale: u8,
}

impl FixedPoint {
    pub fn zero(scale: u8) -> Self {
        FixedPoint { raw: 0, scale }
    }

    pub fn to_f64(self) -> f64 {
        decode_fixed(self)
    }

    pub fn checked_add(self, other: FixedPoint) -> Option<FixedPoint> {
        if self.scale != other.scale {
            return None;
        }
        self.raw.checked_add(other.raw).map(|raw| FixedPoint { raw, scale: self.scale })
    }

    /// Integer part of a non-negative whole-valued number, if it is one.
    pub fn as_whole(self) -> Option<i64> {
        let unit = 1i64 << self.scale;
        (self.raw % unit == 0).then_some(self.raw >> self.scale)
    }
}

/// Quantize `x` at `scale` with round-half-to-even.
pub fn encode_fixed(x: f64, scale: u8) -> Result<FixedPoint, CodecError> {
    if scale > MAX_SCALE {
        return Err(CodecError::InvalidScale(scale));
    }
    let scaled = x * (1u64 << scale) as f64;
    if !scaled.is_finite() || scaled.abs() >= (1u64 << 62) as f64 {
        return Err(CodecError::QuantizationOverflow { value: x, scale });
    }
    Ok(FixedPoint { raw: scaled.round_ties_even() as i64, scale })
}

pub fn decode_fixed(f: FixedPoint) -> f64 {
    f.raw as f64 / (1u64 << f.scale) as f64
}

/// One element of a canonically encoded record.
#[derive(Clone, Copy, Debug)]
pub enum Field<'a> {
    Fixed(FixedPoint),
    Bytes(&'a [u8]),
}

fn push_field(out: &mut Vec<u8>, content: &[u8]) -> Result<(), CodecError> {
    let len = length_prefix(content.len())?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(content);
    Ok(())
}

fn length_prefix(len: usize) -> Result<u32, CodecError> {
    u32::try_from(len).map_err(|_| CodecError::SerializationOverflow(len))
}

pub fn canonical_serialize(fields: &[Field<'_>]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(1 + fields.len() * 13);
    out.push(CODEC_VERSION);
    for field in fields {
        match field {
            Field::Fixed(fp) => {
                let mut content = [0u8; 9];
                content[..8].copy_from_slice(&fp.raw.to_le_bytes());
                content[8] = fp.scale;
                push_field(&mut out, &content)?;
            }
            Field::Bytes(b) => push_field(&mut out, b)?,
        }
    }
    Ok(out)
}

pub fn hash_node(bytes: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(bytes).into())
}

/// Hash of the canonical encoding of `fields`.
///
/// Field contents in this crate are bounded by record sizes far below 4 GiB.
pub fn hash_fields(fields: &[Field<'_>]) -> Digest256 {
    let bytes = canonical_serialize(fields).expect("field length fits u32 prefix");
    hash_node(&bytes)
}

/// Digest of a single path selector bit, as carried in hop artifacts.
pub fn hash_bit(bit: u8) -> Digest256 {
    hash_fields(&[Field::Bytes(b"bit"), Field::Bytes(&[bit])])
}

/// Digest of a verifier nonce.
pub fn hash_nonce(nonce: &[u8]) -> Digest256 {
    hash_fields(&[Field::Bytes(b"nonce"), Field::Bytes(nonce)])
}

/// H(δ, μ): each datum component as its IEEE-754 little-endian bytes, then μ.
pub fn hash_raw_record(datum: &[f64], user_salt: &UserSalt) -> Digest256 {
    let comps: Vec<[u8; 8]> = datum.iter().map(|v| v.to_le_bytes()).collect();
    let mut fields: Vec<Field> = comps.iter().map(|c| Field::Bytes(c)).collect();
    fields.push(Field::Bytes(user_salt.as_bytes()));
    hash_fields(&fields)
}

/// H(τ).
pub fn hash_transform_salt(tau: &TransformSalt) -> Digest256 {
    hash_fields(&[Field::Bytes(tau.as_bytes())])
}

macro_rules! salt_type {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, PartialEq, Eq, Hash, Debug)]
        pub struct $name(Vec<u8>);

        impl $name {
            pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
                let mut bytes = vec![0u8; SALT_LEN];
                rng.fill_bytes(&mut bytes);
                $name(bytes)
            }

            pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
                if bytes.len() != SALT_LEN {
                    return Err(CodecError::SaltLength { expected: SALT_LEN, actual: bytes.len() });
                }
                Ok($name(bytes))
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(&self.0))
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                $name::from_bytes(bytes).map_err(serde::de::Error::custom)
            }
        }
    };
}

salt_type!(UserSalt, "Secret per-user salt binding a datum to its owner.");
salt_type!(TransformSalt, "Secret per-user salt making leaf values distinguishable.");

/// Leaf position in a tree of height `height`, stored as a right-aligned
/// 256-bit big-endian integer so that full-width indices are representable.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct LeafIndex {
    height: u16,
    value: [u8; 32],
}

impl LeafIndex {
    pub fn from_u64(value: u64, height: u16) -> Result<Self, CodecError> {
        check_height(height)?;
        if height < 64 && value >> height != 0 {
            return Err(CodecError::IndexOutOfRange { height });
        }
        let mut be = [0u8; 32];
        be[24..].copy_from_slice(&value.to_be_bytes());
        Ok(LeafIndex { height, value: be })
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn to_be_bytes(&self) -> [u8; 32] {
        self.value
    }

    /// The index as a machine integer, when it fits.
    pub fn as_u64(&self) -> Option<u64> {
        if self.value[..24].iter().any(|&b| b != 0) {
            return None;
        }
        Some(u64::from_be_bytes(self.value[24..].try_into().unwrap()))
    }

    fn bit(&self, pos_from_lsb: usize) -> u8 {
        let byte = self.value[31 - pos_from_lsb / 8];
        (byte >> (pos_from_lsb % 8)) & 1
    }
}

#[derive(Serialize, Deserialize)]
struct LeafIndexRepr {
    height: u16,
    value: String,
}

impl Serialize for LeafIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LeafIndexRepr { height: self.height, value: hex::encode(self.value) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LeafIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = LeafIndexRepr::deserialize(d)?;
        check_height(repr.height).map_err(D::Error::custom)?;
        let bytes = hex::decode(&repr.value).map_err(D::Error::custom)?;
        let value: [u8; 32] = bytes.try_into().map_err(|_| D::Error::custom("leaf index must be 32 bytes"))?;
        let idx = LeafIndex { height: repr.height, value };
        if (repr.height as usize..256).any(|p| idx.bit(p) == 1) {
            return Err(D::Error::custom(CodecError::IndexOutOfRange { height: repr.height }));
        }
        Ok(idx)
    }
}

fn check_height(height: u16) -> Result<(), CodecError> {
    if height == 0 || height > 256 {
        return Err(CodecError::InvalidHeight(height));
    }
    Ok(())
}

/// Top `height` bits of `digest`, big-endian.
pub fn derive_leaf_index(digest: &Digest256, height: u16) -> Result<LeafIndex, CodecError> {
    check_height(height)?;
    let shift = 256 - height as usize;
    let byte_shift = shift / 8;
    let bit_shift = shift % 8;
    let src = digest.0;
    let mut out = [0u8; 32];
    for i in (byte_shift..32).rev() {
        let cur = src[i - byte_shift];
        let prev = if i > byte_shift { src[i - byte_shift - 1] } else { 0 };
        out[i] = if bit_shift == 0 { cur } else { (cur >> bit_shift) | (prev << (8 - bit_shift)) };
    }
    Ok(LeafIndex { height, value: out })
}

/// Root-to-leaf branch bits; `bits[0]` chooses the child of the root.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BinaryPath {
    pub bits: Vec<u8>,
}

impl BinaryPath {
    pub fn height(&self) -> usize {
        self.bits.len()
    }

    /// Selector bit used by the hop whose children sit at `level`
    /// (level 0 is the leaf level).
    pub fn bit_at_level(&self, level: usize) -> u8 {
        self.bits[self.bits.len() - 1 - level]
    }

    /// Refold the bits into an index of the same height.
    pub fn to_index(&self) -> Result<LeafIndex, CodecError> {
        let height = u16::try_from(self.bits.len()).map_err(|_| CodecError::InvalidHeight(u16::MAX))?;
        check_height(height)?;
        let mut value = [0u8; 32];
        for (level, _) in self.bits.iter().enumerate() {
            if self.bit_at_level(level) == 1 {
                value[31 - level / 8] |= 1 << (level % 8);
            }
        }
        Ok(LeafIndex { height, value })
    }
}

pub fn index_to_path(index: &LeafIndex, height: u16) -> Result<BinaryPath, CodecError> {
    check_height(height)?;
    let h = height as usize;
    for pos in h..256 {
        if index.bit(pos) == 1 {
            return Err(CodecError::IndexOutOfRange { height });
        }
    }
    let bits = (0..h).rev().map(|pos| index.bit(pos)).collect();
    Ok(BinaryPath { bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn empty_field_list_is_version_byte_only() {
        assert_eq!(canonical_serialize(&[]).unwrap(), vec![CODEC_VERSION]);
    }

    #[test]
    fn fixed_point_field_layout() {
        let fp = FixedPoint { raw: 192, scale: 8 };
        let bytes = canonical_serialize(&[Field::Fixed(fp)]).unwrap();
        assert_eq!(bytes, vec![0x01, 9, 0, 0, 0, 0xC0, 0, 0, 0, 0, 0, 0, 0, 0x08]);
    }

    #[test]
    fn negative_raw_is_twos_complement() {
        let bytes = canonical_serialize(&[Field::Fixed(FixedPoint { raw: -1, scale: 3 })]).unwrap();
        assert_eq!(&bytes[5..13], &[0xFF; 8]);
    }

    #[test]
    fn serialize_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let raw: i64 = rng.random();
            let salt: [u8; 16] = rng.random();
            let fields = [Field::Fixed(FixedPoint { raw, scale: 12 }), Field::Bytes(&salt)];
            assert_eq!(canonical_serialize(&fields).unwrap(), canonical_serialize(&fields).unwrap());
        }
    }

    #[test]
    fn oversize_length_prefix_rejected() {
        assert_eq!(length_prefix(u32::MAX as usize).unwrap(), u32::MAX);
        assert_eq!(length_prefix(u32::MAX as usize + 1), Err(CodecError::SerializationOverflow(u32::MAX as usize + 1)));
    }

    #[test]
    fn sha256_reference_vectors() {
        assert_eq!(hash_node(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(hash_node(b"abc").to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn hash_is_deterministic_and_collision_free_on_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        let mut inputs = HashSet::new();
        for _ in 0..100_000 {
            let len = rng.random_range(0..48);
            let mut b = vec![0u8; len];
            rng.fill_bytes(&mut b);
            if !inputs.insert(b.clone()) {
                continue;
            }
            let d = hash_node(&b);
            assert_eq!(d, hash_node(&b));
            assert!(seen.insert(d));
        }
    }

    #[test]
    fn serialization_injective_on_structured_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut values = HashSet::new();
        let mut digests = HashSet::new();
        for _ in 0..100_000 {
            let n = rng.random_range(0..4usize);
            let raws: Vec<i64> = (0..n).map(|_| rng.random_range(-1000..1000)).collect();
            // with no fixed-point fields the scale is not part of the value
            let scale = if n == 0 { 8 } else { [8u8, 10, 12, 14][rng.random_range(0..4)] };
            let tag: Vec<u8> = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..4)).collect();
            if !values.insert((raws.clone(), scale, tag.clone())) {
                continue;
            }
            let mut fields: Vec<Field> = raws.iter().map(|&raw| Field::Fixed(FixedPoint { raw, scale })).collect();
            fields.push(Field::Bytes(&tag));
            assert!(digests.insert(hash_fields(&fields)));
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_fixed(0.75, 8).unwrap().raw, 192);
        for s in 0..=MAX_SCALE {
            assert_eq!(encode_fixed(0.0, s).unwrap().raw, 0);
        }
        let f = encode_fixed(-0.6137, 14).unwrap();
        assert!((decode_fixed(f) + 0.6137).abs() <= 2f64.powi(-15));
    }

    #[test]
    fn encode_rounds_half_to_even() {
        assert_eq!(encode_fixed(0.5 / 256.0, 8).unwrap().raw, 0);
        assert_eq!(encode_fixed(1.5 / 256.0, 8).unwrap().raw, 2);
        assert_eq!(encode_fixed(2.5 / 256.0, 8).unwrap().raw, 2);
        assert_eq!(encode_fixed(-2.5 / 256.0, 8).unwrap().raw, -2);
    }

    #[test]
    fn encode_overflow_and_bad_scale() {
        assert!(matches!(encode_fixed(1e30, 8), Err(CodecError::QuantizationOverflow { .. })));
        assert!(matches!(encode_fixed(f64::NAN, 8), Err(CodecError::QuantizationOverflow { .. })));
        assert!(matches!(encode_fixed(2f64.powi(48), 14), Err(CodecError::QuantizationOverflow { .. })));
        assert_eq!(encode_fixed(1.0, 63), Err(CodecError::InvalidScale(63)));
    }

    #[test]
    fn leaf_index_examples() {
        let mut d = [0u8; 32];
        d[0] = 0xA7;
        assert_eq!(derive_leaf_index(&Digest256(d), 8).unwrap().as_u64(), Some(167));
        d[0] = 0x7F;
        assert_eq!(derive_leaf_index(&Digest256(d), 1).unwrap().as_u64(), Some(0));
        let full = hash_node(b"full width");
        let idx = derive_leaf_index(&full, 256).unwrap();
        assert_eq!(idx.to_be_bytes(), full.0);
    }

    #[test]
    fn leaf_index_matches_shift_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let mut d = [0u8; 32];
            rng.fill_bytes(&mut d);
            let top = u64::from_be_bytes(d[..8].try_into().unwrap());
            for k in 1..=64u16 {
                let expect = if k == 64 { top } else { top >> (64 - k) };
                assert_eq!(derive_leaf_index(&Digest256(d), k).unwrap().as_u64(), Some(expect));
            }
        }
    }

    #[test]
    fn path_examples() {
        let p = index_to_path(&LeafIndex::from_u64(5, 3).unwrap(), 3).unwrap();
        assert_eq!(p.bits, vec![1, 0, 1]);
        let p = index_to_path(&LeafIndex::from_u64(0, 4).unwrap(), 4).unwrap();
        assert_eq!(p.bits, vec![0, 0, 0, 0]);
        assert!(LeafIndex::from_u64(8, 3).is_err());
        let wide = LeafIndex::from_u64(9, 8).unwrap();
        assert_eq!(index_to_path(&wide, 3), Err(CodecError::IndexOutOfRange { height: 3 }));
    }

    #[test]
    fn path_round_trip_exhaustive() {
        for k in 1..=12u16 {
            for i in 0..(1u64 << k) {
                let idx = LeafIndex::from_u64(i, k).unwrap();
                let path = index_to_path(&idx, k).unwrap();
                assert_eq!(path.bits.len(), k as usize);
                let folded = path.bits.iter().fold(0u64, |acc, &b| acc * 2 + b as u64);
                assert_eq!(folded, i);
                assert_eq!(path.to_index().unwrap(), idx);
            }
        }
    }

    #[test]
    fn salts_enforce_length() {
        assert!(UserSalt::from_bytes(vec![0; 15]).is_err());
        let s = TransformSalt::random(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.as_bytes().len(), SALT_LEN);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TransformSalt>(&json).unwrap(), s);
    }
}
