//! Domain-separated SHA-256 digests for prefix contexts and per-leaf PRF draws.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::fixed::Q0_64;

pub const CTX_DOMAIN: &[u8] = b"racecert/ctx/v1";
pub const PRF_DOMAIN: &[u8] = b"racecert/prf/v1";

/// 32-byte SHA-256 output. Ordered lexicographically on bytes, which is the
/// public tie-break order of the frontier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex_encode(&self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks(2).enumerate() {
            let hi = (pair[0] as char).to_digit(16)?;
            let lo = (pair[1] as char).to_digit(16)?;
            // lowercase only, so the rendering is canonical
            if pair.iter().any(|c| c.is_ascii_uppercase()) {
                return None;
            }
            out[i] = (hi * 16 + lo) as u8;
        }
        Some(Digest(out))
    }

    /// First eight bytes, big-endian.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 lowercase hex digits"))
    }
}

/// Public caps that are folded into every context digest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicCaps {
    pub max_depth: u32,
    pub c_s_max: f64,
    pub c_s_min: f64,
}

/// Incremental context hasher: the digest of a path is a function of the
/// caps and the sequence of `(state_label, edge_order)` steps. Each step is
/// length-prefixed, so extending a path always changes the digest.
#[derive(Clone)]
pub struct CtxHasher {
    inner: Sha256,
}

impl CtxHasher {
    pub fn new(caps: &PublicCaps) -> Self {
        let mut inner = Sha256::new();
        inner.update((CTX_DOMAIN.len() as u32).to_be_bytes());
        inner.update(CTX_DOMAIN);
        inner.update(caps.max_depth.to_be_bytes());
        inner.update(caps.c_s_max.to_bits().to_be_bytes());
        inner.update(caps.c_s_min.to_bits().to_be_bytes());
        CtxHasher { inner }
    }

    pub fn push(&mut self, state_label: &str, edge_order: u64) {
        self.inner.update((state_label.len() as u32).to_be_bytes());
        self.inner.update(state_label.as_bytes());
        self.inner.update(edge_order.to_be_bytes());
    }

    pub fn digest(&self) -> Digest {
        Digest(self.inner.clone().finalize().into())
    }
}

/// Digest of a whole root-started path. The root step uses edge order 0.
pub fn ctx_digest(path: &[(&str, u64)], caps: &PublicCaps) -> Digest {
    let mut h = CtxHasher::new(caps);
    for (label, order) in path {
        h.push(label, *order);
    }
    h.digest()
}

/// Run-level key for per-leaf pseudo-random uniforms. The salt is
/// serialized as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrfKey {
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    pub domain: String,
}

mod hex_bytes {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex_encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        hex_decode(&s).ok_or_else(|| serde::de::Error::custom("expected hex bytes"))
    }
}

impl PrfKey {
    pub fn new(salt: &[u8], domain: &str) -> Self {
        PrfKey { salt: salt.to_vec(), domain: domain.into() }
    }
}

/// `x` = first eight bytes (big-endian) of
/// SHA-256(tag ‖ len(salt) ‖ salt ‖ len(domain) ‖ domain ‖ leaf_id).
pub fn prf_raw(key: &PrfKey, leaf_id: &Digest) -> Q0_64 {
    let mut h = Sha256::new();
    h.update(PRF_DOMAIN);
    h.update((key.salt.len() as u32).to_be_bytes());
    h.update(&key.salt);
    h.update((key.domain.len() as u32).to_be_bytes());
    h.update(key.domain.as_bytes());
    h.update(leaf_id.0);
    let out: [u8; 32] = h.finalize().into();
    Q0_64(u64::from_be_bytes(out[..8].try_into().unwrap()))
}

pub fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(char::from_digit((b >> 4) as u32, 16).unwrap());
        s.push(char::from_digit((b & 0xf) as u32, 16).unwrap());
    }
    s
}

pub fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    s.as_bytes()
        .chunks(2)
        .map(|p| {
            let hi = (p[0] as char).to_digit(16)?;
            let lo = (p[1] as char).to_digit(16)?;
            Some((hi * 16 + lo) as u8)
        })
        .collect()
}

/// SHA-256 of arbitrary bytes; used for graph fingerprints in ledger headers.
pub fn sha256(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps() -> PublicCaps {
        PublicCaps { max_depth: 4, c_s_max: 1.0, c_s_min: 0.1 }
    }

    #[test]
    fn same_path_same_digest() {
        let p = [("root", 0), ("A", 1)];
        assert_eq!(ctx_digest(&p, &caps()), ctx_digest(&p, &caps()));
    }

    #[test]
    fn edge_order_changes_digest() {
        let a = ctx_digest(&[("root", 0), ("A", 0)], &caps());
        let b = ctx_digest(&[("root", 0), ("A", 1)], &caps());
        assert_ne!(a, b);
    }

    #[test]
    fn extending_path_changes_digest() {
        let a = ctx_digest(&[("root", 0)], &caps());
        let b = ctx_digest(&[("root", 0), ("root", 0)], &caps());
        assert_ne!(a, b);
    }

    #[test]
    fn caps_are_part_of_the_context() {
        let mut other = caps();
        other.max_depth = 5;
        let p = [("root", 0)];
        assert_ne!(ctx_digest(&p, &caps()), ctx_digest(&p, &other));
    }

    #[test]
    fn label_boundaries_are_unambiguous() {
        let a = ctx_digest(&[("ab", 0), ("c", 0)], &caps());
        let b = ctx_digest(&[("a", 0), ("bc", 0)], &caps());
        assert_ne!(a, b);
    }

    #[test]
    fn incremental_matches_whole_path() {
        let mut h = CtxHasher::new(&caps());
        h.push("root", 0);
        let mut child = h.clone();
        child.push("B", 2);
        assert_eq!(child.digest(), ctx_digest(&[("root", 0), ("B", 2)], &caps()));
        assert_eq!(h.digest(), ctx_digest(&[("root", 0)], &caps()));
    }

    #[test]
    fn hex_round_trip_and_canonical_case() {
        let d = ctx_digest(&[("root", 0)], &caps());
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(Digest::from_hex(&d.to_hex().to_uppercase()), None);
        assert_eq!(Digest::from_hex("abc"), None);
    }

    #[test]
    fn prf_is_deterministic_and_distinct_on_a_corpus() {
        let key = PrfKey::new(b"\x01\x02", "leaf");
        let ids: Vec<Digest> =
            (0..512u64).map(|i| ctx_digest(&[("root", 0), ("L", i)], &caps())).collect();
        let xs: Vec<u64> = ids.iter().map(|d| prf_raw(&key, d).0).collect();
        for (d, x) in ids.iter().zip(&xs) {
            assert_eq!(prf_raw(&key, d).0, *x);
        }
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), xs.len());
        // salt and domain both matter
        assert_ne!(prf_raw(&PrfKey::new(b"\x01\x03", "leaf"), &ids[0]), prf_raw(&key, &ids[0]));
        assert_ne!(prf_raw(&PrfKey::new(b"\x01\x02", "leaf2"), &ids[0]), prf_raw(&key, &ids[0]));
    }
}
