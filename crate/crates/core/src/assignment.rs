//! Salted-hash randomization of users into experimental conditions.
//!
//! A user id is concatenated with the test salt, hashed with MurmurHash3,
//! reduced modulo a large prime, then mapped onto a fixed number of buckets.
//! Buckets are handed to conditions in contiguous ranges sized by the
//! allocation proportions.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

pub const DEFAULT_BUCKETS: u32 = 10_000;
/// 2^31 - 1.
pub const DEFAULT_PRIME: u64 = 2_147_483_647;

/// Per-test 64-bit salt. Serialized as a decimal string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TestSalt(pub u64);

impl TestSalt {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TestSalt(rng.random())
    }
}

impl fmt::Display for TestSalt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for TestSalt {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for TestSalt {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<u64>().map(TestSalt).map_err(serde::de::Error::custom)
    }
}

#[inline]
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// MurmurHash3 x64 128-bit. Returns `(h1, h2)`.
pub fn murmur3_x64_128(data: &[u8], seed: u32) -> (u64, u64) {
    const C1: u64 = 0x87c3_7b91_1142_53d5;
    const C2: u64 = 0x4cf5_ad43_2745_937f;
    let len = data.len();
    let mut h1 = seed as u64;
    let mut h2 = seed as u64;

    let blocks = len / 16;
    for i in 0..blocks {
        let b = &data[i * 16..i * 16 + 16];
        let mut k1 = u64::from_le_bytes(b[0..8].try_into().unwrap());
        let mut k2 = u64::from_le_bytes(b[8..16].try_into().unwrap());

        k1 = k1.wrapping_mul(C1).rotate_left(31).wrapping_mul(C2);
        h1 ^= k1;
        h1 = h1.rotate_left(27).wrapping_add(h2);
        h1 = h1.wrapping_mul(5).wrapping_add(0x52dc_e729);

        k2 = k2.wrapping_mul(C2).rotate_left(33).wrapping_mul(C1);
        h2 ^= k2;
        h2 = h2.rotate_left(31).wrapping_add(h1);
        h2 = h2.wrapping_mul(5).wrapping_add(0x3849_5ab5);
    }

    let tail = &data[blocks * 16..];
    let mut k1 = 0u64;
    let mut k2 = 0u64;
    for (i, &byte) in tail.iter().enumerate().rev() {
        if i >= 8 {
            k2 ^= (byte as u64) << ((i - 8) * 8);
        } else {
            k1 ^= (byte as u64) << (i * 8);
        }
    }
    if tail.len() > 8 {
        k2 = k2.wrapping_mul(C2).rotate_left(33).wrapping_mul(C1);
        h2 ^= k2;
    }
    if !tail.is_empty() {
        k1 = k1.wrapping_mul(C1).rotate_left(31).wrapping_mul(C2);
        h1 ^= k1;
    }

    h1 ^= len as u64;
    h2 ^= len as u64;
    h1 = h1.wrapping_add(h2);
    h2 = h2.wrapping_add(h1);
    h1 = fmix64(h1);
    h2 = fmix64(h2);
    h1 = h1.wrapping_add(h2);
    h2 = h2.wrapping_add(h1);
    (h1, h2)
}

/// Hash of `user_id ‖ salt` (little-endian bytes), low 64 bits of Murmur3.
pub fn hash_user(user_id: u64, salt: TestSalt) -> u64 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&user_id.to_le_bytes());
    buf[8..].copy_from_slice(&salt.0.to_le_bytes());
    murmur3_x64_128(&buf, 0).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanSpec {
    conditions: Vec<(String, f64)>,
    n_buckets: u32,
    prime: u64,
}

/// Ordered `(condition, proportion)` list mapped onto contiguous bucket ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanSpec", into = "PlanSpec")]
pub struct AllocationPlan {
    conditions: Vec<(String, f64)>,
    n_buckets: u32,
    prime: u64,
    /// `bounds[i]..bounds[i + 1]` is the bucket range of condition `i`.
    bounds: Vec<u32>,
}

impl TryFrom<PlanSpec> for AllocationPlan {
    type Error = crate::error::Error;
    fn try_from(s: PlanSpec) -> Result<Self> {
        AllocationPlan::with_buckets(s.conditions, s.n_buckets, s.prime)
    }
}

impl From<AllocationPlan> for PlanSpec {
    fn from(p: AllocationPlan) -> Self {
        PlanSpec {
            conditions: p.conditions,
            n_buckets: p.n_buckets,
            prime: p.prime,
        }
    }
}

impl AllocationPlan {
    pub fn new<S: Into<String>>(conditions: Vec<(S, f64)>) -> Result<Self> {
        let conditions = conditions.into_iter().map(|(c, p)| (c.into(), p)).collect();
        Self::with_buckets(conditions, DEFAULT_BUCKETS, DEFAULT_PRIME)
    }

    pub fn with_buckets(conditions: Vec<(String, f64)>, n_buckets: u32, prime: u64) -> Result<Self> {
        if conditions.is_empty() {
            return Err(invalid("allocation plan has no conditions"));
        }
        if n_buckets == 0 {
            return Err(invalid("n_buckets must be positive"));
        }
        if prime < n_buckets as u64 {
            return Err(invalid("prime must be at least n_buckets"));
        }
        if conditions.iter().any(|(_, p)| *p < 0.0 || !p.is_finite()) {
            return Err(invalid("proportions must be nonnegative"));
        }
        let total: f64 = conditions.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("proportions sum to {total}, expected 1")));
        }
        let mut bounds = Vec::with_capacity(conditions.len() + 1);
        bounds.push(0u32);
        let mut used = 0u32;
        for (_, p) in &conditions[..conditions.len() - 1] {
            let size = (p * n_buckets as f64).round() as u32;
            used = (used + size).min(n_buckets);
            bounds.push(used);
        }
        // rounding remainder lands in the last condition
        bounds.push(n_buckets);
        Ok(AllocationPlan {
            conditions,
            n_buckets,
            prime,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn n_buckets(&self) -> u32 {
        self.n_buckets
    }

    pub fn prime(&self) -> u64 {
        self.prime
    }

    pub fn label(&self, condition: usize) -> &str {
        &self.conditions[condition].0
    }

    pub fn bucket_range(&self, condition: usize) -> Range<u32> {
        self.bounds[condition]..self.bounds[condition + 1]
    }

    pub fn condition_of_bucket(&self, bucket: u32) -> usize {
        // bounds is sorted; find the last start <= bucket with a nonempty range
        let idx = self.bounds.partition_point(|&b| b <= bucket);
        idx.saturating_sub(1).min(self.conditions.len() - 1)
    }

    pub fn bucket(&self, user_id: u64, salt: TestSalt) -> u32 {
        ((hash_user(user_id, salt) % self.prime) % self.n_buckets as u64) as u32
    }

    /// Index of the condition that owns the user's bucket.
    pub fn assign(&self, user_id: u64, salt: TestSalt) -> usize {
        self.condition_of_bucket(self.bucket(user_id, salt))
    }
}
