//! Personal health record store.
//!
//! Holds participant records and commits to their `(H(δ,μ), H(τ))` tuples in a
//! plain Merkle tree. Leaves are sorted by digest and the last leaf is repeated
//! up to the next power of two.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{hash_fields, hash_node, hash_raw_record, hash_transform_salt, Digest256, Field, TransformSalt, UserSalt};
use crate::prover::{RecordSource, UserRecord};

pub const HD_COHORT_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum PhrError {
    #[error("user `{0}` is already registered")]
    Duplicate(String),
    #[error("record tuple already registered")]
    DuplicateTuple,
    #[error("no entry for the requested tuple")]
    NotFound,
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("phr file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrEntry {
    pub user_id: String,
    pub h_raw: Digest256,
    pub h_tau: Digest256,
}

impl PhrEntry {
    pub fn leaf_digest(&self) -> Digest256 {
        phr_leaf(&self.h_raw, &self.h_tau)
    }
}

pub fn phr_leaf(h_raw: &Digest256, h_tau: &Digest256) -> Digest256 {
    hash_fields(&[Field::Bytes(h_raw.as_bytes()), Field::Bytes(h_tau.as_bytes())])
}

fn phr_parent(l: &Digest256, r: &Digest256) -> Digest256 {
    hash_fields(&[Field::Bytes(l.as_bytes()), Field::Bytes(r.as_bytes())])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleAuditPath {
    pub leaf_digest: Digest256,
    pub siblings: Vec<Digest256>,
    /// 1 when the running node is the right child at that level.
    pub directions: Vec<u8>,
    pub root: Digest256,
}

pub fn phr_verify_membership(root: &Digest256, path: &MerkleAuditPath) -> bool {
    if path.siblings.len() != path.directions.len() || path.root != *root {
        return false;
    }
    let mut cur = path.leaf_digest;
    for (sib, dir) in path.siblings.iter().zip(&path.directions) {
        cur = match dir {
            0 => phr_parent(&cur, sib),
            1 => phr_parent(sib, &cur),
            _ => return false,
        };
    }
    cur == *root
}

/// Root of the empty store.
pub fn empty_phr_root() -> Digest256 {
    hash_node(&[])
}

fn padded_levels(mut leaves: Vec<Digest256>) -> Vec<Vec<Digest256>> {
    leaves.sort();
    if let Some(&last) = leaves.last() {
        leaves.resize(leaves.len().next_power_of_two(), last);
    }
    let mut levels = vec![leaves];
    while levels.last().is_some_and(|l| l.len() > 1) {
        let next = levels.last().unwrap().chunks(2).map(|p| phr_parent(&p[0], &p[1])).collect();
        levels.push(next);
    }
    levels
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PhrStore {
    records: BTreeMap<String, UserRecord>,
}

impl PhrStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phr_register(
        &mut self,
        user_id: &str,
        datum: Vec<f64>,
        user_salt: UserSalt,
        transform_salt: TransformSalt,
    ) -> Result<PhrEntry, PhrError> {
        if self.records.contains_key(user_id) {
            return Err(PhrError::Duplicate(user_id.to_string()));
        }
        let entry = PhrEntry {
            user_id: user_id.to_string(),
            h_raw: hash_raw_record(&datum, &user_salt),
            h_tau: hash_transform_salt(&transform_salt),
        };
        if self.entries().iter().any(|e| e.h_raw == entry.h_raw && e.h_tau == entry.h_tau) {
            return Err(PhrError::DuplicateTuple);
        }
        self.records.insert(user_id.to_string(), UserRecord { user_id: user_id.to_string(), datum, user_salt, transform_salt });
        Ok(entry)
    }

    pub fn register_record(&mut self, rec: UserRecord) -> Result<PhrEntry, PhrError> {
        self.phr_register(&rec.user_id, rec.datum, rec.user_salt, rec.transform_salt)
    }

    /// Draw a fresh τ for `user_id`; used when two leaves collide at desk-scale heights.
    pub fn rotate_transform_salt<R: RngCore + ?Sized>(&mut self, user_id: &str, rng: &mut R) -> Result<PhrEntry, PhrError> {
        let rec = self.records.get_mut(user_id).ok_or_else(|| PhrError::UnknownUser(user_id.to_string()))?;
        rec.transform_salt = TransformSalt::random(rng);
        Ok(entry_of(rec))
    }

    pub fn entry(&self, user_id: &str) -> Option<PhrEntry> {
        self.records.get(user_id).map(entry_of)
    }

    pub fn entries(&self) -> Vec<PhrEntry> {
        self.records.values().map(entry_of).collect()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    pub fn record(&self, user_id: &str) -> Option<&UserRecord> {
        self.records.get(user_id)
    }

    pub fn root(&self) -> Digest256 {
        let levels = padded_levels(self.entries().iter().map(PhrEntry::leaf_digest).collect());
        levels.last().and_then(|l| l.first().copied()).unwrap_or_else(empty_phr_root)
    }

    pub fn phr_prove_membership(&self, h_raw: &Digest256, h_tau: &Digest256) -> Result<MerkleAuditPath, PhrError> {
        let target = phr_leaf(h_raw, h_tau);
        let leaves: Vec<Digest256> = self.entries().iter().map(PhrEntry::leaf_digest).collect();
        let levels = padded_levels(leaves);
        let mut pos = levels[0].iter().position(|d| *d == target).ok_or(PhrError::NotFound)?;
        let mut siblings = Vec::new();
        let mut directions = Vec::new();
        for level in &levels[..levels.len() - 1] {
            siblings.push(level[pos ^ 1]);
            directions.push((pos & 1) as u8);
            pos >>= 1;
        }
        Ok(MerkleAuditPath { leaf_digest: target, siblings, directions, root: levels.last().unwrap()[0] })
    }

    pub fn save(&self, path: &Path) -> Result<(), PhrError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PhrError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PhrError> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| PhrError::Format(e.to_string()))
    }
}

fn entry_of(rec: &UserRecord) -> PhrEntry {
    PhrEntry {
        user_id: rec.user_id.clone(),
        h_raw: hash_raw_record(&rec.datum, &rec.user_salt),
        h_tau: hash_transform_salt(&rec.transform_salt),
    }
}

impl RecordSource for PhrStore {
    fn fetch(&self, user_id: &str) -> Result<UserRecord, String> {
        self.records.get(user_id).cloned().ok_or_else(|| format!("no PHR record for `{user_id}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CagRecord {
    pub user_id: String,
    pub cag: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdCohorts {
    pub healthy: Vec<CagRecord>,
    pub hd: Vec<CagRecord>,
}

fn clamped_normal(rng: &mut ChaCha20Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> u32 {
    let d = Normal::new(mean, sd).expect("positive sd");
    d.sample(rng).round().clamp(lo, hi) as u32
}

/// Synthetic CAG repeat counts: healthy ~ round(N(17, 3)) in [6, 35],
/// HD ~ round(N(43, 4)) in [36, 120].
pub fn generate_hd_cohorts(seed: u64) -> HdCohorts {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let healthy = (0..HD_COHORT_SIZE)
        .map(|i| CagRecord { user_id: format!("healthy-{i:03}"), cag: clamped_normal(&mut rng, 17.0, 3.0, 6.0, 35.0) })
        .collect();
    let hd = (0..HD_COHORT_SIZE)
        .map(|i| CagRecord { user_id: format!("hd-{i:03}"), cag: clamped_normal(&mut rng, 43.0, 4.0, 36.0, 120.0) })
        .collect();
    HdCohorts { healthy, hd }
}

/// Attach fresh OS-random salts to scalar records.
pub fn salted_records<'a>(rows: impl IntoIterator<Item = (&'a str, Vec<f64>)>) -> Vec<UserRecord> {
    let mut rng = rand::rng();
    rows.into_iter()
        .map(|(id, datum)| UserRecord {
            user_id: id.to_string(),
            datum,
            user_salt: UserSalt::random(&mut rng),
            transform_salt: TransformSalt::random(&mut rng),
        })
        .collect()
}

pub fn write_cag_csv<W: Write>(out: W, rows: &[CagRecord]) -> Result<(), PhrError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| PhrError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cag_csv<R: Read>(input: R) -> Result<Vec<CagRecord>, PhrError> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(|e| PhrError::Format(e.to_string()))).collect()
}

/// Synthetic logistic-regression records `[x_1, .., x_m, y]` with standard
/// normal features and `y ~ Bernoulli(σ(b_0 + b·x))`.
pub fn generate_logistic_records(seed: u64, n: usize, true_beta: &[f64], prefix: &str) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = true_beta.len() - 1;
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..m).map(|_| normal.sample(&mut rng)).collect();
            let z = true_beta[0] + x.iter().zip(&true_beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let p = crate::transforms::sigmoid(z);
            let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            let mut datum = x;
            datum.push(y);
            (format!("{prefix}-{i:03}"), datum)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn store(n: usize, seed: u64) -> PhrStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = PhrStore::new();
        for i in 0..n {
            s.phr_register(&format!("u{i}"), vec![i as f64], UserSalt::random(&mut rng), TransformSalt::random(&mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn single_registration_root_is_leaf() {
        let s = store(1, 1);
        let e = s.entry("u0").unwrap();
        assert_eq!(s.root(), e.leaf_digest());
        assert_eq!(PhrStore::new().root(), empty_phr_root());
        assert_eq!(empty_phr_root().to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn root_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = (UserSalt::random(&mut rng), TransformSalt::random(&mut rng));
        let b = (UserSalt::random(&mut rng), TransformSalt::random(&mut rng));
        let mut s1 = PhrStore::new();
        s1.phr_register("a", vec![1.0], a.0.clone(), a.1.clone()).unwrap();
        s1.phr_register("b", vec![2.0], b.0.clone(), b.1.clone()).unwrap();
        let mut s2 = PhrStore::new();
        s2.phr_register("b", vec![2.0], b.0, b.1).unwrap();
        s2.phr_register("a", vec![1.0], a.0, a.1).unwrap();
        assert_eq!(s1.root(), s2.root());
        // sorted two-leaf oracle
        let mut l = [s1.entry("a").unwrap().leaf_digest(), s1.entry("b").unwrap().leaf_digest()];
        l.sort();
        assert_eq!(s1.root(), phr_parent(&l[0], &l[1]));
    }

    #[test]
    fn three_leaves_pad_with_last() {
        let s = store(3, 3);
        let mut l: Vec<Digest256> = s.entries().iter().map(PhrEntry::leaf_digest).collect();
        l.sort();
        let expect = phr_parent(&phr_parent(&l[0], &l[1]), &phr_parent(&l[2], &l[2]));
        assert_eq!(s.root(), expect);
    }

    #[test]
    fn duplicate_user_rejected() {
        let mut s = store(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = s.phr_register("u1", vec![0.0], UserSalt::random(&mut rng), TransformSalt::random(&mut rng));
        assert!(matches!(err, Err(PhrError::Duplicate(u)) if u == "u1"));
    }

    #[test]
    fn membership_round_trip_and_tamper() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [1usize, 2, 3, 5, 8, 17, 64, 100, 256] {
            let s = store(n, rng.random());
            let root = s.root();
            for e in s.entries() {
                let p = s.phr_prove_membership(&e.h_raw, &e.h_tau).unwrap();
                assert!(phr_verify_membership(&root, &p));
                if !p.siblings.is_empty() {
                    let mut t = p.clone();
                    let i = rng.random_range(0..t.siblings.len());
                    t.siblings[i].0[rng.random_range(0..32)] ^= 1;
                    assert!(!phr_verify_membership(&root, &t));
                }
                assert!(!phr_verify_membership(&Digest256([9; 32]), &p));
            }
        }
    }

    #[test]
    fn unknown_tuple_not_found() {
        let s = store(4, 7);
        assert!(matches!(s.phr_prove_membership(&Digest256([1; 32]), &Digest256([2; 32])), Err(PhrError::NotFound)));
    }

    #[test]
    fn root_changes_on_every_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = PhrStore::new();
        let mut prev = s.root();
        for i in 0..100 {
            s.phr_register(&format!("u{i}"), vec![1.0], UserSalt::random(&mut rng), TransformSalt::random(&mut rng)).unwrap();
            assert_ne!(s.root(), prev);
            prev = s.root();
        }
    }

    #[test]
    fn rotation_changes_tau_only() {
        let mut s = store(3, 9);
        let before = s.entry("u1").unwrap();
        let after = s.rotate_transform_salt("u1", &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(before.h_raw, after.h_raw);
        assert_ne!(before.h_tau, after.h_tau);
    }

    #[test]
    fn hd_cohort_properties() {
        let c = generate_hd_cohorts(42);
        assert_eq!(c.healthy.len(), 50);
        assert_eq!(c.hd.len(), 50);
        let mean = c.healthy.iter().map(|r| r.cag as f64).sum::<f64>() / 50.0;
        assert!((15.0..=19.0).contains(&mean), "healthy mean {mean}");
        assert!(c.hd.iter().all(|r| (36..=120).contains(&r.cag)));
        assert!(c.healthy.iter().all(|r| (6..=35).contains(&r.cag)));
        assert_eq!(c, generate_hd_cohorts(42));
        let ids: std::collections::HashSet<_> = c.healthy.iter().chain(&c.hd).map(|r| &r.user_id).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn cag_csv_round_trip() {
        let c = generate_hd_cohorts(1);
        let mut buf = Vec::new();
        write_cag_csv(&mut buf, &c.hd).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("user_id,cag\n"));
        assert_eq!(read_cag_csv(&buf[..]).unwrap(), c.hd);
    }

    #[test]
    fn logistic_records_shape() {
        let rows = generate_logistic_records(3, 200, &[0.2, 1.0, -0.5, 0.8, 0.0], "train");
        assert_eq!(rows.len(), 200);
        assert!(rows.iter().all(|(_, d)| d.len() == 5 && (d[4] == 0.0 || d[4] == 1.0)));
        assert_eq!(rows, generate_logistic_records(3, 200, &[0.2, 1.0, -0.5, 0.8, 0.0], "train"));
    }

    #[test]
    fn store_file_round_trip() {
        let s = store(5, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phr.json");
        s.save(&p).unwrap();
        assert_eq!(PhrStore::load(&p).unwrap().root(), s.root());
    }
}
