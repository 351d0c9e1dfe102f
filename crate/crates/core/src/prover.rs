//! CRO side: private witnesses, leaf transformation, tree builds and proof
//! generation for leaf transforms (LTR) and Merkle root paths (MRP).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{
    derive_leaf_index, hash_raw_record, hash_transform_salt, index_to_path, BinaryPath, CodecError, Digest256, LeafIndex, TransformSalt,
    UserSalt,
};
use crate::proofsys::{
    prove_computed, setup, CircuitId, KeyPair, LtrCircuit, MrpCircuit, ProofArtifact, ProofError, ProvingKey, VerifyingKey, Witness,
};
use crate::transforms::{apply_salted_transform, AggregatorSpec, LeafValue, NodeValue, TransformError, TransformSpec};
use crate::tree::{build_with_specs, TreeConfig, TreeError, TreeHandle};

pub const NONCE_LEN: usize = 16;
pub const WITNESS_KEY_ENV: &str = "WITNESS_STORE_KEY";
const STORE_MAGIC: &[u8; 8] = b"CSMTWS01";

#[derive(Debug, Error)]
pub enum ProverError {
    #[error("no witness for the requested record")]
    NotFound,
    #[error("leaf index {claimed} does not match the index {derived} derived from the leaf digest")]
    IndexMismatch { claimed: String, derived: String },
    #[error("tree `{0}` has not been built")]
    NotBuilt(String),
    #[error("users `{first}` and `{second}` both map to leaf index {index}")]
    LeafCollision { first: String, second: String, index: u64 },
    #[error("record acquisition failed for `{user}`: {reason}")]
    Acquisition { user: String, reason: String },
    #[error("included user `{0}` is not in the cohort")]
    UnknownUser(String),
    #[error("duplicate user id `{0}`")]
    DuplicateUser(String),
    #[error("no proving key for circuit {0}")]
    UnknownCircuit(CircuitId),
    #[error("nonce must be {NONCE_LEN} bytes, got {0}")]
    NonceLength(usize),
    #[error("witness store: {0}")]
    Store(String),
    #[error(transparent)]
    Proof(#[from] ProofError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A participant's private record as held by the PHR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub datum: Vec<f64>,
    pub user_salt: UserSalt,
    pub transform_salt: TransformSalt,
}

/// Where the CRO obtains participant records.
pub trait RecordSource {
    fn fetch(&self, user_id: &str) -> Result<UserRecord, String>;
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
struct WitnessKey {
    h_raw: Digest256,
    h_tau: Digest256,
    circuit: String,
}

impl WitnessKey {
    fn new(h_raw: Digest256, h_tau: Digest256, circuit: &CircuitId) -> Self {
        WitnessKey { h_raw, h_tau, circuit: hex::encode(circuit.to_bytes()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtrWitness {
    pub datum: Vec<f64>,
    pub user_salt: UserSalt,
    pub transform_salt: TransformSalt,
    pub leaf: LeafValue,
}

/// In-memory witness map, persisted as one ChaCha20-Poly1305 sealed file.
#[derive(Debug, Default)]
pub struct WitnessStore {
    records: RwLock<BTreeMap<WitnessKey, LtrWitness>>,
}

/// 32-byte store key from a passphrase.
pub fn store_key_from_passphrase(passphrase: &str) -> [u8; 32] {
    Sha256::digest(passphrase.as_bytes()).into()
}

pub fn store_key_from_env() -> Option<[u8; 32]> {
    std::env::var(WITNESS_KEY_ENV).ok().map(|p| store_key_from_passphrase(&p))
}

impl WitnessStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn put(&self, key: WitnessKey, record: LtrWitness) -> Result<(), ProverError> {
        let mut map = self.records.write().expect("store lock");
        match map.get(&key) {
            Some(existing) if existing != &record => Err(ProverError::Store("conflicting witness for an existing key".into())),
            Some(_) => Ok(()),
            None => {
                map.insert(key, record);
                Ok(())
            }
        }
    }

    fn get(&self, key: &WitnessKey) -> Option<LtrWitness> {
        self.records.read().expect("store lock").get(key).cloned()
    }

    pub fn save(&self, path: &Path, key: &[u8; 32]) -> Result<(), ProverError> {
        let entries: Vec<(WitnessKey, LtrWitness)> =
            self.records.read().expect("store lock").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let plain = serde_json::to_vec(&entries).map_err(|e| ProverError::Store(e.to_string()))?;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
        let mut nonce = [0u8; 12];
        rand::rng().fill_bytes(&mut nonce);
        let sealed =
            cipher.encrypt(Nonce::from_slice(&nonce), plain.as_ref()).map_err(|_| ProverError::Store("encryption failed".into()))?;
        let mut out = Vec::with_capacity(STORE_MAGIC.len() + nonce.len() + sealed.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&sealed);
        std::fs::write(path, out).map_err(|e| ProverError::Store(e.to_string()))
    }

    pub fn load(path: &Path, key: &[u8; 32]) -> Result<Self, ProverError> {
        let bytes = std::fs::read(path).map_err(|e| ProverError::Store(e.to_string()))?;
        if bytes.len() < STORE_MAGIC.len() + 12 || &bytes[..STORE_MAGIC.len()] != STORE_MAGIC {
            return Err(ProverError::Store("not a witness store file".into()));
        }
        let (nonce, sealed) = bytes[STORE_MAGIC.len()..].split_at(12);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
        let plain =
            cipher.decrypt(Nonce::from_slice(nonce), sealed).map_err(|_| ProverError::Store("wrong key or corrupted file".into()))?;
        let entries: Vec<(WitnessKey, LtrWitness)> = serde_json::from_slice(&plain).map_err(|e| ProverError::Store(e.to_string()))?;
        Ok(WitnessStore { records: RwLock::new(entries.into_iter().collect()) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafTransformOutput {
    pub leaf: LeafValue,
    pub h_raw: Digest256,
    pub h_tau: Digest256,
    pub h_leaf: Digest256,
    pub index: LeafIndex,
}

pub fn leaf_transform(
    store: &WitnessStore,
    spec: &TransformSpec,
    height: u16,
    datum: &[f64],
    user_salt: &UserSalt,
    transform_salt: &TransformSalt,
) -> Result<LeafTransformOutput, ProverError> {
    let leaf = apply_salted_transform(spec, datum, user_salt, transform_salt)?;
    let h_leaf = leaf.digest();
    let index = derive_leaf_index(&h_leaf, height)?;
    let h_raw = hash_raw_record(datum, user_salt);
    let h_tau = hash_transform_salt(transform_salt);
    let circuit = LtrCircuit::new(spec.clone());
    use crate::proofsys::Circuit as _;
    store.put(
        WitnessKey::new(h_raw, h_tau, &circuit.id()),
        LtrWitness { datum: datum.to_vec(), user_salt: user_salt.clone(), transform_salt: transform_salt.clone(), leaf: leaf.clone() },
    )?;
    Ok(LeafTransformOutput { leaf, h_raw, h_tau, h_leaf, index })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub all_users: Vec<String>,
    pub included: BTreeSet<String>,
}

impl CohortSpec {
    pub fn all_included(users: Vec<String>) -> Self {
        let included = users.iter().cloned().collect();
        CohortSpec { all_users: users, included }
    }

    fn validate(&self) -> Result<(), ProverError> {
        let mut seen = BTreeSet::new();
        for u in &self.all_users {
            if !seen.insert(u) {
                return Err(ProverError::DuplicateUser(u.clone()));
            }
        }
        if let Some(u) = self.included.iter().find(|u| !seen.contains(u)) {
            return Err(ProverError::UnknownUser(u.clone()));
        }
        Ok(())
    }
}

/// Tree parameters a verifier needs besides the root and keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub height: u16,
    pub default_leaf: Digest256,
    /// Digest of the all-default subtree at each level `0..=height`.
    pub default_chain: Vec<Digest256>,
}

/// What the CRO posts to the bulletin for one tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePublication {
    pub tree_id: String,
    pub root: Digest256,
    pub vk_ltr: VerifyingKey,
    pub vk_mrp: VerifyingKey,
    pub params: TreeParams,
}

/// Sent privately to each user after a build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub user_id: String,
    pub tree_id: String,
    pub h_tau: Digest256,
}

#[derive(Clone, Debug)]
pub struct BuildOutcome {
    pub root: NodeValue,
    pub publication: TreePublication,
    pub deliveries: Vec<Delivery>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrpProof {
    pub root: Digest256,
    pub hops: Vec<ProofArtifact>,
    pub path: BinaryPath,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsmtProofSet {
    pub ltr: ProofArtifact,
    pub mrp_hops: Vec<ProofArtifact>,
    pub path: BinaryPath,
    pub root_digest: Digest256,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtrResponse {
    pub h_leaf: Digest256,
    pub index: LeafIndex,
    pub artifact: ProofArtifact,
}

#[derive(Debug)]
struct BuiltTree {
    tree: TreeHandle,
    ltr_circuit: CircuitId,
    mrp_circuit: CircuitId,
    publication: TreePublication,
    // user -> (h_raw, h_tau, h_leaf, position)
    users: BTreeMap<String, (Digest256, Digest256, Digest256, u64)>,
}

/// Which circuits and height a tree uses.
#[derive(Clone, Debug)]
pub struct TreeSpec {
    pub tree_id: String,
    pub transform: TransformSpec,
    pub aggregator: AggregatorSpec,
    pub height: u16,
}

/// The CRO's prover state. Shared between concurrent jobs behind `Arc`.
#[derive(Debug, Default)]
pub struct Cro {
    store: WitnessStore,
    keys: RwLock<HashMap<CircuitId, ProvingKey>>,
    trees: RwLock<HashMap<String, Arc<BuiltTree>>>,
}

impl Cro {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_store(store: WitnessStore) -> Self {
        Cro { store, ..Self::default() }
    }

    pub fn store(&self) -> &WitnessStore {
        &self.store
    }

    /// Run setup for the LTR and MRP circuits of `spec` and keep the proving keys.
    pub fn setup_circuits(&self, spec: &TreeSpec, lambda: u32, seed: &[u8]) -> Result<(KeyPair, KeyPair), ProverError> {
        let ltr = setup(Arc::new(LtrCircuit::new(spec.transform.clone())), lambda, seed)?;
        let mrp = setup(Arc::new(MrpCircuit::for_transform(spec.aggregator.clone(), &spec.transform)), lambda, seed)?;
        let mut keys = self.keys.write().expect("key lock");
        keys.insert(ltr.vk.circuit.clone(), ltr.pk.clone());
        keys.insert(mrp.vk.circuit.clone(), mrp.pk.clone());
        Ok((ltr, mrp))
    }

    fn proving_key(&self, circuit: &CircuitId) -> Result<ProvingKey, ProverError> {
        self.keys.read().expect("key lock").get(circuit).cloned().ok_or_else(|| ProverError::UnknownCircuit(circuit.clone()))
    }

    fn built(&self, tree_id: &str) -> Result<Arc<BuiltTree>, ProverError> {
        self.trees.read().expect("tree lock").get(tree_id).cloned().ok_or_else(|| ProverError::NotBuilt(tree_id.to_string()))
    }

    pub fn publication(&self, tree_id: &str) -> Result<TreePublication, ProverError> {
        Ok(self.built(tree_id)?.publication.clone())
    }

    pub fn tree(&self, tree_id: &str) -> Result<TreeHandle, ProverError> {
        Ok(self.built(tree_id)?.tree.clone())
    }

    pub fn tree_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.trees.read().expect("tree lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Transform every user of the cohort, build the tree over the included
    /// ones and register it under `spec.tree_id`.
    pub fn cro_build(
        &self,
        spec: &TreeSpec,
        cohort: &CohortSpec,
        source: &dyn RecordSource,
        vk_ltr: &VerifyingKey,
        vk_mrp: &VerifyingKey,
    ) -> Result<BuildOutcome, ProverError> {
        cohort.validate()?;
        self.proving_key(&vk_ltr.circuit)?;
        self.proving_key(&vk_mrp.circuit)?;
        use crate::proofsys::Circuit as _;
        let ltr_id = LtrCircuit::new(spec.transform.clone()).id();
        let mrp_id = MrpCircuit::for_transform(spec.aggregator.clone(), &spec.transform).id();
        if ltr_id != vk_ltr.circuit {
            return Err(ProverError::UnknownCircuit(vk_ltr.circuit.clone()));
        }
        if mrp_id != vk_mrp.circuit {
            return Err(ProverError::UnknownCircuit(vk_mrp.circuit.clone()));
        }

        let mut users = BTreeMap::new();
        let mut by_slot: HashMap<u64, String> = HashMap::new();
        let mut leaves = Vec::new();
        for user in &cohort.all_users {
            let rec = source.fetch(user).map_err(|reason| ProverError::Acquisition { user: user.clone(), reason })?;
            let out = leaf_transform(&self.store, &spec.transform, spec.height, &rec.datum, &rec.user_salt, &rec.transform_salt)?;
            let pos = out.index.as_u64().expect("tree heights fit u64");
            if let Some(first) = by_slot.insert(pos, user.clone()) {
                return Err(ProverError::LeafCollision { first, second: user.clone(), index: pos });
            }
            users.insert(user.clone(), (out.h_raw, out.h_tau, out.h_leaf, pos));
            if cohort.included.contains(user) {
                leaves.push((out.index, out.leaf));
            }
        }

        let config = TreeConfig::new(spec.height, &spec.transform, &spec.aggregator);
        let tree = build_with_specs(leaves, config, spec.transform.clone(), spec.aggregator.clone())?;
        let root = tree.root().clone();
        let params = TreeParams {
            height: spec.height,
            default_leaf: tree.default_chain()[0].digest(),
            default_chain: tree.default_chain().iter().map(|n| n.digest()).collect(),
        };
        let publication =
            TreePublication { tree_id: spec.tree_id.clone(), root: root.digest(), vk_ltr: vk_ltr.clone(), vk_mrp: vk_mrp.clone(), params };
        let deliveries = users
            .iter()
            .map(|(u, (_, h_tau, _, _))| Delivery { user_id: u.clone(), tree_id: spec.tree_id.clone(), h_tau: *h_tau })
            .collect();
        let built = BuiltTree { tree, ltr_circuit: ltr_id, mrp_circuit: mrp_id, publication: publication.clone(), users };
        self.trees.write().expect("tree lock").insert(spec.tree_id.clone(), Arc::new(built));
        Ok(BuildOutcome { root, publication, deliveries })
    }

    /// Leaf and raw digests of a processed user, for bundle assembly.
    pub fn user_digests(&self, tree_id: &str, user: &str) -> Result<(Digest256, Digest256, Digest256), ProverError> {
        let built = self.built(tree_id)?;
        let (h_raw, h_tau, h_leaf, _) = built.users.get(user).ok_or(ProverError::NotFound)?;
        Ok((*h_raw, *h_tau, *h_leaf))
    }

    pub fn users(&self, tree_id: &str) -> Result<Vec<String>, ProverError> {
        Ok(self.built(tree_id)?.users.keys().cloned().collect())
    }

    /// Users whose leaf is occupied in the tree.
    pub fn included_users(&self, tree_id: &str) -> Result<BTreeSet<String>, ProverError> {
        let built = self.built(tree_id)?;
        let occupied: HashMap<u64, Digest256> = built.tree.occupied().map(|(p, leaf)| (p, leaf.digest())).collect();
        Ok(built.users.iter().filter(|(_, (_, _, h_leaf, pos))| occupied.get(pos) == Some(h_leaf)).map(|(u, _)| u.clone()).collect())
    }

    pub fn cro_ltr_prove(&self, tree_id: &str, h_raw: Digest256, h_tau: Digest256) -> Result<LtrResponse, ProverError> {
        let built = self.built(tree_id)?;
        let pk = self.proving_key(&built.ltr_circuit)?;
        let w = self.store.get(&WitnessKey::new(h_raw, h_tau, &built.ltr_circuit)).ok_or(ProverError::NotFound)?;
        let h_leaf = w.leaf.digest();
        let index = derive_leaf_index(&h_leaf, built.tree.height())?;
        let witness = Witness::Ltr { datum: w.datum, user_salt: w.user_salt, transform_salt: w.transform_salt };
        let artifact = prove_computed(&pk, &witness)?;
        Ok(LtrResponse { h_leaf, index, artifact })
    }

    pub fn cro_mrp_prove(&self, tree_id: &str, h_leaf: Digest256, index: &LeafIndex, nonce: &[u8]) -> Result<MrpProof, ProverError> {
        if nonce.len() != NONCE_LEN {
            return Err(ProverError::NonceLength(nonce.len()));
        }
        let built = self.built(tree_id)?;
        let tree = &built.tree;
        let height = tree.height();
        let derived = derive_leaf_index(&h_leaf, height)?;
        if &derived != index {
            return Err(ProverError::IndexMismatch {
                claimed: format!("{:?}", index.as_u64()),
                derived: format!("{:?}", derived.as_u64()),
            });
        }
        let pk = self.proving_key(&built.mrp_circuit)?;
        let path = index_to_path(index, height)?;
        let pos = index.as_u64().expect("tree heights fit u64");
        let path_nodes = tree.path_nodes(index)?;
        let siblings = tree.siblings_along_path(index)?;
        let mut hops = Vec::with_capacity(height as usize);
        for k in 0..height as usize {
            let bit = ((pos >> k) & 1) as u8;
            debug_assert_eq!(bit, path.bit_at_level(k));
            let (left, right) =
                if bit == 1 { (siblings[k].clone(), path_nodes[k].clone()) } else { (path_nodes[k].clone(), siblings[k].clone()) };
            hops.push(prove_computed(&pk, &Witness::Mrp { left, right, bit, nonce: nonce.to_vec() })?);
        }
        Ok(MrpProof { root: tree.root().digest(), hops, path })
    }

    /// LTR plus MRP for one user, as a single proof set.
    pub fn proof_set_for(&self, tree_id: &str, user: &str, nonce: &[u8]) -> Result<CsmtProofSet, ProverError> {
        let (h_raw, h_tau, _) = self.user_digests(tree_id, user)?;
        let ltr = self.cro_ltr_prove(tree_id, h_raw, h_tau)?;
        let mrp = self.cro_mrp_prove(tree_id, ltr.h_leaf, &ltr.index, nonce)?;
        Ok(CsmtProofSet { ltr: ltr.artifact, mrp_hops: mrp.hops, path: mrp.path, root_digest: mrp.root })
    }
}

/// Fresh verifier nonce.
pub fn fresh_nonce() -> Vec<u8> {
    let mut n = vec![0u8; NONCE_LEN];
    rand::rng().fill_bytes(&mut n);
    n
}
