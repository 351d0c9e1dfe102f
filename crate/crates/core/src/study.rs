//! Glue between the PHR, the CRO and verifiers: collision-aware tree builds,
//! the public bulletin, in-process verifier endpoints and audit bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Digest256;
use crate::phr::{PhrError, PhrStore};
use crate::proofsys::{KeyPair, VerifyingKey, OUTPUT};
use crate::prover::{BuildOutcome, CohortSpec, Cro, LtrResponse, MrpProof, ProverError, TreePublication, TreeSpec};
use crate::verifier::{AuditBundle, EndpointError, IncludedTuple, VerifierEndpoints};

pub const DEFAULT_ROTATIONS: usize = 8;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study `{0}` is already published")]
    AlreadyPublished(String),
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("leaf collisions persisted after {0} salt rotations")]
    Collisions(usize),
    #[error(transparent)]
    Prover(#[from] ProverError),
    #[error(transparent)]
    Phr(#[from] PhrError),
}

/// One tree to build: its circuits, height and cohort.
#[derive(Clone, Debug)]
pub struct TreePlan {
    pub spec: TreeSpec,
    pub cohort: CohortSpec,
}

#[derive(Clone, Debug)]
pub struct BuiltTree {
    pub outcome: BuildOutcome,
    pub ltr: KeyPair,
    pub mrp: KeyPair,
}

/// Build every planned tree. A leaf-index collision rotates the second
/// user's τ in the PHR and restarts all builds, since τ is shared across trees.
pub fn build_trees(
    cro: &Cro,
    phr: &mut PhrStore,
    plans: &[TreePlan],
    lambda: u32,
    seed: &[u8],
    max_rotations: usize,
) -> Result<Vec<BuiltTree>, StudyError> {
    let mut rng = rand::rng();
    for _ in 0..=max_rotations {
        let mut built = Vec::with_capacity(plans.len());
        let mut collided = None;
        for plan in plans {
            let (ltr, mrp) = cro.setup_circuits(&plan.spec, lambda, seed)?;
            match cro.cro_build(&plan.spec, &plan.cohort, phr, &ltr.vk, &mrp.vk) {
                Ok(outcome) => built.push(BuiltTree { outcome, ltr, mrp }),
                Err(ProverError::LeafCollision { second, .. }) => {
                    collided = Some(second);
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        match collided {
            None => return Ok(built),
            Some(user) => {
                phr.rotate_transform_salt(&user, &mut rng)?;
            }
        }
    }
    Err(StudyError::Collisions(max_rotations))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BulletinRecord {
    pub study_id: String,
    pub roots: Vec<(String, Digest256)>,
    /// Fingerprints of every verifying key the study relies on.
    pub vk_ids: Vec<Digest256>,
    pub phr_root: Digest256,
    pub timestamp: u64,
}

impl BulletinRecord {
    pub fn new(study_id: &str, trees: &[TreePublication], extra_vks: &[VerifyingKey], phr_root: Digest256) -> Self {
        let mut vk_ids: Vec<Digest256> = Vec::new();
        for t in trees {
            for vk in [&t.vk_ltr, &t.vk_mrp] {
                if !vk_ids.contains(&vk.fingerprint()) {
                    vk_ids.push(vk.fingerprint());
                }
            }
        }
        vk_ids.extend(extra_vks.iter().map(VerifyingKey::fingerprint));
        BulletinRecord {
            study_id: study_id.to_string(),
            roots: trees.iter().map(|t| (t.tree_id.clone(), t.root)).collect(),
            vk_ids,
            phr_root,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }
}

/// Append-only public record of published studies.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Bulletin {
    records: Vec<BulletinRecord>,
}

impl Bulletin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, record: BulletinRecord) -> Result<(), StudyError> {
        if self.get(&record.study_id).is_some() {
            return Err(StudyError::AlreadyPublished(record.study_id));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, study_id: &str) -> Option<&BulletinRecord> {
        self.records.iter().find(|r| r.study_id == study_id)
    }

    pub fn records(&self) -> &[BulletinRecord] {
        &self.records
    }
}

/// Verifier endpoints served directly by in-process PHR and CRO state.
pub struct LocalEndpoints<'a> {
    pub cro: &'a Cro,
    pub phr: &'a PhrStore,
}

fn rejected(e: impl ToString) -> EndpointError {
    EndpointError::Rejected(e.to_string())
}

impl VerifierEndpoints for LocalEndpoints<'_> {
    fn publication(&self, tree_id: &str) -> Result<TreePublication, EndpointError> {
        self.cro.publication(tree_id).map_err(rejected)
    }

    fn phr_raw_digest(&self, user_id: &str) -> Result<Digest256, EndpointError> {
        self.phr.entry(user_id).map(|e| e.h_raw).ok_or_else(|| rejected(format!("unknown PHR user `{user_id}`")))
    }

    fn delivered_tau_digest(&self, tree_id: &str, user_id: &str) -> Result<Digest256, EndpointError> {
        self.cro.user_digests(tree_id, user_id).map(|(_, h_tau, _)| h_tau).map_err(rejected)
    }

    fn ltr_prove(&self, tree_id: &str, h_raw: Digest256, h_tau: Digest256) -> Result<LtrResponse, EndpointError> {
        self.cro.cro_ltr_prove(tree_id, h_raw, h_tau).map_err(rejected)
    }

    fn mrp_prove(&self, tree_id: &str, h_leaf: Digest256, resp: &LtrResponse, nonce: &[u8]) -> Result<MrpProof, EndpointError> {
        self.cro.cro_mrp_prove(tree_id, h_leaf, &resp.index, nonce).map_err(rejected)
    }
}

/// Assemble the exclusivity-audit bundle for one tree: proof sets for every
/// included user under `nonce`, their PHR tuples and paths, and the declared
/// non-default leaves.
pub fn audit_bundle(
    cro: &Cro,
    phr: &PhrStore,
    tree_id: &str,
    included: &BTreeSet<String>,
    nonce: &[u8],
) -> Result<AuditBundle, StudyError> {
    let publication = cro.publication(tree_id)?;
    let mut proof_sets = BTreeMap::new();
    let mut included_hashes = Vec::new();
    let mut nondefault_leaves = BTreeSet::new();
    for user in included {
        let set = cro.proof_set_for(tree_id, user, nonce)?;
        let (h_raw, h_tau, _) = cro.user_digests(tree_id, user)?;
        if let Some(h_leaf) = set.ltr.get(OUTPUT) {
            nondefault_leaves.insert(h_leaf);
        }
        included_hashes.push(IncludedTuple { h_raw, h_tau, phr_path: phr.phr_prove_membership(&h_raw, &h_tau)? });
        proof_sets.insert(user.clone(), set);
    }
    Ok(AuditBundle { publication, included_hashes, phr_root: phr.root(), nondefault_leaves, proof_sets, nonce: nonce.to_vec() })
}
