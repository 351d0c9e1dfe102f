//! Public verification: LTR checks, per-hop MRP checks, full inclusion or
//! exclusion verification, the remote verifier flow and the data-exclusivity
//! audit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{derive_leaf_index, hash_bit, hash_nonce, index_to_path, Digest256};
use crate::phr::{phr_leaf, phr_verify_membership, MerkleAuditPath};
use crate::proofsys::{
    verify, FailureReason, ProofArtifact, VerificationOutcome, VerifyingKey, BIT, INPUT1, INPUT2, LEFT_INPUT, NONCE, OUTPUT, PARENT,
    RIGHT_INPUT,
};
use crate::prover::{fresh_nonce, CsmtProofSet, LtrResponse, MrpProof, TreePublication};

pub const DEFAULT_RETRIES: usize = 3;

pub fn ltr_verify(
    vk: &VerifyingKey,
    artifact: &ProofArtifact,
    h_raw: &Digest256,
    h_tau: &Digest256,
    h_leaf: &Digest256,
) -> VerificationOutcome {
    let zk = verify(vk, artifact);
    if !zk.flag {
        return zk;
    }
    let fields_ok = artifact.get(INPUT1) == Some(*h_raw) && artifact.get(INPUT2) == Some(*h_tau) && artifact.get(OUTPUT) == Some(*h_leaf);
    if fields_ok {
        VerificationOutcome::PASS
    } else {
        VerificationOutcome::fail(FailureReason::FieldMismatch)
    }
}

pub fn mrp_hop_verify(
    vk: &VerifyingKey,
    hop: &ProofArtifact,
    h_left: &Digest256,
    h_right: &Digest256,
    h_bit: &Digest256,
    h_nonce: &Digest256,
) -> VerificationOutcome {
    let zk = verify(vk, hop);
    if !zk.flag {
        return zk;
    }
    let fields_ok = hop.get(LEFT_INPUT) == Some(*h_left)
        && hop.get(RIGHT_INPUT) == Some(*h_right)
        && hop.get(BIT) == Some(*h_bit)
        && hop.get(NONCE) == Some(*h_nonce);
    if fields_ok {
        VerificationOutcome::PASS
    } else {
        VerificationOutcome::fail(FailureReason::FieldMismatch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "stage", content = "level")]
pub enum Stage {
    Lookup,
    Transport,
    Ltr,
    LeafIndex,
    Path,
    Hop(usize),
    Root,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Lookup => f.write_str("lookup"),
            Stage::Transport => f.write_str("transport"),
            Stage::Ltr => f.write_str("ltr"),
            Stage::LeafIndex => f.write_str("leaf-index"),
            Stage::Path => f.write_str("path"),
            Stage::Hop(k) => write!(f, "hop-{k}"),
            Stage::Root => f.write_str("root"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "verdict")]
pub enum InclusionVerdict {
    /// The user's leaf sits at its derived index under the published root.
    Included,
    /// The user's derived index holds the default leaf under the published root.
    Excluded,
    Failed {
        stage: Stage,
        reason: String,
    },
}

impl InclusionVerdict {
    pub fn is_verified(&self) -> bool {
        !matches!(self, InclusionVerdict::Failed { .. })
    }

    fn failed(stage: Stage, reason: impl Into<String>) -> Self {
        InclusionVerdict::Failed { stage, reason: reason.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCheck {
    pub stage: String,
    pub passed: bool,
}

/// Result of `ver_inc` with the stages that were evaluated, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerIncResult {
    pub verdict: InclusionVerdict,
    pub stages: Vec<StageCheck>,
}

fn reason_text(o: &VerificationOutcome) -> String {
    match o.failure_reason {
        Some(FailureReason::BadBinding) => "bad-binding".into(),
        Some(FailureReason::FieldMismatch) => "field-mismatch".into(),
        Some(FailureReason::UnknownCircuit) => "unknown-circuit".into(),
        None => "ok".into(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ver_inc(
    h_raw: &Digest256,
    h_tau: &Digest256,
    h_leaf: &Digest256,
    set: &CsmtProofSet,
    h_root: &Digest256,
    h_nonce: &Digest256,
    vk_ltr: &VerifyingKey,
    vk_mrp: &VerifyingKey,
    default_leaf: &Digest256,
) -> VerIncResult {
    let mut stages = Vec::new();
    let mut record = |stage: Stage, passed: bool| stages.push(StageCheck { stage: stage.to_string(), passed });

    let verdict = (|| {
        let ltr = ltr_verify(vk_ltr, &set.ltr, h_raw, h_tau, h_leaf);
        record(Stage::Ltr, ltr.flag);
        if !ltr.flag {
            return InclusionVerdict::failed(Stage::Ltr, reason_text(&ltr));
        }

        let height = set.mrp_hops.len();
        let derived = u16::try_from(height)
            .ok()
            .and_then(|k| derive_leaf_index(h_leaf, k).ok())
            .and_then(|idx| index_to_path(&idx, idx.height()).ok());
        let path_ok = derived.as_ref() == Some(&set.path);
        record(Stage::Path, path_ok);
        if !path_ok {
            return InclusionVerdict::failed(Stage::Path, "path does not match the index derived from the leaf digest");
        }

        let h0 = &set.mrp_hops[0];
        let side0 = if set.path.bit_at_level(0) == 1 { RIGHT_INPUT } else { LEFT_INPUT };
        let start = h0.get(side0);
        let excluded = if start == Some(*h_leaf) {
            false
        } else if start == Some(*default_leaf) {
            true
        } else {
            record(Stage::Hop(0), false);
            return InclusionVerdict::failed(Stage::Hop(0), "hop 0 starts from neither the leaf nor the default leaf");
        };

        let mut cur = if excluded { *default_leaf } else { *h_leaf };
        for (k, hop) in set.mrp_hops.iter().enumerate() {
            let bit = set.path.bit_at_level(k);
            let other = if bit == 1 { hop.get(LEFT_INPUT) } else { hop.get(RIGHT_INPUT) };
            let Some(other) = other else {
                record(Stage::Hop(k), false);
                return InclusionVerdict::failed(Stage::Hop(k), "missing sibling field");
            };
            let (l, r) = if bit == 1 { (other, cur) } else { (cur, other) };
            let o = mrp_hop_verify(vk_mrp, hop, &l, &r, &hash_bit(bit), h_nonce);
            record(Stage::Hop(k), o.flag);
            if !o.flag {
                return InclusionVerdict::failed(Stage::Hop(k), reason_text(&o));
            }
            let Some(parent) = hop.get(PARENT) else {
                return InclusionVerdict::failed(Stage::Hop(k), "missing parent field");
            };
            cur = parent;
        }

        let root_ok = cur == *h_root && set.root_digest == *h_root;
        record(Stage::Root, root_ok);
        if !root_ok {
            return InclusionVerdict::failed(Stage::Root, "hashes not match");
        }
        if excluded {
            InclusionVerdict::Excluded
        } else {
            InclusionVerdict::Included
        }
    })();
    VerIncResult { verdict, stages }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("rejected: {0}")]
    Rejected(String),
}

/// Remote services a verifier talks to: the bulletin, the PHR, the user's own
/// delivery record, and the CRO's two prover APIs.
pub trait VerifierEndpoints {
    fn publication(&self, tree_id: &str) -> Result<TreePublication, EndpointError>;
    fn phr_raw_digest(&self, user_id: &str) -> Result<Digest256, EndpointError>;
    fn delivered_tau_digest(&self, tree_id: &str, user_id: &str) -> Result<Digest256, EndpointError>;
    fn ltr_prove(&self, tree_id: &str, h_raw: Digest256, h_tau: Digest256) -> Result<LtrResponse, EndpointError>;
    fn mrp_prove(&self, tree_id: &str, h_leaf: Digest256, resp: &LtrResponse, nonce: &[u8]) -> Result<MrpProof, EndpointError>;
}

fn with_retries<T>(retries: usize, mut f: impl FnMut() -> Result<T, EndpointError>) -> Result<T, EndpointError> {
    let mut last = None;
    for _ in 0..retries.max(1) {
        match f() {
            Ok(v) => return Ok(v),
            Err(EndpointError::Transport(e)) => last = Some(EndpointError::Transport(e)),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Everything gathered during one online verification, enough to repeat the
/// check offline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionSession {
    pub user_id: String,
    pub tree_id: String,
    pub h_raw: Digest256,
    pub h_tau: Digest256,
    #[serde(with = "hex_vec")]
    pub nonce: Vec<u8>,
    pub ltr: LtrResponse,
    pub mrp: MrpProof,
}

/// Machine-readable verification report. Contains no nonce or clock values so
/// that offline re-verification reproduces it byte for byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub user_id: String,
    pub tree_id: String,
    pub root: Digest256,
    pub h_leaf: Option<Digest256>,
    pub verdict: InclusionVerdict,
    pub stages: Vec<StageCheck>,
}

impl InclusionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Check a recorded session against a publication.
pub fn verify_session(session: &InclusionSession, publication: &TreePublication) -> InclusionReport {
    let mut report = InclusionReport {
        user_id: session.user_id.clone(),
        tree_id: session.tree_id.clone(),
        root: publication.root,
        h_leaf: Some(session.ltr.h_leaf),
        verdict: InclusionVerdict::Included,
        stages: Vec::new(),
    };
    let derived = derive_leaf_index(&session.ltr.h_leaf, publication.params.height).ok();
    let index_ok = derived == Some(session.ltr.index)
        && index_to_path(&session.ltr.index, publication.params.height).ok().as_ref() == Some(&session.mrp.path);
    report.stages.push(StageCheck { stage: Stage::LeafIndex.to_string(), passed: index_ok });
    if !index_ok {
        report.verdict = InclusionVerdict::failed(Stage::LeafIndex, "MRP path does not belong to the LTR leaf");
        return report;
    }
    let set = CsmtProofSet {
        ltr: session.ltr.artifact.clone(),
        mrp_hops: session.mrp.hops.clone(),
        path: session.mrp.path.clone(),
        root_digest: session.mrp.root,
    };
    let r = ver_inc(
        &session.h_raw,
        &session.h_tau,
        &session.ltr.h_leaf,
        &set,
        &publication.root,
        &hash_nonce(&session.nonce),
        &publication.vk_ltr,
        &publication.vk_mrp,
        &publication.params.default_leaf,
    );
    report.stages.extend(r.stages);
    report.verdict = r.verdict;
    report
}

#[derive(Clone, Debug)]
pub struct CosmeticOutcome {
    pub report: InclusionReport,
    pub session: Option<InclusionSession>,
}

impl CosmeticOutcome {
    pub fn outcome(&self) -> VerificationOutcome {
        if self.report.verdict.is_verified() {
            VerificationOutcome::PASS
        } else {
            VerificationOutcome::fail(FailureReason::FieldMismatch)
        }
    }
}

/// Online verification of one user against a published tree, with a fresh nonce.
pub fn cosmetic_verifier(user_id: &str, tree_id: &str, endpoints: &dyn VerifierEndpoints, retries: usize) -> CosmeticOutcome {
    cosmetic_verifier_with_nonce(user_id, tree_id, endpoints, retries, &fresh_nonce())
}

pub fn cosmetic_verifier_with_nonce(
    user_id: &str,
    tree_id: &str,
    endpoints: &dyn VerifierEndpoints,
    retries: usize,
    nonce: &[u8],
) -> CosmeticOutcome {
    let fail = |stage: Stage, reason: String, root: Digest256| CosmeticOutcome {
        report: InclusionReport {
            user_id: user_id.to_string(),
            tree_id: tree_id.to_string(),
            root,
            h_leaf: None,
            verdict: InclusionVerdict::Failed { stage, reason },
            stages: vec![StageCheck { stage: stage.to_string(), passed: false }],
        },
        session: None,
    };
    let stage_of = |e: &EndpointError| match e {
        EndpointError::Transport(_) => Stage::Transport,
        EndpointError::Rejected(_) => Stage::Lookup,
    };

    let publication = match with_retries(retries, || endpoints.publication(tree_id)) {
        Ok(p) => p,
        Err(e) => return fail(stage_of(&e), e.to_string(), Digest256::ZERO),
    };
    let root = publication.root;
    let h_raw = match with_retries(retries, || endpoints.phr_raw_digest(user_id)) {
        Ok(v) => v,
        Err(e) => return fail(stage_of(&e), e.to_string(), root),
    };
    let h_tau = match with_retries(retries, || endpoints.delivered_tau_digest(tree_id, user_id)) {
        Ok(v) => v,
        Err(e) => return fail(stage_of(&e), e.to_string(), root),
    };
    let ltr = match with_retries(retries, || endpoints.ltr_prove(tree_id, h_raw, h_tau)) {
        Ok(v) => v,
        Err(e) => return fail(stage_of(&e), e.to_string(), root),
    };
    let mrp = match with_retries(retries, || endpoints.mrp_prove(tree_id, ltr.h_leaf, &ltr, nonce)) {
        Ok(v) => v,
        Err(e) => return fail(stage_of(&e), e.to_string(), root),
    };
    let session =
        InclusionSession { user_id: user_id.to_string(), tree_id: tree_id.to_string(), h_raw, h_tau, nonce: nonce.to_vec(), ltr, mrp };
    let report = verify_session(&session, &publication);
    CosmeticOutcome { report, session: Some(session) }
}

/// An `(H(δ,μ), H(τ))` tuple the CRO claims was included, with its PHR path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncludedTuple {
    pub h_raw: Digest256,
    pub h_tau: Digest256,
    pub phr_path: MerkleAuditPath,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub publication: TreePublication,
    pub included_hashes: Vec<IncludedTuple>,
    pub phr_root: Digest256,
    /// Leaf digests the CRO declares as non-default.
    pub nondefault_leaves: BTreeSet<Digest256>,
    pub proof_sets: BTreeMap<String, CsmtProofSet>,
    #[serde(with = "hex_vec")]
    pub nonce: Vec<u8>,
}

pub const SPURIOUS_LEAF: &str = "spurious leaf existence detected";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "result")]
pub enum AuditResult {
    Pass {
        leaves: usize,
    },
    /// A leaf or subtree is not backed by a PHR-registered included record.
    SpuriousLeaf {
        detail: String,
    },
    /// A claimed non-default leaf has no proof set.
    IncompleteBundle {
        detail: String,
    },
}

impl AuditResult {
    pub fn passed(&self) -> bool {
        matches!(self, AuditResult::Pass { .. })
    }

    pub fn message(&self) -> String {
        match self {
            AuditResult::Pass { leaves } => format!("data exclusivity verified over {leaves} leaves"),
            AuditResult::SpuriousLeaf { detail } => format!("{SPURIOUS_LEAF}: {detail}"),
            AuditResult::IncompleteBundle { detail } => format!("incomplete bundle: {detail}"),
        }
    }
}

fn spurious(detail: impl Into<String>) -> AuditResult {
    AuditResult::SpuriousLeaf { detail: detail.into() }
}

pub fn verify_data_exclusivity(bundle: &AuditBundle) -> AuditResult {
    let publication = &bundle.publication;
    let params = &publication.params;
    let height = params.height as usize;
    if params.default_chain.len() != height + 1 {
        return spurious("default chain does not match the tree height");
    }
    let h_nonce = hash_nonce(&bundle.nonce);

    // every claimed leaf needs a proof set
    let proven: BTreeSet<Digest256> = bundle.proof_sets.values().filter_map(|s| s.ltr.get(OUTPUT)).collect();
    if let Some(missing) = bundle.nondefault_leaves.iter().find(|d| !proven.contains(d)) {
        return AuditResult::IncompleteBundle { detail: format!("no proof set for claimed leaf {missing}") };
    }

    let tuples: HashMap<(Digest256, Digest256), &MerkleAuditPath> =
        bundle.included_hashes.iter().map(|t| ((t.h_raw, t.h_tau), &t.phr_path)).collect();

    // NodesLTR: leaves whose LTR proof is backed by a PHR-registered tuple
    let mut nodes_ltr = BTreeSet::new();
    // (level, position) -> (digest, accounted leaves below)
    let mut nodes: BTreeMap<(usize, u64), (Digest256, BTreeSet<Digest256>)> = BTreeMap::new();
    let mut siblings: BTreeMap<(usize, u64), Digest256> = BTreeMap::new();

    for (user, set) in &bundle.proof_sets {
        let (Some(h_raw), Some(h_tau), Some(h_leaf)) = (set.ltr.get(INPUT1), set.ltr.get(INPUT2), set.ltr.get(OUTPUT)) else {
            return spurious(format!("proof set for `{user}` lacks LTR fields"));
        };
        let Some(path) = tuples.get(&(h_raw, h_tau)) else {
            return spurious(format!("LTR tuple of `{user}` is not among the included PHR tuples"));
        };
        if path.leaf_digest != phr_leaf(&h_raw, &h_tau) || !phr_verify_membership(&bundle.phr_root, path) {
            return spurious(format!("LTR tuple of `{user}` is not registered in the PHR"));
        }
        let r = ver_inc(
            &h_raw,
            &h_tau,
            &h_leaf,
            set,
            &publication.root,
            &h_nonce,
            &publication.vk_ltr,
            &publication.vk_mrp,
            &params.default_leaf,
        );
        match r.verdict {
            InclusionVerdict::Included => {}
            InclusionVerdict::Excluded => return spurious(format!("proof set of `{user}` shows a default leaf")),
            InclusionVerdict::Failed { stage, .. } => return spurious(format!("proof set of `{user}` fails at {stage}")),
        }
        if set.mrp_hops.len() != height {
            return spurious(format!("proof set of `{user}` has the wrong height"));
        }
        nodes_ltr.insert(h_leaf);

        let pos = derive_leaf_index(&h_leaf, params.height).ok().and_then(|i| i.as_u64()).unwrap_or(u64::MAX);
        let mut cur = h_leaf;
        for k in 0..=height {
            let key = (k, pos >> k);
            let entry = nodes.entry(key).or_insert_with(|| (cur, BTreeSet::new()));
            if entry.0 != cur {
                return spurious(format!("two proof sets disagree on node ({}, {})", key.0, key.1));
            }
            entry.1.insert(h_leaf);
            if k < height {
                let hop = &set.mrp_hops[k];
                let bit = set.path.bit_at_level(k);
                let sib = if bit == 1 { hop.get(LEFT_INPUT) } else { hop.get(RIGHT_INPUT) };
                let sib_key = (k, (pos >> k) ^ 1);
                if let Some(sib) = sib {
                    if let Some(prev) = siblings.insert(sib_key, sib) {
                        if prev != sib {
                            return spurious(format!("two proof sets disagree on node ({}, {})", sib_key.0, sib_key.1));
                        }
                    }
                }
                cur = hop.get(PARENT).unwrap_or(Digest256::ZERO);
            }
        }
    }

    if bundle.proof_sets.is_empty() && publication.root != params.default_chain[height] {
        return spurious("root is not the empty-tree root but no leaves are proven");
    }

    // leaves reached by the paths must be exactly the LTR-backed leaves, and
    // exactly what the CRO declared
    let reached: BTreeSet<Digest256> = nodes.iter().filter(|((k, _), _)| *k == 0).map(|(_, (d, _))| *d).collect();
    if reached != nodes_ltr {
        return spurious("path leaves differ from the LTR-backed leaves");
    }
    if nodes_ltr != bundle.nondefault_leaves {
        return spurious("declared non-default leaves differ from the proven leaves");
    }

    // a node off every proven path has no accounted leaf below it, so it must
    // be an all-default subtree
    for ((k, p), digest) in &siblings {
        match nodes.get(&(*k, *p)) {
            Some((d, leaves)) => {
                if d != digest {
                    return spurious(format!("node ({k}, {p}) has inconsistent digests"));
                }
                if leaves.is_empty() {
                    return spurious(format!("node ({k}, {p}) has no leaf descendant"));
                }
            }
            None if *digest == params.default_chain[*k] => {}
            None => return spurious(format!("node ({k}, {p}) hides a subtree with no accounted leaf")),
        }
    }
    AuditResult::Pass { leaves: nodes_ltr.len() }
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
