//! The three statistical pipelines: two-sample KS maximum gap, logistic
//! likelihood-ratio statistic and classification accuracy. Each commits its
//! per-cohort reductions to CSMT roots and proves the final arithmetic with a
//! post-aggregation circuit over those roots.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_fixed, hash_fields, Digest256, Field, FixedPoint};
use crate::phr::PhrStore;
use crate::proofsys::{
    prove_computed, setup, verify, Circuit, CircuitId, CircuitKind, KeyPair, ProofArtifact, ProofError, Publics, VerifyingKey, Witness,
    INPUT1, INPUT2, OUTPUT,
};
use crate::prover::{CohortSpec, Cro, RecordSource, TreePublication, TreeSpec};
use crate::study::{build_trees, BuiltTree, StudyError, TreePlan};
use crate::transforms::{AggregatorSpec, NodeValue, TransformError, TransformSpec};
use crate::verifier::InclusionReport;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("cohort size is zero")]
    DivisionByZero,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("root payload entry {0} is not a whole count")]
    NotACount(i64),
    #[error("negative count {0}")]
    NegativeCount(i64),
    #[error("statistic overflow")]
    Overflow,
    #[error("user `{user}` rejected before build: {reason}")]
    Rejected { user: String, reason: String },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Proof(#[from] ProofError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StatKind {
    KsMaxGap,
    Lrt,
    Accuracy,
}

impl StatKind {
    fn tag(self) -> &'static str {
        match self {
            StatKind::KsMaxGap => "ks-max-gap",
            StatKind::Lrt => "lrt",
            StatKind::Accuracy => "accuracy",
        }
    }
}

/// Integer count carried by a fixed-point payload entry.
fn whole_count(f: FixedPoint) -> Result<i64, StatsError> {
    let n = f.as_whole().ok_or(StatsError::NotACount(f.raw))?;
    if n < 0 {
        return Err(StatsError::NegativeCount(n));
    }
    Ok(n)
}

fn cdf(counts: &[i64], scale: u8) -> Result<Vec<i128>, StatsError> {
    if let Some(&c) = counts.iter().find(|&&c| c < 0) {
        return Err(StatsError::NegativeCount(c));
    }
    let n: i128 = counts.iter().map(|&c| c as i128).sum();
    if n == 0 {
        return Err(StatsError::DivisionByZero);
    }
    let mut cum = 0i128;
    Ok(counts
        .iter()
        .map(|&c| {
            cum += c as i128;
            (cum << scale) / n
        })
        .collect())
}

/// ζ = max_j |F_A[j] − F_B[j]| with each CDF floored at the working scale.
pub fn max_absolute_gap(a: &[i64], b: &[i64], scale: u8) -> Result<FixedPoint, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Shape(format!("count vectors of length {} and {}", a.len(), b.len())));
    }
    let (fa, fb) = (cdf(a, scale)?, cdf(b, scale)?);
    let gap = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).max().unwrap_or(0);
    Ok(FixedPoint { raw: i64::try_from(gap).map_err(|_| StatsError::Overflow)?, scale })
}

/// ζ = −2 (Ψ^r − Ψ^f), exact on the fixed-point integers.
pub fn lrt_statistic(psi_full: FixedPoint, psi_reduced: FixedPoint) -> Result<FixedPoint, StatsError> {
    if psi_full.scale != psi_reduced.scale {
        return Err(StatsError::Shape("log-likelihood scales differ".into()));
    }
    let raw = psi_reduced.raw.checked_sub(psi_full.raw).and_then(|d| d.checked_mul(-2)).ok_or(StatsError::Overflow)?;
    Ok(FixedPoint { raw, scale: psi_full.scale })
}

/// correct · 2^s / n, floored.
pub fn accuracy_statistic(n: i64, correct: i64, scale: u8) -> Result<FixedPoint, StatsError> {
    if n == 0 {
        return Err(StatsError::DivisionByZero);
    }
    if n < 0 || correct < 0 {
        return Err(StatsError::NegativeCount(n.min(correct)));
    }
    let raw = ((correct as i128) << scale) / n as i128;
    Ok(FixedPoint { raw: i64::try_from(raw).map_err(|_| StatsError::Overflow)?, scale })
}

pub fn statistic_digest(zeta: FixedPoint) -> Digest256 {
    hash_fields(&[Field::Bytes(b"statistic"), Field::Fixed(zeta)])
}

/// Post-aggregation circuit: two committed roots ↦ ζ.
#[derive(Clone, Debug)]
pub struct PostCircuit {
    kind: StatKind,
    widths: [usize; 2],
    scale: u8,
}

impl PostCircuit {
    pub fn new(kind: StatKind, widths: [usize; 2], scale: u8) -> Self {
        PostCircuit { kind, widths, scale }
    }

    pub fn evaluate(&self, inputs: &[NodeValue]) -> Result<FixedPoint, StatsError> {
        if inputs.len() != 2 {
            return Err(StatsError::Shape(format!("{} roots given, 2 expected", inputs.len())));
        }
        for (node, &w) in inputs.iter().zip(&self.widths) {
            if node.payload().len() != w || node.payload().iter().any(|f| f.scale != self.scale) {
                return Err(StatsError::Shape("root payload does not fit the circuit".into()));
            }
            if !node.is_consistent() {
                return Err(StatsError::Shape("root payload does not match its digest".into()));
            }
        }
        let (a, b) = (inputs[0].payload(), inputs[1].payload());
        match self.kind {
            StatKind::KsMaxGap => {
                let ca = a.iter().map(|&f| whole_count(f)).collect::<Result<Vec<_>, _>>()?;
                let cb = b.iter().map(|&f| whole_count(f)).collect::<Result<Vec<_>, _>>()?;
                max_absolute_gap(&ca, &cb, self.scale)
            }
            StatKind::Lrt => lrt_statistic(a[0], b[0]),
            StatKind::Accuracy => accuracy_statistic(whole_count(a[0])?, whole_count(b[0])?, self.scale),
        }
    }
}

impl Circuit for PostCircuit {
    fn id(&self) -> CircuitId {
        let widths: Vec<[u8; 8]> = self.widths.iter().map(|w| (*w as u64).to_le_bytes()).collect();
        CircuitId {
            kind: CircuitKind::Post,
            spec_id: self.kind.tag().to_string(),
            params_digest: hash_fields(&[Field::Bytes(self.kind.tag().as_bytes()), Field::Bytes(&widths[0]), Field::Bytes(&widths[1])]),
            scale: self.scale,
        }
    }

    fn execute(&self, witness: &Witness) -> Result<Publics, ProofError> {
        let Witness::Post { inputs } = witness else {
            return Err(ProofError::KeyKind(CircuitKind::Post));
        };
        let zeta = self.evaluate(inputs).map_err(|e| ProofError::Circuit(e.to_string()))?;
        Ok(Publics::new([(INPUT1, inputs[0].digest()), (INPUT2, inputs[1].digest()), (OUTPUT, statistic_digest(zeta))]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticResult {
    pub kind: StatKind,
    pub zeta: FixedPoint,
    pub decoded: f64,
    pub scale: u8,
    pub root_digests: Vec<Digest256>,
    /// Root payloads the statistic was computed from; their digests are the roots.
    pub root_values: Vec<NodeValue>,
    pub post_proof: ProofArtifact,
}

#[derive(Clone, Debug)]
pub struct PipelineParams {
    pub height: u16,
    pub lambda: u32,
    pub seed: Vec<u8>,
    pub max_rotations: usize,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub study_id: String,
    pub result: StatisticResult,
    pub plans: Vec<TreePlan>,
    pub trees: Vec<BuiltTree>,
    pub post: KeyPair,
}

impl PipelineRun {
    pub fn publications(&self) -> Vec<TreePublication> {
        self.trees.iter().map(|t| t.outcome.publication.clone()).collect()
    }
}

fn check_records(phr: &PhrStore, users: &[String], spec: &TransformSpec) -> Result<(), StatsError> {
    for u in users {
        let rec = phr.fetch(u).map_err(|reason| StatsError::Rejected { user: u.clone(), reason })?;
        spec.evaluate(&rec.datum).map_err(|e| StatsError::Rejected { user: u.clone(), reason: e.to_string() })?;
    }
    Ok(())
}

fn union(a: &[String], b: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    a.iter().chain(b).filter(|u| seen.insert(u.as_str())).cloned().collect()
}

fn run(
    cro: &Cro,
    phr: &mut PhrStore,
    study_id: &str,
    kind: StatKind,
    plans: Vec<TreePlan>,
    params: &PipelineParams,
) -> Result<PipelineRun, StatsError> {
    let scale = plans[0].spec.transform.scale;
    for p in &plans {
        check_records(phr, &p.cohort.all_users, &p.spec.transform)?;
    }
    let trees = build_trees(cro, phr, &plans, params.lambda, &params.seed, params.max_rotations)?;
    let widths = [plans[0].spec.transform.output_dim(), plans[1].spec.transform.output_dim()];
    let post = setup(Arc::new(PostCircuit::new(kind, widths, scale)), params.lambda, &params.seed)?;
    let roots: Vec<NodeValue> = trees.iter().map(|t| t.outcome.root.clone()).collect();
    let zeta = PostCircuit::new(kind, widths, scale).evaluate(&roots)?;
    let post_proof = prove_computed(&post.pk, &Witness::Post { inputs: roots.clone() })?;
    let result = StatisticResult {
        kind,
        zeta,
        decoded: decode_fixed(zeta),
        scale,
        root_digests: roots.iter().map(NodeValue::digest).collect(),
        root_values: roots,
        post_proof,
    };
    Ok(PipelineRun { study_id: study_id.to_string(), result, plans, trees, post })
}

/// Default KS binning for CAG repeat counts: 12 bins of width 11 over [0, 132].
pub fn hd_ks_edges() -> Vec<f64> {
    (0..=12).map(|i| f64::from(i) * 11.0).collect()
}

/// KS maximum gap between two cohorts of scalar records. Each tree transforms
/// the users of both cohorts so that either cohort can prove exclusion from
/// the other's tree.
#[allow(clippy::too_many_arguments)]
pub fn ks_two_sample(
    cro: &Cro,
    phr: &mut PhrStore,
    study_id: &str,
    cohort_a: &[String],
    cohort_b: &[String],
    edges: &[f64],
    scale: u8,
    params: &PipelineParams,
) -> Result<PipelineRun, StatsError> {
    if cohort_a.is_empty() || cohort_b.is_empty() {
        return Err(StatsError::DivisionByZero);
    }
    let transform = TransformSpec::bincount(format!("{study_id}/bincount"), edges.to_vec(), scale)?;
    let all = union(cohort_a, cohort_b);
    let plan = |tree: &str, included: &[String]| TreePlan {
        spec: TreeSpec {
            tree_id: format!("{study_id}/{tree}"),
            transform: transform.clone(),
            aggregator: AggregatorSpec::sum("sum"),
            height: params.height,
        },
        cohort: CohortSpec { all_users: all.clone(), included: included.iter().cloned().collect() },
    };
    let plans = vec![plan("A", cohort_a), plan("B", cohort_b)];
    run(cro, phr, study_id, StatKind::KsMaxGap, plans, params)
}

/// LRT statistic over one cohort scored by a full and a reduced model. The
/// reduced model is given at full width with zeros for dropped features.
#[allow(clippy::too_many_arguments)]
pub fn lrt(
    cro: &Cro,
    phr: &mut PhrStore,
    study_id: &str,
    cohort: &CohortSpec,
    beta_full: &[f64],
    beta_reduced: &[f64],
    scale: u8,
    params: &PipelineParams,
) -> Result<PipelineRun, StatsError> {
    if beta_full.len() != beta_reduced.len() {
        return Err(StatsError::Shape(format!("full model has {} coefficients, reduced {}", beta_full.len(), beta_reduced.len())));
    }
    let plan = |tree: &str, beta: &[f64]| -> Result<TreePlan, StatsError> {
        Ok(TreePlan {
            spec: TreeSpec {
                tree_id: format!("{study_id}/{tree}"),
                transform: TransformSpec::loglik(format!("{study_id}/loglik-{tree}"), beta.to_vec(), scale)?,
                aggregator: AggregatorSpec::sum("sum"),
                height: params.height,
            },
            cohort: cohort.clone(),
        })
    };
    let plans = vec![plan("full", beta_full)?, plan("reduced", beta_reduced)?];
    run(cro, phr, study_id, StatKind::Lrt, plans, params)
}

/// Accuracy from a count tree and a correctness tree over the same cohort.
pub fn accuracy(
    cro: &Cro,
    phr: &mut PhrStore,
    study_id: &str,
    cohort: &CohortSpec,
    beta: &[f64],
    scale: u8,
    params: &PipelineParams,
) -> Result<PipelineRun, StatsError> {
    if cohort.included.is_empty() {
        return Err(StatsError::DivisionByZero);
    }
    let d = beta.len();
    let plan = |tree: &str, transform: TransformSpec| TreePlan {
        spec: TreeSpec { tree_id: format!("{study_id}/{tree}"), transform, aggregator: AggregatorSpec::sum("sum"), height: params.height },
        cohort: cohort.clone(),
    };
    let plans = vec![
        plan("count", TransformSpec::count(format!("{study_id}/count"), d, scale)?),
        plan("correct", TransformSpec::classassess(format!("{study_id}/classassess"), beta.to_vec(), scale)?),
    ];
    run(cro, phr, study_id, StatKind::Accuracy, plans, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatVerifyReport {
    pub kind: StatKind,
    pub sample_user: String,
    pub inclusion: Vec<InclusionReport>,
    pub inclusion_ok: bool,
    pub post_ok: bool,
    pub roots_ok: bool,
    pub decoded: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

impl StatVerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Check a published statistic. `inclusion` runs the sampled user's
/// inclusion or exclusion check against one tree, online or from stored
/// proofs.
pub fn stat_verify(
    result: &StatisticResult,
    published: &[TreePublication],
    vk_post: &VerifyingKey,
    sample_user: &str,
    inclusion: &mut dyn FnMut(&TreePublication) -> InclusionReport,
) -> StatVerifyReport {
    let mut failure = None;

    let reports: Vec<InclusionReport> = published.iter().map(&mut *inclusion).collect();
    let inclusion_ok = !reports.is_empty() && reports.iter().all(|r| r.verdict.is_verified());
    if !inclusion_ok {
        failure.get_or_insert_with(|| "sampled user's inclusion check failed".to_string());
    }

    let widths = [result.root_values.first().map_or(0, |n| n.payload().len()), result.root_values.get(1).map_or(0, |n| n.payload().len())];
    let recomputed = PostCircuit::new(result.kind, widths, result.scale).evaluate(&result.root_values).ok();
    let post_ok = verify(vk_post, &result.post_proof).flag
        && result.root_values.len() == 2
        && result.post_proof.get(INPUT1) == Some(result.root_values[0].digest())
        && result.post_proof.get(INPUT2) == Some(result.root_values[1].digest())
        && result.post_proof.get(OUTPUT) == Some(statistic_digest(result.zeta))
        && recomputed == Some(result.zeta)
        && result.decoded == decode_fixed(result.zeta);
    if !post_ok {
        failure.get_or_insert_with(|| "post-aggregation proof failed".to_string());
    }

    let published_roots: Vec<Digest256> = published.iter().map(|p| p.root).collect();
    let value_roots: Vec<Digest256> = result.root_values.iter().map(NodeValue::digest).collect();
    let roots_ok = result.root_digests == published_roots && value_roots == published_roots;
    if !roots_ok {
        failure.get_or_insert_with(|| "hashes not match".to_string());
    }

    StatVerifyReport {
        kind: result.kind,
        sample_user: sample_user.to_string(),
        inclusion: reports,
        inclusion_ok,
        post_ok,
        roots_ok,
        decoded: result.decoded,
        passed: inclusion_ok && post_ok && roots_ok,
        failure,
    }
}

/// Users included in any tree of a run.
pub fn included_users(run: &PipelineRun) -> BTreeSet<String> {
    run.plans.iter().flat_map(|p| p.cohort.included.iter().cloned()).collect()
}
