//! Wire types shared by the server, the HTTP client and the CLI.

use csmt_core::codec::{Digest256, LeafIndex};
use csmt_core::prover::TreePublication;
use csmt_core::stats::StatisticResult;
use csmt_core::study::BulletinRecord;
use csmt_core::transforms::{AggregatorSpec, TransformSpec};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    Ltr,
    Mrp,
    PipelineKs,
    PipelineLrt,
    PipelineAcc,
    Audit,
    StudyBuild,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobRequest {
    Ltr {
        tree_id: String,
        h_raw: Digest256,
        h_tau: Digest256,
    },
    Mrp {
        tree_id: String,
        h_leaf: Digest256,
        index: LeafIndex,
        /// hex
        nonce: String,
    },
    PipelineKs {
        study_id: String,
        cohort_a: Vec<String>,
        cohort_b: Vec<String>,
        #[serde(default)]
        edges: Option<Vec<f64>>,
        #[serde(default)]
        scale: Option<u8>,
        #[serde(default)]
        height: Option<u16>,
    },
    PipelineLrt {
        study_id: String,
        users: Vec<String>,
        beta_full: Vec<f64>,
        beta_reduced: Vec<f64>,
        #[serde(default)]
        scale: Option<u8>,
        #[serde(default)]
        height: Option<u16>,
    },
    PipelineAcc {
        study_id: String,
        users: Vec<String>,
        beta: Vec<f64>,
        #[serde(default)]
        scale: Option<u8>,
        #[serde(default)]
        height: Option<u16>,
    },
    Audit {
        tree_id: String,
        /// hex
        nonce: String,
    },
    StudyBuild {
        study: StudyConfig,
    },
}

impl JobRequest {
    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Ltr { .. } => JobKind::Ltr,
            JobRequest::Mrp { .. } => JobKind::Mrp,
            JobRequest::PipelineKs { .. } => JobKind::PipelineKs,
            JobRequest::PipelineLrt { .. } => JobKind::PipelineLrt,
            JobRequest::PipelineAcc { .. } => JobKind::PipelineAcc,
            JobRequest::Audit { .. } => JobKind::Audit,
            JobRequest::StudyBuild { .. } => JobKind::StudyBuild,
        }
    }
}

/// A study of arbitrary trees over PHR users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study_id: String,
    pub trees: Vec<TreeConfigFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfigFile {
    /// Tree id suffix; the full id is `<study_id>/<name>`.
    pub name: String,
    pub transform: TransformSpec,
    #[serde(default)]
    pub aggregator: Option<AggregatorSpec>,
    #[serde(default)]
    pub height: Option<u16>,
    /// Users to transform; all PHR users when absent.
    #[serde(default)]
    pub users: Option<Vec<String>>,
    pub included: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    /// Allowed moves: queued → running → done | failed.
    pub fn can_move_to(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running) | (JobStatus::Running, JobStatus::Done) | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofJob {
    pub job_id: Uuid,
    pub kind: JobKind,
    pub request: JobRequest,
    pub status: JobStatus,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: Uuid,
}

/// Result body of a finished pipeline job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub study_id: String,
    pub result: StatisticResult,
    pub bulletin: BulletinRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub study_id: String,
    pub publications: Vec<TreePublication>,
    pub bulletin: BulletinRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawDigest {
    pub user_id: String,
    pub h_raw: Digest256,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordUpload {
    pub user_id: String,
    pub datum: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
