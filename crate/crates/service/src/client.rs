//! Blocking HTTP client for the service. Implements the verifier endpoints
//! so the online verifiers run unchanged against a remote CRO.

use std::time::{Duration, Instant};

use csmt_core::codec::Digest256;
use csmt_core::prover::{Delivery, LtrResponse, MrpProof, TreePublication};
use csmt_core::study::BulletinRecord;
use csmt_core::verifier::{EndpointError, VerifierEndpoints};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::api::{ErrorBody, JobRequest, JobStatus, ProofJob, RawDigest, RecordUpload, SubmitResponse};
use crate::bundle::ArtifactBundle;

pub const DEFAULT_JOB_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("server returned {status}: {message}")]
    Status { status: u16, message: String },
    #[error("job {0} failed: {1}")]
    JobFailed(Uuid, String),
    #[error("job {0} did not finish in time")]
    Timeout(Uuid),
    #[error("malformed response: {0}")]
    Decode(String),
}

impl From<ClientError> for EndpointError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Transport(m) => EndpointError::Transport(m),
            ClientError::Timeout(id) => EndpointError::Transport(format!("job {id} timed out")),
            e => EndpointError::Rejected(e.to_string()),
        }
    }
}

pub struct ServiceClient {
    base: String,
    http: Client,
    token: Option<String>,
    pub job_timeout: Duration,
}

impl ServiceClient {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, ClientError> {
        let http = Client::builder().timeout(Duration::from_secs(120)).build().map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(ServiceClient { base: base.trim_end_matches('/').to_string(), http, token, job_timeout: DEFAULT_JOB_TIMEOUT })
    }

    fn auth(&self, rb: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    fn read<T: DeserializeOwned>(resp: Result<Response, reqwest::Error>) -> Result<T, ClientError> {
        let resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
            return Err(ClientError::Status { status: status.as_u16(), message });
        }
        serde_json::from_str(&body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, &str)]) -> Result<T, ClientError> {
        Self::read(self.auth(self.http.get(format!("{}{path}", self.base)).query(query)).send())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::read(self.auth(self.http.post(format!("{}{path}", self.base)).json(body)).send())
    }

    pub fn submit(&self, req: &JobRequest) -> Result<Uuid, ClientError> {
        Ok(self.post::<_, SubmitResponse>("/jobs", req)?.job_id)
    }

    pub fn job(&self, id: Uuid) -> Result<ProofJob, ClientError> {
        self.get(&format!("/jobs/{id}"), &[])
    }

    pub fn result(&self, id: Uuid) -> Result<Value, ClientError> {
        self.get(&format!("/jobs/{id}/result"), &[])
    }

    /// Poll until the job finishes, then fetch its result.
    pub fn wait(&self, id: Uuid) -> Result<Value, ClientError> {
        let start = Instant::now();
        let mut delay = Duration::from_millis(5);
        loop {
            let job = self.job(id)?;
            match job.status {
                JobStatus::Done => return self.result(id),
                JobStatus::Failed => return Err(ClientError::JobFailed(id, job.error.unwrap_or_default())),
                _ if start.elapsed() > self.job_timeout => return Err(ClientError::Timeout(id)),
                _ => {
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_millis(200));
                }
            }
        }
    }

    pub fn run<T: DeserializeOwned>(&self, req: &JobRequest) -> Result<T, ClientError> {
        let value = self.wait(self.submit(req)?)?;
        serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn artifacts(&self, study_id: &str) -> Result<ArtifactBundle, ClientError> {
        self.get(&format!("/studies/{study_id}/artifacts"), &[])
    }

    pub fn bulletin(&self) -> Result<Vec<BulletinRecord>, ClientError> {
        self.get("/bulletin", &[])
    }

    pub fn tree_publication(&self, tree_id: &str) -> Result<TreePublication, ClientError> {
        self.get("/publication", &[("tree", tree_id)])
    }

    pub fn raw_digest(&self, user_id: &str) -> Result<Digest256, ClientError> {
        Ok(self.get::<RawDigest>("/phr/digest", &[("user", user_id)])?.h_raw)
    }

    pub fn delivery(&self, tree_id: &str, user_id: &str) -> Result<Delivery, ClientError> {
        self.get("/delivery", &[("tree", tree_id), ("user", user_id)])
    }

    pub fn register(&self, records: &[RecordUpload]) -> Result<Vec<csmt_core::phr::PhrEntry>, ClientError> {
        self.post("/phr/records", &records)
    }
}

impl VerifierEndpoints for ServiceClient {
    fn publication(&self, tree_id: &str) -> Result<TreePublication, EndpointError> {
        Ok(self.tree_publication(tree_id)?)
    }

    fn phr_raw_digest(&self, user_id: &str) -> Result<Digest256, EndpointError> {
        Ok(self.raw_digest(user_id)?)
    }

    fn delivered_tau_digest(&self, tree_id: &str, user_id: &str) -> Result<Digest256, EndpointError> {
        Ok(self.delivery(tree_id, user_id)?.h_tau)
    }

    fn ltr_prove(&self, tree_id: &str, h_raw: Digest256, h_tau: Digest256) -> Result<LtrResponse, EndpointError> {
        Ok(self.run(&JobRequest::Ltr { tree_id: tree_id.into(), h_raw, h_tau })?)
    }

    fn mrp_prove(&self, tree_id: &str, h_leaf: Digest256, resp: &LtrResponse, nonce: &[u8]) -> Result<MrpProof, EndpointError> {
        Ok(self.run(&JobRequest::Mrp { tree_id: tree_id.into(), h_leaf, index: resp.index, nonce: hex::encode(nonce) })?)
    }
}
