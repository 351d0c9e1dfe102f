//! CRO, PHR and bulletin state behind the job queue.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use csmt_core::codec::Digest256;
use csmt_core::phr::PhrStore;
use csmt_core::proofsys::{backend_seed, DEFAULT_LAMBDA};
use csmt_core::prover::{CohortSpec, Cro, Delivery, ProverError, TreePublication, TreeSpec};
use csmt_core::stats::{self, hd_ks_edges, PipelineParams, PipelineRun, StatsError};
use csmt_core::study::{audit_bundle, build_trees, Bulletin, BulletinRecord, StudyError, TreePlan, DEFAULT_ROTATIONS};
use csmt_core::transforms::AggregatorSpec;
use csmt_core::tree::DEFAULT_TREE_HEIGHT;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::api::{JobRequest, JobStatus, PipelineOutcome, ProofJob, RecordUpload, StudyConfig, StudyOutcome};
use crate::bundle::{pretty, ArtifactBundle, BULLETIN_FILE, SETTINGS_FILE};

pub const DEFAULT_SCALE: u8 = 12;
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("job {0} has not finished")]
    Pending(Uuid),
    #[error("job failed: {0}")]
    Failed(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("study `{0}` is already published")]
    AlreadyPublished(String),
    #[error(transparent)]
    Prover(#[from] ProverError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Phr(#[from] csmt_core::phr::PhrError),
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub scale: u8,
    pub height: u16,
    pub lambda: u32,
    /// Label the backend seed is derived from; fixed so keys are reproducible.
    pub seed_label: String,
    pub workers: usize,
    pub max_rotations: usize,
    pub api_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            scale: DEFAULT_SCALE,
            height: DEFAULT_TREE_HEIGHT,
            lambda: DEFAULT_LAMBDA,
            seed_label: "csmt-service".into(),
            workers: DEFAULT_WORKERS,
            max_rotations: DEFAULT_ROTATIONS,
            api_token: None,
        }
    }
}

struct JobEntry {
    job: ProofJob,
    result: Option<Value>,
}

pub struct Service {
    config: ServiceConfig,
    cro: Cro,
    phr: RwLock<PhrStore>,
    bulletin: RwLock<Bulletin>,
    studies: RwLock<BTreeMap<String, ArtifactBundle>>,
    jobs: Mutex<HashMap<Uuid, JobEntry>>,
    workers: Arc<Semaphore>,
    // study ids with a build in flight
    building: Mutex<BTreeSet<String>>,
}

struct Reservation<'a> {
    set: &'a Mutex<BTreeSet<String>>,
    id: String,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.set.lock().expect("reservation lock").remove(&self.id);
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("job result serializes")
}

fn parse_nonce(hex_nonce: &str) -> Result<Vec<u8>, ServiceError> {
    hex::decode(hex_nonce).map_err(|e| ServiceError::Invalid(format!("nonce: {e}")))
}

impl Service {
    pub fn new(config: ServiceConfig, phr: PhrStore) -> Self {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        Service {
            config,
            cro: Cro::new(),
            phr: RwLock::new(phr),
            bulletin: RwLock::new(Bulletin::new()),
            studies: RwLock::new(BTreeMap::new()),
            jobs: Mutex::new(HashMap::new()),
            workers,
            building: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn params(&self, height: Option<u16>) -> PipelineParams {
        PipelineParams {
            height: height.unwrap_or(self.config.height),
            lambda: self.config.lambda,
            seed: self.seed(),
            max_rotations: self.config.max_rotations,
        }
    }

    fn seed(&self) -> Vec<u8> {
        backend_seed(self.config.lambda, self.config.seed_label.as_bytes()).expect("supported lambda")
    }

    pub fn register_records(&self, records: &[RecordUpload]) -> Result<Vec<csmt_core::phr::PhrEntry>, ServiceError> {
        let mut phr = self.phr.write().expect("phr lock");
        let rows = records.iter().map(|r| (r.user_id.as_str(), r.datum.clone()));
        let mut out = Vec::new();
        for rec in csmt_core::phr::salted_records(rows) {
            out.push(phr.register_record(rec)?);
        }
        Ok(out)
    }

    pub fn phr_snapshot(&self) -> PhrStore {
        self.phr.read().expect("phr lock").clone()
    }

    pub fn raw_digest(&self, user_id: &str) -> Result<Digest256, ServiceError> {
        let phr = self.phr.read().expect("phr lock");
        phr.entry(user_id).map(|e| e.h_raw).ok_or_else(|| ServiceError::NotFound(format!("PHR user `{user_id}`")))
    }

    pub fn delivery(&self, tree_id: &str, user_id: &str) -> Result<Delivery, ServiceError> {
        let (_, h_tau, _) = self.cro.user_digests(tree_id, user_id).map_err(|e| match e {
            ProverError::NotFound => ServiceError::NotFound(format!("user `{user_id}` in tree `{tree_id}`")),
            ProverError::NotBuilt(t) => ServiceError::NotFound(format!("tree `{t}`")),
            e => e.into(),
        })?;
        Ok(Delivery { user_id: user_id.into(), tree_id: tree_id.into(), h_tau })
    }

    pub fn publication(&self, tree_id: &str) -> Result<TreePublication, ServiceError> {
        self.cro.publication(tree_id).map_err(|_| ServiceError::NotFound(format!("tree `{tree_id}`")))
    }

    pub fn bulletin(&self) -> Vec<BulletinRecord> {
        self.bulletin.read().expect("bulletin lock").records().to_vec()
    }

    pub fn artifacts(&self, study_id: &str) -> Result<ArtifactBundle, ServiceError> {
        self.studies
            .read()
            .expect("studies lock")
            .get(study_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("study `{study_id}`")))
    }

    fn reserve(&self, study_id: &str) -> Result<Reservation<'_>, ServiceError> {
        if study_id.is_empty() || study_id.contains('/') {
            return Err(ServiceError::Invalid(format!("bad study id `{study_id}`")));
        }
        let mut building = self.building.lock().expect("reservation lock");
        if self.studies.read().expect("studies lock").contains_key(study_id) || !building.insert(study_id.to_string()) {
            return Err(ServiceError::AlreadyPublished(study_id.into()));
        }
        Ok(Reservation { set: &self.building, id: study_id.to_string() })
    }

    /// Post the bulletin record and store the bundle; both are write-once.
    fn publish(&self, record: BulletinRecord, mut bundle: ArtifactBundle) -> Result<(), ServiceError> {
        let mut studies = self.studies.write().expect("studies lock");
        if studies.contains_key(&record.study_id) {
            return Err(ServiceError::AlreadyPublished(record.study_id));
        }
        bundle.files.insert(BULLETIN_FILE.into(), pretty(&record));
        self.bulletin.write().expect("bulletin lock").publish(record)?;
        studies.insert(bundle.study_id.clone(), bundle);
        Ok(())
    }

    /// Run a request to completion on the calling thread.
    pub fn execute(&self, req: &JobRequest) -> Result<Value, ServiceError> {
        match req {
            JobRequest::Ltr { tree_id, h_raw, h_tau } => Ok(to_value(&self.cro.cro_ltr_prove(tree_id, *h_raw, *h_tau)?)),
            JobRequest::Mrp { tree_id, h_leaf, index, nonce } => {
                Ok(to_value(&self.cro.cro_mrp_prove(tree_id, *h_leaf, index, &parse_nonce(nonce)?)?))
            }
            JobRequest::Audit { tree_id, nonce } => {
                let included = self.cro.included_users(tree_id)?;
                let phr = self.phr.read().expect("phr lock");
                Ok(to_value(&audit_bundle(&self.cro, &phr, tree_id, &included, &parse_nonce(nonce)?)?))
            }
            JobRequest::StudyBuild { study } => Ok(to_value(&self.build_study(study)?)),
            JobRequest::PipelineKs { study_id, cohort_a, cohort_b, edges, scale, height } => {
                let _reserved = self.reserve(study_id)?;
                let edges = edges.clone().unwrap_or_else(hd_ks_edges);
                let run = {
                    let mut phr = self.phr.write().expect("phr lock");
                    let scale = scale.unwrap_or(self.config.scale);
                    stats::ks_two_sample(&self.cro, &mut phr, study_id, cohort_a, cohort_b, &edges, scale, &self.params(*height))?
                };
                Ok(to_value(&self.publish_run(req, &run)?))
            }
            JobRequest::PipelineLrt { study_id, users, beta_full, beta_reduced, scale, height } => {
                let _reserved = self.reserve(study_id)?;
                let cohort = CohortSpec::all_included(users.clone());
                let run = {
                    let mut phr = self.phr.write().expect("phr lock");
                    let scale = scale.unwrap_or(self.config.scale);
                    stats::lrt(&self.cro, &mut phr, study_id, &cohort, beta_full, beta_reduced, scale, &self.params(*height))?
                };
                Ok(to_value(&self.publish_run(req, &run)?))
            }
            JobRequest::PipelineAcc { study_id, users, beta, scale, height } => {
                let _reserved = self.reserve(study_id)?;
                let cohort = CohortSpec::all_included(users.clone());
                let run = {
                    let mut phr = self.phr.write().expect("phr lock");
                    let scale = scale.unwrap_or(self.config.scale);
                    stats::accuracy(&self.cro, &mut phr, study_id, &cohort, beta, scale, &self.params(*height))?
                };
                Ok(to_value(&self.publish_run(req, &run)?))
            }
        }
    }

    fn publish_run(&self, req: &JobRequest, run: &PipelineRun) -> Result<PipelineOutcome, ServiceError> {
        let publications = run.publications();
        let phr_root = self.phr.read().expect("phr lock").root();
        let record = BulletinRecord::new(&run.study_id, &publications, std::slice::from_ref(&run.post.vk), phr_root);
        let mut bundle = ArtifactBundle::new(&run.study_id);
        for p in &publications {
            bundle.add_tree(p);
        }
        bundle.add_statistic(&run.result, &run.post.vk);
        bundle.files.insert(SETTINGS_FILE.into(), pretty(&self.settings(req, &publications)));
        self.publish(record.clone(), bundle)?;
        Ok(PipelineOutcome { study_id: run.study_id.clone(), result: run.result.clone(), bulletin: record })
    }

    fn settings(&self, req: &JobRequest, publications: &[TreePublication]) -> Value {
        serde_json::json!({
            "request": req,
            "lambda": self.config.lambda,
            "heights": publications.iter().map(|p| (p.tree_id.clone(), p.params.height)).collect::<BTreeMap<_, _>>(),
        })
    }

    fn build_study(&self, study: &StudyConfig) -> Result<StudyOutcome, ServiceError> {
        let _reserved = self.reserve(&study.study_id)?;
        if study.trees.is_empty() {
            return Err(ServiceError::Invalid("study has no trees".into()));
        }
        let mut phr = self.phr.write().expect("phr lock");
        let plans: Vec<TreePlan> = study
            .trees
            .iter()
            .map(|t| TreePlan {
                spec: TreeSpec {
                    tree_id: format!("{}/{}", study.study_id, t.name),
                    transform: t.transform.clone(),
                    aggregator: t.aggregator.clone().unwrap_or_else(|| AggregatorSpec::sum("sum")),
                    height: t.height.unwrap_or(self.config.height),
                },
                cohort: CohortSpec {
                    all_users: t.users.clone().unwrap_or_else(|| phr.user_ids()),
                    included: t.included.iter().cloned().collect(),
                },
            })
            .collect();
        let built = build_trees(&self.cro, &mut phr, &plans, self.config.lambda, &self.seed(), self.config.max_rotations)?;
        let publications: Vec<TreePublication> = built.iter().map(|b| b.outcome.publication.clone()).collect();
        let record = BulletinRecord::new(&study.study_id, &publications, &[], phr.root());
        drop(phr);
        let mut bundle = ArtifactBundle::new(&study.study_id);
        for p in &publications {
            bundle.add_tree(p);
        }
        bundle.files.insert(SETTINGS_FILE.into(), pretty(&serde_json::json!({ "study": study, "lambda": self.config.lambda })));
        self.publish(record.clone(), bundle)?;
        Ok(StudyOutcome { study_id: study.study_id.clone(), publications, bulletin: record })
    }

    /// Queue a job on the worker pool. Must be called inside a tokio runtime.
    pub fn submit(self: &Arc<Self>, request: JobRequest) -> Uuid {
        let job_id = Uuid::new_v4();
        let job = ProofJob { job_id, kind: request.kind(), request: request.clone(), status: JobStatus::Queued, error: None };
        self.jobs.lock().expect("jobs lock").insert(job_id, JobEntry { job, result: None });
        let svc = Arc::clone(self);
        tokio::spawn(async move {
            let _permit = svc.workers.clone().acquire_owned().await.expect("semaphore open");
            svc.transition(job_id, JobStatus::Running, None, None);
            let worker = Arc::clone(&svc);
            let outcome = tokio::task::spawn_blocking(move || worker.execute(&request)).await;
            match outcome {
                Ok(Ok(value)) => svc.transition(job_id, JobStatus::Done, Some(value), None),
                Ok(Err(e)) => svc.transition(job_id, JobStatus::Failed, None, Some(e.to_string())),
                Err(e) => svc.transition(job_id, JobStatus::Failed, None, Some(format!("worker panicked: {e}"))),
            }
        });
        job_id
    }

    fn transition(&self, id: Uuid, next: JobStatus, result: Option<Value>, error: Option<String>) {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        let Some(entry) = jobs.get_mut(&id) else { return };
        if !entry.job.status.can_move_to(next) {
            return;
        }
        entry.job.status = next;
        entry.job.error = error;
        entry.result = result;
    }

    pub fn job(&self, id: Uuid) -> Result<ProofJob, ServiceError> {
        let jobs = self.jobs.lock().expect("jobs lock");
        jobs.get(&id).map(|e| e.job.clone()).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    pub fn result(&self, id: Uuid) -> Result<Value, ServiceError> {
        let jobs = self.jobs.lock().expect("jobs lock");
        let entry = jobs.get(&id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        match entry.job.status {
            JobStatus::Done => Ok(entry.result.clone().expect("done jobs carry a result")),
            JobStatus::Failed => Err(ServiceError::Failed(entry.job.error.clone().unwrap_or_default())),
            _ => Err(ServiceError::Pending(id)),
        }
    }
}
