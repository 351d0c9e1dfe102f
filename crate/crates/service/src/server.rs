//! HTTP front end over [`Service`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use csmt_core::phr::PhrStore;
use serde::Deserialize;
use tokio::sync::oneshot;
use uuid::Uuid;

use crate::api::{ErrorBody, JobRequest, RawDigest, RecordUpload, SubmitResponse};
use crate::service::{Service, ServiceConfig, ServiceError};

struct ApiError(StatusCode, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Pending(_) | ServiceError::AlreadyPublished(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) | ServiceError::Phr(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn submit(State(svc): State<Arc<Service>>, Json(req): Json<JobRequest>) -> (StatusCode, Json<SubmitResponse>) {
    let job_id = svc.submit(req);
    (StatusCode::ACCEPTED, Json(SubmitResponse { job_id }))
}

async fn job(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<crate::api::ProofJob> {
    Ok(Json(svc.job(id)?))
}

async fn job_result(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<serde_json::Value> {
    Ok(Json(svc.result(id)?))
}

async fn artifacts(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<crate::bundle::ArtifactBundle> {
    Ok(Json(svc.artifacts(&id)?))
}

async fn bulletin(State(svc): State<Arc<Service>>) -> Json<Vec<csmt_core::study::BulletinRecord>> {
    Json(svc.bulletin())
}

#[derive(Deserialize)]
struct TreeQuery {
    tree: String,
}

#[derive(Deserialize)]
struct UserQuery {
    user: String,
}

#[derive(Deserialize)]
struct DeliveryQuery {
    tree: String,
    user: String,
}

async fn publication(State(svc): State<Arc<Service>>, Query(q): Query<TreeQuery>) -> ApiResult<csmt_core::prover::TreePublication> {
    Ok(Json(svc.publication(&q.tree)?))
}

async fn phr_digest(State(svc): State<Arc<Service>>, Query(q): Query<UserQuery>) -> ApiResult<RawDigest> {
    let h_raw = svc.raw_digest(&q.user)?;
    Ok(Json(RawDigest { user_id: q.user, h_raw }))
}

async fn phr_register(State(svc): State<Arc<Service>>, Json(records): Json<Vec<RecordUpload>>) -> ApiResult<Vec<csmt_core::phr::PhrEntry>> {
    Ok(Json(svc.register_records(&records)?))
}

async fn delivery(State(svc): State<Arc<Service>>, Query(q): Query<DeliveryQuery>) -> ApiResult<csmt_core::prover::Delivery> {
    Ok(Json(svc.delivery(&q.tree, &q.user)?))
}

async fn require_token(State(svc): State<Arc<Service>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.config().api_token {
        let expected = format!("Bearer {token}");
        let ok = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) == Some(expected.as_str());
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong API token".into()).into_response();
        }
    }
    next.run(req).await
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/jobs", post(submit))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/result", get(job_result))
        .route("/studies/{id}/artifacts", get(artifacts))
        .route("/bulletin", get(bulletin))
        .route("/publication", get(publication))
        .route("/delivery", get(delivery))
        .route("/phr/digest", get(phr_digest))
        .route("/phr/records", post(phr_register))
        .layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .with_state(svc)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own runtime thread, for tests and embedding.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub service: Arc<Service>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn start(config: ServiceConfig, phr: PhrStore, bind: SocketAddr) -> std::io::Result<Self> {
        let workers = config.workers.max(1);
        let service = Arc::new(Service::new(config, phr));
        let runtime =
            tokio::runtime::Builder::new_multi_thread().worker_threads(2).max_blocking_threads(workers + 2).enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let svc = service.clone();
        let thread = thread::spawn(move || {
            runtime.block_on(async move {
                let _ = serve(svc, listener, async {
                    let _ = stopped.await;
                })
                .await;
            });
        });
        Ok(ServerHandle { addr, service, stop: Some(stop), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
