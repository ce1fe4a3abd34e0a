//! HTTP/JSON front end for the experiment runners. Training commands run
//! as background jobs; the small analysis operations answer directly.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Semaphore;

use critlab_core::analysis::{fit_double_exp, fit_exp_link, spearman, DoubleExpFit, ExpLinkFit};
use critlab_core::api::{
    ApiError, DoubleExpRequest, Health, JobCreated, JobRequest, JobState, JobStatus,
    NormalizeRequest, PairedRequest, SpearmanResponse,
};
use critlab_core::experiments::{run_command, RunOptions, CODE_VERSION};
use critlab_core::fisher::normalize_layerwise;

pub struct AppError(StatusCode, String);

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.1 })).into_response()
    }
}

impl From<critlab_core::Error> for AppError {
    fn from(e: critlab_core::Error) -> Self {
        AppError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, AppError>;

#[derive(Clone)]
pub struct AppState {
    jobs: Arc<Mutex<BTreeMap<u64, JobStatus>>>,
    next_id: Arc<AtomicU64>,
    /// Bounds how many jobs train at once; the rest wait queued.
    slots: Arc<Semaphore>,
}

impl AppState {
    pub fn new(max_jobs: usize) -> Self {
        AppState {
            jobs: Arc::default(),
            next_id: Arc::new(AtomicU64::new(1)),
            slots: Arc::new(Semaphore::new(max_jobs.max(1))),
        }
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().expect("job table").get_mut(&id) {
            f(job);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/jobs", get(list_jobs).post(create_job))
        .route("/jobs/{id}", get(job_status))
        .route("/fit/double-exp", post(double_exp))
        .route("/fit/exp-link", post(exp_link))
        .route("/spearman", post(rank_correlation))
        .route("/fisher/normalize", post(normalize))
        .with_state(state)
}

async fn health() -> Json<Health> {
    Json(Health {
        version: CODE_VERSION.into(),
    })
}

async fn list_jobs(State(state): State<AppState>) -> Json<Vec<JobStatus>> {
    let jobs = state.jobs.lock().expect("job table");
    Json(
        jobs.values()
            .map(|j| JobStatus {
                manifest: None,
                report: None,
                ..j.clone()
            })
            .collect(),
    )
}

async fn job_status(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<JobStatus> {
    state
        .jobs
        .lock()
        .expect("job table")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AppError(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn create_job(
    State(state): State<AppState>,
    Json(req): Json<JobRequest>,
) -> Result<(StatusCode, Json<JobCreated>), AppError> {
    if !req.out.is_absolute() {
        return Err(AppError(
            StatusCode::BAD_REQUEST,
            format!("output directory must be absolute: {}", req.out.display()),
        ));
    }
    req.config.validate()?;
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    state.jobs.lock().expect("job table").insert(
        id,
        JobStatus {
            id,
            command: req.command,
            state: JobState::Queued,
            arms_done: 0,
            arms_total: 0,
            last_arm: None,
            error: None,
            manifest: None,
            report: None,
        },
    );
    tracing::info!(id, command = req.command.as_str(), "job queued");
    tokio::spawn(run_job(state, id, req));
    Ok((StatusCode::ACCEPTED, Json(JobCreated { id })))
}

async fn run_job(state: AppState, id: u64, req: JobRequest) {
    let _permit = state
        .slots
        .clone()
        .acquire_owned()
        .await
        .expect("semaphore open");
    state.update(id, |j| j.state = JobState::Running);
    let worker = state.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let opts = RunOptions {
            out: req.out,
            workers: req.workers,
        };
        let progress = |arm: &critlab_core::experiments::ArmResult, done: usize, total: usize| {
            worker.update(id, |j| {
                j.arms_done = done;
                j.arms_total = total;
                j.last_arm = Some(arm.id.clone());
            });
        };
        run_command(req.command, &req.config, &opts, &progress)
    })
    .await;
    state.update(id, |j| match outcome {
        Ok(Ok(o)) => {
            j.state = JobState::Done;
            j.manifest = Some(o.manifest);
            j.report = Some(o.report);
        }
        Ok(Err(e)) => {
            j.state = JobState::Failed;
            j.error = Some(e.to_string());
        }
        Err(e) => {
            j.state = JobState::Failed;
            j.error = Some(format!("job panicked: {e}"));
        }
    });
    tracing::info!(id, "job finished");
}

async fn double_exp(Json(req): Json<DoubleExpRequest>) -> ApiResult<DoubleExpFit> {
    Ok(Json(fit_double_exp(&req.points, &req.grid)?))
}

async fn exp_link(Json(req): Json<PairedRequest>) -> ApiResult<ExpLinkFit> {
    Ok(Json(fit_exp_link(&req.x, &req.y)?))
}

async fn rank_correlation(Json(req): Json<PairedRequest>) -> ApiResult<SpearmanResponse> {
    Ok(Json(SpearmanResponse {
        rho: spearman(&req.x, &req.y)?,
    }))
}

async fn normalize(Json(req): Json<NormalizeRequest>) -> ApiResult<Vec<Vec<f64>>> {
    Ok(Json(normalize_layerwise(&req.reports, req.mode)?))
}

/// Serves on `listener` until the future resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
