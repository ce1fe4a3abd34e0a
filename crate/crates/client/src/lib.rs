//! Async client for the critlab HTTP service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use critlab_core::analysis::{DoubleExpFit, ExpLinkFit};
use critlab_core::api::{
    ApiError, DoubleExpRequest, Health, JobCreated, JobRequest, JobState, JobStatus,
    NormalizeRequest, PairedRequest, SpearmanResponse,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("job {id} failed: {message}")]
    JobFailed { id: u64, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8787`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let message = serde_json_error(&text).unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(
            self.http
                .post(format!("{}{path}", self.base))
                .json(body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn submit(&self, req: &JobRequest) -> Result<u64> {
        let created: JobCreated = self.post("/jobs", req).await?;
        Ok(created.id)
    }

    pub async fn status(&self, id: u64) -> Result<JobStatus> {
        self.get(&format!("/jobs/{id}")).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>> {
        self.get("/jobs").await
    }

    /// Polls until the job ends. `on_update` sees every poll result.
    pub async fn wait(
        &self,
        id: u64,
        every: Duration,
        mut on_update: impl FnMut(&JobStatus),
    ) -> Result<JobStatus> {
        loop {
            let status = self.status(id).await?;
            on_update(&status);
            match status.state {
                JobState::Done => return Ok(status),
                JobState::Failed => {
                    return Err(ClientError::JobFailed {
                        id,
                        message: status.error.unwrap_or_default(),
                    })
                }
                _ => tokio::time::sleep(every).await,
            }
        }
    }

    pub async fn fit_double_exp(&self, req: &DoubleExpRequest) -> Result<DoubleExpFit> {
        self.post("/fit/double-exp", req).await
    }

    pub async fn fit_exp_link(&self, s: &[f64], f: &[f64]) -> Result<ExpLinkFit> {
        self.post(
            "/fit/exp-link",
            &PairedRequest {
                x: s.to_vec(),
                y: f.to_vec(),
            },
        )
        .await
    }

    pub async fn spearman(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let r: SpearmanResponse = self
            .post(
                "/spearman",
                &PairedRequest {
                    x: x.to_vec(),
                    y: y.to_vec(),
                },
            )
            .await?;
        Ok(r.rho)
    }

    pub async fn normalize(&self, req: &NormalizeRequest) -> Result<Vec<Vec<f64>>> {
        self.post("/fisher/normalize", req).await
    }
}

fn serde_json_error(text: &str) -> Option<String> {
    serde_json::from_str::<ApiError>(text).ok().map(|e| e.error)
}
