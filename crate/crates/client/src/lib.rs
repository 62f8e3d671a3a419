//! Thin async client for the MORF gateway.

use std::time::Duration;

use morf_core::eval::TestResult;
use morf_core::orchestrator::{CourseSummary, JobEvent, JobRecord, JobResults};
use morf_core::registry::ArtifactRecord;
use reqwest::multipart::{Form, Part};
use reqwest::{RequestBuilder, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("job {0} did not finish in time")]
    Timeout(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Files of a job submission.
#[derive(Debug, Clone, Default)]
pub struct SubmitRequest {
    pub config: String,
    pub script: Option<String>,
    pub image: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: String,
    pub state: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseListing {
    pub dataset_version: String,
    pub courses: Vec<CourseSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckSummary {
    pub ok: bool,
    pub blobs_checked: usize,
    pub records_checked: usize,
    pub problems: Vec<(String, String)>,
}

/// A downloaded artifact.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub digest: Option<String>,
    pub kind: Option<String>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str, token: Option<String>) -> Self {
        Client {
            base: base_url.trim_end_matches('/').to_string(),
            token,
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn auth(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn send(&self, req: RequestBuilder) -> Result<Response> {
        let resp = self.auth(req).send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<serde_json::Value>(&body)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
            .unwrap_or(body);
        Err(ClientError::Api { status, message })
    }

    async fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Ok(self
            .send(self.http.get(self.url(path)))
            .await?
            .json()
            .await?)
    }

    /// Raw body of a GET, whatever the status. For callers that inspect
    /// every response.
    pub async fn get_raw(&self, path: &str) -> Result<(StatusCode, String)> {
        let resp = self.auth(self.http.get(self.url(path))).send().await?;
        let status = resp.status();
        Ok((status, resp.text().await?))
    }

    /// Submits a job. A validation failure is returned as a response with
    /// state `failed` and the reason in `error`.
    pub async fn submit(&self, req: SubmitRequest) -> Result<SubmitResponse> {
        let mut form = Form::new().part("config", Part::text(req.config).file_name("config.ini"));
        if let Some(s) = req.script {
            form = form.part("script", Part::text(s).file_name("script"));
        }
        if let Some(image) = req.image {
            form = form.part("image", Part::bytes(image).file_name("image.tar"));
        }
        let resp = self
            .auth(self.http.post(self.url("/jobs")).multipart(form))
            .send()
            .await?;
        let status = resp.status();
        let body = resp.text().await?;
        match serde_json::from_str::<SubmitResponse>(&body) {
            Ok(r)
                if status == StatusCode::ACCEPTED || status == StatusCode::UNPROCESSABLE_ENTITY =>
            {
                Ok(r)
            }
            _ => Err(ClientError::Api {
                status,
                message: serde_json::from_str::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
                    .unwrap_or(body),
            }),
        }
    }

    pub async fn jobs(&self) -> Result<Vec<JobRecord>> {
        self.get_json("/jobs").await
    }

    pub async fn job(&self, id: &str) -> Result<JobRecord> {
        self.get_json(&format!("/jobs/{id}")).await
    }

    pub async fn events(&self, id: &str) -> Result<Vec<JobEvent>> {
        self.get_json(&format!("/jobs/{id}/events")).await
    }

    pub async fn results(&self, id: &str) -> Result<JobResults> {
        self.get_json(&format!("/jobs/{id}/results")).await
    }

    pub async fn results_csv(&self, id: &str) -> Result<String> {
        Ok(self
            .send(
                self.http
                    .get(self.url(&format!("/jobs/{id}/results?format=csv"))),
            )
            .await?
            .text()
            .await?)
    }

    pub async fn artifacts(&self, job_id: &str) -> Result<Vec<ArtifactRecord>> {
        self.get_json(&format!("/jobs/{job_id}/artifacts")).await
    }

    pub async fn artifact(&self, id: &str) -> Result<Artifact> {
        let resp = self
            .send(self.http.get(self.url(&format!("/artifacts/{id}"))))
            .await?;
        let header = |name: &str| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        let (digest, kind) = (header("x-morf-digest"), header("x-morf-kind"));
        Ok(Artifact {
            digest,
            kind,
            bytes: resp.bytes().await?.to_vec(),
        })
    }

    pub async fn courses(&self) -> Result<CourseListing> {
        self.get_json("/courses").await
    }

    pub async fn fsck(&self) -> Result<FsckSummary> {
        self.get_json("/registry/fsck").await
    }

    pub async fn compare(&self, a: &str, b: &str, metric: &str) -> Result<TestResult> {
        let req =
            self.http
                .get(self.url("/compare"))
                .query(&[("a", a), ("b", b), ("metric", metric)]);
        Ok(self.send(req).await?.json().await?)
    }

    /// Polls a job until it reaches a terminal state.
    pub async fn wait(&self, id: &str, timeout: Duration) -> Result<JobRecord> {
        let start = tokio::time::Instant::now();
        loop {
            let job = self.job(id).await?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if start.elapsed() >= timeout {
                return Err(ClientError::Timeout(id.to_string()));
            }
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }
}
