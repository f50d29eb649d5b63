//! Bundle transport over a two-verb HTTP contract: `PUT` and `GET` of
//! `<base>/bundles/<sha256 hex>`.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};

use sciunit_core::container::{export_bundle_bytes, import_bundle, Manifest, Sciunit};
use sciunit_core::{Digest, Error, Result};

pub const BUNDLES: &str = "bundles";

fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

#[derive(Debug, Clone)]
pub struct RepositoryClient {
    base: String,
    agent: ureq::Agent,
    pub attempts: u32,
    pub backoff: Duration,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PushOutcome {
    pub url: String,
    pub digest: String,
    pub bytes: u64,
    pub executions: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PullOutcome {
    pub url: String,
    pub digest: String,
    pub bytes: u64,
    pub executions: Vec<String>,
}

impl RepositoryClient {
    pub fn new(base: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(10)))
            .build();
        RepositoryClient {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn bundle_url(&self, digest: &str) -> String {
        format!("{}/{BUNDLES}/{digest}", self.base)
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    fn with_retries<T>(&self, what: &str, mut op: impl FnMut() -> std::result::Result<T, Attempt>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{what}: attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport(format!("{what} failed after {} attempts: {last}", self.attempts.max(1))))
    }

    /// Uploads `bytes` under their digest and returns the resource URL.
    pub fn put_bundle(&self, bytes: &[u8]) -> Result<(String, Digest)> {
        let digest = Digest::of(bytes);
        let url = self.bundle_url(&digest.to_hex());
        self.with_retries(&format!("PUT {url}"), || {
            let resp = self
                .agent
                .put(&url)
                .header("content-type", "application/octet-stream")
                .send(bytes)
                .map_err(|e| Attempt::Retry(e.to_string()))?;
            match resp.status().as_u16() {
                200..=299 => Ok(()),
                s if s >= 500 => Err(Attempt::Retry(format!("server answered {s}"))),
                s => Err(Attempt::Fatal(Error::Transport(format!("PUT {url} was refused with status {s}")))),
            }
        })?;
        Ok((url, digest))
    }

    /// Downloads a bundle and checks it against the digest in its URL.
    pub fn get_bundle(&self, reference: &str) -> Result<(String, Vec<u8>)> {
        let url = if reference.starts_with("http://") || reference.starts_with("https://") {
            reference.to_string()
        } else if is_digest(reference) {
            self.bundle_url(reference)
        } else {
            return Err(Error::InvalidArgument(format!("{reference:?} is neither a URL nor a bundle digest")));
        };
        let expected = url.rsplit('/').next().unwrap_or_default().to_string();
        if !is_digest(&expected) {
            return Err(Error::InvalidArgument(format!("{url} does not end in a bundle digest")));
        }
        let bytes = self.with_retries(&format!("GET {url}"), || {
            let mut resp = self.agent.get(&url).call().map_err(|e| Attempt::Retry(e.to_string()))?;
            match resp.status().as_u16() {
                200..=299 => resp
                    .body_mut()
                    .with_config()
                    .limit(u64::MAX)
                    .read_to_vec()
                    .map_err(|e| Attempt::Retry(e.to_string())),
                404 => Err(Attempt::Fatal(Error::NotFound(format!("bundle {url}")))),
                s if s >= 500 => Err(Attempt::Retry(format!("server answered {s}"))),
                s => Err(Attempt::Fatal(Error::Transport(format!("GET {url} was refused with status {s}")))),
            }
        })?;
        let actual = Digest::of(&bytes).to_hex();
        if actual != expected {
            return Err(Error::Corruption(format!(
                "bundle digest mismatch: expected {expected}, received {actual}"
            )));
        }
        Ok((url, bytes))
    }

    pub fn push(&self, sciunit: &Sciunit, ids: &[String]) -> Result<PushOutcome> {
        let (bytes, _, summary) = export_bundle_bytes(sciunit, ids)?;
        let (url, digest) = self.put_bundle(&bytes)?;
        Ok(PushOutcome {
            url,
            digest: digest.to_hex(),
            bytes: bytes.len() as u64,
            executions: summary.executions,
        })
    }

    pub fn pull(&self, sciunit: &mut Sciunit, reference: &str) -> Result<PullOutcome> {
        let (url, bytes) = self.get_bundle(reference)?;
        let manifests: Vec<Manifest> = import_bundle(sciunit, bytes.as_slice())?;
        Ok(PullOutcome {
            digest: Digest::of(&bytes).to_hex(),
            url,
            bytes: bytes.len() as u64,
            executions: manifests.into_iter().map(|m| m.execution_id).collect(),
        })
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Router of a minimal bundle repository storing files under `dir`.
pub fn repository_router(dir: PathBuf) -> Router {
    Router::new()
        .route("/bundles", get(list_bundles))
        .route("/bundles/{digest}", get(get_bundle).put(put_bundle))
        .layer(DefaultBodyLimit::disable())
        .with_state(Arc::new(dir))
}

async fn list_bundles(State(dir): State<Arc<PathBuf>>) -> impl IntoResponse {
    let mut names: Vec<String> = fs::read_dir(dir.as_path())
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| is_digest(n))
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    Json(names)
}

async fn get_bundle(State(dir): State<Arc<PathBuf>>, UrlPath(digest): UrlPath<String>) -> impl IntoResponse {
    if !is_digest(&digest) {
        return (StatusCode::BAD_REQUEST, Vec::new());
    }
    match tokio::fs::read(dir.join(&digest)).await {
        Ok(bytes) => (StatusCode::OK, bytes),
        Err(_) => (StatusCode::NOT_FOUND, Vec::new()),
    }
}

async fn put_bundle(
    State(dir): State<Arc<PathBuf>>,
    UrlPath(digest): UrlPath<String>,
    body: Bytes,
) -> impl IntoResponse {
    if !is_digest(&digest) {
        return (StatusCode::BAD_REQUEST, "resource name must be a sha256 hex digest".to_string());
    }
    if Digest::of(&body).to_hex() != digest {
        return (StatusCode::UNPROCESSABLE_ENTITY, "body does not match its digest".to_string());
    }
    let path = dir.join(&digest);
    if path.is_file() {
        return (StatusCode::OK, "already present".to_string());
    }
    let tmp = dir.join(format!(".{digest}.part"));
    let stored = async {
        tokio::fs::create_dir_all(dir.as_path()).await?;
        tokio::fs::write(&tmp, &body).await?;
        tokio::fs::rename(&tmp, &path).await
    };
    match stored.await {
        Ok(()) => (StatusCode::CREATED, "stored".to_string()),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
