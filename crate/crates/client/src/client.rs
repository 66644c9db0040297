use std::time::Duration;

use reqwest::blocking::{RequestBuilder, Response};
use serde::de::DeserializeOwned;

use crate::api::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Status { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Blocking client bound to one service base URL, e.g.
/// `http://127.0.0.1:7734`.
#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(3600))
            .build()?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http,
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        if path.starts_with("http://") || path.starts_with("https://") {
            path.to_owned()
        } else {
            format!("{}{}", self.base, path)
        }
    }

    fn send(req: RequestBuilder) -> Result<Response> {
        let resp = req.send()?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let message = match serde_json_error(&text) {
            Some(m) => m,
            None => text,
        };
        Err(ClientError::Status { status, message })
    }

    fn json<T: DeserializeOwned>(req: RequestBuilder) -> Result<T> {
        Ok(Self::send(req)?.json()?)
    }

    pub fn health(&self) -> Result<()> {
        Self::send(self.http.get(self.url("/healthz")))?;
        Ok(())
    }

    /// Upload a Radiance `.hdr` file.
    pub fn create_session(&self, hdr_bytes: Vec<u8>) -> Result<SessionCreated> {
        Self::json(
            self.http
                .post(self.url("/session"))
                .header("content-type", "application/octet-stream")
                .body(hdr_bytes),
        )
    }

    pub fn render(&self, session: &str, req: &RenderRequest) -> Result<RenderResponse> {
        Self::json(self.http.post(self.url(&format!("/session/{session}/render"))).json(req))
    }

    pub fn optimize(&self, session: &str, req: OptimizeRequest) -> Result<OptimizeResponse> {
        Self::json(self.http.post(self.url(&format!("/session/{session}/optimize"))).json(&req))
    }

    /// PNG bytes behind a `preview_url` (relative or absolute).
    pub fn preview(&self, url: &str) -> Result<Vec<u8>> {
        Ok(Self::send(self.http.get(self.url(url)))?.bytes()?.to_vec())
    }
}

fn serde_json_error(text: &str) -> Option<String> {
    let body: ErrorBody = serde_json::from_str(text).ok()?;
    Some(body.error)
}
