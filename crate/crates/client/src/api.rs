use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 7734;
pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub d_z: usize,
    pub preview_url: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub z: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_post: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub preview_url: String,
    pub q: f64,
    pub s: f64,
    pub n: f64,
    pub gamma_base: f64,
    pub gamma_post: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizeRequest {
    pub starts: usize,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub z: Vec<f64>,
    pub q: f64,
    pub s: f64,
    pub n: f64,
    pub preview_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResponse {
    pub candidates: Vec<Candidate>,
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
