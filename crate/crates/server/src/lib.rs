//! HTTP service: upload an HDR image, render it at any latent code, run the
//! latent search, fetch previews.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use tokio::net::TcpListener;

use tonescope::hdrio::{encode_png8, read_radiance_hdr, HdrImage};
use tonescope::latentopt::{candidate_sweep, LatentConfig, Objective};
use tonescope::networks::{GammaOverride, Model};
use tonescope_client::api::*;

/// Long edge of every preview and of the image the search runs on.
pub const PREVIEW_EDGE: usize = 512;
/// Previews kept per session; older ones are dropped.
pub const PREVIEWS_PER_SESSION: usize = 256;
pub const MAX_STARTS: usize = 32;
pub const MAX_ITERS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Internal(m) => {
                log::error!("request failed: {m}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_owned())
            }
        };
        (status, Json(ErrorBody { error: msg })).into_response()
    }
}

impl From<tonescope::Error> for ApiError {
    fn from(e: tonescope::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Session {
    objective: Objective,
    z: Vec<f64>,
    candidates: Vec<Candidate>,
    previews: VecDeque<String>,
}

/// Shared service state: one read-only model, sessions and preview blobs.
pub struct AppState {
    model: Model<f64>,
    sessions: RwLock<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    previews: Mutex<HashMap<String, Bytes>>,
}

fn token() -> String {
    format!("{:032x}", rand::rng().random::<u128>())
}

impl AppState {
    pub fn new(model: Model<f64>) -> Arc<Self> {
        Arc::new(Self {
            model,
            sessions: RwLock::default(),
            previews: Mutex::default(),
        })
    }

    /// Load weights up front so a bad file fails before serving.
    pub fn from_weights(path: impl AsRef<Path>) -> tonescope::Result<Arc<Self>> {
        Ok(Self::new(Model::<f32>::load(path)?.cast()))
    }

    pub fn d_z(&self) -> usize {
        self.model.config.d_z
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn store_preview(&self, session: &mut Session, png: Vec<u8>) -> String {
        let t = token();
        let mut previews = self.previews.lock().expect("preview map");
        previews.insert(t.clone(), Bytes::from(png));
        session.previews.push_back(t.clone());
        while session.previews.len() > PREVIEWS_PER_SESSION {
            if let Some(old) = session.previews.pop_front() {
                previews.remove(&old);
            }
        }
        format!("/preview/{t}")
    }

    fn render(&self, session: &mut Session, req: &RenderRequest) -> ApiResult<RenderResponse> {
        self.check_z(&req.z)?;
        let over = GammaOverride {
            gamma_base: req.gamma_base,
            gamma_post: req.gamma_post,
        };
        over.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let r = session.objective.render(&self.model, &req.z, over)?;
        let image = r.image.quantized();
        let score = session.objective.score_image(&image)?;
        let png = encode_png8(&image)?;
        session.z = req.z.clone();
        let preview_url = self.store_preview(session, png);
        Ok(RenderResponse {
            preview_url,
            q: score.q,
            s: score.s,
            n: score.n,
            gamma_base: r.gamma_base,
            gamma_post: r.gamma_post,
        })
    }

    fn check_z(&self, z: &[f64]) -> ApiResult<()> {
        if z.len() != self.d_z() {
            return Err(ApiError::BadRequest(format!(
                "z has {} entries, expected d_z = {}",
                z.len(),
                self.d_z()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::BadRequest("z must be finite".into()));
        }
        Ok(())
    }

    fn optimize(&self, session: &mut Session, req: OptimizeRequest) -> ApiResult<OptimizeResponse> {
        if !(1..=MAX_STARTS).contains(&req.starts) || req.iters > MAX_ITERS {
            return Err(ApiError::BadRequest(format!(
                "starts must be in 1..={MAX_STARTS} and iters at most {MAX_ITERS}"
            )));
        }
        let cfg = LatentConfig {
            iters: req.iters,
            ..LatentConfig::default()
        };
        let found = candidate_sweep(&self.model, &session.objective, req.starts, &cfg)?;
        let mut candidates = Vec::with_capacity(found.len());
        for c in found {
            let r = session.objective.render(&self.model, &c.z, GammaOverride::default())?;
            let png = encode_png8(&r.image.quantized())?;
            candidates.push(Candidate {
                preview_url: self.store_preview(session, png),
                z: c.z,
                q: c.score.q,
                s: c.score.s,
                n: c.score.n,
            });
        }
        session.candidates = candidates.clone();
        Ok(OptimizeResponse { candidates })
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SessionCreated>> {
    let st = state.clone();
    blocking(move || {
        let hdr = read_radiance_hdr(&body).map_err(|e| ApiError::BadRequest(format!("unreadable HDR upload: {e}")))?;
        let preview: HdrImage = hdr.downscale_to(PREVIEW_EDGE);
        let objective = Objective::new(&preview).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let mut session = Session {
            objective,
            z: vec![0.0; st.d_z()],
            candidates: Vec::new(),
            previews: VecDeque::new(),
        };
        let first = st.render(
            &mut session,
            &RenderRequest {
                z: vec![0.0; st.d_z()],
                ..RenderRequest::default()
            },
        )?;
        let id = token();
        st.sessions
            .write()
            .expect("session map")
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(Json(SessionCreated {
            session_id: id,
            d_z: st.d_z(),
            preview_url: first.preview_url,
        }))
    })
    .await
}

async fn render(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<RenderRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<RenderResponse>> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let mut session = state.session(&id)?.lock_owned().await;
    blocking(move || state.render(&mut session, &req).map(Json)).await
}

async fn optimize(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<OptimizeRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<OptimizeResponse>> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let mut session = state.session(&id)?.lock_owned().await;
    blocking(move || state.optimize(&mut session, req).map(Json)).await
}

async fn preview(State(state): State<Arc<AppState>>, UrlPath(t): UrlPath<String>) -> ApiResult<Response> {
    let png = state
        .previews
        .lock()
        .expect("preview map")
        .get(&t)
        .cloned()
        .ok_or_else(|| ApiError::NotFound("unknown preview".into()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}/render", post(render))
        .route("/session/{id}/optimize", post(optimize))
        .route("/preview/{token}", get(preview))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Bind `addr` and serve on a fresh multi-threaded runtime until the
/// process ends.
pub fn run(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, state).await
    })
}

/// Serve on an ephemeral local port from a background thread; returns the
/// base URL. Used by tests and the acceptance harness.
pub fn spawn_local(state: Arc<AppState>) -> std::io::Result<String> {
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("runtime");
        rt.block_on(async move {
            let listener = TcpListener::from_std(std_listener).expect("listener");
            serve(listener, state).await.expect("server");
        });
    });
    Ok(format!("http://{addr}"))
}
