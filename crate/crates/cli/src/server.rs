//! HTTP front end over one immutable scene.
//!
//! | route          | body                                                   | reply            |
//! |----------------|--------------------------------------------------------|------------------|
//! | `GET /meta`    |                                                        | JSON scene info  |
//! | `POST /render` | `{camera, width, height}`                              | PNG color render |
//! | `POST /query`  | `{camera, width, height, query, level?, window?, method?}` | JSON + base64 PNG overlay |
//!
//! `camera` is `{eye, target, up?, fov_y_deg?}`; `query` is a name from the
//! loaded query set or a raw D-vector; `level` is `"auto"` or an index.
//! Every response carries an `x-request-id` header, echoing the client's
//! when it sent a usable one.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsesplat::camera::CameraPose;
use sparsesplat::io::QuerySetFile;
use sparsesplat::query::{QueryEmbedding, DEFAULT_FILTER_WINDOW};
use sparsesplat::raster::{render_dense, ChannelSource, RenderOptions};
use sparsesplat::sparse::{QuerySettings, RenderMethod};
use sparsesplat::{Camera, Error, Scene};

use crate::overlay::{color_bytes, encode_png};
use crate::report::{parse_level, run_query, QueryReport};

pub const DEFAULT_PORT: u16 = 7878;
pub const DEFAULT_MAX_PIXELS: usize = 1 << 20;
pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// Scene, query palette and limits shared by every request.
#[derive(Debug)]
pub struct ServeSession {
    scene: Scene,
    queries: QuerySetFile,
    max_pixels: usize,
}

impl ServeSession {
    pub fn new(scene: Scene, queries: QuerySetFile, max_pixels: usize) -> anyhow::Result<Self> {
        scene.validate().context("scene failed validation")?;
        queries.validate()?;
        anyhow::ensure!(
            queries.dim == scene.config.feature_dim,
            "query set has D={}, scene has D={}",
            queries.dim,
            scene.config.feature_dim
        );
        anyhow::ensure!(max_pixels > 0, "pixel cap must be positive");
        Ok(Self {
            scene,
            queries,
            max_pixels,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseBody {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_y_deg: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, -1.0, 0.0]
}

fn default_fov() -> f64 {
    45.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    camera: PoseBody,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum QueryField {
    Name(String),
    Vector(Vec<f32>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum LevelField {
    Index(usize),
    Word(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    camera: PoseBody,
    width: usize,
    height: usize,
    query: QueryField,
    #[serde(default)]
    level: Option<LevelField>,
    #[serde(default)]
    window: Option<usize>,
    #[serde(default)]
    method: Option<RenderMethod>,
}

#[derive(Debug, Clone)]
struct RequestId(String);

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
    request_id: String,
}

impl ApiError {
    fn new(status: StatusCode, id: &RequestId, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            request_id: id.0.clone(),
        }
    }

    fn from_library(id: &RequestId, e: Error) -> Self {
        let status = match e {
            Error::Validation(_) | Error::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            Error::ResourceExhausted { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, id, e.to_string())
    }

    fn from_anyhow(id: &RequestId, e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(lib) => Self::from_library(id, lib),
            Err(other) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, id, format!("{other:#}")),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "request_id": self.request_id, "error": self.message }));
        (self.status, body).into_response()
    }
}

type Shared = Arc<ServeSession>;

pub fn router(session: Shared) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/render", post(render))
        .route("/query", post(query))
        .layer(middleware::from_fn(tag_request))
        .with_state(session)
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn usable_client_id(v: &HeaderValue) -> Option<String> {
    let s = v.to_str().ok()?;
    (!s.is_empty() && s.len() <= 128 && s.bytes().all(|b| b.is_ascii_graphic())).then(|| s.to_owned())
}

async fn tag_request(mut req: Request, next: Next) -> Response {
    let id = req
        .headers()
        .get(REQUEST_ID_HEADER)
        .and_then(usable_client_id)
        .unwrap_or_else(|| format!("req-{}", NEXT_ID.fetch_add(1, Ordering::Relaxed)));
    req.extensions_mut().insert(RequestId(id.clone()));
    let mut resp = next.run(req).await;
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    resp
}

fn parse_body<T: for<'de> Deserialize<'de>>(id: &RequestId, body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, id, format!("malformed request: {e}")))
}

fn camera_for(session: &ServeSession, id: &RequestId, pose: &PoseBody, width: usize, height: usize) -> Result<Camera, ApiError> {
    if width == 0 || height == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, id, "width and height must be positive"));
    }
    match width.checked_mul(height) {
        Some(n) if n <= session.max_pixels => {}
        _ => {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                id,
                format!("{width}x{height} exceeds the cap of {} pixels", session.max_pixels),
            ))
        }
    }
    let pose = CameraPose {
        eye: pose.eye,
        target: pose.target,
        up: pose.up,
        fov_y_deg: pose.fov_y_deg,
        width,
        height,
    };
    Camera::look_at(&pose).map_err(|e| ApiError::from_library(id, e))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(
    id: &RequestId,
    f: impl FnOnce() -> anyhow::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(|e| ApiError::from_anyhow(id, e)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, id, format!("worker failed: {e}"))),
    }
}

#[derive(Serialize)]
struct MetaResponse {
    request_id: String,
    num_gaussians: usize,
    feature_dim: usize,
    num_atoms: usize,
    top_k: usize,
    num_levels: usize,
    blend_width: usize,
    /// Axis-aligned bounds of the Gaussian centers.
    bounds: Option<[[f32; 3]; 2]>,
    max_pixels: usize,
    queries: Vec<String>,
}

async fn meta(State(s): State<Shared>, Extension(id): Extension<RequestId>) -> Json<MetaResponse> {
    let cfg = s.scene.config;
    let bounds = s.scene.gaussians.iter().fold(None, |acc: Option<[[f32; 3]; 2]>, g| {
        let [lo, hi] = acc.unwrap_or([g.position, g.position]);
        Some([
            std::array::from_fn(|i| lo[i].min(g.position[i])),
            std::array::from_fn(|i| hi[i].max(g.position[i])),
        ])
    });
    Json(MetaResponse {
        request_id: id.0,
        num_gaussians: s.scene.len(),
        feature_dim: cfg.feature_dim,
        num_atoms: cfg.num_atoms,
        top_k: cfg.top_k,
        num_levels: cfg.num_levels,
        blend_width: cfg.blend_width(),
        bounds,
        max_pixels: s.max_pixels,
        queries: s.queries.names().into_iter().map(String::from).collect(),
    })
}

async fn render(State(s): State<Shared>, Extension(id): Extension<RequestId>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_body(&id, &body)?;
    let cam = camera_for(&s, &id, &req.camera, req.width, req.height)?;
    let png = blocking(&id, move || {
        let fb = render_dense(&s.scene, &cam, &ChannelSource::Color, &RenderOptions::default())?;
        encode_png(cam.width, cam.height, &color_bytes(&fb)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Serialize)]
struct QueryResponse {
    request_id: String,
    #[serde(flatten)]
    report: QueryReport,
    overlay_png: String,
}

async fn query(State(s): State<Shared>, Extension(id): Extension<RequestId>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let req: QueryRequest = parse_body(&id, &body)?;
    let cam = camera_for(&s, &id, &req.camera, req.width, req.height)?;
    let embedding = match req.query {
        QueryField::Name(name) => s.queries.find(&name).map_err(|e| ApiError::from_library(&id, e))?,
        QueryField::Vector(v) => QueryEmbedding::new("vector", v),
    };
    let level = match req.level {
        None => sparsesplat::sparse::LevelChoice::Auto,
        Some(LevelField::Index(i)) => sparsesplat::sparse::LevelChoice::Fixed(i),
        Some(LevelField::Word(w)) => parse_level(&w).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, &id, e.to_string()))?,
    };
    let settings = QuerySettings {
        window: req.window.unwrap_or(DEFAULT_FILTER_WINDOW),
        level,
        method: req.method.unwrap_or(RenderMethod::Sparse),
        ..Default::default()
    };
    let (report, png) = blocking(&id, move || {
        run_query(&s.scene, &cam, &embedding, &s.queries.canonicals, &settings, true)
    })
    .await?;
    Ok(Json(QueryResponse {
        request_id: id.0,
        report,
        overlay_png: base64::engine::general_purpose::STANDARD.encode(png.unwrap_or_default()),
    }))
}
