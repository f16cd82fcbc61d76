//! HTTP routes.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::Multipart;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::model::{view_from_name, ClassifyInput, ErrorKind, LoadedModel, RequestError, THREE_VIEWS};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

/// Read-only state shared by all requests. The first model is the default.
#[derive(Debug, Clone, Default)]
pub struct AppState {
    pub models: Vec<Arc<LoadedModel>>,
}

#[derive(Debug, Clone, Default)]
pub struct RouterOptions {
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        let status = match self.kind {
            ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ErrorKind::TooLarge => StatusCode::PAYLOAD_TOO_LARGE,
        };
        (status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: AppState, opts: &RouterOptions) -> anyhow::Result<Router> {
    let origins = if opts.cors_origins.is_empty() {
        AllowOrigin::any()
    } else {
        let parsed = opts
            .cors_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| anyhow::anyhow!("invalid CORS origin {o:?}")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        AllowOrigin::list(parsed)
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/classify", post(classify))
        .with_state(Arc::new(state));
    if let Some(dir) = &opts.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    Ok(app.layer(DefaultBodyLimit::max(MAX_BODY_BYTES)).layer(cors))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.models.first() {
        Some(m) => Json(json!({ "status": "ok", "model_id": m.model_id })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "no-model", "model_id": null })),
        )
            .into_response(),
    }
}

async fn models(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<_> = state.models.iter().map(|m| m.info()).collect();
    Json(json!({ "models": list })).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRequest {
    frontal: Option<String>,
    left: Option<String>,
    right: Option<String>,
    #[serde(default)]
    sequences: Option<JsonSequences>,
    #[serde(default)]
    model_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSequences {
    frontal: Option<Vec<String>>,
    left: Option<Vec<String>>,
    right: Option<Vec<String>>,
}

fn b64(view: &str, s: &str) -> Result<Vec<u8>, RequestError> {
    STANDARD
        .decode(s)
        .map_err(|e| RequestError::bad_request(format!("{view} is not valid base64: {e}")))
}

fn too_large() -> RequestError {
    RequestError {
        kind: ErrorKind::TooLarge,
        message: format!("request body exceeds {MAX_BODY_BYTES} bytes"),
    }
}

async fn parse_json(req: Request) -> Result<ClassifyInput, RequestError> {
    let bytes = axum::body::Bytes::from_request(req, &()).await.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large()
        } else {
            RequestError::bad_request(e.body_text())
        }
    })?;
    let body: JsonRequest =
        serde_json::from_slice(&bytes).map_err(|e| RequestError::bad_request(format!("invalid JSON body: {e}")))?;
    let mut input = ClassifyInput {
        model_id: body.model_id,
        ..ClassifyInput::default()
    };
    for (k, (name, img)) in [("frontal", body.frontal), ("left", body.left), ("right", body.right)]
        .into_iter()
        .enumerate()
    {
        if let Some(s) = img {
            input.images[k] = Some(b64(name, &s)?);
        }
    }
    if let Some(seq) = body.sequences {
        for (k, (name, frames)) in [("frontal", seq.frontal), ("left", seq.left), ("right", seq.right)]
            .into_iter()
            .enumerate()
        {
            if let Some(frames) = frames {
                input.sequences[k] = Some(frames.iter().map(|f| b64(name, f)).collect::<Result<_, _>>()?);
            }
        }
    }
    Ok(input)
}

async fn parse_multipart(req: Request) -> Result<ClassifyInput, RequestError> {
    let mut mp = Multipart::from_request(req, &())
        .await
        .map_err(|e| RequestError::bad_request(e.body_text()))?;
    let mut input = ClassifyInput::default();
    let field_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large()
        } else {
            RequestError::bad_request(format!("malformed multipart body: {}", e.body_text()))
        }
    };
    while let Some(field) = mp.next_field().await.map_err(field_err)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(field_err)?.to_vec();
        if name == "model_id" {
            input.model_id = Some(String::from_utf8_lossy(&data).trim().to_string());
        } else if let Some(view) = view_from_name(&name) {
            input.set_image(view, data)?;
        } else if let Some(view) = name.strip_suffix("_frames").and_then(view_from_name) {
            input.push_frame(view, data);
        } else {
            return Err(RequestError::bad_request(format!("unexpected form field {name:?}")));
        }
    }
    Ok(input)
}

async fn classify(State(state): State<Arc<AppState>>, req: Request) -> Result<Response, RequestError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if let Some(len) = req
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
    {
        if len > MAX_BODY_BYTES {
            return Err(too_large());
        }
    }
    let input = if content_type.starts_with("multipart/form-data") {
        parse_multipart(req).await?
    } else if content_type.starts_with("application/json") {
        parse_json(req).await?
    } else {
        return Err(RequestError::bad_request(
            "content type must be multipart/form-data or application/json",
        ));
    };
    if input.images.iter().any(Option::is_none) {
        return Err(RequestError::bad_request(THREE_VIEWS));
    }
    let model = select_model(&state, input.model_id.as_deref())?;
    let response = tokio::task::spawn_blocking(move || model.classify(&input))
        .await
        .map_err(|e| RequestError::bad_request(format!("classification task failed: {e}")))??;
    Ok(Json(response).into_response())
}

fn select_model(state: &AppState, id: Option<&str>) -> Result<Arc<LoadedModel>, RequestError> {
    let first = state.models.first().ok_or_else(|| RequestError {
        kind: ErrorKind::Unavailable,
        message: "no checkpoint loaded".into(),
    })?;
    match id {
        None => Ok(first.clone()),
        Some(id) => state
            .models
            .iter()
            .find(|m| m.model_id == id)
            .cloned()
            .ok_or_else(|| RequestError {
                kind: ErrorKind::NotFound,
                message: format!("unknown model_id {id:?}"),
            }),
    }
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: SocketAddr, app: Router) -> anyhow::Result<()> {
    let listener = bind(addr).await?;
    axum::serve(listener, app).await?;
    Ok(())
}

pub async fn bind(addr: SocketAddr) -> anyhow::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot listen on {addr}: {e}"))
}
