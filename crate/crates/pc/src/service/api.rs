use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pc_core::training::TuneConfig;
use serde_json::{json, Value};
use tower_http::limit::RequestBodyLimitLayer;
use tower_http::trace::TraceLayer;

use super::ops::{direction_json, NewSubject};
use super::{ComposeRequest, EditBody, EvalRequest, GenerateRequest, NewDirection, Service};
use crate::PcError;

/// An HTTP error with a JSON body `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }
}

impl From<pc_core::Error> for ApiError {
    fn from(e: pc_core::Error) -> Self {
        use pc_core::Error as E;
        let (status, code) = match e.root() {
            E::Validation(_) | E::Dimension { .. } | E::Precondition(_) | E::MetricRange(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            E::Lookup { .. } => (StatusCode::NOT_FOUND, "not_found"),
            E::Compatibility { .. } => (StatusCode::CONFLICT, "incompatible"),
            E::FaceNotDetected(_) => (StatusCode::UNPROCESSABLE_ENTITY, "face_not_detected"),
            E::InsufficientInstances { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_instances"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<PcError> for ApiError {
    fn from(e: PcError) -> Self {
        match e {
            PcError::Core(c) => c.into(),
            PcError::Image(i) => Self::bad_request(format!("image: {i}")),
            other => {
                tracing::error!("{other}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "code": self.code, "message": self.message } }));
        (self.status, body).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Svc = State<Arc<Service>>;

/// Every endpoint, with the configured body limit.
pub fn router(svc: Arc<Service>) -> Router {
    let limit = svc.cfg.max_body_bytes;
    Router::new()
        .route("/config", get(config))
        .route("/subjects", post(create_subject).get(list_subjects))
        .route("/subjects/{id}", get(get_subject).delete(delete_subject))
        .route("/generate", post(generate))
        .route("/edit", post(edit))
        .route("/compose", post(compose))
        .route("/eval", post(eval))
        .route("/jobs/{id}", get(get_job))
        .route("/artifacts/{hash}", get(get_artifact))
        .route("/directions", get(list_directions).post(add_direction))
        .layer(DefaultBodyLimit::max(limit))
        .layer(RequestBodyLimitLayer::new(limit))
        .layer(TraceLayer::new_for_http())
        .with_state(svc)
}

/// Parses a JSON body, turning serde errors into 400s that name the field.
fn parse<T: serde::de::DeserializeOwned>(body: Result<Json<T>, axum::extract::rejection::JsonRejection>) -> ApiResult<T> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::new(e.status(), "invalid_request", e.body_text()))
}

fn accepted(record: super::JobRecord) -> Response {
    (StatusCode::ACCEPTED, Json(record)).into_response()
}

async fn config(State(svc): Svc) -> Json<Value> {
    Json(svc.config_json())
}

async fn create_subject(State(svc): Svc, mut form: Multipart) -> ApiResult<Response> {
    let mut req = NewSubject {
        subject_id: None,
        image: Vec::new(),
        tune: false,
        tune_cfg: TuneConfig::default(),
    };
    let mut has_image = false;
    let field_err = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), "invalid_request", e.body_text());
    while let Some(field) = form.next_field().await.map_err(field_err)? {
        let name = field.name().unwrap_or_default().to_owned();
        match name.as_str() {
            "image" => {
                req.image = field.bytes().await.map_err(field_err)?.to_vec();
                has_image = true;
            }
            "subject_id" => req.subject_id = Some(field.text().await.map_err(field_err)?).filter(|s| !s.is_empty()),
            "tune" => {
                let v = field.text().await.map_err(field_err)?;
                req.tune = match v.trim() {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" | "" => false,
                    other => return Err(ApiError::bad_request(format!("tune must be true or false, got '{other}'"))),
                };
            }
            "tune_cfg" => {
                let v = field.text().await.map_err(field_err)?;
                req.tune_cfg =
                    serde_json::from_str(&v).map_err(|e| ApiError::bad_request(format!("tune_cfg: {e}")))?;
            }
            other => return Err(ApiError::bad_request(format!("unexpected form field '{other}'"))),
        }
    }
    if !has_image {
        return Err(ApiError::bad_request("form field 'image' is required"));
    }
    let svc2 = Arc::clone(&svc);
    let record = tokio::task::spawn_blocking(move || svc2.submit_subject(req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(accepted(record))
}

async fn list_subjects(State(svc): Svc) -> ApiResult<Json<Value>> {
    let entries = svc.store().subjects()?;
    Ok(Json(Value::Array(entries.iter().map(|e| svc.subject_json(e)).collect())))
}

async fn get_subject(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = svc.entry(&id)?;
    let profile = svc.store().load_profile(&entry)?;
    let mut v = svc.subject_json(&entry);
    v["alpha"] = json!(profile.alpha());
    v["T"] = json!(profile.token_schedule().len());
    v["w_shape"] = json!(profile.w().shape());
    v["lora_ranks"] = json!(profile.lora().iter().map(|d| (d.target().to_owned(), d.rank())).collect::<Vec<_>>());
    Ok(Json(v))
}

async fn delete_subject(State(svc): Svc, Path(id): Path<String>) -> ApiResult<StatusCode> {
    if !super::valid_subject_id(&id) || !svc.store().delete_subject(&id)? {
        return Err(ApiError::not_found(format!("unknown subject '{id}'")));
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn generate(
    State(svc): Svc,
    body: Result<Json<GenerateRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    Ok(accepted(svc.submit_generate(parse(body)?)?))
}

async fn edit(
    State(svc): Svc,
    body: Result<Json<EditBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    Ok(accepted(svc.submit_edit(parse(body)?)?))
}

async fn compose(
    State(svc): Svc,
    body: Result<Json<ComposeRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    Ok(accepted(svc.submit_compose(parse(body)?)?))
}

async fn eval(
    State(svc): Svc,
    body: Result<Json<EvalRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    Ok(accepted(svc.submit_eval(parse(body)?)?))
}

async fn get_job(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<super::JobRecord>> {
    svc.jobs()
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job '{id}'")))
}

async fn get_artifact(State(svc): Svc, Path(hash): Path<String>) -> ApiResult<Response> {
    let (bytes, mime) = svc
        .store()
        .get_artifact(&hash)?
        .ok_or_else(|| ApiError::not_found(format!("unknown artifact '{hash}'")))?;
    Ok((
        [
            (header::CONTENT_TYPE, mime),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn list_directions(State(svc): Svc) -> Json<Value> {
    Json(Value::Array(svc.catalog().iter().map(direction_json).collect()))
}

async fn add_direction(
    State(svc): Svc,
    body: Result<Json<NewDirection>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let created = svc.add_direction(parse(body)?)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}
