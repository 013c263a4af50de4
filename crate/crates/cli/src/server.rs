//! HTTP API backing the correspondence editor.
//!
//! Readers share the session; correspondence commits take the write lock, so
//! concurrent commits apply one at a time and each bumps the revision.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::Result;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lw_core::propagate::{propagate_edit, warp_edit_to_source};
use lw_core::session::{self, frame_name};
use lw_core::tps::{self, PointPair};
use lw_core::{imageio, EditBundle, LayeredVideo, Raster};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use crate::commands::{check_resolution, DEFAULT_OUT};
use crate::exit::{staged, Failure};

/// Mutable session state guarded by the service lock.
pub struct SessionHandle {
    pub bundle: EditBundle,
    pub revision: u64,
    previews: HashMap<bool, Bytes>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running { revision: u64 },
    Done { revision: u64, report: Value },
    Failed { revision: u64, error: String, stage: Option<String> },
}

pub struct AppState {
    root: PathBuf,
    video: Arc<LayeredVideo>,
    session: RwLock<SessionHandle>,
    jobs: Mutex<HashMap<u64, JobStatus>>,
    next_job: AtomicU64,
    /// Serializes propagation runs, which share the output directory.
    propagation: Arc<Mutex<()>>,
    ui: Option<PathBuf>,
}

impl AppState {
    pub fn open(root: &Path, full_res: bool, ui: Option<PathBuf>) -> Result<Arc<Self>> {
        let config = session::read_config(root).map_err(staged("load"))?;
        check_resolution((config.frame_size[0], config.frame_size[1]), full_res)?;
        let video = session::load_video(root, None).map_err(staged("load"))?;
        let bundle = session::load_bundle(root, video.keyframe_index()).map_err(staged("load"))?;
        Ok(Arc::new(Self {
            root: root.to_path_buf(),
            video: Arc::new(video),
            session: RwLock::new(SessionHandle {
                bundle,
                revision: 0,
                previews: HashMap::new(),
            }),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            propagation: Arc::new(Mutex::new(())),
            ui,
        }))
    }

    pub async fn revision(&self) -> u64 {
        self.session.read().await.revision
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session_info))
        .route("/api/frame/{file}", get(frame_png))
        .route("/api/keyframe/{file}", get(keyframe_png))
        .route("/api/correspondence", get(get_correspondence).put(put_correspondence))
        .route("/api/preview", post(preview))
        .route("/api/propagate", post(start_propagation))
        .route("/api/job/{id}", get(job_status));
    let app = match &state.ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    app.with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn png(bytes: impl Into<Bytes>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes.into()).into_response()
}

async fn index() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><title>lw</title><h1>lw session service</h1>",
        "<p>No UI assets configured; start with <code>--ui DIR</code>. API under <code>/api/</code>.</p>"
    ))
}

async fn session_info(State(s): State<Arc<AppState>>) -> Json<Value> {
    let (w, h) = s.video.frame_size();
    Json(json!({
        "frames": s.video.frame_count(),
        "keyframe": s.video.keyframe_index(),
        "frame_size": [w, h],
        "revision": s.revision().await,
    }))
}

async fn read_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => png(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => error(StatusCode::NOT_FOUND, "not found"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn frame_png(State(s): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> Response {
    let n = s.video.frame_count();
    match file.strip_suffix(".png").and_then(|i| i.parse::<usize>().ok()) {
        Some(j) if (1..=n).contains(&j) => read_file(s.root.join("frames").join(frame_name(j, "png"))).await,
        _ => error(StatusCode::NOT_FOUND, format!("no frame {file:?}; frames are 1.png..{n}.png")),
    }
}

async fn keyframe_png(State(s): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> Response {
    match file.as_str() {
        "source.png" | "edited.png" => read_file(s.root.join("edit").join(file)).await,
        _ => error(StatusCode::NOT_FOUND, "expected source.png or edited.png"),
    }
}

async fn get_correspondence(State(s): State<Arc<AppState>>) -> Json<Vec<PointPair>> {
    Json(s.session.read().await.bundle.correspondence.pairs())
}

/// At least three pairs inside the frame whose spline can be fitted.
pub fn validate_pairs(pairs: &[PointPair], (w, h): (usize, usize)) -> std::result::Result<lw_core::ThinPlateSpline, String> {
    if pairs.len() < 3 {
        return Err(format!("need at least 3 non-collinear point pairs, got {}", pairs.len()));
    }
    let inside = |p: [f64; 2]| p.iter().all(|v| v.is_finite()) && (0.0..=(w - 1) as f64).contains(&p[0]) && (0.0..=(h - 1) as f64).contains(&p[1]);
    if let Some((i, _)) = pairs.iter().enumerate().find(|(_, p)| !inside(p.src) || !inside(p.dst)) {
        return Err(format!("pair {i} lies outside the {w}x{h} frame"));
    }
    let (src, dst) = tps::split_pairs(pairs);
    tps::fit_tps(&src, &dst, 0.0).map_err(|e| e.to_string())
}

async fn put_correspondence(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let pairs: Vec<PointPair> = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid correspondence JSON: {e}")),
    };
    let tps = match validate_pairs(&pairs, s.video.frame_size()) {
        Ok(t) => t,
        Err(msg) => return error(StatusCode::UNPROCESSABLE_ENTITY, msg),
    };
    let mut session = s.session.write().await;
    let path = s.root.join(session::CORRESPONDENCE_FILE);
    let write = tokio::task::spawn_blocking(move || tps::write_correspondence(&path, &pairs)).await;
    match write {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
    session.bundle = session.bundle.with_correspondence(tps);
    session.revision += 1;
    session.previews.clear();
    StatusCode::NO_CONTENT.into_response()
}

#[derive(Debug, Deserialize)]
struct PreviewQuery {
    #[serde(default)]
    overlay: u8,
}

/// Edited keyframe pulled into source shape, optionally blended 50/50 over
/// the source keyframe.
pub fn render_preview(bundle: &EditBundle, overlay: bool) -> lw_core::Result<Vec<u8>> {
    let warped = warp_edit_to_source(bundle)?;
    let img = if overlay {
        let data = warped
            .data()
            .iter()
            .zip(bundle.source_keyframe.data())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Raster::from_vec(warped.width(), warped.height(), warped.channels(), data)?
    } else {
        warped
    };
    imageio::encode_png(&img)
}

async fn preview(State(s): State<Arc<AppState>>, Query(q): Query<PreviewQuery>) -> Response {
    let overlay = q.overlay != 0;
    let (bundle, revision) = {
        let session = s.session.read().await;
        if let Some(bytes) = session.previews.get(&overlay) {
            return png(bytes.clone());
        }
        (session.bundle.clone(), session.revision)
    };
    let bytes = match tokio::task::spawn_blocking(move || render_preview(&bundle, overlay)).await {
        Ok(Ok(b)) => Bytes::from(b),
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let mut session = s.session.write().await;
    if session.revision == revision {
        session.previews.insert(overlay, bytes.clone());
    }
    png(bytes)
}

fn run_propagation(root: &Path, video: &LayeredVideo, bundle: &EditBundle) -> anyhow::Result<Value> {
    let out = root.join(DEFAULT_OUT);
    let result = propagate_edit(video, bundle).map_err(staged("propagate"))?;
    session::write_result(&out, &result).map_err(staged("write"))?;
    let report = session::build_report(root, video, bundle, &result).map_err(staged("report"))?;
    session::write_report(&out.join("report.json"), &report).map_err(staged("write"))?;
    Ok(serde_json::to_value(report)?)
}

async fn start_propagation(State(s): State<Arc<AppState>>) -> Response {
    let (bundle, revision) = {
        let session = s.session.read().await;
        (session.bundle.clone(), session.revision)
    };
    let id = s.next_job.fetch_add(1, Ordering::Relaxed);
    s.jobs.lock().expect("job table").insert(id, JobStatus::Running { revision });
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let status = {
            let _guard = state.propagation.lock().unwrap_or_else(|p| p.into_inner());
            match run_propagation(&state.root, &state.video, &bundle) {
                Ok(report) => JobStatus::Done { revision, report },
                Err(e) => {
                    let f = Failure::classify(&e);
                    JobStatus::Failed {
                        revision,
                        error: f.message,
                        stage: f.stage,
                    }
                }
            }
        };
        state.jobs.lock().expect("job table").insert(id, status);
    });
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

async fn job_status(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Response {
    match s.jobs.lock().expect("job table").get(&id) {
        Some(status) => Json(status.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no job {id}")),
    }
}
