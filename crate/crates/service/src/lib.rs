//! Local HTTP front end over the segmentation pipeline.
//!
//! Routes:
//! - `POST /volumes` upload base64 NIfTI image, organ and optional tumor masks
//! - `GET /volumes/{id}` metadata
//! - `GET /volumes/{id}/slice?axis=z&index=..&channel=image&format=pgm|json`
//! - `POST /volumes/{id}/segment` explicit point prompts
//! - `GET /health`
//!
//! Masks travel as [`Rle`] over the z-major flattening.

pub mod error;
pub mod rle;

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use tags_core::autograd::ParamStore;
use tags_core::head::{PointLabel, PointPrompt};
use tags_core::io::{parse_nifti, LoadedCase};
use tags_core::metrics::dice;
use tags_core::model::TagsModel;
use tags_core::pipeline::{config_hash, infer, preprocess, Checkpoint, PreprocessConfig, ProbStats};
use tags_core::volume::{MaskVolume, ModelInput};

pub use error::ApiError;
pub use rle::Rle;

pub const MAX_POINTS: usize = 10;

/// Weights plus the preprocessing they were trained with.
pub struct ModelHandle {
    pub model: TagsModel,
    pub store: ParamStore,
    pub preprocess: PreprocessConfig,
    pub config_hash: String,
}

impl ModelHandle {
    pub fn from_checkpoint(ckpt: Checkpoint) -> tags_core::Result<Self> {
        let model = ckpt.model()?;
        let preprocess = ckpt
            .manifest
            .train_config
            .as_ref()
            .map(|c| c.preprocess.clone())
            .unwrap_or_default();
        Ok(ModelHandle {
            model,
            config_hash: ckpt.manifest.config_hash.clone(),
            store: ckpt.store,
            preprocess,
        })
    }

    pub fn new(model: TagsModel, store: ParamStore, preprocess: PreprocessConfig) -> Self {
        ModelHandle {
            config_hash: config_hash(&model.cfg),
            model,
            store,
            preprocess,
        }
    }
}

pub struct Session {
    pub input: ModelInput,
    pub organ: MaskVolume,
    pub tumor: Option<MaskVolume>,
    pub last_mask: RwLock<Option<MaskVolume>>,
}

struct Inner {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
    model: Option<Arc<ModelHandle>>,
    /// Serializes segmentation; tokio's mutex grants the lock in FIFO order.
    infer_lock: tokio::sync::Mutex<()>,
    default_preprocess: PreprocessConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: Option<ModelHandle>) -> Self {
        AppState(Arc::new(Inner {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            model: model.map(Arc::new),
            infer_lock: tokio::sync::Mutex::new(()),
            default_preprocess: PreprocessConfig::default(),
        }))
    }

    fn preprocess_cfg(&self) -> PreprocessConfig {
        self.0
            .model
            .as_ref()
            .map(|m| m.preprocess.clone())
            .unwrap_or_else(|| self.0.default_preprocess.clone())
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.0
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_volume", format!("no volume with id {id}")))
    }

    /// Preprocesses and registers a volume; every call gets a fresh id.
    pub fn insert(&self, case: &LoadedCase, has_tumor: bool) -> Result<String, ApiError> {
        let prepared = preprocess(case, &self.preprocess_cfg())?;
        let id = format!("vol-{}", self.0.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            organ: prepared.input.organ(),
            input: prepared.input,
            tumor: has_tumor.then_some(prepared.tumor),
            last_mask: RwLock::new(None),
        };
        self.0
            .sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(session));
        Ok(id)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/volumes", post(upload))
        .route("/volumes/{id}", get(metadata))
        .route("/volumes/{id}/slice", get(slice))
        .route("/volumes/{id}/segment", post(segment))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub config_hash: Option<String>,
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: st.0.model.is_some(),
        config_hash: st.0.model.as_ref().map(|m| m.config_hash.clone()),
    })
}

/// Base64-encoded NIfTI-1 files (optionally gzipped).
#[derive(Debug, Serialize, Deserialize)]
pub struct UploadRequest {
    pub image: String,
    pub organ: String,
    #[serde(default)]
    pub tumor: Option<String>,
    #[serde(default)]
    pub organ_name: Option<String>,
}

impl UploadRequest {
    pub fn from_nifti(image: &[u8], organ: &[u8], tumor: Option<&[u8]>) -> Self {
        UploadRequest {
            image: B64.encode(image),
            organ: B64.encode(organ),
            tumor: tumor.map(|t| B64.encode(t)),
            organ_name: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeInfo {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub has_tumor: bool,
    pub organ_voxels: usize,
}

fn info(id: &str, s: &Session) -> VolumeInfo {
    VolumeInfo {
        id: id.to_string(),
        dims: s.input.shape(),
        spacing: s.input.spacing,
        has_tumor: s.tumor.is_some(),
        organ_voxels: s.organ.count(),
    }
}

fn decode_field(name: &str, b64: &str) -> Result<tags_core::io::RawVolume, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request("parse_error", format!("{name}: base64: {e}")))?;
    parse_nifti(&bytes).map_err(|e| ApiError::bad_request("parse_error", format!("{name}: {e}")))
}

async fn upload(State(st): State<AppState>, Json(req): Json<UploadRequest>) -> Result<Json<VolumeInfo>, ApiError> {
    let image = decode_field("image", &req.image)?.into_volume()?;
    let organ = decode_field("organ", &req.organ)?.into_mask()?;
    let has_tumor = req.tumor.is_some();
    let tumor = match &req.tumor {
        Some(t) => decode_field("tumor", t)?.into_mask()?,
        None => MaskVolume::zeros(organ.shape(), organ.spacing()),
    };
    for (name, shape) in [("organ", organ.shape()), ("tumor", tumor.shape())] {
        if shape != image.shape() {
            return Err(ApiError::bad_request(
                "shape_mismatch",
                format!("{name} mask {shape:?} differs from image {:?}", image.shape()),
            ));
        }
    }
    let case = LoadedCase {
        id: String::new(),
        organ_name: req.organ_name.unwrap_or_else(|| "organ".into()),
        image,
        organ,
        tumor,
    };
    let id = st.insert(&case, has_tumor)?;
    let s = st.session(&id)?;
    Ok(Json(info(&id, &s)))
}

async fn metadata(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<VolumeInfo>, ApiError> {
    let s = st.session(&id)?;
    Ok(Json(info(&id, &s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    Z,
    Y,
    X,
}

impl SliceAxis {
    pub fn index(self) -> usize {
        match self {
            SliceAxis::Z => 0,
            SliceAxis::Y => 1,
            SliceAxis::X => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SliceChannel {
    #[default]
    Image,
    Organ,
    Tumor,
    /// Most recent segmentation of this volume.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SliceFormat {
    #[default]
    Pgm,
    Json,
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: SliceAxis,
    pub index: usize,
    #[serde(default)]
    pub channel: SliceChannel,
    #[serde(default)]
    pub format: SliceFormat,
}

/// JSON slice payload: grayscale bytes plus binary overlays.
#[derive(Debug, Serialize, Deserialize)]
pub struct SlicePayload {
    pub axis: SliceAxis,
    pub index: usize,
    pub height: usize,
    pub width: usize,
    /// Base64 of `height * width` 8-bit pixels, row-major.
    pub pixels: String,
    pub organ: Rle,
    pub tumor: Option<Rle>,
    pub mask: Option<Rle>,
}

fn plane<T: Copy>(v: ArrayView3<'_, T>, axis: SliceAxis, index: usize) -> Result<Array2<T>, ApiError> {
    let extent = v.shape()[axis.index()];
    if index >= extent {
        return Err(ApiError::not_found(
            "slice_out_of_range",
            format!("index {index} outside 0..{extent} on axis {axis:?}"),
        ));
    }
    Ok(v.index_axis(Axis(axis.index()), index).to_owned())
}

/// 8-bit grayscale of a `[0, 1]` intensity.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn mask_plane(m: &MaskVolume, axis: SliceAxis, index: usize) -> Result<Array2<u8>, ApiError> {
    plane(m.data.view(), axis, index)
}

fn rle_of(p: &Array2<u8>) -> Rle {
    Rle::encode(p.shape(), p.iter().copied())
}

async fn slice(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<SliceQuery>) -> Result<Response, ApiError> {
    let s = st.session(&id)?;
    let last = s.last_mask.read().expect("mask lock poisoned").clone();
    let pixels: Array2<u8> = match q.channel {
        SliceChannel::Image => plane(s.input.channel(0), q.axis, q.index)?.mapv(to_gray),
        SliceChannel::Organ => mask_plane(&s.organ, q.axis, q.index)?.mapv(|v| v * 255),
        SliceChannel::Tumor => match &s.tumor {
            Some(t) => mask_plane(t, q.axis, q.index)?.mapv(|v| v * 255),
            None => return Err(ApiError::not_found("no_tumor", "volume was uploaded without a tumor mask")),
        },
        SliceChannel::Mask => match &last {
            Some(m) => mask_plane(m, q.axis, q.index)?.mapv(|v| v * 255),
            None => return Err(ApiError::not_found("no_mask", "volume has not been segmented yet")),
        },
    };
    let (h, w) = pixels.dim();
    let bytes: Vec<u8> = pixels.iter().copied().collect();
    match q.format {
        SliceFormat::Pgm => {
            let mut body = format!("P5\n{w} {h}\n255\n").into_bytes();
            body.extend_from_slice(&bytes);
            Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], body).into_response())
        }
        SliceFormat::Json => {
            let payload = SlicePayload {
                axis: q.axis,
                index: q.index,
                height: h,
                width: w,
                pixels: B64.encode(&bytes),
                organ: rle_of(&mask_plane(&s.organ, q.axis, q.index)?),
                tumor: s.tumor.as_ref().map(|t| mask_plane(t, q.axis, q.index).map(|p| rle_of(&p))).transpose()?,
                mask: last.as_ref().map(|m| mask_plane(m, q.axis, q.index).map(|p| rle_of(&p))).transpose()?,
            };
            Ok(Json(payload).into_response())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePoint {
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub label: String,
}

impl TryFrom<&WirePoint> for PointPrompt {
    type Error = ApiError;

    fn try_from(p: &WirePoint) -> Result<Self, ApiError> {
        let label = match p.label.as_str() {
            "fg" => PointLabel::Fg,
            "bg" => PointLabel::Bg,
            other => return Err(ApiError::bad_request("bad_points", format!("unknown label {other:?}"))),
        };
        Ok(PointPrompt {
            coord: [p.z, p.y, p.x],
            label,
        })
    }
}

impl From<PointPrompt> for WirePoint {
    fn from(p: PointPrompt) -> Self {
        WirePoint {
            z: p.coord[0],
            y: p.coord[1],
            x: p.coord[2],
            label: p.label.to_string(),
        }
    }
}

impl FromStr for WirePoint {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, ApiError> {
        let p: PointPrompt = s.parse().map_err(ApiError::from)?;
        Ok(p.into())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub points: Vec<WirePoint>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SliceCount {
    pub z: usize,
    pub voxels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub id: String,
    pub mask: Rle,
    pub voxels: usize,
    /// Crop origin in volume coordinates; may be negative at borders.
    pub offset: [isize; 3],
    pub stats: ProbStats,
    /// Foreground voxels per axial slice, nonzero slices only.
    pub slices: Vec<SliceCount>,
    pub dice: Option<f64>,
}

async fn segment(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<SegmentRequest>) -> Result<Json<SegmentResponse>, ApiError> {
    let s = st.session(&id)?;
    let Some(handle) = st.0.model.clone() else {
        return Err(ApiError::new(
            axum::http::StatusCode::CONFLICT,
            "no_model",
            "service was started without a checkpoint",
        ));
    };
    if req.points.is_empty() || req.points.len() > MAX_POINTS {
        return Err(ApiError::bad_request(
            "bad_points",
            format!("expected 1..={MAX_POINTS} points, got {}", req.points.len()),
        ));
    }
    let points = req.points.iter().map(PointPrompt::try_from).collect::<Result<Vec<_>, _>>()?;
    let shape = s.input.shape();
    for p in &points {
        p.check_bounds(shape)?;
    }

    let _guard = st.0.infer_lock.lock().await;
    let session = s.clone();
    let result = tokio::task::spawn_blocking(move || infer(&handle.model, &handle.store, &session.input, &points))
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;

    let mask = result.mask;
    let slices = mask
        .data
        .outer_iter()
        .enumerate()
        .map(|(z, sl)| SliceCount {
            z,
            voxels: sl.iter().filter(|&&v| v != 0).count(),
        })
        .filter(|c| c.voxels > 0)
        .collect();
    let dice = s.tumor.as_ref().map(|t| dice(&mask, t)).transpose()?;
    let response = SegmentResponse {
        id: id.clone(),
        mask: Rle::encode(&shape, mask.data.iter().copied()),
        voxels: mask.count(),
        offset: result.offset,
        stats: result.stats,
        slices,
        dice,
    };
    *s.last_mask.write().expect("mask lock poisoned") = Some(mask);
    Ok(Json(response))
}
