//! HTTP routes over a loaded [`Pipeline`].

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use fadersynth::corpus::encode_wav_pcm16;
use fadersynth::training::LatentPoint;
use fadersynth::LATENT_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::pipeline::{spectrogram_distance, FieldErrors, GenerateRequest, Pipeline, PipelineError, Renderer, Target};

/// Response header carrying the latent point of a generated note.
pub const LATENT_HEADER: &str = "x-latent-z";
const MAX_UPLOAD: usize = 32 << 20;

pub struct AppState {
    pipeline: RwLock<Arc<Pipeline>>,
    latent_map: RwLock<Arc<Vec<LatentPoint>>>,
    rng: Mutex<ChaCha8Rng>,
}

impl AppState {
    /// `seed` drives latent sampling for requests that give neither `z` nor a seed.
    pub fn new(pipeline: Pipeline, latent_map: Vec<LatentPoint>, seed: u64) -> Self {
        Self {
            pipeline: RwLock::new(Arc::new(pipeline)),
            latent_map: RwLock::new(Arc::new(latent_map)),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn pipeline(&self) -> Arc<Pipeline> {
        self.pipeline.read().expect("pipeline lock").clone()
    }

    /// Replaces the served pipeline. Requests already running finish on the
    /// one they started with.
    pub fn swap(&self, pipeline: Pipeline, latent_map: Vec<LatentPoint>) {
        let mut p = self.pipeline.write().expect("pipeline lock");
        let mut m = self.latent_map.write().expect("latent map lock");
        *p = Arc::new(pipeline);
        *m = Arc::new(latent_map);
    }

    fn next_seed(&self) -> u64 {
        self.rng.lock().expect("rng lock").gen()
    }
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(FieldErrors),
    Conflict(String),
    Internal(String),
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Invalid(f) => ApiError::Invalid(f),
            PipelineError::Unavailable(m) => ApiError::Conflict(m),
            PipelineError::Internal(e) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Invalid(fields) => {
                (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid request", "fields": fields }))).into_response()
            }
            ApiError::Conflict(msg) => (StatusCode::CONFLICT, Json(json!({ "error": msg }))).into_response(),
            ApiError::Internal(msg) => {
                let id = format!("{:016x}", rand::random::<u64>());
                tracing::error!(%id, error = %msg, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal error", "id": id }))).into_response()
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(field: &str, msg: impl Into<String>) -> ApiError {
    ApiError::Invalid(FieldErrors::from([(field.to_string(), msg.into())]))
}

/// Parses a JSON body, naming the offending field on failure.
fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let msg = e.inner().to_string();
        let path = e.path().to_string();
        let field = if path != "." {
            path
        } else if let Some(name) = msg.split('`').nth(1).filter(|_| msg.contains("field `")) {
            name.to_string()
        } else {
            "body".to_string()
        };
        invalid(&field, msg)
    })
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn wav_response(samples: &[f64], z: Option<[f64; LATENT_DIM]>) -> Response {
    let mut res = ([(header::CONTENT_TYPE, "audio/wav")], encode_wav_pcm16(samples)).into_response();
    if let Some(z) = z {
        let v = z.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>().join(",");
        res.headers_mut().insert(LATENT_HEADER, HeaderValue::from_str(&v).expect("ascii"));
    }
    res
}

/// Parses `x-latent-z` back into coordinates.
pub fn parse_latent_header(v: &str) -> Option<[f64; LATENT_DIM]> {
    let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

async fn info(State(s): State<Arc<AppState>>) -> Json<crate::pipeline::Info> {
    Json(s.pipeline().info())
}

async fn generate(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let mut req: GenerateRequest = parse_json(&body)?;
    if req.z.is_none() && req.seed.is_none() {
        req.seed = Some(s.next_seed());
    }
    let p = s.pipeline();
    let g = blocking(move || Ok(p.generate(&req, &mut rand::thread_rng())?)).await?;
    Ok(wav_response(g.wave.samples(), Some(g.z)))
}

/// Target given as query parameters: `semitone`, `octave`, either `style`
/// (a name) or `style_mix` (comma-separated weights), `renderer`,
/// `gla_iterations`.
fn target_from_query(p: &Pipeline, q: &BTreeMap<String, String>) -> ApiResult<Option<Target>> {
    const KNOWN: [&str; 6] = ["semitone", "octave", "style", "style_mix", "renderer", "gla_iterations"];
    let mut errs = FieldErrors::new();
    for k in q.keys().filter(|k| !KNOWN.contains(&k.as_str())) {
        errs.insert(k.clone(), "unknown parameter".into());
    }
    if q.is_empty() {
        return Ok(None);
    }
    fn num<T: std::str::FromStr>(q: &BTreeMap<String, String>, k: &str, errs: &mut FieldErrors) -> Option<T> {
        match q.get(k).map(|v| v.parse::<T>()) {
            Some(Ok(v)) => Some(v),
            Some(Err(_)) => {
                errs.insert(k.into(), format!("`{}` is not a valid number", q[k]));
                None
            }
            None => {
                errs.insert(k.into(), "required".into());
                None
            }
        }
    }
    let semitone = num::<u8>(q, "semitone", &mut errs);
    let octave = num::<u8>(q, "octave", &mut errs);
    let style_mix = match (q.get("style"), q.get("style_mix")) {
        (Some(_), Some(_)) => {
            errs.insert("style".into(), "give either style or style_mix".into());
            None
        }
        (Some(name), None) => match p.style_mix(name) {
            Ok(m) => Some(m),
            Err(PipelineError::Invalid(f)) => {
                errs.extend(f);
                None
            }
            Err(e) => return Err(e.into()),
        },
        (None, Some(list)) => match list.split(',').map(|w| w.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>() {
            Ok(m) => Some(m),
            Err(_) => {
                errs.insert("style_mix".into(), "expected comma-separated numbers".into());
                None
            }
        },
        (None, None) => {
            errs.insert("style".into(), "give style or style_mix".into());
            None
        }
    };
    let renderer = match q.get("renderer").map(|r| r.parse::<Renderer>()) {
        Some(Ok(r)) => r,
        Some(Err(e)) => {
            errs.insert("renderer".into(), e);
            Renderer::Gla
        }
        None => Renderer::Gla,
    };
    let gla_iterations = if q.contains_key("gla_iterations") {
        num::<usize>(q, "gla_iterations", &mut errs).unwrap_or(0)
    } else {
        crate::pipeline::DEFAULT_GLA_ITERATIONS
    };
    if !errs.is_empty() {
        return Err(ApiError::Invalid(errs));
    }
    let target = Target {
        semitone: semitone.expect("checked"),
        octave: octave.expect("checked"),
        style_mix: style_mix.expect("checked"),
        renderer,
        gla_iterations,
    };
    let errs = p.check_target(&target);
    if !errs.is_empty() {
        return Err(ApiError::Invalid(errs));
    }
    Ok(Some(target))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reconstruction {
    pub target: Target,
    /// Mean squared error between input and decoded normalized spectrograms.
    pub mse: f64,
    /// Log-spectral distance on Mel magnitudes, dB.
    pub lsd: f64,
    /// Base64 16-bit PCM WAV of the decoded note.
    pub wav: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub z: [f64; LATENT_DIM],
    /// Present when a target is given, or always for unconditioned models.
    pub reconstruction: Option<Reconstruction>,
}

async fn encode(
    State(s): State<Arc<AppState>>,
    Query(q): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> ApiResult<Json<EncodeResponse>> {
    let p = s.pipeline();
    let mut target = target_from_query(&p, &q)?;
    let c = p.model().conditioning();
    if target.is_none() && !c.note && !c.style {
        let n = p.model().n_style();
        target = Some(Target {
            semitone: 0,
            octave: p.preprocessing().octaves.first().copied().unwrap_or(4),
            style_mix: (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
            renderer: Renderer::Gla,
            gla_iterations: crate::pipeline::DEFAULT_GLA_ITERATIONS,
        });
    }
    let res = blocking(move || {
        let enc = p.encode_wav(&body)?;
        let reconstruction = match target {
            Some(target) => {
                let (wave, spec) = p.decode_target(&enc.z, &target)?;
                let (mse, lsd) = spectrogram_distance(&enc.input, &spec, p.preprocessing().ref_max)?;
                let wav = base64::engine::general_purpose::STANDARD.encode(encode_wav_pcm16(wave.samples()));
                Some(Reconstruction { target, mse, lsd, wav })
            }
            None => None,
        };
        Ok(EncodeResponse { z: enc.z, reconstruction })
    })
    .await?;
    Ok(Json(res))
}

async fn transform(
    State(s): State<Arc<AppState>>,
    Query(q): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let p = s.pipeline();
    let Some(target) = target_from_query(&p, &q)? else {
        return Err(ApiError::Invalid(FieldErrors::from([
            ("semitone".to_string(), "required".to_string()),
            ("octave".to_string(), "required".to_string()),
            ("style".to_string(), "give style or style_mix".to_string()),
        ])));
    };
    let wave = blocking(move || Ok(p.transform(&body, &target)?)).await?;
    Ok(wav_response(wave.samples(), None))
}

async fn latent_map(State(s): State<Arc<AppState>>) -> Json<Vec<LatentPoint>> {
    let map = s.latent_map.read().expect("latent map lock").clone();
    Json(map.as_ref().clone())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/generate", post(generate))
        .route("/encode", post(encode))
        .route("/transform", post(transform))
        .route("/latent_map", get(latent_map))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
