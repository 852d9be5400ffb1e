//! Read-only what-if service: predicted outcomes of every guidance plan for
//! one occupancy situation, plus the theater geometry for rendering.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::CorsLayer;

use crowd_cate::experiment::sha256_hex;
use crowd_cate::model::{ModelError, TrainedModel};
use crowd_cate::scenario::{sample_occupancy, OutcomeComponent};
use crowd_cate::sim::{CellKind, Exit, SimResult, Simulator, TheaterLayout};
use crowd_cate::{enumerate_treatments, Occupancy, Treatment};

pub const DEFAULT_SIM_BUDGET: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("{path}: {source}")]
    Model { path: String, source: ModelError },
    #[error("{path}: trained for the {found} outcome, expected {expected}")]
    WrongOutcome { path: String, expected: OutcomeComponent, found: OutcomeComponent },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One fitted model per outcome component, with the hash of each file.
#[derive(Debug)]
pub struct ModelSet {
    models: [TrainedModel; 3],
    file_hashes: [String; 3],
}

impl ModelSet {
    /// Loads the max, mean and std checkpoints, checking outcome and layout.
    pub fn load(paths: [&Path; 3], layout: &TheaterLayout) -> Result<Self, ServeError> {
        let mut models = Vec::new();
        let mut file_hashes = Vec::new();
        for (path, expected) in paths.into_iter().zip(OutcomeComponent::ALL) {
            let shown = path.display().to_string();
            let bytes = std::fs::read(path).map_err(|source| ServeError::Io { path: shown.clone(), source })?;
            let model = TrainedModel::from_bytes(&bytes).map_err(|source| ServeError::Model { path: shown.clone(), source })?;
            model.check_layout(layout).map_err(|source| ServeError::Model { path: shown.clone(), source })?;
            if model.meta.outcome != expected {
                return Err(ServeError::WrongOutcome { path: shown, expected, found: model.meta.outcome });
            }
            file_hashes.push(sha256_hex(&bytes));
            models.push(model);
        }
        Ok(Self {
            models: models.try_into().expect("three components"),
            file_hashes: file_hashes.try_into().expect("three components"),
        })
    }
}

/// Source of predictions.
#[derive(Debug)]
pub enum Predictor {
    Models(ModelSet),
    /// Debug model that answers with the noiseless simulator.
    Oracle,
}

impl Predictor {
    pub fn manifest_hash(&self) -> String {
        match self {
            Predictor::Models(set) => {
                let joined = OutcomeComponent::ALL
                    .iter()
                    .zip(&set.file_hashes)
                    .map(|(c, h)| format!("{c}:{h}\n"))
                    .collect::<String>();
                sha256_hex(joined.as_bytes())
            }
            Predictor::Oracle => "oracle".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SeatView {
    pub seat: usize,
    pub row: usize,
    pub col: usize,
    pub block: char,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BlockView {
    pub letter: char,
    pub seats: usize,
}

/// Geometry served by `GET /layout`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LayoutView {
    pub rows: usize,
    pub cols: usize,
    /// One string per grid row: `S` seat, `.` aisle, `#` wall, digit = exit id.
    pub grid: Vec<String>,
    pub seat_count: usize,
    pub seats: Vec<SeatView>,
    pub blocks: Vec<BlockView>,
    pub exits: Vec<Exit>,
    pub layout_hash: String,
}

impl LayoutView {
    pub fn of(layout: &TheaterLayout) -> Self {
        let grid = (0..layout.rows())
            .map(|r| {
                (0..layout.cols())
                    .map(|c| match layout.cell(r, c) {
                        CellKind::Wall => '#',
                        CellKind::Aisle => '.',
                        CellKind::Seat => 'S',
                        CellKind::Exit(id) => char::from_digit(u32::from(id), 10).unwrap_or('?'),
                    })
                    .collect()
            })
            .collect();
        let letters = layout.block_letters();
        let seats = (0..layout.seat_count())
            .map(|s| {
                let (row, col) = layout.seat_position(s);
                SeatView { seat: s, row, col, block: letters[layout.block_of_seat(s)] }
            })
            .collect();
        let blocks = letters.iter().zip(layout.block_sizes()).map(|(&letter, seats)| BlockView { letter, seats }).collect();
        Self {
            rows: layout.rows(),
            cols: layout.cols(),
            grid,
            seat_count: layout.seat_count(),
            seats,
            blocks,
            exits: layout.exits().to_vec(),
            layout_hash: layout.hash(),
        }
    }
}

pub struct ServiceState {
    sim: Arc<Simulator>,
    layout_view: LayoutView,
    predictor: Option<Predictor>,
    sim_budget: Duration,
}

impl ServiceState {
    /// `predictor: None` starts the service unready; `/whatif` answers 503.
    pub fn new(sim: Arc<Simulator>, predictor: Option<Predictor>) -> Self {
        let layout_view = LayoutView::of(sim.layout());
        Self { sim, layout_view, predictor, sim_budget: DEFAULT_SIM_BUDGET }
    }

    pub fn with_sim_budget(mut self, budget: Duration) -> Self {
        self.sim_budget = budget;
        self
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OccupancyInput {
    /// Base64 bitset, seat order, most significant bit first.
    Base64(String),
    Flags(Vec<bool>),
    Bits(Vec<u8>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub occupancy: Option<OccupancyInput>,
    /// Per-block occupancy rates; requires `seed`.
    #[serde(default)]
    pub rates: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Treatment indices to report; all 30 when absent.
    #[serde(default)]
    pub treatments: Option<Vec<usize>>,
    #[serde(default)]
    pub include_simulation: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Outcomes {
    pub max_time: f64,
    pub mean_time: f64,
    pub std_time: f64,
}

impl From<&SimResult> for Outcomes {
    fn from(r: &SimResult) -> Self {
        Self { max_time: r.max_time, mean_time: r.mean_time, std_time: r.std_time }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WhatIfEntry {
    pub treatment: usize,
    /// Guide bit followed by six door bits.
    pub z: String,
    pub route_guide: bool,
    pub doors: [u8; 2],
    pub predicted: Outcomes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated: Option<Outcomes>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WhatIfResponse {
    pub entries: Vec<WhatIfEntry>,
    /// Treatment indices by ascending predicted max time; ties keep plan order.
    pub ranking: Vec<usize>,
    pub model_hash: String,
    pub occupancy: String,
    pub occupied: usize,
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn resolve_occupancy(req: &WhatIfRequest, layout: &TheaterLayout) -> Result<Occupancy, ApiError> {
    let seats = layout.seat_count();
    match (&req.occupancy, &req.rates, req.seed) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            Err(bad_request("supply either occupancy or rates with seed, not both"))
        }
        (Some(OccupancyInput::Base64(text)), None, None) => Occupancy::from_base64(text, seats).map_err(bad_request),
        (Some(OccupancyInput::Flags(flags)), None, None) => {
            if flags.len() != seats {
                return Err(bad_request(format!("occupancy has {} entries, expected {seats}", flags.len())));
            }
            Ok(Occupancy::new(flags.clone()))
        }
        (Some(OccupancyInput::Bits(bits)), None, None) => {
            if bits.len() != seats || bits.iter().any(|&b| b > 1) {
                return Err(bad_request(format!("occupancy must be {seats} entries of 0 or 1")));
            }
            Ok(Occupancy::new(bits.iter().map(|&b| b == 1).collect()))
        }
        (None, Some(rates), Some(seed)) => sample_occupancy(layout, rates, seed).map_err(|e| bad_request(e.to_string())),
        (None, Some(_), None) => Err(bad_request("rates require a seed")),
        (None, None, _) => Err(bad_request("missing occupancy or rates")),
    }
}

fn resolve_treatments(filter: &Option<Vec<usize>>) -> Result<Vec<Treatment>, ApiError> {
    let all = enumerate_treatments();
    let Some(idx) = filter else {
        return Ok(all.to_vec());
    };
    let mut seen = HashSet::new();
    idx.iter()
        .map(|&i| {
            if !seen.insert(i) {
                return Err(bad_request(format!("treatment {i} listed twice")));
            }
            all.get(i).copied().ok_or_else(|| bad_request(format!("treatment index {i} is outside 0..{}", all.len())))
        })
        .collect()
}

fn simulate_all(sim: &Simulator, occ: &Occupancy, plans: &[Treatment]) -> Result<Vec<Outcomes>, String> {
    plans.iter().map(|t| sim.simulate(occ, t).map(|r| Outcomes::from(&r)).map_err(|e| e.to_string())).collect()
}

fn predict(state: &ServiceState, predictor: &Predictor, occ: &Occupancy, plans: &[Treatment]) -> Result<Vec<Outcomes>, String> {
    match predictor {
        Predictor::Oracle => simulate_all(&state.sim, occ, plans),
        Predictor::Models(set) => {
            let layout = state.sim.layout();
            let mut per_component = Vec::new();
            for model in &set.models {
                per_component.push(model.predict_pairs(layout, plans.iter().map(|&t| (occ, t))).map_err(|e| e.to_string())?);
            }
            Ok((0..plans.len())
                .map(|i| Outcomes {
                    max_time: per_component[0][i],
                    mean_time: per_component[1][i],
                    std_time: per_component[2][i],
                })
                .collect())
        }
    }
}

fn z_string(t: &Treatment) -> String {
    t.to_bits().iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
}

async fn whatif(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<WhatIfResponse>, ApiError> {
    if state.predictor.is_none() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "models not loaded".into()));
    }
    let req: WhatIfRequest = serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed request: {e}")))?;
    let occ = resolve_occupancy(&req, state.sim.layout())?;
    let plans = resolve_treatments(&req.treatments)?;
    if req.include_simulation && occ.count() == 0 {
        return Err(bad_request("cannot simulate an empty theater"));
    }

    let worker = Arc::clone(&state);
    let (occ_w, plans_w) = (occ.clone(), plans.clone());
    let predicted = tokio::task::spawn_blocking(move || {
        let predictor = worker.predictor.as_ref().expect("checked above");
        predict(&worker, predictor, &occ_w, &plans_w)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e))?;

    let simulated = if req.include_simulation {
        let sim = Arc::clone(&state.sim);
        let (occ_s, plans_s) = (occ.clone(), plans.clone());
        let over_budget =
            || ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("simulation exceeded the {:?} budget", state.sim_budget));
        let started = Instant::now();
        let task = tokio::task::spawn_blocking(move || simulate_all(&sim, &occ_s, &plans_s));
        let joined = tokio::time::timeout(state.sim_budget, task).await.map_err(|_| over_budget())?;
        // A task that finished before the timer was polled still counts as late.
        if started.elapsed() >= state.sim_budget {
            return Err(over_budget());
        }
        let result = joined.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Some(result.map_err(bad_request)?)
    } else {
        None
    };

    let entries: Vec<WhatIfEntry> = plans
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (a, b) = t.open_pair();
            WhatIfEntry {
                treatment: t.index(),
                z: z_string(t),
                route_guide: t.route_guide(),
                doors: [a, b],
                predicted: predicted[i],
                simulated: simulated.as_ref().map(|s| s[i]),
            }
        })
        .collect();
    let mut order: Vec<&WhatIfEntry> = entries.iter().collect();
    order.sort_by(|a, b| a.predicted.max_time.total_cmp(&b.predicted.max_time).then(a.treatment.cmp(&b.treatment)));
    let ranking = order.iter().map(|e| e.treatment).collect();
    Ok(Json(WhatIfResponse {
        ranking,
        entries,
        model_hash: state.predictor.as_ref().expect("checked above").manifest_hash(),
        occupancy: occ.to_base64(),
        occupied: occ.count(),
    }))
}

async fn layout(State(state): State<Arc<ServiceState>>) -> Json<LayoutView> {
    Json(state.layout_view.clone())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelHealth {
    pub outcome: OutcomeComponent,
    pub method: String,
    pub file_hash: String,
    pub data_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub ready: bool,
    pub layout_hash: String,
    pub model_hash: Option<String>,
    pub models: Vec<ModelHealth>,
}

async fn health(State(state): State<Arc<ServiceState>>) -> (StatusCode, Json<Health>) {
    let models = match &state.predictor {
        Some(Predictor::Models(set)) => set
            .models
            .iter()
            .zip(&set.file_hashes)
            .map(|(m, h)| ModelHealth {
                outcome: m.meta.outcome,
                method: m.method_name().to_string(),
                file_hash: h.clone(),
                data_hash: m.meta.data_hash.clone(),
            })
            .collect(),
        _ => Vec::new(),
    };
    let body = Health {
        ready: state.predictor.is_some(),
        layout_hash: state.layout_view.layout_hash.clone(),
        model_hash: state.predictor.as_ref().map(Predictor::manifest_hash),
        models,
    };
    let status = if body.ready { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(body))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/whatif", post(whatif))
        .route("/layout", get(layout))
        .route("/health", get(health))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
