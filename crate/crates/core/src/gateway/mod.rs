//! The deployable service: per-session query handling through the
//! detect-then-respond pipeline, optional response watermarking, flagged
//! query persistence, per-phase timing, and the TCP front end.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::VictimOracle;
use crate::detection::window::{
    behavioral_score, classify_query, BehaviorReference, BehaviorWindow, BehavioralAssessment,
    Disposition,
};
use crate::detection::{score_probs, UncertaintyWeights};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::ownership::{watermark_response, OwnershipKit};
use crate::response::{
    respond, similarity_check, FlaggedQuery, FlaggedStore, ResponseHistoryEntry, ResponseMode,
    ResponsePayload, TierConfig,
};
use crate::seed;

mod config;
pub mod server;

pub use config::{GatewayConfig, CONFIG_VERSION};

pub const PROFILE_FORMAT: &str = "modelgate-detection-profile";
pub const PROFILE_VERSION: u32 = 1;

/// Queries a session keeps as rolling evidence for threshold recalibration.
pub const HISTORY_CAPACITY: usize = 512;

/// Everything the detector needs at serve time, produced by calibration and
/// shipped as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionProfile {
    pub weights: UncertaintyWeights,
    pub reference: BehaviorReference,
    pub tiers: TierConfig,
    /// Monte Carlo dropout samples per query; drawn only when the dispersion
    /// weight is positive and the model has dropout.
    pub mc_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    profile: DetectionProfile,
}

impl DetectionProfile {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.reference.validate()?;
        self.tiers.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = ProfileFile {
            format: PROFILE_FORMAT.to_string(),
            version: PROFILE_VERSION,
            profile: self.clone(),
        };
        let writer = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(writer, &file)
            .map_err(|e| Error::Format(format!("profile serialization failed: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let file: ProfileFile = serde_json::from_reader(reader)
            .map_err(|e| Error::Format(format!("bad profile {}: {e}", path.display())))?;
        if file.format != PROFILE_FORMAT {
            return Err(Error::Format(format!(
                "not a detection profile: format {:?}",
                file.format
            )));
        }
        if file.version != PROFILE_VERSION {
            return Err(Error::Format(format!(
                "profile version {} unsupported (expected {PROFILE_VERSION})",
                file.version
            )));
        }
        file.profile.validate()?;
        Ok(file.profile)
    }
}

/// Time source for window rotation. Injected so behavioral tests run on a
/// virtual clock while the service runs on the wall clock.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Milliseconds since the Unix epoch.
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Manually advanced clock for deterministic tests.
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        VirtualClock {
            now: AtomicU64::new(start_ms),
        }
    }

    pub fn advance(&self, delta_ms: u64) {
        self.now.fetch_add(delta_ms, Ordering::SeqCst);
    }

    pub fn set(&self, now_ms: u64) {
        self.now.store(now_ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// One client's state: pinned response mode, the active behavior window,
/// and a rolling history of scored queries.
pub struct Session {
    id: String,
    mode: ResponseMode,
    window: BehaviorWindow,
    history: VecDeque<ResponseHistoryEntry>,
    /// Queries accepted across all windows, current one included.
    total_queries: u64,
    /// Queries accounted for by windows that have been closed.
    closed_queries: u64,
    rotations: u64,
    last_closed: Option<BehavioralAssessment>,
    seq: u64,
}

impl Session {
    fn new(
        id: &str,
        mode: ResponseMode,
        start_ms: u64,
        interval_ms: u64,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(Session {
            id: id.to_string(),
            mode,
            window: BehaviorWindow::new(id, start_ms, interval_ms, dim, classes)?,
            history: VecDeque::new(),
            total_queries: 0,
            closed_queries: 0,
            rotations: 0,
            last_closed: None,
            seq: 0,
        })
    }

    /// Close the current window if `now_ms` falls beyond it. The closing
    /// window's statistics feed the behavioral scorer one final time.
    fn rotate_if_elapsed(&mut self, now_ms: u64, reference: &BehaviorReference) -> Result<bool> {
        let end = self.window.start_ms() + self.window.interval_ms();
        if now_ms < end {
            return Ok(false);
        }
        if self.window.count() > 0 {
            self.last_closed = Some(behavioral_score(&self.window, reference)?);
        }
        self.closed_queries += self.window.count();
        self.window = self.window.successor(now_ms);
        self.rotations += 1;
        Ok(true)
    }
}

/// Read-only view of one session for recount tests and metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SessionStats {
    pub session_id: String,
    pub mode: ResponseMode,
    pub total_queries: u64,
    pub closed_queries: u64,
    pub current_window_count: u64,
    pub rotations: u64,
    pub history_len: usize,
}

/// Wall time spent in each pipeline phase of one request, in milliseconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseSample {
    pub inference_ms: f64,
    pub detection_ms: f64,
    pub response_ms: f64,
    pub total_ms: f64,
}

/// Aggregates over one phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl PhaseStats {
    fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return PhaseStats {
                count: 0,
                mean_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let idx = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
        PhaseStats {
            count: n,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            p95_ms: sorted[idx],
            max_ms: sorted[n - 1],
        }
    }
}

/// Per-phase aggregates for a batch of requests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSummary {
    pub inference: PhaseStats,
    pub detection: PhaseStats,
    pub response: PhaseStats,
    pub total: PhaseStats,
}

/// Accumulates per-request phase samples.
#[derive(Debug, Default)]
pub struct TimingCollector {
    inference: Vec<f64>,
    detection: Vec<f64>,
    response: Vec<f64>,
    total: Vec<f64>,
}

impl TimingCollector {
    pub fn new() -> Self {
        TimingCollector::default()
    }

    pub fn record(&mut self, sample: &PhaseSample) {
        self.inference.push(sample.inference_ms);
        self.detection.push(sample.detection_ms);
        self.response.push(sample.response_ms);
        self.total.push(sample.total_ms);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn summary(&self) -> TimingSummary {
        TimingSummary {
            inference: PhaseStats::from_samples(&self.inference),
            detection: PhaseStats::from_samples(&self.detection),
            response: PhaseStats::from_samples(&self.response),
            total: PhaseStats::from_samples(&self.total),
        }
    }
}

/// Everything handle_query learned about one request. The disposition stays
/// inside the service; the wire layer only ever forwards the payload.
#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub session_id: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub suspicion: f64,
    pub disposition: Disposition,
    pub behavioral: BehavioralAssessment,
    pub similarity: f64,
    pub similarity_matched: bool,
    pub timing: PhaseSample,
}

struct SharedState {
    model: Model,
    weights: UncertaintyWeights,
    reference: BehaviorReference,
    tiers: TierConfig,
    kit: Option<OwnershipKit>,
    window_interval_ms: u64,
    default_mode: ResponseMode,
    response_seed: u64,
    mc_samples: usize,
    timing_enabled: bool,
}

/// The gateway engine. Model, profile, and kit are immutable after startup;
/// session state is serialized per session; the flagged store takes
/// concurrent reads and serialized appends.
pub struct Gateway {
    shared: SharedState,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: RwLock<FlaggedStore>,
    timings: Mutex<TimingCollector>,
    clock: Arc<dyn Clock>,
}

impl Gateway {
    pub fn new(
        model: Model,
        profile: DetectionProfile,
        kit: Option<OwnershipKit>,
        config: &GatewayConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        config.validate()?;
        profile.validate()?;
        if profile.reference.reference_histogram.len() != model.class_count() {
            return Err(Error::input(format!(
                "profile reference covers {} classes, model has {}",
                profile.reference.reference_histogram.len(),
                model.class_count()
            )));
        }
        let store = FlaggedStore::new(config.store_capacity, config.similarity_threshold)?;
        Ok(Gateway {
            shared: SharedState {
                model,
                weights: profile.weights,
                reference: profile.reference,
                tiers: profile.tiers,
                kit,
                window_interval_ms: config.window_interval_ms,
                default_mode: config.default_mode,
                response_seed: config.response_seed,
                mc_samples: profile.mc_samples,
                timing_enabled: config.timing_enabled,
            },
            sessions: Mutex::new(HashMap::new()),
            store: RwLock::new(store),
            timings: Mutex::new(TimingCollector::new()),
            clock,
        })
    }

    /// Load every referenced artifact and fail fast on any problem. An
    /// existing flagged-query file is replayed into the store.
    pub fn from_config(config: &GatewayConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let model = crate::model::io::load(&config.model_path)?;
        let profile = DetectionProfile::load(&config.profile_path)?;
        let kit = match &config.kit_path {
            Some(path) => Some(OwnershipKit::load(path)?),
            None => None,
        };
        let gateway = Gateway::new(model, profile, kit, config, clock)?;
        if let Some(path) = &config.flagged_path {
            if path.exists() {
                let replayed =
                    load_flagged_jsonl(path, config.store_capacity, config.similarity_threshold)?;
                *gateway.store.write().unwrap() = replayed;
            }
        }
        Ok(gateway)
    }

    pub fn model(&self) -> &Model {
        &self.shared.model
    }

    pub fn default_mode(&self) -> ResponseMode {
        self.shared.default_mode
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn session_handle(
        &self,
        session_id: &str,
        requested: Option<ResponseMode>,
        now_ms: u64,
    ) -> Result<Arc<Mutex<Session>>> {
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(handle) = sessions.get(session_id) {
            if let Some(mode) = requested {
                let pinned = handle.lock().unwrap().mode;
                if mode != pinned {
                    return Err(Error::input(format!(
                        "session {session_id:?} is pinned to {pinned:?}"
                    )));
                }
            }
            return Ok(Arc::clone(handle));
        }
        let mode = requested.unwrap_or(self.shared.default_mode);
        let session = Session::new(
            session_id,
            mode,
            now_ms,
            self.shared.window_interval_ms,
            self.shared.model.input_dim(),
            self.shared.model.class_count(),
        )?;
        let handle = Arc::new(Mutex::new(session));
        sessions.insert(session_id.to_string(), Arc::clone(&handle));
        Ok(handle)
    }

    /// Run one query through the full pipeline: inference, uncertainty
    /// scoring, window update and behavioral scoring, classification,
    /// similarity check, tiered response, watermark, emit per mode.
    pub fn handle_query(
        &self,
        session_id: &str,
        requested_mode: Option<ResponseMode>,
        x: &[f64],
    ) -> Result<(ResponsePayload, QueryRecord)> {
        if x.len() != self.shared.model.input_dim() {
            return Err(Error::input(format!(
                "feature dimension {} does not match model input dimension {}",
                x.len(),
                self.shared.model.input_dim()
            )));
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::input(format!("feature {i} is not finite")));
            }
        }

        let started = Instant::now();
        let now_ms = self.clock.now_ms();
        let handle = self.session_handle(session_id, requested_mode, now_ms)?;
        let mut session = handle.lock().unwrap();
        let seq = session.seq;

        // Inference: deterministic forward pass, plus MC dropout dispersion
        // when the σ term carries weight and the model can drop units.
        let probs = self.shared.model.forward(x)?;
        let sigma = if self.shared.weights.alpha4 > 0.0
            && self.shared.model.dropout_rate() > 0.0
            && self.shared.mc_samples >= 2
        {
            let mc_seed = seed::derive_labeled(self.shared.response_seed, session_id, &[seq, 0x3C]);
            self.shared
                .model
                .mc_dropout_predict(x, self.shared.mc_samples, mc_seed)?
                .1
        } else {
            0.0
        };
        let t_inference = started.elapsed();

        // Detection: composite uncertainty, window update, behavioral
        // comparison, fused disposition, then the near-duplicate scan.
        let breakdown = score_probs(&probs, sigma, &self.shared.weights)?;
        // The window never observes a timestamp before its own start: the
        // wall clock is monotone at this granularity and virtual clocks in
        // tests only advance, so clamping is a defensive no-op.
        let stamp = now_ms.max(session.window.start_ms());
        session.rotate_if_elapsed(stamp, &self.shared.reference)?;
        let predicted = argmax(&probs);
        session.window.update(stamp, x, predicted)?;
        session.total_queries += 1;
        let behavioral = behavioral_score(&session.window, &self.shared.reference)?;
        let disposition = classify_query(breakdown.u, self.shared.weights.tau, &behavioral);
        let (similarity_matched, similarity) = {
            let store = self.store.read().unwrap();
            similarity_check(x, &store)
        };
        let t_detection = started.elapsed();

        // Response: tier noise plus escalation, then the watermark layer,
        // then emit in the session's mode.
        let response_seed =
            seed::derive_labeled(self.shared.response_seed, session_id, &[seq, 0xE5]);
        let payload = respond(
            &probs,
            breakdown.u,
            disposition,
            similarity_matched,
            &self.shared.tiers,
            ResponseMode::SoftLabel,
            response_seed,
        )?;
        let vector = match payload {
            ResponsePayload::Soft(v) => v,
            ResponsePayload::Hard(_) => unreachable!("soft mode returns a vector"),
        };
        let vector = match &self.shared.kit {
            Some(kit) => watermark_response(&vector, x, &kit.key)?,
            None => vector,
        };
        let payload = match session.mode {
            ResponseMode::SoftLabel => ResponsePayload::Soft(vector),
            ResponseMode::HardLabel => ResponsePayload::Hard(argmax(&vector)),
        };
        let t_response = started.elapsed();

        session.seq += 1;
        if session.history.len() == HISTORY_CAPACITY {
            session.history.pop_front();
        }
        session.history.push_back(ResponseHistoryEntry {
            suspicion: breakdown.u,
            disposition,
            confirmed_malicious: disposition == Disposition::Malicious,
        });
        drop(session);

        if disposition != Disposition::Benign {
            let mut store = self.store.write().unwrap();
            store.insert(FlaggedQuery {
                timestamp_ms: stamp,
                session_id: session_id.to_string(),
                features: x.to_vec(),
                disposition,
            });
        }

        let timing = PhaseSample {
            inference_ms: t_inference.as_secs_f64() * 1e3,
            detection_ms: (t_detection - t_inference).as_secs_f64() * 1e3,
            response_ms: (t_response - t_detection).as_secs_f64() * 1e3,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if self.shared.timing_enabled {
            self.timings.lock().unwrap().record(&timing);
        }

        let record = QueryRecord {
            session_id: session_id.to_string(),
            seq,
            timestamp_ms: stamp,
            suspicion: breakdown.u,
            disposition,
            behavioral,
            similarity,
            similarity_matched,
            timing,
        };
        Ok((payload, record))
    }

    /// Rotate every session whose window interval has elapsed. Returns the
    /// rotated session ids.
    pub fn rotate_windows(&self) -> Result<Vec<String>> {
        let handles: Vec<Arc<Mutex<Session>>> = {
            let sessions = self.sessions.lock().unwrap();
            sessions.values().cloned().collect()
        };
        let now_ms = self.clock.now_ms();
        let mut rotated = Vec::new();
        for handle in handles {
            let mut session = handle.lock().unwrap();
            if session.rotate_if_elapsed(now_ms, &self.shared.reference)? {
                rotated.push(session.id.clone());
            }
        }
        rotated.sort();
        Ok(rotated)
    }

    pub fn session_stats(&self, session_id: &str) -> Option<SessionStats> {
        let handle = {
            let sessions = self.sessions.lock().unwrap();
            sessions.get(session_id).cloned()
        }?;
        let session = handle.lock().unwrap();
        Some(SessionStats {
            session_id: session.id.clone(),
            mode: session.mode,
            total_queries: session.total_queries,
            closed_queries: session.closed_queries,
            current_window_count: session.window.count(),
            rotations: session.rotations,
            history_len: session.history.len(),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let sessions = self.sessions.lock().unwrap();
        let mut ids: Vec<String> = sessions.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// The most recent closed-window assessment for a session, if any window
    /// has closed with queries in it.
    pub fn last_closed_assessment(&self, session_id: &str) -> Option<BehavioralAssessment> {
        let handle = {
            let sessions = self.sessions.lock().unwrap();
            sessions.get(session_id).cloned()
        }?;
        let session = handle.lock().unwrap();
        session.last_closed
    }

    pub fn flagged_snapshot(&self) -> Vec<FlaggedQuery> {
        let store = self.store.read().unwrap();
        store.iter().cloned().collect()
    }

    pub fn flagged_len(&self) -> usize {
        self.store.read().unwrap().len()
    }

    pub fn timing_summary(&self) -> TimingSummary {
        self.timings.lock().unwrap().summary()
    }

    /// Write the flagged store to disk as JSON lines.
    pub fn flush_flagged(&self, path: &Path) -> Result<()> {
        let entries = self.flagged_snapshot();
        save_flagged_jsonl(path, &entries)
    }

    /// Drive `n` synthetic queries through the full pipeline and report
    /// per-phase timing aggregates for exactly those queries.
    pub fn measure_overhead(&self, n: usize) -> Result<TimingSummary> {
        let dim = self.shared.model.input_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            self.shared.response_seed,
            &[0x0EAD],
        ));
        let session = format!("overhead-{:08x}", rng.random::<u32>());
        let mut collector = TimingCollector::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let (_, record) = self.handle_query(&session, None, &x)?;
            collector.record(&record.timing);
        }
        Ok(collector.summary())
    }
}

/// In-process oracle over a gateway: what an attacker sees when the defense
/// is deployed, minus the network.
pub struct GatewayOracle {
    gateway: Arc<Gateway>,
    session_id: String,
    mode: ResponseMode,
    counter: u64,
}

impl GatewayOracle {
    pub fn new(gateway: Arc<Gateway>, session_id: impl Into<String>, mode: ResponseMode) -> Self {
        GatewayOracle {
            gateway,
            session_id: session_id.into(),
            mode,
            counter: 0,
        }
    }
}

impl VictimOracle for GatewayOracle {
    fn query(&mut self, x: &[f64]) -> Result<ResponsePayload> {
        self.counter += 1;
        let (payload, _) = self
            .gateway
            .handle_query(&self.session_id, Some(self.mode), x)?;
        Ok(payload)
    }

    fn mode(&self) -> ResponseMode {
        self.mode
    }

    fn queries_used(&self) -> u64 {
        self.counter
    }
}

/// Persist flagged queries as one JSON object per line.
pub fn save_flagged_jsonl(path: &Path, entries: &[FlaggedQuery]) -> Result<()> {
    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Format(format!("flagged entry serialization failed: {e}")))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Replay a flagged-query file into a fresh store. Entries are inserted in
/// file order, so eviction applies exactly as it would have live.
pub fn load_flagged_jsonl(
    path: &Path,
    capacity: usize,
    similarity_threshold: f64,
) -> Result<FlaggedStore> {
    let mut store = FlaggedStore::new(capacity, similarity_threshold)?;
    let reader = BufReader::new(std::fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: FlaggedQuery = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("flagged line {}: {e}", i + 1)))?;
        store.insert(entry);
    }
    Ok(store)
}
