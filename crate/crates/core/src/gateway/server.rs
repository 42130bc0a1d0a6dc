//! TCP front end and the matching client.
//!
//! Transport: newline-delimited JSON over TCP, one object per message.
//! Requests:
//!
//! ```json
//! {"type":"query","session":"abc","mode":"soft_label","features":[0.1,0.2]}
//! {"type":"health"}
//! {"type":"metrics"}
//! {"type":"shutdown"}
//! ```
//!
//! `mode` is optional; the session is pinned to its first-seen mode.
//! `metrics` and `shutdown` only answer on loopback connections. Responses
//! carry a status plus the payload and never any disposition:
//!
//! ```json
//! {"status":"ok","probs":[0.7,0.2,0.1]}
//! {"status":"ok","class":2}
//! {"status":"error","error":"client","message":"feature dimension 5 ..."}
//! {"status":"error","error":"server","message":"internal error"}
//! ```

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attacks::VictimOracle;
use crate::error::{Error, Result};
use crate::response::{ResponseMode, ResponsePayload};

use super::{Gateway, GatewayConfig, TimingSummary, WallClock};

const HANDLER_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireRequest {
    Query {
        session: String,
        #[serde(default)]
        mode: Option<ResponseMode>,
        features: Vec<f64>,
    },
    Health,
    Metrics,
    Shutdown,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WireResponse {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uptime_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl WireResponse {
    fn ok() -> Self {
        WireResponse {
            status: "ok".to_string(),
            ..WireResponse::default()
        }
    }

    fn client_error(message: impl Into<String>) -> Self {
        WireResponse {
            status: "error".to_string(),
            error: Some("client".to_string()),
            message: Some(message.into()),
            ..WireResponse::default()
        }
    }

    /// Internal failures answer with a fixed message; details stay in the
    /// service, never on the wire.
    fn server_error() -> Self {
        WireResponse {
            status: "error".to_string(),
            error: Some("server".to_string()),
            message: Some("internal error".to_string()),
            ..WireResponse::default()
        }
    }
}

struct ServiceState {
    gateway: Arc<Gateway>,
    shutdown: AtomicBool,
    started: Instant,
    addr: SocketAddr,
}

/// A running gateway service. Dropping it without calling `stop` leaves the
/// accept thread running; call `stop` (or send a shutdown request) first.
pub struct Service {
    state: Arc<ServiceState>,
    accept_handle: Option<JoinHandle<()>>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    flagged_path: Option<PathBuf>,
}

impl Service {
    /// Bind and start accepting. Port 0 picks an ephemeral port; read it
    /// back from `addr()`.
    pub fn start(
        gateway: Arc<Gateway>,
        listen_addr: &str,
        flagged_path: Option<PathBuf>,
    ) -> Result<Service> {
        let listener = TcpListener::bind(listen_addr)
            .map_err(|e| Error::Protocol(format!("cannot bind {listen_addr}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Protocol(format!("no local address: {e}")))?;
        let state = Arc::new(ServiceState {
            gateway,
            shutdown: AtomicBool::new(false),
            started: Instant::now(),
            addr,
        });
        let handlers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));
        let accept_state = Arc::clone(&state);
        let accept_handlers = Arc::clone(&handlers);
        let accept_handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let conn_state = Arc::clone(&accept_state);
                let handle = std::thread::spawn(move || handle_connection(stream, conn_state));
                accept_handlers.lock().unwrap().push(handle);
            }
        });
        Ok(Service {
            state,
            accept_handle: Some(accept_handle),
            handlers,
            flagged_path,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.state.addr
    }

    /// Block until a shutdown arrives (wire request or `stop` from another
    /// thread), then drain connections, flush the flagged store, and return
    /// the timing summary.
    pub fn wait(mut self) -> Result<TimingSummary> {
        if let Some(handle) = self.accept_handle.take() {
            let _ = handle.join();
        }
        loop {
            let drained: Vec<JoinHandle<()>> = {
                let mut handlers = self.handlers.lock().unwrap();
                handlers.drain(..).collect()
            };
            if drained.is_empty() {
                break;
            }
            for handle in drained {
                let _ = handle.join();
            }
        }
        if let Some(path) = &self.flagged_path {
            self.state.gateway.flush_flagged(path)?;
        }
        Ok(self.state.gateway.timing_summary())
    }

    /// Request shutdown from the hosting process and finish like `wait`.
    pub fn stop(self) -> Result<TimingSummary> {
        self.state.shutdown.store(true, Ordering::SeqCst);
        wake(self.state.addr);
        self.wait()
    }
}

/// Load everything from config, serve until shutdown, and return the final
/// timing summary. `on_ready` fires once with the bound address.
pub fn serve(config: &GatewayConfig, on_ready: impl FnOnce(SocketAddr)) -> Result<TimingSummary> {
    let gateway = Arc::new(Gateway::from_config(config, Arc::new(WallClock))?);
    let service = Service::start(gateway, &config.listen_addr, config.flagged_path.clone())?;
    on_ready(service.addr());
    service.wait()
}

/// Unblock the accept loop after the shutdown flag is set.
fn wake(addr: SocketAddr) {
    let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
}

fn handle_connection(stream: TcpStream, state: Arc<ServiceState>) {
    let peer_is_loopback = stream
        .peer_addr()
        .map(|a| a.ip().is_loopback())
        .unwrap_or(false);
    // Poll with a read timeout so handlers notice shutdown instead of
    // blocking forever on idle connections.
    if stream.set_read_timeout(Some(HANDLER_POLL)).is_err() {
        return;
    }
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {
                if line.trim().is_empty() {
                    line.clear();
                    continue;
                }
                let response = dispatch(&line, peer_is_loopback, &state);
                let shutting_down = state.shutdown.load(Ordering::SeqCst);
                if write_response(&mut writer, &response).is_err() {
                    break;
                }
                line.clear();
                if shutting_down {
                    break;
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                // Partial bytes read before the timeout stay in `line` and
                // the next pass keeps appending to them.
                if state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
            }
            Err(_) => break,
        }
    }
}

fn dispatch(line: &str, peer_is_loopback: bool, state: &Arc<ServiceState>) -> WireResponse {
    let request: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return WireResponse::client_error(format!("bad request: {e}")),
    };
    match request {
        WireRequest::Query {
            session,
            mode,
            features,
        } => match state.gateway.handle_query(&session, mode, &features) {
            Ok((ResponsePayload::Soft(probs), _)) => WireResponse {
                probs: Some(probs),
                ..WireResponse::ok()
            },
            Ok((ResponsePayload::Hard(class), _)) => WireResponse {
                class: Some(class),
                ..WireResponse::ok()
            },
            Err(Error::Input(message)) => WireResponse::client_error(message),
            Err(_) => WireResponse::server_error(),
        },
        WireRequest::Health => WireResponse {
            info: Some("healthy".to_string()),
            uptime_ms: Some(state.started.elapsed().as_millis() as u64),
            ..WireResponse::ok()
        },
        WireRequest::Metrics => {
            if !peer_is_loopback {
                return WireResponse::client_error("metrics endpoint is loopback-only");
            }
            WireResponse {
                timings: Some(state.gateway.timing_summary()),
                ..WireResponse::ok()
            }
        }
        WireRequest::Shutdown => {
            if !peer_is_loopback {
                return WireResponse::client_error("shutdown endpoint is loopback-only");
            }
            state.shutdown.store(true, Ordering::SeqCst);
            wake(state.addr);
            WireResponse {
                info: Some("shutting down".to_string()),
                ..WireResponse::ok()
            }
        }
    }
}

fn write_response(writer: &mut TcpStream, response: &WireResponse) -> std::io::Result<()> {
    let mut body = serde_json::to_string(response)
        .unwrap_or_else(|_| "{\"status\":\"error\",\"error\":\"server\"}".to_string());
    body.push('\n');
    writer.write_all(body.as_bytes())?;
    writer.flush()
}

/// Blocking line-oriented client for the wire protocol.
pub struct GatewayClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl GatewayClient {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
            .map_err(|e| Error::Protocol(format!("cannot connect to {addr}: {e}")))?;
        let writer = stream
            .try_clone()
            .map_err(|e| Error::Protocol(format!("cannot clone stream: {e}")))?;
        Ok(GatewayClient {
            reader: BufReader::new(stream),
            writer,
        })
    }

    fn roundtrip(&mut self, request: &WireRequest) -> Result<WireResponse> {
        let mut body = serde_json::to_string(request)
            .map_err(|e| Error::Protocol(format!("request serialization failed: {e}")))?;
        body.push('\n');
        self.writer
            .write_all(body.as_bytes())
            .map_err(|e| Error::Protocol(format!("send failed: {e}")))?;
        self.writer
            .flush()
            .map_err(|e| Error::Protocol(format!("flush failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("receive failed: {e}")))?;
        if n == 0 {
            return Err(Error::Protocol("connection closed by server".to_string()));
        }
        serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad response: {e}")))
    }

    pub fn query(
        &mut self,
        session: &str,
        mode: Option<ResponseMode>,
        features: &[f64],
    ) -> Result<ResponsePayload> {
        let response = self.roundtrip(&WireRequest::Query {
            session: session.to_string(),
            mode,
            features: features.to_vec(),
        })?;
        if response.status != "ok" {
            let message = response.message.unwrap_or_else(|| "unknown".to_string());
            return match response.error.as_deref() {
                Some("client") => Err(Error::input(message)),
                _ => Err(Error::Oracle(message)),
            };
        }
        match (response.probs, response.class) {
            (Some(probs), None) => Ok(ResponsePayload::Soft(probs)),
            (None, Some(class)) => Ok(ResponsePayload::Hard(class)),
            _ => Err(Error::Protocol(
                "response carried neither probs nor class".to_string(),
            )),
        }
    }

    pub fn health(&mut self) -> Result<(String, u64)> {
        let response = self.roundtrip(&WireRequest::Health)?;
        if response.status != "ok" {
            return Err(Error::Protocol("health check failed".to_string()));
        }
        Ok((
            response.info.unwrap_or_default(),
            response.uptime_ms.unwrap_or(0),
        ))
    }

    pub fn metrics(&mut self) -> Result<TimingSummary> {
        let response = self.roundtrip(&WireRequest::Metrics)?;
        match (response.status.as_str(), response.timings) {
            ("ok", Some(timings)) => Ok(timings),
            _ => Err(Error::Protocol(
                response
                    .message
                    .unwrap_or_else(|| "metrics unavailable".to_string()),
            )),
        }
    }

    pub fn shutdown(&mut self) -> Result<()> {
        let response = self.roundtrip(&WireRequest::Shutdown)?;
        if response.status != "ok" {
            return Err(Error::Protocol(
                response
                    .message
                    .unwrap_or_else(|| "shutdown refused".to_string()),
            ));
        }
        Ok(())
    }
}

/// Victim oracle over the wire: one client connection, one session, the
/// declared mode on every query.
pub struct RemoteOracle {
    client: GatewayClient,
    session: String,
    mode: ResponseMode,
    counter: u64,
}

impl RemoteOracle {
    pub fn connect(addr: SocketAddr, session: impl Into<String>, mode: ResponseMode) -> Result<Self> {
        Ok(RemoteOracle {
            client: GatewayClient::connect(addr)?,
            session: session.into(),
            mode,
            counter: 0,
        })
    }
}

impl VictimOracle for RemoteOracle {
    fn query(&mut self, x: &[f64]) -> Result<ResponsePayload> {
        self.counter += 1;
        self.client.query(&self.session, Some(self.mode), x)
    }

    fn mode(&self) -> ResponseMode {
        self.mode
    }

    fn queries_used(&self) -> u64 {
        self.counter
    }
}
