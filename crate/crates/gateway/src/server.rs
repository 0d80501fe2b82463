use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};
use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::CloseFrame;
use tungstenite::{Message, WebSocket};

use conrft_core::envs::{SimEnv, StepInfo};
use conrft_core::intervention::{InterventionDecision, Intervener, StepReport};
use conrft_core::types::ActionVector;

use crate::protocol::{frame_message, parse_client, ClientMessage, ServerMessage};
use crate::{Clock, GatewayError, SystemClock};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    /// Actions older than this are treated as dead input.
    pub stale_after: Duration,
    /// Socket poll interval of the server threads.
    pub poll: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            stale_after: Duration::from_millis(500),
            poll: Duration::from_millis(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GatewayStats {
    pub frames_sent: u64,
    /// Frames overwritten before the console could take them.
    pub frames_dropped: u64,
    pub rejected_connections: u64,
}

#[derive(Debug, Default)]
struct Control {
    connected: bool,
    takeover: bool,
    /// Latest action and when it arrived.
    action: Option<(Vec<f64>, Duration)>,
}

struct Shared {
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    control: Mutex<Control>,
    frame: Mutex<Option<String>>,
    stop: AtomicBool,
    frames_sent: AtomicU64,
    frames_dropped: AtomicU64,
    rejected: AtomicU64,
}

/// A running server; stops when shut down or dropped.
pub struct Gateway {
    shared: Arc<Shared>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl Gateway {
    pub fn serve(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self, GatewayError> {
        Self::serve_with(addr, GatewayConfig::default(), Arc::new(SystemClock::default()))
    }

    pub fn serve_with(
        addr: impl ToSocketAddrs + std::fmt::Debug,
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, GatewayError> {
        let shown = format!("{addr:?}");
        let listener = TcpListener::bind(addr).map_err(|source| GatewayError::Bind { addr: shown, source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            clock,
            control: Mutex::new(Control::default()),
            frame: Mutex::new(None),
            stop: AtomicBool::new(false),
            frames_sent: AtomicU64::new(0),
            frames_dropped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        });
        let s = shared.clone();
        let acceptor = std::thread::Builder::new()
            .name("gateway-accept".into())
            .spawn(move || accept_loop(listener, s))?;
        info!("gateway listening on {addr}");
        Ok(Self {
            shared,
            addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_connected(&self) -> bool {
        self.shared.control.lock().unwrap().connected
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            frames_sent: self.shared.frames_sent.load(Ordering::Relaxed),
            frames_dropped: self.shared.frames_dropped.load(Ordering::Relaxed),
            rejected_connections: self.shared.rejected.load(Ordering::Relaxed),
        }
    }

    /// Handle for the interaction loop.
    pub fn intervener(&self) -> RemoteIntervener {
        RemoteIntervener {
            shared: self.shared.clone(),
        }
    }

    /// Closes any console connection and joins the server threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            if h.join().is_err() {
                warn!("gateway accept thread panicked");
            }
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut sessions: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let busy = {
                    let mut c = shared.control.lock().unwrap();
                    std::mem::replace(&mut c.connected, true)
                };
                let s = shared.clone();
                let spawned = if busy {
                    s.rejected.fetch_add(1, Ordering::Relaxed);
                    std::thread::Builder::new().spawn(move || reject(stream, peer, &s))
                } else {
                    std::thread::Builder::new()
                        .name("gateway-session".into())
                        .spawn(move || session(stream, peer, &s))
                };
                match spawned {
                    Ok(h) => sessions.push(h),
                    Err(e) => warn!("cannot start connection thread: {e}"),
                }
                sessions.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(shared.config.poll),
            Err(e) => {
                warn!("accept failed: {e}");
                std::thread::sleep(shared.config.poll);
            }
        }
    }
    for h in sessions {
        let _ = h.join();
    }
}

fn handshake(stream: TcpStream, shared: &Shared) -> Option<WebSocket<TcpStream>> {
    let ready = stream
        .set_nonblocking(false)
        .and_then(|_| stream.set_read_timeout(Some(Duration::from_secs(2))))
        .and_then(|_| stream.set_write_timeout(Some(Duration::from_secs(1))));
    if let Err(e) = ready {
        warn!("cannot configure connection: {e}");
        return None;
    }
    match tungstenite::accept(stream) {
        Ok(ws) => {
            // short reads keep the session responsive to frames and shutdown
            if let Err(e) = ws.get_ref().set_read_timeout(Some(shared.config.poll)) {
                warn!("cannot configure connection: {e}");
                return None;
            }
            Some(ws)
        }
        Err(e) => {
            warn!("websocket handshake failed: {e}");
            None
        }
    }
}

/// Sends the close frame and waits briefly for the peer to acknowledge it.
fn close(ws: &mut WebSocket<TcpStream>, code: CloseCode, reason: &str) {
    let _ = ws.close(Some(CloseFrame {
        code,
        reason: reason.to_string().into(),
    }));
    let deadline = Instant::now() + Duration::from_secs(1);
    while Instant::now() < deadline {
        match ws.read() {
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
            Err(_) => break,
        }
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

fn reject(stream: TcpStream, peer: SocketAddr, shared: &Shared) {
    info!("rejecting second console connection from {peer}");
    if let Some(mut ws) = handshake(stream, shared) {
        let msg = ServerMessage::Error {
            message: "an operator is already connected".into(),
        };
        let _ = ws.send(Message::text(msg.to_json()));
        close(&mut ws, CloseCode::Policy, "an operator is already connected");
    }
}

fn session(stream: TcpStream, peer: SocketAddr, shared: &Shared) {
    if let Some(mut ws) = handshake(stream, shared) {
        info!("console connected from {peer}");
        serve_console(&mut ws, shared);
    }
    let mut c = shared.control.lock().unwrap();
    if c.takeover {
        warn!("console {peer} disconnected during takeover; control returns to the policy");
    } else {
        info!("console {peer} disconnected");
    }
    *c = Control::default();
}

fn serve_console(ws: &mut WebSocket<TcpStream>, shared: &Shared) {
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            close(ws, CloseCode::Away, "gateway shutting down");
            return;
        }
        let pending = shared.frame.lock().unwrap().take();
        if let Some(f) = pending {
            match ws.send(Message::text(f)) {
                Ok(()) => {
                    shared.frames_sent.fetch_add(1, Ordering::Relaxed);
                }
                Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {
                    shared.frames_dropped.fetch_add(1, Ordering::Relaxed);
                }
                Err(tungstenite::Error::WriteBufferFull(_)) => {
                    shared.frames_dropped.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    warn!("console send failed: {e}");
                    return;
                }
            }
        }
        let text = match ws.read() {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                warn!("binary message from console; closing");
                close(ws, CloseCode::Protocol, "binary messages are not part of the protocol");
                return;
            }
            Ok(Message::Close(_)) => return,
            Ok(_) => continue,
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => continue,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return,
            Err(e) => {
                warn!("console read failed: {e}");
                return;
            }
        };
        match parse_client(text.as_str()) {
            Ok(ClientMessage::Takeover { on }) => {
                let mut c = shared.control.lock().unwrap();
                c.takeover = on;
                if !on {
                    c.action = None;
                }
            }
            Ok(ClientMessage::Action { a }) => {
                shared.control.lock().unwrap().action = Some((a, shared.clock.now()));
            }
            Ok(ClientMessage::Ping) => {
                if let Err(e) = ws.send(Message::text(ServerMessage::Pong.to_json())) {
                    warn!("console send failed: {e}");
                    return;
                }
            }
            Ok(ClientMessage::Unknown(kind)) => warn!("ignoring console message of unknown type {kind:?}"),
            Err(e) => {
                warn!("{e}; closing console connection");
                close(ws, CloseCode::Protocol, "malformed message");
                return;
            }
        }
    }
}

/// The interaction-loop side of the gateway.
#[derive(Clone)]
pub struct RemoteIntervener {
    shared: Arc<Shared>,
}

impl RemoteIntervener {
    /// Current decision for an environment with `action_dim` actions.
    pub fn decision(&self, action_dim: usize) -> InterventionDecision {
        let c = self.shared.control.lock().unwrap();
        if !c.connected || !c.takeover {
            return InterventionDecision::inactive();
        }
        match &c.action {
            Some((a, at)) if self.shared.clock.now().saturating_sub(*at) <= self.shared.config.stale_after => {
                if a.len() == action_dim {
                    InterventionDecision::take(ActionVector(a.clone()))
                } else {
                    warn!("console action has {} components, expected {action_dim}", a.len());
                    InterventionDecision::inactive()
                }
            }
            _ => InterventionDecision::inactive(),
        }
    }
}

impl Intervener for RemoteIntervener {
    fn decide(&mut self, env: &SimEnv, _last: Option<&StepInfo>) -> InterventionDecision {
        self.decision(env.action_dim())
    }

    fn report(&mut self, report: &StepReport<'_>) {
        if !self.shared.control.lock().unwrap().connected {
            return;
        }
        match frame_message(report) {
            Ok(msg) => {
                let old = self.shared.frame.lock().unwrap().replace(msg.to_json());
                if old.is_some() {
                    self.shared.frames_dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
            Err(e) => warn!("cannot stream frame: {e}"),
        }
    }
}
