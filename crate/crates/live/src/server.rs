//! WebSocket endpoint and health check. Each connection owns at most one
//! session and drives it from its own tick loop.

use crate::protocol::{parse_command, Command, Event, Health, ServerMessage};
use crate::session::{tick_period, Pedal, Session};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::sync::mpsc;
use tokio::time::{interval, Interval, MissedTickBehavior};
use tracing::{debug, info, warn};

pub const OUTBOUND_CAPACITY: usize = 64;
pub const TICK_BUDGET: Duration = Duration::from_millis(100);

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<AtomicUsize>,
}

impl AppState {
    pub fn session_count(&self) -> usize {
        self.sessions.load(Ordering::SeqCst)
    }
}

/// Keeps the open-session count honest however the session ends.
struct Counted {
    session: Session,
    sessions: Arc<AtomicUsize>,
}

impl Counted {
    fn new(session: Session, state: &AppState) -> Self {
        state.sessions.fetch_add(1, Ordering::SeqCst);
        Self { session, sessions: state.sessions.clone() }
    }
}

impl Drop for Counted {
    fn drop(&mut self) {
        self.sessions.fetch_sub(1, Ordering::SeqCst);
    }
}

pub fn router(state: AppState) -> Router {
    Router::new().route("/health", get(health)).route("/ws", get(upgrade)).with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok", sessions: state.session_count() })
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

struct Outbox {
    tx: mpsc::Sender<ServerMessage>,
    dropped: u64,
}

impl Outbox {
    /// Never waits: a client that cannot keep up loses frames.
    fn send(&mut self, msg: ServerMessage) {
        if self.tx.try_send(msg).is_err() {
            self.dropped += 1;
            debug!(dropped = self.dropped, "outbound queue full, frame dropped");
        }
    }

    fn error(&mut self, message: impl Into<String>) {
        self.send(ServerMessage::error(message));
    }
}

enum Flow {
    Continue,
    Close,
}

async fn connection(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<ServerMessage>(OUTBOUND_CAPACITY);
    let (cmd_tx, mut cmd_rx) = mpsc::unbounded_channel::<Result<Command, String>>();

    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            let text = serde_json::to_string(&msg).expect("messages serialise");
            if sink.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            let cmd = match msg {
                Message::Text(text) => parse_command(text.as_str()),
                Message::Binary(bytes) => match std::str::from_utf8(&bytes) {
                    Ok(text) => parse_command(text),
                    Err(_) => Err("binary message is not UTF-8".to_string()),
                },
                Message::Close(_) => break,
                _ => continue,
            };
            if cmd_tx.send(cmd).is_err() {
                break;
            }
        }
    });

    let mut out = Outbox { tx: out_tx, dropped: 0 };
    let mut session: Option<Counted> = None;
    let mut clock = pacer(1.0);
    'conn: loop {
        if session.is_none() {
            let Some(cmd) = cmd_rx.recv().await else { break };
            if let Flow::Close = apply(cmd, &mut session, &mut out, &state, &mut clock) {
                break;
            }
            continue;
        }
        clock.tick().await;
        loop {
            match cmd_rx.try_recv() {
                Ok(cmd) => {
                    if let Flow::Close = apply(cmd, &mut session, &mut out, &state, &mut clock) {
                        break 'conn;
                    }
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => break 'conn,
            }
        }
        let Some(mut counted) = session.take() else { continue };
        if counted.session.paused() {
            session = Some(counted);
            continue;
        }
        let started = Instant::now();
        let (counted, frame) = tokio::task::spawn_blocking(move || {
            let frame = counted.session.tick();
            (counted, frame)
        })
        .await
        .expect("tick task panicked");
        let took = started.elapsed();
        if took > TICK_BUDGET {
            warn!(t = frame.t_s, ms = took.as_secs_f64() * 1e3, "tick over budget");
        }
        session = Some(counted);
        out.send(ServerMessage::new(Event::Frame(frame)));
    }
    drop(session);
    reader.abort();
    drop(out);
    let _ = writer.await;
}

fn pacer(pace: f64) -> Interval {
    let mut clock = interval(tick_period(pace));
    clock.set_missed_tick_behavior(MissedTickBehavior::Delay);
    clock
}

fn apply(
    cmd: Result<Command, String>,
    session: &mut Option<Counted>,
    out: &mut Outbox,
    state: &AppState,
    clock: &mut Interval,
) -> Flow {
    let cmd = match cmd {
        Ok(cmd) => cmd,
        Err(message) => {
            out.error(message);
            return Flow::Continue;
        }
    };
    if let Command::Open { scenario, seed, pace } = &cmd {
        match Session::open(scenario, *seed, *pace) {
            Ok(s) => {
                *session = None;
                let mut counted = Counted::new(s, state);
                info!(scenario = %scenario, seed, pace, "session opened");
                *clock = pacer(*pace);
                out.send(ServerMessage::new(Event::Frame(counted.session.frame())));
                *session = Some(counted);
            }
            Err(e) => out.error(e.to_string()),
        }
        return Flow::Continue;
    }
    if let Command::Close = cmd {
        *session = None;
        out.send(ServerMessage::new(Event::Closed));
        return Flow::Close;
    }
    let Some(counted) = session.as_mut() else {
        out.error("no open session");
        return Flow::Continue;
    };
    let s = &mut counted.session;
    match cmd {
        Command::Pedal { throttle, brake } => match Pedal::new(throttle, brake) {
            Ok(p) => s.set_pedal(p),
            Err(e) => out.error(e.to_string()),
        },
        Command::Pause => {
            s.set_paused(true);
            out.send(ServerMessage::new(Event::Frame(s.frame())));
        }
        Command::Resume => {
            s.set_paused(false);
            out.send(ServerMessage::new(Event::Frame(s.frame())));
        }
        Command::Reset => {
            s.reset();
            out.send(ServerMessage::new(Event::Frame(s.frame())));
        }
        Command::Open { .. } | Command::Close => unreachable!(),
    }
    Flow::Continue
}
