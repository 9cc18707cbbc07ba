//! WebSocket host for live negotiation sessions.
//!
//! One session per connection on `GET /ws`. The first text message must be
//! `hello` (new session) or `resume` (reattach a dropped one). Messages are
//! handled strictly in arrival order by the connection's own task; the only
//! shared state is the registry that hands out ids and parks disconnected
//! sessions for the resume window.

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use cooptraj_core::session::{Phase, Session, SessionConfig, SessionMessage, SessionRegistry};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

/// How often an idle connection checks its session's timeout.
const POLL_INTERVAL: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    /// Directory served at `/` (the browser client), if any.
    pub static_dir: Option<PathBuf>,
    pub session: SessionConfig,
}

#[derive(Clone)]
struct AppState {
    registry: Arc<Mutex<SessionRegistry>>,
    epoch: Instant,
}

impl AppState {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, SessionRegistry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// The HTTP router: `/ws`, `/healthz` and optionally static files.
pub fn router(config: &ServeConfig) -> Router {
    let state = AppState {
        registry: Arc::new(Mutex::new(SessionRegistry::new(config.session))),
        epoch: Instant::now(),
    };
    let purger = state.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(Duration::from_secs(5));
        loop {
            every.tick().await;
            let now = purger.now();
            let dropped = purger.registry().purge(now);
            if dropped > 0 {
                log::info!("discarded {dropped} expired session(s)");
            }
        }
    });
    let app = Router::new()
        .route("/ws", get(upgrade))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `config.addr` and serves until the process exits.
pub async fn serve(config: ServeConfig) -> io::Result<()> {
    let listener = TcpListener::bind(config.addr).await?;
    serve_on(listener, config).await
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: TcpListener, config: ServeConfig) -> io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(&config)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn send_all(socket: &mut WebSocket, msgs: Vec<SessionMessage>) -> bool {
    for m in msgs {
        if socket.send(Message::Text(m.to_json().into())).await.is_err() {
            return false;
        }
    }
    true
}

/// Waits for the first text frame of a connection.
async fn first_text(socket: &mut WebSocket) -> Option<String> {
    while let Some(Ok(msg)) = socket.recv().await {
        match msg {
            Message::Text(t) => return Some(t.to_string()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
    None
}

fn pace(session: &Session) -> Duration {
    let rtf = session.config().real_time_factor;
    match session.scenario() {
        Some(s) if rtf > 0.0 => Duration::from_secs_f64(s.sim.dt_sim / rtf),
        _ => Duration::ZERO,
    }
}

async fn connection(mut socket: WebSocket, state: AppState) {
    let Some(text) = first_text(&mut socket).await else {
        return;
    };
    let connect = state.registry().connect(&text, state.now());
    if !send_all(&mut socket, connect.replies).await {
        if let Some(s) = connect.session {
            state.registry().park(s, state.now());
        }
        return;
    }
    let Some(mut session) = connect.session else {
        let _ = socket.send(Message::Close(None)).await;
        return;
    };
    log::info!("session {} attached", session.id());

    loop {
        let executing = session.phase() == Phase::Executing;
        let outbound = tokio::select! {
            biased;
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(t))) => session.handle_text(t.as_str(), state.now()),
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => {
                    log::info!("session {} disconnected in phase {:?}", session.id(), session.phase());
                    state.registry().park(session, state.now());
                    return;
                }
                Some(Ok(_)) => Vec::new(),
            },
            _ = tokio::time::sleep(pace(&session)), if executing => {
                session.next_tick().into_iter().collect()
            }
            _ = tokio::time::sleep(POLL_INTERVAL), if !executing => session.poll(state.now()),
        };
        if !send_all(&mut socket, outbound).await {
            state.registry().park(session, state.now());
            return;
        }
        if session.phase() == Phase::Done {
            log::info!("session {} done", session.id());
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
    }
}
