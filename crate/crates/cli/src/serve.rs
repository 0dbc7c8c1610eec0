//! WebSocket front end for [`SimSession`].
//!
//! Three threads: the acceptor, one connection handler, and the tick driver
//! (the caller's thread). Client messages reach the driver over a channel;
//! server messages go out through a bounded queue owned by the current
//! connection, so a slow client loses messages instead of stalling time.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message, WebSocket};

use crate::session::SimSession;
use crate::ws::{parse_client, ClientMessage, ServerBody, ServerMessage};

pub const WS_PATH: &str = "/ws";
const OUTBOX_CAPACITY: usize = 1024;
const POLL: Duration = Duration::from_millis(2);

enum Inbound {
    Message(ClientMessage),
    Disconnected,
}

type Outbox = Arc<Mutex<Option<SyncSender<String>>>>;

fn reject(status: StatusCode, text: &str) -> ErrorResponse {
    let mut r = ErrorResponse::new(Some(text.to_string()));
    *r.status_mut() = status;
    r
}

fn handshake(stream: TcpStream, busy: bool) -> Result<WebSocket<TcpStream>> {
    let check = move |req: &Request, resp: Response| {
        if req.uri().path() != WS_PATH {
            Err(reject(StatusCode::NOT_FOUND, "only /ws is served"))
        } else if busy {
            Err(reject(StatusCode::CONFLICT, "another client is connected"))
        } else {
            Ok(resp)
        }
    };
    tungstenite::accept_hdr(stream, check).map_err(|e| anyhow::anyhow!("websocket handshake: {e}"))
}

fn connection(mut ws: WebSocket<TcpStream>, inbound: Sender<Inbound>, outbound: Receiver<String>, stop: Arc<AtomicBool>) {
    if let Err(e) = ws.get_ref().set_read_timeout(Some(POLL)) {
        log::warn!("cannot poll client socket: {e}");
    }
    'conn: while !stop.load(Ordering::Relaxed) {
        while let Ok(text) = outbound.try_recv() {
            if ws.send(Message::text(text)).is_err() {
                break 'conn;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => match parse_client(text.as_str()) {
                Ok(m) => {
                    if inbound.send(Inbound::Message(m)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let err = ServerMessage { seq: 0, body: ServerBody::Error { text: format!("bad message: {e}") } };
                    let _ = ws.send(Message::text(err.to_json()));
                }
            },
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    let _ = inbound.send(Inbound::Disconnected);
}

fn acceptor(listener: TcpListener, inbound: Sender<Inbound>, outbox: Outbox, stop: Arc<AtomicBool>) {
    let connected = Arc::new(AtomicBool::new(false));
    while !stop.load(Ordering::Relaxed) {
        let stream = match listener.accept() {
            Ok((s, peer)) => {
                log::info!("connection from {peer}");
                s
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
                continue;
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if stream.set_nonblocking(false).is_err() {
            continue;
        }
        let busy = connected.load(Ordering::Acquire);
        let ws = match handshake(stream, busy) {
            Ok(ws) => ws,
            Err(e) => {
                log::info!("{e}");
                continue;
            }
        };
        connected.store(true, Ordering::Release);
        let (tx, rx) = mpsc::sync_channel(OUTBOX_CAPACITY);
        *outbox.lock().expect("outbox") = Some(tx);
        let inbound = inbound.clone();
        let stop = stop.clone();
        let connected = connected.clone();
        thread::spawn(move || {
            connection(ws, inbound, rx, stop);
            connected.store(false, Ordering::Release);
        });
    }
}

fn publish(outbox: &Outbox, messages: Vec<ServerMessage>) {
    let mut slot = outbox.lock().expect("outbox");
    let Some(tx) = slot.as_ref() else { return };
    for m in messages {
        match tx.try_send(m.to_json()) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => log::debug!("client is behind, dropping message {}", m.seq),
            Err(TrySendError::Disconnected(_)) => {
                *slot = None;
                return;
            }
        }
    }
}

/// Runs the session at its controller period until `stop` is raised or
/// `done` returns true, then hands the session back.
pub fn run(
    mut session: SimSession,
    listener: TcpListener,
    dt: f64,
    stop: Arc<AtomicBool>,
    mut done: impl FnMut(&SimSession) -> bool,
) -> Result<SimSession> {
    listener.set_nonblocking(true).context("listener")?;
    let (in_tx, in_rx) = mpsc::channel();
    let outbox: Outbox = Arc::new(Mutex::new(None));
    let acceptor_thread = {
        let (outbox, stop) = (outbox.clone(), stop.clone());
        thread::spawn(move || acceptor(listener, in_tx, outbox, stop))
    };
    let period = Duration::from_secs_f64(dt);
    let clock = Instant::now();
    let mut ticks: u32 = 0;
    while !stop.load(Ordering::Relaxed) && !done(&session) {
        let mut out = Vec::new();
        while let Ok(ev) = in_rx.try_recv() {
            match ev {
                Inbound::Message(m) => out.extend(session.handle(m)),
                Inbound::Disconnected => {
                    log::info!("client disconnected");
                    session.disconnect();
                }
            }
        }
        out.extend(session.step());
        publish(&outbox, out);
        ticks = ticks.wrapping_add(1);
        let deadline = period * ticks;
        match deadline.checked_sub(clock.elapsed()) {
            Some(rest) => thread::sleep(rest),
            None => thread::yield_now(),
        }
    }
    stop.store(true, Ordering::Relaxed);
    acceptor_thread.join().map_err(|_| anyhow::anyhow!("acceptor thread panicked"))?;
    Ok(session)
}

/// A server running on a background thread.
pub struct ServeHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: thread::JoinHandle<Result<SimSession>>,
}

impl ServeHandle {
    pub fn url(&self) -> String {
        format!("ws://{}{WS_PATH}", self.addr)
    }

    pub fn stop(self) -> Result<SimSession> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.join().map_err(|_| anyhow::anyhow!("serve thread panicked"))?
    }
}

pub fn spawn(session: SimSession, bind: &str, dt: f64) -> Result<ServeHandle> {
    let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::spawn(move || run(session, listener, dt, flag, |_| false));
    Ok(ServeHandle { addr, stop, thread })
}
