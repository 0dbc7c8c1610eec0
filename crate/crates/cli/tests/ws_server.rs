use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use sfd_cli::serve::{spawn, ServeHandle};
use sfd_cli::session::{SessionConfig, SimSession};
use sfd_cli::ws::{parse_server, ClientBody, ClientMessage, ServerBody, ServerMessage, SessionMode};
use sfd_core::closed_loop::{replay, Termination, Verdict};
use sfd_core::learn::{ExpertDriver, ScriptedExpert};
use sfd_core::sensor::CameraSpec;
use sfd_core::world::{load_scenario, DT};
use sfd_core::Instruction;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn server() -> ServeHandle {
    let mut cfg = SessionConfig::new(SessionMode::Teleop, "builtin:S010");
    cfg.camera = CameraSpec { width: 32, height: 16, ..Default::default() };
    cfg.frame_every = 30;
    spawn(SimSession::new(cfg).unwrap(), "127.0.0.1:0", DT).unwrap()
}

fn connect(url: &str) -> Client {
    let (ws, _) = tungstenite::connect(url).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(5))).unwrap();
    }
    ws
}

fn send(ws: &mut Client, seq: u64, body: ClientBody) {
    ws.send(Message::text(ClientMessage { seq, body }.to_json())).unwrap();
}

/// Reads whatever the server has queued.
fn drain(ws: &mut Client, into: &mut Vec<ServerMessage>) {
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => into.push(parse_server(t.as_str()).unwrap()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                return
            }
            Err(e) => panic!("read failed: {e}"),
        }
    }
}

fn wait_for(ws: &mut Client, seen: &mut Vec<ServerMessage>, limit: Duration, pred: impl Fn(&ServerMessage) -> bool) {
    let start = Instant::now();
    while !seen.iter().any(&pred) {
        assert!(start.elapsed() < limit, "timed out waiting for a server message");
        drain(ws, seen);
    }
}

#[test]
fn hello_gets_state_and_seq_increases() {
    let h = server();
    let mut ws = connect(&h.url());
    send(&mut ws, 1, ClientBody::Hello);
    let mut seen = Vec::new();
    wait_for(&mut ws, &mut seen, Duration::from_secs(5), |m| matches!(m.body, ServerBody::State { .. }));
    wait_for(&mut ws, &mut seen, Duration::from_secs(5), |m| matches!(m.body, ServerBody::Frame { .. }));
    assert!(seen.windows(2).all(|w| w[1].seq > w[0].seq));
    ws.close(None).ok();
    h.stop().unwrap();
}

#[test]
fn other_paths_and_second_clients_are_refused() {
    let h = server();
    let other = format!("ws://{}/elsewhere", h.addr);
    match tungstenite::connect(other.as_str()) {
        Err(tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 404),
        other => panic!("expected 404, got {other:?}"),
    }
    let mut first = connect(&h.url());
    send(&mut first, 1, ClientBody::Hello);
    let mut seen = Vec::new();
    wait_for(&mut first, &mut seen, Duration::from_secs(5), |m| matches!(m.body, ServerBody::State { .. }));
    match tungstenite::connect(h.url().as_str()) {
        Err(tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 409),
        other => panic!("expected 409, got {other:?}"),
    }
    first.close(None).ok();
    drop(first);
    h.stop().unwrap();
}

#[test]
fn twenty_hertz_controls_are_each_held_in_order() {
    let h = server();
    let mut ws = connect(&h.url());
    send(&mut ws, 1, ClientBody::Hello);
    let sent: Vec<f64> = (0..20).map(|i| 0.05 + 0.02 * i as f64).collect();
    let mut seen = Vec::new();
    let period = Duration::from_millis(50);
    let start = Instant::now();
    for (i, &steer) in sent.iter().enumerate() {
        send(&mut ws, 2 + i as u64, ClientBody::Control { steering: steer, throttle: 0.0 });
        while start.elapsed() < period * (i as u32 + 1) {
            drain(&mut ws, &mut seen);
        }
    }
    thread::sleep(Duration::from_millis(100));
    send(&mut ws, 100, ClientBody::Stop);
    wait_for(&mut ws, &mut seen, Duration::from_secs(5), |m| matches!(m.body, ServerBody::EpisodeEnd { .. }));
    ws.close(None).ok();
    let session = h.stop().unwrap();

    let trace = &session.episodes()[0].trace;
    let mut applied: Vec<f64> = Vec::new();
    for log in trace {
        let s = log.action.steering;
        if s != 0.0 && applied.last() != Some(&s) {
            applied.push(s);
        }
    }
    assert_eq!(applied, sent, "every control must be applied for at least one tick, in order");
}

#[test]
fn disconnect_zeroes_the_teleop_control() {
    let h = server();
    let mut ws = connect(&h.url());
    send(&mut ws, 1, ClientBody::Hello);
    send(&mut ws, 2, ClientBody::Control { steering: 0.0, throttle: 0.8 });
    let mut seen = Vec::new();
    wait_for(&mut ws, &mut seen, Duration::from_secs(5), |m| matches!(&m.body, ServerBody::State { state, .. } if state.speed > 0.35));
    ws.close(None).ok();
    drop(ws);
    thread::sleep(Duration::from_millis(300));
    let session = h.stop().unwrap();
    let (held, seq) = session.held_control();
    assert_eq!((held.steering, held.throttle, seq), (0.0, 0.0, None));
}

#[test]
fn zero_hold_coasts_to_rest() {
    let mut cfg = SessionConfig::new(SessionMode::Teleop, "builtin:S010");
    cfg.camera = CameraSpec { width: 16, height: 8, ..Default::default() };
    cfg.frame_every = 1000;
    let mut s = SimSession::new(cfg).unwrap();
    s.handle(ClientMessage { seq: 1, body: ClientBody::Hello });
    s.handle(ClientMessage { seq: 2, body: ClientBody::Control { steering: 0.0, throttle: 0.0 } });
    let mut last = s.state().speed;
    assert!(last > 0.0);
    for _ in 0..1500 {
        s.step();
        let v = s.state().speed;
        assert!(v <= last);
        last = v;
    }
    assert!(last < 1e-4, "still moving at {last}");
    assert!(s.running());
}

#[test]
fn scripted_left_route_records_and_replays() {
    let h = server();
    let mut ws = connect(&h.url());
    send(&mut ws, 1, ClientBody::Hello);
    send(&mut ws, 2, ClientBody::MarkRoute { class: Instruction::Left });
    let scenario = load_scenario("builtin:S010").unwrap();
    let mut expert = ScriptedExpert::default();
    expert.config.cruise_speed = 1.2;
    expert.begin_route(Instruction::Left);
    let mut seq = 3;
    let mut seen = Vec::new();
    let start = Instant::now();
    let mut next_send = Duration::ZERO;
    loop {
        assert!(start.elapsed() < Duration::from_secs(30), "route did not finish");
        drain(&mut ws, &mut seen);
        if let Some(end) = seen.iter().find_map(|m| match &m.body {
            ServerBody::EpisodeEnd { summary } => Some(summary.clone()),
            _ => None,
        }) {
            assert_eq!(end.termination, Some(Termination::Goal));
            assert_eq!(end.routes_recorded, 1);
            break;
        }
        if start.elapsed() >= next_send {
            let latest = seen.iter().rev().find_map(|m| match &m.body {
                ServerBody::State { state, t, .. } => Some((*state, *t)),
                _ => None,
            });
            if let Some((state, t)) = latest {
                let a = expert.control(&state, &scenario, t);
                send(&mut ws, seq, ClientBody::Control { steering: a.steering, throttle: a.throttle });
                seq += 1;
            }
            next_send += Duration::from_millis(50);
        }
    }
    ws.close(None).ok();
    let session = h.stop().unwrap();
    let data = session.dataset();
    assert_eq!(data.routes.len(), 1);
    assert!(!data.samples.is_empty());
    assert!(data.samples.iter().all(|s| s.y_c == Instruction::Left));
    let ep = &session.episodes()[0];
    assert_eq!(ep.class, Some(Instruction::Left));
    assert_eq!(replay(&ep.trace, Some(&ep.final_state), DT).unwrap(), Verdict::Match);
    let min_y = ep.trace.iter().filter(|l| (l.state.pose.x - 2.5).abs() < 0.2).map(|l| l.state.pose.y).fold(f64::INFINITY, f64::min);
    assert!(min_y < 0.0, "passed on the wrong side");
}
