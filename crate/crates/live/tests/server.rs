use futures::{SinkExt, StreamExt};
use redlight_live::protocol::{ClientMessage, Command, Event, Frame, Health, ServerMessage, PROTOCOL_VERSION};
use redlight_live::{serve, AppState};
use std::net::SocketAddr;
use std::time::Duration;
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start() -> (SocketAddr, AppState) {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::default();
    tokio::spawn(serve(listener, state.clone()));
    (addr, state)
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn send(ws: &mut Ws, cmd: Command) {
    let text = serde_json::to_string(&ClientMessage::new(cmd)).unwrap();
    ws.send(Message::Text(text.into())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    loop {
        let msg = timeout(Duration::from_secs(10), ws.next()).await.expect("timed out").unwrap().unwrap();
        if let Message::Text(text) = msg {
            let parsed: ServerMessage = serde_json::from_str(text.as_str()).unwrap();
            assert_eq!(parsed.v, PROTOCOL_VERSION);
            return parsed;
        }
    }
}

async fn frame(ws: &mut Ws) -> Frame {
    match recv(ws).await.event {
        Event::Frame(f) => f,
        other => panic!("expected a frame, got {other:?}"),
    }
}

async fn health(addr: SocketAddr) -> serde_json::Value {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    serde_json::from_str(body.split("\r\n\r\n").nth(1).unwrap()).unwrap()
}

fn open(scenario: &str) -> Command {
    Command::Open { scenario: scenario.into(), seed: 3, pace: 4.0 }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_streams_ordered_frames_and_obeys_commands() {
    let (addr, state) = start().await;
    assert_eq!(health(addr).await["sessions"], 0);
    let mut ws = connect(addr).await;
    send(&mut ws, open("solo-red")).await;
    let first = frame(&mut ws).await;
    assert_eq!((first.seq, first.t_s), (0, 0.0));
    assert_eq!(state.session_count(), 1);
    assert_eq!(health(addr).await, serde_json::json!({"status": "ok", "sessions": 1}));

    let mut frames = vec![first];
    for _ in 0..5 {
        frames.push(frame(&mut ws).await);
    }
    send(&mut ws, Command::Pedal { throttle: 0.0, brake: 1.0 }).await;
    send(&mut ws, Command::Pause).await;
    let paused = loop {
        let f = frame(&mut ws).await;
        frames.push(f.clone());
        if f.paused {
            break f;
        }
    };
    assert_eq!(paused.pedal.brake, 1.0);
    assert!(timeout(Duration::from_millis(300), ws.next()).await.is_err(), "frames while paused");
    send(&mut ws, Command::Resume).await;
    for _ in 0..4 {
        frames.push(frame(&mut ws).await);
    }
    let last = frames.last().unwrap();
    assert!(!last.paused && last.t_s > paused.t_s);
    assert!((last.vehicles.iter().find(|v| v.ego).unwrap().a_mps2 + 4.5).abs() < 1e-9);
    for w in frames.windows(2) {
        assert_eq!(w[1].seq, w[0].seq + 1);
        assert!(w[1].t_s >= w[0].t_s);
    }

    send(&mut ws, Command::Reset).await;
    let reset = loop {
        let f = frame(&mut ws).await;
        if f.episode == 1 {
            break f;
        }
    };
    assert_eq!(reset.t_s, 0.0);

    send(&mut ws, Command::Close).await;
    loop {
        if recv(&mut ws).await.event == Event::Closed {
            break;
        }
    }
    timeout(Duration::from_secs(5), async {
        while state.session_count() != 0 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    })
    .await
    .unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_get_error_frames() {
    let (addr, state) = start().await;
    let mut ws = connect(addr).await;
    send(&mut ws, open("no-such-place")).await;
    assert!(matches!(recv(&mut ws).await.event, Event::Error { message } if message.contains("no-such-place")));
    assert_eq!(state.session_count(), 0);

    send(&mut ws, Command::Pause).await;
    assert!(matches!(recv(&mut ws).await.event, Event::Error { .. }));

    ws.send(Message::Text(r#"{"v":2,"type":"pause"}"#.into())).await.unwrap();
    assert!(matches!(recv(&mut ws).await.event, Event::Error { message } if message.contains("version")));
    ws.send(Message::Text("not json".into())).await.unwrap();
    assert!(matches!(recv(&mut ws).await.event, Event::Error { .. }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_are_isolated_and_counted() {
    let (addr, state) = start().await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    send(&mut a, open("solo-red")).await;
    send(&mut b, open("platoon-queue")).await;
    let fa = frame(&mut a).await;
    let fb = frame(&mut b).await;
    assert_eq!((fa.scenario.as_str(), fb.scenario.as_str()), ("solo-red", "platoon-queue"));
    assert_eq!(health(addr).await["sessions"], 2);
    send(&mut a, Command::Pause).await;
    let before = loop {
        let f = frame(&mut b).await;
        if f.seq >= 5 {
            break f;
        }
    };
    assert!(!before.paused);
    drop(a);
    timeout(Duration::from_secs(5), async {
        while state.session_count() != 1 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    })
    .await
    .unwrap();
    assert!(frame(&mut b).await.seq > before.seq);
}

#[test]
fn wire_format() {
    let cmd: ClientMessage = serde_json::from_str(r#"{"v":1,"type":"open","scenario":"solo-red"}"#).unwrap();
    assert_eq!(cmd.command, Command::Open { scenario: "solo-red".into(), seed: 0, pace: 1.0 });
    let pedal = serde_json::to_value(ClientMessage::new(Command::Pedal { throttle: 0.25, brake: 0.0 })).unwrap();
    assert_eq!(pedal, serde_json::json!({"v": 1, "type": "pedal", "throttle": 0.25, "brake": 0.0}));
    let err = serde_json::to_value(ServerMessage::error("x")).unwrap();
    assert_eq!(err, serde_json::json!({"v": 1, "type": "error", "message": "x"}));
    let h = serde_json::to_value(Health { status: "ok", sessions: 3 }).unwrap();
    assert_eq!(h, serde_json::json!({"status": "ok", "sessions": 3}));
}

#[test]
fn documented_example_frame_is_exact() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol.md")).unwrap();
    let line = doc.lines().find(|l| l.starts_with("< {\"v\":1,\"type\":\"frame\"")).unwrap();
    let mut s = redlight_live::Session::open("solo-red", 3, 1.0).unwrap();
    let msg = ServerMessage::new(Event::Frame(s.frame()));
    assert_eq!(serde_json::to_string(&msg).unwrap(), &line[2..]);
}
