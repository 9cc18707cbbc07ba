//! Scripted protocol clients against a live server.

use std::net::SocketAddr;

use cooptraj_core::scenario::packaged;
use cooptraj_core::session::SessionConfig;
use cooptraj_service::{serve_on, ServeConfig};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let config = ServeConfig {
        addr,
        static_dir: None,
        session: SessionConfig::default(),
    };
    tokio::spawn(serve_on(listener, config));
    addr
}

struct Client {
    ws: Ws,
    seq: u64,
    session: Option<String>,
}

impl Client {
    async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Self { ws, seq: 0, session: None }
    }

    async fn send(&mut self, body: Value) {
        self.seq += 1;
        let mut m = body;
        m["seq"] = self.seq.into();
        if let Some(id) = &self.session {
            m["session"] = id.clone().into();
        }
        self.ws.send(Message::Text(m.to_string().into())).await.unwrap();
    }

    async fn recv(&mut self) -> Option<Value> {
        loop {
            match self.ws.next().await? {
                Ok(Message::Text(t)) => return Some(serde_json::from_str(t.as_str()).unwrap()),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => {}
            }
        }
    }

    async fn recv_n(&mut self, n: usize) -> Vec<Value> {
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(self.recv().await.expect("server closed early"));
        }
        out
    }

    /// hello + scenario; returns the replies (hello, echo, opening counter).
    async fn open(&mut self) -> Vec<Value> {
        self.send(json!({"type": "hello", "version": 1})).await;
        let hello = self.recv().await.unwrap();
        self.session = Some(hello["session"].as_str().unwrap().to_string());
        self.send(json!({"type": "scenario", "scenario": packaged("negotiation-demo").unwrap()}))
            .await;
        let mut out = vec![hello];
        out.extend(self.recv_n(2).await);
        out
    }
}

#[tokio::test]
async fn negotiate_agree_and_stream() {
    let addr = start().await;
    let mut c = Client::connect(addr).await;
    let opened = c.open().await;
    assert_eq!(opened[0]["type"], "hello");
    assert_eq!(opened[1]["type"], "scenario");
    let counter = &opened[2];
    assert_eq!(counter["type"], "automation_counter");

    // offering the automation's own desire agrees at once
    c.send(json!({"type": "human_offer", "theta": counter["theta"].clone()})).await;
    let agreed = c.recv().await.unwrap();
    assert_eq!(agreed["type"], "agreed");
    assert_eq!(agreed["joint"], counter["trajectory"]);

    c.send(json!({"type": "execute"})).await;
    let scenario = packaged("negotiation-demo").unwrap();
    let mut ticks = 0;
    let mut last_seq = agreed["seq"].as_u64().unwrap();
    loop {
        let m = c.recv().await.expect("stream ends with done");
        let seq = m["seq"].as_u64().unwrap();
        assert!(seq > last_seq);
        last_seq = seq;
        match m["type"].as_str().unwrap() {
            "execution_tick" => {
                if ticks == 0 {
                    assert_eq!(m["t"], 0.0);
                    assert_eq!(m["x"], json!([scenario.start.p.x, scenario.start.p.y]));
                }
                assert_eq!(m["conflict"], 0.0);
                ticks += 1;
            }
            "done" => {
                assert_eq!(m["verdict"], "agreed");
                break;
            }
            other => panic!("unexpected {other}"),
        }
    }
    let steps = (scenario.sim.duration / scenario.sim.dt_sim).round() as usize;
    assert_eq!(ticks, steps + 1);
    assert!(c.recv().await.is_none(), "server closes after done");
}

#[tokio::test]
async fn sessions_are_per_connection() {
    let addr = start().await;
    let mut a = Client::connect(addr).await;
    let mut b = Client::connect(addr).await;
    a.open().await;
    b.open().await;
    assert_ne!(a.session, b.session);

    // out-of-phase and unknown messages are rejected without closing
    a.send(json!({"type": "execute"})).await;
    let e = a.recv().await.unwrap();
    assert_eq!(e["type"], "error");
    assert_eq!(e["code"], "out_of_phase");
    a.send(json!({"type": "warp"})).await;
    let e = a.recv().await.unwrap();
    assert_eq!(e["code"], "unknown_type");
}

#[tokio::test]
async fn first_message_must_open_a_session() {
    let addr = start().await;
    let mut c = Client::connect(addr).await;
    c.send(json!({"type": "accept"})).await;
    let e = c.recv().await.unwrap();
    assert_eq!(e["code"], "no_session");
    assert!(c.recv().await.is_none());
}

#[tokio::test]
async fn resume_after_disconnect() {
    let addr = start().await;
    let mut c = Client::connect(addr).await;
    let opened = c.open().await;
    let id = c.session.clone().unwrap();
    let seen = opened.last().unwrap()["seq"].as_u64().unwrap();

    // one offer goes out, then the connection drops before the reply is read
    c.send(json!({"type": "human_offer", "theta": {"goal": [-2.0, 2.0], "duration": 2.0}})).await;
    let counter = c.recv().await.unwrap();
    c.ws.close(None).await.unwrap();
    drop(c);
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;

    let mut r = Client::connect(addr).await;
    r.seq = 10;
    r.session = Some(id.clone());
    r.send(json!({"type": "resume", "last_seq": seen})).await;
    let replay = r.recv().await.unwrap();
    assert_eq!(replay, counter);

    r.send(json!({"type": "accept"})).await;
    let agreed = r.recv().await.unwrap();
    assert_eq!(agreed["type"], "agreed");
    assert_eq!(agreed["session"], id.as_str());
}
