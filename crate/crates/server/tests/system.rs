//! A real cart process talking to a real server over TLS: ingest, health,
//! remote control, live preview and the rest of the HTTP API.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use icu_core::{CartKey, Clock, ManualClock, Modality, PseudonymKey, SystemClock};
use icu_edge::{CartConfig, SensorSimConfig};
use icu_server::config::{BrokerLink, ControlListen};
use icu_server::{BrokerMode, ServerConfig};
use serde_json::{json, Value};

fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: test\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

/// Reads SSE events (name, data) until `stop` says enough or the stream ends.
fn sse(addr: SocketAddr, path: &str, mut stop: impl FnMut(&str, &Value) -> bool) -> Vec<(String, Value)> {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: test\r\nAccept: text/event-stream\r\n\r\n").unwrap();
    let mut r = BufReader::new(s);
    let mut out = Vec::new();
    let mut name = String::new();
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).unwrap_or(0) == 0 {
            return out;
        }
        let l = line.trim_end();
        if let Some(n) = l.strip_prefix("event: ").or_else(|| l.strip_prefix("event:")) {
            name = n.trim().to_owned();
        } else if let Some(d) = l.strip_prefix("data: ").or_else(|| l.strip_prefix("data:")) {
            let v: Value = serde_json::from_str(d.trim()).unwrap();
            let done = stop(&name, &v);
            out.push((std::mem::take(&mut name), v));
            if done {
                return out;
            }
        }
    }
}

fn wait_for(what: &str, limit: Duration, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + limit;
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn setup(root: &Path) -> (ServerConfig, CartKey, String) {
    let pki = root.join("pki");
    icu_transport::tls::generate(&pki, &["c1", "broker", "server"]).unwrap();
    let pkey = PseudonymKey::new(vec![0x42; 32]).unwrap();
    std::fs::write(root.join("pseudonym.key"), pkey.to_hex()).unwrap();
    let key = CartKey::new("c1", [5u8; 32]);
    std::fs::write(root.join("carts.keys"), key.to_line() + "\n").unwrap();
    std::fs::write(
        root.join("feed.jsonl"),
        json!({"type": "session", "patient_id": "MRN-55-ZULU", "room_id": "r1", "cart_id": "c1",
               "admission_ts": 0, "discharge_ts": 4_000_000_000_000i64})
        .to_string(),
    )
    .unwrap();
    let cfg = ServerConfig {
        data_dir: root.join("data"),
        pseudonym_key_file: root.join("pseudonym.key"),
        keyring_file: root.join("carts.keys"),
        feed_file: root.join("feed.jsonl"),
        annotations_dir: root.join("annotations"),
        metrics_dir: root.join("metrics"),
        http_bind: "127.0.0.1:0".parse().unwrap(),
        carts: vec!["c1".into(), "c2".into()],
        sync: false,
        feed_reload_ms: 200,
        broker: BrokerLink {
            mode: BrokerMode::Embedded,
            addr: "127.0.0.1:0".parse().unwrap(),
            credentials_dir: pki.clone(),
            identity: "server".into(),
            broker_identity: "broker".into(),
            state_dir: Some(root.join("broker")),
            prefetch: 32,
        },
        control: Some(ControlListen {
            bind: "127.0.0.1:0".parse().unwrap(),
            credentials_dir: pki,
            identity: "server".into(),
        }),
    };
    (cfg, key, pkey.study_id("MRN-55-ZULU"))
}

fn cart_config(root: &Path, key: &CartKey, broker: SocketAddr, control: SocketAddr) -> CartConfig {
    std::fs::write(root.join("c1.key"), key.to_line()).unwrap();
    let mut rgb = SensorSimConfig::new(Modality::RgbFrame, "rgb0", 1);
    rgb.rate_hz = Some(4.0);
    let link = |addr, server_identity: &str| icu_edge::LinkConfig {
        addr,
        server_identity: server_identity.into(),
        credentials_dir: Some(root.join("pki")),
    };
    CartConfig {
        cart_id: "c1".into(),
        room_id: "r1".into(),
        state_dir: root.join("cart"),
        key_file: root.join("c1.key"),
        codec: "deflate".into(),
        autostart: true,
        seed: 3,
        broker: Some(link(broker, "broker")),
        control: Some(link(control, "server")),
        sensors: vec![rgb, SensorSimConfig::new(Modality::Noise, "noise0", 2)],
    }
}

#[test]
fn cart_to_server_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (cfg, key, study) = setup(root);
    let clock = ManualClock::new(SystemClock.now_ms());
    let server = icu_server::start(&cfg, Arc::new(clock.clone())).unwrap();
    let http_addr = server.http_addr;

    // both carts are known and offline before anything connects
    let (st, carts) = http(http_addr, "GET", "/carts", None);
    assert_eq!(st, 200);
    assert_eq!(carts.as_array().unwrap().len(), 2);
    assert!(carts.as_array().unwrap().iter().all(|c| c["state"] == "offline"));
    let (st, _) = http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Pause"})));
    assert_eq!(st, 409, "control of an offline cart must fail");
    let (st, _) = http(http_addr, "GET", "/carts/zz/health", None);
    assert_eq!(st, 404);

    let cart_cfg = cart_config(root, &key, server.broker_addr.unwrap(), server.control_addr.unwrap());
    let stop = Arc::new(AtomicBool::new(false));
    let cart = {
        let stop = stop.clone();
        std::thread::spawn(move || icu_edge::runner::run(cart_cfg, stop).unwrap())
    };

    wait_for("records stored", Duration::from_secs(30), || server.ingestor.store().len() >= 10);
    wait_for("control link", Duration::from_secs(10), || server.control.is_attached("c1"));
    clock.set(SystemClock.now_ms());
    let (st, h) = http(http_addr, "GET", "/carts/c1/health", None);
    assert_eq!(st, 200);
    assert_eq!(h["state"], "live", "{h}");
    assert_eq!(h["room_id"], "r1");
    assert_eq!(h["sensors"].as_array().unwrap().len(), 2);

    // live preview frames are at least a second of capture time apart
    let frames = sse(http_addr, "/carts/c1/preview", {
        let mut n = 0;
        move |name, _| {
            n += (name == "frame") as u32;
            n >= 2
        }
    });
    let ts: Vec<i64> = frames.iter().map(|(_, v)| v["capture_ts"].as_i64().unwrap()).collect();
    assert!(ts[1] - ts[0] >= 1_000, "{ts:?}");
    assert_eq!(frames[0].1["width"], 96);

    // remote control round trip
    let t = Instant::now();
    let (st, r) = http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Pause"})));
    assert_eq!(st, 200, "{r}");
    assert_eq!(r["state"]["recording"], "Paused");
    assert!(t.elapsed() < Duration::from_secs(2));
    let (_, r) = http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Pan", "delta": 30.0})));
    assert_eq!(r["state"]["pan_deg"], 30.0);
    let (_, r) = http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Pan", "delta": 400.0})));
    assert_eq!(r["state"]["pan_deg"], 180.0, "pan clamps at its bound");
    let (_, h) = http(http_addr, "GET", "/carts/c1/health", None);
    assert_eq!(h["cart_state"]["recording"], "Paused");
    let (st, _) = http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Jump"})));
    assert!(st >= 400 && st < 500);

    // patient metrics come from the metrics directory
    let (st, m) = http(http_addr, "GET", &format!("/patients/{study}/metrics"), None);
    assert_eq!((st, m), (200, json!([])));
    std::fs::write(
        cfg.metrics_dir.join(format!("{study}.jsonl")),
        "{\"metric\":\"noise\",\"ts\":1,\"value\":2.0}\n{\"metric\":\"light\",\"ts\":1,\"value\":3.0}\n",
    )
    .unwrap();
    let (_, m) = http(http_addr, "GET", &format!("/patients/{study}/metrics?metric=light"), None);
    assert_eq!(m, json!([{"metric": "light", "ts": 1, "value": 3.0}]));
    let (st, _) = http(http_addr, "GET", "/patients/..%2F..%2Fetc/metrics", None);
    assert_eq!(st, 400);

    // annotations: submit, then see them in the weekly summary and the queue
    for (who, labels) in [("ann1", json!(["AU4"])), ("ann2", json!(["AU4", "smile"]))] {
        let a = json!({"annotator_id": who, "item_id": "img-1", "labels": labels,
                       "started_ts": 1_000, "submitted_ts": 31_000});
        let (st, _) = http(http_addr, "POST", "/annotations/face", Some(&a));
        assert_eq!(st, 201);
    }
    let bad = json!({"annotator_id": "ann1", "item_id": "img-1", "labels": [], "started_ts": 9, "submitted_ts": 1});
    assert_eq!(http(http_addr, "POST", "/annotations/face", Some(&bad)).0, 400);
    let (_, w) = http(http_addr, "GET", "/annotations/summary?week_start=0", None);
    assert_eq!(w["annotators"]["ann1"]["count"], 1);
    assert_eq!(w["annotators"]["ann2"]["count"], 1);
    let (_, q) = http(http_addr, "GET", "/annotations/face/queue", None);
    assert_eq!(q[0]["item_id"], "img-1");
    let p = q[0]["priority"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let b = json!({"annotator_id": "ann1", "item_id": "d-1",
                   "boxes": [{"label": "standing", "bbox": {"x": 3.0, "y": 4.0, "w": 10.0, "h": 12.0}}],
                   "started_ts": 0, "submitted_ts": 5});
    let (st, echoed) = http(http_addr, "POST", "/annotations/depth", Some(&b));
    assert_eq!(st, 201, "{echoed}");
    assert_eq!(echoed["boxes"][0]["bbox"], b["boxes"][0]["bbox"], "boxes round-trip exactly");
    assert_eq!(http(http_addr, "GET", "/annotations/audio/queue", None).0, 404);

    // the cart goes away: a preview stream ends with an offline status, control fails
    stop.store(true, Ordering::SeqCst);
    cart.join().unwrap();
    wait_for("control link drop", Duration::from_secs(10), || !server.control.is_attached("c1"));
    clock.advance(11_000);
    let events = sse(http_addr, "/carts/c1/preview", |name, _| name == "status");
    assert_eq!(events.last().unwrap().1["state"], "offline");
    assert_eq!(http(http_addr, "GET", "/carts/c1/health", None).1["state"], "offline");
    assert_eq!(http(http_addr, "POST", "/carts/c1/control", Some(&json!({"command": "Start"}))).0, 409);

    // nothing under the data root names the patient
    let stored = server.ingestor.store().len();
    assert!(stored > 0);
    server.shutdown();
    let mut stack = vec![cfg.data_dir.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            if e.path().is_dir() {
                stack.push(e.path());
            } else {
                let bytes = std::fs::read(e.path()).unwrap();
                assert!(!String::from_utf8_lossy(&bytes).contains("MRN-55-ZULU"));
            }
        }
    }
}
