//! The session protocol over a real socket, with a hand-rolled HTTP client.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{mpsc, Arc};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use editroll::midi::{midi_to_roll, QuantizeConfig};
use editroll::nn::{ScorerModel, UNetConfig};
use editroll::sampler::{parse_transcript, replay_transcript};
use editroll::service::{router, SessionService};
use editroll::PianoRoll;

const T: usize = 16;
const P: usize = 12;

fn start_server() -> SocketAddr {
    let cfg = UNetConfig {
        depth: 2,
        base_filters: 4,
        kernel: 3,
        dropout_rate: 0.0,
        time_steps: T,
        pitch_count: P,
        pitch_offset: 60,
    };
    let model = ScorerModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let service = Arc::new(SessionService::new(Arc::new(model)));
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(service)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

struct Reply {
    status: u16,
    headers: HashMap<String, String>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

fn request(addr: SocketAddr, method: &str, path: &str, body: &str) -> Reply {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .expect("header terminator");
    let head = String::from_utf8(raw[..split].to_vec()).unwrap();
    let mut lines = head.split("\r\n");
    let status = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
        .collect();
    Reply {
        status,
        headers,
        body: raw[split + 4..].to_vec(),
    }
}

fn create(addr: SocketAddr, extra: Value) -> String {
    let mut body = json!({"time_steps": T, "pitch_count": P, "pitch_offset": 60});
    body.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let r = request(addr, "POST", "/sessions", &body.to_string());
    assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
    r.json()["id"].as_str().unwrap().to_string()
}

fn roll_of(v: &Value) -> PianoRoll {
    serde_json::from_value(v.clone()).unwrap()
}

fn toggle(grid: &mut PianoRoll, t: &Value, p: &Value) {
    let (t, p) = (t.as_u64().unwrap() as usize, p.as_u64().unwrap() as usize);
    grid.set(t, p, !grid.get(t, p));
}

#[test]
fn client_mirror_matches_server_roll() {
    let addr = start_server();
    let health = request(addr, "GET", "/health", "");
    assert_eq!(health.status, 200);
    assert_eq!(health.headers["access-control-allow-origin"], "*");

    let id = create(addr, json!({"notes": [[0, 0], [4, 4]], "sampler_config": {"seed": 3}}));
    let base = format!("/sessions/{id}");
    // the client keeps its own grid and applies every event it is told about
    let mut grid = PianoRoll::from_notes(T, P, 60, [(0, 0), (4, 4)]).unwrap();

    let r = request(addr, "POST", &format!("{base}/edit"), r#"{"t":2,"p":7}"#);
    assert_eq!(r.status, 200);
    grid.set(2, 7, true);
    for _ in 0..3 {
        let r = request(addr, "POST", &format!("{base}/step"), r#"{"count":4}"#);
        let v = r.json();
        for e in v["events"].as_array().unwrap() {
            toggle(&mut grid, &e["t"], &e["p"]);
        }
        assert_eq!(r.headers["x-revision"], v["revision"].to_string());
    }
    for path in ["undo", "undo", "redo"] {
        let v = request(addr, "POST", &format!("{base}/{path}"), "").json();
        toggle(&mut grid, &v["event"]["t"], &v["event"]["p"]);
    }

    let r = request(addr, "GET", &format!("{base}/roll"), "");
    assert_eq!(r.headers["x-revision"], (1 + 12 + 3).to_string());
    let server = roll_of(&r.json());
    assert_eq!(server, grid);
    // a fresh client resynchronizes from the roll alone
    assert_eq!(
        PianoRoll::from_json(std::str::from_utf8(&r.body).unwrap()).unwrap(),
        grid
    );

    let r = request(addr, "GET", &format!("{base}/transcript"), "");
    let records = parse_transcript(std::str::from_utf8(&r.body).unwrap()).unwrap();
    let initial = PianoRoll::from_notes(T, P, 60, [(0, 0), (4, 4)]).unwrap();
    assert_eq!(replay_transcript(&initial, &records).unwrap(), grid);

    let r = request(addr, "GET", &format!("{base}/export.mid"), "");
    assert_eq!(r.headers["content-type"], "audio/midi");
    let cfg = QuantizeConfig {
        pitch_offset: 60,
        pitch_count: P,
        bars_per_sample: 1,
        ..QuantizeConfig::default()
    };
    assert_eq!(midi_to_roll(&r.body, &cfg).unwrap().roll, grid);

    assert_eq!(request(addr, "DELETE", &base, "").status, 200);
    assert_eq!(request(addr, "GET", &format!("{base}/roll"), "").status, 404);
}

#[test]
fn equal_seeds_give_equal_transcripts_under_concurrency() {
    let addr = start_server();
    let transcripts: Vec<Vec<u8>> = (0..6)
        .map(|_| {
            thread::spawn(move || {
                let id = create(addr, json!({"sampler_config": {"seed": 42, "temperature": 1.5}}));
                for _ in 0..5 {
                    let r = request(addr, "POST", &format!("/sessions/{id}/step"), r#"{"count":10}"#);
                    assert_eq!(r.status, 200);
                }
                request(addr, "GET", &format!("/sessions/{id}/transcript"), "").body
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    assert_eq!(std::str::from_utf8(&transcripts[0]).unwrap().lines().count(), 50);
    assert!(transcripts.iter().all(|t| *t == transcripts[0]));
}

#[test]
fn errors_map_to_status_codes() {
    let addr = start_server();
    let id = create(addr, json!({}));
    let base = format!("/sessions/{id}");
    let cases = [
        ("POST", format!("{base}/undo"), "", 409, "stack_empty"),
        ("POST", format!("{base}/redo"), "", 409, "stack_empty"),
        ("POST", format!("{base}/edit"), r#"{"t":99,"p":0}"#, 422, "bounds"),
        ("POST", format!("{base}/edit"), "{", 400, "bad_request"),
        ("POST", format!("{base}/step"), r#"{"count":0}"#, 400, "config"),
        ("GET", "/sessions/nope/roll".to_string(), "", 404, "not_found"),
        ("GET", "/elsewhere".to_string(), "", 404, "not_found"),
        ("PUT", format!("{base}/roll"), "", 405, "method_not_allowed"),
    ];
    for (method, path, body, status, code) in cases {
        let r = request(addr, method, &path, body);
        assert_eq!(r.status, status, "{method} {path}");
        assert_eq!(r.json()["error"]["code"], code, "{method} {path}");
    }
    let wrong_shape = json!({"time_steps": T + 1, "pitch_count": P, "pitch_offset": 60}).to_string();
    assert_eq!(request(addr, "POST", "/sessions", &wrong_shape).status, 422);
}
