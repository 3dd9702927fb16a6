use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use spm_cli::review::{export_reviewed, MaskUpdate, ReviewStatus, MANIFEST_NAME};
use spm_cli::{router, ReviewError, ReviewService, ReviewStore};
use spm_core::io::{load_mask, save_frame};
use spm_core::manifest::read_manifest;
use spm_core::mask::MaskRle;
use spm_core::sim::{generate_pairs_from_frames, synthetic_surface, DatasetConfig, MaskCount, SurfaceKind};
use spm_core::{Channel, MaskImage, ScanFrame};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};
use tower::ServiceExt;

/// Two 32x32 frames with two masks each.
fn dataset(dir: &Path) {
    let frames: Vec<_> = (0..2)
        .map(|i| (format!("f{i}"), synthetic_surface(32, 32, SurfaceKind::Grains, 7 + i).unwrap()))
        .collect();
    let cfg = DatasetConfig {
        masks_per_frame: MaskCount::Fixed(2),
        seed: 3,
        ..Default::default()
    };
    generate_pairs_from_frames(&frames, dir, &cfg).unwrap();
}

fn app(dir: &Path) -> Router {
    router(ReviewService::new(ReviewStore::open(dir).unwrap()), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn empty_dataset_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (s, v) = call_json(&app(dir.path()), "GET", "/api/frames", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn frames_masks_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let (s, v) = call_json(&app, "GET", "/api/frames", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        v[0],
        json!({"id": "f0", "channel": "height", "scan_size_um": 2.0, "mask_count": 2, "statuses": ["pending", "pending"]})
    );
    assert_eq!(v.as_array().unwrap().len(), 2);

    let (s, v) = call_json(&app, "GET", "/api/frames/f1/masks/1", None).await;
    assert_eq!(s, StatusCode::OK);
    let disk = load_mask(dir.path().join("mask/f1_01.pgm")).unwrap();
    assert_eq!(v["revision"], 0);
    assert_eq!(v["status"], "pending");
    assert_eq!(serde_json::from_value::<MaskRle>(v["rle"].clone()).unwrap(), MaskRle::encode(&disk));

    let (s, png) = call(&app, "GET", "/api/frames/f0/image.png", None).await;
    assert_eq!(s, StatusCode::OK);
    let mut r = png::Decoder::new(std::io::Cursor::new(png)).read_info().unwrap();
    let mut buf = vec![0; r.output_buffer_size()];
    let info = r.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height, info.color_type), (32, 32, png::ColorType::Grayscale));
    let (s, _) = call(&app, "GET", "/api/frames/f0/image.png?mask=1", None).await;
    assert_eq!(s, StatusCode::OK);

    assert_eq!(call(&app, "GET", "/api/frames/nope/masks/0", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/frames/f0/masks/9", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn five_pixel_edit_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let before = load_mask(dir.path().join("mask/f0_00.pgm")).unwrap();
    let mut edited = before.clone();
    for x in 0..5 {
        edited.set(x, 31, !edited.get(x, 31));
    }
    let rle = MaskRle::encode(&edited);
    let (s, v) = call_json(&app, "PUT", "/api/frames/f0/masks/0", Some(json!({"revision": 0, "rle": rle}))).await;
    assert_eq!((s, v), (StatusCode::OK, json!({"revision": 1})));

    let (_, v) = call_json(&app, "GET", "/api/frames/f0/masks/0", None).await;
    assert_eq!(v["revision"], 1);
    assert_eq!(v["status"], "edited");
    assert_eq!(serde_json::from_value::<MaskRle>(v["rle"].clone()).unwrap(), rle);
    let after = load_mask(dir.path().join("mask/f0_00.pgm")).unwrap();
    let diff = before.bits().iter().zip(after.bits()).filter(|(a, b)| a != b).count();
    assert_eq!(diff, 5);
    assert!(dir.path().join("mask/f0_00.review.json").exists());
}

#[tokio::test]
async fn stale_revision_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let uri = "/api/frames/f0/masks/1";
    let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 0, "status": "accepted"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call_json(&app, "PUT", uri, Some(json!({"revision": 0, "status": "rejected"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["revision"], 1);
    let (_, v) = call_json(&app, "GET", uri, None).await;
    assert_eq!(v["status"], "accepted");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_writes_one_wins() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    for round in 0..10u64 {
        let uri = "/api/frames/f1/masks/0";
        let body = |note: &str| Some(json!({"revision": round, "note": note}));
        let (a, b) = tokio::join!(call_json(&app, "PUT", uri, body("a")), call_json(&app, "PUT", uri, body("b")));
        let mut codes = [a.0, b.0];
        codes.sort();
        assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT], "round {round}");
        let loser = if a.0 == StatusCode::CONFLICT { &a.1 } else { &b.1 };
        assert_eq!(loser["revision"], round + 1);
        let winner = if a.0 == StatusCode::OK { "a" } else { "b" };
        let (_, v) = call_json(&app, "GET", uri, None).await;
        assert_eq!(v["note"], winner);
    }
}

#[tokio::test]
async fn invalid_updates_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let uri = "/api/frames/f0/masks/0";
    let overlapping = json!({"width": 32, "height": 32, "runs": [[0, 4], [2, 3]]});
    let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 0, "rle": overlapping}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let wrong_dims = json!({"width": 16, "height": 16, "runs": [[0, 4]]});
    let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 0, "rle": wrong_dims}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 0, "status": "rejected"}))).await;
    assert_eq!(s, StatusCode::OK);
    for back in ["accepted", "edited", "pending"] {
        let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 1, "status": back}))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{back}");
    }
    let (_, v) = call_json(&app, "GET", uri, None).await;
    assert_eq!((v["revision"].as_u64(), v["status"].as_str()), (Some(1), Some("rejected")));
}

#[tokio::test]
async fn accepted_and_edited_may_swap() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let uri = "/api/frames/f1/masks/1";
    for (rev, status) in [(0, "accepted"), (1, "edited"), (2, "accepted")] {
        let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": rev, "status": status}))).await;
        assert_eq!(s, StatusCode::OK, "{status}");
    }
    let (s, _) = call(&app, "PUT", uri, Some(json!({"revision": 3, "status": "pending"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn physics_check_flags_flat_regions() {
    let dir = tempfile::tempdir().unwrap();
    // left half flat, right half a steep ramp; 10 nm full scale
    let frame = ScanFrame::from_fn(32, 32, Channel::Height, |x, _| if x < 16 { 0.5 } else { 0.5 + 0.02 * (x - 15) as f32 })
        .unwrap()
        .with_metadata(Channel::Height, 1.0, 10.0)
        .unwrap();
    save_frame(&frame, dir.path().join("slab.spmf")).unwrap();
    let frames = vec![("slab".to_string(), frame)];
    let cfg = DatasetConfig {
        masks_per_frame: MaskCount::Fixed(1),
        ..Default::default()
    };
    generate_pairs_from_frames(&frames, dir.path(), &cfg).unwrap();
    let app = app(dir.path());
    let uri = "/api/frames/slab/masks/0";
    let flat = MaskImage::from_fn(32, 32, |x, y| (4..8).contains(&x) && (10..14).contains(&y));
    call(&app, "PUT", uri, Some(json!({"revision": 0, "rle": MaskRle::encode(&flat)}))).await;
    let (s, v) = call_json(&app, "POST", &format!("{uri}/physics-check"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"delta_h_nm": 0.0, "verdict": "discard"}));

    let edge = MaskImage::from_fn(32, 32, |x, y| (14..20).contains(&x) && (10..14).contains(&y));
    call(&app, "PUT", uri, Some(json!({"revision": 1, "rle": MaskRle::encode(&edge)}))).await;
    let (_, v) = call_json(&app, "POST", &format!("{uri}/physics-check"), None).await;
    assert_eq!(v["verdict"], "accept");
    // x from 12 to 21 after the 2-pixel ring: 6 ramp steps of 0.02 × 10 nm
    assert!((v["delta_h_nm"].as_f64().unwrap() - 1.2).abs() < 1e-5, "{v}");
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    {
        let app = app(dir.path());
        call(&app, "PUT", "/api/frames/f0/masks/0", Some(json!({"revision": 0, "status": "accepted"}))).await;
        call(&app, "PUT", "/api/frames/f0/masks/1", Some(json!({"revision": 0, "status": "rejected", "note": "tip ghost"}))).await;
    }
    let app = app(dir.path());
    let (_, v) = call_json(&app, "GET", "/api/frames", None).await;
    assert_eq!(v[0]["statuses"], json!(["accepted", "rejected"]));
    assert_eq!(v[1]["statuses"], json!(["pending", "pending"]));
    let (_, v) = call_json(&app, "GET", "/api/frames/f0/masks/1", None).await;
    assert_eq!((v["revision"].as_u64(), v["note"].as_str()), (Some(1), Some("tip ghost")));
}

#[tokio::test]
async fn lock_and_port_errors() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let any = "127.0.0.1:0".parse().unwrap();
    let (listener, _app) = spm_cli::bind_review(dir.path(), any, None).await.unwrap();
    assert!(matches!(
        spm_cli::bind_review(dir.path(), any, None).await,
        Err(ReviewError::DatasetLocked(_))
    ));
    let other = tempfile::tempdir().unwrap();
    let taken = listener.local_addr().unwrap();
    assert!(matches!(
        spm_cli::bind_review(other.path(), taken, None).await,
        Err(ReviewError::PortInUse(p)) if p == taken.port()
    ));
}

#[test]
fn rejected_masks_never_exported() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let store = ReviewStore::open(dir.path()).unwrap();
    let reject = |id: &str, k: usize| {
        let update = MaskUpdate {
            revision: 0,
            status: Some(ReviewStatus::Rejected),
            rle: None,
            note: None,
        };
        store.put_mask(id, k, &update).unwrap();
    };
    reject("f0", 1);
    reject("f1", 0);
    drop(store);

    let same = dir.path().join("reviewed.jsonl");
    assert_eq!(export_reviewed(dir.path(), &same).unwrap(), (2, 2));
    let kept: Vec<String> = read_manifest(&same, true).unwrap().into_iter().map(|e| e.id).collect();
    assert_eq!(kept, ["f0_00", "f1_01"]);

    let elsewhere = tempfile::tempdir().unwrap();
    let out = elsewhere.path().join("m.jsonl");
    export_reviewed(dir.path(), &out).unwrap();
    let entries = read_manifest(&out, true).unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert!(spm_core::manifest::resolve(&out, &e.mask_path).exists());
    }
    assert_eq!(read_manifest(dir.path().join(MANIFEST_NAME), true).unwrap().len(), 4);
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let code = resp[9..12].parse().unwrap();
    let body = resp.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (code, body)
}

#[test]
fn acknowledged_write_survives_kill() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_spm"))
        .args(["serve-review", "--port", "0", "--data-dir"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (code, body) = http(&addr, "PUT", "/api/frames/f1/masks/1", r#"{"revision":0,"status":"rejected"}"#);
    assert_eq!((code, body.as_str()), (200, r#"{"revision":1}"#));
    child.kill().unwrap();
    child.wait().unwrap();

    let store = ReviewStore::open(dir.path()).unwrap();
    let st = store.state("f1", 1).unwrap();
    assert_eq!((st.status, st.revision), (ReviewStatus::Rejected, 1));
}
