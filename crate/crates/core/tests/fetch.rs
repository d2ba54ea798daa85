use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use flate2::write::GzEncoder;
use flate2::Compression;
use robustshift::data::{fetch, sha256_hex, FetchEntry};
use robustshift::Error;

/// Serves `body` for every GET until the test process exits and counts the
/// requests it answered.
fn serve(body: Vec<u8>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut buf = [0u8; 4096];
            let mut req = Vec::new();
            while !req.windows(4).any(|w| w == b"\r\n\r\n") {
                match stream.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => req.extend_from_slice(&buf[..n]),
                }
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    (format!("http://{addr}"), hits)
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

#[test]
fn downloads_verifies_and_gunzips_over_http() {
    let payload: Vec<u8> = (0..=255u8).cycle().take(5000).collect();
    let body = gzip(&payload);
    let (base, hits) = serve(body.clone());
    let dir = tempfile::tempdir().unwrap();
    let entry = FetchEntry {
        name: "fixture".into(),
        url: format!("{base}/train-images-idx3-ubyte.gz"),
        sha256: sha256_hex(&body),
    };

    let out = fetch(&entry, dir.path()).unwrap();
    assert_eq!(out, dir.path().join("train-images-idx3-ubyte"));
    assert_eq!(std::fs::read(&out).unwrap(), payload);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    // Cached: same path, no second request.
    assert_eq!(fetch(&entry, dir.path()).unwrap(), out);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn checksum_mismatch_leaves_the_cache_untouched() {
    let (base, _) = serve(b"tampered bytes".to_vec());
    let dir = tempfile::tempdir().unwrap();
    let entry = FetchEntry {
        name: "labels".into(),
        url: format!("{base}/labels.bin"),
        sha256: sha256_hex(b"original bytes"),
    };
    let err = fetch(&entry, dir.path()).unwrap_err();
    match err {
        Error::Checksum { expected, actual, .. } => {
            assert_eq!(expected, sha256_hex(b"original bytes"));
            assert_eq!(actual, sha256_hex(b"tampered bytes"));
        }
        other => panic!("expected a checksum error, got {other}"),
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn corrupted_cached_copy_is_downloaded_again() {
    let (base, hits) = serve(b"label payload".to_vec());
    let dir = tempfile::tempdir().unwrap();
    let entry = FetchEntry {
        name: "labels".into(),
        url: format!("{base}/labels.bin"),
        sha256: sha256_hex(b"label payload"),
    };
    let out = fetch(&entry, dir.path()).unwrap();
    std::fs::write(&out, b"bit rot").unwrap();
    fetch(&entry, dir.path()).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), b"label payload");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_host_is_a_network_error() {
    // Bind and drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let entry = FetchEntry {
        name: "gone".into(),
        url: format!("http://127.0.0.1:{port}/x"),
        sha256: sha256_hex(b""),
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(fetch(&entry, dir.path()), Err(Error::Network { .. })));
}
