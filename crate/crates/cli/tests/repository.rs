#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;

use sciunit_cli::repository::{repository_router, RepositoryClient};
use sciunit_cli::server::BackgroundServer;
use sciunit_core::chunkstore::RollingHashParams;
use sciunit_core::container::{export_bundle_bytes, Sciunit};
use sciunit_core::{Digest, Error};

fn loopback(dir: &std::path::Path) -> BackgroundServer {
    BackgroundServer::spawn(repository_router(dir.to_path_buf()), "127.0.0.1:0".parse().unwrap()).unwrap()
}

fn fast(mut client: RepositoryClient) -> RepositoryClient {
    client.backoff = Duration::from_millis(5);
    client
}

fn tree_files(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn push_then_pull_reproduces_the_execution() {
    let run = common::audited_run("sample-pipeline", "/work/sample");
    let (_root, src, commit) = common::package(&run);
    let id = commit.manifest.execution_id;
    let store = tempfile::tempdir().unwrap();
    let server = loopback(store.path());
    let client = RepositoryClient::new(&server.url());

    let pushed = client.push(&src, std::slice::from_ref(&id)).unwrap();
    assert_eq!(pushed.executions, vec![id.clone()]);
    assert!(store.path().join(&pushed.digest).is_file());
    assert_eq!(pushed.url, format!("{}/bundles/{}", server.url(), pushed.digest));

    let dst_root = tempfile::tempdir().unwrap();
    let mut dst = Sciunit::create(dst_root.path(), "copy", RollingHashParams::default()).unwrap();
    let pulled = client.pull(&mut dst, &pushed.url).unwrap();
    assert_eq!(pulled.executions, vec![id.clone()]);
    assert_eq!(pulled.digest, pushed.digest);
    assert_eq!(dst.log_bytes(&id).unwrap(), src.log_bytes(&id).unwrap());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    src.materialize_container(&id, a.path()).unwrap();
    dst.materialize_container(&id, b.path()).unwrap();
    assert_eq!(tree_files(a.path()), tree_files(b.path()));

    let again = client.pull(&mut dst, &pushed.digest).unwrap();
    assert_eq!(again.executions, vec![id]);
    assert_eq!(dst.executions().len(), 1);
}

#[test]
fn tampered_bundles_are_rejected() {
    let run = common::audited_run("sample-pipeline", "/work/sample");
    let (_root, src, commit) = common::package(&run);
    let store = tempfile::tempdir().unwrap();
    let server = loopback(store.path());
    let client = RepositoryClient::new(&server.url());
    let pushed = client.push(&src, &[commit.manifest.execution_id]).unwrap();

    let stored = store.path().join(&pushed.digest);
    let mut bytes = fs::read(&stored).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&stored, &bytes).unwrap();

    let dst_root = tempfile::tempdir().unwrap();
    let mut dst = Sciunit::create(dst_root.path(), "copy", RollingHashParams::default()).unwrap();
    let err = client.pull(&mut dst, &pushed.digest).unwrap_err();
    assert!(matches!(err, Error::Corruption(_)), "{err}");
    assert!(dst.executions().is_empty());

    let resp = ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build())
        .put(client.bundle_url(&Digest::of(b"other").to_hex()))
        .send(&b"not the digested bytes"[..])
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);
}

#[test]
fn unknown_bundles_are_not_found() {
    let store = tempfile::tempdir().unwrap();
    let server = loopback(store.path());
    let client = RepositoryClient::new(&server.url());
    let err = client.get_bundle(&Digest::of(b"absent").to_hex()).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err}");
    assert!(matches!(client.get_bundle("not-a-digest"), Err(Error::InvalidArgument(_))));
}

#[test]
fn transient_failures_are_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let payload = b"bundle bytes".to_vec();
    let digest = Digest::of(&payload).to_hex();
    let body = payload.clone();
    let flaky = Router::new().route(
        "/bundles/{digest}",
        get(move || {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let body = body.clone();
            async move {
                if n < 2 {
                    (StatusCode::SERVICE_UNAVAILABLE, Vec::new())
                } else {
                    (StatusCode::OK, body)
                }
            }
        }),
    );
    let server = BackgroundServer::spawn(flaky, "127.0.0.1:0".parse().unwrap()).unwrap();
    let client = fast(RepositoryClient::new(&server.url()));
    let (_, bytes) = client.get_bundle(&digest).unwrap();
    assert_eq!(bytes, payload);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_failures_give_up_after_three_attempts() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let broken = Router::new().route(
        "/bundles/{digest}",
        get(move || {
            counter.fetch_add(1, Ordering::SeqCst);
            async { StatusCode::INTERNAL_SERVER_ERROR }
        }),
    );
    let server = BackgroundServer::spawn(broken, "127.0.0.1:0".parse().unwrap()).unwrap();
    let client = fast(RepositoryClient::new(&server.url()));
    let err = client.get_bundle(&Digest::of(b"x").to_hex()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let closed = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap()
    };
    let client = fast(RepositoryClient::new(&format!("http://{closed}")));
    let run = common::audited_run("sample-pipeline", "/work/sample");
    let (_root, src, commit) = common::package(&run);
    let (bytes, _, _) = export_bundle_bytes(&src, &[commit.manifest.execution_id]).unwrap();
    assert!(matches!(client.put_bundle(&bytes), Err(Error::Transport(_))));
}

#[test]
fn push_without_a_repository_is_a_configuration_error() {
    let run = common::audited_run("sample-pipeline", "/work/sample");
    let (root, _src, _) = common::package(&run);
    let home = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sciunit"))
        .args(["--root", root.path().to_str().unwrap(), "-s", "fixture", "--json", "push", "e1"])
        .env_clear()
        .env("HOME", home.path())
        .current_dir(home.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config-error");
    assert!(err["error"]["hint"].is_string());
}
