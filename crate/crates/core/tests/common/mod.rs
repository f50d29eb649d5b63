#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sciunit_core::auditor::{read_ndjson, TraceEvent};
use sciunit_core::capture::{package_trace, PackageOptions};
use sciunit_core::chunkstore::RollingHashParams;
use sciunit_core::container::{CommitOutcome, Sciunit};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let dest = to.join(entry.path().strip_prefix(from).unwrap());
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).unwrap();
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

/// A fixture pipeline after its recorded run: the host tree with outputs and the trace.
pub struct AuditedRun {
    pub host: tempfile::TempDir,
    pub events: Vec<TraceEvent>,
    pub working_dir: PathBuf,
}

pub fn audited_run(name: &str, working_dir: &str) -> AuditedRun {
    let host = tempfile::tempdir().unwrap();
    copy_tree(&fixture(name).join("tree"), host.path());
    let wd = host.path().join(working_dir.trim_start_matches('/'));
    fs::create_dir_all(wd.join("out")).unwrap();
    let status = Command::new("sh").arg("run.sh").current_dir(&wd).status().unwrap();
    assert!(status.success(), "fixture pipeline {name} failed");
    let trace = fs::read(fixture(name).join("trace.ndjson")).unwrap();
    AuditedRun {
        host,
        events: read_ndjson(trace.as_slice()).unwrap(),
        working_dir: PathBuf::from(working_dir),
    }
}

pub fn package(run: &AuditedRun) -> (tempfile::TempDir, Sciunit, CommitOutcome) {
    let root = tempfile::tempdir().unwrap();
    let mut s = Sciunit::create(root.path(), "fixture", RollingHashParams::default()).unwrap();
    let opts = PackageOptions {
        working_dir: Some(run.working_dir.clone()),
        ..Default::default()
    };
    let out = package_trace(&mut s, run.events.clone(), run.host.path(), &opts).unwrap();
    (root, s, out.commit)
}
