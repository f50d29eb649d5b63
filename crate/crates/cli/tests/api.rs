#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use serde_json::{json, Value};

use sciunit_cli::api::{router, ApiState};
use sciunit_cli::server::BackgroundServer;
use sciunit_cli::views::plan_json;
use sciunit_core::auditor::{EventKind, TraceEvent};
use sciunit_core::capture::{package_trace, PackageOptions};
use sciunit_core::chunkstore::RollingHashParams;
use sciunit_core::container::Sciunit;
use sciunit_core::reuse::{execution_graph, Backend};
use sciunit_core::summarizer::summarize_expanded;

struct Fixture {
    _run: common::AuditedRun,
    root: tempfile::TempDir,
    sciunit: Sciunit,
    server: BackgroundServer,
    agent: ureq::Agent,
}

fn agent() -> ureq::Agent {
    ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build())
}

fn send_json(agent: &ureq::Agent, url: impl AsRef<str>, body: Value) -> Result<ureq::http::Response<ureq::Body>, ureq::Error> {
    agent
        .post(url.as_ref())
        .header("content-type", "application/json")
        .send(body.to_string())
}

fn serve(root: &Path, name: &str) -> BackgroundServer {
    let state = Arc::new(ApiState::new(root.to_path_buf(), name.to_string(), Backend::Portable, None));
    BackgroundServer::spawn(router(state), "127.0.0.1:0".parse().unwrap()).unwrap()
}

fn sample() -> Fixture {
    let run = common::audited_run("sample-pipeline", "/work/sample");
    let (root, sciunit, _) = common::package(&run);
    let server = serve(root.path(), "fixture");
    Fixture {
        _run: run,
        root,
        sciunit,
        server,
        agent: agent(),
    }
}

impl Fixture {
    fn get(&self, path: &str) -> (u16, Vec<u8>) {
        let mut resp = self.agent.get(format!("{}{path}", self.server.url())).call().unwrap();
        (resp.status().as_u16(), resp.body_mut().read_to_vec().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Vec<u8>) {
        let mut resp = send_json(&self.agent, format!("{}{path}", self.server.url()), body).unwrap();
        (resp.status().as_u16(), resp.body_mut().read_to_vec().unwrap())
    }

    /// Stdout of the command line client against the same sciunit.
    fn cli(&self, args: &[&str]) -> Vec<u8> {
        let home = tempfile::tempdir().unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_sciunit"))
            .args(["--root", self.root.path().to_str().unwrap(), "-s", "fixture"])
            .args(args)
            .env_clear()
            .env("HOME", home.path())
            .current_dir(home.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut stdout = out.stdout;
        assert_eq!(stdout.pop(), Some(b'\n'));
        stdout
    }
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn executions_lists_the_committed_run() {
    let f = sample();
    let (status, body) = f.get("/api/executions");
    assert_eq!(status, 200);
    let list = json_of(&body);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["alias"], "e1");
    assert_eq!(list[0]["execution_id"], f.sciunit.executions()[0].as_str());
}

#[test]
fn graphs_match_the_command_line_byte_for_byte() {
    let f = sample();
    let (status, summary) = f.get("/api/graph/e1");
    assert_eq!(status, 200);
    assert_eq!(summary, f.cli(&["graph", "e1"]));
    let (_, replete) = f.get("/api/graph/e1?view=replete");
    assert_eq!(replete, f.cli(&["graph", "e1", "--replete"]));
    let view = json_of(&summary);
    assert!(view["nodes"].as_array().unwrap().len() < json_of(&replete)["nodes"].as_array().unwrap().len());
}

/// A visible node that is neither a group nor an annotation host.
fn plain_node(view: &Value) -> Option<String> {
    let hosts: Vec<&Value> = view["annotations"].as_array().unwrap().iter().map(|a| &a["host"]).collect();
    view["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|n| n["kind"] == "plain" && !hosts.contains(&&n["id"]))
        .map(|n| n["id"].as_str().unwrap().to_string())
}

#[test]
fn expand_replays_on_the_summary() {
    let f = sample();
    let graph = execution_graph(&f.sciunit, "e1").unwrap();
    let (_, summary) = f.get("/api/graph/e1");
    let view = json_of(&summary);
    let group = view["nodes"].as_array().unwrap().iter().find(|n| n["kind"] == "group").unwrap();
    let gid = group["id"].as_str().unwrap().to_string();
    let (status, expanded) = f.post("/api/expand", json!({ "id": "e1", "node_id": gid }));
    assert_eq!(status, 200);
    assert_eq!(expanded, summarize_expanded(&graph, std::slice::from_ref(&gid)).unwrap().to_json());
    let (_, twice) = f.post("/api/expand", json!({ "id": "e1", "node_id": gid, "expanded": [gid] }));
    let (_, via_query) = f.get(&format!("/api/graph/e1?expanded={gid},{gid}"));
    assert_eq!(twice, via_query);

    let mut steps: Vec<String> = Vec::new();
    let (current, plain) = loop {
        let (_, bytes) = f.get(&format!("/api/graph/e1?expanded={}", steps.join(",")));
        let view = json_of(&bytes);
        if let Some(id) = plain_node(&view) {
            break (bytes, id);
        }
        let next = view["nodes"].as_array().unwrap().iter().find(|n| n["kind"] == "group").unwrap();
        steps.push(next["id"].as_str().unwrap().to_string());
    };
    let (_, same) = f.post("/api/expand", json!({ "id": "e1", "node_id": plain, "expanded": steps }));
    assert_eq!(same, current);
}

#[test]
fn unknown_references_are_not_found() {
    let f = sample();
    let (status, body) = f.get("/api/graph/e9");
    assert_eq!(status, 404);
    assert_eq!(json_of(&body)["error"]["kind"], "not-found");
    let (status, _) = f.post("/api/expand", json!({ "id": "e1", "node_id": "nope" }));
    assert_eq!(status, 404);
    let (status, _) = f.get("/api/nothing");
    assert_eq!(status, 404);
    let (status, _) = f.post("/api/plan", json!({ "id": "e1", "selected": [] }));
    assert_eq!(status, 400);
}

#[test]
fn plan_matches_the_library() {
    let f = sample();
    let selected = vec!["P_awk_4102".to_string()];
    let (status, body) = f.post("/api/plan", json!({ "id": "e1", "selected": selected }));
    assert_eq!(status, 200);
    assert_eq!(body, plan_json(&f.sciunit, "e1", &selected).unwrap());
    let plan = json_of(&body);
    let required: Vec<u64> = plan["entry_commands"].as_array().unwrap().iter().map(|c| c["pid"].as_u64().unwrap()).collect();
    assert_eq!(required, vec![4102, 4103, 4104]);
}

#[test]
fn index_page_is_served() {
    let f = sample();
    let (status, body) = f.get("/");
    assert_eq!(status, 200);
    assert!(String::from_utf8(body).unwrap().contains("<html"));
}

fn stream_lines(f: &Fixture, body: Value) -> Vec<Value> {
    let resp = send_json(&f.agent, format!("{}/api/repeat", f.server.url()), body).unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let mut text = String::new();
    resp.into_body().into_reader().read_to_string(&mut text).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn repeat_streams_a_started_event_then_the_report() {
    let f = sample();
    let events = stream_lines(&f, json!({ "id": "e1" }));
    assert_eq!(events.len(), 2);
    assert_eq!(events[0]["event"], "started");
    assert_eq!(events[1]["event"], "report");
    let report = &events[1]["report"];
    assert_eq!(report["exit_status"], 0);
    assert!(report["paths_missing"].as_array().unwrap().is_empty());
    assert!(report["outputs"].as_array().unwrap().iter().all(|o| o["matches"] == true));

    let partial = stream_lines(&f, json!({ "id": "e1", "selected": ["P_awk_4103"], "backend": "portable" }));
    assert_eq!(partial[1]["report"]["backend"], "portable");
    let missing = stream_lines(&f, json!({ "id": "e1", "selected": ["P_nobody_1"] }));
    assert_eq!(missing[1]["event"], "error");
    assert_eq!(missing[1]["error"]["kind"], "not-found");
}

#[test]
fn a_second_repeat_of_a_running_execution_conflicts() {
    let root = tempfile::tempdir().unwrap();
    let mut s = Sciunit::create(root.path(), "slow", RollingHashParams::default()).unwrap();
    let events = vec![
        TraceEvent::new(1, 10, EventKind::Exec).with_path("/usr/bin/sleep").with_argv(["sleep", "2"]),
        TraceEvent::new(2, 10, EventKind::Exit),
    ];
    package_trace(&mut s, events, Path::new("/"), &PackageOptions::default()).unwrap();
    let server = serve(root.path(), "slow");
    let agent = agent();
    let url = format!("{}/api/repeat", server.url());

    let first = send_json(&agent, &url, json!({ "id": "e1" })).unwrap();
    assert_eq!(first.status().as_u16(), 200);
    let mut reader = BufReader::new(first.into_body().into_reader());
    let mut started = String::new();
    reader.read_line(&mut started).unwrap();
    assert!(started.contains("started"));

    let mut second = send_json(&agent, &url, json!({ "id": "e1" })).unwrap();
    assert_eq!(second.status().as_u16(), 409);
    let body: Value = serde_json::from_slice(&second.body_mut().read_to_vec().unwrap()).unwrap();
    assert_eq!(body["error"]["kind"], "busy");

    let mut rest = String::new();
    reader.read_to_string(&mut rest).unwrap();
    let report: Value = serde_json::from_str(rest.trim()).unwrap();
    assert_eq!(report["report"]["exit_status"], 0);
    let third = send_json(&agent, &url, json!({ "id": "e1" })).unwrap();
    assert_eq!(third.status().as_u16(), 200);
}

