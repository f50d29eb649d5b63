mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use common::{audited_run, package};
use sciunit_core::auditor::EventKind;
use sciunit_core::container::mirror_of;
use sciunit_core::error::Error;
use sciunit_core::reuse::{
    execution_graph, plan_for, repeat, select_backend, Backend, DepRole, RepeatOptions, RepeatReport,
};

fn quiet(backend: Backend, selected: Option<Vec<String>>) -> RepeatOptions {
    RepeatOptions {
        backend,
        selected,
        quiet: true,
        ..Default::default()
    }
}

fn backends() -> Vec<Backend> {
    let mut out = vec![Backend::Portable];
    if select_backend(Backend::TraceRedirect).is_ok() {
        out.push(Backend::TraceRedirect);
    }
    out
}

fn traced_argv(report: &RepeatReport) -> Vec<String> {
    report
        .trace
        .iter()
        .filter(|e| e.kind == EventKind::Exec)
        .filter_map(|e| e.argv.as_ref())
        .map(|a| a.join(" "))
        .collect()
}

#[test]
fn exact_repeat_reproduces_outputs() {
    let run = audited_run("sample-pipeline", "/work/sample");
    let (_root, s, commit) = package(&run);
    for backend in backends() {
        let report = repeat(&s, "e1", &quiet(backend, None)).unwrap();
        assert!(report.success(), "{backend:?}: {report:?}");
        assert_eq!(report.outputs.len(), 4);
        assert!(report.outputs_match(), "{backend:?}: {:?}", report.outputs);
        for check in &report.outputs {
            let original = fs::read(run.host.path().join(check.path.strip_prefix("/").unwrap())).unwrap();
            let repeated = fs::read(mirror_of(&report.sandbox, &check.path)).unwrap();
            assert_eq!(original, repeated);
        }
        let written: BTreeSet<&Path> = report.paths_written.iter().map(PathBuf::as_path).collect();
        assert!(written.contains(Path::new("/work/sample/out/report.txt")));
        assert_eq!(report.execution_id, commit.manifest.execution_id);
    }
}

#[test]
fn plan_carries_over_excluded_output() {
    let run = audited_run("fie-pipeline", "/work/fie");
    let (_root, s, _) = package(&run);
    let plan = plan_for(&s, "e1", &["P_awk_4102".into(), "P_awk_4104".into()]).unwrap();
    let graph = execution_graph(&s, "e1").unwrap();
    let labels: Vec<&str> = plan
        .required_procs
        .iter()
        .map(|id| graph.node(id).unwrap().label.as_str())
        .collect();
    assert_eq!(labels, ["P_awk_4102", "P_awk_4104", "P_awk_4105"]);
    let heat = plan
        .dep_files
        .iter()
        .find(|d| d.path == Path::new("/work/fie/out/heat.csv"))
        .unwrap();
    assert!(heat.carried_over);
    assert_eq!(heat.role, DepRole::Read);
    assert!(plan
        .dep_files
        .iter()
        .all(|d| d.path != Path::new("/work/fie/scripts/heatmap.awk")));
}

#[test]
fn partial_repeat_skips_excluded_stage() {
    let run = audited_run("fie-pipeline", "/work/fie");
    let (_root, s, _) = package(&run);
    for backend in backends() {
        let sel = vec!["P_awk_4102".to_string(), "P_awk_4104".to_string()];
        let report = repeat(&s, "e1", &quiet(backend, Some(sel))).unwrap();
        assert!(report.success(), "{backend:?}: {report:?}");
        let checked: BTreeSet<&Path> = report.outputs.iter().map(|o| o.path.as_path()).collect();
        assert_eq!(
            checked,
            BTreeSet::from([
                Path::new("/work/fie/out/violation.csv"),
                Path::new("/work/fie/out/model_data.csv"),
                Path::new("/work/fie/out/model.txt"),
            ])
        );
        assert!(report.outputs_match(), "{backend:?}: {:?}", report.outputs);
        let argv = traced_argv(&report);
        assert_eq!(argv.len(), if backend == Backend::Portable { 3 } else { argv.len() });
        assert!(argv.iter().all(|a| !a.contains("heatmap.awk")), "{argv:?}");
        assert!(mirror_of(&report.sandbox, Path::new("/work/fie/out/heat.csv")).is_file());
        assert!(!mirror_of(&report.sandbox, Path::new("/work/fie/scripts/heatmap.awk")).exists());
    }
}

#[test]
fn partial_then_full_repeat_agree() {
    let run = audited_run("fie-pipeline", "/work/fie");
    let (_root, s, _) = package(&run);
    let sel = vec!["P_awk_4102".to_string()];
    let partial = repeat(&s, "e1", &quiet(Backend::Portable, Some(sel))).unwrap();
    let full = repeat(&s, "e1", &quiet(Backend::Portable, None)).unwrap();
    for p in ["/work/fie/out/violation.csv", "/work/fie/out/model.txt"] {
        let a = fs::read(mirror_of(&partial.sandbox, Path::new(p))).unwrap();
        let b = fs::read(mirror_of(&full.sandbox, Path::new(p))).unwrap();
        assert_eq!(a, b, "{p}");
    }
}

#[test]
fn single_sink_sandbox_holds_only_its_inputs() {
    let run = audited_run("fie-pipeline", "/work/fie");
    let (_root, s, _) = package(&run);
    let report = repeat(&s, "e1", &quiet(Backend::Portable, Some(vec!["P_awk_4105".into()]))).unwrap();
    assert!(report.success());
    let files: BTreeSet<PathBuf> = walkdir::WalkDir::new(&report.sandbox)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| Path::new("/").join(e.path().strip_prefix(&report.sandbox).unwrap()))
        .collect();
    let expected: BTreeSet<PathBuf> = [
        "/work/fie/scripts/model.awk",
        "/work/fie/out/model_data.csv",
        "/work/fie/out/model.txt",
    ]
    .iter()
    .map(PathBuf::from)
    .collect();
    assert_eq!(files, expected);
}

#[test]
fn repeat_errors() {
    let run = audited_run("sample-pipeline", "/work/sample");
    let (_root, s, _) = package(&run);
    assert!(matches!(repeat(&s, "e9", &RepeatOptions::default()), Err(Error::NotFound(_))));
    assert!(matches!(repeat(&s, "", &RepeatOptions::default()), Err(Error::NotFound(_))));
    let empty = quiet(Backend::Portable, Some(Vec::new()));
    assert!(matches!(repeat(&s, "e1", &empty), Err(Error::InvalidArgument(_))));
}

#[test]
fn concurrent_repeat_of_one_sandbox_is_refused() {
    let run = audited_run("sample-pipeline", "/work/sample");
    let (_root, s, _) = package(&run);
    let sandbox = s.dir().join("sandboxes").join("busy");
    fs::create_dir_all(sandbox.parent().unwrap()).unwrap();
    fs::write(sandbox.parent().unwrap().join("busy.lock"), std::process::id().to_string()).unwrap();
    let opts = RepeatOptions {
        sandbox: Some(sandbox),
        ..quiet(Backend::Portable, None)
    };
    assert!(matches!(repeat(&s, "e1", &opts), Err(Error::Busy(_))));
}
