//! Packaging: turn a trace plus the files it touched into a committed
//! container version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::auditor::{build_sandbox, ingest_trace, to_ndjson, DataPolicy, Role, SandboxReport, TraceEvent};
use crate::container::{mirror_of, normalize_absolute, CommitOutcome, CommitRequest, Sciunit};
use crate::error::{Error, IoContext, Result};
use crate::provgraph::build_graph;

#[derive(Debug, Clone, Default)]
pub struct PackageOptions {
    pub policy: DataPolicy,
    pub environment: BTreeMap<String, String>,
    /// Defaults to `/`.
    pub working_dir: Option<PathBuf>,
    /// Defaults to the argv of the root process.
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct PackageOutcome {
    pub commit: CommitOutcome,
    pub sandbox: SandboxReport,
    pub dependencies: usize,
    pub processes: usize,
}

/// Packages `events` with file contents taken from `host_root`.
pub fn package_trace(
    sciunit: &mut Sciunit,
    events: Vec<TraceEvent>,
    host_root: &Path,
    opts: &PackageOptions,
) -> Result<PackageOutcome> {
    if events.is_empty() {
        return Err(Error::AuditIncomplete("the trace has no events".into()));
    }
    let log_bytes = to_ndjson(&events);
    let (mut deps, log) = ingest_trace(events)?;
    build_graph(&log)?;
    for extra in &sciunit.meta().extra_deps {
        if deps.get(extra).is_none() {
            deps.insert(extra.clone(), Role::Read);
        }
    }
    let command = match &opts.command {
        Some(c) => c.clone(),
        None => log
            .root()
            .map(|r| log.processes()[r].argv())
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::AuditIncomplete("the trace names no root command".into()))?,
    };
    let working_dir = normalize_absolute(opts.working_dir.as_deref().unwrap_or(Path::new("/")));

    let scratch = sciunit.scratch_dir("sandbox-")?;
    let report = build_sandbox(&deps, opts.policy, host_root, scratch.path())?;
    let wd = mirror_of(scratch.path(), &working_dir);
    if fs::symlink_metadata(&wd).is_err() {
        fs::create_dir_all(&wd).ctx(|| format!("creating {}", wd.display()))?;
    }
    let commit = sciunit.commit_container(CommitRequest {
        sandbox_root: scratch.path().to_path_buf(),
        command,
        environment: opts.environment.clone(),
        working_dir,
        log: log_bytes,
        outputs: deps.with_role(Role::Written),
        missing: report.missing.iter().cloned().collect(),
        external: report.external.iter().cloned().collect(),
    })?;
    Ok(PackageOutcome {
        commit,
        sandbox: report,
        dependencies: deps.len(),
        processes: log.processes().len(),
    })
}

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub package: PackageOutcome,
    pub exit_status: i32,
}

/// Runs `argv` under the live tracer in `cwd` and packages the result.
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub fn audit_command(sciunit: &mut Sciunit, argv: &[String], cwd: &Path, policy: DataPolicy) -> Result<AuditOutcome> {
    use crate::auditor::live::{trace_command, TraceOptions};
    let cwd = normalize_absolute(cwd);
    let run = trace_command(&TraceOptions::new(argv.to_vec(), &cwd))?;
    let opts = PackageOptions {
        policy,
        environment: std::env::vars().collect(),
        working_dir: Some(cwd),
        command: Some(argv.to_vec()),
    };
    let package = package_trace(sciunit, run.events, Path::new("/"), &opts)?;
    Ok(AuditOutcome {
        package,
        exit_status: run.exit_status,
    })
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
pub fn audit_command(_: &mut Sciunit, _: &[String], _: &Path, _: DataPolicy) -> Result<AuditOutcome> {
    Err(Error::BackendUnavailable(
        "live auditing needs Linux on x86_64; package a recorded trace with `ingest` instead".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditor::{EventKind, Pid};
    use crate::chunkstore::RollingHashParams;

    fn ev(seq: u64, pid: Pid, kind: EventKind) -> TraceEvent {
        TraceEvent::new(seq, pid, kind)
    }

    #[test]
    fn packages_recorded_trace() {
        let host = tempfile::tempdir().unwrap();
        fs::create_dir_all(host.path().join("w")).unwrap();
        fs::write(host.path().join("w/in.txt"), "input").unwrap();
        fs::write(host.path().join("w/out.txt"), "output").unwrap();
        let events = vec![
            ev(1, 1, EventKind::Exec).with_path("/bin/cat").with_argv(["cat", "in.txt"]),
            ev(2, 1, EventKind::OpenRead).with_path("/w/in.txt"),
            ev(3, 1, EventKind::OpenWrite).with_path("/w/out.txt"),
            ev(4, 1, EventKind::Exit),
        ];
        let root = tempfile::tempdir().unwrap();
        let mut s = Sciunit::create(root.path(), "t", RollingHashParams::default()).unwrap();
        let opts = PackageOptions {
            working_dir: Some("/w".into()),
            ..Default::default()
        };
        let out = package_trace(&mut s, events, host.path(), &opts).unwrap();
        let m = &out.commit.manifest;
        assert_eq!(m.command, ["cat", "in.txt"]);
        assert_eq!(m.working_dir, Path::new("/w"));
        assert!(m.outputs.contains_key(Path::new("/w/out.txt")));
        assert!(m.missing.contains(&PathBuf::from("/bin/cat")));

        let dest = tempfile::tempdir().unwrap();
        s.materialize_container(&m.execution_id, dest.path()).unwrap();
        assert_eq!(fs::read_to_string(dest.path().join("w/in.txt")).unwrap(), "input");
    }

    #[test]
    fn empty_trace_is_incomplete() {
        let root = tempfile::tempdir().unwrap();
        let mut s = Sciunit::create(root.path(), "t", RollingHashParams::default()).unwrap();
        let err = package_trace(&mut s, Vec::new(), Path::new("/"), &PackageOptions::default()).unwrap_err();
        assert!(matches!(err, Error::AuditIncomplete(_)));
    }
}
