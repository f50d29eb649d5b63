//! Exact, partial and modified re-execution of captured containers.
//!
//! A partial plan keeps the selected processes and every process that
//! transitively depends on one of them, together with each file version those
//! processes touched. The plan is launched from the commands of required
//! processes whose parents were left out.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::auditor::{build_sandbox, to_ndjson, DataPolicy, DependencySet, EventKind, Pid, Role, TraceEvent};
use crate::chunkstore::StoreLock;
use crate::container::{digest_file, mirror_of, normalize_absolute, CommitOutcome, CommitRequest, Manifest, Sciunit};
use crate::digest::Digest;
use crate::error::{Error, IoContext, Result};
use crate::provgraph::{graph_from_log_bytes, topo_order, EdgeType, PNode, RepleteGraph};

const SANDBOXES_DIR: &str = "sandboxes";
const FALLBACK_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepRole {
    Read,
    Executed,
    Wrote,
}

/// A file version incident to a required process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepFile {
    pub node_id: String,
    pub path: PathBuf,
    pub version: u32,
    pub role: DepRole,
    /// Produced by a process outside the plan and reused as is.
    pub carried_over: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryCommand {
    pub process_id: String,
    pub pid: Pid,
    pub argv: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubContainerPlan {
    pub execution_id: String,
    pub selected_procs: Vec<String>,
    /// Required process ids in dependency order.
    pub required_procs: Vec<String>,
    pub dep_files: Vec<DepFile>,
    pub entry_commands: Vec<EntryCommand>,
}

impl SubContainerPlan {
    /// Plan for re-running every process of the graph.
    pub fn is_exact(&self, graph: &RepleteGraph) -> bool {
        self.required_procs.len() == graph.processes().count()
    }
}

/// Maps node ids or process labels to process node ids.
pub fn resolve_selection(graph: &RepleteGraph, selectors: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for sel in selectors {
        let node = graph
            .node(sel)
            .or_else(|| graph.processes().find(|n| &n.label == sel))
            .ok_or_else(|| Error::NotFound(format!("process {sel:?}")))?;
        if !node.is_process() {
            return Err(Error::InvalidArgument(format!("{sel:?} is a file, not a process")));
        }
        if !out.contains(&node.id) {
            out.push(node.id.clone());
        }
    }
    Ok(out)
}

/// Selected processes plus every process with a dependency path to one of them.
pub fn get_procs(graph: &RepleteGraph, selected: &[String]) -> Result<BTreeSet<String>> {
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no processes selected".into()));
    }
    let mut reverse: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in graph.edges() {
        reverse.entry(e.to.as_str()).or_default().push(e.from.as_str());
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut queue = VecDeque::new();
    for id in selected {
        let node = graph.node(id).ok_or_else(|| Error::NotFound(format!("process {id}")))?;
        if !node.is_process() {
            return Err(Error::InvalidArgument(format!("{id} is not a process")));
        }
        if seen.insert(node.id.as_str()) {
            queue.push_back(node.id.as_str());
        }
    }
    while let Some(id) = queue.pop_front() {
        for &from in reverse.get(id).into_iter().flatten() {
            if seen.insert(from) {
                queue.push_back(from);
            }
        }
    }
    Ok(seen
        .into_iter()
        .filter(|id| graph.node(id).is_some_and(PNode::is_process))
        .map(str::to_string)
        .collect())
}

/// Every file version read, executed or written by a required process.
pub fn get_deps(graph: &RepleteGraph, required: &BTreeSet<String>) -> Vec<DepFile> {
    let mut roles: BTreeMap<&str, DepRole> = BTreeMap::new();
    for e in graph.edges() {
        let (file, role) = match e.etype {
            EdgeType::Read if required.contains(&e.from) => {
                (e.to.as_str(), if e.exec { DepRole::Executed } else { DepRole::Read })
            }
            EdgeType::Wrote if required.contains(&e.to) => (e.from.as_str(), DepRole::Wrote),
            _ => continue,
        };
        let slot = roles.entry(file).or_insert(role);
        *slot = (*slot).max(role);
    }
    let mut deps: Vec<DepFile> = roles
        .into_iter()
        .filter_map(|(id, role)| {
            let node = graph.node(id)?;
            let carried_over = role != DepRole::Wrote
                && graph
                    .out_edges(id)
                    .any(|e| e.etype == EdgeType::Wrote && !required.contains(&e.to));
            Some(DepFile {
                node_id: node.id.clone(),
                path: node.path.clone().unwrap_or_else(|| PathBuf::from(&node.label)),
                version: node.version,
                role,
                carried_over,
            })
        })
        .collect();
    deps.sort_by(|a, b| (&a.path, a.version).cmp(&(&b.path, b.version)));
    deps
}

fn base_phase<'a>(graph: &'a RepleteGraph, id: &'a str) -> &'a str {
    let mut cur = id;
    while let Some(prev) = graph
        .out_edges(cur)
        .find(|e| e.etype == EdgeType::Continued)
        .map(|e| e.to.as_str())
    {
        cur = prev;
    }
    cur
}

/// Builds the plan for `selected` (ids or labels) over `graph`.
pub fn plan_partial(execution_id: &str, graph: &RepleteGraph, selectors: &[String]) -> Result<SubContainerPlan> {
    if selectors.is_empty() {
        return Err(Error::InvalidArgument("no processes selected".into()));
    }
    let selected = resolve_selection(graph, selectors)?;
    let required = get_procs(graph, &selected)?;
    let order = topo_order(graph)?;
    let rank: HashMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut required_procs: Vec<String> = required.iter().cloned().collect();
    required_procs.sort_by_key(|id| rank.get(id.as_str()).copied().unwrap_or(0));

    let mut entry_commands = Vec::new();
    let mut launched: BTreeSet<&str> = BTreeSet::new();
    for id in &required_procs {
        let base = base_phase(graph, id);
        let parent_required = graph
            .out_edges(base)
            .find(|e| e.etype == EdgeType::Spawned)
            .is_some_and(|e| required.contains(&e.to));
        if parent_required || !launched.insert(base) {
            continue;
        }
        let node = graph.node(id).expect("required ids come from the graph");
        entry_commands.push(EntryCommand {
            process_id: id.clone(),
            pid: node.pid.unwrap_or_default(),
            argv: node.argv.clone().unwrap_or_default(),
        });
    }
    let mut selected_procs = selected;
    selected_procs.sort();
    Ok(SubContainerPlan {
        execution_id: execution_id.to_string(),
        selected_procs,
        required_procs,
        dep_files: get_deps(graph, &required),
        entry_commands,
    })
}

/// Loads the replete graph of a committed execution.
pub fn execution_graph(sciunit: &Sciunit, reference: &str) -> Result<RepleteGraph> {
    let bytes = sciunit.log_bytes(&sciunit.resolve(reference)?)?;
    Ok(graph_from_log_bytes(&bytes)?.1)
}

/// Plan for a committed execution.
pub fn plan_for(sciunit: &Sciunit, reference: &str, selectors: &[String]) -> Result<SubContainerPlan> {
    let id = sciunit.resolve(reference)?;
    let graph = execution_graph(sciunit, &id)?;
    plan_partial(&id, &graph, selectors)
}

#[derive(Debug, Clone)]
pub struct SubContainer {
    pub plan: SubContainerPlan,
    pub sandbox_root: PathBuf,
    pub warnings: Vec<String>,
}

fn newest_versions(graph: &RepleteGraph) -> HashMap<&Path, u32> {
    let mut newest: HashMap<&Path, u32> = HashMap::new();
    for f in graph.files() {
        if let Some(p) = &f.path {
            let v = newest.entry(p.as_path()).or_insert(0);
            *v = (*v).max(f.version);
        }
    }
    newest
}

/// Initializes `sandbox_root` from the parent container with exactly the
/// files the plan reads or executes, plus the directories its outputs go to.
pub fn build_sub_container(
    sciunit: &Sciunit,
    manifest: &Manifest,
    graph: &RepleteGraph,
    plan: SubContainerPlan,
    sandbox_root: &Path,
) -> Result<SubContainer> {
    let parent = sciunit.scratch_dir("parent-")?;
    sciunit.materialize_container(&manifest.execution_id, parent.path())?;

    let required: BTreeSet<&str> = plan.required_procs.iter().map(String::as_str).collect();
    let produced_inside = |d: &DepFile| {
        graph
            .out_edges(&d.node_id)
            .any(|e| e.etype == EdgeType::Wrote && required.contains(e.to.as_str()))
    };
    let mut deps = DependencySet::new();
    let mut output_dirs = BTreeSet::new();
    for d in &plan.dep_files {
        match d.role {
            DepRole::Wrote => {
                if let Some(dir) = d.path.parent() {
                    output_dirs.insert(dir.to_path_buf());
                }
            }
            _ if produced_inside(d) => {}
            DepRole::Executed => deps.insert(d.path.clone(), Role::Executed),
            DepRole::Read => deps.insert(d.path.clone(), Role::Read),
        }
    }
    if sandbox_root.exists() {
        fs::remove_dir_all(sandbox_root).ctx(|| format!("clearing {}", sandbox_root.display()))?;
    }
    let report = build_sandbox(&deps, DataPolicy::IncludeAll, parent.path(), sandbox_root)?;

    let tolerated: BTreeSet<&PathBuf> = manifest.missing.iter().chain(&manifest.external).collect();
    let mut warnings = Vec::new();
    let mut absent = Vec::new();
    for p in &report.missing {
        if tolerated.contains(p) || p.exists() {
            warnings.push(format!("{} is not in the container; the host copy will be used", p.display()));
        } else {
            absent.push(p.clone());
        }
    }
    if !absent.is_empty() {
        return Err(Error::PlanIncomplete { missing: absent });
    }
    for dir in output_dirs.iter().chain(std::iter::once(&manifest.working_dir)) {
        let local = mirror_of(sandbox_root, dir);
        if fs::symlink_metadata(&local).is_err() {
            fs::create_dir_all(&local).ctx(|| format!("creating {}", local.display()))?;
        }
    }

    let newest = newest_versions(graph);
    for d in plan.dep_files.iter().filter(|d| d.carried_over) {
        let Some(expected) = manifest.outputs.get(&d.path) else { continue };
        if newest.get(d.path.as_path()) != Some(&d.version) {
            warnings.push(format!(
                "{} version {} was overwritten later in the run; the container holds a newer version",
                d.path.display(),
                d.version
            ));
            continue;
        }
        let local = mirror_of(sandbox_root, &d.path);
        match digest_file(&local) {
            Ok(actual) if &actual == expected => {}
            Ok(_) => warnings.push(format!("{} differs from its audited content", d.path.display())),
            Err(_) => warnings.push(format!("{} could not be verified", d.path.display())),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SubContainer {
        plan,
        sandbox_root: sandbox_root.to_path_buf(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Auto,
    Portable,
    TraceRedirect,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Auto => "auto",
            Backend::Portable => "portable",
            Backend::TraceRedirect => "trace-redirect",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Backend::Auto),
            "portable" => Ok(Backend::Portable),
            "trace-redirect" | "redirect" => Ok(Backend::TraceRedirect),
            other => Err(Error::InvalidArgument(format!(
                "unknown backend {other:?} (expected auto, portable or trace-redirect)"
            ))),
        }
    }
}

/// Picks the backend that will actually run.
pub fn select_backend(requested: Backend) -> Result<Backend> {
    match requested {
        Backend::Portable => Ok(Backend::Portable),
        Backend::TraceRedirect => {
            redirect_available()?;
            Ok(Backend::TraceRedirect)
        }
        Backend::Auto => match redirect_available() {
            Ok(()) => Ok(Backend::TraceRedirect),
            Err(e) => {
                log::info!("falling back to the portable backend: {e}");
                Ok(Backend::Portable)
            }
        },
    }
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn redirect_available() -> Result<()> {
    crate::auditor::live::probe()
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn redirect_available() -> Result<()> {
    Err(Error::BackendUnavailable("process tracing is not supported on this platform".into()))
}

#[derive(Debug, Clone, Default)]
pub struct RepeatOptions {
    pub backend: Backend,
    /// Process ids or labels; `None` repeats the whole execution.
    pub selected: Option<Vec<String>>,
    /// Sandbox directory; defaults to one under the sciunit.
    pub sandbox: Option<PathBuf>,
    /// Discard the standard output and error of the repeated commands.
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCheck {
    pub path: PathBuf,
    pub expected: Digest,
    pub actual: Option<Digest>,
    pub matches: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatReport {
    pub execution_id: String,
    pub backend: String,
    pub exit_status: i32,
    /// Logical paths created or modified in the sandbox by the run.
    pub paths_written: Vec<PathBuf>,
    /// Expected outputs not produced and dependencies visible nowhere.
    pub paths_missing: Vec<PathBuf>,
    pub outputs: Vec<OutputCheck>,
    pub entry_commands: Vec<Vec<String>>,
    /// Programs executed during the run, by logical path.
    pub programs: Vec<String>,
    pub sandbox: PathBuf,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl RepeatReport {
    pub fn success(&self) -> bool {
        self.exit_status == 0 && self.paths_missing.is_empty()
    }

    pub fn outputs_match(&self) -> bool {
        self.outputs.iter().all(|o| o.matches)
    }
}

fn default_sandbox(sciunit: &Sciunit, id: &str, selected: Option<&[String]>) -> PathBuf {
    let mut name = id[..id.len().min(16)].to_string();
    if let Some(sel) = selected {
        let mut sorted: Vec<&str> = sel.iter().map(String::as_str).collect();
        sorted.sort();
        name.push_str("-p");
        name.push_str(&Digest::of(sorted.join("\n").as_bytes()).to_hex()[..12]);
    }
    sciunit.dir().join(SANDBOXES_DIR).join(name)
}

fn sandbox_lock(sandbox: &Path) -> Result<StoreLock> {
    let parent = sandbox.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
    let mut name = sandbox.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    StoreLock::acquire_file(parent.join(name))
}

/// Re-runs a committed execution, whole or restricted to a selection.
pub fn repeat(sciunit: &Sciunit, reference: &str, opts: &RepeatOptions) -> Result<RepeatReport> {
    let id = sciunit.resolve(reference)?;
    let manifest = sciunit.manifest(&id)?;
    let graph = execution_graph(sciunit, &id)?;
    let backend = select_backend(opts.backend)?;
    let sandbox = opts
        .sandbox
        .clone()
        .unwrap_or_else(|| default_sandbox(sciunit, &id, opts.selected.as_deref()));
    let _lock = sandbox_lock(&sandbox)?;

    let (commands, required, mut warnings) = match &opts.selected {
        None => {
            if sandbox.exists() {
                fs::remove_dir_all(&sandbox).ctx(|| format!("clearing {}", sandbox.display()))?;
            }
            sciunit.materialize_container(&id, &sandbox)?;
            remove_regenerated(&graph, &sandbox)?;
            let all: BTreeSet<String> = graph.processes().map(|p| p.id.clone()).collect();
            (vec![manifest.command.clone()], all, Vec::new())
        }
        Some(sel) => {
            let plan = plan_partial(&id, &graph, sel)?;
            let sub = build_sub_container(sciunit, &manifest, &graph, plan, &sandbox)?;
            let commands = sub.plan.entry_commands.iter().map(|c| c.argv.clone()).collect();
            let required = sub.plan.required_procs.iter().cloned().collect();
            (commands, required, sub.warnings)
        }
    };
    let before = snapshot(&sandbox);
    let run = run_commands(backend, &sandbox, &manifest, &commands, opts.quiet, &mut warnings)?;
    let after = snapshot(&sandbox);

    let paths_written: Vec<PathBuf> = after
        .iter()
        .filter(|(p, stamp)| before.get(*p) != Some(*stamp))
        .map(|(p, _)| p.clone())
        .collect();
    let expected = expected_outputs(&graph, &required);
    let mut paths_missing: Vec<PathBuf> = expected
        .iter()
        .filter(|p| !mirror_of(&sandbox, p).is_file())
        .cloned()
        .collect();
    paths_missing.extend(unavailable_inputs(&graph, &required, &sandbox));
    paths_missing.sort();
    paths_missing.dedup();

    let newest = newest_versions(&graph);
    let outputs = expected
        .iter()
        .filter(|p| final_writer_required(&graph, &required, p, &newest))
        .filter_map(|p| {
            let expected = *manifest.outputs.get(p)?;
            let actual = digest_file(&mirror_of(&sandbox, p)).ok();
            Some(OutputCheck {
                path: p.clone(),
                expected,
                actual,
                matches: actual == Some(expected),
            })
        })
        .collect();
    Ok(RepeatReport {
        execution_id: id,
        backend: backend.name().to_string(),
        exit_status: run.exit_status,
        paths_written,
        paths_missing,
        outputs,
        entry_commands: commands,
        programs: run
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Exec)
            .filter_map(|e| e.path.clone())
            .collect(),
        sandbox,
        warnings,
        trace: run.events,
    })
}

/// Re-runs the command of `reference` inside an edited sandbox and commits
/// the result as a new execution.
pub fn repeat_modified(
    sciunit: &mut Sciunit,
    reference: &str,
    sandbox: &Path,
    backend: Backend,
    quiet: bool,
) -> Result<(RepeatReport, CommitOutcome)> {
    let id = sciunit.resolve(reference)?;
    let manifest = sciunit.manifest(&id)?;
    if !sandbox.is_dir() {
        return Err(Error::NotFound(format!("sandbox {}", sandbox.display())));
    }
    let backend = select_backend(backend)?;
    let _lock = sandbox_lock(sandbox)?;
    let mut warnings = Vec::new();
    let before = snapshot(sandbox);
    let run = run_commands(backend, sandbox, &manifest, std::slice::from_ref(&manifest.command), quiet, &mut warnings)?;
    let after = snapshot(sandbox);
    let paths_written: Vec<PathBuf> = after
        .iter()
        .filter(|(p, stamp)| before.get(*p) != Some(*stamp))
        .map(|(p, _)| p.clone())
        .collect();

    let log = if backend == Backend::TraceRedirect {
        to_ndjson(&run.events)
    } else {
        warnings.push("portable runs are not traced; the new execution keeps the original provenance".into());
        sciunit.log_bytes(&id)?
    };
    let mut outputs: BTreeSet<PathBuf> = manifest.outputs.keys().cloned().collect();
    outputs.extend(paths_written.iter().cloned());
    let outcome = sciunit.commit_container(CommitRequest {
        sandbox_root: sandbox.to_path_buf(),
        command: manifest.command.clone(),
        environment: manifest.environment.clone(),
        working_dir: manifest.working_dir.clone(),
        log,
        outputs: outputs.into_iter().collect(),
        missing: manifest.missing.clone(),
        external: manifest.external.clone(),
    })?;
    let report = RepeatReport {
        execution_id: outcome.manifest.execution_id.clone(),
        backend: backend.name().to_string(),
        exit_status: run.exit_status,
        paths_written,
        paths_missing: Vec::new(),
        outputs: Vec::new(),
        entry_commands: vec![manifest.command.clone()],
        programs: run
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Exec)
            .filter_map(|e| e.path.clone())
            .collect(),
        sandbox: sandbox.to_path_buf(),
        warnings,
        trace: run.events,
    };
    Ok((report, outcome))
}

/// Paths whose every version was produced by the run.
fn created_paths(graph: &RepleteGraph) -> BTreeSet<PathBuf> {
    let mut written: BTreeMap<&Path, bool> = BTreeMap::new();
    for f in graph.files() {
        let Some(p) = &f.path else { continue };
        let has_writer = graph.out_edges(&f.id).any(|e| e.etype == EdgeType::Wrote);
        let all = written.entry(p.as_path()).or_insert(true);
        *all &= has_writer;
    }
    written.into_iter().filter(|(_, all)| *all).map(|(p, _)| p.to_path_buf()).collect()
}

fn remove_regenerated(graph: &RepleteGraph, sandbox: &Path) -> Result<()> {
    for p in created_paths(graph) {
        let local = mirror_of(sandbox, &p);
        if fs::symlink_metadata(&local).is_ok_and(|m| m.is_file()) {
            fs::remove_file(&local).ctx(|| format!("removing {}", local.display()))?;
        }
    }
    Ok(())
}

fn is_pseudo(p: &Path) -> bool {
    ["/proc", "/sys", "/dev"].iter().any(|r| p.starts_with(r))
}

/// Regular files the required processes wrote.
fn expected_outputs(graph: &RepleteGraph, required: &BTreeSet<String>) -> BTreeSet<PathBuf> {
    let created = created_paths(graph);
    graph
        .edges()
        .iter()
        .filter(|e| e.etype == EdgeType::Wrote && required.contains(&e.to))
        .filter_map(|e| graph.node(&e.from)?.path.clone())
        .filter(|p| !is_pseudo(p) && created.contains(p))
        .collect()
}

fn final_writer_required(
    graph: &RepleteGraph,
    required: &BTreeSet<String>,
    path: &Path,
    newest: &HashMap<&Path, u32>,
) -> bool {
    let Some(&v) = newest.get(path) else { return false };
    graph
        .files()
        .filter(|f| f.path.as_deref() == Some(path) && f.version == v)
        .any(|f| graph.out_edges(&f.id).any(|e| e.etype == EdgeType::Wrote && required.contains(&e.to)))
}

/// Inputs of required processes present neither in the sandbox nor on the host.
fn unavailable_inputs(graph: &RepleteGraph, required: &BTreeSet<String>, sandbox: &Path) -> Vec<PathBuf> {
    let produced: BTreeSet<&str> = graph
        .edges()
        .iter()
        .filter(|e| e.etype == EdgeType::Wrote)
        .map(|e| e.from.as_str())
        .collect();
    graph
        .edges()
        .iter()
        .filter(|e| e.etype == EdgeType::Read && required.contains(&e.from) && !produced.contains(e.to.as_str()))
        .filter_map(|e| graph.node(&e.to)?.path.clone())
        .filter(|p| !is_pseudo(p))
        .filter(|p| fs::symlink_metadata(mirror_of(sandbox, p)).is_err() && fs::symlink_metadata(p).is_err())
        .collect()
}

type Stamp = (u64, i64, i64);

/// Regular files under `root` by logical path, with size and modification time.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Stamp> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            let meta = e.metadata().ok()?;
            let rel = e.path().strip_prefix(root).ok()?;
            Some((Path::new("/").join(rel), (meta.size(), meta.mtime(), meta.mtime_nsec())))
        })
        .collect()
}

struct Run {
    exit_status: i32,
    events: Vec<TraceEvent>,
}

fn environment(manifest: &Manifest) -> BTreeMap<String, String> {
    let mut env = manifest.environment.clone();
    if !env.contains_key("PATH") {
        let path = std::env::var("PATH").unwrap_or_else(|_| FALLBACK_PATH.to_string());
        env.insert("PATH".into(), path);
    }
    env
}

fn run_commands(
    backend: Backend,
    sandbox: &Path,
    manifest: &Manifest,
    commands: &[Vec<String>],
    quiet: bool,
    warnings: &mut Vec<String>,
) -> Result<Run> {
    let env = environment(manifest);
    let cwd = mirror_of(sandbox, &manifest.working_dir);
    let mut run = Run {
        exit_status: 0,
        events: Vec::new(),
    };
    for argv in commands.iter().filter(|a| !a.is_empty()) {
        let (status, events) = match backend {
            Backend::TraceRedirect => run_redirected(sandbox, &cwd, &env, argv, quiet)?,
            _ => run_portable(sandbox, &cwd, &env, argv, quiet, run.events.len() as u64)?,
        };
        let offset = run.events.len() as u64;
        run.events.extend(events.into_iter().enumerate().map(|(i, mut e)| {
            e.seq = offset + i as u64 + 1;
            e
        }));
        if status != 0 {
            warnings.push(format!("{} exited with status {status}", argv.join(" ")));
            run.exit_status = status;
            break;
        }
    }
    Ok(run)
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(p).is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
}

/// Resolves `argv[0]` preferring copies inside the sandbox. Returns the host
/// path to run and the logical path it stands for.
fn locate_program(sandbox: &Path, cwd: &Path, path_var: &str, program: &str) -> Option<(PathBuf, PathBuf)> {
    let inside = |logical: &Path| {
        let local = mirror_of(sandbox, logical);
        is_executable(&local).then(|| (local, logical.to_path_buf()))
    };
    if program.contains('/') {
        let p = Path::new(program);
        if p.is_absolute() {
            let logical = normalize_absolute(p);
            return inside(&logical).or_else(|| is_executable(&logical).then(|| (logical.clone(), logical)));
        }
        let local = normalize_absolute(&cwd.join(p));
        let logical = local
            .strip_prefix(sandbox)
            .map(|r| Path::new("/").join(r))
            .unwrap_or_else(|_| local.clone());
        return is_executable(&local).then_some((local, logical));
    }
    let dirs: Vec<&Path> = path_var.split(':').filter(|d| d.starts_with('/')).map(Path::new).collect();
    dirs.iter()
        .find_map(|d| inside(&d.join(program)))
        .or_else(|| {
            dirs.iter().find_map(|d| {
                let host = normalize_absolute(&d.join(program));
                is_executable(&host).then(|| (host.clone(), host))
            })
        })
}

fn portable_path(sandbox: &Path, path_var: &str) -> String {
    let mut parts: Vec<String> = path_var
        .split(':')
        .filter(|d| d.starts_with('/'))
        .map(|d| mirror_of(sandbox, Path::new(d)))
        .filter(|d| d.is_dir())
        .map(|d| d.to_string_lossy().into_owned())
        .collect();
    parts.extend(path_var.split(':').filter(|d| !d.is_empty()).map(str::to_string));
    parts.join(":")
}

fn run_portable(
    sandbox: &Path,
    cwd: &Path,
    env: &BTreeMap<String, String>,
    argv: &[String],
    quiet: bool,
    pid_base: u64,
) -> Result<(i32, Vec<TraceEvent>)> {
    let path_var = env.get("PATH").map(String::as_str).unwrap_or(FALLBACK_PATH);
    let (program, logical) = locate_program(sandbox, cwd, path_var, &argv[0])
        .ok_or_else(|| Error::NotFound(format!("program {}", argv[0])))?;
    let mut cmd = Command::new(&program);
    cmd.args(&argv[1..])
        .current_dir(cwd)
        .env_clear()
        .envs(env)
        .env("PATH", portable_path(sandbox, path_var))
        .env("PWD", cwd)
        .stdin(Stdio::null());
    if quiet {
        cmd.stdout(Stdio::null()).stderr(Stdio::null());
    }
    let status = cmd
        .status()
        .map_err(|e| Error::storage(format!("running {}", program.display()), e))?;
    let code = status
        .code()
        .unwrap_or_else(|| 128 + std::os::unix::process::ExitStatusExt::signal(&status).unwrap_or(0));
    let pid = pid_base as Pid + 1;
    let events = vec![
        TraceEvent::new(1, pid, EventKind::Exec)
            .with_path(logical.to_string_lossy())
            .with_argv(argv.iter().cloned()),
        TraceEvent::new(2, pid, EventKind::Exit),
    ];
    Ok((code, events))
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn run_redirected(
    sandbox: &Path,
    cwd: &Path,
    env: &BTreeMap<String, String>,
    argv: &[String],
    quiet: bool,
) -> Result<(i32, Vec<TraceEvent>)> {
    use crate::auditor::live::{trace_command, TraceOptions};
    let path_var = env.get("PATH").map(String::as_str).unwrap_or(FALLBACK_PATH);
    let (program, _) = locate_program(sandbox, cwd, path_var, &argv[0])
        .ok_or_else(|| Error::NotFound(format!("program {}", argv[0])))?;
    let mut opts = TraceOptions::new(argv.to_vec(), cwd);
    let mut env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    env.retain(|(k, _)| k != "PWD");
    env.push(("PWD".into(), cwd.to_string_lossy().into_owned()));
    opts.env = Some(env);
    opts.redirect_root = Some(sandbox.to_path_buf());
    opts.program = Some(program);
    opts.quiet = quiet;
    let run = trace_command(&opts)?;
    Ok((run.exit_status, run.events))
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn run_redirected(
    _sandbox: &Path,
    _cwd: &Path,
    _env: &BTreeMap<String, String>,
    _argv: &[String],
    _quiet: bool,
) -> Result<(i32, Vec<TraceEvent>)> {
    Err(Error::BackendUnavailable("process tracing is not supported on this platform".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditor::{ingest_trace, EventKind::*};
    use crate::provgraph::build_graph;

    fn ev(seq: u64, pid: Pid, kind: EventKind) -> TraceEvent {
        TraceEvent::new(seq, pid, kind)
    }

    /// Driver forks clean, violation and heatmap stages; model reads violation output.
    fn pipeline() -> RepleteGraph {
        let mut s = 0;
        let mut next = || {
            s += 1;
            s
        };
        let mut events = vec![ev(next(), 1, Exec).with_path("/bin/sh").with_argv(["sh", "run.sh"])];
        events.push(ev(next(), 1, OpenRead).with_path("/w/run.sh"));
        events.push(ev(next(), 1, Close).with_path("/w/run.sh"));
        let stages: [(Pid, &str, &[&str], &str); 4] = [
            (2, "clean", &["/w/raw.csv"], "/w/clean.csv"),
            (3, "violation", &["/w/clean.csv"], "/w/violation.csv"),
            (4, "heatmap", &["/w/clean.csv"], "/w/heat.csv"),
            (5, "model", &["/w/violation.csv", "/w/heat.csv"], "/w/model.txt"),
        ];
        for (pid, name, inputs, output) in stages {
            events.push(ev(next(), pid, Fork).with_parent(1));
            let script = format!("/w/{name}.awk");
            events.push(ev(next(), pid, Exec).with_path("/usr/bin/awk").with_argv([
                "awk".to_string(),
                "-f".into(),
                format!("{name}.awk"),
            ]));
            for p in std::iter::once(script.as_str()).chain(inputs.iter().copied()) {
                events.push(ev(next(), pid, OpenRead).with_path(p));
                events.push(ev(next(), pid, Close).with_path(p));
            }
            events.push(ev(next(), pid, OpenWrite).with_path(output));
            events.push(ev(next(), pid, Close).with_path(output));
            events.push(ev(next(), pid, Exit));
        }
        events.push(ev(next(), 1, Exit));
        let (_, log) = ingest_trace(events).unwrap();
        build_graph(&log).unwrap()
    }

    fn label_id(g: &RepleteGraph, label: &str) -> String {
        g.processes().find(|p| p.label == label).unwrap().id.clone()
    }

    #[test]
    fn selection_pulls_in_downstream_only() {
        let g = pipeline();
        let sel = vec![label_id(&g, "P_awk_3")];
        let procs = get_procs(&g, &sel).unwrap();
        let labels: BTreeSet<&str> = procs.iter().map(|id| g.node(id).unwrap().label.as_str()).collect();
        assert_eq!(labels, BTreeSet::from(["P_awk_3", "P_awk_5"]));
    }

    #[test]
    fn deps_include_carried_over_data() {
        let g = pipeline();
        let plan = plan_partial("x", &g, &["P_awk_3".into()]).unwrap();
        let heat = plan.dep_files.iter().find(|d| d.path == Path::new("/w/heat.csv")).unwrap();
        assert!(heat.carried_over);
        assert_eq!(heat.role, DepRole::Read);
        let violation = plan.dep_files.iter().find(|d| d.path == Path::new("/w/violation.csv")).unwrap();
        assert_eq!(violation.role, DepRole::Wrote);
        assert!(!violation.carried_over);
        assert!(plan.dep_files.iter().all(|d| d.path != Path::new("/w/heatmap.awk")));
        let argv: Vec<&str> = plan.entry_commands.iter().map(|c| c.argv[2].as_str()).collect();
        assert_eq!(argv, ["violation.awk", "model.awk"]);
    }

    #[test]
    fn selecting_root_requires_everything() {
        let g = pipeline();
        let plan = plan_partial("x", &g, &["P_sh_1".into()]).unwrap();
        assert!(plan.is_exact(&g));
        assert_eq!(plan.entry_commands.len(), 1);
        assert_eq!(plan.entry_commands[0].argv, ["sh", "run.sh"]);
    }

    #[test]
    fn selection_errors() {
        let g = pipeline();
        assert!(matches!(plan_partial("x", &g, &[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(plan_partial("x", &g, &["nope".into()]), Err(Error::NotFound(_))));
        let file = g.files().next().unwrap().id.clone();
        assert!(matches!(get_procs(&g, &[file]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn plans_are_deterministic() {
        let g = pipeline();
        let a = plan_partial("x", &g, &["P_awk_4".into(), "P_awk_3".into()]).unwrap();
        let b = plan_partial("x", &g, &["P_awk_3".into(), "P_awk_4".into()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backend_names_parse() {
        for b in [Backend::Auto, Backend::Portable, Backend::TraceRedirect] {
            assert_eq!(b.name().parse::<Backend>().unwrap(), b);
        }
        assert!("docker".parse::<Backend>().is_err());
    }
}
