//! Command line surface and dispatch.

use std::fs;
use std::io::{BufReader, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sciunit_core::auditor::strace::{parse_strace_text, StraceOptions};
use sciunit_core::auditor::{ingest_trace, read_ndjson, to_ndjson, DataPolicy, TraceEvent};
use sciunit_core::capture::{audit_command, package_trace, PackageOptions, PackageOutcome};
use sciunit_core::container::{export_bundle, import_bundle, list_sciunits, Sciunit};
use sciunit_core::provgraph::build_graph;
use sciunit_core::reuse::{repeat, repeat_modified, RepeatOptions, RepeatReport};
use sciunit_core::{Digest, Error, Result};

use crate::api::{self, ApiState};
use crate::config::{Config, Settings};
use crate::repository::{repository_router, RepositoryClient};
use crate::server::serve_forever;
use crate::views::{graph_json, plan_json, GraphView};

#[derive(Debug, Parser)]
#[command(name = "sciunit", version, about = "Capture, version, share and re-run program executions")]
pub struct Cli {
    /// Emit machine-readable JSON, including errors.
    #[arg(long, global = true)]
    pub json: bool,
    /// Configuration file (default: ./sciunit.toml, then ~/.config/sciunit/sciunit.toml).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory holding all sciunits.
    #[arg(long, global = true, value_name = "DIR")]
    pub root: Option<PathBuf>,
    /// Sciunit to operate on instead of the open one.
    #[arg(long, short = 's', global = true, value_name = "NAME")]
    pub sciunit: Option<String>,
    /// Log progress to standard error (repeat for more detail).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a sciunit and open it.
    Create { name: String },
    /// Open an existing sciunit for subsequent commands.
    Open { name: String },
    /// List the sciunits under the root directory.
    Sciunits,
    /// Attach a key/value annotation to the open sciunit.
    Annotate { key: String, value: String },
    /// Run a command under the auditor and commit its container.
    Package {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Record the provenance of a command without building a container.
    Audit {
        /// Write the interaction log here instead of into the sciunit.
        #[arg(long, short = 'o', value_name = "FILE")]
        output: Option<PathBuf>,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Package a recorded trace together with a captured file tree.
    Ingest {
        trace: PathBuf,
        /// Directory the recorded absolute paths are relative to.
        #[arg(long, value_name = "DIR")]
        tree: PathBuf,
        /// Working directory of the recorded command.
        #[arg(long, value_name = "DIR")]
        workdir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TraceFormat::Ndjson)]
        format: TraceFormat,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// List the executions of the open sciunit.
    List,
    /// Re-run an execution, whole or restricted to selected processes.
    Repeat {
        /// Execution alias (eN), id, or id prefix.
        execution: String,
        /// Process ids or labels to re-run together with their dependents.
        #[arg(long, value_delimiter = ',', value_name = "ID,...")]
        procs: Option<Vec<String>>,
        /// auto, portable or trace-redirect.
        #[arg(long)]
        backend: Option<String>,
        /// Sandbox directory to run in.
        #[arg(long, value_name = "DIR")]
        sandbox: Option<PathBuf>,
        /// Run in an edited sandbox (see `materialize`) and commit the result.
        #[arg(long, requires = "sandbox", conflicts_with = "procs")]
        commit: bool,
    },
    /// Print the sub-container plan for a selection of processes.
    Plan {
        execution: String,
        #[arg(long, value_delimiter = ',', required = true, value_name = "ID,...")]
        procs: Vec<String>,
    },
    /// Rebuild the container of an execution into a directory.
    Materialize { execution: String, destination: PathBuf },
    /// Print the provenance graph of an execution, or serve it with the UI.
    Graph {
        execution: String,
        #[arg(long, conflicts_with = "replete")]
        summary: bool,
        #[arg(long)]
        replete: bool,
        /// Summary node ids to expand, in order.
        #[arg(long, value_delimiter = ',', value_name = "ID,...")]
        expand: Vec<String>,
        #[arg(long)]
        serve: bool,
        #[command(flatten)]
        server: ServerArgs,
    },
    /// Serve the local API and UI for the open sciunit.
    Serve {
        #[command(flatten)]
        server: ServerArgs,
    },
    /// Upload executions as a bundle to the repository.
    Push {
        #[arg(required = true)]
        executions: Vec<String>,
        #[arg(long)]
        url: Option<String>,
    },
    /// Download a bundle by URL or digest and import it.
    Pull {
        reference: String,
        #[arg(long)]
        url: Option<String>,
    },
    /// Write executions as a bundle file.
    Export {
        #[arg(required = true)]
        executions: Vec<String>,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Import a bundle file.
    Import { bundle: PathBuf },
    /// Manage dependencies added by hand.
    Deps {
        #[command(subcommand)]
        action: DepsAction,
    },
    /// Show the effective configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Run a bundle repository server.
    Repo {
        #[command(subcommand)]
        action: RepoAction,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceFormat {
    Ndjson,
    Strace,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Leave read-only data files of at least this many bytes on the host.
    #[arg(long, value_name = "BYTES")]
    exclude_data: Option<u64>,
}

impl PolicyArgs {
    fn policy(&self) -> DataPolicy {
        match self.exclude_data {
            Some(min_size) => DataPolicy::ExcludeData { min_size },
            None => DataPolicy::IncludeAll,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServerArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    bind: IpAddr,
    /// Directory of a built UI bundle.
    #[arg(long = "static", value_name = "DIR")]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DepsAction {
    Add { path: PathBuf },
    List,
    Clear,
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    Show,
}

#[derive(Debug, Subcommand)]
pub enum RepoAction {
    Serve {
        dir: PathBuf,
        #[command(flatten)]
        server: ServerArgs,
    },
}

/// What a command produced, in both presentations.
pub struct Reply {
    pub text: String,
    pub json: Value,
    pub exit_code: i32,
}

impl Reply {
    fn new(text: impl Into<String>, json: Value) -> Self {
        Reply {
            text: text.into(),
            json,
            exit_code: 0,
        }
    }
}

impl Cli {
    /// Flag layer of the configuration.
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings {
            sciunit_root: self.root.clone(),
            sciunit: self.sciunit.clone(),
            ..Default::default()
        };
        match &self.command {
            Command::Repeat { backend: Some(b), .. } => s.backend = Some(b.parse()?),
            Command::Push { url, .. } | Command::Pull { url, .. } => s.repository_url = url.clone(),
            Command::Serve { server } | Command::Graph { server, .. } | Command::Repo { action: RepoAction::Serve { server, .. } } => {
                s.api_port = server.port
            }
            _ => {}
        }
        Ok(s)
    }
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    Config::load(cli.config.as_deref(), cli.settings()?, env_var)
}

fn open(cfg: &Config) -> Result<Sciunit> {
    let name = cfg.current_sciunit()?;
    Sciunit::open(&cfg.sciunit_root, &name)
}

fn current_dir() -> Result<PathBuf> {
    std::env::current_dir().map_err(|e| Error::storage("reading the working directory", e))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Runs one parsed command. Graph and server commands write to `out` directly.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Reply> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Create { name } => {
            let s = Sciunit::create(&cfg.sciunit_root, name, cfg.chunk)?;
            cfg.set_current_sciunit(name)?;
            Ok(Reply::new(
                format!("created sciunit {name} at {}", s.dir().display()),
                json!({ "name": name, "path": s.dir() }),
            ))
        }
        Command::Open { name } => {
            let s = Sciunit::open(&cfg.sciunit_root, name)?;
            cfg.set_current_sciunit(name)?;
            Ok(Reply::new(
                format!("opened sciunit {name} ({} executions)", s.executions().len()),
                json!({ "name": name, "path": s.dir(), "executions": s.executions().len() }),
            ))
        }
        Command::Sciunits => {
            let names = list_sciunits(&cfg.sciunit_root)?;
            let current = cfg.current_sciunit().ok();
            let text = names
                .iter()
                .map(|n| format!("{} {n}", if Some(n) == current.as_ref() { "*" } else { " " }))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Reply::new(text, json!({ "sciunits": names, "open": current })))
        }
        Command::Annotate { key, value } => {
            let mut s = open(&cfg)?;
            s.annotate(key, value)?;
            Ok(Reply::new(
                format!("{}: {key} = {value}", s.name()),
                json!({ "sciunit": s.name(), "annotations": s.annotations() }),
            ))
        }
        Command::Package { policy, command } => {
            let mut s = open(&cfg)?;
            let audit = audit_command(&mut s, command, &current_dir()?, policy.policy())?;
            let mut reply = package_reply(&audit.package);
            reply.json["exit_status"] = json!(audit.exit_status);
            if audit.exit_status != 0 {
                reply.text.push_str(&format!("\nwarning: the command exited with status {}", audit.exit_status));
            }
            Ok(reply)
        }
        Command::Audit { output, command } => audit(&cfg, output.as_deref(), command),
        Command::Ingest {
            trace,
            tree,
            workdir,
            format,
            policy,
        } => {
            let mut s = open(&cfg)?;
            let events = read_trace(trace, *format, workdir.as_deref())?;
            let opts = PackageOptions {
                policy: policy.policy(),
                working_dir: workdir.clone(),
                ..Default::default()
            };
            Ok(package_reply(&package_trace(&mut s, events, tree, &opts)?))
        }
        Command::List => {
            let s = open(&cfg)?;
            let list = s.list()?;
            let text = list
                .iter()
                .map(|e| {
                    let notes: Vec<String> = e.annotations.iter().map(|a| format!("{}={}", a.key, a.value)).collect();
                    format!("{:<5} {}  {}  {}", e.alias, &e.execution_id[..16], e.command.join(" "), notes.join(" "))
                        .trim_end()
                        .to_string()
                })
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Reply::new(text, to_value(&list)))
        }
        Command::Repeat {
            execution,
            procs,
            sandbox,
            commit,
            ..
        } => {
            if *commit {
                let mut s = open(&cfg)?;
                let dir = sandbox.as_deref().expect("clap requires --sandbox with --commit");
                let (report, outcome) = repeat_modified(&mut s, execution, dir, cfg.backend, cli.json)?;
                let mut reply = repeat_reply(&report);
                let ordinal = outcome.ordinal;
                reply.text.push_str(&format!("\ncommitted e{ordinal} {}", outcome.manifest.execution_id));
                reply.json["committed"] = json!({ "alias": format!("e{ordinal}"), "execution_id": outcome.manifest.execution_id });
                return Ok(reply);
            }
            let s = open(&cfg)?;
            let opts = RepeatOptions {
                backend: cfg.backend,
                selected: procs.clone(),
                sandbox: sandbox.clone(),
                quiet: cli.json,
            };
            Ok(repeat_reply(&repeat(&s, execution, &opts)?))
        }
        Command::Plan { execution, procs } => {
            let s = open(&cfg)?;
            out.write_all(&plan_json(&s, execution, procs)?)
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::storage("writing the plan", e))?;
            Ok(Reply::new(String::new(), Value::Null))
        }
        Command::Materialize { execution, destination } => {
            let s = open(&cfg)?;
            let id = s.resolve(execution)?;
            let manifest = s.manifest(&id)?;
            s.materialize_container(&id, destination)?;
            Ok(Reply::new(
                format!(
                    "materialized {id} into {}\nworking directory: {}\ncommand: {}",
                    destination.display(),
                    manifest.working_dir.display(),
                    manifest.command.join(" ")
                ),
                json!({ "execution_id": id, "destination": destination, "working_dir": manifest.working_dir, "command": manifest.command }),
            ))
        }
        Command::Graph {
            execution,
            replete,
            expand,
            serve,
            server,
            ..
        } => {
            let s = open(&cfg)?;
            let view = if *replete { GraphView::Replete } else { GraphView::Summary };
            let bytes = graph_json(&s, execution, view, expand)?;
            if *serve {
                return serve_api(&cfg, &s, server, Some(&s.resolve(execution)?));
            }
            out.write_all(&bytes)
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::storage("writing the graph", e))?;
            Ok(Reply::new(String::new(), Value::Null))
        }
        Command::Serve { server } => {
            let s = open(&cfg)?;
            serve_api(&cfg, &s, server, None)
        }
        Command::Push { executions, .. } => {
            let s = open(&cfg)?;
            let ids = executions.iter().map(|e| s.resolve(e)).collect::<Result<Vec<_>>>()?;
            let pushed = RepositoryClient::new(cfg.repository()?).push(&s, &ids)?;
            Ok(Reply::new(
                format!("pushed {} executions ({} bytes)\n{}", pushed.executions.len(), pushed.bytes, pushed.url),
                to_value(&pushed),
            ))
        }
        Command::Pull { reference, .. } => {
            let mut s = open(&cfg)?;
            let base = cfg.repository_url.clone().unwrap_or_default();
            if base.is_empty() && !reference.contains("://") {
                cfg.repository()?;
            }
            let pulled = RepositoryClient::new(&base).pull(&mut s, reference)?;
            Ok(Reply::new(
                format!("pulled {} executions from {}", pulled.executions.len(), pulled.url),
                to_value(&pulled),
            ))
        }
        Command::Export { executions, output } => {
            let s = open(&cfg)?;
            let ids = executions.iter().map(|e| s.resolve(e)).collect::<Result<Vec<_>>>()?;
            let file = fs::File::create(output).map_err(|e| Error::storage(format!("creating {}", output.display()), e))?;
            let summary = export_bundle(&s, &ids, std::io::BufWriter::new(file))?;
            let digest = Digest::of(&fs::read(output).map_err(|e| Error::storage("reading the bundle", e))?);
            Ok(Reply::new(
                format!("wrote {} ({} bytes, sha256 {})", output.display(), summary.bundle_bytes, digest.to_hex()),
                json!({ "path": output, "digest": digest.to_hex(), "summary": summary }),
            ))
        }
        Command::Import { bundle } => {
            let mut s = open(&cfg)?;
            let file = fs::File::open(bundle).map_err(|e| Error::storage(format!("opening {}", bundle.display()), e))?;
            let manifests = import_bundle(&mut s, BufReader::new(file))?;
            let ids: Vec<&str> = manifests.iter().map(|m| m.execution_id.as_str()).collect();
            Ok(Reply::new(format!("imported {} executions", ids.len()), json!({ "executions": ids })))
        }
        Command::Deps { action } => {
            let mut s = open(&cfg)?;
            match action {
                DepsAction::Add { path } => {
                    let abs = if path.is_absolute() { path.clone() } else { current_dir()?.join(path) };
                    s.add_extra_dep(&abs)?;
                }
                DepsAction::Clear => s.clear_extra_deps()?,
                DepsAction::List => {}
            }
            let deps = &s.meta().extra_deps;
            let text = deps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n");
            Ok(Reply::new(text, json!({ "extra_deps": deps })))
        }
        Command::Config { action: ConfigAction::Show } => {
            let text = format!(
                "config_file = {}\nsciunit_root = {}\nsciunit = {}\nbackend = {}\nrepository_url = {}\napi_port = {}\nchunk.window_len = {}\nchunk.boundary_bits = {}\nchunk.min_chunk = {}\nchunk.max_chunk = {}",
                cfg.config_file.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "(none)".into()),
                cfg.sciunit_root.display(),
                cfg.current_sciunit().unwrap_or_else(|_| "(none)".into()),
                cfg.backend.name(),
                cfg.repository_url.as_deref().unwrap_or("(none)"),
                cfg.api_port,
                cfg.chunk.window_len,
                cfg.chunk.boundary_bits,
                cfg.chunk.min_chunk,
                cfg.chunk.max_chunk,
            );
            Ok(Reply::new(text, to_value(&cfg)))
        }
        Command::Repo {
            action: RepoAction::Serve { dir, server },
        } => {
            fs::create_dir_all(dir).map_err(|e| Error::storage(format!("creating {}", dir.display()), e))?;
            let addr = SocketAddr::new(server.bind, cfg.api_port);
            serve_forever(repository_router(dir.clone()), addr, |a| {
                eprintln!("serving bundles from {} at http://{a}/bundles", dir.display())
            })?;
            Ok(Reply::new(String::new(), Value::Null))
        }
    }
}

fn read_trace(path: &Path, format: TraceFormat, workdir: Option<&Path>) -> Result<Vec<TraceEvent>> {
    let file = fs::File::open(path).map_err(|e| Error::storage(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);
    match format {
        TraceFormat::Ndjson => read_ndjson(reader),
        TraceFormat::Strace => {
            let opts = StraceOptions {
                initial_cwd: workdir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("/")),
                ..Default::default()
            };
            let (events, report) = parse_strace_text(reader, opts)?;
            if report.garbage > 0 {
                log::warn!("{} unparseable lines, first at {:?}", report.garbage, report.garbage_lines);
            }
            Ok(events)
        }
    }
}

fn package_reply(p: &PackageOutcome) -> Reply {
    let m = &p.commit.manifest;
    let mut text = format!(
        "e{} {}\n{} processes, {} dependencies, {} files copied, {} bytes archived, {} new bytes stored",
        p.commit.ordinal,
        m.execution_id,
        p.processes,
        p.dependencies,
        p.sandbox.copied.len(),
        p.commit.archive_bytes,
        p.commit.new_bytes,
    );
    if p.commit.already_present {
        text.push_str("\nidentical to an existing execution; nothing new recorded");
    }
    if !p.sandbox.missing.is_empty() {
        text.push_str(&format!("\n{} dependencies were missing", p.sandbox.missing.len()));
    }
    Reply::new(
        text,
        json!({
            "alias": format!("e{}", p.commit.ordinal),
            "execution_id": m.execution_id,
            "already_present": p.commit.already_present,
            "processes": p.processes,
            "dependencies": p.dependencies,
            "copied": p.sandbox.copied.len(),
            "missing": p.sandbox.missing,
            "external": p.sandbox.external,
            "archive_bytes": p.commit.archive_bytes,
            "new_chunks": p.commit.new_chunks,
            "new_bytes": p.commit.new_bytes,
        }),
    )
}

fn repeat_reply(r: &RepeatReport) -> Reply {
    let mut lines = vec![
        format!("execution  {}", r.execution_id),
        format!("backend    {}", r.backend),
        format!("exit       {}", r.exit_status),
        format!("sandbox    {}", r.sandbox.display()),
    ];
    for c in &r.entry_commands {
        lines.push(format!("ran        {}", c.join(" ")));
    }
    for o in &r.outputs {
        lines.push(format!("{} {}", if o.matches { "same      " } else { "DIFFERENT " }, o.path.display()));
    }
    for p in &r.paths_missing {
        lines.push(format!("missing    {}", p.display()));
    }
    for w in &r.warnings {
        lines.push(format!("warning    {w}"));
    }
    Reply {
        text: lines.join("\n"),
        json: to_value(r),
        exit_code: if r.success() { 0 } else { 1 },
    }
}

fn audit(cfg: &Config, output: Option<&Path>, command: &[String]) -> Result<Reply> {
    let events = live_trace(command)?;
    let bytes = to_ndjson(&events);
    let (deps, log) = ingest_trace(events)?;
    let graph = build_graph(&log)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let s = open(cfg)?;
            let dir = s.dir().join("audits");
            fs::create_dir_all(&dir).map_err(|e| Error::storage(format!("creating {}", dir.display()), e))?;
            dir.join(format!("{}.ndjson", &Digest::of(&bytes).to_hex()[..16]))
        }
    };
    fs::write(&path, &bytes).map_err(|e| Error::storage(format!("writing {}", path.display()), e))?;
    let processes = log.processes().len();
    Ok(Reply::new(
        format!(
            "{processes} processes, {} dependencies, {} graph nodes, {} edges\nlog written to {}",
            deps.len(),
            graph.nodes().len(),
            graph.edges().len(),
            path.display()
        ),
        json!({
            "log": path,
            "processes": processes,
            "dependencies": deps.len(),
            "nodes": graph.nodes().len(),
            "edges": graph.edges().len(),
        }),
    ))
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn live_trace(command: &[String]) -> Result<Vec<TraceEvent>> {
    use sciunit_core::auditor::live::{trace_command, TraceOptions};
    Ok(trace_command(&TraceOptions::new(command.to_vec(), current_dir()?))?.events)
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn live_trace(_: &[String]) -> Result<Vec<TraceEvent>> {
    Err(Error::BackendUnavailable(
        "live auditing needs Linux on x86_64; record a trace elsewhere and use `ingest`".into(),
    ))
}

fn serve_api(cfg: &Config, s: &Sciunit, server: &ServerArgs, focus: Option<&str>) -> Result<Reply> {
    let state = Arc::new(ApiState::new(
        cfg.sciunit_root.clone(),
        s.name().to_string(),
        cfg.backend,
        server.static_dir.clone(),
    ));
    let addr = SocketAddr::new(server.bind, cfg.api_port);
    serve_forever(api::router(state), addr, |a| match focus {
        Some(id) => eprintln!("serving {} at http://{a}/ (graph: http://{a}/api/graph/{id})", s.name()),
        None => eprintln!("serving {} at http://{a}/", s.name()),
    })?;
    Ok(Reply::new(String::new(), Value::Null))
}

/// Remediation shown with errors of each class.
pub fn hint(e: &Error) -> Option<&'static str> {
    match e {
        Error::BackendUnavailable(_) => Some(
            "process tracing is unavailable here; record a trace on a host that allows it and use `sciunit ingest`, or repeat with `--backend portable`",
        ),
        Error::Config(_) => Some("see `sciunit config show`"),
        _ => None,
    }
}
