//! Turns an ordered trace-event stream into a dependency set and an
//! interaction log with logical time intervals.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trace::{EventKind, Pid, TraceEvent};
use crate::container::normalize_absolute;
use crate::error::{Error, Result};

/// How an execution used a path. Ordered by precedence: a path that was both
/// read and written is recorded as written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Read,
    Executed,
    Written,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencySet {
    entries: BTreeMap<PathBuf, Role>,
}

impl DependencySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `role` for `path`, keeping the strongest role seen.
    pub fn insert(&mut self, path: PathBuf, role: Role) {
        let slot = self.entries.entry(path).or_insert(role);
        if role > *slot {
            *slot = role;
        }
    }

    pub fn get(&self, path: &Path) -> Option<Role> {
        self.entries.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PathBuf, Role)> {
        self.entries.iter().map(|(p, r)| (p, *r))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_role(&self, role: Role) -> Vec<PathBuf> {
        self.iter().filter(|(_, r)| *r == role).map(|(p, _)| p.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecRecord {
    pub seq: u64,
    pub path: PathBuf,
    pub argv: Vec<String>,
}

/// One process lifetime. Pids may be reused once a process exits, so
/// processes are addressed by their index in [`InteractionLog::processes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessRecord {
    pub pid: Pid,
    /// Number of earlier processes in the log that used the same pid.
    pub generation: u32,
    pub parent: Option<usize>,
    pub start_seq: u64,
    pub end_seq: u64,
    pub exited: bool,
    /// Program and argv inherited from the parent at fork time.
    pub inherited: Option<ExecRecord>,
    pub execs: Vec<ExecRecord>,
}

impl ProcessRecord {
    /// The program image the process ended up running.
    pub fn current_image(&self) -> Option<&ExecRecord> {
        self.execs.last().or(self.inherited.as_ref())
    }

    pub fn argv(&self) -> Vec<String> {
        self.current_image().map(|e| e.argv.clone()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "id")]
pub enum Object {
    File(PathBuf),
    Process(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    Exec,
    Spawn,
}

/// A subject process touching an object over the closed range `[start, end]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Interaction {
    pub subject: usize,
    pub object: Object,
    pub access: Access,
    pub start: u64,
    pub end: u64,
}

/// Interaction ranges as (access, start, end), keyed by (subject, object).
pub type IntervalMap = BTreeMap<(usize, Object), Vec<(Access, u64, u64)>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InteractionLog {
    events: Vec<TraceEvent>,
    processes: Vec<ProcessRecord>,
    interactions: Vec<Interaction>,
    unmatched_closes: usize,
}

impl InteractionLog {
    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn processes(&self) -> &[ProcessRecord] {
        &self.processes
    }

    /// Interactions ordered by start time.
    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn root(&self) -> Option<usize> {
        if self.processes.is_empty() {
            None
        } else {
            Some(0)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Close events that matched no open interval.
    pub fn unmatched_closes(&self) -> usize {
        self.unmatched_closes
    }

    /// Interaction ranges grouped by (subject, object).
    pub fn intervals(&self) -> IntervalMap {
        let mut out = IntervalMap::new();
        for i in &self.interactions {
            out.entry((i.subject, i.object.clone()))
                .or_default()
                .push((i.access, i.start, i.end));
        }
        out
    }
}

const OPEN_END: u64 = u64::MAX;

struct Builder {
    deps: DependencySet,
    log: InteractionLog,
    live: HashMap<Pid, usize>,
    generations: HashMap<Pid, u32>,
    /// Per process: indices of interactions still open (file reads/writes).
    open_files: Vec<Vec<usize>>,
    /// Per process: index of its running exec interaction.
    running_exec: Vec<Option<usize>>,
    /// Per process: index of the spawn interaction naming its parent.
    spawn_edge: Vec<Option<usize>>,
}

impl Builder {
    fn new_process(&mut self, pid: Pid, parent: Option<usize>, seq: u64) -> usize {
        let generation = {
            let g = self.generations.entry(pid).or_insert(0);
            let cur = *g;
            *g += 1;
            cur
        };
        let inherited = parent.and_then(|p| self.log.processes[p].current_image().cloned());
        let idx = self.log.processes.len();
        self.log.processes.push(ProcessRecord {
            pid,
            generation,
            parent,
            start_seq: seq,
            end_seq: OPEN_END,
            exited: false,
            inherited,
            execs: Vec::new(),
        });
        self.open_files.push(Vec::new());
        self.running_exec.push(None);
        self.spawn_edge.push(None);
        if let Some(parent) = parent {
            self.spawn_edge[idx] = Some(self.push(idx, Object::Process(parent), Access::Spawn, seq));
        }
        self.live.insert(pid, idx);
        idx
    }

    fn push(&mut self, subject: usize, object: Object, access: Access, start: u64) -> usize {
        self.log.interactions.push(Interaction {
            subject,
            object,
            access,
            start,
            end: OPEN_END,
        });
        self.log.interactions.len() - 1
    }

    fn end_process(&mut self, proc_idx: usize, seq: u64) {
        for i in std::mem::take(&mut self.open_files[proc_idx]) {
            self.log.interactions[i].end = seq;
        }
        if let Some(i) = self.running_exec[proc_idx].take() {
            self.log.interactions[i].end = seq;
        }
        if let Some(i) = self.spawn_edge[proc_idx] {
            self.log.interactions[i].end = seq;
        }
        self.log.processes[proc_idx].end_seq = seq;
    }
}

fn event_path(ev: &TraceEvent, position: usize) -> Result<PathBuf> {
    let raw = ev.path.as_deref().ok_or_else(|| Error::Parse {
        line: position,
        message: format!("{:?} event without a path", ev.kind),
    })?;
    let p = Path::new(raw);
    if !p.is_absolute() {
        return Err(Error::Parse {
            line: position,
            message: format!("path {raw:?} is not absolute"),
        });
    }
    Ok(normalize_absolute(p))
}

/// Builds the dependency set and interaction log for an ordered event stream.
///
/// Errors: a malformed event is a parse error naming its 1-based position in
/// the stream; non-increasing `seq`, a fork naming an unknown parent, or an
/// event from a pid that was never introduced is a log inconsistency.
pub fn ingest_trace(events: impl IntoIterator<Item = TraceEvent>) -> Result<(DependencySet, InteractionLog)> {
    let mut b = Builder {
        deps: DependencySet::new(),
        log: InteractionLog::default(),
        live: HashMap::new(),
        generations: HashMap::new(),
        open_files: Vec::new(),
        running_exec: Vec::new(),
        spawn_edge: Vec::new(),
    };
    let mut last_seq: Option<u64> = None;

    for (i, ev) in events.into_iter().enumerate() {
        let position = i + 1;
        let seq = ev.seq;
        if last_seq.is_some_and(|prev| seq <= prev) {
            return Err(Error::LogInconsistency {
                seq,
                message: format!("seq does not increase (previous {})", last_seq.unwrap()),
            });
        }
        last_seq = Some(seq);
        let inconsistent = |message: String| Error::LogInconsistency { seq, message };

        let proc_idx = match (b.live.get(&ev.pid).copied(), ev.kind) {
            (Some(_), EventKind::Fork) => {
                return Err(inconsistent(format!("fork announces pid {} which is still running", ev.pid)));
            }
            (Some(idx), _) => idx,
            (None, EventKind::Fork | EventKind::Exec) if ev.parent_pid.is_some() => {
                let parent_pid = ev.parent_pid.unwrap();
                let parent = *b
                    .live
                    .get(&parent_pid)
                    .ok_or_else(|| inconsistent(format!("pid {} names unknown parent {parent_pid}", ev.pid)))?;
                b.new_process(ev.pid, Some(parent), seq)
            }
            (None, EventKind::Fork) => {
                return Err(Error::Parse {
                    line: position,
                    message: "fork event without parent_pid".into(),
                });
            }
            (None, _) if b.log.processes.is_empty() => b.new_process(ev.pid, None, seq),
            (None, _) => {
                return Err(inconsistent(format!("pid {} appears without a fork or exec from its parent", ev.pid)));
            }
        };

        match ev.kind {
            EventKind::Fork => {}
            EventKind::Exec => {
                let path = event_path(&ev, position)?;
                if let Some(prev) = b.running_exec[proc_idx].take() {
                    b.log.interactions[prev].end = seq;
                }
                let argv = ev.argv.clone().unwrap_or_else(|| vec![path.to_string_lossy().into_owned()]);
                b.log.processes[proc_idx].execs.push(ExecRecord {
                    seq,
                    path: path.clone(),
                    argv,
                });
                let idx = b.push(proc_idx, Object::File(path.clone()), Access::Exec, seq);
                b.running_exec[proc_idx] = Some(idx);
                b.deps.insert(path, Role::Executed);
            }
            EventKind::OpenRead | EventKind::OpenWrite => {
                let path = event_path(&ev, position)?;
                let (access, role) = if ev.kind == EventKind::OpenRead {
                    (Access::Read, Role::Read)
                } else {
                    (Access::Write, Role::Written)
                };
                let idx = b.push(proc_idx, Object::File(path.clone()), access, seq);
                b.open_files[proc_idx].push(idx);
                b.deps.insert(path, role);
            }
            EventKind::Close => {
                let target = match &ev.path {
                    Some(_) => Some(event_path(&ev, position)?),
                    None => None,
                };
                let open = &mut b.open_files[proc_idx];
                let hit = target.and_then(|path| {
                    open.iter()
                        .rposition(|&i| b.log.interactions[i].object == Object::File(path.clone()))
                });
                match hit {
                    Some(pos) => {
                        let i = open.remove(pos);
                        b.log.interactions[i].end = seq;
                    }
                    None => b.log.unmatched_closes += 1,
                }
            }
            EventKind::Exit => {
                b.log.processes[proc_idx].exited = true;
                b.end_process(proc_idx, seq);
                b.live.remove(&ev.pid);
            }
        }
        b.log.events.push(ev);
    }

    let last = last_seq.unwrap_or(0);
    let still_live: Vec<usize> = b.live.values().copied().collect();
    for idx in still_live {
        b.end_process(idx, last);
    }
    debug_assert!(b.log.interactions.iter().all(|i| i.end != OPEN_END));
    Ok((b.deps, b.log))
}
