//! Adapter from follow-forks strace text (`strace -f -y`) to trace events.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use super::trace::{EventKind, Pid, TraceEvent};
use crate::container::normalize_absolute;
use crate::error::{IoContext, Result};

#[derive(Debug, Clone)]
pub struct StraceOptions {
    /// Working directory of the first traced process.
    pub initial_cwd: PathBuf,
    /// Pid assigned to lines without a pid prefix.
    pub default_pid: Pid,
}

impl Default for StraceOptions {
    fn default() -> Self {
        StraceOptions {
            initial_cwd: PathBuf::from("/"),
            default_pid: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub lines: usize,
    pub events: usize,
    /// Lines that could not be parsed at all.
    pub garbage: usize,
    /// 1-based line numbers of the first unparseable lines.
    pub garbage_lines: Vec<usize>,
    /// Calls that returned an error and so left no trace.
    pub failed_calls: usize,
    /// Events from pids never introduced by a fork.
    pub orphan_events: usize,
    /// Counts of syscalls not mapped to events.
    pub skipped: BTreeMap<String, usize>,
}

const GARBAGE_SAMPLE: usize = 20;

fn prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?:\[pid\s+(\d+)\]\s*|(\d+)\s+)?(?:\d+(?::\d+:\d+)?(?:\.\d+)?\s+)?(.*)$").unwrap()
    })
}

fn call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([a-z_][a-z0-9_]*)\((.*)$").unwrap())
}

fn resumed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^<\.\.\.\s+([a-z_][a-z0-9_]*)\s+resumed>\s?(.*)$").unwrap())
}

fn result_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*=\s*(-?\d+|0x[0-9a-fA-F]+|\?)").unwrap())
}

/// A completed syscall line.
struct Call {
    name: String,
    args: Vec<String>,
    ret: Option<i64>,
}

/// Splits the text after `name(` into top-level arguments and the remainder
/// after the closing parenthesis. Returns `None` if the parentheses do not
/// balance.
fn split_args(s: &str) -> Option<(Vec<String>, &str)> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut args = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '"' => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
                if i >= bytes.len() {
                    return None;
                }
                cur.push_str(&s[start..=i]);
            }
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            '<' if i > 0 && bytes[i - 1].is_ascii_digit() => {
                let close = s[i..].find('>')?;
                cur.push_str(&s[i..=i + close]);
                i += close;
            }
            ')' | ']' | '}' => {
                if depth == 0 {
                    if c != ')' {
                        return None;
                    }
                    let t = cur.trim();
                    if !t.is_empty() {
                        args.push(t.to_string());
                    }
                    return Some((args, &s[i + 1..]));
                }
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                args.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
        i += 1;
    }
    None
}

/// Decodes a C-style quoted string literal as printed by strace.
fn decode_string(arg: &str) -> Option<String> {
    let arg = arg.trim();
    let inner = arg.strip_prefix('"')?;
    let end = inner.rfind('"')?;
    let inner = &inner[..end];
    let mut out: Vec<u8> = Vec::with_capacity(inner.len());
    let b = inner.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        i += 1;
        let c = *b.get(i)?;
        i += 1;
        match c {
            b'n' => out.push(b'\n'),
            b't' => out.push(b'\t'),
            b'r' => out.push(b'\r'),
            b'v' => out.push(0x0b),
            b'f' => out.push(0x0c),
            b'x' => {
                let hex = inner.get(i..i + 2)?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 2;
            }
            b'0'..=b'7' => {
                let mut v = (c - b'0') as u32;
                let mut n = 1;
                while n < 3 && i < b.len() && (b'0'..=b'7').contains(&b[i]) {
                    v = v * 8 + (b[i] - b'0') as u32;
                    i += 1;
                    n += 1;
                }
                out.push(v as u8);
            }
            other => out.push(other),
        }
    }
    String::from_utf8(out).ok()
}

/// Decodes `["a", "b"]` into its string elements.
fn decode_array(arg: &str) -> Option<Vec<String>> {
    let inner = arg.trim().strip_prefix('[')?.strip_suffix(']')?;
    let wrapped = format!("{inner})");
    let (items, _) = split_args(&wrapped)?;
    items.iter().filter(|s| s.starts_with('"')).map(|s| decode_string(s)).collect()
}

/// The path decoration of a `-y` file-descriptor argument, e.g. `3</etc/x>`.
fn fd_annotation(arg: &str) -> Option<(i64, Option<String>)> {
    let arg = arg.trim();
    let digits: String = arg.chars().take_while(|c| c.is_ascii_digit() || *c == '-').collect();
    let fd: i64 = digits.parse().ok()?;
    let rest = &arg[digits.len()..];
    let path = rest.strip_prefix('<').and_then(|r| r.strip_suffix('>')).map(str::to_string);
    Some((fd, path))
}

fn parse_result(rest: &str) -> Option<Option<i64>> {
    let caps = result_re().captures(rest)?;
    let raw = caps.get(1)?.as_str();
    let ret = if raw == "?" {
        None
    } else if let Some(hex) = raw.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()
    } else {
        raw.parse().ok()
    };
    Some(ret)
}

fn parse_call(body: &str) -> Option<Call> {
    let caps = call_re().captures(body)?;
    let name = caps.get(1)?.as_str().to_string();
    let (args, rest) = split_args(caps.get(2)?.as_str())?;
    let ret = parse_result(rest)?;
    Some(Call { name, args, ret })
}

type Pending = (Pid, EventKind, Option<String>, Option<Pid>, Option<Vec<String>>);

#[derive(Debug, Clone, Default)]
struct ProcState {
    cwd: PathBuf,
    fds: HashMap<i64, PathBuf>,
}

struct Parser {
    opts: StraceOptions,
    report: ParseReport,
    events: Vec<Pending>,
    /// Pids whose events may be emitted.
    known: HashSet<Pid>,
    /// Events from pids seen before their creating fork.
    early: HashMap<Pid, Vec<Pending>>,
    /// Thread id to thread-group leader.
    threads: HashMap<Pid, Pid>,
    state: HashMap<Pid, ProcState>,
    unfinished: HashMap<Pid, String>,
    root: Option<Pid>,
}

impl Parser {
    fn tgid(&self, pid: Pid) -> Pid {
        *self.threads.get(&pid).unwrap_or(&pid)
    }

    fn state(&mut self, pid: Pid) -> &mut ProcState {
        let cwd = self.opts.initial_cwd.clone();
        self.state.entry(pid).or_insert_with(|| ProcState {
            cwd,
            fds: HashMap::new(),
        })
    }

    fn emit(&mut self, pid: Pid, kind: EventKind, path: Option<String>, parent: Option<Pid>, argv: Option<Vec<String>>) {
        let owner = if kind == EventKind::Fork { parent.unwrap_or(pid) } else { pid };
        if self.root.is_none() {
            self.root = Some(owner);
            self.known.insert(owner);
        }
        let ev = (pid, kind, path, parent, argv);
        if self.known.contains(&owner) {
            self.push_known(ev);
        } else {
            self.early.entry(owner).or_default().push(ev);
        }
    }

    /// Appends an event whose process is known; a fork releases the events
    /// its child produced before the fork line appeared.
    fn push_known(&mut self, ev: Pending) {
        let forked = (ev.1 == EventKind::Fork).then_some(ev.0);
        self.events.push(ev);
        if let Some(child) = forked {
            self.known.insert(child);
            for e in self.early.remove(&child).unwrap_or_default() {
                self.push_known(e);
            }
        }
    }

    fn resolve(&mut self, pid: Pid, dirfd: Option<&str>, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            return normalize_absolute(p);
        }
        let base = match dirfd.and_then(fd_annotation) {
            Some((_, Some(dir))) if dir.starts_with('/') => PathBuf::from(dir),
            Some((fd, None)) if fd >= 0 => self
                .state(pid)
                .fds
                .get(&fd)
                .cloned()
                .unwrap_or_else(|| self.state(pid).cwd.clone()),
            _ => self.state(pid).cwd.clone(),
        };
        normalize_absolute(&base.join(p))
    }

    fn line(&mut self, lineno: usize, line: &str) {
        self.report.lines += 1;
        if line.trim().is_empty() {
            return;
        }
        let Some(caps) = prefix_re().captures(line) else {
            self.garbage(lineno);
            return;
        };
        let raw_pid = caps
            .get(1)
            .or(caps.get(2))
            .and_then(|m| m.as_str().parse::<Pid>().ok())
            .unwrap_or(self.opts.default_pid);
        let pid = self.tgid(raw_pid);
        let body = caps.get(3).map_or("", |m| m.as_str()).trim_end();

        if body.starts_with("+++") {
            if body.contains("exited with") || body.contains("killed by") {
                if raw_pid == pid {
                    self.unfinished.remove(&raw_pid);
                    self.emit(pid, EventKind::Exit, None, None, None);
                }
            } else {
                self.garbage(lineno);
            }
            return;
        }
        if body.starts_with("---") {
            return;
        }
        let full = if let Some(rc) = resumed_re().captures(body) {
            let name = rc.get(1).unwrap().as_str();
            let rest = rc.get(2).unwrap().as_str();
            match self.unfinished.remove(&raw_pid) {
                Some(head) if head.starts_with(name) => format!("{head}{rest}"),
                _ => {
                    self.garbage(lineno);
                    return;
                }
            }
        } else if let Some(head) = body.strip_suffix("<unfinished ...>") {
            self.unfinished.insert(raw_pid, head.trim_end().to_string());
            return;
        } else {
            body.to_string()
        };
        match parse_call(&full) {
            Some(call) => self.call(pid, call),
            None => self.garbage(lineno),
        }
    }

    fn garbage(&mut self, lineno: usize) {
        self.report.garbage += 1;
        if self.report.garbage_lines.len() < GARBAGE_SAMPLE {
            self.report.garbage_lines.push(lineno);
        }
        log::warn!("strace line {lineno} could not be parsed");
    }

    fn skip(&mut self, name: &str) {
        *self.report.skipped.entry(name.to_string()).or_default() += 1;
    }

    fn call(&mut self, pid: Pid, call: Call) {
        let ok = call.ret.is_some_and(|r| r >= 0);
        let a = &call.args;
        match call.name.as_str() {
            "open" | "openat" | "openat2" | "creat" => {
                if !ok {
                    self.report.failed_calls += 1;
                    return;
                }
                let (dirfd, path_arg, flags) = match call.name.as_str() {
                    "open" => (None, a.first(), a.get(1).map(String::as_str).unwrap_or("")),
                    "creat" => (None, a.first(), "O_WRONLY|O_CREAT|O_TRUNC"),
                    _ => (a.first().map(String::as_str), a.get(1), a.get(2).map(String::as_str).unwrap_or("")),
                };
                let Some(raw) = path_arg.and_then(|s| decode_string(s)) else {
                    self.skip(&call.name);
                    return;
                };
                let path = self.resolve(pid, dirfd, &raw);
                let write = flags.contains("O_WRONLY") || flags.contains("O_RDWR") || flags.contains("O_CREAT");
                if let Some(fd) = call.ret {
                    self.state(pid).fds.insert(fd, path.clone());
                }
                if flags.contains("O_DIRECTORY") && !write {
                    return;
                }
                let kind = if write { EventKind::OpenWrite } else { EventKind::OpenRead };
                self.emit(pid, kind, Some(path.to_string_lossy().into_owned()), None, None);
            }
            "execve" | "execveat" => {
                if !ok {
                    self.report.failed_calls += 1;
                    return;
                }
                let (dirfd, path_arg, argv_arg) = if call.name == "execve" {
                    (None, a.first(), a.get(1))
                } else {
                    (a.first().map(String::as_str), a.get(1), a.get(2))
                };
                let Some(raw) = path_arg.and_then(|s| decode_string(s)) else {
                    self.skip(&call.name);
                    return;
                };
                let path = self.resolve(pid, dirfd, &raw);
                let argv = argv_arg.and_then(|s| decode_array(s));
                self.state(pid).fds.clear();
                self.emit(pid, EventKind::Exec, Some(path.to_string_lossy().into_owned()), None, argv);
            }
            "clone" | "clone3" | "fork" | "vfork" => {
                let Some(child) = call.ret.filter(|r| *r > 0).map(|r| r as Pid) else {
                    self.report.failed_calls += 1;
                    return;
                };
                if a.iter().any(|s| s.contains("CLONE_THREAD")) {
                    self.threads.insert(child, pid);
                    for (_, kind, path, parent, argv) in self.early.remove(&child).unwrap_or_default() {
                        self.emit(pid, kind, path, parent, argv);
                    }
                    return;
                }
                let inherited = self.state(pid).clone();
                self.state.insert(child, inherited);
                self.emit(child, EventKind::Fork, None, Some(pid), None);
            }
            "close" => {
                if !ok {
                    return;
                }
                let Some((fd, annotated)) = a.first().and_then(|s| fd_annotation(s)) else {
                    return;
                };
                let tracked = self.state(pid).fds.remove(&fd);
                let path = annotated.filter(|p| p.starts_with('/')).map(PathBuf::from).or(tracked);
                if let Some(path) = path {
                    self.emit(pid, EventKind::Close, Some(path.to_string_lossy().into_owned()), None, None);
                }
            }
            "chdir" => {
                if ok {
                    if let Some(raw) = a.first().and_then(|s| decode_string(s)) {
                        let path = self.resolve(pid, None, &raw);
                        self.state(pid).cwd = path;
                    }
                }
            }
            "fchdir" => {
                if ok {
                    if let Some((fd, annotated)) = a.first().and_then(|s| fd_annotation(s)) {
                        let dir = annotated
                            .filter(|p| p.starts_with('/'))
                            .map(PathBuf::from)
                            .or_else(|| self.state(pid).fds.get(&fd).cloned());
                        if let Some(dir) = dir {
                            self.state(pid).cwd = dir;
                        }
                    }
                }
            }
            other => self.skip(other),
        }
    }
}

/// Parses strace text into canonical events. Unparseable lines are counted
/// and skipped; events from processes never introduced by a fork of a known
/// process are dropped and counted as orphans.
pub fn parse_strace_text<R: BufRead>(input: R, opts: StraceOptions) -> Result<(Vec<TraceEvent>, ParseReport)> {
    let mut p = Parser {
        opts,
        report: ParseReport::default(),
        events: Vec::new(),
        known: HashSet::new(),
        early: HashMap::new(),
        threads: HashMap::new(),
        state: HashMap::new(),
        unfinished: HashMap::new(),
        root: None,
    };
    for (i, line) in input.lines().enumerate() {
        let line = line.ctx(|| "reading strace text".into())?;
        p.line(i + 1, &line);
    }
    p.report.orphan_events += p.early.values().map(Vec::len).sum::<usize>();
    let events: Vec<TraceEvent> = p
        .events
        .into_iter()
        .enumerate()
        .map(|(i, (pid, kind, path, parent_pid, argv))| TraceEvent {
            seq: i as u64 + 1,
            pid,
            kind,
            path,
            parent_pid,
            argv,
        })
        .collect();
    p.report.events = events.len();
    Ok((events, p.report))
}
