//! Live tracing backend built on ptrace (Linux x86_64).
//!
//! Runs a command under syscall tracing and records canonical events. With a
//! redirect root set, absolute path arguments that resolve inside that root
//! are rewritten in the tracee before the kernel sees them.

#![allow(non_upper_case_globals)]

use std::collections::{HashMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};

use nix::errno::Errno;
use nix::sys::ptrace;
use nix::sys::signal::Signal;
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid as NixPid;

use super::trace::{EventKind, Pid, TraceEvent};
use crate::container::normalize_absolute;
use crate::error::{Error, Result};

const MAX_STRING: usize = 4096;
const MAX_ARGV: usize = 4096;
const RED_ZONE: u64 = 128;
const MAX_LINK_HOPS: usize = 40;
const NEVER_REDIRECT: [&str; 3] = ["/proc", "/sys", "/dev"];

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    /// Full environment for the command; `None` inherits the caller's.
    pub env: Option<Vec<(String, String)>>,
    /// Sandbox root that absolute paths are redirected into.
    pub redirect_root: Option<PathBuf>,
    /// Discard the command's standard output and error.
    pub quiet: bool,
    /// Executable to start; `None` resolves `argv[0]` against `PATH`.
    pub program: Option<PathBuf>,
}

impl TraceOptions {
    pub fn new(argv: Vec<String>, cwd: impl Into<PathBuf>) -> Self {
        TraceOptions {
            argv,
            cwd: cwd.into(),
            env: None,
            redirect_root: None,
            quiet: false,
            program: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TracedRun {
    pub events: Vec<TraceEvent>,
    /// Exit code of the root process, or 128 + signal number.
    pub exit_status: i32,
}

/// Locates `program` the way `execvp` would.
pub fn resolve_program(program: &str, cwd: &Path, path_var: Option<&str>) -> Option<PathBuf> {
    if program.contains('/') {
        let p = Path::new(program);
        return Some(if p.is_absolute() {
            normalize_absolute(p)
        } else {
            normalize_absolute(&cwd.join(p))
        });
    }
    let path_var = path_var.map(str::to_string).or_else(|| std::env::var("PATH").ok())?;
    path_var.split(':').filter(|d| !d.is_empty()).find_map(|dir| {
        let dir = Path::new(dir);
        let dir = if dir.is_absolute() { dir.to_path_buf() } else { cwd.join(dir) };
        let candidate = dir.join(program);
        let meta = fs::metadata(&candidate).ok()?;
        use std::os::unix::fs::PermissionsExt;
        (meta.is_file() && meta.permissions().mode() & 0o111 != 0).then(|| normalize_absolute(&candidate))
    })
}

/// Resolves `logical` inside `root`, following symlinks with absolute targets
/// re-rooted. The final component need not exist.
pub fn resolve_in_root(root: &Path, logical: &Path) -> Option<PathBuf> {
    let mut pending: Vec<OsString> = components(logical);
    pending.reverse();
    let mut cur = PathBuf::from("/");
    let mut hops = 0;
    while let Some(name) = pending.pop() {
        cur.push(&name);
        let host = root.join(cur.strip_prefix("/").unwrap());
        match fs::symlink_metadata(&host) {
            Ok(meta) if meta.file_type().is_symlink() => {
                hops += 1;
                if hops > MAX_LINK_HOPS {
                    return None;
                }
                let target = fs::read_link(&host).ok()?;
                cur.pop();
                let resolved = normalize_absolute(&cur.join(target));
                let mut rest = components(&resolved);
                rest.reverse();
                pending.extend(rest);
                cur = PathBuf::from("/");
            }
            Ok(_) => {}
            Err(_) if pending.is_empty() => {}
            Err(_) => return None,
        }
    }
    Some(root.join(cur.strip_prefix("/").unwrap()))
}

fn components(p: &Path) -> Vec<OsString> {
    normalize_absolute(p)
        .components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_os_string()),
            _ => None,
        })
        .collect()
}

fn backend_unavailable(what: &str, e: impl std::fmt::Display) -> Error {
    Error::BackendUnavailable(format!("{what}: {e}"))
}

/// Register slots carrying path arguments, by syscall number.
fn path_slots(nr: i64) -> &'static [usize] {
    use libc::*;
    match nr {
        SYS_open | SYS_creat | SYS_execve | SYS_stat | SYS_lstat | SYS_access | SYS_readlink | SYS_chdir
        | SYS_mkdir | SYS_rmdir | SYS_unlink | SYS_truncate | SYS_chmod | SYS_chown | SYS_lchown | SYS_utimes
        | SYS_statfs => &[0],
        SYS_rename | SYS_link => &[0, 1],
        SYS_symlink => &[1],
        SYS_openat | SYS_openat2 | SYS_execveat | SYS_newfstatat | SYS_faccessat | SYS_faccessat2
        | SYS_readlinkat | SYS_mkdirat | SYS_unlinkat | SYS_fchmodat | SYS_fchownat | SYS_utimensat | SYS_statx
        | SYS_mknodat => &[1],
        SYS_renameat | SYS_renameat2 | SYS_linkat => &[1, 3],
        SYS_symlinkat => &[2],
        _ => &[],
    }
}

fn arg(regs: &libc::user_regs_struct, slot: usize) -> u64 {
    match slot {
        0 => regs.rdi,
        1 => regs.rsi,
        2 => regs.rdx,
        3 => regs.r10,
        4 => regs.r8,
        _ => regs.r9,
    }
}

fn set_arg(regs: &mut libc::user_regs_struct, slot: usize, v: u64) {
    match slot {
        0 => regs.rdi = v,
        1 => regs.rsi = v,
        2 => regs.rdx = v,
        3 => regs.r10 = v,
        4 => regs.r8 = v,
        _ => regs.r9 = v,
    }
}

fn read_word(pid: NixPid, addr: u64) -> Option<u64> {
    ptrace::read(pid, addr as ptrace::AddressType).ok().map(|w| w as u64)
}

fn read_cstring(pid: NixPid, addr: u64) -> Option<Vec<u8>> {
    if addr == 0 {
        return None;
    }
    let mut out = Vec::new();
    let mut a = addr;
    while out.len() < MAX_STRING {
        let word = read_word(pid, a)?.to_ne_bytes();
        for b in word {
            if b == 0 {
                return Some(out);
            }
            out.push(b);
        }
        a += 8;
    }
    Some(out)
}

fn read_argv(pid: NixPid, addr: u64) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut a = addr;
    while out.len() < MAX_ARGV {
        let p = read_word(pid, a)?;
        if p == 0 {
            return Some(out);
        }
        out.push(String::from_utf8_lossy(&read_cstring(pid, p)?).into_owned());
        a += 8;
    }
    Some(out)
}

fn write_bytes(pid: NixPid, addr: u64, bytes: &[u8]) -> Option<()> {
    for (i, chunk) in bytes.chunks(8).enumerate() {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        ptrace::write(
            pid,
            (addr + 8 * i as u64) as ptrace::AddressType,
            i64::from_ne_bytes(word) as libc::c_long,
        )
        .ok()?;
    }
    Some(())
}

fn tgid_of(tid: Pid) -> Option<Pid> {
    let status = fs::read_to_string(format!("/proc/{tid}/status")).ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("Tgid:"))
        .and_then(|v| v.trim().parse().ok())
}

#[derive(Debug, Default)]
struct Entry {
    nr: i64,
    path: Option<PathBuf>,
    argv: Option<Vec<String>>,
    write: bool,
    directory: bool,
    fd: i64,
}

struct Tracer {
    redirect_root: Option<PathBuf>,
    events: Vec<TraceEvent>,
    seq: u64,
    /// Thread id to thread-group leader.
    threads: HashMap<Pid, Pid>,
    in_syscall: HashMap<Pid, Option<Entry>>,
    fds: HashMap<Pid, HashMap<i64, PathBuf>>,
    alive: HashSet<Pid>,
    /// Auto-attached tasks whose creating event has not been seen yet.
    stopped_early: HashSet<Pid>,
    /// Tasks whose creating event was seen but whose initial stop was not.
    awaiting_stop: HashSet<Pid>,
    known_processes: HashSet<Pid>,
}

impl Tracer {
    fn tgid(&self, tid: Pid) -> Pid {
        *self.threads.get(&tid).unwrap_or(&tid)
    }

    fn emit(&mut self, pid: Pid, kind: EventKind, path: Option<&Path>) -> &mut TraceEvent {
        self.seq += 1;
        let mut ev = TraceEvent::new(self.seq, pid, kind);
        if let Some(p) = path {
            ev.path = Some(p.to_string_lossy().into_owned());
        }
        self.events.push(ev);
        self.events.last_mut().unwrap()
    }

    /// Maps a host path back to the path the program believes it used.
    fn logical(&self, p: &Path) -> PathBuf {
        match &self.redirect_root {
            Some(root) => match p.strip_prefix(root) {
                Ok(rest) => Path::new("/").join(rest),
                Err(_) => p.to_path_buf(),
            },
            None => p.to_path_buf(),
        }
    }

    fn absolute(&self, tid: Pid, dirfd: Option<i64>, raw: &[u8]) -> PathBuf {
        let p = Path::new(std::ffi::OsStr::from_bytes(raw));
        if p.is_absolute() {
            return normalize_absolute(p);
        }
        let base = match dirfd {
            Some(fd) if fd != libc::AT_FDCWD as i64 => fs::read_link(format!("/proc/{tid}/fd/{fd}")),
            _ => fs::read_link(format!("/proc/{tid}/cwd")),
        }
        .unwrap_or_else(|_| PathBuf::from("/"));
        normalize_absolute(&base.join(p))
    }

    fn redirect_target(&self, raw: &[u8]) -> Option<PathBuf> {
        let root = self.redirect_root.as_ref()?;
        let p = Path::new(std::ffi::OsStr::from_bytes(raw));
        if !p.is_absolute() || p.starts_with(root) || NEVER_REDIRECT.iter().any(|r| p.starts_with(r)) {
            return None;
        }
        let mapped = resolve_in_root(root, p)?;
        let parent_ok = mapped.parent().is_some_and(|d| d.is_dir() && d.starts_with(root) && d != root.as_path());
        (fs::symlink_metadata(&mapped).is_ok() || parent_ok).then_some(mapped)
    }

    fn on_entry(&mut self, tid: NixPid) -> Entry {
        let Ok(mut regs) = ptrace::getregs(tid) else {
            return Entry::default();
        };
        let nr = regs.orig_rax as i64;
        let mut entry = Entry {
            nr,
            ..Entry::default()
        };
        let slots = path_slots(nr);
        if self.redirect_root.is_some() && !slots.is_empty() {
            let mut sp = regs.rsp.saturating_sub(RED_ZONE);
            let mut changed = false;
            for &slot in slots {
                let Some(raw) = read_cstring(tid, arg(&regs, slot)) else {
                    continue;
                };
                if let Some(target) = self.redirect_target(&raw) {
                    let mut bytes = target.as_os_str().as_bytes().to_vec();
                    bytes.push(0);
                    sp = (sp - bytes.len() as u64) & !7;
                    if write_bytes(tid, sp, &bytes).is_some() {
                        set_arg(&mut regs, slot, sp);
                        changed = true;
                    }
                }
            }
            if changed {
                let _ = ptrace::setregs(tid, regs);
            }
        }
        let raw_tid = tid.as_raw() as Pid;
        use libc::*;
        match nr {
            SYS_open | SYS_creat | SYS_openat | SYS_openat2 => {
                let (dirfd, slot) = if nr == SYS_open || nr == SYS_creat { (None, 0) } else { (Some(regs.rdi as i32 as i64), 1) };
                let flags: u64 = match nr {
                    SYS_open => regs.rsi,
                    SYS_creat => (O_WRONLY | O_CREAT | O_TRUNC) as u64,
                    SYS_openat => regs.rdx,
                    _ => read_word(tid, regs.rdx).unwrap_or(0),
                };
                let flags = flags as i32;
                entry.write = flags & O_ACCMODE != O_RDONLY || flags & (O_CREAT | O_TRUNC) != 0;
                entry.directory = flags & O_DIRECTORY != 0;
                if let Some(raw) = read_cstring(tid, arg(&regs, slot)) {
                    entry.path = Some(self.absolute(raw_tid, dirfd, &raw));
                }
            }
            SYS_execve | SYS_execveat => {
                let (dirfd, slot) = if nr == SYS_execve { (None, 0) } else { (Some(regs.rdi as i32 as i64), 1) };
                if let Some(raw) = read_cstring(tid, arg(&regs, slot)) {
                    entry.path = Some(self.absolute(raw_tid, dirfd, &raw));
                }
                entry.argv = read_argv(tid, arg(&regs, slot + 1));
            }
            SYS_close => entry.fd = regs.rdi as i32 as i64,
            _ => {}
        }
        entry
    }

    fn on_exit(&mut self, tid: NixPid, entry: Entry) {
        let Ok(regs) = ptrace::getregs(tid) else {
            return;
        };
        let ret = regs.rax as i64;
        let pid = self.tgid(tid.as_raw() as Pid);
        use libc::*;
        match entry.nr {
            SYS_open | SYS_creat | SYS_openat | SYS_openat2 if ret >= 0 => {
                let Some(path) = entry.path else { return };
                let path = self.logical(&path);
                self.fds.entry(pid).or_default().insert(ret, path.clone());
                if entry.directory && !entry.write {
                    return;
                }
                let kind = if entry.write { EventKind::OpenWrite } else { EventKind::OpenRead };
                self.emit(pid, kind, Some(&path));
            }
            SYS_close if ret == 0 => {
                if let Some(path) = self.fds.get_mut(&pid).and_then(|m| m.remove(&entry.fd)) {
                    self.emit(pid, EventKind::Close, Some(&path));
                }
            }
            SYS_execve | SYS_execveat if ret == 0 => {
                let Some(path) = entry.path else { return };
                let path = self.logical(&path);
                let argv = entry.argv.unwrap_or_else(|| vec![path.to_string_lossy().into_owned()]);
                self.record_exec(pid, &path, argv);
            }
            _ => {}
        }
    }

    /// Records an exec plus the program images the kernel loaded without an
    /// open call: a script's interpreter and the ELF dynamic loader.
    fn record_exec(&mut self, pid: Pid, path: &Path, argv: Vec<String>) {
        self.emit(pid, EventKind::Exec, Some(path)).argv = Some(argv);
        let canonical = fs::canonicalize(path).ok();
        let mut implicit: Vec<PathBuf> = Vec::new();
        if let Ok(exe) = fs::read_link(format!("/proc/{pid}/exe")) {
            if Some(&exe) != canonical.as_ref() {
                implicit.push(exe.clone());
            }
            if let Ok(maps) = fs::read_to_string(format!("/proc/{pid}/maps")) {
                for line in maps.lines() {
                    let Some(idx) = line.find(" /") else { continue };
                    let mapped = PathBuf::from(line[idx + 1..].trim());
                    if mapped != exe && Some(&mapped) != canonical.as_ref() && !implicit.contains(&mapped) {
                        implicit.push(mapped);
                    }
                }
            }
        }
        for p in implicit {
            let p = self.logical(&p);
            self.emit(pid, EventKind::OpenRead, Some(&p));
            self.emit(pid, EventKind::Close, Some(&p));
        }
    }

    fn on_new_task(&mut self, parent_tid: NixPid, new: Pid) {
        let parent = self.tgid(parent_tid.as_raw() as Pid);
        let is_thread = tgid_of(new).is_some_and(|g| g != new);
        if is_thread {
            self.threads.insert(new, parent);
        } else {
            self.known_processes.insert(new);
            if let Some(fds) = self.fds.get(&parent).cloned() {
                self.fds.insert(new, fds);
            }
            self.emit(new, EventKind::Fork, None).parent_pid = Some(parent);
        }
        self.alive.insert(new);
        if self.stopped_early.remove(&new) {
            let _ = ptrace::syscall(NixPid::from_raw(new as i32), None);
        } else {
            self.awaiting_stop.insert(new);
        }
    }

    fn on_gone(&mut self, tid: Pid) {
        self.alive.remove(&tid);
        self.in_syscall.remove(&tid);
        if self.threads.remove(&tid).is_none() && self.known_processes.remove(&tid) {
            self.fds.remove(&tid);
            self.emit(tid, EventKind::Exit, None);
        }
    }
}

/// Runs `opts.argv` to completion under tracing.
///
/// Returns `BackendUnavailable` when the host refuses process tracing.
pub fn trace_command(opts: &TraceOptions) -> Result<TracedRun> {
    let program = opts
        .argv
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty command".into()))?;
    let path_var = opts
        .env
        .as_ref()
        .and_then(|env| env.iter().find(|(k, _)| k == "PATH").map(|(_, v)| v.as_str()));
    let resolved = opts
        .program
        .clone()
        .or_else(|| resolve_program(program, &opts.cwd, path_var))
        .filter(|p| p.is_file())
        .ok_or_else(|| Error::NotFound(format!("program {program}")))?;

    let mut cmd = Command::new(&resolved);
    cmd.arg0(program).args(&opts.argv[1..]).current_dir(&opts.cwd).stdin(Stdio::null());
    if let Some(env) = &opts.env {
        cmd.env_clear().envs(env.iter().map(|(k, v)| (k, v)));
    }
    if opts.quiet {
        cmd.stdout(Stdio::null()).stderr(Stdio::null());
    }
    // SAFETY: traceme is async-signal-safe and touches no shared state.
    unsafe {
        cmd.pre_exec(|| ptrace::traceme().map_err(std::io::Error::from));
    }
    let child = cmd.spawn().map_err(|e| match e.raw_os_error() {
        Some(code) if code == libc::EPERM || code == libc::ENOSYS => backend_unavailable("ptrace refused", e),
        _ => Error::storage(format!("spawning {}", resolved.display()), e),
    })?;
    let root_raw = child.id() as Pid;
    let root = NixPid::from_raw(root_raw as i32);
    let flags = WaitPidFlag::__WALL | WaitPidFlag::__WNOTHREAD;

    match waitpid(root, Some(flags)) {
        Ok(WaitStatus::Stopped(_, Signal::SIGTRAP)) => {}
        Ok(WaitStatus::Exited(_, code)) => {
            return Err(backend_unavailable("traced process exited before its first stop", code));
        }
        Ok(other) => return Err(backend_unavailable("unexpected first stop", format!("{other:?}"))),
        Err(e) => return Err(backend_unavailable("waiting for tracee", e)),
    }
    let options = ptrace::Options::PTRACE_O_TRACESYSGOOD
        | ptrace::Options::PTRACE_O_TRACEFORK
        | ptrace::Options::PTRACE_O_TRACEVFORK
        | ptrace::Options::PTRACE_O_TRACECLONE
        | ptrace::Options::PTRACE_O_TRACEEXEC
        | ptrace::Options::PTRACE_O_EXITKILL;
    if let Err(e) = ptrace::setoptions(root, options) {
        let _ = nix::sys::signal::kill(root, Signal::SIGKILL);
        let _ = waitpid(root, Some(flags));
        return Err(backend_unavailable("setting trace options", e));
    }

    let mut t = Tracer {
        redirect_root: opts.redirect_root.clone(),
        events: Vec::new(),
        seq: 0,
        threads: HashMap::new(),
        in_syscall: HashMap::new(),
        fds: HashMap::new(),
        alive: HashSet::from([root_raw]),
        stopped_early: HashSet::new(),
        awaiting_stop: HashSet::new(),
        known_processes: HashSet::from([root_raw]),
    };
    let root_logical = t.logical(&resolved);
    t.record_exec(root_raw, &root_logical, opts.argv.clone());
    let mut exit_status = 0;
    let _ = ptrace::syscall(root, None);

    while !t.alive.is_empty() {
        let status = match waitpid(None, Some(flags)) {
            Ok(s) => s,
            Err(Errno::EINTR) => continue,
            Err(Errno::ECHILD) => break,
            Err(e) => return Err(Error::Internal(format!("waitpid: {e}"))),
        };
        match status {
            WaitStatus::Exited(pid, code) => {
                if pid == root {
                    exit_status = code;
                }
                t.on_gone(pid.as_raw() as Pid);
            }
            WaitStatus::Signaled(pid, sig, _) => {
                if pid == root {
                    exit_status = 128 + sig as i32;
                }
                t.on_gone(pid.as_raw() as Pid);
            }
            WaitStatus::Stopped(pid, sig) => {
                let raw = pid.as_raw() as Pid;
                if !t.alive.contains(&raw) {
                    t.alive.insert(raw);
                    t.stopped_early.insert(raw);
                } else if sig == Signal::SIGSTOP && t.awaiting_stop.remove(&raw) {
                    let _ = ptrace::syscall(pid, None);
                } else {
                    let _ = ptrace::syscall(pid, Some(sig));
                }
            }
            WaitStatus::PtraceSyscall(pid) => {
                let raw = pid.as_raw() as Pid;
                match t.in_syscall.remove(&raw).flatten() {
                    Some(entry) => t.on_exit(pid, entry),
                    None => {
                        let entry = t.on_entry(pid);
                        t.in_syscall.insert(raw, Some(entry));
                    }
                }
                let _ = ptrace::syscall(pid, None);
            }
            WaitStatus::PtraceEvent(pid, _, event) => {
                if event == libc::PTRACE_EVENT_FORK
                    || event == libc::PTRACE_EVENT_VFORK
                    || event == libc::PTRACE_EVENT_CLONE
                {
                    if let Ok(new) = ptrace::getevent(pid) {
                        t.on_new_task(pid, new as Pid);
                    }
                } else if event == libc::PTRACE_EVENT_EXEC {
                    // A non-leader thread that execs takes over the leader's id.
                    if let Ok(former) = ptrace::getevent(pid) {
                        let former = former as Pid;
                        if former != pid.as_raw() as Pid {
                            t.alive.remove(&former);
                            t.in_syscall.remove(&former);
                            t.threads.remove(&former);
                        }
                    }
                }
                let _ = ptrace::syscall(pid, None);
            }
            _ => {}
        }
    }
    drop(child);
    Ok(TracedRun {
        events: t.events,
        exit_status,
    })
}

/// Checks whether this host permits tracing by tracing `/bin/true` or an
/// equivalent trivial program.
pub fn probe() -> Result<()> {
    let program = ["/bin/true", "/usr/bin/true"]
        .into_iter()
        .find(|p| Path::new(p).is_file())
        .ok_or_else(|| Error::BackendUnavailable("no trivial program to probe with".into()))?;
    let mut opts = TraceOptions::new(vec![program.to_string()], "/");
    opts.quiet = true;
    trace_command(&opts).map(|_| ())
}
