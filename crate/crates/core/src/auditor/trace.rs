//! Canonical trace events and their NDJSON encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub type Pid = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Exec,
    Fork,
    OpenRead,
    OpenWrite,
    Close,
    Exit,
}

/// One process or file interaction observed during an audited run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub seq: u64,
    pub pid: Pid,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_pid: Option<Pid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argv: Option<Vec<String>>,
}

impl TraceEvent {
    pub fn new(seq: u64, pid: Pid, kind: EventKind) -> Self {
        TraceEvent {
            seq,
            pid,
            kind,
            path: None,
            parent_pid: None,
            argv: None,
        }
    }

    pub fn with_path(mut self, path: impl Into<String>) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn with_parent(mut self, parent: Pid) -> Self {
        self.parent_pid = Some(parent);
        self
    }

    pub fn with_argv<S: Into<String>>(mut self, argv: impl IntoIterator<Item = S>) -> Self {
        self.argv = Some(argv.into_iter().map(Into::into).collect());
        self
    }
}

/// Reads NDJSON events. Blank lines are ignored; line numbers are 1-based.
pub fn read_ndjson<R: BufRead>(reader: R) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.ctx(|| "reading trace".into())?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_ndjson<W: Write>(events: &[TraceEvent], mut out: W) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(|e| Error::Internal(e.to_string()))?;
        out.write_all(b"\n").ctx(|| "writing trace".into())?;
    }
    Ok(())
}

pub fn to_ndjson(events: &[TraceEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    write_ndjson(events, &mut out).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_exactly_the_documented_set() {
        let ev = TraceEvent::new(3, 10, EventKind::Exec)
            .with_path("/bin/sh")
            .with_parent(1)
            .with_argv(["sh", "-c", "true"]);
        let line = serde_json::to_string(&ev).unwrap();
        assert_eq!(
            line,
            r#"{"seq":3,"pid":10,"kind":"exec","path":"/bin/sh","parent_pid":1,"argv":["sh","-c","true"]}"#
        );
        let close = serde_json::to_string(&TraceEvent::new(4, 10, EventKind::Close)).unwrap();
        assert_eq!(close, r#"{"seq":4,"pid":10,"kind":"close"}"#);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"seq\":1,\"pid\":1,\"kind\":\"exit\"}\n\n{\"seq\":2,\"pid\":1,\"kind\":\"bogus\"}\n";
        match read_ndjson(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let extra = "{\"seq\":1,\"pid\":1,\"kind\":\"exit\",\"x\":1}\n";
        assert!(matches!(read_ndjson(extra.as_bytes()).unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn ndjson_round_trip() {
        let evs = vec![
            TraceEvent::new(1, 5, EventKind::Exec).with_path("/a").with_argv(["a"]),
            TraceEvent::new(2, 5, EventKind::OpenRead).with_path("/etc/x"),
        ];
        assert_eq!(read_ndjson(&to_ndjson(&evs)[..]).unwrap(), evs);
    }
}
