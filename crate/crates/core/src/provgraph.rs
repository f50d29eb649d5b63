//! Replete provenance graph: process nodes, versioned file nodes, and
//! dependency-oriented edges built from an interaction log.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auditor::{ingest_trace, read_ndjson, Access, Interaction, InteractionLog, Object, Pid};
use crate::digest::Digest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    File,
    Process,
}

/// Edge `(from, to)` means `from` depends on `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    /// Child process to the parent that forked it.
    Spawned,
    /// Process to a file version it read or executed.
    Read,
    /// File version to the process that wrote it.
    Wrote,
    /// Later phase of a process to its earlier phase.
    Continued,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PNode {
    pub id: String,
    pub ntype: NodeType,
    pub label: String,
    /// File version, or the phase number of a process.
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<Pid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argv: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl PNode {
    pub fn is_process(&self) -> bool {
        self.ntype == NodeType::Process
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PEdge {
    pub from: String,
    pub to: String,
    pub etype: EdgeType,
    pub interval: [u64; 2],
    /// The read was a program execution.
    #[serde(default, skip_serializing_if = "is_false")]
    pub exec: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RepleteGraph {
    nodes: Vec<PNode>,
    edges: Vec<PEdge>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for RepleteGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl RepleteGraph {
    /// Builds a graph from explicit parts, rejecting dangling edges.
    pub fn from_parts(nodes: Vec<PNode>, edges: Vec<PEdge>) -> Result<Self> {
        let mut g = RepleteGraph {
            nodes,
            edges,
            index: HashMap::new(),
        };
        g.reindex()?;
        Ok(g)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            if self.index.insert(n.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate node id {}", n.id)));
            }
        }
        for e in &self.edges {
            if !self.index.contains_key(&e.from) || !self.index.contains_key(&e.to) {
                return Err(Error::InvalidArgument(format!("edge {} -> {} names an unknown node", e.from, e.to)));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[PNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PEdge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&PNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn processes(&self) -> impl Iterator<Item = &PNode> {
        self.nodes.iter().filter(|n| n.is_process())
    }

    pub fn files(&self) -> impl Iterator<Item = &PNode> {
        self.nodes.iter().filter(|n| !n.is_process())
    }

    pub fn out_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a PEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == id)
    }

    pub fn in_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a PEdge> + 'a {
        self.edges.iter().filter(move |e| e.to == id)
    }

    /// Canonical JSON export `{nodes, edges}`.
    pub fn to_json(&self) -> Vec<u8> {
        crate::json::to_canonical_vec(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut g: RepleteGraph =
            serde_json::from_slice(bytes).map_err(|e| Error::InvalidArgument(format!("graph JSON: {e}")))?;
        g.reindex()?;
        Ok(g)
    }

    /// Maps each node id to the ids it depends on.
    pub fn adjacency(&self) -> HashMap<&str, Vec<&str>> {
        let mut adj: HashMap<&str, Vec<&str>> = self.nodes.iter().map(|n| (n.id.as_str(), Vec::new())).collect();
        for e in &self.edges {
            adj.get_mut(e.from.as_str()).unwrap().push(e.to.as_str());
        }
        adj
    }
}

fn short_hash(parts: &[&str]) -> String {
    let joined = parts.join("\u{0}");
    Digest::of(joined.as_bytes()).to_hex()[..16].to_string()
}

fn program_name(argv: &[String], exe: Option<&Path>) -> String {
    let raw = argv
        .first()
        .map(String::as_str)
        .or_else(|| exe.and_then(|p| p.to_str()))
        .unwrap_or("proc");
    let base = raw.rsplit('/').next().unwrap_or(raw);
    if base.is_empty() {
        "proc".to_string()
    } else {
        base.to_string()
    }
}

/// Which version of a path a read binds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binding {
    Preexisting,
    Write(usize),
}

struct Builder<'a> {
    log: &'a InteractionLog,
    graph: RepleteGraph,
    /// Current node index of each process.
    current: Vec<usize>,
    phases: Vec<u32>,
    base_ids: Vec<String>,
    /// Out-adjacency by node index.
    out: Vec<Vec<usize>>,
    edge_index: HashMap<(usize, usize, EdgeType), usize>,
    file_nodes: HashMap<(PathBuf, u32), usize>,
}

impl Builder<'_> {
    fn add_node(&mut self, node: PNode) -> usize {
        let i = self.graph.nodes.len();
        self.graph.index.insert(node.id.clone(), i);
        self.graph.nodes.push(node);
        self.out.push(Vec::new());
        i
    }

    fn add_edge(&mut self, from: usize, to: usize, etype: EdgeType, interval: [u64; 2], exec: bool) {
        if let Some(&ei) = self.edge_index.get(&(from, to, etype)) {
            let e = &mut self.graph.edges[ei];
            e.interval = [e.interval[0].min(interval[0]), e.interval[1].max(interval[1])];
            e.exec |= exec;
            return;
        }
        self.edge_index.insert((from, to, etype), self.graph.edges.len());
        self.out[from].push(to);
        self.graph.edges.push(PEdge {
            from: self.graph.nodes[from].id.clone(),
            to: self.graph.nodes[to].id.clone(),
            etype,
            interval,
            exec,
        });
    }

    fn reaches(&self, from: usize, target: usize) -> bool {
        let mut seen = HashSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.out[n].iter().copied());
            }
        }
        false
    }

    fn process_node(&self, proc_idx: usize, phase: u32) -> PNode {
        let rec = &self.log.processes()[proc_idx];
        let argv = rec.argv();
        let exe = rec.current_image().map(|e| e.path.as_path());
        let mut label = format!("P_{}_{}", program_name(&argv, exe), rec.pid);
        let mut id = self.base_ids[proc_idx].clone();
        if phase > 1 {
            label.push_str(&format!("~{phase}"));
            id.push_str(&format!("~{phase}"));
        }
        PNode {
            id,
            ntype: NodeType::Process,
            label,
            version: phase,
            pid: Some(rec.pid),
            argv: Some(argv),
            path: None,
        }
    }

    /// Starts a new phase of a process so a read cannot close a cycle.
    fn continue_process(&mut self, proc_idx: usize, at: u64) -> usize {
        self.phases[proc_idx] += 1;
        let node = self.process_node(proc_idx, self.phases[proc_idx]);
        let prev = self.current[proc_idx];
        let idx = self.add_node(node);
        self.add_edge(idx, prev, EdgeType::Continued, [at, at], false);
        self.current[proc_idx] = idx;
        idx
    }

    fn file_node(&mut self, path: &Path, version: u32) -> usize {
        if let Some(&i) = self.file_nodes.get(&(path.to_path_buf(), version)) {
            return i;
        }
        let label = path.to_string_lossy().into_owned();
        let i = self.add_node(PNode {
            id: format!("{label}#{version}"),
            ntype: NodeType::File,
            label,
            version,
            pid: None,
            argv: None,
            path: Some(path.to_path_buf()),
        });
        self.file_nodes.insert((path.to_path_buf(), version), i);
        i
    }
}

/// Picks the version a read binds to among the path's writes (in start
/// order): the writer's own newer write if any, else the newest write closed
/// before the read started, else the newest write in progress, else the
/// pre-existing content.
fn bind_read(read: &Interaction, writes: &[&Interaction]) -> Binding {
    let closed = writes.iter().rposition(|w| w.end < read.start);
    let own = writes.iter().rposition(|w| w.subject == read.subject && w.start < read.start);
    match (own, closed) {
        (Some(o), Some(c)) if o > c => Binding::Write(o),
        (Some(o), None) => Binding::Write(o),
        (_, Some(c)) => Binding::Write(c),
        (None, None) => match writes.iter().rposition(|w| w.start < read.start) {
            Some(p) => Binding::Write(p),
            None => Binding::Preexisting,
        },
    }
}

/// Builds the replete graph of a log.
///
/// A new file version is minted for every write. Reads bind per
/// [`bind_read`]. When a read edge would close a cycle (a process reading its
/// own output, or output derived from it), the process continues as a new
/// phase node linked to the old one by a `continued` edge.
pub fn build_graph(log: &InteractionLog) -> Result<RepleteGraph> {
    let procs = log.processes();
    let base_ids: Vec<String> = procs
        .iter()
        .map(|p| {
            let argv = p.argv().join("\u{1}");
            format!("p:{}", short_hash(&[&p.pid.to_string(), &p.generation.to_string(), &argv]))
        })
        .collect();
    let mut b = Builder {
        log,
        graph: RepleteGraph::default(),
        current: Vec::with_capacity(procs.len()),
        phases: vec![1; procs.len()],
        base_ids,
        out: Vec::new(),
        edge_index: HashMap::new(),
        file_nodes: HashMap::new(),
    };
    for i in 0..procs.len() {
        let node = b.process_node(i, 1);
        let idx = b.add_node(node);
        b.current.push(idx);
    }

    let interactions = log.interactions();
    let mut writes_by_path: BTreeMap<&Path, Vec<&Interaction>> = BTreeMap::new();
    for i in interactions {
        if let (Access::Write, Object::File(p)) = (i.access, &i.object) {
            writes_by_path.entry(p.as_path()).or_default().push(i);
        }
    }
    // Bind every read first so version numbers account for pre-existing content.
    let mut bindings: Vec<Option<Binding>> = vec![None; interactions.len()];
    let mut has_pre: HashSet<&Path> = HashSet::new();
    for (k, i) in interactions.iter().enumerate() {
        if let (Access::Read | Access::Exec, Object::File(p)) = (i.access, &i.object) {
            let writes = writes_by_path.get(p.as_path()).map(Vec::as_slice).unwrap_or(&[]);
            let bnd = bind_read(i, writes);
            if bnd == Binding::Preexisting {
                has_pre.insert(p.as_path());
            }
            bindings[k] = Some(bnd);
        }
    }
    let version_of = |path: &Path, b: Binding| -> u32 {
        let offset = u32::from(has_pre.contains(path));
        match b {
            Binding::Preexisting => 1,
            Binding::Write(w) => w as u32 + 1 + offset,
        }
    };
    let mut write_ordinal: HashMap<&Path, usize> = HashMap::new();

    for (k, i) in interactions.iter().enumerate() {
        let interval = [i.start, i.end];
        match (&i.object, i.access) {
            (Object::Process(parent), Access::Spawn) => {
                let child = b.current[i.subject];
                let parent = b.current[*parent];
                b.add_edge(child, parent, EdgeType::Spawned, interval, false);
            }
            (Object::File(path), Access::Write) => {
                let ord = write_ordinal.entry(path.as_path()).or_insert(0);
                let version = version_of(path, Binding::Write(*ord));
                *ord += 1;
                let f = b.file_node(path, version);
                let p = b.current[i.subject];
                b.add_edge(f, p, EdgeType::Wrote, interval, false);
            }
            (Object::File(path), Access::Read | Access::Exec) => {
                let version = version_of(path, bindings[k].expect("read bound above"));
                let f = b.file_node(path, version);
                let mut p = b.current[i.subject];
                if b.reaches(f, p) {
                    p = b.continue_process(i.subject, i.start);
                }
                b.add_edge(p, f, EdgeType::Read, interval, i.access == Access::Exec);
            }
            _ => {}
        }
    }
    let graph = b.graph;
    if let Err(Error::CyclicGraph { witness }) = topo_order(&graph) {
        return Err(Error::Internal(format!("provenance graph has a cycle: {}", witness.join(" -> "))));
    }
    Ok(graph)
}

/// Parses an NDJSON log and builds its graph.
pub fn graph_from_log_bytes(bytes: &[u8]) -> Result<(InteractionLog, RepleteGraph)> {
    let events = read_ndjson(bytes)?;
    let (_, log) = ingest_trace(events)?;
    let graph = build_graph(&log)?;
    Ok((log, graph))
}

/// Orders nodes so that every edge's target precedes its source. Ties are
/// broken by (type, label, id).
pub fn topo_order(graph: &RepleteGraph) -> Result<Vec<String>> {
    let n = graph.nodes.len();
    let mut remaining = vec![0usize; n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut seen_pairs = HashSet::new();
    for e in &graph.edges {
        let (u, v) = (graph.index[&e.from], graph.index[&e.to]);
        if seen_pairs.insert((u, v)) {
            remaining[u] += 1;
            dependents[v].push(u);
        }
    }
    let key = |i: usize| {
        let node = &graph.nodes[i];
        Reverse((node.ntype, node.label.as_str(), node.id.as_str(), i))
    };
    let mut ready: BinaryHeap<_> = (0..n).filter(|&i| remaining[i] == 0).map(key).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, _, _, i))) = ready.pop() {
        order.push(graph.nodes[i].id.clone());
        for &d in &dependents[i] {
            remaining[d] -= 1;
            if remaining[d] == 0 {
                ready.push(key(d));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(Error::CyclicGraph {
        witness: cycle_witness(graph, &remaining),
    })
}

fn cycle_witness(graph: &RepleteGraph, remaining: &[usize]) -> Vec<String> {
    let stuck = |i: usize| remaining[i] > 0;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for e in &graph.edges {
        let (u, v) = (graph.index[&e.from], graph.index[&e.to]);
        if stuck(u) && stuck(v) {
            adj[u].push(v);
        }
    }
    let Some(start) = (0..graph.nodes.len()).find(|&i| stuck(i)) else {
        return Vec::new();
    };
    // Every stuck node has a stuck dependency, so walking must revisit a node.
    let mut pos: HashMap<usize, usize> = HashMap::new();
    let mut path = vec![start];
    let mut cur = start;
    loop {
        pos.insert(cur, path.len() - 1);
        let Some(&next) = adj[cur].first() else {
            return path.iter().map(|&i| graph.nodes[i].id.clone()).collect();
        };
        if let Some(&p) = pos.get(&next) {
            let mut cycle: Vec<String> = path[p..].iter().map(|&i| graph.nodes[i].id.clone()).collect();
            cycle.push(graph.nodes[next].id.clone());
            return cycle;
        }
        path.push(next);
        cur = next;
    }
}
