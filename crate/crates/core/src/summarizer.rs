//! Graph summarization by similarity and packability, file annotation, and
//! exact step-by-step expansion back to the replete graph.
//!
//! A summary is a hierarchy of blocks over the replete nodes. Every visible
//! node is a block; visible edges are replete edges projected onto visible
//! blocks, deduplicated per (from, to, type) with self-loops dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provgraph::{EdgeType, NodeType, PEdge, PNode, RepleteGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Similarity,
    Packability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepOp {
    Merge,
    Pack,
    Annotate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionStep {
    pub op: StepOp,
    pub inputs: Vec<String>,
    pub output: String,
    /// Process blocks an annotated file was attached to.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hosts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    ntype: NodeType,
    label: String,
    origin: Origin,
    children: Vec<String>,
    leaves: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Plain,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Wrote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryNode {
    pub id: String,
    pub kind: NodeKind,
    pub ntype: NodeType,
    pub label: String,
    /// Number of replete nodes this node stands for.
    pub conceals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<PNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryEdge {
    pub from: String,
    pub to: String,
    pub etype: EdgeType,
    pub interval: [u64; 2],
    /// Number of replete edges projected onto this edge.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotationView {
    pub host: String,
    pub file: String,
    pub file_label: String,
    pub direction: Direction,
}

/// Serializable snapshot of a summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryView {
    pub nodes: Vec<SummaryNode>,
    pub edges: Vec<SummaryEdge>,
    pub annotations: Vec<AnnotationView>,
    pub expansion_map: Vec<ExpansionStep>,
}

type EdgeKey = (String, String, EdgeType);

#[derive(Debug, Clone, Copy)]
struct EdgeAgg {
    count: usize,
    interval: [u64; 2],
}

/// Visible graph adjacency: per block, its (neighbor, type) sets.
/// Node type with its in-set and out-set of (neighbour, edge type).
type Signature = (NodeType, Vec<(String, EdgeType)>, Vec<(String, EdgeType)>);

#[derive(Default)]
struct Adjacency {
    ins: BTreeMap<String, BTreeSet<(String, EdgeType)>>,
    outs: BTreeMap<String, BTreeSet<(String, EdgeType)>>,
}

#[derive(Debug, Clone)]
pub struct SummaryGraph {
    base: RepleteGraph,
    blocks: BTreeMap<String, Block>,
    parent: HashMap<String, String>,
    /// Replete node id to the visible or annotated block containing it.
    top: HashMap<String, String>,
    visible: BTreeSet<String>,
    annotated: BTreeSet<String>,
    expansion_map: Vec<ExpansionStep>,
    next_group: usize,
}

impl SummaryGraph {
    /// The unsummarized view of `graph`.
    pub fn identity(graph: &RepleteGraph) -> Self {
        SummaryGraph {
            base: graph.clone(),
            blocks: BTreeMap::new(),
            parent: HashMap::new(),
            top: graph.nodes().iter().map(|n| (n.id.clone(), n.id.clone())).collect(),
            visible: graph.nodes().iter().map(|n| n.id.clone()).collect(),
            annotated: BTreeSet::new(),
            expansion_map: Vec::new(),
            next_group: 1,
        }
    }

    pub fn replete(&self) -> &RepleteGraph {
        &self.base
    }

    pub fn expansion_map(&self) -> &[ExpansionStep] {
        &self.expansion_map
    }

    pub fn visible_ids(&self) -> impl Iterator<Item = &String> {
        self.visible.iter()
    }

    pub fn is_group(&self, id: &str) -> bool {
        self.blocks.contains_key(id)
    }

    fn ntype_of(&self, id: &str) -> NodeType {
        match self.blocks.get(id) {
            Some(b) => b.ntype,
            None => self.base.node(id).map(|n| n.ntype).expect("known block"),
        }
    }

    fn label_of(&self, id: &str) -> String {
        match self.blocks.get(id) {
            Some(b) => b.label.clone(),
            None => self.base.node(id).map(|n| n.label.clone()).expect("known block"),
        }
    }

    fn leaf_count(&self, id: &str) -> usize {
        self.blocks.get(id).map_or(1, |b| b.leaves)
    }

    /// Replete node ids concealed by `id` (itself for a plain node).
    pub fn leaves(&self, id: &str) -> Result<Vec<String>> {
        if !self.blocks.contains_key(id) && !self.base.contains(id) {
            return Err(Error::NotFound(format!("node {id}")));
        }
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(b) = stack.pop() {
            match self.blocks.get(&b) {
                Some(block) => stack.extend(block.children.iter().rev().cloned()),
                None => out.push(b),
            }
        }
        Ok(out)
    }

    fn project(&self) -> BTreeMap<EdgeKey, EdgeAgg> {
        let mut out: BTreeMap<EdgeKey, EdgeAgg> = BTreeMap::new();
        for e in self.base.edges() {
            let (f, t) = (&self.top[&e.from], &self.top[&e.to]);
            if f == t || self.annotated.contains(f) || self.annotated.contains(t) {
                continue;
            }
            out.entry((f.clone(), t.clone(), e.etype))
                .and_modify(|a| {
                    a.count += 1;
                    a.interval = [a.interval[0].min(e.interval[0]), a.interval[1].max(e.interval[1])];
                })
                .or_insert(EdgeAgg {
                    count: 1,
                    interval: e.interval,
                });
        }
        out
    }

    fn adjacency(&self) -> Adjacency {
        let mut adj = Adjacency::default();
        for v in &self.visible {
            adj.ins.insert(v.clone(), BTreeSet::new());
            adj.outs.insert(v.clone(), BTreeSet::new());
        }
        for (f, t, et) in self.project().into_keys() {
            adj.outs.get_mut(&f).unwrap().insert((t.clone(), et));
            adj.ins.get_mut(&t).unwrap().insert((f, et));
        }
        adj
    }

    fn new_group(&mut self, ntype: NodeType, label: Option<String>, origin: Origin, children: Vec<String>) -> String {
        let n = self.next_group;
        self.next_group += 1;
        let id = format!("g{n}");
        let label = label.unwrap_or_else(|| {
            let t = match ntype {
                NodeType::File => "File",
                NodeType::Process => "Process",
            };
            format!("{t}_G_{n}")
        });
        let leaves = children.iter().map(|c| self.leaf_count(c)).sum();
        for c in &children {
            self.visible.remove(c);
            self.parent.insert(c.clone(), id.clone());
        }
        self.blocks.insert(
            id.clone(),
            Block {
                ntype,
                label,
                origin,
                children,
                leaves,
            },
        );
        for leaf in self.leaves(&id).expect("new block") {
            self.top.insert(leaf, id.clone());
        }
        self.visible.insert(id.clone());
        id
    }

    /// Merges every maximal set of visible nodes sharing type, in-set and
    /// out-set. Returns whether anything changed.
    pub fn similarity_pass(&mut self) -> bool {
        let adj = self.adjacency();
        let mut buckets: BTreeMap<Signature, Vec<String>> = BTreeMap::new();
        for v in &self.visible {
            let key = (
                self.ntype_of(v),
                adj.ins[v].iter().cloned().collect(),
                adj.outs[v].iter().cloned().collect(),
            );
            buckets.entry(key).or_default().push(v.clone());
        }
        let mut groups: Vec<(NodeType, Vec<String>)> = buckets
            .into_iter()
            .filter(|(_, m)| m.len() >= 2)
            .map(|((t, _, _), m)| (t, m))
            .collect();
        groups.sort_by(|a, b| a.1.cmp(&b.1));
        for (ntype, members) in &groups {
            let id = self.new_group(*ntype, None, Origin::Similarity, members.clone());
            self.expansion_map.push(ExpansionStep {
                op: StepOp::Merge,
                inputs: members.clone(),
                output: id,
                hosts: Vec::new(),
            });
        }
        !groups.is_empty()
    }

    /// The first packable visible node in id order and its host.
    fn find_packable(&self) -> Option<(String, String)> {
        let adj = self.adjacency();
        let is_proc = |id: &str| self.ntype_of(id) == NodeType::Process;
        for v in &self.visible {
            let (ins, outs) = (&adj.ins[v], &adj.outs[v]);
            if is_proc(v) {
                // A process whose only dependency is one other process.
                if outs.len() == 1 {
                    let (to, _) = outs.iter().next().unwrap();
                    if is_proc(to) {
                        return Some((v.clone(), to.clone()));
                    }
                }
                continue;
            }
            match (ins.len(), outs.len()) {
                // A file with a single edge, read or written by one process.
                (1, 0) | (0, 1) => {
                    let (other, _) = ins.iter().chain(outs.iter()).next().unwrap();
                    if is_proc(other) {
                        return Some((v.clone(), other.clone()));
                    }
                }
                // A file written by one process and read by another.
                (1, 1) => {
                    let (reader, rt) = ins.iter().next().unwrap();
                    let (writer, wt) = outs.iter().next().unwrap();
                    if *rt == EdgeType::Read
                        && *wt == EdgeType::Wrote
                        && reader != writer
                        && is_proc(reader)
                        && is_proc(writer)
                    {
                        return Some((v.clone(), writer.clone()));
                    }
                }
                _ => {}
            }
        }
        None
    }

    /// Packs nodes into their hosts, one at a time in node-id order, until
    /// no rule applies. Returns whether anything changed.
    pub fn packability_pass(&mut self) -> bool {
        let mut changed = false;
        while let Some((packed, host)) = self.find_packable() {
            let label = self.label_of(&host);
            let ntype = self.ntype_of(&host);
            let inputs = vec![host, packed];
            let id = self.new_group(ntype, Some(label), Origin::Packability, inputs.clone());
            self.expansion_map.push(ExpansionStep {
                op: StepOp::Pack,
                inputs,
                output: id,
                hosts: Vec::new(),
            });
            changed = true;
        }
        changed
    }

    /// Replaces every visible file with at least two edges by annotations on
    /// its process endpoints. Returns whether anything changed.
    pub fn annotate_pass(&mut self) -> bool {
        let adj = self.adjacency();
        let targets: Vec<(String, Vec<String>)> = self
            .visible
            .iter()
            .filter(|v| self.ntype_of(v) == NodeType::File)
            .filter(|v| adj.ins[*v].len() + adj.outs[*v].len() >= 2)
            .map(|v| {
                let hosts: BTreeSet<String> = adj.ins[v].iter().chain(adj.outs[v].iter()).map(|(n, _)| n.clone()).collect();
                (v.clone(), hosts.into_iter().collect())
            })
            .collect();
        for (file, hosts) in &targets {
            self.visible.remove(file);
            self.annotated.insert(file.clone());
            self.expansion_map.push(ExpansionStep {
                op: StepOp::Annotate,
                inputs: vec![file.clone()],
                output: file.clone(),
                hosts: hosts.clone(),
            });
        }
        !targets.is_empty()
    }

    /// Annotations currently attached to visible process blocks.
    pub fn annotations(&self) -> Vec<AnnotationView> {
        let mut out = BTreeSet::new();
        for e in self.base.edges() {
            let (f, t) = (&self.top[&e.from], &self.top[&e.to]);
            let (file, host, direction) = if self.annotated.contains(t) {
                (t, f, Direction::Read)
            } else if self.annotated.contains(f) {
                (f, t, Direction::Wrote)
            } else {
                continue;
            };
            out.insert(AnnotationView {
                host: host.clone(),
                file: file.clone(),
                file_label: self.label_of(file),
                direction,
            });
        }
        out.into_iter().collect()
    }

    /// Undoes the one step concealing `id`: un-annotates an annotated file
    /// or the files annotated on a host, or splits a visible group into its
    /// members. Plain or already expanded nodes are left unchanged.
    pub fn expand(&mut self, id: &str) -> Result<()> {
        if !self.blocks.contains_key(id) && !self.base.contains(id) {
            return Err(Error::NotFound(format!("node {id}")));
        }
        if self.annotated.remove(id) {
            self.visible.insert(id.to_string());
            return Ok(());
        }
        if !self.visible.contains(id) {
            return Ok(());
        }
        let hosted: BTreeSet<String> =
            self.annotations().into_iter().filter(|a| a.host == id).map(|a| a.file).collect();
        if !hosted.is_empty() {
            for f in hosted {
                self.annotated.remove(&f);
                self.visible.insert(f);
            }
            return Ok(());
        }
        if let Some(block) = self.blocks.get(id).cloned() {
            self.visible.remove(id);
            for c in &block.children {
                self.visible.insert(c.clone());
                for leaf in self.leaves(c)? {
                    self.top.insert(leaf, c.clone());
                }
            }
        }
        Ok(())
    }

    /// Expands until only replete nodes remain.
    pub fn expand_all(&mut self) {
        loop {
            let pending: Vec<String> = self
                .annotated
                .iter()
                .chain(self.visible.iter().filter(|v| self.blocks.contains_key(*v)))
                .cloned()
                .collect();
            if pending.is_empty() {
                return;
            }
            for id in pending {
                self.expand(&id).expect("known id");
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.visible.len()
    }

    pub fn edge_count(&self) -> usize {
        self.project().len()
    }

    pub fn view(&self) -> SummaryView {
        let mut nodes: Vec<SummaryNode> = self
            .visible
            .iter()
            .map(|id| match self.blocks.get(id) {
                Some(b) => SummaryNode {
                    id: id.clone(),
                    kind: NodeKind::Group,
                    ntype: b.ntype,
                    label: b.label.clone(),
                    conceals: b.leaves,
                    origin: Some(b.origin),
                    members: b.children.clone(),
                    detail: None,
                },
                None => {
                    let n = self.base.node(id).expect("visible node");
                    SummaryNode {
                        id: id.clone(),
                        kind: NodeKind::Plain,
                        ntype: n.ntype,
                        label: n.label.clone(),
                        conceals: 1,
                        origin: None,
                        members: Vec::new(),
                        detail: Some(n.clone()),
                    }
                }
            })
            .collect();
        nodes.sort_by(|a, b| (a.ntype, &a.label, &a.id).cmp(&(b.ntype, &b.label, &b.id)));
        let edges = self
            .project()
            .into_iter()
            .map(|((from, to, etype), agg)| SummaryEdge {
                from,
                to,
                etype,
                interval: agg.interval,
                count: agg.count,
            })
            .collect();
        SummaryView {
            nodes,
            edges,
            annotations: self.annotations(),
            expansion_map: self.expansion_map.clone(),
        }
    }

    /// Canonical JSON of [`SummaryGraph::view`].
    pub fn to_json(&self) -> Vec<u8> {
        crate::json::to_canonical_vec(&self.view())
    }

    /// The visible graph as a standalone graph, with annotated files shown
    /// as nodes again.
    pub fn quotient_graph(&self) -> RepleteGraph {
        let mut tmp = self.clone();
        for f in std::mem::take(&mut tmp.annotated) {
            tmp.visible.insert(f);
        }
        let nodes: Vec<PNode> = tmp
            .visible
            .iter()
            .map(|id| PNode {
                id: id.clone(),
                ntype: tmp.ntype_of(id),
                label: tmp.label_of(id),
                version: 1,
                pid: None,
                argv: None,
                path: None,
            })
            .collect();
        let edges: Vec<PEdge> = tmp
            .project()
            .into_iter()
            .map(|((from, to, etype), agg)| PEdge {
                from,
                to,
                etype,
                interval: agg.interval,
                exec: false,
            })
            .collect();
        RepleteGraph::from_parts(nodes, edges).expect("projection is closed")
    }

    /// Process-to-process reachability over visible edges, with each
    /// annotated file relinking its readers to its writers.
    pub fn reaches(&self, from: &str, to: &str) -> bool {
        let mut adj: HashMap<String, Vec<String>> = HashMap::new();
        for (f, t, _) in self.project().into_keys() {
            adj.entry(f).or_default().push(t);
        }
        let anns = self.annotations();
        for r in anns.iter().filter(|a| a.direction == Direction::Read) {
            for w in anns.iter().filter(|a| a.direction == Direction::Wrote && a.file == r.file) {
                adj.entry(r.host.clone()).or_default().push(w.host.clone());
            }
        }
        let mut seen = HashSet::new();
        let mut stack = vec![from.to_string()];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n.clone()) {
                if let Some(next) = adj.get(&n) {
                    stack.extend(next.iter().cloned());
                }
            }
        }
        false
    }
}

/// Condenses `graph`: similarity and packability to a joint fixpoint, then
/// file annotation. Every step is recorded in the expansion map.
pub fn summarize(graph: &RepleteGraph) -> SummaryGraph {
    let mut s = SummaryGraph::identity(graph);
    loop {
        let merged = s.similarity_pass();
        let packed = s.packability_pass();
        if !merged && !packed {
            break;
        }
    }
    s.annotate_pass();
    s
}

/// Summarizes and then replays `expanded` ids in order.
pub fn summarize_expanded(graph: &RepleteGraph, expanded: &[String]) -> Result<SummaryGraph> {
    let mut s = summarize(graph);
    for id in expanded {
        s.expand(id)?;
    }
    Ok(s)
}
