//! Seeded generators shared by the property suites and the acceptance target.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sciunit_core::auditor::{EventKind, Pid, TraceEvent};
use sciunit_core::provgraph::{EdgeType, NodeType, PEdge, PNode, RepleteGraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random well-formed trace: forks from live processes, execs, opens and
/// closes over a small path pool, and exits (children before parents).
pub fn random_log(seed: u64, max_procs: usize, steps: usize, paths: usize) -> Vec<TraceEvent> {
    let mut r = rng(seed);
    let mut events = Vec::new();
    let mut seq = 0u64;
    let mut push = |events: &mut Vec<TraceEvent>, e: TraceEvent| {
        seq += 1;
        let mut e = e;
        e.seq = seq;
        events.push(e);
    };
    let path = |i: usize| format!("/d/f{i}");
    push(
        &mut events,
        TraceEvent::new(0, 1, EventKind::Exec).with_path("/bin/p0").with_argv(["p0"]),
    );
    let mut alive: Vec<Pid> = vec![1];
    let mut parent: BTreeMap<Pid, Pid> = BTreeMap::new();
    let mut open: BTreeMap<Pid, Vec<String>> = BTreeMap::new();
    let mut next_pid: Pid = 2;
    for _ in 0..steps {
        if alive.is_empty() {
            break;
        }
        let p = alive[r.random_range(0..alive.len())];
        match r.random_range(0..10u32) {
            0 if (next_pid as usize) <= max_procs => {
                let c = next_pid;
                next_pid += 1;
                push(&mut events, TraceEvent::new(0, c, EventKind::Fork).with_parent(p));
                alive.push(c);
                parent.insert(c, p);
                if r.random_bool(0.7) {
                    let prog = format!("/bin/p{}", r.random_range(0..4u32));
                    let name = prog.rsplit('/').next().unwrap().to_string();
                    push(&mut events, TraceEvent::new(0, c, EventKind::Exec).with_path(prog).with_argv([name]));
                }
            }
            1 => {
                let prog = format!("/bin/p{}", r.random_range(0..4u32));
                let name = prog.rsplit('/').next().unwrap().to_string();
                push(&mut events, TraceEvent::new(0, p, EventKind::Exec).with_path(prog).with_argv([name]));
            }
            2..=4 => {
                let f = path(r.random_range(0..paths));
                push(&mut events, TraceEvent::new(0, p, EventKind::OpenRead).with_path(f.clone()));
                open.entry(p).or_default().push(f);
            }
            5 | 6 => {
                let f = path(r.random_range(0..paths));
                push(&mut events, TraceEvent::new(0, p, EventKind::OpenWrite).with_path(f.clone()));
                open.entry(p).or_default().push(f);
            }
            7 | 8 => {
                let files = open.entry(p).or_default();
                if !files.is_empty() {
                    let f = files.remove(r.random_range(0..files.len()));
                    push(&mut events, TraceEvent::new(0, p, EventKind::Close).with_path(f));
                }
            }
            _ => {
                let has_children = parent.iter().any(|(c, pp)| *pp == p && alive.contains(c));
                if p != 1 && !has_children {
                    push(&mut events, TraceEvent::new(0, p, EventKind::Exit));
                    alive.retain(|x| *x != p);
                }
            }
        }
    }
    while let Some(p) = alive.pop() {
        push(&mut events, TraceEvent::new(0, p, EventKind::Exit));
    }
    events
}

fn proc_node(id: String, label: String) -> PNode {
    PNode {
        id,
        ntype: NodeType::Process,
        label,
        version: 1,
        pid: None,
        argv: None,
        path: None,
    }
}

fn file_node(path: &str) -> PNode {
    PNode {
        id: format!("{path}#1"),
        ntype: NodeType::File,
        label: path.to_string(),
        version: 1,
        pid: None,
        argv: None,
        path: Some(path.into()),
    }
}

fn edge(from: &str, to: &str, etype: EdgeType, t: u64) -> PEdge {
    PEdge {
        from: from.to_string(),
        to: to.to_string(),
        etype,
        interval: [t, t + 1],
        exec: false,
    }
}

/// A random type-respecting DAG: nodes are created in order and every edge
/// points from a later node to an earlier one.
pub fn random_dag(seed: u64, max_nodes: usize) -> RepleteGraph {
    let mut r = rng(seed);
    let n = r.random_range(2..=max_nodes);
    let mut nodes: Vec<PNode> = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 || r.random_bool(0.45) {
            nodes.push(proc_node(format!("p:{i:03}"), format!("P_prog_{i}")));
        } else {
            nodes.push(file_node(&format!("/data/n{i:03}")));
        }
    }
    let mut edges = Vec::new();
    let mut t = 0;
    for u in 1..n {
        let degree = r.random_range(0..=3usize);
        let mut targets: Vec<usize> = (0..degree).map(|_| r.random_range(0..u)).collect();
        targets.sort();
        targets.dedup();
        for v in targets {
            let (a, b) = (&nodes[u], &nodes[v]);
            let etype = match (a.ntype, b.ntype) {
                (NodeType::Process, NodeType::Process) => EdgeType::Spawned,
                (NodeType::Process, NodeType::File) => EdgeType::Read,
                (NodeType::File, NodeType::Process) => EdgeType::Wrote,
                (NodeType::File, NodeType::File) => continue,
            };
            t += 1;
            edges.push(edge(&a.id, &b.id, etype, t));
        }
    }
    RepleteGraph::from_parts(nodes, edges).expect("generated graph is closed")
}

/// Workflow-scale graph built on a 12-node, 13-edge skeleton.
pub struct Workflow {
    pub graph: RepleteGraph,
    pub skeleton_nodes: usize,
    pub skeleton_edges: usize,
}

/// Expands the skeleton (a driver, five stages and six data files) with
/// similar input fan-ins, shared libraries, helper subprocesses exchanging
/// temporary files, and single-edge configuration and log files.
pub fn workflow(seed: u64) -> Workflow {
    let mut r = rng(seed);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut t = 0u64;
    let mut add = |edges: &mut Vec<PEdge>, from: &str, to: &str, etype: EdgeType| {
        t += 1;
        edges.push(edge(from, to, etype, t));
    };

    let stages = ["clean", "violation", "heatmap", "model_data", "model"];
    let driver = "p:driver".to_string();
    nodes.push(proc_node(driver.clone(), "P_sh_100".into()));
    let stage_ids: Vec<String> = stages.iter().map(|s| format!("p:{s}")).collect();
    for (i, s) in stages.iter().enumerate() {
        nodes.push(proc_node(stage_ids[i].clone(), format!("P_{s}_{}", 101 + i)));
    }
    let data = ["raw", "clean", "violation", "heat", "model_data", "model"];
    let data_ids: Vec<String> = data.iter().map(|d| format!("/w/out/{d}.csv#1")).collect();
    for d in data {
        nodes.push(file_node(&format!("/w/out/{d}.csv")));
    }
    let (s, f) = (&stage_ids, &data_ids);
    let skeleton = [
        (&s[0], &f[0], EdgeType::Read),
        (&f[1], &s[0], EdgeType::Wrote),
        (&s[1], &f[1], EdgeType::Read),
        (&s[2], &f[1], EdgeType::Read),
        (&f[2], &s[1], EdgeType::Wrote),
        (&f[3], &s[2], EdgeType::Wrote),
        (&s[3], &f[2], EdgeType::Read),
        (&s[3], &f[3], EdgeType::Read),
        (&f[4], &s[3], EdgeType::Wrote),
        (&s[4], &f[4], EdgeType::Read),
        (&f[5], &s[4], EdgeType::Wrote),
        (&s[4], &f[2], EdgeType::Read),
        (&s[0], &driver, EdgeType::Spawned),
    ];
    for (from, to, etype) in skeleton {
        add(&mut edges, from, to, etype);
    }
    let skeleton_nodes = nodes.len();
    let skeleton_edges = edges.len();

    for sid in &stage_ids[1..] {
        add(&mut edges, sid, &driver, EdgeType::Spawned);
    }
    let libs = r.random_range(22..=26);
    for l in 0..libs {
        let lib = file_node(&format!("/usr/lib/lib{l}.so"));
        for p in std::iter::once(&driver).chain(&stage_ids) {
            add(&mut edges, p, &lib.id, EdgeType::Read);
        }
        nodes.push(lib);
    }
    let awk = file_node("/usr/bin/awk");
    for p in &stage_ids {
        add(&mut edges, p, &awk.id, EdgeType::Read);
    }
    nodes.push(awk);
    let script = file_node("/w/run.sh");
    add(&mut edges, &driver, &script.id, EdgeType::Read);
    nodes.push(script);

    for (i, (sid, name)) in stage_ids.iter().zip(stages).enumerate() {
        for single in [format!("/w/scripts/{name}.awk"), format!("/w/conf/{name}.conf")] {
            let n = file_node(&single);
            add(&mut edges, sid, &n.id, EdgeType::Read);
            nodes.push(n);
        }
        let log = file_node(&format!("/w/logs/{name}.log"));
        add(&mut edges, &log.id, sid, EdgeType::Wrote);
        nodes.push(log);
        for k in 0..r.random_range(8..=12) {
            let shard = file_node(&format!("/w/in/{name}/part{k:02}.csv"));
            add(&mut edges, sid, &shard.id, EdgeType::Read);
            nodes.push(shard);
        }
        for h in 0..r.random_range(5..=7) {
            let helper = format!("p:{name}-helper{h}");
            nodes.push(proc_node(helper.clone(), format!("P_sort_{}", 200 + i * 10 + h)));
            add(&mut edges, &helper, sid, EdgeType::Spawned);
            let tmp = file_node(&format!("/tmp/{name}.{h}"));
            add(&mut edges, &tmp.id, &helper, EdgeType::Wrote);
            add(&mut edges, sid, &tmp.id, EdgeType::Read);
            nodes.push(tmp);
        }
    }
    Workflow {
        graph: RepleteGraph::from_parts(nodes, edges).expect("workflow graph is closed"),
        skeleton_nodes,
        skeleton_edges,
    }
}
