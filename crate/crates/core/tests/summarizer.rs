#[path = "common/generators.rs"]
mod generators;

use std::collections::{BTreeSet, HashMap, HashSet};

use proptest::prelude::*;

use sciunit_core::auditor::ingest_trace;
use sciunit_core::provgraph::{build_graph, NodeType, RepleteGraph};
use sciunit_core::summarizer::{summarize, summarize_expanded, NodeKind, SummaryGraph};

fn log_graph(seed: u64) -> RepleteGraph {
    let events = generators::random_log(seed, 10, 160, 8);
    let (_, log) = ingest_trace(events).unwrap();
    build_graph(&log).unwrap()
}

fn any_graph(seed: u64, dag: bool) -> RepleteGraph {
    if dag {
        generators::random_dag(seed, 40)
    } else {
        log_graph(seed)
    }
}

type EdgeSet = BTreeSet<(String, String, String, [u64; 2])>;

fn edge_set(g: &RepleteGraph) -> EdgeSet {
    g.edges()
        .iter()
        .map(|e| (e.from.clone(), e.to.clone(), format!("{:?}", e.etype), e.interval))
        .collect()
}

fn node_set(g: &RepleteGraph) -> BTreeSet<(String, NodeType)> {
    g.nodes().iter().map(|n| (n.id.clone(), n.ntype)).collect()
}

fn replete_reaches(g: &RepleteGraph, from: &str, to: &str) -> bool {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in g.edges() {
        adj.entry(e.from.as_str()).or_default().push(e.to.as_str());
    }
    let mut seen = HashSet::new();
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            stack.extend(adj.get(n).into_iter().flatten());
        }
    }
    false
}

/// Similarity and packability to their joint fixpoint, without annotation.
fn condense(g: &RepleteGraph) -> SummaryGraph {
    let mut s = SummaryGraph::identity(g);
    while s.similarity_pass() | s.packability_pass() {}
    s
}

fn file_count(nodes: impl Iterator<Item = NodeType>) -> usize {
    nodes.filter(|t| *t == NodeType::File).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn expanding_everything_restores_the_replete_graph(seed in any::<u64>(), dag in any::<bool>()) {
        let g = any_graph(seed, dag);
        let mut s = summarize(&g);
        s.expand_all();
        let q = s.quotient_graph();
        prop_assert_eq!(node_set(&q), node_set(&g));
        prop_assert_eq!(edge_set(&q), edge_set(&g));
        prop_assert!(s.annotations().is_empty());
    }

    #[test]
    fn a_condensed_graph_is_a_fixpoint(seed in any::<u64>(), dag in any::<bool>()) {
        let g = any_graph(seed, dag);
        let q = condense(&g).quotient_graph();
        let mut again = SummaryGraph::identity(&q);
        prop_assert!(!again.similarity_pass());
        prop_assert!(!again.packability_pass());
        prop_assert_eq!(again.node_count(), q.nodes().len());
    }

    #[test]
    fn surviving_processes_keep_their_reachability(seed in any::<u64>(), dag in any::<bool>()) {
        let g = any_graph(seed, dag);
        let s = summarize(&g);
        let survivors: Vec<&String> = s
            .visible_ids()
            .filter(|id| !s.is_group(id) && g.node(id).is_some_and(|n| n.is_process()))
            .collect();
        for a in &survivors {
            for b in &survivors {
                if a != b {
                    prop_assert_eq!(s.reaches(a, b), replete_reaches(&g, a, b), "{} -> {}", a, b);
                }
            }
        }
    }

    #[test]
    fn summaries_never_grow(seed in any::<u64>(), dag in any::<bool>()) {
        let g = any_graph(seed, dag);
        let s = summarize(&g);
        prop_assert!(s.node_count() <= g.nodes().len());
        prop_assert!(s.edge_count() <= g.edges().len());
    }

    #[test]
    fn summaries_are_deterministic(seed in any::<u64>(), dag in any::<bool>()) {
        let g = any_graph(seed, dag);
        let copy = RepleteGraph::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(summarize(&g).to_json(), summarize(&copy).to_json());
    }

    #[test]
    fn expanding_a_group_reveals_it_step_by_step(seed in any::<u64>()) {
        let g = log_graph(seed);
        let s = summarize(&g);
        let groups: Vec<String> = s.visible_ids().filter(|id| s.is_group(id)).cloned().collect();
        for id in groups {
            let view = s.view();
            prop_assert_eq!(view.nodes.iter().find(|n| n.id == id).unwrap().kind, NodeKind::Group);
            // A host first gives back its annotated files, then splits.
            let once = summarize_expanded(&g, std::slice::from_ref(&id)).unwrap();
            let twice = summarize_expanded(&g, &[id.clone(), id.clone()]).unwrap();
            prop_assert!(once.node_count() > s.node_count());
            prop_assert!(twice.visible_ids().all(|v| v != &id));
            prop_assert!(twice.node_count() >= once.node_count());
        }
    }
}

#[test]
fn workflow_scale_graph_condenses() {
    for seed in 0..20 {
        let w = generators::workflow(seed);
        assert_eq!((w.skeleton_nodes, w.skeleton_edges), (12, 13));
        let g = &w.graph;
        assert!(g.nodes().len() >= 140, "{} nodes", g.nodes().len());
        assert!(g.edges().len() >= 300, "{} edges", g.edges().len());
        let s = summarize(g);
        assert!(s.node_count() <= 25, "{} summary nodes", s.node_count());
        let view = s.view();
        let files_before = file_count(g.nodes().iter().map(|n| n.ntype));
        let files_after = file_count(view.nodes.iter().map(|n| n.ntype));
        assert!(files_after * 5 <= files_before, "{files_after} of {files_before} files remain");
        assert!(s.edge_count() * 10 <= g.edges().len() * 3, "{} of {} edges remain", s.edge_count(), g.edges().len());
        let mut full = s.clone();
        full.expand_all();
        assert_eq!(edge_set(&full.quotient_graph()), edge_set(g));
    }
}

#[test]
fn expanding_an_unknown_id_fails() {
    let g = log_graph(3);
    assert!(summarize_expanded(&g, &["nope".to_string()]).is_err());
}
