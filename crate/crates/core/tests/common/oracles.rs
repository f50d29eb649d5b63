#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::RngExt;

use sciunit_core::provgraph::{EdgeType, RepleteGraph};
use sciunit_core::reuse::DepRole;

/// Transitive closure by Floyd–Warshall: `m[u][v]` when `u` depends on `v`.
pub fn closure(g: &RepleteGraph) -> Vec<Vec<bool>> {
    let n = g.nodes().len();
    let idx: BTreeMap<&str, usize> = g.nodes().iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut m = vec![vec![false; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = true;
    }
    for e in g.edges() {
        m[idx[e.from.as_str()]][idx[e.to.as_str()]] = true;
    }
    for k in 0..n {
        let via = m[k].clone();
        for row in m.iter_mut() {
            if row[k] {
                for (cell, &reach) in row.iter_mut().zip(&via) {
                    *cell |= reach;
                }
            }
        }
    }
    m
}

pub fn required_oracle(g: &RepleteGraph, selected: &[String]) -> BTreeSet<String> {
    let m = closure(g);
    let nodes = g.nodes();
    let sel: Vec<usize> = selected.iter().map(|s| nodes.iter().position(|n| &n.id == s).unwrap()).collect();
    (0..nodes.len())
        .filter(|&u| nodes[u].is_process() && sel.iter().any(|&s| m[u][s]))
        .map(|u| nodes[u].id.clone())
        .collect()
}

pub fn deps_oracle(g: &RepleteGraph, required: &BTreeSet<String>) -> BTreeMap<String, (DepRole, bool)> {
    let mut out = BTreeMap::new();
    for f in g.files() {
        let mut role = None;
        let mut outside_writer = false;
        for e in g.edges() {
            if e.etype == EdgeType::Read && e.to == f.id && required.contains(&e.from) {
                let r = if e.exec { DepRole::Executed } else { DepRole::Read };
                role = role.max(Some(r));
            }
            if e.etype == EdgeType::Wrote && e.from == f.id {
                if required.contains(&e.to) {
                    role = Some(DepRole::Wrote);
                } else {
                    outside_writer = true;
                }
            }
        }
        if let Some(r) = role {
            out.insert(f.id.clone(), (r, r != DepRole::Wrote && outside_writer));
        }
    }
    out
}

/// One to three process ids drawn from the graph.
pub fn selection(g: &RepleteGraph, seed: u64) -> Vec<String> {
    let mut r = super::generators::rng(seed ^ 0x5eed);
    let procs: Vec<String> = g.processes().map(|p| p.id.clone()).collect();
    let k = r.random_range(1..=procs.len().min(3));
    (0..k).map(|_| procs[r.random_range(0..procs.len())].clone()).collect()
}
