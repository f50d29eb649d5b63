#[path = "common/generators.rs"]
mod generators;
#[path = "common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;

use proptest::prelude::*;

use sciunit_core::reuse::{get_deps, get_procs, plan_partial, DepRole};

use oracles::{closure, deps_oracle, required_oracle, selection};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn required_processes_match_the_closure(seed in any::<u64>()) {
        let g = generators::random_dag(seed, 50);
        let sel = selection(&g, seed);
        prop_assert_eq!(get_procs(&g, &sel).unwrap(), required_oracle(&g, &sel));
    }

    #[test]
    fn dependencies_are_exactly_the_incident_files(seed in any::<u64>()) {
        let g = generators::random_dag(seed, 50);
        let required = required_oracle(&g, &selection(&g, seed));
        let got: BTreeMap<String, (DepRole, bool)> = get_deps(&g, &required)
            .into_iter()
            .map(|d| (d.node_id, (d.role, d.carried_over)))
            .collect();
        prop_assert_eq!(got, deps_oracle(&g, &required));
    }

    #[test]
    fn plans_order_dependencies_first(seed in any::<u64>()) {
        let g = generators::random_dag(seed, 50);
        let sel = selection(&g, seed);
        let plan = plan_partial("e", &g, &sel).unwrap();
        let m = closure(&g);
        let idx = |id: &str| g.nodes().iter().position(|n| n.id == id).unwrap();
        for (i, a) in plan.required_procs.iter().enumerate() {
            for b in &plan.required_procs[i + 1..] {
                prop_assert!(!m[idx(a)][idx(b)] || a == b, "{} depends on later {}", a, b);
            }
        }
        for e in &plan.entry_commands {
            prop_assert!(plan.required_procs.contains(&e.process_id));
        }
    }

    #[test]
    fn selecting_every_process_is_an_exact_plan(seed in any::<u64>()) {
        let g = generators::random_dag(seed, 50);
        let all: Vec<String> = g.processes().map(|p| p.id.clone()).collect();
        let plan = plan_partial("e", &g, &all).unwrap();
        prop_assert!(plan.is_exact(&g));
    }
}

#[test]
fn hundred_dags_under_ten_seconds() {
    let start = std::time::Instant::now();
    for seed in 0..100 {
        let g = generators::random_dag(seed, 50);
        let sel = selection(&g, seed);
        let required = get_procs(&g, &sel).unwrap();
        assert_eq!(required, required_oracle(&g, &sel));
        assert_eq!(get_deps(&g, &required).len(), deps_oracle(&g, &required).len());
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
