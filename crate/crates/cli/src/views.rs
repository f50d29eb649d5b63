//! JSON documents shared by the command line and the API server, so both
//! emit identical bytes.

use serde::{Deserialize, Serialize};

use sciunit_core::container::Sciunit;
use sciunit_core::json::to_canonical_vec;
use sciunit_core::reuse::{execution_graph, plan_for};
use sciunit_core::summarizer::summarize_expanded;
use sciunit_core::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphView {
    #[default]
    Summary,
    Replete,
}

pub fn executions_json(sciunit: &Sciunit) -> Result<Vec<u8>> {
    Ok(to_canonical_vec(&sciunit.list()?))
}

/// Graph of an execution; `expanded` ids are replayed on the summary.
pub fn graph_json(sciunit: &Sciunit, reference: &str, view: GraphView, expanded: &[String]) -> Result<Vec<u8>> {
    let graph = execution_graph(sciunit, reference)?;
    Ok(match view {
        GraphView::Replete => graph.to_json(),
        GraphView::Summary => summarize_expanded(&graph, expanded)?.to_json(),
    })
}

pub fn plan_json(sciunit: &Sciunit, reference: &str, selected: &[String]) -> Result<Vec<u8>> {
    Ok(to_canonical_vec(&plan_for(sciunit, reference, selected)?))
}
