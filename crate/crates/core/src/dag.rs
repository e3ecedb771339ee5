//! Execution graph of setup/exec/cleanup nodes compiled from a workflow.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::BenchmarkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Setup,
    Exec,
    Cleanup,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Setup => "setup",
            NodeKind::Exec => "exec",
            NodeKind::Cleanup => "cleanup",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: String,
    pub kind: NodeKind,
    /// Originating workflow node, or `@server` for a shared server's lifecycle nodes.
    pub app_instance: String,
    /// Workflow nodes this node serves; more than one only for shared setup/cleanup.
    pub instances: Vec<String>,
    pub background: bool,
}

impl DagNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, instance: impl Into<String>) -> Self {
        let instance = instance.into();
        Self {
            id: id.into(),
            kind,
            app_instance: instance.clone(),
            instances: vec![instance],
            background: false,
        }
    }
}

pub fn setup_id(unit: &str) -> String {
    format!("setup:{unit}")
}
pub fn exec_id(instance: &str) -> String {
    format!("exec:{instance}")
}
pub fn cleanup_id(unit: &str) -> String {
    format!("cleanup:{unit}")
}

/// Placement unit of a workflow node: the node itself, or `@server` when shared.
pub fn placement_unit(spec: &BenchmarkSpec, node_id: &str) -> String {
    spec.node(node_id)
        .and_then(|n| spec.task_for(n))
        .and_then(|t| t.server.as_ref())
        .map(|s| format!("@{s}"))
        .unwrap_or_else(|| node_id.to_string())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DagError {
    #[error("cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("exec node `{0}` is not preceded by its setup or does not precede its cleanup")]
    Ordering(String),
    #[error("completed set is not downward-closed: `{node}` completed before `{missing}`")]
    Precondition { node: String, missing: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    nodes: Vec<DagNode>,
    edges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl Dag {
    /// Build a graph from explicit nodes and edges; edges are deduplicated.
    pub fn new(nodes: Vec<DagNode>, edges: Vec<(String, String)>) -> Result<Dag, DagError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(DagError::DuplicateNode(n.id.clone()));
            }
        }
        let mut preds = vec![Vec::new(); nodes.len()];
        let mut succs = vec![Vec::new(); nodes.len()];
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(edges.len());
        for (from, to) in edges {
            let f = *index.get(&from).ok_or_else(|| DagError::UnknownNode(from.clone()))?;
            let t = *index.get(&to).ok_or_else(|| DagError::UnknownNode(to.clone()))?;
            if seen.insert((f, t)) {
                succs[f].push(t);
                preds[t].push(f);
                kept.push((from, to));
            }
        }
        Ok(Dag {
            nodes,
            edges: kept,
            index,
            preds,
            succs,
        })
    }

    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&DagNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.preds[i].iter().map(|&p| self.nodes[p].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.succs[i].iter().map(|&s| self.nodes[s].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub(crate) fn pred_indices(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    /// Nodes with in-degree zero, in declaration order.
    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.preds[*i].is_empty())
            .map(|(_, n)| n.id.as_str())
            .collect()
    }

    /// Setup node serving workflow node `instance`.
    pub fn setup_of(&self, instance: &str) -> Option<&DagNode> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Setup && n.instances.iter().any(|i| i == instance))
    }

    pub fn cleanup_of(&self, instance: &str) -> Option<&DagNode> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Cleanup && n.instances.iter().any(|i| i == instance))
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([from]);
        while let Some(i) = queue.pop_front() {
            if i == to {
                return true;
            }
            for &s in &self.succs[i] {
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
        false
    }

    /// A witnessing cycle `[a, b, ..., a]`, or `None` when the graph is acyclic.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        // Kahn's peel; whatever survives lies on or behind a cycle.
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut removed = vec![false; n];
        while let Some(i) = queue.pop_front() {
            removed[i] = true;
            for &s in &self.succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        let start = (0..n).find(|&i| !removed[i])?;
        // Every survivor keeps a surviving predecessor; walk backwards until a repeat.
        let mut order = Vec::new();
        let mut pos = HashMap::new();
        let mut cur = start;
        loop {
            if let Some(&p) = pos.get(&cur) {
                let mut cycle: Vec<usize> = order[p..].to_vec();
                cycle.reverse();
                let first = cycle[0];
                cycle.push(first);
                return Some(cycle.into_iter().map(|i| self.nodes[i].id.clone()).collect());
            }
            pos.insert(cur, order.len());
            order.push(cur);
            cur = *self.preds[cur].iter().find(|&&p| !removed[p])?;
        }
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph workflow {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let shape = match n.kind {
                NodeKind::Setup => "invhouse",
                NodeKind::Exec => "box",
                NodeKind::Cleanup => "house",
            };
            let style = if n.background { ", style=dashed" } else { "" };
            let _ = writeln!(out, "  \"{}\" [shape={shape}{style}];", n.id);
        }
        for (a, b) in &self.edges {
            let _ = writeln!(out, "  \"{a}\" -> \"{b}\";");
        }
        out.push_str("}\n");
        out
    }
}

/// Compile a validated spec into its execution graph.
///
/// Each workflow node contributes a setup -> exec -> cleanup chain; workflow
/// nodes whose tasks name the same `server` share one setup and one cleanup.
/// `depend_on` becomes an exec -> exec edge.
pub fn build_dag(spec: &BenchmarkSpec) -> Dag {
    let unit_of: Vec<String> = spec
        .workflow
        .iter()
        .map(|n| placement_unit(spec, &n.node_id))
        .collect();
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in unit_of.iter().enumerate() {
        members.entry(u.as_str()).or_default().push(i);
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut emitted_setup = HashSet::new();
    for (i, wn) in spec.workflow.iter().enumerate() {
        let unit = unit_of[i].as_str();
        let group = &members[unit];
        let instances: Vec<String> = group.iter().map(|&j| spec.workflow[j].node_id.clone()).collect();
        let all_background = group.iter().all(|&j| spec.workflow[j].background);

        if emitted_setup.insert(unit) {
            nodes.push(DagNode {
                id: setup_id(unit),
                kind: NodeKind::Setup,
                app_instance: unit.to_string(),
                instances: instances.clone(),
                background: all_background,
            });
        }
        nodes.push(DagNode {
            id: exec_id(&wn.node_id),
            kind: NodeKind::Exec,
            app_instance: wn.node_id.clone(),
            instances: vec![wn.node_id.clone()],
            background: wn.background,
        });
        edges.push((setup_id(unit), exec_id(&wn.node_id)));
        edges.push((exec_id(&wn.node_id), cleanup_id(unit)));
        if group.last() == Some(&i) {
            nodes.push(DagNode {
                id: cleanup_id(unit),
                kind: NodeKind::Cleanup,
                app_instance: unit.to_string(),
                instances,
                background: all_background,
            });
        }
    }
    for wn in &spec.workflow {
        for dep in &wn.depend_on {
            edges.push((exec_id(dep), exec_id(&wn.node_id)));
        }
    }
    // Ids are unique and every edge endpoint is emitted above for a valid spec.
    Dag::new(nodes, edges).expect("graph built from a validated spec")
}

/// Ok iff the graph is acyclic and every exec node sits between its setup and cleanup.
pub fn validate_dag(dag: &Dag) -> Result<(), DagError> {
    if let Some(cycle) = dag.find_cycle() {
        return Err(DagError::Cycle(cycle));
    }
    for (i, n) in dag.nodes.iter().enumerate() {
        if n.kind != NodeKind::Exec {
            continue;
        }
        for inst in &n.instances {
            let setup = dag.setup_of(inst).and_then(|s| dag.position(&s.id));
            let cleanup = dag.cleanup_of(inst).and_then(|c| dag.position(&c.id));
            let ok = match (setup, cleanup) {
                (Some(s), Some(c)) => dag.reaches(s, i) && dag.reaches(i, c),
                _ => false,
            };
            if !ok {
                return Err(DagError::Ordering(n.id.clone()));
            }
        }
    }
    Ok(())
}

/// Nodes whose predecessors are all in `completed` and which are not completed
/// themselves, in declaration order.
pub fn ready_set(dag: &Dag, completed: &HashSet<String>) -> Result<Vec<String>, DagError> {
    let mut done = vec![false; dag.len()];
    for id in completed {
        let i = dag.position(id).ok_or_else(|| DagError::UnknownNode(id.clone()))?;
        done[i] = true;
    }
    for (i, n) in dag.nodes.iter().enumerate() {
        if !done[i] {
            continue;
        }
        if let Some(&p) = dag.preds[i].iter().find(|&&p| !done[p]) {
            return Err(DagError::Precondition {
                node: n.id.clone(),
                missing: dag.nodes[p].id.clone(),
            });
        }
    }
    Ok(dag
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| !done[*i] && dag.preds[*i].iter().all(|&p| done[p]))
        .map(|(_, n)| n.id.clone())
        .collect())
}
