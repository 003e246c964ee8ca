//! Shared-node DAGs and their compilation into context-indexed prefix DAGs.
//!
//! Every node of the compiled graph is keyed by the digest of its full
//! root path, so a state reached along two different paths becomes two
//! nodes and the leaf sets of siblings are disjoint by construction. The
//! certificate re-derives that property independently from the leaf side.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Index;

use serde::{Deserialize, Serialize};

use crate::digest::{CtxHasher, Digest, PublicCaps};

/// Counts above this are treated as overflow.
pub const COUNT_LIMIT: u64 = i64::MAX as u64;

/// Default bound on the number of compiled nodes.
pub const DEFAULT_NODE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedNode {
    pub id: String,
    pub state: String,
    pub leaf: bool,
    /// Cost paid on entering this node; the deterministic score of a path is
    /// minus the sum of these.
    pub delta_cost: f64,
    /// Optional externally certified score bound for fixtures that ship
    /// their own admissible bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedEdge {
    pub from: String,
    pub to: String,
    pub order: u64,
}

/// Input graph, possibly with shared substructure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedDag {
    pub root: String,
    pub caps: PublicCaps,
    pub nodes: Vec<SharedNode>,
    pub edges: Vec<SharedEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileError {
    UnknownRoot(String),
    DuplicateNode(String),
    UnknownEndpoint { from: String, to: String },
    DuplicateEdgeOrder { parent: String, order: u64 },
    LeafWithChildren(String),
    InvalidCost(String),
    InvalidCaps,
    CycleDetected { node: String },
    DepthCapExceeded { node: String, depth: u64, max_depth: u32 },
    DigestCollision { first: Digest, second: Digest },
    TooManyNodes { limit: usize },
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use CompileError::*;
        match self {
            UnknownRoot(id) => write!(f, "root {id:?} is not a node"),
            DuplicateNode(id) => write!(f, "duplicate node id {id:?}"),
            UnknownEndpoint { from, to } => write!(f, "edge {from:?} -> {to:?} names an unknown node"),
            DuplicateEdgeOrder { parent, order } => {
                write!(f, "edge order {order} used twice under {parent:?}")
            }
            LeafWithChildren(id) => write!(f, "leaf {id:?} has outgoing edges"),
            InvalidCost(id) => write!(f, "node {id:?} has a negative or non-finite cost"),
            InvalidCaps => f.write_str("caps need c_s_max >= 0 and c_s_min > 0"),
            CycleDetected { node } => write!(f, "cycle through {node:?} is reachable from the root"),
            DepthCapExceeded { node, depth, max_depth } => {
                write!(f, "path to {node:?} has depth {depth} > max_depth {max_depth}")
            }
            DigestCollision { first, second } => {
                write!(f, "context digest collision between {first} and {second}")
            }
            TooManyNodes { limit } => write!(f, "compiled graph exceeds {limit} nodes"),
        }
    }
}

impl core::error::Error for CompileError {}

/// Suffix count overflowed or was unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountFail;

impl fmt::Display for CountFail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("suffix count unavailable (overflow)")
    }
}

impl core::error::Error for CountFail {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIx(pub u32);

impl NodeIx {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixNode {
    pub digest: Digest,
    pub ctx_repr: String,
    pub state_label: String,
    pub shared_id: String,
    pub depth: u32,
    pub edge_order: u64,
    pub delta_cost: f64,
    /// Deterministic score of the prefix ending at this node.
    pub prefix_score: f64,
    pub parent: Option<NodeIx>,
    /// Children in edge order.
    pub children: Vec<NodeIx>,
    pub is_leaf: bool,
    pub n_exact: Option<u64>,
    pub n_ub: Option<u64>,
    pub mtau_hint: Option<f64>,
}

/// Compiled graph. Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDag {
    pub caps: PublicCaps,
    nodes: Vec<PrefixNode>,
    by_digest: BTreeMap<Digest, NodeIx>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompileCertificate {
    /// (internal node, children partition its leaf set)
    pub partition_ok: Vec<(Digest, bool)>,
    /// (node, suffix count is finite and available)
    pub finiteness_ok: Vec<(Digest, bool)>,
    pub digest_collisions: Vec<(Digest, Digest)>,
    pub total_leaves: u64,
}

impl CompileCertificate {
    pub fn is_ok(&self) -> bool {
        self.digest_collisions.is_empty()
            && self.partition_ok.iter().all(|(_, ok)| *ok)
            && self.finiteness_ok.iter().all(|(_, ok)| *ok)
    }

    /// Nodes that witness a failed check.
    pub fn witnesses(&self) -> Vec<Digest> {
        let mut out: Vec<Digest> = self
            .partition_ok
            .iter()
            .chain(&self.finiteness_ok)
            .filter(|(_, ok)| !ok)
            .map(|(d, _)| *d)
            .collect();
        for (a, b) in &self.digest_collisions {
            out.push(*a);
            out.push(*b);
        }
        out
    }
}

impl SharedDag {
    fn index(&self) -> Result<BTreeMap<&str, usize>, CompileError> {
        let mut ix = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if ix.insert(n.id.as_str(), i).is_some() {
                return Err(CompileError::DuplicateNode(n.id.clone()));
            }
            if !(n.delta_cost.is_finite() && n.delta_cost >= 0.0) {
                return Err(CompileError::InvalidCost(n.id.clone()));
            }
        }
        Ok(ix)
    }

    /// Validate structure and return adjacency (children in edge order).
    pub fn adjacency(&self) -> Result<(usize, Vec<Vec<(u64, usize)>>), CompileError> {
        let caps_ok = self.caps.c_s_max.is_finite()
            && self.caps.c_s_max >= 0.0
            && self.caps.c_s_min.is_finite()
            && self.caps.c_s_min > 0.0;
        if !caps_ok {
            return Err(CompileError::InvalidCaps);
        }
        let ix = self.index()?;
        let root = *ix
            .get(self.root.as_str())
            .ok_or_else(|| CompileError::UnknownRoot(self.root.clone()))?;
        let mut adj: Vec<Vec<(u64, usize)>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (Some(&from), Some(&to)) = (ix.get(e.from.as_str()), ix.get(e.to.as_str())) else {
                return Err(CompileError::UnknownEndpoint { from: e.from.clone(), to: e.to.clone() });
            };
            if self.nodes[from].leaf {
                return Err(CompileError::LeafWithChildren(e.from.clone()));
            }
            if adj[from].iter().any(|(o, _)| *o == e.order) {
                return Err(CompileError::DuplicateEdgeOrder { parent: e.from.clone(), order: e.order });
            }
            adj[from].push((e.order, to));
        }
        for children in &mut adj {
            children.sort_unstable();
        }
        Ok((root, adj))
    }

    /// Reject cycles reachable from the root and paths longer than the cap.
    /// Returns the longest root path (in edges) to each reachable node.
    fn check_acyclic_and_depth(
        &self,
        root: usize,
        adj: &[Vec<(u64, usize)>],
    ) -> Result<Vec<Option<u64>>, CompileError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let n = self.nodes.len();
        let mut mark = vec![Mark::New; n];
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Open;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&(_, c)) = adj[v].get(*next) {
                *next += 1;
                match mark[c] {
                    Mark::Open => {
                        return Err(CompileError::CycleDetected { node: self.nodes[c].id.clone() })
                    }
                    Mark::New => {
                        mark[c] = Mark::Open;
                        stack.push((c, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                order.push(v);
                stack.pop();
            }
        }
        // reverse post-order is topological
        let mut longest: Vec<Option<u64>> = vec![None; n];
        longest[root] = Some(0);
        for &v in order.iter().rev() {
            let Some(d) = longest[v] else { continue };
            if d > self.caps.max_depth as u64 {
                return Err(CompileError::DepthCapExceeded {
                    node: self.nodes[v].id.clone(),
                    depth: d,
                    max_depth: self.caps.max_depth,
                });
            }
            for &(_, c) in &adj[v] {
                longest[c] = Some(longest[c].map_or(d + 1, |x| x.max(d + 1)));
            }
        }
        Ok(longest)
    }
}

/// Number of distinct paths from each shared node to a leaf, memoized over
/// the shared graph. `None` marks overflow past `COUNT_LIMIT`.
pub fn shared_suffix_counts(dag: &SharedDag) -> Result<Vec<Option<u64>>, CompileError> {
    let (root, adj) = dag.adjacency()?;
    dag.check_acyclic_and_depth(root, &adj)?;
    let n = dag.nodes.len();
    let mut memo: Vec<Option<Option<u64>>> = vec![None; n];
    let mut stack = vec![(root, false)];
    while let Some((v, expanded)) = stack.pop() {
        if memo[v].is_some() {
            continue;
        }
        if dag.nodes[v].leaf {
            memo[v] = Some(Some(1));
            continue;
        }
        if !expanded {
            stack.push((v, true));
            for &(_, c) in &adj[v] {
                if memo[c].is_none() {
                    stack.push((c, false));
                }
            }
            continue;
        }
        let mut total: Option<u64> = Some(0);
        for &(_, c) in &adj[v] {
            total = match (total, memo[c].flatten()) {
                (Some(a), Some(b)) => a.checked_add(b).filter(|s| *s <= COUNT_LIMIT),
                _ => None,
            };
        }
        memo[v] = Some(total);
    }
    Ok(memo.into_iter().map(|m| m.flatten()).collect())
}

/// Exact suffix count of a shared node.
pub fn suffix_count_shared(dag: &SharedDag, node_id: &str) -> Result<Result<u64, CountFail>, CompileError> {
    let counts = shared_suffix_counts(dag)?;
    let ix = dag.index()?;
    let i = *ix.get(node_id).ok_or_else(|| CompileError::UnknownRoot(node_id.to_string()))?;
    Ok(counts[i].ok_or(CountFail))
}

pub fn compile(dag: &SharedDag) -> Result<(PrefixDag, CompileCertificate), CompileError> {
    compile_with_limit(dag, DEFAULT_NODE_LIMIT)
}

pub fn compile_with_limit(
    dag: &SharedDag,
    node_limit: usize,
) -> Result<(PrefixDag, CompileCertificate), CompileError> {
    let (root, adj) = dag.adjacency()?;
    dag.check_acyclic_and_depth(root, &adj)?;

    let mut nodes: Vec<PrefixNode> = Vec::new();
    let mut hashers: Vec<CtxHasher> = Vec::new();
    let mut shared_of: Vec<usize> = Vec::new();

    let mut root_hasher = CtxHasher::new(&dag.caps);
    let rn = &dag.nodes[root];
    root_hasher.push(&rn.state, 0);
    nodes.push(PrefixNode {
        digest: root_hasher.digest(),
        ctx_repr: rn.state.clone(),
        state_label: rn.state.clone(),
        shared_id: rn.id.clone(),
        depth: 0,
        edge_order: 0,
        delta_cost: rn.delta_cost,
        prefix_score: -rn.delta_cost,
        parent: None,
        children: Vec::new(),
        is_leaf: rn.leaf,
        n_exact: None,
        n_ub: None,
        mtau_hint: rn.mtau,
    });
    hashers.push(root_hasher);
    shared_of.push(root);

    // breadth-first so node indices grow with depth
    let mut head = 0;
    while head < nodes.len() {
        let p = head;
        head += 1;
        let sp = shared_of[p];
        for &(order, c) in &adj[sp] {
            if nodes.len() >= node_limit {
                return Err(CompileError::TooManyNodes { limit: node_limit });
            }
            let sn = &dag.nodes[c];
            let mut h = hashers[p].clone();
            h.push(&sn.state, order);
            let ix = NodeIx(nodes.len() as u32);
            let parent = &nodes[p];
            let node = PrefixNode {
                digest: h.digest(),
                ctx_repr: truncated_repr(&parent.ctx_repr, &sn.state, order),
                state_label: sn.state.clone(),
                shared_id: sn.id.clone(),
                depth: parent.depth + 1,
                edge_order: order,
                delta_cost: sn.delta_cost,
                prefix_score: parent.prefix_score - sn.delta_cost,
                parent: Some(NodeIx(p as u32)),
                children: Vec::new(),
                is_leaf: sn.leaf,
                n_exact: None,
                n_ub: None,
                mtau_hint: sn.mtau,
            };
            nodes[p].children.push(ix);
            nodes.push(node);
            hashers.push(h);
            shared_of.push(c);
        }
    }

    let mut by_digest = BTreeMap::new();
    let mut cert = CompileCertificate::default();
    for (i, n) in nodes.iter().enumerate() {
        if let Some(prev) = by_digest.insert(n.digest, NodeIx(i as u32)) {
            // keep the first occurrence addressable
            by_digest.insert(n.digest, prev);
            cert.digest_collisions.push((nodes[prev.idx()].digest, n.digest));
        }
    }

    let mut pdag = PrefixDag { caps: dag.caps, nodes, by_digest };
    pdag.compute_counts();
    pdag.certify(&mut cert);
    Ok((pdag, cert))
}

fn truncated_repr(parent: &str, state: &str, order: u64) -> String {
    const MAX: usize = 96;
    let mut s = String::with_capacity(parent.len() + state.len() + 8);
    s.push_str(parent);
    s.push('/');
    s.push_str(state);
    s.push('#');
    s.push_str(&order.to_string());
    if s.len() > MAX {
        let cut = s.len() - (MAX - 3);
        let mut start = cut;
        while !s.is_char_boundary(start) {
            start += 1;
        }
        s = alloc::format!("...{}", &s[start..]);
    }
    s
}

impl Index<NodeIx> for PrefixDag {
    type Output = PrefixNode;
    fn index(&self, ix: NodeIx) -> &PrefixNode {
        &self.nodes[ix.idx()]
    }
}

impl PrefixDag {
    pub const ROOT: NodeIx = NodeIx(0);

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeIx {
        Self::ROOT
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeIx, &PrefixNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeIx(i as u32), n))
    }

    pub fn lookup(&self, digest: &Digest) -> Option<NodeIx> {
        self.by_digest.get(digest).copied()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeIx> + '_ {
        self.nodes().filter(|(_, n)| n.is_leaf).map(|(i, _)| i)
    }

    /// Leaves below `ix` in depth-first edge order.
    pub fn leaves_below(&self, ix: NodeIx) -> Vec<NodeIx> {
        let mut out = Vec::new();
        let mut stack = vec![ix];
        while let Some(v) = stack.pop() {
            let n = &self[v];
            if n.is_leaf {
                out.push(v);
            }
            stack.extend(n.children.iter().rev().copied());
        }
        out
    }

    /// Canonical leaf identifiers below `ix`, materialized on demand.
    pub fn leaf_ids(&self, ix: NodeIx) -> BTreeSet<Digest> {
        self.leaves_below(ix).into_iter().map(|l| self[l].digest).collect()
    }

    /// Ancestors of `ix` from its parent up to the root.
    pub fn ancestors(&self, ix: NodeIx) -> impl Iterator<Item = NodeIx> + '_ {
        core::iter::successors(self[ix].parent, move |p| self[*p].parent)
    }

    pub fn suffix_count(&self, ix: NodeIx) -> Result<u64, CountFail> {
        self[ix].n_exact.ok_or(CountFail)
    }

    /// Set `n_ub = max(n, ceil(factor * n))` wherever an exact count exists.
    pub fn assign_upper_bounds(&mut self, factor: f64) {
        assert!(factor >= 1.0, "upper-bound factor must be >= 1");
        for n in &mut self.nodes {
            n.n_ub = n.n_exact.map(|c| {
                let scaled = libm::ceil(c as f64 * factor);
                let scaled = if scaled >= COUNT_LIMIT as f64 { COUNT_LIMIT } else { scaled as u64 };
                scaled.max(c)
            });
        }
    }

    pub fn set_upper_bound(&mut self, ix: NodeIx, n_ub: Option<u64>) {
        self.nodes[ix.idx()].n_ub = n_ub;
    }

    pub fn set_exact_count(&mut self, ix: NodeIx, n: Option<u64>) {
        self.nodes[ix.idx()].n_exact = n;
    }

    /// Nodes in the order they were created (breadth-first).
    fn compute_counts(&mut self) {
        for i in (0..self.nodes.len()).rev() {
            let n = &self.nodes[i];
            let count = if n.is_leaf {
                Some(1)
            } else {
                let mut total = Some(0u64);
                for c in &n.children {
                    total = match (total, self.nodes[c.idx()].n_exact) {
                        (Some(a), Some(b)) => a.checked_add(b).filter(|s| *s <= COUNT_LIMIT),
                        _ => None,
                    };
                }
                total
            };
            self.nodes[i].n_exact = count;
        }
    }

    /// Partition check from the leaf side: each leaf is credited to every
    /// ancestor by walking parent links, then every internal node's set is
    /// compared against its children's sets.
    fn certify(&self, cert: &mut CompileCertificate) {
        let mut sets: Vec<BTreeSet<Digest>> = vec![BTreeSet::new(); self.nodes.len()];
        let mut total = 0u64;
        for leaf in self.leaves() {
            total += 1;
            let id = self[leaf].digest;
            sets[leaf.idx()].insert(id);
            for a in self.ancestors(leaf) {
                sets[a.idx()].insert(id);
            }
        }
        cert.total_leaves = total;
        for (ix, n) in self.nodes() {
            let counted = n.n_exact;
            let finite = counted.is_some_and(|c| c == sets[ix.idx()].len() as u64);
            cert.finiteness_ok.push((n.digest, finite));
            if n.is_leaf {
                continue;
            }
            let mut union = BTreeSet::new();
            let mut disjoint = true;
            for c in &n.children {
                for id in &sets[c.idx()] {
                    disjoint &= union.insert(*id);
                }
            }
            let siblings_distinct = {
                let ds: BTreeSet<Digest> = n.children.iter().map(|c| self[*c].digest).collect();
                ds.len() == n.children.len()
            };
            let ok = disjoint && siblings_distinct && union == sets[ix.idx()];
            cert.partition_ok.push((n.digest, ok));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    pub(crate) fn node(id: &str, leaf: bool, cost: f64) -> SharedNode {
        SharedNode { id: id.into(), state: id.into(), leaf, delta_cost: cost, mtau: None }
    }

    pub(crate) fn edge(from: &str, to: &str, order: u64) -> SharedEdge {
        SharedEdge { from: from.into(), to: to.into(), order }
    }

    fn caps(max_depth: u32) -> PublicCaps {
        PublicCaps { max_depth, c_s_max: 1.0, c_s_min: 0.1 }
    }

    fn diamond() -> SharedDag {
        SharedDag {
            root: "root".into(),
            caps: caps(4),
            nodes: vec![node("root", false, 0.0), node("A", false, 0.5), node("B", false, 0.2), node("C", true, 0.1)],
            edges: vec![edge("root", "A", 0), edge("root", "B", 1), edge("A", "C", 0), edge("B", "C", 0)],
        }
    }

    #[test]
    fn diamond_is_resolved_by_context() {
        let (dag, cert) = compile(&diamond()).unwrap();
        assert!(cert.is_ok());
        assert_eq!(dag.len(), 5);
        assert_eq!(dag[dag.root()].n_exact, Some(2));
        let leaves: Vec<_> = dag.leaves().collect();
        assert_eq!(leaves.len(), 2);
        assert_ne!(dag[leaves[0]].digest, dag[leaves[1]].digest);
        assert_eq!(dag[leaves[0]].state_label, "C");
        assert_eq!(dag[leaves[1]].state_label, "C");
        // scores accumulate along each context separately
        assert_eq!(dag[leaves[0]].prefix_score, -0.6);
        assert_eq!(dag[leaves[1]].prefix_score, -0.30000000000000004);
        assert_eq!(cert.total_leaves, 2);
    }

    #[test]
    fn tree_input_is_isomorphic() {
        let g = SharedDag {
            root: "r".into(),
            caps: caps(3),
            nodes: vec![node("r", false, 0.0), node("a", false, 0.0), node("b", true, 0.0), node("c", true, 0.0), node("d", true, 0.0)],
            edges: vec![edge("r", "a", 0), edge("r", "b", 1), edge("a", "c", 0), edge("a", "d", 1)],
        };
        let (dag, cert) = compile(&g).unwrap();
        assert!(cert.is_ok());
        assert_eq!(dag.len(), g.nodes.len());
        assert_eq!(dag[dag.root()].n_exact, Some(3));
        let ids: Vec<_> = dag.nodes().map(|(_, n)| n.shared_id.clone()).collect();
        assert_eq!(ids, ["r", "a", "b", "c", "d"]);
    }

    #[test]
    fn balanced_tree_counts() {
        let mut g = SharedDag { root: "n".into(), caps: caps(3), nodes: vec![], edges: vec![] };
        fn build(g: &mut SharedDag, id: String, depth: u32) {
            g.nodes.push(node(&id, depth == 3, 0.0));
            if depth < 3 {
                for k in 0..3 {
                    let c = format!("{id}{k}");
                    g.edges.push(edge(&id, &c, k));
                    build(g, c, depth + 1);
                }
            }
        }
        build(&mut g, "n".into(), 0);
        let (dag, _) = compile(&g).unwrap();
        assert_eq!(dag.suffix_count(dag.root()), Ok(27));
        let leaf = dag.leaves().next().unwrap();
        assert_eq!(dag.suffix_count(leaf), Ok(1));
    }

    #[test]
    fn cycles_are_rejected() {
        let mut g = diamond();
        g.nodes[3].leaf = false;
        g.edges.push(edge("C", "A", 0));
        assert!(matches!(compile(&g), Err(CompileError::CycleDetected { .. })));
    }

    #[test]
    fn depth_cap_is_enforced_not_truncated() {
        let mut g = diamond();
        g.caps.max_depth = 1;
        assert!(matches!(compile(&g), Err(CompileError::DepthCapExceeded { depth: 2, .. })));
    }

    #[test]
    fn structural_errors() {
        let mut g = diamond();
        g.root = "nope".into();
        assert!(matches!(compile(&g), Err(CompileError::UnknownRoot(_))));
        let mut g = diamond();
        g.edges.push(edge("A", "B", 0));
        assert!(matches!(compile(&g), Err(CompileError::DuplicateEdgeOrder { .. })));
        let mut g = diamond();
        g.edges.push(edge("C", "B", 0));
        assert!(matches!(compile(&g), Err(CompileError::LeafWithChildren(_))));
        let mut g = diamond();
        g.nodes.push(node("A", true, 0.0));
        assert!(matches!(compile(&g), Err(CompileError::DuplicateNode(_))));
        let mut g = diamond();
        g.nodes[1].delta_cost = -1.0;
        assert!(matches!(compile(&g), Err(CompileError::InvalidCost(_))));
        let mut g = diamond();
        g.edges.push(edge("A", "Z", 3));
        assert!(matches!(compile(&g), Err(CompileError::UnknownEndpoint { .. })));
    }

    #[test]
    fn node_limit_is_an_error() {
        assert!(matches!(compile_with_limit(&diamond(), 3), Err(CompileError::TooManyNodes { limit: 3 })));
    }

    #[test]
    fn overflowing_suffix_count_is_count_fail() {
        // 64 stacked diamonds: 2^64 paths from the top
        let mut g = SharedDag { root: "d0".into(), caps: caps(200), nodes: vec![], edges: vec![] };
        for i in 0..64 {
            g.nodes.push(node(&format!("d{i}"), false, 0.0));
            g.nodes.push(node(&format!("l{i}"), false, 0.0));
            g.nodes.push(node(&format!("r{i}"), false, 0.0));
            g.edges.push(edge(&format!("d{i}"), &format!("l{i}"), 0));
            g.edges.push(edge(&format!("d{i}"), &format!("r{i}"), 1));
            g.edges.push(edge(&format!("l{i}"), &format!("d{}", i + 1), 0));
            g.edges.push(edge(&format!("r{i}"), &format!("d{}", i + 1), 0));
        }
        g.nodes.push(node("d64", true, 0.0));
        assert_eq!(suffix_count_shared(&g, "d0").unwrap(), Err(CountFail));
        assert_eq!(suffix_count_shared(&g, "d2").unwrap(), Ok(1 << 62));
        assert!(matches!(compile_with_limit(&g, 10_000), Err(CompileError::TooManyNodes { .. })));
    }

    #[test]
    fn upper_bounds_dominate_counts() {
        let (mut dag, _) = compile(&diamond()).unwrap();
        dag.assign_upper_bounds(1.5);
        for (_, n) in dag.nodes() {
            assert!(n.n_ub.unwrap() >= n.n_exact.unwrap());
        }
        assert_eq!(dag[dag.root()].n_ub, Some(3));
    }

    #[test]
    fn certificate_names_witnesses() {
        let (mut dag, _) = compile(&diamond()).unwrap();
        dag.set_exact_count(dag.root(), None);
        let mut cert = CompileCertificate::default();
        dag.certify(&mut cert);
        assert!(!cert.is_ok());
        assert_eq!(cert.witnesses(), [dag[dag.root()].digest]);
    }
}
