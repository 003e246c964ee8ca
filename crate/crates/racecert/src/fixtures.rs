//! Graph generators and pinned fixtures for the experiment suites.

use racecert_core::bounds::{MtauConfig, Recipe};
use racecert_core::budget::CatalogEntry;
use racecert_core::digest::{PrfKey, PublicCaps};
use racecert_core::fixed::Q0_64;
use racecert_core::ledger::Mode;
use racecert_core::prefix_dag::{compile, PrefixDag, SharedDag, SharedEdge, SharedNode};
use racecert_core::race::{Purpose, RngStream};
use racecert_core::search::{Override, RunConfig, DEFAULT_PRF_DOMAIN};

/// Seed of the adversarial fixture, found by `find-adversarial`.
pub const ADVERSARIAL_SEED: u64 = 1;
/// PRF salt (hex) of the tight Fallback fixture, found by
/// `find-adversarial --kind fallback-tight`.
pub const TIGHT_FALLBACK_SALT: &str = "0000000000000000";

/// Seeded generator for graph shapes and costs. Independent of the race.
#[derive(Debug, Clone)]
pub struct Gen(RngStream);

impl Gen {
    pub fn new(seed: u64) -> Self {
        // keep generator streams apart from race seeds
        Gen(RngStream::new(seed ^ 0x6772_6170_6867_656e))
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

/// Incremental builder for shared graphs.
#[derive(Debug, Clone)]
pub struct Builder {
    g: SharedDag,
    orders: std::collections::BTreeMap<String, u64>,
}

impl Builder {
    pub fn new(root: &str, caps: PublicCaps) -> Self {
        let mut b = Builder {
            g: SharedDag { root: root.into(), caps, nodes: Vec::new(), edges: Vec::new() },
            orders: Default::default(),
        };
        b.node(root, false, 0.0);
        b
    }

    pub fn node(&mut self, id: &str, leaf: bool, cost: f64) -> &mut Self {
        self.g.nodes.push(SharedNode { id: id.into(), state: id.into(), leaf, delta_cost: cost, mtau: None });
        self
    }

    pub fn hint(&mut self, id: &str, m: f64) -> &mut Self {
        self.g.nodes.iter_mut().find(|n| n.id == id).expect("known node").mtau = Some(m);
        self
    }

    pub fn edge(&mut self, from: &str, to: &str) -> &mut Self {
        let o = self.orders.entry(from.into()).or_insert(0);
        self.g.edges.push(SharedEdge { from: from.into(), to: to.into(), order: *o });
        *o += 1;
        self
    }

    pub fn build(&self) -> SharedDag {
        self.g.clone()
    }
}

pub fn compiled(g: &SharedDag) -> PrefixDag {
    let (dag, cert) = compile(g).expect("fixture compiles");
    assert!(cert.is_ok(), "fixture certificate fails: {:?}", cert.witnesses());
    dag
}

fn caps(max_depth: u32, c_s_min: f64) -> PublicCaps {
    // scores never increase along a path
    PublicCaps { max_depth, c_s_max: 0.0, c_s_min }
}

/// Root `r` with `u1` (leaves P1..P3) and `u2` (leaf P4), shipping the
/// bounds 5, 4.5 and 4.2 as hints.
pub fn toy_graph() -> SharedDag {
    let mut b = Builder::new("r", PublicCaps { max_depth: 2, c_s_max: 2.5, c_s_min: 0.1 });
    b.node("u1", false, 0.0).node("u2", false, 0.0);
    b.node("P1", true, 0.2).node("P2", true, 0.5).node("P3", true, 0.9).node("P4", true, 0.3);
    b.edge("r", "u1").edge("r", "u2");
    b.edge("u1", "P1").edge("u1", "P2").edge("u1", "P3").edge("u2", "P4");
    b.hint("r", 5.0).hint("u1", 4.5).hint("u2", 4.2);
    b.build()
}

pub const TOY_U_ROOT: f64 = 0.20;
pub const TOY_W_ROOT: f64 = 0.70;
pub const TOY_U_U2: f64 = 0.37;
pub const TOY_NUB_FACTOR: f64 = 1.5;

/// Toy replay configuration with the scripted uniforms and hinted bounds.
pub fn toy_config(dag: &PrefixDag, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::for_dag(dag, mode, 0);
    cfg.mtau = MtauConfig::for_dag(Recipe::Given, dag);
    cfg.n_ub_factor = TOY_NUB_FACTOR;
    let node = |label: &str| dag.nodes().find(|(_, n)| n.state_label == label).unwrap().1.digest;
    let o = |label: &str, purpose: Purpose, u: f64| Override { ctx_digest: node(label), purpose, u: Q0_64::from_value(u) };
    cfg.overrides = vec![
        o("r", Purpose::Root, TOY_U_ROOT),
        o("r", Purpose::Winner, TOY_W_ROOT),
        o("u2", Purpose::Residual, TOY_U_U2),
    ];
    cfg
}

/// One internal node over two zero-cost leaves.
pub fn two_leaf_graph() -> SharedDag {
    let mut b = Builder::new("v", caps(1, 0.1));
    b.node("P1", true, 0.0).node("P2", true, 0.0).edge("v", "P1").edge("v", "P2");
    b.build()
}

/// Balanced tree of the given depth and branching; edge costs uniform in
/// `[0.1, 1]`.
pub fn balanced(depth: u32, branching: usize, seed: u64) -> SharedDag {
    let mut g = Gen::new(seed);
    let mut b = Builder::new("n", caps(depth, 0.1));
    let mut level = vec![String::from("n")];
    for d in 1..=depth {
        let mut next = Vec::new();
        for p in &level {
            for i in 0..branching {
                let id = format!("{p}.{i}");
                b.node(&id, d == depth, g.range(0.1, 1.0)).edge(p, &id);
                next.push(id);
            }
        }
        level = next;
    }
    b.build()
}

/// Layered shared graph: every node links to `branching` distinct nodes of
/// the next layer, so subgraphs are reused across contexts and compile to
/// `branching^layers` prefix leaves.
pub fn layered(layers: u32, branching: usize, seed: u64) -> SharedDag {
    let mut g = Gen::new(seed);
    let width = 2 * branching;
    let mut b = Builder::new("root", caps(layers, 0.1));
    let mut prev = vec![String::from("root")];
    for k in 1..=layers {
        let layer: Vec<String> = (0..width).map(|i| format!("L{k}n{i}")).collect();
        for id in &layer {
            b.node(id, k == layers, g.range(0.1, 1.0));
        }
        for p in &prev {
            let mut pool: Vec<usize> = (0..width).collect();
            for _ in 0..branching {
                let j = pool.remove(g.int(0, pool.len() - 1));
                b.edge(p, &layer[j]);
            }
        }
        prev = layer;
    }
    b.build()
}

/// Random shared graph with at most `max_leaves` compiled leaves: random
/// layer widths, fan-outs, early leaves and reuse.
pub fn random_graph(seed: u64, max_leaves: u64) -> SharedDag {
    for attempt in 0u64.. {
        let mut g = Gen::new(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let layers = g.int(2, 6) as u32;
        let mut b = Builder::new("s", caps(layers, 0.05));
        let mut prev = vec![String::from("s")];
        for k in 1..=layers {
            let width = g.int(2, 6);
            let layer: Vec<String> = (0..width).map(|i| format!("x{k}_{i}")).collect();
            for id in &layer {
                b.node(id, k == layers, g.range(0.05, 1.5));
            }
            let mut next = Vec::new();
            for p in &prev {
                let fan = g.int(1, width.min(4));
                let mut pool: Vec<usize> = (0..width).collect();
                for _ in 0..fan {
                    let j = pool.remove(g.int(0, pool.len() - 1));
                    b.edge(p, &layer[j]);
                }
            }
            // some non-final nodes become early leaves
            for id in &layer {
                if k < layers && g.chance(0.15) {
                    b.g.nodes.iter_mut().find(|n| &n.id == id).unwrap().leaf = true;
                } else {
                    next.push(id.clone());
                }
            }
            if next.is_empty() {
                break;
            }
            prev = next;
        }
        let shared = b.build();
        let shared = prune_unreachable_edges(shared);
        if let Ok((dag, cert)) = compile(&shared) {
            let leaves = dag.leaves().count() as u64;
            if cert.is_ok() && leaves >= 1 && leaves <= max_leaves {
                return shared;
            }
        }
    }
    unreachable!()
}

/// Drops edges out of leaves and internal nodes left without children.
fn prune_unreachable_edges(mut g: SharedDag) -> SharedDag {
    let leaf: std::collections::BTreeSet<String> = g.nodes.iter().filter(|n| n.leaf).map(|n| n.id.clone()).collect();
    g.edges.retain(|e| !leaf.contains(&e.from));
    loop {
        let has_kids: std::collections::BTreeSet<&str> = g.edges.iter().map(|e| e.from.as_str()).collect();
        let dead: Vec<String> =
            g.nodes.iter().filter(|n| !n.leaf && !has_kids.contains(n.id.as_str())).map(|n| n.id.clone()).collect();
        let dead: Vec<String> = dead.into_iter().filter(|d| *d != g.root).collect();
        if dead.is_empty() {
            break;
        }
        g.nodes.retain(|n| !dead.contains(&n.id));
        g.edges.retain(|e| !dead.contains(&e.to));
    }
    let mut seen = std::collections::BTreeMap::new();
    for e in &mut g.edges {
        let o = seen.entry(e.from.clone()).or_insert(0u64);
        e.order = *o;
        *o += 1;
    }
    g
}

/// Random tree with branching at most two.
pub fn random_binary(seed: u64) -> SharedDag {
    let mut g = Gen::new(seed.wrapping_add(0x6269));
    let depth = g.int(2, 5) as u32;
    let mut b = Builder::new("b", caps(depth, 0.1));
    let mut level = vec![String::from("b")];
    for d in 1..=depth {
        let mut next = Vec::new();
        for p in &level {
            let fan = g.int(1, 2);
            for i in 0..fan {
                let id = format!("{p}{i}");
                let leaf = d == depth || g.chance(0.2);
                b.node(&id, leaf, g.range(0.1, 1.0)).edge(p, &id);
                if !leaf {
                    next.push(id);
                }
            }
        }
        level = next;
        if level.is_empty() {
            break;
        }
    }
    b.build()
}

/// Depth-2 binary tree with zero costs, so every bound is 0.
pub fn binary_zero_cost() -> SharedDag {
    let mut b = Builder::new("t", caps(2, 0.1));
    for i in 0..2 {
        let u = format!("t{i}");
        b.node(&u, false, 0.0).edge("t", &u);
        for j in 0..2 {
            let p = format!("{u}{j}");
            b.node(&p, true, 0.0).edge(&u, &p);
        }
    }
    b.build()
}

pub fn salt_bytes(hex: &str) -> Vec<u8> {
    racecert_core::digest::hex_decode(hex).expect("salt is hex")
}

pub fn tight_fallback_config(dag: &PrefixDag, salt_hex: &str) -> RunConfig {
    let mut cfg = RunConfig::for_dag(dag, Mode::Fallback, 0);
    cfg.prf = PrfKey::new(&salt_bytes(salt_hex), DEFAULT_PRF_DOMAIN);
    cfg
}

/// Root over a zero-cost leaf `a` and a costly subtree `b` with many leaves.
/// The expected minimum arrival makes `b` look hopeless; realized races
/// where `b` holds the winner expose distribution-level pruning.
pub fn adversarial_graph() -> SharedDag {
    let mut b = Builder::new("q", caps(2, 0.1));
    b.node("a", true, 0.0).node("b", false, 2.5).edge("q", "a").edge("q", "b");
    for i in 0..8 {
        let id = format!("b{i}");
        b.node(&id, true, 0.0).edge("b", &id);
    }
    b.build()
}

/// Retrieval, summarize, calculator pipeline for one query. Summarizers and
/// calculators are shared across contexts.
pub fn pipeline(query: u64) -> SharedDag {
    let mut g = Gen::new(query.wrapping_mul(7919).wrapping_add(0x7069));
    let mut b = Builder::new("query", caps(3, 0.05));
    let (nr, ns, nc) = (g.int(5, 8), g.int(3, 4), g.int(2, 3));
    for i in 0..nr {
        b.node(&format!("retrieve{i}"), false, g.range(0.05, 1.0));
    }
    for j in 0..ns {
        b.node(&format!("summarize{j}"), false, g.range(0.05, 1.0));
    }
    for k in 0..nc {
        b.node(&format!("calc{k}"), true, g.range(0.05, 1.0));
    }
    for i in 0..nr {
        b.edge("query", &format!("retrieve{i}"));
        for j in 0..ns {
            b.edge(&format!("retrieve{i}"), &format!("summarize{j}"));
        }
    }
    for j in 0..ns {
        for k in 0..nc {
            b.edge(&format!("summarize{j}"), &format!("calc{k}"));
        }
    }
    b.build()
}

/// Adapter catalog: three DP-trained adapters plus the base model.
pub fn default_catalog() -> Vec<CatalogEntry> {
    let e = |id: &str, adapter: &str, cert: &str, eps: f64, price: u64, latency: u32, gain: f64| CatalogEntry {
        model_id: id.into(),
        adapter_id: adapter.into(),
        dp_cert_id: cert.into(),
        eps_train: eps,
        delta_train: 1e-6,
        price_m: price,
        latency_m: latency,
        eps_m: 0.0,
        gain,
    };
    vec![
        e("base", "none", "none", 0.0, 1, 40, 0.2),
        e("lora-a-small", "LoRA-A-small", "certA", 2.0, 2, 60, 0.5),
        e("lora-b-medium", "LoRA-B-medium", "certB", 3.5, 3, 90, 0.8),
        e("lora-c-large", "LoRA-C-large", "certC", 6.0, 5, 150, 1.2),
    ]
}
