//! Best-first search over a compiled prefix DAG.
//!
//! Three modes share one loop: Exact (realized race with winner reuse),
//! Surrogate (parent-anchored keys from upper counts) and Fallback
//! (per-leaf PRF scores, heuristic stop). Every draw, key, guard and budget
//! event goes to the ledger in execution order.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bounds::{check_expansion, log_sum_exp, mtau, MtauConfig, PhiCheck, PhiConfig, Recipe, DEFAULT_ETA};
use crate::budget::{BudgetConfig, BudgetState, Exhausted};
use crate::digest::{Digest, PrfKey};
use crate::fixed::{Q0_64, Q32_32, Q64_64};
use crate::ledger::{
    BudgetEvent, ClaimType, EpsDelta, EventKind, Guard, Ledger, LedgerRecord, Mode, PrivacyScope, StopReason, Uuid7Gen,
};
use crate::prefix_dag::{NodeIx, PrefixDag, COUNT_LIMIT};
use crate::race::{
    couple_leaf, couple_same_u, gumbel_raw, neg_log_q, prf_uniform, std_exp, surrogate_anchor, Purpose, Race,
    Uniform64,
};

pub const DEFAULT_MAX_EXPANSIONS: u64 = 1_000_000;
pub const DEFAULT_PRF_DOMAIN: &str = "racecert/leaf-prf";

pub(crate) mod dec_u64 {
    use crate::fixed::parse_canonical_int;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        parse_canonical_int::<u64>(&s).map_err(serde::de::Error::custom)
    }
}

/// Scripted uniform, replacing the seeded draw at one address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    pub ctx_digest: Digest,
    pub purpose: Purpose,
    #[serde(rename = "U")]
    pub u: Q0_64,
}

/// Where Surrogate mode takes its node uniforms from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateDraw {
    /// Shared-quantile coupling with the realized race where exact counts
    /// exist; stream draws elsewhere.
    Coupled,
    Stream,
}

/// Where Surrogate mode takes its leaf uniforms from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafPolicy {
    /// Smallest uniform whose exponential reaches the realized `t(P)`.
    Coupled,
    Prf,
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(with = "dec_u64")]
    pub seed: u64,
    pub mtau: MtauConfig,
    pub phi: PhiConfig,
    /// Fallback temperature.
    pub tau: f64,
    pub n_ub_factor: f64,
    pub prf: PrfKey,
    pub surrogate_draw: SurrogateDraw,
    pub surrogate_leaf: LeafPolicy,
    /// Exact counts above this are treated as unavailable.
    #[serde(with = "dec_u64")]
    pub count_cap: u64,
    /// Upper counts above this are treated as unavailable.
    #[serde(with = "dec_u64")]
    pub ub_cap: u64,
    #[serde(with = "dec_u64")]
    pub max_expansions: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<Override>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Exact,
            seed: 0,
            mtau: MtauConfig { recipe: Recipe::R1, c_s_max: 1.0, max_depth: 16 },
            phi: PhiConfig::new(16, 0.5, DEFAULT_ETA, 0.5).expect("valid default potential"),
            tau: 1.0,
            n_ub_factor: 1.0,
            prf: PrfKey::new(b"racecert", DEFAULT_PRF_DOMAIN),
            surrogate_draw: SurrogateDraw::Coupled,
            surrogate_leaf: LeafPolicy::Coupled,
            count_cap: COUNT_LIMIT,
            ub_cap: COUNT_LIMIT,
            max_expansions: DEFAULT_MAX_EXPANSIONS,
            overrides: Vec::new(),
            budget: None,
        }
    }
}

impl RunConfig {
    /// R1 bounds and the default potential from the graph's caps.
    pub fn for_dag(dag: &PrefixDag, mode: Mode, seed: u64) -> Self {
        RunConfig {
            mode,
            seed,
            mtau: MtauConfig::for_dag(Recipe::R1, dag),
            phi: PhiConfig::for_dag(dag),
            ..RunConfig::default()
        }
    }

    pub fn race(&self) -> Race {
        Race::with_overrides(self.seed, self.overrides.iter().map(|o| (o.ctx_digest, o.purpose, o.u)))
    }
}

/// Working copy of the graph as a run sees it: upper counts from the
/// factor, then both caps applied.
pub fn prepare_dag(dag: &PrefixDag, cfg: &RunConfig) -> PrefixDag {
    let mut d = dag.clone();
    d.assign_upper_bounds(cfg.n_ub_factor);
    let ixs: Vec<NodeIx> = d.nodes().map(|(ix, _)| ix).collect();
    for ix in ixs {
        if d[ix].n_exact.is_some_and(|n| n > cfg.count_cap) {
            d.set_exact_count(ix, None);
        }
        if d[ix].n_ub.is_some_and(|n| n > cfg.ub_cap) {
            d.set_upper_bound(ix, None);
        }
    }
    d
}

/// Fallback leaf noise `G/tau - log E` from one uniform.
pub fn leaf_noise(x: Uniform64, tau: f64) -> f64 {
    gumbel_raw(x) / tau - libm::log(std_exp(x))
}

/// Per node, the log-sum-exp of the Fallback noise of the leaves below it
/// (`-inf` for nodes without leaves).
pub fn fallback_noise_lse(dag: &PrefixDag, prf: &PrfKey, tau: f64) -> Vec<f64> {
    let mut out = alloc::vec![f64::NEG_INFINITY; dag.len()];
    for i in (0..dag.len()).rev() {
        let n = &dag[NodeIx(i as u32)];
        out[i] = if n.is_leaf {
            leaf_noise(prf_uniform(prf, &n.digest), tau)
        } else {
            let kids: Vec<f64> = n.children.iter().map(|c| out[c.idx()]).collect();
            log_sum_exp(kids.iter().copied())
        };
    }
    out
}

/// Lower digest pops first among equal keys.
pub fn resolve_tie(a: &Digest, b: &Digest) -> Ordering {
    assert_ne!(a, b, "a frontier never holds the same node twice");
    a.cmp(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Popped {
    pub key: Q64_64,
    pub digest: Digest,
    pub ix: NodeIx,
    /// Number of other entries that shared the popped key.
    pub tie_token: u32,
}

/// Max-priority queue keyed by fixed-point key, ties by ascending digest.
#[derive(Debug, Clone, Default)]
pub struct Frontier {
    map: BTreeMap<(Q64_64, Reverse<Digest>), NodeIx>,
}

impl Frontier {
    pub fn new() -> Self {
        Frontier::default()
    }

    pub fn push(&mut self, key: Q64_64, digest: Digest, ix: NodeIx) {
        let prev = self.map.insert((key, Reverse(digest)), ix);
        assert!(prev.is_none(), "node pushed twice with the same key");
    }

    pub fn peek(&self) -> Option<Popped> {
        self.map.last_key_value().map(|((k, Reverse(d)), ix)| Popped {
            key: *k,
            digest: *d,
            ix: *ix,
            tie_token: self.ties(*k) - 1,
        })
    }

    pub fn pop(&mut self) -> Option<Popped> {
        let p = self.peek()?;
        self.map.remove(&(p.key, Reverse(p.digest)));
        Some(p)
    }

    fn ties(&self, key: Q64_64) -> u32 {
        self.map.range((key, Reverse(Digest([0xff; 32])))..=(key, Reverse(Digest([0; 32])))).count() as u32
    }

    pub fn max_key(&self) -> Option<Q64_64> {
        self.map.last_key_value().map(|((k, _), _)| *k)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entries in pop order.
    pub fn iter(&self) -> impl Iterator<Item = (Q64_64, Digest, NodeIx)> + '_ {
        self.map.iter().rev().map(|((k, Reverse(d)), ix)| (*k, *d, *ix))
    }

    fn drain(&mut self) -> Vec<(Q64_64, Digest, NodeIx)> {
        let v = self.iter().collect();
        self.map.clear();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    StopCertified,
    StopHeuristic,
}

/// Exact and Surrogate stop once the frontier maximum is at most the
/// incumbent. Fallback stops once the best materialized leaf reaches every
/// tracked node bound.
pub fn stop_check(mode: Mode, max_frontier: Option<Q64_64>, incumbent: Q64_64, max_leaf: Option<Q64_64>) -> StopDecision {
    match mode {
        Mode::Exact | Mode::Surrogate => match max_frontier {
            Some(k) if k > incumbent => StopDecision::Continue,
            _ => StopDecision::StopCertified,
        },
        Mode::Fallback => match (max_leaf, max_frontier) {
            (_, None) => StopDecision::StopHeuristic,
            (Some(l), Some(f)) if l >= f => StopDecision::StopHeuristic,
            _ => StopDecision::Continue,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    EmptyGraph,
    UnknownOverride(Digest),
    InvalidConfig(&'static str),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::EmptyGraph => f.write_str("graph has no leaves"),
            RunError::UnknownOverride(d) => write!(f, "override addresses unknown node {d}"),
            RunError::InvalidConfig(m) => write!(f, "invalid run config: {m}"),
        }
    }
}

impl core::error::Error for RunError {}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Wall-clock deadline probe; `true` means time is up.
    pub deadline: Option<&'a dyn Fn() -> bool>,
    /// Millisecond clock for node ids. Without one, ids are seeded.
    pub uuid_clock: Option<fn() -> u64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub incumbent: Q64_64,
    pub incumbent_leaf: Option<NodeIx>,
    pub expansions: u64,
    /// `max(0, max frontier key - B*)` at termination.
    pub stop_slack: f64,
    pub stop_reason: StopReason,
    pub claim_type: ClaimType,
    pub mode_final: Mode,
    pub guards: Vec<Guard>,
    /// Node frontier at termination, in pop order.
    pub frontier_at_stop: Vec<(NodeIx, Q64_64)>,
    /// Evaluated (Exact, Surrogate) or materialized (Fallback) leaves.
    pub popped_leaves: Vec<NodeIx>,
    pub internal_pops: u64,
    pub ledger: Ledger,
}

impl RunResult {
    pub fn incumbent_value(&self) -> f64 {
        self.incumbent.to_f64()
    }
}

pub fn run(dag: &PrefixDag, cfg: &RunConfig) -> Result<RunResult, RunError> {
    run_with(dag, cfg, RunOptions::default())
}

pub fn run_with(dag: &PrefixDag, cfg: &RunConfig, opts: RunOptions<'_>) -> Result<RunResult, RunError> {
    if !(cfg.tau > 0.0) || !(cfg.n_ub_factor >= 1.0) {
        return Err(RunError::InvalidConfig("tau must be positive and n_ub_factor at least 1"));
    }
    if dag.leaves().next().is_none() {
        return Err(RunError::EmptyGraph);
    }
    if let Some(o) = cfg.overrides.iter().find(|o| dag.lookup(&o.ctx_digest).is_none()) {
        return Err(RunError::UnknownOverride(o.ctx_digest));
    }
    if cfg.budget.as_ref().is_some_and(|b| b.catalog.is_empty()) {
        return Err(RunError::InvalidConfig("budget catalog is empty"));
    }
    let engine = Engine::new(dag, cfg, opts);
    Ok(engine.run())
}

struct Engine<'a> {
    dag: PrefixDag,
    cfg: &'a RunConfig,
    opts: RunOptions<'a>,
    race: Race,
    ledger: Ledger,
    uuids: Uuid7Gen,
    ids: BTreeMap<NodeIx, String>,
    mode: Mode,
    claim: ClaimType,
    frontier: Frontier,
    leaves: Frontier,
    incumbent: Q64_64,
    incumbent_leaf: Option<NodeIx>,
    expansions: u64,
    internal_pops: u64,
    anchors: BTreeMap<NodeIx, Q64_64>,
    noise: Option<Vec<f64>>,
    budget: Option<BudgetState>,
    pending_dkey: Option<NodeIx>,
    evaluated: Vec<NodeIx>,
    guards: Vec<Guard>,
}

impl<'a> Engine<'a> {
    fn new(dag: &PrefixDag, cfg: &'a RunConfig, opts: RunOptions<'a>) -> Self {
        let uuids = match opts.uuid_clock {
            Some(c) => Uuid7Gen::with_clock(cfg.seed, c),
            None => Uuid7Gen::seeded(cfg.seed),
        };
        Engine {
            dag: prepare_dag(dag, cfg),
            cfg,
            opts,
            race: cfg.race(),
            ledger: Ledger::new(cfg.clone(), None),
            uuids,
            ids: BTreeMap::new(),
            mode: cfg.mode,
            claim: match cfg.mode {
                Mode::Fallback => ClaimType::NoCert,
                _ => ClaimType::RunWiseExact,
            },
            frontier: Frontier::new(),
            leaves: Frontier::new(),
            incumbent: Q64_64::MIN,
            incumbent_leaf: None,
            expansions: 0,
            internal_pops: 0,
            anchors: BTreeMap::new(),
            noise: None,
            budget: cfg.budget.clone().map(BudgetState::new),
            pending_dkey: None,
            evaluated: Vec::new(),
            guards: Vec::new(),
        }
    }

    fn id_of(&mut self, ix: NodeIx) -> String {
        if let Some(id) = self.ids.get(&ix) {
            return id.clone();
        }
        let id = self.uuids.next_id();
        self.ids.insert(ix, id.clone());
        id
    }

    fn rec(&mut self, ev: EventKind, ix: Option<NodeIx>) -> LedgerRecord {
        let mut r = LedgerRecord::new(ev);
        r.mode = Some(self.mode);
        r.claim_type = Some(self.claim);
        r.privacy_scope = Some(PrivacyScope::PostProcessingOnly);
        if let Some(ix) = ix {
            r.ctx_digest = Some(self.dag[ix].digest);
            r.ctx_repr = Some(self.dag[ix].ctx_repr.clone());
            r.node_id = Some(self.id_of(ix));
            if let Some(p) = self.dag[ix].parent {
                r.parent_id = Some(self.id_of(p));
            }
        }
        r
    }

    fn log(&mut self, r: LedgerRecord) {
        self.ledger.append(r);
    }

    /// Logs a guard and applies its downgrade.
    fn guard(&mut self, g: Guard, at: Option<NodeIx>, mode_after: Mode, claim_after: ClaimType) {
        let mut r = self.rec(EventKind::Guard, at);
        r.guards = Some(alloc::vec![g]);
        r.claim_type_before = Some(self.claim);
        r.claim_type_after = Some(claim_after);
        if mode_after != self.mode {
            r.mode_after = Some(mode_after);
        }
        self.log(r);
        self.guards.push(g);
        self.claim = claim_after;
        if mode_after != self.mode {
            self.switch_mode(mode_after);
        }
    }

    fn num_clamp(&mut self, at: NodeIx) {
        let mode = self.mode;
        self.guard(Guard::NumClamp, Some(at), mode, ClaimType::NoCert);
    }

    fn q(&mut self, v: f64, at: NodeIx) -> Q64_64 {
        let (q, clamped) = Q64_64::from_f64_saturating(v);
        if clamped {
            self.num_clamp(at);
        }
        q
    }

    fn add(&mut self, a: Q64_64, b: Q64_64, at: NodeIx) -> Q64_64 {
        match a.checked_add(b) {
            Some(s) => s,
            None => {
                self.num_clamp(at);
                a.saturating_add(b)
            }
        }
    }

    fn m_q(&mut self, ix: NodeIx) -> Q64_64 {
        let m = mtau(&self.dag, ix, &self.cfg.mtau);
        self.q(m, ix)
    }

    fn score_q(&mut self, ix: NodeIx) -> Q64_64 {
        let s = self.dag[ix].prefix_score;
        self.q(s, ix)
    }

    fn noise(&mut self) -> &[f64] {
        if self.noise.is_none() {
            self.noise = Some(fallback_noise_lse(&self.dag, &self.cfg.prf, self.cfg.tau));
        }
        self.noise.as_deref().unwrap()
    }

    fn fallback_ub(&mut self, ix: NodeIx) -> Q64_64 {
        let lse = self.noise()[ix.idx()];
        let m = self.m_q(ix);
        let n = self.q(lse, ix);
        self.add(m, n, ix)
    }

    fn run(mut self) -> RunResult {
        self.init();
        let reason = loop {
            let decision =
                stop_check(self.mode, self.frontier.max_key(), self.incumbent, self.leaves.max_key());
            match decision {
                StopDecision::StopCertified => break StopReason::Certified,
                StopDecision::StopHeuristic => break StopReason::Heuristic,
                StopDecision::Continue => {}
            }
            let timed_out = self.expansions >= self.cfg.max_expansions || self.opts.deadline.is_some_and(|f| f());
            if timed_out {
                let mode = self.mode;
                self.guard(Guard::Timeout, None, mode, ClaimType::NoCert);
                break StopReason::Timeout;
            }
            if self.budget.is_some() {
                let top = self.frontier.peek().unwrap().ix;
                if !self.dag[top].is_leaf {
                    let before = self.mode;
                    self.budget_step(top);
                    if self.mode != before {
                        continue;
                    }
                }
            }
            let p = self.frontier.pop().unwrap();
            let is_leaf = self.dag[p.ix].is_leaf;
            if !(self.mode == Mode::Fallback && is_leaf) {
                self.expansions += 1;
            }
            let mut r = self.rec(EventKind::Pop, Some(p.ix));
            r.key_raw = Some(p.key);
            r.tie_token = Some(p.tie_token);
            r.expansions = Some(self.expansions);
            if self.incumbent != Q64_64::MIN {
                r.incumbent = Some(self.incumbent);
            }
            self.log(r);
            if is_leaf {
                match self.mode {
                    Mode::Fallback => self.materialize(p.ix),
                    _ => self.leaf_eval(p.ix),
                }
            } else {
                self.internal_pops += 1;
                self.expand(p.ix, p.key);
            }
        };
        self.finish(reason)
    }

    fn finish(mut self, reason: StopReason) -> RunResult {
        if self.mode == Mode::Fallback {
            if let Some(top) = self.leaves.peek() {
                self.incumbent = top.key;
                self.incumbent_leaf = Some(top.ix);
            }
        }
        let max_key = self.frontier.max_key();
        let mut r = self.rec(EventKind::Stop, None);
        r.reason = Some(reason);
        if self.incumbent != Q64_64::MIN {
            r.incumbent = Some(self.incumbent);
        }
        r.max_key = max_key;
        r.expansions = Some(self.expansions);
        self.log(r);
        let stop_slack = match max_key {
            Some(k) if self.incumbent != Q64_64::MIN => (k.to_f64() - self.incumbent.to_f64()).max(0.0),
            Some(_) => f64::INFINITY,
            None => 0.0,
        };
        let popped_leaves = match self.mode {
            Mode::Fallback => {
                let mut v: Vec<NodeIx> = self.leaves.iter().map(|(_, _, ix)| ix).collect();
                v.sort();
                v
            }
            _ => self.evaluated.clone(),
        };
        RunResult {
            incumbent: self.incumbent,
            incumbent_leaf: self.incumbent_leaf,
            expansions: self.expansions,
            stop_slack,
            stop_reason: reason,
            claim_type: self.claim,
            mode_final: self.mode,
            guards: self.guards,
            frontier_at_stop: self.frontier.iter().map(|(k, _, ix)| (ix, k)).collect(),
            popped_leaves,
            internal_pops: self.internal_pops,
            ledger: self.ledger,
        }
    }

    fn count_fail_target(&self, ix: NodeIx) -> Mode {
        let n = &self.dag[ix];
        let kids_ok = n.children.iter().all(|c| self.dag[*c].n_ub.is_some());
        if n.n_ub.is_some_and(|u| u > 0) && kids_ok {
            Mode::Surrogate
        } else {
            Mode::Fallback
        }
    }

    fn init(&mut self) {
        let root = self.dag.root();
        if self.mode == Mode::Exact && !self.dag[root].n_exact.is_some_and(|n| n > 0) {
            let to = if self.dag[root].n_ub.is_some_and(|u| u > 0) { Mode::Surrogate } else { Mode::Fallback };
            let claim = if to == Mode::Fallback { ClaimType::NoCert } else { self.claim };
            self.guard(Guard::CountFail, Some(root), to, claim);
            return;
        }
        if self.mode == Mode::Surrogate && !self.dag[root].n_ub.is_some_and(|u| u > 0) {
            self.guard(Guard::CountFail, Some(root), Mode::Fallback, ClaimType::NoCert);
            return;
        }
        self.push_root();
    }

    fn push_root(&mut self) {
        let root = self.dag.root();
        let mut r = self.rec(EventKind::Push, Some(root));
        let m = self.m_q(root);
        match self.mode {
            Mode::Exact => {
                let n = self.dag[root].n_exact.unwrap();
                let t = self.race.arrival(&self.dag, root).expect("root count checked");
                let nl = self.neg_log(t, root);
                let key = self.add(m, nl, root);
                r.u = Some(self.race.uniform(&self.dag[root].digest, Purpose::Root));
                r.purpose = Some(Purpose::Root);
                r.n = Some(n);
                r.neg_log_t = Some(nl);
                r.key_raw = Some(key);
                display(&mut r, key);
                self.log(r);
                self.frontier.push(key, self.dag[root].digest, root);
            }
            Mode::Surrogate => {
                let (x, purpose) = self.surrogate_draw(root);
                let nub = self.dag[root].n_ub.unwrap();
                let anchor = self.anchor(x, nub, root);
                self.anchors.insert(root, anchor);
                let key = self.add(m, anchor, root);
                r.u = Some(x);
                r.purpose = Some(purpose);
                r.nub = Some(nub);
                r.neg_log_t = Some(anchor);
                r.key_raw = Some(key);
                display(&mut r, key);
                self.log(r);
                self.frontier.push(key, self.dag[root].digest, root);
            }
            Mode::Fallback => {
                drop(r);
                self.push_fallback(root);
            }
        }
    }

    fn neg_log(&mut self, t: f64, at: NodeIx) -> Q64_64 {
        match neg_log_q(t) {
            Ok(q) => q,
            Err(_) => {
                self.num_clamp(at);
                Q64_64::from_f64_saturating(-libm::log(t)).0
            }
        }
    }

    fn anchor(&mut self, x: Uniform64, nub: u64, at: NodeIx) -> Q64_64 {
        match surrogate_anchor(x, nub) {
            Ok(a) => a,
            Err(_) => {
                self.num_clamp(at);
                Q64_64::MAX
            }
        }
    }

    fn surrogate_draw(&mut self, ix: NodeIx) -> (Uniform64, Purpose) {
        let n = &self.dag[ix];
        if self.cfg.surrogate_draw == SurrogateDraw::Coupled {
            if let (Some(c), Some(ub)) = (n.n_exact, n.n_ub) {
                if let Ok(t) = self.race.arrival(&self.dag, ix) {
                    if let Ok(x) = couple_same_u(t, c, ub) {
                        return (x, Purpose::Coupled);
                    }
                }
            }
        }
        let p = if ix == self.dag.root() { Purpose::Root } else { Purpose::Surrogate };
        (self.race.uniform(&self.dag[ix].digest, p), p)
    }

    /// Potential check on entering `c` from its parent; fields go on `r`.
    fn phi_step(&mut self, c: NodeIx, r: &mut LedgerRecord) {
        let Some(p) = self.dag[c].parent else { return };
        let phi = self.cfg.phi;
        let (before, after, eta) =
            match (phi.phi_node(&self.dag, p), phi.phi_node(&self.dag, c), phi.eta_q()) {
                (Ok(b), Ok(a), Ok(e)) => (b, a, e),
                _ => {
                    self.num_clamp(c);
                    return;
                }
            };
        r.phi_before = Some(before);
        r.phi_after = Some(after);
        r.delta_phi = Some(Q32_32(after.0.saturating_sub(before.0)));
        r.eta = Some(eta);
        if check_expansion(before, after, eta, phi.eps_fp) == PhiCheck::AcyclicityFail {
            r.guards = Some(alloc::vec![Guard::AcyclicityFail]);
            r.claim_type_before = Some(self.claim);
            r.claim_type_after = Some(ClaimType::NoCert);
            r.claim_type = Some(ClaimType::NoCert);
            self.guards.push(Guard::AcyclicityFail);
            self.claim = ClaimType::NoCert;
        }
    }

    fn depth_guard(&mut self, c: NodeIx) {
        if self.dag[c].depth > self.cfg.phi.l {
            let mode = self.mode;
            self.guard(Guard::CapExceeded, Some(c), mode, ClaimType::NoCert);
        }
    }

    fn expand(&mut self, v: NodeIx, key_v: Q64_64) {
        let before = self.ledger.len();
        // a CountFail downgrade inside an expansion redoes it in the new mode
        while !match self.mode {
            Mode::Exact => self.expand_exact(v),
            Mode::Surrogate => self.expand_surrogate(v),
            Mode::Fallback => {
                self.expand_fallback(v);
                true
            }
        } {}
        if self.pending_dkey == Some(v) {
            self.pending_dkey = None;
            let real = match dkey_best_child(&self.dag, v, &self.ledger.records[before..]) {
                Some(b) => (key_v.to_f64() - b.to_f64()).max(0.0),
                None => 0.0,
            };
            let mut r = self.rec(EventKind::Budget, Some(v));
            r.dkey_real = Some(Q32_32::from_f64(real).unwrap_or(Q32_32(i64::MAX)));
            self.log(r);
        }
    }

    /// False when a downgrade interrupted the expansion.
    fn expand_exact(&mut self, v: NodeIx) -> bool {
        let kids = self.dag[v].children.clone();
        if kids.iter().any(|c| self.dag[*c].n_exact.is_none()) {
            let to = self.count_fail_target(v);
            let claim = if to == Mode::Fallback { ClaimType::NoCert } else { self.claim };
            self.guard(Guard::CountFail, Some(v), to, claim);
            return false;
        }
        let live: Vec<NodeIx> = kids.iter().copied().filter(|c| self.dag[*c].n_exact.unwrap() > 0).collect();
        if live.is_empty() {
            return true;
        }
        let w = self.race.winner(&self.dag, v).expect("counts checked");
        let mut r = self.rec(EventKind::Expand, Some(v));
        r.u = Some(self.race.uniform(&self.dag[v].digest, Purpose::Winner));
        r.purpose = Some(Purpose::Winner);
        r.n = self.dag[v].n_exact;
        r.winner = Some(w as u32);
        self.log(r);
        for (i, c) in live.into_iter().enumerate() {
            let t = self.race.arrival(&self.dag, c).expect("counts checked");
            let mut r = self.rec(EventKind::Push, Some(c));
            self.phi_step(c, &mut r);
            let m = self.m_q(c);
            let nl = self.neg_log(t, c);
            let key = self.add(m, nl, c);
            if i != w {
                r.u = Some(self.race.uniform(&self.dag[c].digest, Purpose::Residual));
                r.purpose = Some(Purpose::Residual);
            }
            r.n = self.dag[c].n_exact;
            r.neg_log_t = Some(nl);
            r.key_raw = Some(key);
            display(&mut r, key);
            self.log(r);
            self.depth_guard(c);
            self.frontier.push(key, self.dag[c].digest, c);
        }
        true
    }

    fn expand_surrogate(&mut self, v: NodeIx) -> bool {
        let kids = self.dag[v].children.clone();
        if self.dag[v].n_ub.is_none() || kids.iter().any(|c| self.dag[*c].n_ub.is_none()) {
            self.guard(Guard::CountFail, Some(v), Mode::Fallback, ClaimType::NoCert);
            return false;
        }
        let anchor = match self.anchors.get(&v) {
            Some(a) => *a,
            None => {
                let (x, purpose) = self.surrogate_draw(v);
                let nub = self.dag[v].n_ub.unwrap();
                let anchor = self.anchor(x, nub, v);
                self.anchors.insert(v, anchor);
                let mut r = self.rec(EventKind::Expand, Some(v));
                r.u = Some(x);
                r.purpose = Some(purpose);
                r.nub = Some(nub);
                r.neg_log_t = Some(anchor);
                self.log(r);
                anchor
            }
        };
        for c in kids {
            let nub = self.dag[c].n_ub.unwrap();
            if nub == 0 {
                continue;
            }
            let mut r = self.rec(EventKind::Push, Some(c));
            self.phi_step(c, &mut r);
            let m = self.m_q(c);
            let key = self.add(m, anchor, c);
            r.nub = Some(nub);
            r.key_raw = Some(key);
            display(&mut r, key);
            self.log(r);
            self.depth_guard(c);
            self.frontier.push(key, self.dag[c].digest, c);
        }
        true
    }

    fn expand_fallback(&mut self, v: NodeIx) {
        let kids = self.dag[v].children.clone();
        for c in kids {
            if self.dag[c].is_leaf {
                self.materialize(c);
            } else {
                self.push_fallback(c);
            }
        }
    }

    fn push_fallback(&mut self, c: NodeIx) {
        if self.noise()[c.idx()] == f64::NEG_INFINITY {
            return;
        }
        let mut r = self.rec(EventKind::Push, Some(c));
        self.phi_step(c, &mut r);
        let key = self.fallback_ub(c);
        r.key_raw = Some(key);
        display(&mut r, key);
        self.log(r);
        self.depth_guard(c);
        self.frontier.push(key, self.dag[c].digest, c);
    }

    fn materialize(&mut self, p: NodeIx) {
        self.expansions += 1;
        let x = prf_uniform(&self.cfg.prf, &self.dag[p].digest);
        let s = self.score_q(p);
        let noise = self.q(leaf_noise(x, self.cfg.tau), p);
        let value = self.add(s, noise, p);
        let first = !self.ids.contains_key(&p);
        let mut r = self.rec(EventKind::Materialize, Some(p));
        if self.dag[p].parent.is_some() && first {
            // first sight of this leaf: it enters through its parent
            self.phi_step(p, &mut r);
        }
        r.u = Some(x);
        r.purpose = Some(Purpose::Prf);
        r.value = Some(value);
        r.expansions = Some(self.expansions);
        display(&mut r, value);
        self.log(r);
        self.depth_guard(p);
        self.leaves.push(value, self.dag[p].digest, p);
        if let Some(top) = self.leaves.peek() {
            self.incumbent = top.key;
            self.incumbent_leaf = Some(top.ix);
        }
    }

    fn leaf_eval(&mut self, p: NodeIx) {
        let (x, purpose, neg_log_e) = match self.mode {
            Mode::Exact => {
                let Ok(t) = self.race.arrival(&self.dag, p) else {
                    // pushed under exact counts, so the arrival exists
                    unreachable!("exact leaf without arrival")
                };
                let u = Q0_64::from_value(-libm::expm1(-t));
                (u, Purpose::Coupled, self.neg_log(t, p))
            }
            _ => {
                let (x, purpose) = self.surrogate_leaf_uniform(p);
                let e = std_exp(x);
                (x, purpose, self.neg_log(e, p))
            }
        };
        let s = self.score_q(p);
        let value = self.add(s, neg_log_e, p);
        self.evaluated.push(p);
        if value > self.incumbent {
            self.incumbent = value;
            self.incumbent_leaf = Some(p);
        }
        let mut r = self.rec(EventKind::LeafEval, Some(p));
        r.u = Some(x);
        r.purpose = Some(purpose);
        r.neg_log_t = Some(neg_log_e);
        r.value = Some(value);
        r.incumbent = Some(self.incumbent);
        display(&mut r, value);
        self.log(r);
    }

    fn surrogate_leaf_uniform(&mut self, p: NodeIx) -> (Uniform64, Purpose) {
        let d = self.dag[p].digest;
        match self.cfg.surrogate_leaf {
            LeafPolicy::Coupled => {
                if let Ok(t) = self.race.arrival(&self.dag, p) {
                    if let Ok(x) = couple_leaf(t) {
                        return (x, Purpose::Coupled);
                    }
                }
                (self.race.uniform(&d, Purpose::Leaf), Purpose::Leaf)
            }
            LeafPolicy::Prf => (prf_uniform(&self.cfg.prf, &d), Purpose::Prf),
            LeafPolicy::Stream => (self.race.uniform(&d, Purpose::Leaf), Purpose::Leaf),
        }
    }

    fn switch_mode(&mut self, to: Mode) {
        let from = self.mode;
        self.mode = to;
        if to != Mode::Fallback || from == Mode::Fallback {
            return;
        }
        // re-key the node frontier by Fallback bounds and move leaves to L
        let entries = self.frontier.drain();
        let evaluated = core::mem::take(&mut self.evaluated);
        for p in evaluated {
            self.materialize(p);
        }
        for (_, _, ix) in entries {
            if self.dag[ix].is_leaf {
                self.materialize(ix);
            } else {
                self.push_fallback(ix);
            }
        }
        self.incumbent = self.leaves.max_key().unwrap_or(Q64_64::MIN);
        self.incumbent_leaf = self.leaves.peek().map(|p| p.ix);
    }

    fn budget_step(&mut self, top: NodeIx) {
        let state = self.budget.as_mut().unwrap();
        match state.select_model() {
            Ok(sel) => {
                state.commit(sel.index);
                let state = self.budget.as_ref().unwrap();
                let e = state.cfg.catalog[sel.index].clone();
                let eps = state.eps_used();
                let (price_spent, price_cap, slo, acc, delta) =
                    (state.price_spent, state.cfg.price_max, state.cfg.slo_ms, state.latency_acc_ms, state.cfg.delta);
                let mut r = self.rec(EventKind::Budget, Some(top));
                r.budget_event = Some(BudgetEvent::None);
                r.model_id = Some(e.model_id);
                r.adapter_id = Some(e.adapter_id);
                r.dp_cert_id = Some(e.dp_cert_id);
                r.eps_train = Q32_32::from_f64(e.eps_train).ok();
                r.delta_train = Some(alloc::format!("{:e}", e.delta_train));
                r.dkey_pred = Q32_32::from_f64(sel.dkey_pred).ok();
                r.price_spent = Some(price_spent);
                r.price_cap = Some(price_cap);
                r.sla_ms = Some(slo);
                r.latency_acc_ms = Some(acc);
                r.eps_delta = Some(EpsDelta {
                    eps: eps.and_then(|(e, _)| Q32_32::from_f64(e).ok()),
                    delta: Some(alloc::format!("{delta:e}")),
                });
                if let Some((e, a)) = eps {
                    r.router_rdp_eps = Q32_32::from_f64(e).ok();
                    r.alpha_selected = Some(a as u32);
                }
                self.log(r);
                self.pending_dkey = Some(top);
            }
            Err(Exhausted) => {
                let (price_spent, price_cap, slo, acc) =
                    (state.price_spent, state.cfg.price_max, state.cfg.slo_ms, state.latency_acc_ms);
                let mut r = self.rec(EventKind::Budget, Some(top));
                r.budget_event = Some(BudgetEvent::BudgetFail);
                r.price_spent = Some(price_spent);
                r.price_cap = Some(price_cap);
                r.sla_ms = Some(slo);
                r.latency_acc_ms = Some(acc);
                self.log(r);
                self.budget = None;
                self.guard(Guard::BudgetFail, Some(top), Mode::Fallback, ClaimType::NoCert);
            }
        }
    }
}

/// Best key among `v`'s children pushed or materialized in `recs`.
pub fn dkey_best_child(dag: &PrefixDag, v: NodeIx, recs: &[LedgerRecord]) -> Option<Q64_64> {
    recs.iter()
        .filter(|r| matches!(r.event, Some(EventKind::Push | EventKind::Materialize)))
        .filter(|r| r.ctx_digest.and_then(|d| dag.lookup(&d)).is_some_and(|c| dag[c].parent == Some(v)))
        .filter_map(|r| r.key_raw.or(r.value))
        .max()
}

fn display(r: &mut LedgerRecord, key: Q64_64) {
    let mut m = serde_json::Map::new();
    if let Some(n) = serde_json::Number::from_f64(key.to_f64()) {
        m.insert("key".into(), serde_json::Value::Number(n));
    }
    r.display = Some(serde_json::Value::Object(m));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::PublicCaps;
    use crate::prefix_dag::{compile, SharedDag, SharedEdge, SharedNode};
    use alloc::string::ToString;
    use alloc::vec;

    fn chain_leaf() -> PrefixDag {
        let g = SharedDag {
            root: "r".into(),
            caps: PublicCaps { max_depth: 2, c_s_max: 1.0, c_s_min: 0.5 },
            nodes: vec![SharedNode { id: "r".into(), state: "r".into(), leaf: true, delta_cost: 0.25, mtau: None }],
            edges: vec![],
        };
        compile(&g).unwrap().0
    }

    fn binary(depth: u32) -> PrefixDag {
        let mut nodes = vec![SharedNode { id: "n".into(), state: "n".into(), leaf: false, delta_cost: 0.0, mtau: None }];
        let mut edges = Vec::new();
        let mut level = vec!["n".to_string()];
        for d in 1..=depth {
            let mut next = Vec::new();
            for p in &level {
                for b in 0..2u64 {
                    let id = alloc::format!("{p}{b}");
                    nodes.push(SharedNode {
                        id: id.clone(),
                        state: id.clone(),
                        leaf: d == depth,
                        delta_cost: 0.1 * (b as f64 + d as f64 % 3.0),
                        mtau: None,
                    });
                    edges.push(SharedEdge { from: p.clone(), to: id.clone(), order: b });
                    next.push(id);
                }
            }
            level = next;
        }
        let g = SharedDag {
            root: "n".into(),
            caps: PublicCaps { max_depth: depth, c_s_max: 0.5, c_s_min: 0.1 },
            nodes,
            edges,
        };
        compile(&g).unwrap().0
    }

    #[test]
    fn single_leaf_stops_after_one_expansion() {
        let dag = chain_leaf();
        let cfg = RunConfig::for_dag(&dag, Mode::Exact, 7);
        let res = run(&dag, &cfg).unwrap();
        assert_eq!(res.expansions, 1);
        assert_eq!(res.stop_reason, StopReason::Certified);
        assert_eq!(res.claim_type, ClaimType::RunWiseExact);
        let t = cfg.race().arrival(&dag, dag.root()).unwrap();
        let want = Q64_64::from_f64(-0.25).unwrap() + neg_log_q(t).unwrap();
        assert_eq!(res.incumbent, want);
        assert_eq!(res.stop_slack, 0.0);
    }

    #[test]
    fn stop_check_examples() {
        let q = |v: f64| Q64_64::from_f64(v).unwrap();
        assert_eq!(stop_check(Mode::Exact, Some(q(4.859)), q(5.1), None), StopDecision::StopCertified);
        assert_eq!(stop_check(Mode::Exact, None, Q64_64::MIN, None), StopDecision::StopCertified);
        assert_eq!(stop_check(Mode::Surrogate, Some(q(7.386)), q(5.1), None), StopDecision::Continue);
        assert_eq!(stop_check(Mode::Fallback, Some(q(1.0)), Q64_64::MIN, None), StopDecision::Continue);
        assert_eq!(stop_check(Mode::Fallback, Some(q(1.0)), Q64_64::MIN, Some(q(1.0))), StopDecision::StopHeuristic);
    }

    #[test]
    fn ties_pop_lowest_digest_with_token() {
        let mut f = Frontier::new();
        let k = Q64_64::ONE;
        f.push(k, Digest([2; 32]), NodeIx(2));
        f.push(k, Digest([1; 32]), NodeIx(1));
        f.push(Q64_64::ZERO, Digest([0; 32]), NodeIx(0));
        let a = f.pop().unwrap();
        assert_eq!((a.ix, a.tie_token), (NodeIx(1), 1));
        let b = f.pop().unwrap();
        assert_eq!((b.ix, b.tie_token), (NodeIx(2), 0));
        assert_eq!(resolve_tie(&Digest([1; 32]), &Digest([2; 32])), Ordering::Less);
    }

    #[test]
    fn exact_matches_brute_force_on_binary_tree() {
        let dag = binary(4);
        for seed in 0..20 {
            let cfg = RunConfig::for_dag(&dag, Mode::Exact, seed);
            let res = run(&dag, &cfg).unwrap();
            let mut race = cfg.race();
            let vals = race.leaf_values(&dag);
            let (best_ix, best) =
                vals.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1).then(dag[b.0].digest.cmp(&dag[a.0].digest))).unwrap();
            assert_eq!(res.incumbent_leaf, Some(best_ix));
            assert!((res.incumbent_value() - best).abs() < 1e-9);
            assert_eq!(res.stop_reason, StopReason::Certified);
        }
    }

    #[test]
    fn surrogate_expands_at_least_as_much_as_exact() {
        let dag = binary(4);
        for seed in 0..20 {
            let mut cfg = RunConfig::for_dag(&dag, Mode::Exact, seed);
            cfg.n_ub_factor = 2.0;
            let e = run(&dag, &cfg).unwrap();
            cfg.mode = Mode::Surrogate;
            let s = run(&dag, &cfg).unwrap();
            assert!(s.expansions >= e.expansions, "seed {seed}: {} < {}", s.expansions, e.expansions);
            assert_eq!(s.claim_type, ClaimType::RunWiseExact);
        }
    }

    #[test]
    fn ledgers_are_deterministic() {
        let dag = binary(3);
        for mode in [Mode::Exact, Mode::Surrogate, Mode::Fallback] {
            let cfg = RunConfig::for_dag(&dag, mode, 3);
            let a = run(&dag, &cfg).unwrap().ledger.to_ndjson();
            let b = run(&dag, &cfg).unwrap().ledger.to_ndjson();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn count_cap_downgrades() {
        let dag = binary(3);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Exact, 1);
        cfg.count_cap = 4;
        let res = run(&dag, &cfg).unwrap();
        assert!(res.guards.contains(&Guard::CountFail));
        assert_eq!(res.mode_final, Mode::Surrogate);
        cfg.ub_cap = 4;
        let res = run(&dag, &cfg).unwrap();
        assert_eq!(res.mode_final, Mode::Fallback);
        assert_eq!(res.claim_type, ClaimType::NoCert);
        assert_eq!(res.stop_reason, StopReason::Heuristic);
    }

    #[test]
    fn expansion_cap_times_out() {
        let dag = binary(4);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Exact, 2);
        cfg.max_expansions = 2;
        let res = run(&dag, &cfg).unwrap();
        assert_eq!(res.stop_reason, StopReason::Timeout);
        assert_eq!(res.claim_type, ClaimType::NoCert);
        assert_eq!(res.expansions, 2);
        let stop = res.ledger.records.last().unwrap();
        assert_eq!(stop.reason, Some(StopReason::Timeout));
    }

    #[test]
    fn tight_potential_flags_acyclicity() {
        let dag = binary(3);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Exact, 2);
        // every step must drop by at least 0.99 while alpha * cost adds up to 0.5
        cfg.phi = PhiConfig { l: 3, alpha: 1.0, eta: 0.99, eps_fp: Q32_32(1) };
        let res = run(&dag, &cfg).unwrap();
        assert!(res.guards.contains(&Guard::AcyclicityFail));
        assert_eq!(res.claim_type, ClaimType::NoCert);
        let flagged = res.ledger.records.iter().find(|r| r.guards.as_deref() == Some(&[Guard::AcyclicityFail][..])).unwrap();
        assert!(flagged.phi_before.is_some() && flagged.delta_phi.is_some());
    }

    #[test]
    fn fallback_popped_set_is_materialized_leaves() {
        let dag = binary(3);
        let cfg = RunConfig::for_dag(&dag, Mode::Fallback, 0);
        let res = run(&dag, &cfg).unwrap();
        assert_eq!(res.claim_type, ClaimType::NoCert);
        assert!(res.popped_leaves.len() as u64 <= res.internal_pops + 1);
        let noise = fallback_noise_lse(&dag, &cfg.prf, 1.0);
        let best = dag
            .leaves()
            .map(|l| dag[l].prefix_score + noise[l.idx()])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((res.incumbent_value() - best).abs() < 1e-9);
    }

    #[test]
    fn run_config_round_trips() {
        let dag = binary(2);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Surrogate, u64::MAX);
        cfg.overrides.push(Override { ctx_digest: dag[dag.root()].digest, purpose: Purpose::Root, u: Q0_64(5) });
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"seed\":\"18446744073709551615\""), "{s}");
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_override_is_rejected() {
        let dag = binary(2);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Exact, 0);
        cfg.overrides.push(Override { ctx_digest: Digest([9; 32]), purpose: Purpose::Root, u: Q0_64(5) });
        assert_eq!(run(&dag, &cfg).unwrap_err(), RunError::UnknownOverride(Digest([9; 32])));
    }
}
