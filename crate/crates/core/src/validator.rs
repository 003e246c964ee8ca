//! Independent ledger replay.
//!
//! Inputs are the ledger and the public graph, plus public counts when
//! available. Every key is recomputed from logged uniforms and every uniform
//! from the source it claims. The frontier is replayed to check pop order
//! and tie tokens; guards, downgrades and budget steps are checked as they
//! occur, the stop inequality at the end.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bounds::{check_expansion, kappa, kappa_q, mtau, PhiCheck};
use crate::budget::{BudgetState, CatalogEntry, CONVERSION_VARIANT};
pub use crate::budget::{rdp_to_eps_delta, RdpAtom};
use crate::digest::Digest;
use crate::fixed::{Q0_64, Q32_32, Q64_64};
use crate::ledger::{
    BudgetEvent, ClaimType, EventKind, Guard, Ledger, LedgerError, LedgerRecord, Mode, StopReason,
};
use crate::prefix_dag::{NodeIx, PrefixDag};
use crate::race::{
    couple_leaf, couple_same_u, exp_from_raw, neg_log_q, prf_uniform, quantile_cat, std_exp, surrogate_anchor,
    Purpose, Race,
};
use crate::search::{dkey_best_child, fallback_noise_lse, leaf_noise, prepare_dag, stop_check, Frontier, RunConfig, StopDecision};

/// Public exact counts by context digest.
pub type PublicCounts = BTreeMap<Digest, u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Parse,
    Replay,
    StopRule,
    Guards,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    /// Record index (0-based, header excluded); for parse failures the
    /// 1-based file line.
    pub index: usize,
    pub check: Check,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tightening {
    pub index: usize,
    pub kappa: Q32_32,
    pub key_tight: Q64_64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub records: usize,
    pub parse_ok: bool,
    pub replay_ok: bool,
    pub stop_rule_ok: bool,
    pub guards_ok: bool,
    pub budget_ok: bool,
    /// An integer field overflowed its format while parsing.
    pub num_clamp: bool,
    pub tightened: Vec<Tightening>,
    pub rdp_recomputed: Option<f64>,
    pub conversion_variant: String,
    pub failures: Vec<Failure>,
}

impl Verdict {
    fn empty() -> Self {
        Verdict {
            records: 0,
            parse_ok: true,
            replay_ok: true,
            stop_rule_ok: false,
            guards_ok: true,
            budget_ok: true,
            num_clamp: false,
            tightened: Vec::new(),
            rdp_recomputed: None,
            conversion_variant: CONVERSION_VARIANT.into(),
            failures: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.parse_ok && self.replay_ok && self.stop_rule_ok && self.guards_ok && self.budget_ok && self.failures.is_empty()
    }

    pub fn first_failure(&self) -> Option<&Failure> {
        self.failures.first()
    }
}

/// Parse then validate. Parse errors become a failed verdict.
pub fn validate_text(text: &str, dag: &PrefixDag, counts: Option<&PublicCounts>) -> Verdict {
    match Ledger::parse(text) {
        Ok(l) => validate(&l, dag, counts),
        Err(e) => {
            let mut v = Verdict::empty();
            v.parse_ok = false;
            v.replay_ok = false;
            v.num_clamp = matches!(e, LedgerError::OverflowOnParse { .. });
            v.failures.push(Failure { index: e.line(), check: Check::Parse, reason: format!("{e}") });
            v
        }
    }
}

pub fn validate(ledger: &Ledger, dag: &PrefixDag, counts: Option<&PublicCounts>) -> Verdict {
    let mut r = Replay::new(ledger, dag, counts);
    for (i, rec) in ledger.records.iter().enumerate() {
        r.i = i;
        r.record(rec);
        if r.stopped && i + 1 < ledger.records.len() {
            r.fail(Check::StopRule, "records after stop".into());
            break;
        }
    }
    if !r.stopped {
        r.i = ledger.records.len();
        r.fail(Check::StopRule, "ledger has no stop record".into());
    }
    let mut v = r.verdict;
    v.records = ledger.records.len();
    for f in &v.failures {
        match f.check {
            Check::Parse => v.parse_ok = false,
            Check::Replay => v.replay_ok = false,
            Check::StopRule => v.stop_rule_ok = false,
            Check::Guards => v.guards_ok = false,
            Check::Budget => v.budget_ok = false,
        }
    }
    v
}

struct Replay<'a> {
    cfg: &'a RunConfig,
    dag: PrefixDag,
    race: Race,
    counts: Option<&'a PublicCounts>,
    noise: Option<Vec<f64>>,
    i: usize,
    mode: Mode,
    claim: ClaimType,
    frontier: Frontier,
    leaves: Frontier,
    incumbent: Q64_64,
    expansions: u64,
    t: BTreeMap<NodeIx, f64>,
    anchors: BTreeMap<NodeIx, (Q64_64, u64, Q0_64)>,
    winners: BTreeMap<NodeIx, (Vec<NodeIx>, usize)>,
    evaluated: Vec<NodeIx>,
    /// Nodes that must be re-keyed after a switch to Fallback.
    rekey: BTreeSet<NodeIx>,
    last_pop: Option<NodeIx>,
    pop_key: Q64_64,
    pop_at: usize,
    all: &'a [LedgerRecord],
    budget_for: Option<NodeIx>,
    pending_dkey: Option<NodeIx>,
    ids: BTreeMap<NodeIx, String>,
    budget: Option<BudgetState>,
    last_budget_fail: bool,
    timeout_guard: bool,
    stopped: bool,
    verdict: Verdict,
}

impl<'a> Replay<'a> {
    fn new(ledger: &'a Ledger, dag: &PrefixDag, counts: Option<&'a PublicCounts>) -> Self {
        let cfg = &ledger.header.run;
        Replay {
            cfg,
            dag: prepare_dag(dag, cfg),
            race: cfg.race(),
            counts,
            noise: None,
            i: 0,
            mode: cfg.mode,
            claim: if cfg.mode == Mode::Fallback { ClaimType::NoCert } else { ClaimType::RunWiseExact },
            frontier: Frontier::new(),
            leaves: Frontier::new(),
            incumbent: Q64_64::MIN,
            expansions: 0,
            t: BTreeMap::new(),
            anchors: BTreeMap::new(),
            winners: BTreeMap::new(),
            evaluated: Vec::new(),
            rekey: BTreeSet::new(),
            last_pop: None,
            pop_key: Q64_64::MIN,
            pop_at: 0,
            all: &ledger.records,
            budget_for: None,
            pending_dkey: None,
            ids: BTreeMap::new(),
            budget: cfg.budget.clone().map(BudgetState::new),
            last_budget_fail: false,
            timeout_guard: false,
            stopped: false,
            verdict: Verdict::empty(),
        }
    }

    fn fail(&mut self, check: Check, reason: String) {
        self.verdict.failures.push(Failure { index: self.i, check, reason });
    }

    fn expect<T: PartialEq + core::fmt::Debug>(&mut self, check: Check, what: &str, logged: Option<T>, want: Option<T>) {
        if logged != want {
            self.fail(check, format!("{what}: logged {logged:?}, recomputed {want:?}"));
        }
    }

    fn q(v: f64) -> Q64_64 {
        Q64_64::from_f64_saturating(v).0
    }

    fn m_q(&self, ix: NodeIx) -> Q64_64 {
        Self::q(mtau(&self.dag, ix, &self.cfg.mtau))
    }

    fn noise(&mut self, ix: NodeIx) -> f64 {
        if self.noise.is_none() {
            self.noise = Some(fallback_noise_lse(&self.dag, &self.cfg.prf, self.cfg.tau));
        }
        self.noise.as_ref().unwrap()[ix.idx()]
    }

    fn node(&mut self, rec: &LedgerRecord) -> Option<NodeIx> {
        let d = rec.ctx_digest?;
        match self.dag.lookup(&d) {
            Some(ix) => {
                if let Some(id) = &rec.node_id {
                    match self.ids.get(&ix) {
                        Some(known) if known != id => {
                            self.fail(Check::Replay, format!("node id {id} differs from earlier {known}"))
                        }
                        Some(_) => {}
                        None => {
                            if !crate::ledger::is_uuid_v7(id) {
                                self.fail(Check::Replay, format!("node id {id} is not a UUIDv7"));
                            }
                            self.ids.insert(ix, id.clone());
                        }
                    }
                }
                if let (Some(p), Some(pid)) = (self.dag[ix].parent, &rec.parent_id) {
                    if self.ids.get(&p).is_some_and(|k| k != pid) {
                        self.fail(Check::Replay, "parent id does not match the parent's node id".into());
                    }
                }
                Some(ix)
            }
            None => {
                self.fail(Check::Replay, format!("unknown ctx_digest {d}"));
                None
            }
        }
    }

    fn record(&mut self, rec: &LedgerRecord) {
        let Some(ev) = rec.event else { return self.fail(Check::Replay, "record without event".into()) };
        if ev != EventKind::Guard && rec.mode != Some(self.mode) {
            self.fail(Check::Guards, format!("mode {:?} without a licensing guard (expected {:?})", rec.mode, self.mode));
        }
        if !matches!(ev, EventKind::Push | EventKind::Materialize | EventKind::Budget | EventKind::Guard | EventKind::Stop) {
            self.check_rekey_done();
        }
        match ev {
            EventKind::Push => self.push(rec),
            EventKind::Pop => self.pop(rec),
            EventKind::Expand => self.expand(rec),
            EventKind::LeafEval => self.leaf_eval(rec),
            EventKind::Materialize => self.materialize(rec),
            EventKind::Guard => self.guard(rec),
            EventKind::Budget => self.budget(rec),
            EventKind::Stop => self.stop(rec),
        }
        if ev != EventKind::Guard && rec.claim_type != Some(self.claim) {
            self.fail(Check::Guards, format!("claim {:?} but replay holds {:?}", rec.claim_type, self.claim));
        }
    }

    fn check_rekey_done(&mut self) {
        if !self.rekey.is_empty() {
            let n = self.rekey.len();
            self.rekey.clear();
            self.fail(Check::Guards, format!("{n} nodes were not re-keyed after the Fallback switch"));
        }
    }

    /// Potential fields on a push or first materialization.
    fn phi(&mut self, rec: &LedgerRecord, c: NodeIx) {
        let Some(p) = self.dag[c].parent else { return };
        let phi = self.cfg.phi;
        let (Ok(b), Ok(a), Ok(e)) = (phi.phi_node(&self.dag, p), phi.phi_node(&self.dag, c), phi.eta_q()) else {
            return;
        };
        self.expect(Check::Guards, "phi_before", rec.phi_before, Some(b));
        self.expect(Check::Guards, "phi_after", rec.phi_after, Some(a));
        self.expect(Check::Guards, "eta", rec.eta, Some(e));
        let fails = check_expansion(b, a, e, phi.eps_fp) == PhiCheck::AcyclicityFail;
        let flagged = rec.guards.as_ref().is_some_and(|g| g.contains(&Guard::AcyclicityFail));
        if fails != flagged {
            self.fail(Check::Guards, format!("acyclicity check fails={fails} but guard logged={flagged}"));
        }
        if flagged {
            self.expect(Check::Guards, "claim_type_before", rec.claim_type_before, Some(self.claim));
            self.expect(Check::Guards, "claim_type_after", rec.claim_type_after, Some(ClaimType::NoCert));
            self.claim = ClaimType::NoCert;
        }
    }

    fn provenance(&mut self, ix: NodeIx, purpose: Option<Purpose>, u: Option<Q0_64>, allowed: &[Purpose]) -> Option<Q0_64> {
        let (Some(p), Some(u)) = (purpose, u) else {
            self.fail(Check::Replay, "uniform or purpose missing".into());
            return None;
        };
        if !allowed.contains(&p) {
            self.fail(Check::Replay, format!("purpose {p:?} not allowed here"));
            return None;
        }
        let d = self.dag[ix].digest;
        let want = match p {
            Purpose::Prf => Some(prf_uniform(&self.cfg.prf, &d)),
            Purpose::Coupled if self.dag[ix].is_leaf => {
                self.race.arrival(&self.dag, ix).ok().and_then(|t| couple_leaf(t).ok())
            }
            Purpose::Coupled => {
                let n = &self.dag[ix];
                match (n.n_exact, n.n_ub, self.race.arrival(&self.dag, ix)) {
                    (Some(c), Some(ub), Ok(t)) => couple_same_u(t, c, ub).ok(),
                    _ => None,
                }
            }
            _ => Some(self.race.uniform(&d, p)),
        };
        if want != Some(u) {
            self.fail(Check::Replay, format!("uniform {u} does not re-derive from {p:?} (expected {want:?})"));
        }
        Some(u)
    }

    fn push(&mut self, rec: &LedgerRecord) {
        let Some(c) = self.node(rec) else { return };
        if self.dag[c].parent.is_some() {
            self.phi(rec, c);
        }
        let m = self.m_q(c);
        let key = match self.mode {
            Mode::Exact => self.push_exact(rec, c, m),
            Mode::Surrogate => self.push_surrogate(rec, c, m),
            Mode::Fallback => {
                self.rekey.remove(&c);
                let n = self.noise(c);
                Some(m.saturating_add(Self::q(n)))
            }
        };
        let Some(key) = key else { return };
        self.expect(Check::Replay, "key_raw", rec.key_raw, Some(key));
        let d = self.dag[c].digest;
        if self.frontier.iter().any(|(_, fd, _)| fd == d) {
            return self.fail(Check::Replay, "node pushed twice".into());
        }
        self.frontier.push(key, d, c);
    }

    fn push_exact(&mut self, rec: &LedgerRecord, c: NodeIx, m: Q64_64) -> Option<Q64_64> {
        let n = self.dag[c].n_exact;
        self.expect(Check::Replay, "N", rec.n, n);
        let n = n?;
        let t = match self.dag[c].parent {
            None => {
                let u = self.provenance(c, rec.purpose, rec.u, &[Purpose::Root])?;
                exp_from_raw(u, n).ok()?
            }
            Some(p) => {
                let Some((live, w)) = self.winners.get(&p).cloned() else {
                    self.fail(Check::Replay, "push before its parent's expansion".into());
                    return None;
                };
                let tp = *self.t.get(&p)?;
                match live.iter().position(|x| *x == c) {
                    Some(i) if i == w => {
                        if rec.u.is_some() {
                            self.fail(Check::Replay, "winner child carries a residual uniform".into());
                        }
                        tp
                    }
                    Some(_) => {
                        let u = self.provenance(c, rec.purpose, rec.u, &[Purpose::Residual])?;
                        tp + exp_from_raw(u, n).ok()?
                    }
                    None => {
                        self.fail(Check::Replay, "pushed node is not a live child".into());
                        return None;
                    }
                }
            }
        };
        self.t.insert(c, t);
        let nl = neg_log_q(t).unwrap_or(Q64_64::MAX);
        self.expect(Check::Replay, "neg_log_t", rec.neg_log_t, Some(nl));
        Some(m.saturating_add(nl))
    }

    fn push_surrogate(&mut self, rec: &LedgerRecord, c: NodeIx, m: Q64_64) -> Option<Q64_64> {
        let nub = self.dag[c].n_ub;
        self.expect(Check::Replay, "Nub", rec.nub, nub);
        let anchor_node = match self.dag[c].parent {
            None => {
                let u = self.provenance(c, rec.purpose, rec.u, &[Purpose::Coupled, Purpose::Root])?;
                let a = surrogate_anchor(u, nub?).unwrap_or(Q64_64::MAX);
                self.expect(Check::Replay, "neg_log_t", rec.neg_log_t, Some(a));
                self.anchors.insert(c, (a, nub?, u));
                c
            }
            Some(p) => p,
        };
        let Some(&(anchor, _, _)) = self.anchors.get(&anchor_node) else {
            self.fail(Check::Replay, "push before its parent's surrogate draw".into());
            return None;
        };
        let key = m.saturating_add(anchor);
        self.tighten(anchor_node, key);
        Some(key)
    }

    /// Kappa from public counts only; records `(index, kappa, key_tight)`.
    fn tighten(&mut self, anchor_node: NodeIx, key: Q64_64) {
        let Some(&(anchor, nub, u)) = self.anchors.get(&anchor_node) else { return };
        let Some(n) = self.counts.and_then(|c| c.get(&self.dag[anchor_node].digest)).copied() else { return };
        let (Ok(kf), Ok(kq)) = (kappa(n, nub), kappa_q(n, nub)) else {
            return self.fail(Check::Replay, format!("public count {n} exceeds logged Nub {nub}"));
        };
        // the tightened anchor is the exact-count anchor under the same U
        let exact = Self::q(libm::log(n as f64)) - Self::q(libm::log(std_exp(u)));
        if anchor + kq != exact {
            self.fail(Check::Replay, "kappa identity does not hold".into());
        }
        let tight = key + kq;
        debug_assert!(tight <= key);
        self.verdict.tightened.push(Tightening {
            index: self.i,
            kappa: Q32_32::from_f64(kf).unwrap_or(Q32_32(i64::MIN)),
            key_tight: tight,
        });
    }

    fn pop(&mut self, rec: &LedgerRecord) {
        let decision = stop_check(self.mode, self.frontier.max_key(), self.incumbent, self.leaves.max_key());
        if decision != StopDecision::Continue {
            self.fail(Check::StopRule, "pop after the stop rule already held".into());
        }
        let Some(p) = self.frontier.pop() else { return self.fail(Check::Replay, "pop from an empty frontier".into()) };
        if rec.ctx_digest != Some(p.digest) {
            self.fail(Check::Replay, format!("popped {:?}, frontier maximum is {}", rec.ctx_digest, p.digest));
        }
        self.expect(Check::Replay, "key_raw", rec.key_raw, Some(p.key));
        self.expect(Check::Replay, "tie_token", rec.tie_token, Some(p.tie_token));
        if !(self.mode == Mode::Fallback && self.dag[p.ix].is_leaf) {
            self.expansions += 1;
        }
        self.expect(Check::Replay, "expansions", rec.expansions, Some(self.expansions));
        if self.expansions > self.cfg.max_expansions {
            self.fail(Check::Guards, "expansion cap passed without Timeout".into());
        }
        let inc = (self.incumbent != Q64_64::MIN).then_some(self.incumbent);
        self.expect(Check::Replay, "incumbent", rec.incumbent, inc);
        if self.budget.is_some() && !self.dag[p.ix].is_leaf && self.budget_for != Some(p.ix) {
            self.fail(Check::Budget, "internal pop without a budget step".into());
        }
        if self.pending_dkey.is_some_and(|d| d != p.ix) {
            self.stale_dkey();
        }
        self.budget_for = None;
        self.last_pop = Some(p.ix);
        self.pop_key = p.key;
        self.pop_at = self.i;
    }

    fn expand(&mut self, rec: &LedgerRecord) {
        let Some(v) = self.node(rec) else { return };
        if self.last_pop != Some(v) {
            self.fail(Check::Replay, "expansion of a node that was not just popped".into());
        }
        match self.mode {
            Mode::Exact => {
                let n = self.dag[v].n_exact;
                self.expect(Check::Replay, "N", rec.n, n);
                let live: Vec<NodeIx> =
                    self.dag[v].children.iter().copied().filter(|c| self.dag[*c].n_exact.is_some_and(|k| k > 0)).collect();
                let counts: Vec<u64> = live.iter().map(|c| self.dag[*c].n_exact.unwrap()).collect();
                let Some(w) = self.provenance(v, rec.purpose, rec.u, &[Purpose::Winner]) else { return };
                if counts.is_empty() {
                    return self.fail(Check::Replay, "winner draw at a node without live children".into());
                }
                let win = quantile_cat(w, &counts);
                self.expect(Check::Replay, "winner", rec.winner, Some(win as u32));
                self.winners.insert(v, (live, win));
            }
            Mode::Surrogate => {
                let nub = self.dag[v].n_ub;
                self.expect(Check::Replay, "Nub", rec.nub, nub);
                let allowed = [Purpose::Coupled, Purpose::Surrogate, Purpose::Root];
                let Some(u) = self.provenance(v, rec.purpose, rec.u, &allowed) else { return };
                let Some(nub) = nub else { return };
                let a = surrogate_anchor(u, nub).unwrap_or(Q64_64::MAX);
                self.expect(Check::Replay, "neg_log_t", rec.neg_log_t, Some(a));
                if self.anchors.insert(v, (a, nub, u)).is_some() {
                    self.fail(Check::Replay, "second surrogate draw for one node".into());
                }
            }
            Mode::Fallback => self.fail(Check::Replay, "Fallback logs no expand records".into()),
        }
    }

    fn leaf_eval(&mut self, rec: &LedgerRecord) {
        let Some(p) = self.node(rec) else { return };
        if self.last_pop != Some(p) || !self.dag[p].is_leaf {
            return self.fail(Check::Replay, "leaf evaluation without popping that leaf".into());
        }
        let neg_log_e = match self.mode {
            Mode::Exact => {
                let Some(t) = self.t.get(&p).copied() else {
                    return self.fail(Check::Replay, "exact leaf without an arrival".into());
                };
                self.expect(Check::Replay, "purpose", rec.purpose, Some(Purpose::Coupled));
                self.expect(Check::Replay, "U", rec.u, Some(Q0_64::from_value(-libm::expm1(-t))));
                neg_log_q(t).unwrap_or(Q64_64::MAX)
            }
            Mode::Surrogate => {
                let allowed = [Purpose::Coupled, Purpose::Prf, Purpose::Leaf];
                let Some(u) = self.provenance(p, rec.purpose, rec.u, &allowed) else { return };
                neg_log_q(std_exp(u)).unwrap_or(Q64_64::MAX)
            }
            Mode::Fallback => return self.fail(Check::Replay, "Fallback materializes leaves".into()),
        };
        self.expect(Check::Replay, "neg_log_t", rec.neg_log_t, Some(neg_log_e));
        let value = Self::q(self.dag[p].prefix_score).saturating_add(neg_log_e);
        self.expect(Check::Replay, "value", rec.value, Some(value));
        if value > self.incumbent {
            self.incumbent = value;
        }
        self.expect(Check::Replay, "incumbent", rec.incumbent, Some(self.incumbent));
        self.evaluated.push(p);
    }

    fn materialize(&mut self, rec: &LedgerRecord) {
        let known = rec.ctx_digest.and_then(|d| self.dag.lookup(&d)).is_some_and(|ix| self.ids.contains_key(&ix));
        let Some(p) = self.node(rec) else { return };
        if self.mode != Mode::Fallback || !self.dag[p].is_leaf {
            return self.fail(Check::Replay, "materialization outside Fallback or of an internal node".into());
        }
        let parent_popped = self.dag[p].parent.is_some_and(|q| self.last_pop == Some(q));
        if !(self.rekey.remove(&p) || self.last_pop == Some(p) || parent_popped) {
            self.fail(Check::Replay, "materialized leaf was neither popped, a popped node's child, nor re-keyed".into());
        }
        if !known {
            self.phi(rec, p);
        }
        let Some(u) = self.provenance(p, rec.purpose, rec.u, &[Purpose::Prf]) else { return };
        let value = Self::q(self.dag[p].prefix_score).saturating_add(Self::q(leaf_noise(u, self.cfg.tau)));
        self.expect(Check::Replay, "value", rec.value, Some(value));
        self.expansions += 1;
        self.expect(Check::Replay, "expansions", rec.expansions, Some(self.expansions));
        let d = self.dag[p].digest;
        if self.leaves.iter().any(|(_, ld, _)| ld == d) {
            return self.fail(Check::Replay, "leaf materialized twice".into());
        }
        self.leaves.push(value, d, p);
        self.incumbent = self.leaves.max_key().unwrap();
        self.expect(Check::Replay, "incumbent", rec.incumbent, None);
    }

    fn guard(&mut self, rec: &LedgerRecord) {
        let at = if rec.ctx_digest.is_some() { self.node(rec) } else { None };
        self.expect(Check::Guards, "mode", rec.mode, Some(self.mode));
        self.expect(Check::Guards, "claim_type_before", rec.claim_type_before, Some(self.claim));
        let Some([g]) = rec.guards.as_deref() else {
            return self.fail(Check::Guards, "guard record needs exactly one guard".into());
        };
        let to = rec.mode_after.unwrap_or(self.mode);
        let after = rec.claim_type_after;
        let licensed = match g {
            Guard::CountFail => {
                let missing = at.is_some_and(|v| {
                    let n = &self.dag[v];
                    let kids = &n.children;
                    match self.mode {
                        Mode::Exact => {
                            n.n_exact.is_none_or(|c| c == 0) || kids.iter().any(|c| self.dag[*c].n_exact.is_none())
                        }
                        Mode::Surrogate => {
                            n.n_ub.is_none_or(|c| c == 0) || kids.iter().any(|c| self.dag[*c].n_ub.is_none())
                        }
                        Mode::Fallback => false,
                    }
                });
                let ub_ok = at.is_some_and(|v| {
                    let n = &self.dag[v];
                    n.n_ub.is_some_and(|u| u > 0) && n.children.iter().all(|c| self.dag[*c].n_ub.is_some())
                });
                let target_ok = match (self.mode, to) {
                    (Mode::Exact, Mode::Surrogate) => ub_ok && after == Some(self.claim),
                    (Mode::Exact, Mode::Fallback) if ub_ok => false,
                    (Mode::Exact | Mode::Surrogate, Mode::Fallback) => after == Some(ClaimType::NoCert),
                    _ => false,
                };
                missing && target_ok
            }
            Guard::BudgetFail => {
                let ok = self.last_budget_fail && after == Some(ClaimType::NoCert);
                ok && (to == Mode::Fallback)
            }
            Guard::Timeout => {
                self.timeout_guard = true;
                if stop_check(self.mode, self.frontier.max_key(), self.incumbent, self.leaves.max_key()) != StopDecision::Continue {
                    self.fail(Check::StopRule, "Timeout after the stop rule already held".into());
                }
                to == self.mode && after == Some(ClaimType::NoCert)
            }
            Guard::CapExceeded => {
                at.is_some_and(|v| self.dag[v].depth > self.cfg.phi.l) && to == self.mode && after == Some(ClaimType::NoCert)
            }
            Guard::NumClamp => to == self.mode && after == Some(ClaimType::NoCert),
            Guard::AcyclicityFail => false,
        };
        if !licensed {
            self.fail(Check::Guards, format!("{g:?} does not license {:?} -> {:?}, claim {:?}", self.mode, to, after));
        }
        self.last_budget_fail = false;
        if let Some(c) = after {
            self.claim = c;
        }
        if to != self.mode {
            self.switch(to);
        }
    }

    fn switch(&mut self, to: Mode) {
        let from = self.mode;
        self.mode = to;
        if to != Mode::Fallback || from == Mode::Fallback {
            return;
        }
        let entries: Vec<NodeIx> = self.frontier.iter().map(|e| e.2).collect();
        self.frontier = Frontier::new();
        for ix in entries {
            if self.noise(ix) > f64::NEG_INFINITY {
                self.rekey.insert(ix);
            }
        }
        self.rekey.extend(self.evaluated.drain(..));
        self.incumbent = Q64_64::MIN;
    }

    fn budget(&mut self, rec: &LedgerRecord) {
        if rec.budget_event.is_none() {
            // realized key drop after an expansion
            let node = rec.ctx_digest.and_then(|d| self.dag.lookup(&d));
            if node.is_none() || self.pending_dkey != node || self.last_pop != node {
                return self.fail(Check::Budget, "dkey_real without a matching selection".into());
            }
            self.pending_dkey = None;
            let v = node.unwrap();
            let recs = &self.all[self.pop_at..self.i];
            let real = match dkey_best_child(&self.dag, v, recs) {
                Some(b) => (self.pop_key.to_f64() - b.to_f64()).max(0.0),
                None => 0.0,
            };
            let want = Some(Q32_32::from_f64(real).unwrap_or(Q32_32(i64::MAX)));
            self.expect(Check::Budget, "dkey_real", rec.dkey_real, want);
            return;
        }
        let Some(mut state) = self.budget.take() else {
            return self.fail(Check::Budget, "budget record but no budget configured".into());
        };
        let top = self.frontier.peek();
        let node = rec.ctx_digest.and_then(|d| self.dag.lookup(&d));
        if top.map(|p| p.ix) != node {
            self.fail(Check::Budget, "budget step is not for the frontier maximum".into());
        }
        match rec.budget_event {
            Some(BudgetEvent::None) => match state.select_model() {
                Ok(sel) => {
                    state.commit(sel.index);
                    let e: CatalogEntry = state.cfg.catalog[sel.index].clone();
                    let (spent, acc, cap, slo, delta) =
                        (state.price_spent, state.latency_acc_ms, state.cfg.price_max, state.cfg.slo_ms, state.cfg.delta);
                    let eps = state.eps_used();
                    let eps_max = state.cfg.eps_max;
                    self.expect(Check::Budget, "model_id", rec.model_id.clone(), Some(e.model_id.clone()));
                    self.expect(Check::Budget, "adapter_id", rec.adapter_id.clone(), Some(e.adapter_id.clone()));
                    self.expect(Check::Budget, "dp_cert_id", rec.dp_cert_id.clone(), Some(e.dp_cert_id.clone()));
                    self.expect(Check::Budget, "eps_train", rec.eps_train, Q32_32::from_f64(e.eps_train).ok());
                    self.expect(Check::Budget, "delta_train", rec.delta_train.clone(), Some(format!("{:e}", e.delta_train)));
                    self.expect(Check::Budget, "dkey_pred", rec.dkey_pred, Q32_32::from_f64(sel.dkey_pred).ok());
                    self.expect(Check::Budget, "price_spent", rec.price_spent, Some(spent));
                    self.expect(Check::Budget, "latency_acc_ms", rec.latency_acc_ms, Some(acc));
                    self.expect(Check::Budget, "price_cap", rec.price_cap, Some(cap));
                    self.expect(Check::Budget, "sla_ms", rec.sla_ms, Some(slo));
                    let logged_eps = rec.eps_delta.as_ref().and_then(|e| e.eps);
                    self.expect(Check::Budget, "eps_delta.eps", logged_eps, eps.and_then(|(e, _)| Q32_32::from_f64(e).ok()));
                    self.expect(
                        Check::Budget,
                        "eps_delta.delta",
                        rec.eps_delta.as_ref().and_then(|e| e.delta.clone()),
                        Some(format!("{delta:e}")),
                    );
                    self.expect(Check::Budget, "router_rdp_eps", rec.router_rdp_eps, eps.and_then(|(e, _)| Q32_32::from_f64(e).ok()));
                    self.expect(Check::Budget, "alpha_selected", rec.alpha_selected, eps.map(|(_, a)| a as u32));
                    if spent > cap || eps.is_some_and(|(e, _)| e > eps_max) {
                        self.fail(Check::Budget, "budget inequality violated".into());
                    }
                    self.verdict.rdp_recomputed = eps.map(|e| e.0);
                    if self.pending_dkey.is_some() {
                        self.stale_dkey();
                    }
                    self.budget_for = node;
                    self.pending_dkey = node;
                    self.budget = Some(state);
                }
                Err(_) => {
                    self.fail(Check::Budget, "selection logged but the catalog is exhausted".into());
                    self.budget = Some(state);
                }
            },
            Some(BudgetEvent::BudgetFail) => {
                if state.select_model().is_ok() {
                    self.fail(Check::Budget, "BudgetFail logged while a feasible model exists".into());
                }
                self.last_budget_fail = true;
            }
            None => unreachable!(),
        }
    }

    fn stale_dkey(&mut self) {
        self.fail(Check::Budget, "selection has no dkey_real record".into());
        self.pending_dkey = None;
    }

    fn stop(&mut self, rec: &LedgerRecord) {
        self.check_rekey_done();
        if self.pending_dkey.is_some() {
            self.stale_dkey();
        }
        self.stopped = true;
        let max_key = self.frontier.max_key();
        self.expect(Check::StopRule, "max_key", rec.max_key, max_key);
        self.expect(Check::StopRule, "expansions", rec.expansions, Some(self.expansions));
        let inc = (self.incumbent != Q64_64::MIN).then_some(self.incumbent);
        self.expect(Check::StopRule, "incumbent", rec.incumbent, inc);
        let decision = stop_check(self.mode, max_key, self.incumbent, self.leaves.max_key());
        let ok = match rec.reason {
            Some(StopReason::Certified) => decision == StopDecision::StopCertified,
            Some(StopReason::Heuristic) => decision == StopDecision::StopHeuristic,
            Some(StopReason::Timeout) => self.timeout_guard,
            None => false,
        };
        self.verdict.stop_rule_ok = true;
        if !ok {
            self.fail(Check::StopRule, format!("stop reason {:?} does not hold", rec.reason));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::PublicCaps;
    use crate::prefix_dag::{compile, SharedDag, SharedEdge, SharedNode};
    use crate::search::run;
    use alloc::string::ToString;
    use alloc::vec;

    fn tree(fan: &[usize]) -> PrefixDag {
        let mut nodes = vec![SharedNode { id: "r".into(), state: "r".into(), leaf: false, delta_cost: 0.0, mtau: None }];
        let mut edges = Vec::new();
        for (i, k) in fan.iter().enumerate() {
            let u = alloc::format!("u{i}");
            nodes.push(SharedNode { id: u.clone(), state: u.clone(), leaf: false, delta_cost: 0.1 * i as f64, mtau: None });
            edges.push(SharedEdge { from: "r".into(), to: u.clone(), order: i as u64 });
            for j in 0..*k {
                let p = alloc::format!("{u}p{j}");
                nodes.push(SharedNode { id: p.clone(), state: p.to_string(), leaf: true, delta_cost: 0.2 * j as f64, mtau: None });
                edges.push(SharedEdge { from: u.clone(), to: p, order: j as u64 });
            }
        }
        let g = SharedDag { root: "r".into(), caps: PublicCaps { max_depth: 2, c_s_max: 1.0, c_s_min: 0.1 }, nodes, edges };
        compile(&g).unwrap().0
    }

    #[test]
    fn rdp_examples() {
        assert_eq!(rdp_to_eps_delta(&[], 1e-6), None);
        let (e, _) = rdp_to_eps_delta(&[RdpAtom { alpha: 2.0, eps: 1.0 }], 1e-6).unwrap();
        assert!((e - 14.8155).abs() < 1e-3);
    }

    #[test]
    fn clean_runs_validate_in_every_mode() {
        let dag = tree(&[3, 1, 2]);
        for seed in 0..10 {
            for mode in [Mode::Exact, Mode::Surrogate, Mode::Fallback] {
                let mut cfg = RunConfig::for_dag(&dag, mode, seed);
                cfg.n_ub_factor = 2.0;
                let res = run(&dag, &cfg).unwrap();
                let v = validate(&res.ledger, &dag, None);
                assert!(v.ok(), "{mode:?} seed {seed}: {:?}", v.failures);
            }
        }
    }

    #[test]
    fn kappa_is_log_ratio_and_tightens() {
        let dag = tree(&[3, 3]);
        let mut cfg = RunConfig::for_dag(&dag, Mode::Surrogate, 1);
        cfg.n_ub_factor = 2.0;
        let res = run(&dag, &cfg).unwrap();
        let mut counts = PublicCounts::new();
        counts.insert(dag[dag.root()].digest, 6);
        let v = validate(&res.ledger, &dag, Some(&counts));
        assert!(v.ok(), "{:?}", v.failures);
        assert!(!v.tightened.is_empty());
        for t in &v.tightened {
            assert!((t.kappa.to_f64() + core::f64::consts::LN_2).abs() < 1e-9);
            let raw = res.ledger.records[t.index].key_raw.unwrap();
            assert!(t.key_tight < raw);
            assert!(((raw - t.key_tight).to_f64() - core::f64::consts::LN_2).abs() < 1e-12);
        }
        // without public counts nothing is tightened
        assert!(validate(&res.ledger, &dag, None).tightened.is_empty());
    }

    #[test]
    fn flipped_uniform_bit_fails_at_its_record() {
        let dag = tree(&[3, 1, 2]);
        let cfg = RunConfig::for_dag(&dag, Mode::Exact, 5);
        let res = run(&dag, &cfg).unwrap();
        for (i, r) in res.ledger.records.iter().enumerate() {
            let Some(u) = r.u else { continue };
            let mut l = res.ledger.clone();
            l.records[i].u = Some(Q0_64(u.0 ^ 1));
            let v = validate(&l, &dag, None);
            assert!(!v.replay_ok);
            assert_eq!(v.first_failure().unwrap().index, i, "{:?}", v.failures);
        }
    }

    #[test]
    fn missing_stop_and_unlicensed_mode_change_fail() {
        let dag = tree(&[2, 2]);
        let cfg = RunConfig::for_dag(&dag, Mode::Exact, 0);
        let res = run(&dag, &cfg).unwrap();
        let mut l = res.ledger.clone();
        l.records.pop();
        assert!(!validate(&l, &dag, None).stop_rule_ok);
        let mut l = res.ledger.clone();
        let last = l.records.len() - 2;
        l.records[last].mode = Some(Mode::Fallback);
        assert!(!validate(&l, &dag, None).guards_ok);
    }

    fn catalog() -> Vec<CatalogEntry> {
        let e = |id: &str, eps: f64, price: u64| CatalogEntry {
            model_id: id.into(),
            adapter_id: alloc::format!("{id}-adapter"),
            dp_cert_id: alloc::format!("{id}-cert"),
            eps_train: eps,
            delta_train: 1e-6,
            price_m: price,
            latency_m: 10,
            eps_m: 0.0,
            gain: 0.0,
        };
        vec![e("a", 2.0, 3), e("b", 3.5, 5)]
    }

    #[test]
    fn downgrades_and_budget_runs_validate() {
        let dag = tree(&[3, 2, 2]);
        let mut cases = Vec::new();
        let base = RunConfig::for_dag(&dag, Mode::Exact, 4);
        let mut c = base.clone();
        c.count_cap = 3;
        cases.push(c.clone());
        c.ub_cap = 3;
        cases.push(c);
        let mut c = base.clone();
        c.max_expansions = 2;
        cases.push(c);
        let mut c = base.clone();
        c.phi.l = 1;
        cases.push(c);
        let mut c = base.clone();
        c.phi.eta = 5.0;
        cases.push(c);
        for price in [4, 9, 1000] {
            for mode in [Mode::Exact, Mode::Surrogate, Mode::Fallback] {
                let mut c = RunConfig::for_dag(&dag, mode, 4);
                c.budget = Some(crate::budget::BudgetConfig::new(catalog(), price, 1000));
                cases.push(c.clone());
                c.max_expansions = 3;
                cases.push(c);
            }
        }
        let mut guards = BTreeSet::new();
        for c in &cases {
            let res = run(&dag, c).unwrap();
            guards.extend(res.guards.iter().map(|g| alloc::format!("{g:?}")));
            let v = validate(&res.ledger, &dag, None);
            assert!(v.ok(), "{:?}\n{:?}", res.guards, v.failures);
        }
        for g in ["CountFail", "Timeout", "CapExceeded", "AcyclicityFail", "BudgetFail"] {
            assert!(guards.contains(g), "{g} never fired");
        }
    }

    #[test]
    fn dropping_a_guard_or_budget_record_fails() {
        let dag = tree(&[3, 2, 2]);
        let mut c = RunConfig::for_dag(&dag, Mode::Exact, 4);
        c.count_cap = 3;
        let res = run(&dag, &c).unwrap();
        let gi = res.ledger.records.iter().position(|r| r.event == Some(EventKind::Guard)).unwrap();
        let mut l = res.ledger.clone();
        l.records.remove(gi);
        assert!(!validate(&l, &dag, None).guards_ok);

        c.count_cap = u64::MAX;
        c.budget = Some(crate::budget::BudgetConfig::new(catalog(), 1000, 1000));
        let res = run(&dag, &c).unwrap();
        let bi = res.ledger.records.iter().position(|r| r.budget_event.is_some()).unwrap();
        let mut l = res.ledger.clone();
        l.records[bi].price_spent = Some(0);
        let v = validate(&l, &dag, None);
        assert!(!v.budget_ok);
        assert_eq!(v.first_failure().unwrap().index, bi);
        let mut l = res.ledger.clone();
        l.records.remove(bi);
        assert!(!validate(&l, &dag, None).budget_ok);
    }

    #[test]
    fn tampered_tie_token_and_early_stop_fail() {
        let dag = tree(&[2, 2, 2]);
        let res = run(&dag, &RunConfig::for_dag(&dag, Mode::Exact, 1)).unwrap();
        let pi = res.ledger.records.iter().position(|r| r.event == Some(EventKind::Pop)).unwrap();
        let mut l = res.ledger.clone();
        l.records[pi].tie_token = Some(7);
        assert_eq!(validate(&l, &dag, None).first_failure().unwrap().index, pi);
        // stopping right after the root push is not licensed
        let mut l = res.ledger.clone();
        let stop = l.records.last().unwrap().clone();
        l.records.truncate(1);
        l.records.push(stop);
        assert!(!validate(&l, &dag, None).stop_rule_ok);
    }

    #[test]
    fn validation_is_idempotent() {
        let dag = tree(&[2, 3]);
        let cfg = RunConfig::for_dag(&dag, Mode::Surrogate, 2);
        let res = run(&dag, &cfg).unwrap();
        assert_eq!(validate(&res.ledger, &dag, None), validate(&res.ledger, &dag, None));
    }

    #[test]
    fn parse_errors_become_verdicts() {
        let dag = tree(&[1]);
        let v = validate_text("", &dag, None);
        assert!(!v.parse_ok);
        assert_eq!(v.failures[0].index, 1);
    }
}
