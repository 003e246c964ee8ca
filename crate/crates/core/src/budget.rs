//! Per-request budget controller and RDP tally.
//!
//! The controller only picks which catalog entry serves an expansion and
//! keeps the privacy and spend tallies. It never touches arrivals or keys.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Rényi orders used when a catalog entry carries inference-time privacy.
pub const ALPHA_GRID: [u32; 9] = [2, 3, 4, 5, 6, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub model_id: String,
    pub adapter_id: String,
    pub dp_cert_id: String,
    pub eps_train: f64,
    pub delta_train: f64,
    /// Cents per call.
    pub price_m: u64,
    /// P95 latency in milliseconds.
    pub latency_m: u32,
    /// Inference-time privacy cost; zero for pure post-processing.
    #[serde(default)]
    pub eps_m: f64,
    /// Static key-slack gain used by the synthetic estimator.
    #[serde(default)]
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DkeyEstimator {
    /// Predicts no key reduction; ties are broken by model id.
    Zero,
    /// Uses each entry's `gain`.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { alpha: 0.1, beta: 0.01, gamma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub eps_max: f64,
    pub delta: f64,
    pub price_max: u64,
    pub slo_ms: u32,
    #[serde(default)]
    pub weights: Weights,
    /// Latency safety factor in thousandths (1200 = 1.2x).
    pub safety_permille: u32,
    pub estimator: DkeyEstimator,
    pub catalog: Vec<CatalogEntry>,
}

impl BudgetConfig {
    pub fn new(catalog: Vec<CatalogEntry>, price_max: u64, slo_ms: u32) -> Self {
        BudgetConfig {
            eps_max: 1.0,
            delta: 1e-6,
            price_max,
            slo_ms,
            weights: Weights::default(),
            safety_permille: 1200,
            estimator: DkeyEstimator::Zero,
            catalog,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpAtom {
    pub alpha: f64,
    pub eps: f64,
}

/// Classic RDP to (eps, delta) conversion:
/// `min_alpha [ sum_i eps_i(alpha) + log(1/delta) / (alpha - 1) ]` over the
/// orders present in `atoms`. Returns `(eps, alpha)`, or `None` without
/// atoms.
pub fn rdp_to_eps_delta(atoms: &[RdpAtom], delta: f64) -> Option<(f64, f64)> {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0,1)");
    let mut by_alpha: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for a in atoms {
        assert!(a.alpha > 1.0, "Renyi order must exceed 1");
        by_alpha.entry(a.alpha.to_bits()).or_insert((a.alpha, 0.0)).1 += a.eps;
    }
    let log_inv_delta = -libm::log(delta);
    by_alpha
        .values()
        .map(|(alpha, eps)| (eps + log_inv_delta / (alpha - 1.0), *alpha))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

pub const CONVERSION_VARIANT: &str = "classic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyCheck {
    Ok,
    BudgetFail,
}

/// Fails iff `acc + safety * latency_m > slo_ms`, evaluated exactly.
pub fn apply_latency_guard(acc_ms: u32, latency_m: u32, slo_ms: u32, safety_permille: u32) -> LatencyCheck {
    let lhs = acc_ms as u64 * 1000 + safety_permille as u64 * latency_m as u64;
    if lhs > slo_ms as u64 * 1000 {
        LatencyCheck::BudgetFail
    } else {
        LatencyCheck::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exhausted;

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub dkey_pred: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetState {
    pub cfg: BudgetConfig,
    pub atoms: Vec<RdpAtom>,
    pub price_spent: u64,
    pub latency_acc_ms: u32,
    pub selections: Vec<usize>,
}

impl BudgetState {
    pub fn new(cfg: BudgetConfig) -> Self {
        BudgetState { cfg, atoms: Vec::new(), price_spent: 0, latency_acc_ms: 0, selections: Vec::new() }
    }

    fn atoms_for(eps_m: f64) -> impl Iterator<Item = RdpAtom> {
        // an eps-DP step is (alpha, eps)-RDP at every order
        let on = eps_m > 0.0;
        ALPHA_GRID.iter().filter(move |_| on).map(move |a| RdpAtom { alpha: *a as f64, eps: eps_m })
    }

    /// Privacy spent so far as `(eps, alpha)`; `None` without atoms.
    pub fn eps_used(&self) -> Option<(f64, f64)> {
        rdp_to_eps_delta(&self.atoms, self.cfg.delta)
    }

    pub fn feasible(&self, e: &CatalogEntry) -> bool {
        let price_ok = self.price_spent.checked_add(e.price_m).is_some_and(|p| p <= self.cfg.price_max);
        let latency_ok =
            apply_latency_guard(self.latency_acc_ms, e.latency_m, self.cfg.slo_ms, self.cfg.safety_permille)
                == LatencyCheck::Ok;
        let eps_ok = if e.eps_m > 0.0 {
            let mut atoms = self.atoms.clone();
            atoms.extend(Self::atoms_for(e.eps_m));
            rdp_to_eps_delta(&atoms, self.cfg.delta).is_some_and(|(eps, _)| eps <= self.cfg.eps_max)
        } else {
            true
        };
        price_ok && latency_ok && eps_ok
    }

    pub fn dkey_estimate(&self, e: &CatalogEntry) -> f64 {
        match self.cfg.estimator {
            DkeyEstimator::Zero => 0.0,
            DkeyEstimator::Static => e.gain,
        }
    }

    /// Feasible entry maximizing `dkey / (alpha*price + beta*latency + gamma*eps)`;
    /// ties go to the lexicographically smallest model id.
    pub fn select_model(&self) -> Result<Selection, Exhausted> {
        let w = self.cfg.weights;
        let mut best: Option<Selection> = None;
        for (i, e) in self.cfg.catalog.iter().enumerate() {
            if !self.feasible(e) {
                continue;
            }
            let dkey = self.dkey_estimate(e);
            let denom = w.alpha * e.price_m as f64 + w.beta * e.latency_m as f64 + w.gamma * e.eps_m;
            let ratio = if denom > 0.0 {
                dkey / denom
            } else if dkey > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    ratio > b.ratio || (ratio == b.ratio && e.model_id < self.cfg.catalog[b.index].model_id)
                }
            };
            if better {
                best = Some(Selection { index: i, dkey_pred: dkey, ratio });
            }
        }
        best.ok_or(Exhausted)
    }

    /// Charge the tallies for a selected entry.
    pub fn commit(&mut self, index: usize) {
        let e = &self.cfg.catalog[index];
        self.price_spent += e.price_m;
        self.latency_acc_ms = self.latency_acc_ms.saturating_add(e.latency_m);
        let atoms: Vec<RdpAtom> = Self::atoms_for(e.eps_m).collect();
        self.atoms.extend(atoms);
        self.selections.push(index);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(id: &str, gain: f64, price: u64, latency: u32) -> CatalogEntry {
        CatalogEntry {
            model_id: id.into(),
            adapter_id: alloc::format!("adapter-{id}"),
            dp_cert_id: alloc::format!("cert-{id}"),
            eps_train: 2.0,
            delta_train: 1e-6,
            price_m: price,
            latency_m: latency,
            eps_m: 0.0,
            gain,
        }
    }

    fn state(catalog: Vec<CatalogEntry>, price_max: u64) -> BudgetState {
        let mut cfg = BudgetConfig::new(catalog, price_max, 1000);
        cfg.estimator = DkeyEstimator::Static;
        BudgetState::new(cfg)
    }

    #[test]
    fn ratio_rule_picks_cheaper_gain() {
        let s = state(vec![entry("m1", 2.0, 1, 10), entry("m2", 3.0, 5, 20)], 100);
        let sel = s.select_model().unwrap();
        assert_eq!(sel.index, 0);
        assert!((sel.ratio - 10.0).abs() < 1e-12);
        let r2: f64 = 3.0 / (0.1 * 5.0 + 0.01 * 20.0);
        assert!((r2 - 4.286).abs() < 1e-3);
    }

    #[test]
    fn infeasible_entries_are_filtered() {
        let mut s = state(vec![entry("m1", 2.0, 1, 10), entry("m2", 3.0, 5, 20)], 100);
        s.price_spent = 96;
        // m1 still fits (97), m2 does not (101)
        assert_eq!(s.select_model().unwrap().index, 0);
        let mut s = state(vec![entry("m1", 2.0, 50, 10), entry("m2", 3.0, 5, 20)], 40);
        s.price_spent = 0;
        assert_eq!(s.select_model().unwrap().index, 1);
        s.price_spent = 40;
        assert_eq!(s.select_model(), Err(Exhausted));
    }

    #[test]
    fn ties_break_on_model_id() {
        let mut cfg = BudgetConfig::new(vec![entry("b", 0.0, 1, 1), entry("a", 0.0, 2, 2)], 10, 100);
        cfg.estimator = DkeyEstimator::Zero;
        assert_eq!(BudgetState::new(cfg).select_model().unwrap().index, 1);
    }

    #[test]
    fn latency_guard_examples() {
        assert_eq!(apply_latency_guard(0, 90, 100, 1200), LatencyCheck::BudgetFail);
        assert_eq!(apply_latency_guard(0, 0, 100, 1200), LatencyCheck::Ok);
        assert_eq!(apply_latency_guard(40, 50, 100, 1200), LatencyCheck::Ok);
        assert_eq!(apply_latency_guard(41, 50, 100, 1200), LatencyCheck::BudgetFail);
    }

    #[test]
    fn rdp_conversion_examples() {
        assert_eq!(rdp_to_eps_delta(&[], 1e-6), None);
        let (eps, alpha) = rdp_to_eps_delta(&[RdpAtom { alpha: 2.0, eps: 1.0 }], 1e-6).unwrap();
        assert!((eps - 14.8155).abs() < 1e-3);
        assert_eq!(alpha, 2.0);
        let two = rdp_to_eps_delta(&[RdpAtom { alpha: 2.0, eps: 0.5 }, RdpAtom { alpha: 2.0, eps: 0.5 }], 1e-6).unwrap();
        assert_eq!(two.0, eps);
        // with a grid the best order wins
        let grid = [RdpAtom { alpha: 2.0, eps: 0.1 }, RdpAtom { alpha: 32.0, eps: 0.1 }];
        let (e, a) = rdp_to_eps_delta(&grid, 1e-6).unwrap();
        assert_eq!(a, 32.0);
        assert!((e - (0.1 + 1e6f64.ln() / 31.0)).abs() < 1e-12);
    }

    #[test]
    fn commit_updates_tallies_and_privacy() {
        let mut e = entry("p", 1.0, 3, 7);
        e.eps_m = 0.01;
        let mut s = state(vec![e, entry("q", 0.5, 1, 1)], 100);
        assert_eq!(s.eps_used(), None);
        s.commit(1);
        assert_eq!(s.eps_used(), None);
        s.commit(0);
        assert_eq!((s.price_spent, s.latency_acc_ms), (4, 8));
        assert!(s.eps_used().unwrap().0 > 0.0);
    }
}
