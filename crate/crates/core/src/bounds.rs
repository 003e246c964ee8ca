//! Deterministic score bounds, the truncated-LSE certificate, the
//! acyclicity potential and the count correction.
//!
//! Nothing here reads race randomness: every function takes only the
//! public graph and configuration.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::fixed::{NumClamp, Q32_32, Q64_64};
use crate::prefix_dag::{NodeIx, PrefixDag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    /// `s_det(prefix) + d(v) * c_s_max`, `d(v) = max_depth - depth(v)`.
    R1,
    /// Monotone envelope `psi(prefix) = s_det(prefix)`; valid when costs are
    /// non-negative.
    R2,
    /// Per-node bounds shipped with the graph (`mtau` field); nodes without
    /// one use R1.
    Given,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtauConfig {
    pub recipe: Recipe,
    /// Per-step envelope for R1.
    pub c_s_max: f64,
    pub max_depth: u32,
}

impl MtauConfig {
    pub fn for_dag(recipe: Recipe, dag: &PrefixDag) -> Self {
        MtauConfig { recipe, c_s_max: dag.caps.c_s_max, max_depth: dag.caps.max_depth }
    }

    fn r1(&self, dag: &PrefixDag, ix: NodeIx) -> f64 {
        let n = &dag[ix];
        let d = self.max_depth.saturating_sub(n.depth);
        n.prefix_score + d as f64 * self.c_s_max
    }
}

/// Admissible upper bound on `s_det` of every leaf below `ix`.
pub fn mtau(dag: &PrefixDag, ix: NodeIx, cfg: &MtauConfig) -> f64 {
    match cfg.recipe {
        Recipe::R1 => cfg.r1(dag, ix),
        Recipe::R2 => dag[ix].prefix_score,
        Recipe::Given => dag[ix].mtau_hint.unwrap_or_else(|| cfg.r1(dag, ix)),
    }
}

pub fn mtau_q(dag: &PrefixDag, ix: NodeIx, cfg: &MtauConfig) -> Result<Q64_64, NumClamp> {
    Q64_64::from_f64(mtau(dag, ix, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailDiverges;

impl fmt::Display for TailDiverges {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("truncation tail sum is not finite")
    }
}

impl core::error::Error for TailDiverges {}

/// Log-sum-exp with the usual max shift; `-inf` for an empty input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    let s: f64 = xs.into_iter().map(|x| libm::exp(x - m)).sum();
    m + libm::log(s)
}

/// Absolute truncation bound on `log sum_P exp(s_det(P))`.
///
/// `partial_lse` covers leaves at depth `<= k_cut`; `b[k]` bounds the number
/// of leaves at depth `k`, each of which scores at most
/// `s_ref - k * c_s_min`. Returns
/// `max(partial_lse, s_ref + log sum_{k > k_cut} b[k] e^{-k c_s_min}) + log 2`.
pub fn lse_truncation_bound(
    partial_lse: f64,
    s_ref: f64,
    b: &[f64],
    c_s_min: f64,
    k_cut: usize,
) -> Result<f64, TailDiverges> {
    assert!(c_s_min > 0.0, "c_s_min must be positive");
    let terms = b
        .iter()
        .enumerate()
        .skip(k_cut + 1)
        .filter(|(_, bk)| **bk > 0.0)
        .map(|(k, bk)| libm::log(*bk) - k as f64 * c_s_min);
    let terms: alloc::vec::Vec<f64> = terms.collect();
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(TailDiverges);
    }
    let tail = s_ref + log_sum_exp(terms.iter().copied());
    if tail == f64::INFINITY || tail.is_nan() {
        return Err(TailDiverges);
    }
    Ok(partial_lse.max(tail) + core::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiConfigError {
    pub per_step: f64,
    pub eta: f64,
}

impl fmt::Display for PhiConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "-1 + alpha*c_s_min = {} exceeds -eta = {}", self.per_step, -self.eta)
    }
}

impl core::error::Error for PhiConfigError {}

/// Potential `Phi(v) = (L - depth) + alpha * C(prefix)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    pub l: u32,
    pub alpha: f64,
    pub eta: f64,
    /// Tolerance in Q32.32 raw units.
    pub eps_fp: Q32_32,
}

pub const DEFAULT_ETA: f64 = 0.5;

impl PhiConfig {
    pub fn new(l: u32, alpha: f64, eta: f64, c_s_min: f64) -> Result<Self, PhiConfigError> {
        let per_step = -1.0 + alpha * c_s_min;
        if !(eta > 0.0 && eta <= 1.0) || !(alpha >= 0.0) || per_step > -eta {
            return Err(PhiConfigError { per_step, eta });
        }
        Ok(PhiConfig { l, alpha, eta, eps_fp: Q32_32(1) })
    }

    /// `L = max_depth`, `eta = 0.5` and `alpha = (1 - eta) / max(max_step, c_s_min)`,
    /// so every step costing at most `max_step` passes the check.
    pub fn for_steps(caps: &crate::digest::PublicCaps, max_step: f64) -> Self {
        let alpha = (1.0 - DEFAULT_ETA) / max_step.max(caps.c_s_min);
        PhiConfig::new(caps.max_depth, alpha, DEFAULT_ETA, caps.c_s_min).expect("default potential is valid")
    }

    /// Default potential for a compiled graph, sized by its costliest step.
    pub fn for_dag(dag: &PrefixDag) -> Self {
        let max_step = dag
            .nodes()
            .filter_map(|(_, n)| n.parent.map(|p| dag[p].prefix_score - n.prefix_score))
            .fold(0.0, f64::max);
        Self::for_steps(&dag.caps, max_step)
    }

    pub fn phi(&self, depth: u32, cost: f64) -> f64 {
        (self.l as f64 - depth as f64) + self.alpha * cost
    }

    pub fn phi_q(&self, depth: u32, cost: f64) -> Result<Q32_32, NumClamp> {
        Q32_32::from_f64(self.phi(depth, cost))
    }

    pub fn eta_q(&self) -> Result<Q32_32, NumClamp> {
        Q32_32::from_f64(self.eta)
    }

    pub fn phi_node(&self, dag: &PrefixDag, ix: NodeIx) -> Result<Q32_32, NumClamp> {
        self.phi_q(dag[ix].depth, -dag[ix].prefix_score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiCheck {
    Ok,
    AcyclicityFail,
}

/// Fails iff `phi_after - phi_before > -eta + eps_fp`, all in Q32.32.
pub fn check_expansion(phi_before: Q32_32, phi_after: Q32_32, eta: Q32_32, eps_fp: Q32_32) -> PhiCheck {
    let delta = phi_after.0 as i128 - phi_before.0 as i128;
    if delta > -(eta.0 as i128) + eps_fp.0 as i128 {
        PhiCheck::AcyclicityFail
    } else {
        PhiCheck::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KappaInvalid {
    pub n_exact: u64,
    pub n_ub: u64,
}

impl fmt::Display for KappaInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "upper count {} is below exact count {}", self.n_ub, self.n_exact)
    }
}

impl core::error::Error for KappaInvalid {}

/// `kappa = log(n / n_ub) <= 0`.
pub fn kappa(n_exact: u64, n_ub: u64) -> Result<f64, KappaInvalid> {
    if n_exact == 0 || n_ub < n_exact {
        return Err(KappaInvalid { n_exact, n_ub });
    }
    Ok(libm::log(n_exact as f64) - libm::log(n_ub as f64))
}

/// `kappa` as a difference of quantized logs, matching the split used for
/// surrogate anchors so that `anchor + kappa_q` is the exact-count anchor.
pub fn kappa_q(n_exact: u64, n_ub: u64) -> Result<Q64_64, KappaInvalid> {
    kappa(n_exact, n_ub)?;
    let a = Q64_64::from_f64(libm::log(n_exact as f64)).expect("log of u64 fits");
    let b = Q64_64::from_f64(libm::log(n_ub as f64)).expect("log of u64 fits");
    Ok(a - b)
}
