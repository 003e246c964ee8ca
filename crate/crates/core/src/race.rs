//! Randomness of a run: open-interval uniforms, exponential arrivals, winner
//! selection, offset propagation, surrogate arrivals and leaf couplings.
//!
//! `Race` realizes the full exact race of a compiled graph lazily from a
//! seed. The Exact engine reads exactly the same draws, so anything it
//! reports can be checked against the realized race node by node.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::{prf_raw, Digest, PrfKey};
use crate::fixed::{NumClamp, Q0_64, Q64_64};
use crate::prefix_dag::{NodeIx, PrefixDag};

const TWO_NEG_65: f64 = 2.710505431213761e-20;
#[cfg(test)]
const LN_2: f64 = core::f64::consts::LN_2;

pub type Uniform64 = Q0_64;

/// `U = (x + 0.5) * 2^-64`, rounded to nearest binary64.
pub fn open_uniform(x: u64) -> f64 {
    // 2x + 1 is exact in u128, so the conversion is the only rounding
    ((2 * x as u128 + 1) as f64) * TWO_NEG_65
}

impl Q0_64 {
    pub fn value(self) -> f64 {
        open_uniform(self.0)
    }

    /// Nearest raw value for a real in (0, 1).
    pub fn from_value(u: f64) -> Q0_64 {
        assert!(u > 0.0 && u < 1.0, "uniform must lie in (0,1)");
        let r = libm::floor(u * 18_446_744_073_709_551_616.0);
        if r >= 18_446_744_073_709_551_615.0 {
            Q0_64(u64::MAX)
        } else {
            Q0_64(r as u64)
        }
    }
}

/// `E = -log(1 - U)` for the raw uniform `x`, i.e. a standard exponential.
///
/// Below one half the compensated `log1p` is accurate; above it the
/// complement `1 - U = (y + 0.5) * 2^-64` with `y = 2^64 - 1 - x` is formed
/// with a single rounding, so the tail keeps full precision instead of
/// collapsing at `U == 1`.
pub fn std_exp(x: Uniform64) -> f64 {
    if x.0 < 1 << 63 {
        -libm::log1p(-x.value())
    } else {
        -libm::log(open_uniform(u64::MAX - x.0))
    }
}

/// Smallest and largest standard exponentials a 64-bit uniform can produce.
pub fn std_exp_range() -> (f64, f64) {
    (std_exp(Q0_64(0)), std_exp(Q0_64(u64::MAX)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateZero;

impl fmt::Display for RateZero {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("exponential rate is zero")
    }
}

impl core::error::Error for RateZero {}

/// `t = -log1p(-U) / rate`.
pub fn exp_from_uniform(u: f64, rate: u64) -> Result<f64, RateZero> {
    if rate == 0 {
        return Err(RateZero);
    }
    Ok(-libm::log1p(-u) / rate as f64)
}

/// Same as `exp_from_uniform` on a raw uniform, with the tail-exact transform.
pub fn exp_from_raw(x: Uniform64, rate: u64) -> Result<f64, RateZero> {
    if rate == 0 {
        return Err(RateZero);
    }
    Ok(std_exp(x) / rate as f64)
}

/// Winner of a categorical draw with cells `[c_{i-1}, c_i) / total`.
///
/// `w = m * 2^-k` exactly; the comparison `c_i / T > w` is done as
/// `c_i > floor(m * T / 2^k)` in integers.
fn quantile_cat_exact(m: u128, k: u32, weights: &[u64]) -> usize {
    assert!(!weights.is_empty(), "quantile_cat needs at least one weight");
    let total: u128 = weights.iter().map(|w| *w as u128).sum();
    assert!(weights.iter().all(|w| *w > 0), "weights must be positive");
    let q = match m.checked_mul(total) {
        Some(p) if k < 128 => p >> k,
        Some(_) => 0,
        // only reachable for f64 inputs with huge mantissa * total products
        None => {
            let hi = (m >> 64) * total;
            let lo = (m & u64::MAX as u128) * total;
            let shift = k.saturating_sub(64);
            if shift >= 128 {
                0
            } else {
                (hi + (lo >> 64)) >> shift
            }
        }
    };
    let mut c = 0u128;
    for (i, w) in weights.iter().enumerate() {
        c += *w as u128;
        if c > q {
            return i;
        }
    }
    weights.len() - 1
}

/// Categorical winner for a raw uniform: `W = (2x + 1) * 2^-65`.
pub fn quantile_cat(w: Uniform64, weights: &[u64]) -> usize {
    quantile_cat_exact(2 * w.0 as u128 + 1, 65, weights)
}

/// Categorical winner for a binary64 `W` in (0, 1).
pub fn quantile_cat_f64(w: f64, weights: &[u64]) -> usize {
    assert!(w > 0.0 && w < 1.0, "W must lie in (0,1)");
    let bits = w.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1 << 52) - 1);
    let (m, k) = if exp == 0 { (frac, 1074) } else { (frac | 1 << 52, (1075 - exp) as u32) };
    quantile_cat_exact(m as u128, k, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrivalSource {
    ExactRace,
    SurrogateRace,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub t: f64,
    pub source: ArrivalSource,
    pub gen_uniform: Option<Uniform64>,
}

impl Arrival {
    pub fn neg_log_t(&self) -> f64 {
        -libm::log(self.t)
    }
}

/// Child arrivals after a parent's first arrival: the winner reuses the
/// parent's time and every other child adds an independent residual drawn at
/// its own count. `residuals` holds one uniform per non-winner in order.
pub fn offset_propagate(
    t_parent: f64,
    winner: usize,
    counts: &[u64],
    residuals: &[Uniform64],
) -> Result<Vec<Arrival>, RateZero> {
    assert_eq!(residuals.len() + 1, counts.len(), "one residual per non-winner child");
    let mut res = residuals.iter();
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if i == winner {
                Ok(Arrival { t: t_parent, source: ArrivalSource::ExactRace, gen_uniform: None })
            } else {
                let u = *res.next().unwrap();
                Ok(Arrival { t: t_parent + exp_from_raw(u, n)?, source: ArrivalSource::Residual, gen_uniform: Some(u) })
            }
        })
        .collect()
}

/// Node is empty under its upper-bound count and must be pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneEmpty;

pub fn surrogate_arrival(u: Uniform64, n_ub: u64) -> Result<Arrival, PruneEmpty> {
    let t = exp_from_raw(u, n_ub).map_err(|_| PruneEmpty)?;
    Ok(Arrival { t, source: ArrivalSource::SurrogateRace, gen_uniform: Some(u) })
}

/// Gumbel(0, 1) from a uniform: `G = -log(-log U)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -libm::log(-libm::log(u))
}

/// Gumbel from a raw uniform; `-log U` is taken from the complement side
/// when `U` is close to one.
pub fn gumbel_raw(x: Uniform64) -> f64 {
    let neg_log_u = if x.0 >= 1 << 63 {
        // -log U = -log1p(-(1-U)), 1-U exact
        let y = u64::MAX - x.0;
        -libm::log1p(-open_uniform(y))
    } else {
        -libm::log(x.value())
    };
    -libm::log(neg_log_u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafCoupling {
    pub u: f64,
    pub e: f64,
    pub g: f64,
}

/// Exact-mode leaf instantiation from the realized race: no new randomness.
pub fn exact_leaf_coupling(t_leaf: f64) -> LeafCoupling {
    let u = -libm::expm1(-t_leaf);
    LeafCoupling { u, e: t_leaf, g: gumbel_from_uniform(u) }
}

/// `-log t` for an exact arrival, in Q64.64.
pub fn neg_log_q(t: f64) -> Result<Q64_64, NumClamp> {
    Q64_64::from_f64(-libm::log(t))
}

/// Surrogate anchor `-log t_hat = log N_ub - log E(x)` as a sum of two
/// separately quantized terms.
pub fn surrogate_anchor(x: Uniform64, n_ub: u64) -> Result<Q64_64, NumClamp> {
    if n_ub == 0 {
        return Err(NumClamp);
    }
    let a = Q64_64::from_f64(libm::log(n_ub as f64))?;
    let b = Q64_64::from_f64(libm::log(std_exp(x)))?;
    a.checked_add(-b).ok_or(NumClamp)
}

/// Largest raw uniform whose surrogate anchor at rate `n_ub` is at least
/// `target` (the exact `-log t(v)`). This is the quantile coupling of the
/// realized `t(v) ~ Exp(n)` into the surrogate draw, so the surrogate key
/// dominates the exact key on every path. The search starts at the
/// quantile of `t(v)` and backs off in doubling steps.
pub fn couple_surrogate(t: f64, n: u64, n_ub: u64, target: Q64_64) -> Result<Uniform64, NumClamp> {
    let ok = |x: u64| surrogate_anchor(Q0_64(x), n_ub).map(|a| a >= target);
    let start = quantile_raw(n as f64 * t);
    let mut x = start;
    if !ok(x)? {
        let mut step = 1u64;
        loop {
            if x == 0 {
                return Err(NumClamp);
            }
            let next = x.saturating_sub(step);
            if ok(next)? {
                // largest passing value in (next, x)
                let (mut lo, mut hi) = (next, x);
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if ok(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Ok(Q0_64(lo));
            }
            x = next;
            step = step.saturating_mul(2);
        }
    }
    // walk up while still passing, to keep the coupling tight
    let mut step = 1u64;
    loop {
        let Some(next) = x.checked_add(step) else {
            if step == 1 {
                return Ok(Q0_64(x));
            }
            step = 1;
            continue;
        };
        if ok(next)? {
            x = next;
            step = step.saturating_mul(2);
        } else if step == 1 {
            return Ok(Q0_64(x));
        } else {
            step = 1;
        }
    }
}

/// Shared-quantile coupling of a realized `t(v) ~ Exp(n)` into the surrogate
/// draw at rate `n_ub`: the raw uniform with `E(x) = n * t`, so that
/// `t_hat = t * n / n_ub`. Clamped to the domination boundary of
/// [`couple_surrogate`], which only matters when `n_ub == n` and rounding
/// would otherwise put the anchor one ulp below `-log t`.
pub fn couple_same_u(t: f64, n: u64, n_ub: u64) -> Result<Uniform64, NumClamp> {
    let target = neg_log_q(t)?;
    let x = quantile_raw(n as f64 * t);
    if surrogate_anchor(Q0_64(x), n_ub)? >= target {
        return Ok(Q0_64(x));
    }
    let bound = couple_surrogate(t, n, n_ub, target)?;
    Ok(Q0_64(x.min(bound.0)))
}

/// Smallest raw uniform with `E(x) >= t`.
pub fn couple_leaf(t: f64) -> Result<Uniform64, NumClamp> {
    let ok = |x: u64| std_exp(Q0_64(x)) >= t;
    if ok(0) {
        return Ok(Q0_64(0));
    }
    if !ok(u64::MAX) {
        return Err(NumClamp);
    }
    let start = quantile_raw(t);
    // invariant: !ok(lo), ok(hi)
    let (mut lo, mut hi);
    if ok(start) {
        hi = start;
        let mut step = 1u64;
        loop {
            let next = hi.saturating_sub(step);
            if next == 0 || !ok(next) {
                lo = next;
                break;
            }
            hi = next;
            step = step.saturating_mul(2);
        }
    } else {
        lo = start;
        let mut step = 1u64;
        loop {
            let next = lo.saturating_add(step);
            if ok(next) {
                hi = next;
                break;
            }
            lo = next;
            step = step.saturating_mul(2);
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Q0_64(hi))
}

/// Raw uniform closest to the quantile `U = 1 - exp(-s)` of a standard
/// exponential value `s`.
fn quantile_raw(s: f64) -> u64 {
    const TWO_64: f64 = 18_446_744_073_709_551_616.0;
    if !(s > 0.0) {
        return 0;
    }
    let tail = libm::exp(-s);
    if tail < 0.5 {
        // y + 0.5 = tail * 2^64
        let y = libm::floor(tail * TWO_64);
        let y = if y >= TWO_64 { u64::MAX } else { y as u64 };
        u64::MAX - y
    } else {
        let u = -libm::expm1(-s);
        let r = libm::floor(u * TWO_64);
        if r >= TWO_64 {
            u64::MAX
        } else {
            r as u64
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Counter-based SplitMix64 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> u64 {
        mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    pub fn next_uniform(&mut self) -> Uniform64 {
        Q0_64(self.next_u64())
    }
}

/// What a draw is used for. Part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    /// First arrival of the root.
    Root,
    /// Winner selection at an expanded node.
    Winner,
    /// Residual arrival of a non-winner child.
    Residual,
    /// Surrogate arrival of an expanded node (uncoupled stream draw).
    Surrogate,
    /// Surrogate-mode leaf uniform (stream draw).
    Leaf,
    /// Per-leaf PRF uniform.
    Prf,
    /// Leaf uniform coupled to the realized race.
    Coupled,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Root => 1,
            Purpose::Winner => 2,
            Purpose::Residual => 3,
            Purpose::Surrogate => 4,
            Purpose::Leaf => 5,
            Purpose::Prf => 6,
            Purpose::Coupled => 7,
        }
    }
}

/// Draw addressed by `(seed, ctx_digest, purpose)`.
pub fn stream_uniform(seed: u64, ctx: &Digest, purpose: Purpose) -> Uniform64 {
    let mut z = seed;
    for chunk in ctx.0.chunks(8) {
        z = mix64(z ^ u64::from_be_bytes(chunk.try_into().unwrap()));
    }
    Q0_64(RngStream::at(z, purpose.tag()))
}

/// PRF-derived per-leaf uniform.
pub fn prf_uniform(key: &PrfKey, leaf_id: &Digest) -> Uniform64 {
    prf_raw(key, leaf_id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaceError {
    /// Node has no exact count, so its arrival is not defined by the race.
    MissingCount(NodeIx),
    /// Node has no leaves below it.
    Empty(NodeIx),
}

/// Seeded uniforms plus scripted overrides, and the realized exact race
/// they define. Arrivals are computed on demand and memoized.
#[derive(Debug, Clone)]
pub struct Race {
    pub seed: u64,
    overrides: BTreeMap<(Digest, Purpose), Uniform64>,
    arrivals: BTreeMap<NodeIx, f64>,
    winners: BTreeMap<NodeIx, usize>,
}

impl Race {
    pub fn new(seed: u64) -> Self {
        Race { seed, overrides: BTreeMap::new(), arrivals: BTreeMap::new(), winners: BTreeMap::new() }
    }

    pub fn with_overrides(seed: u64, overrides: impl IntoIterator<Item = (Digest, Purpose, Uniform64)>) -> Self {
        let mut r = Race::new(seed);
        for (d, p, u) in overrides {
            r.overrides.insert((d, p), u);
        }
        r
    }

    pub fn overrides(&self) -> impl Iterator<Item = (Digest, Purpose, Uniform64)> + '_ {
        self.overrides.iter().map(|((d, p), u)| (*d, *p, *u))
    }

    pub fn uniform(&self, ctx: &Digest, purpose: Purpose) -> Uniform64 {
        self.overrides.get(&(*ctx, purpose)).copied().unwrap_or_else(|| stream_uniform(self.seed, ctx, purpose))
    }

    /// Children of `v` with a non-zero exact count, with those counts.
    fn weighted_children(dag: &PrefixDag, v: NodeIx) -> Result<(Vec<NodeIx>, Vec<u64>), RaceError> {
        let mut kids = Vec::new();
        let mut counts = Vec::new();
        for &c in &dag[v].children {
            let n = dag[c].n_exact.ok_or(RaceError::MissingCount(c))?;
            if n > 0 {
                kids.push(c);
                counts.push(n);
            }
        }
        Ok((kids, counts))
    }

    /// Index (into the non-empty children) of the child holding the first
    /// arrival below `v`.
    pub fn winner(&mut self, dag: &PrefixDag, v: NodeIx) -> Result<usize, RaceError> {
        if let Some(w) = self.winners.get(&v) {
            return Ok(*w);
        }
        let (_, counts) = Self::weighted_children(dag, v)?;
        if counts.is_empty() {
            return Err(RaceError::Empty(v));
        }
        let w = quantile_cat(self.uniform(&dag[v].digest, Purpose::Winner), &counts);
        self.winners.insert(v, w);
        Ok(w)
    }

    /// Realized first arrival `t(v)` below `v`.
    pub fn arrival(&mut self, dag: &PrefixDag, v: NodeIx) -> Result<f64, RaceError> {
        if let Some(t) = self.arrivals.get(&v) {
            return Ok(*t);
        }
        let mut path: Vec<NodeIx> = dag.ancestors(v).collect();
        path.reverse();
        path.push(v);
        let mut t = None;
        for (i, &u) in path.iter().enumerate() {
            if let Some(known) = self.arrivals.get(&u) {
                t = Some(*known);
                continue;
            }
            let n = dag[u].n_exact.ok_or(RaceError::MissingCount(u))?;
            if n == 0 {
                return Err(RaceError::Empty(u));
            }
            let tu = match i {
                0 => exp_from_raw(self.uniform(&dag[u].digest, Purpose::Root), n).unwrap(),
                _ => {
                    let p = path[i - 1];
                    let tp = t.unwrap();
                    let (kids, _) = Self::weighted_children(dag, p)?;
                    let w = self.winner(dag, p)?;
                    if kids[w] == u {
                        tp
                    } else {
                        tp + exp_from_raw(self.uniform(&dag[u].digest, Purpose::Residual), n).unwrap()
                    }
                }
            };
            self.arrivals.insert(u, tu);
            t = Some(tu);
        }
        Ok(t.unwrap())
    }

    /// Realized augmented value `s_det(P) - log E_P` of every leaf, in
    /// leaf order. Leaves under nodes without exact counts are skipped.
    pub fn leaf_values(&mut self, dag: &PrefixDag) -> Vec<(NodeIx, f64)> {
        let leaves: Vec<NodeIx> = dag.leaves().collect();
        leaves
            .into_iter()
            .filter_map(|l| self.arrival(dag, l).ok().map(|t| (l, dag[l].prefix_score - libm::log(t))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn open_uniform_endpoints() {
        assert_eq!(open_uniform(0), 2f64.powi(-65));
        assert!(close(open_uniform(0), 2.7105e-20, 1e-24));
        // 1 - 2^-65 and 0.5 + 2^-65 are not binary64 values; the nearest ones
        // are 1.0 and 0.5, and the exact complement is what the transforms use
        assert_eq!(open_uniform(u64::MAX), 1.0);
        assert_eq!(open_uniform(1 << 63), 0.5);
        assert_eq!(open_uniform(u64::MAX - u64::MAX), 2f64.powi(-65));
        assert!(std_exp(Q0_64(u64::MAX)).is_finite());
        assert!(std_exp(Q0_64(1 << 63)) >= std_exp(Q0_64((1 << 63) - 1)));
        assert!(std_exp(Q0_64((1 << 63) + 4096)) > std_exp(Q0_64((1 << 63) - 4096)));
        assert_eq!(Q0_64::from_value(0.5), Q0_64(1 << 63));
    }

    #[test]
    fn exponential_examples() {
        let t = exp_from_uniform(0.5, 2).unwrap();
        assert!(close(t, 0.34657, 1e-5));
        // -log(log(2)/2) = 1.059660...
        assert!(close(-t.ln(), 1.059660, 1e-6));
        assert!(close(exp_from_uniform(0.20, 4).unwrap(), 0.055786, 1e-6));
        let u = 1.0 - (-1.0f64).exp();
        assert!(close(exp_from_uniform(u, 1).unwrap(), 1.0, 1e-15));
        assert_eq!(exp_from_uniform(0.5, 0), Err(RateZero));
    }

    #[test]
    fn tail_transform_is_finite_and_monotone() {
        let top = std_exp(Q0_64(u64::MAX));
        assert!(top.is_finite());
        assert!(close(top, 64.0 * LN_2 + LN_2, 1e-12));
        assert!(std_exp(Q0_64(u64::MAX - 1)) < top);
        assert!(std_exp(Q0_64((1 << 63) - 1)) <= std_exp(Q0_64(1 << 63)));
        assert!(std_exp(Q0_64(0)) > 0.0);
    }

    #[test]
    fn quantile_cat_examples() {
        assert_eq!(quantile_cat_f64(0.70, &[3, 1]), 0);
        assert_eq!(quantile_cat_f64(0.75, &[3, 1]), 1);
        assert_eq!(quantile_cat_f64(0.7499999999999999, &[3, 1]), 0);
        for w in [1e-300, 0.3, 0.999] {
            assert_eq!(quantile_cat_f64(w, &[7]), 0);
        }
        // raw uniform: (2x+1)/2^65 never lands on a cell boundary of 3/4
        let x = Q0_64(3 << 62);
        assert_eq!(quantile_cat(x, &[3, 1]), 1);
        assert_eq!(quantile_cat(Q0_64((3 << 62) - 1), &[3, 1]), 0);
        assert_eq!(quantile_cat(Q0_64(u64::MAX), &[1, 1, 1]), 2);
        assert_eq!(quantile_cat(Q0_64(0), &[1, 1, 1]), 0);
    }

    #[test]
    fn toy_offset_propagation() {
        let t_r = exp_from_uniform(0.20, 4).unwrap();
        let res = Q0_64::from_value(0.37);
        let arr = offset_propagate(t_r, 0, &[3, 1], &[res]).unwrap();
        assert_eq!(arr[0].t, t_r);
        assert!(close(arr[1].t, 0.517821, 1e-6));
        assert_eq!(arr[1].gen_uniform, Some(res));
        let single = offset_propagate(t_r, 0, &[5], &[]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].t, t_r);
    }

    #[test]
    fn surrogate_examples() {
        let u = Q0_64::from_value(0.20);
        let a = surrogate_arrival(u, 6).unwrap();
        assert!(close(a.t, 0.03719, 1e-5));
        assert!(close(a.neg_log_t(), 3.29, 5e-3));
        assert_eq!(surrogate_arrival(u, 4).unwrap().t, exp_from_raw(u, 4).unwrap());
        assert_eq!(surrogate_arrival(u, 0), Err(PruneEmpty));
    }

    #[test]
    fn leaf_coupling_examples() {
        let c = exact_leaf_coupling(0.055786);
        assert!(close(c.u, 0.054259, 1e-6));
        let c = exact_leaf_coupling(LN_2);
        assert!(close(c.u, 0.5, 1e-15));
        assert!(close(c.g, 0.36651, 1e-5));
        // binary64 U resolves 1 - U only to 2^-53, so the round trip is
        // ulp-scale while 1 - U is not tiny
        for t in [1e-6, 0.055786, 0.7, 3.0] {
            let c = exact_leaf_coupling(t);
            let back = exp_from_uniform(c.u, 1).unwrap();
            assert!(close(back, t, 4.0 * f64::EPSILON * t.max(1.0) / (-t).exp()), "{t} -> {back}");
        }
    }

    #[test]
    fn gumbel_examples() {
        assert!(close(gumbel_from_uniform((-1.0f64).exp()), 0.0, 1e-15));
        assert!(close(gumbel_from_uniform(0.5), 0.36651, 1e-5));
        assert!(close(gumbel_raw(Q0_64::from_value(0.5)), 0.36651, 1e-5));
        let key = PrfKey::new(b"gumbel-moment", "test");
        let caps = crate::digest::PublicCaps { max_depth: 1, c_s_max: 1.0, c_s_min: 1.0 };
        let n = 100_000u64;
        let mean: f64 = (0..n)
            .map(|i| gumbel_raw(prf_uniform(&key, &crate::digest::ctx_digest(&[("leaf", i)], &caps))))
            .sum::<f64>()
            / n as f64;
        assert!(close(mean, 0.5772, 0.01), "{mean}");
    }

    #[test]
    fn child_minimum_is_exponential_at_parent_count() {
        // min over offset-propagated children, with the parent's own
        // arrival integrated out, is Exp(4)
        let mut rng = RngStream::new(7);
        let trials = 100_000;
        let mut mins: Vec<f64> = (0..trials)
            .map(|_| {
                let t = exp_from_raw(rng.next_uniform(), 4).unwrap();
                let w = quantile_cat(rng.next_uniform(), &[3, 1]);
                let arr = offset_propagate(t, w, &[3, 1], &[rng.next_uniform()]).unwrap();
                arr.iter().map(|a| a.t).fold(f64::INFINITY, f64::min)
            })
            .collect();
        mins.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = trials as f64;
        let d = mins
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-4.0 * x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // KS critical value at p = 0.01
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn winner_frequencies_follow_counts() {
        let mut rng = RngStream::new(11);
        let counts = [3u64, 1, 4, 2];
        let trials = 100_000;
        let mut hits = [0u64; 4];
        for _ in 0..trials {
            hits[quantile_cat(rng.next_uniform(), &counts)] += 1;
        }
        let chi2: f64 = hits
            .iter()
            .zip(counts)
            .map(|(&h, c)| {
                let e = trials as f64 * c as f64 / 10.0;
                (h as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square with 3 degrees of freedom at p = 0.01
        assert!(chi2 < 11.345, "{chi2}");
    }

    #[test]
    fn stream_addresses_are_independent() {
        let d = Digest([1; 32]);
        let e = Digest([2; 32]);
        assert_eq!(stream_uniform(1, &d, Purpose::Root), stream_uniform(1, &d, Purpose::Root));
        assert_ne!(stream_uniform(1, &d, Purpose::Root), stream_uniform(2, &d, Purpose::Root));
        assert_ne!(stream_uniform(1, &d, Purpose::Root), stream_uniform(1, &e, Purpose::Root));
        assert_ne!(stream_uniform(1, &d, Purpose::Root), stream_uniform(1, &d, Purpose::Winner));
        let mut s = RngStream::new(3);
        let a = s.next_u64();
        assert_eq!(RngStream::at(3, 0), a);
        assert_eq!(s.counter, 1);
    }

    #[test]
    fn surrogate_coupling_dominates_and_is_tight() {
        let mut rng = RngStream::new(5);
        for _ in 0..2000 {
            let n = 1 + rng.next_u64() % 50;
            let n_ub = n + rng.next_u64() % 60;
            let t = exp_from_raw(rng.next_uniform(), n).unwrap() + if rng.next_u64() % 3 == 0 { 0.5 } else { 0.0 };
            let target = neg_log_q(t).unwrap();
            let x = couple_surrogate(t, n, n_ub, target).unwrap();
            assert!(surrogate_anchor(x, n_ub).unwrap() >= target);
            if x.0 < u64::MAX {
                assert!(surrogate_anchor(Q0_64(x.0 + 1), n_ub).unwrap() < target);
            }
        }
    }

    #[test]
    fn same_u_coupling_scales_the_arrival() {
        let mut rng = RngStream::new(11);
        for _ in 0..2000 {
            let n = 1 + rng.next_u64() % 50;
            let n_ub = n + rng.next_u64() % 60;
            let t = exp_from_raw(rng.next_uniform(), n).unwrap();
            let x = couple_same_u(t, n, n_ub).unwrap();
            assert!(surrogate_anchor(x, n_ub).unwrap() >= neg_log_q(t).unwrap());
            let t_hat = exp_from_raw(x, n_ub).unwrap();
            assert!(close(t_hat, t * n as f64 / n_ub as f64, 1e-12 * (1.0 + t)));
        }
        // toy root: U = 0.20, N = 4, N_ub = 6
        let t = exp_from_uniform(0.20, 4).unwrap();
        let x = couple_same_u(t, 4, 6).unwrap();
        assert!(close(exp_from_raw(x, 6).unwrap(), 0.037191, 1e-6));
    }

    #[test]
    fn leaf_coupling_is_smallest_dominating_uniform() {
        let mut rng = RngStream::new(9);
        for _ in 0..2000 {
            let t = std_exp(rng.next_uniform()) * (1 + rng.next_u64() % 3) as f64;
            let x = couple_leaf(t).unwrap();
            assert!(std_exp(x) >= t);
            if x.0 > 0 {
                assert!(std_exp(Q0_64(x.0 - 1)) < t);
            }
        }
        assert_eq!(couple_leaf(1e6), Err(NumClamp));
    }

    proptest! {
        #[test]
        fn upper_counts_shorten_arrivals(x in any::<u64>(), n in 1u64..1000, extra in 0u64..1000) {
            let u = Q0_64(x);
            let t = exp_from_raw(u, n).unwrap();
            let t_hat = surrogate_arrival(u, n + extra).unwrap().t;
            prop_assert!(t_hat <= t);
            prop_assert!(-t_hat.ln() >= -t.ln());
        }

        #[test]
        fn std_exp_is_monotone(x in 0u64..u64::MAX) {
            prop_assert!(std_exp(Q0_64(x)) <= std_exp(Q0_64(x + 1)));
        }
    }
}
