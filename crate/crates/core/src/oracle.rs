//! Brute-force references: realized subtree maxima, the realized argmax,
//! and a frontier-coverage replay over a ledger.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::digest::Digest;
use crate::fixed::Q64_64;
use crate::ledger::{EventKind, Ledger, StopReason};
use crate::prefix_dag::{NodeIx, PrefixDag};
use crate::race::{neg_log_q, Race};

/// Realized augmented value of every leaf, quantized the way the engine
/// sums it: `Q(s_det) + Q(-log t)`. Missing for leaves without an arrival.
pub fn leaf_values_q(dag: &PrefixDag, race: &mut Race) -> BTreeMap<NodeIx, Q64_64> {
    let leaves: Vec<NodeIx> = dag.leaves().collect();
    let mut out = BTreeMap::new();
    for l in leaves {
        if let Ok(t) = race.arrival(dag, l) {
            let s = Q64_64::from_f64(dag[l].prefix_score).expect("score fits");
            out.insert(l, s + neg_log_q(t).expect("arrival is positive"));
        }
    }
    out
}

/// Realized subtree maximum per node (`None` where no leaf has a value).
pub fn rsm(dag: &PrefixDag, values: &BTreeMap<NodeIx, Q64_64>) -> Vec<Option<Q64_64>> {
    let mut out = alloc::vec![None; dag.len()];
    for i in (0..dag.len()).rev() {
        let n = &dag[NodeIx(i as u32)];
        out[i] = if n.is_leaf {
            values.get(&NodeIx(i as u32)).copied()
        } else {
            n.children.iter().filter_map(|c| out[c.idx()]).max()
        };
    }
    out
}

/// Realized argmax leaf; ties go to the lower digest.
pub fn brute_force_argmax(dag: &PrefixDag, values: &BTreeMap<NodeIx, Q64_64>) -> Option<(NodeIx, Q64_64)> {
    values
        .iter()
        .map(|(ix, v)| (*ix, *v))
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| dag[b.0].digest.cmp(&dag[a.0].digest)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageViolation {
    pub record: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoverageReport {
    pub pops_checked: usize,
    pub max_frontier: usize,
}

/// Walks a certified-mode ledger. At every pop, each frontier node must
/// satisfy `RSM(v) <= key(v)` and every unevaluated leaf must lie below a
/// frontier node; at a certified stop every unevaluated leaf is at most the
/// incumbent. The race is rebuilt from the header's seed and overrides.
pub fn coverage_replay(dag: &PrefixDag, ledger: &Ledger) -> Result<CoverageReport, CoverageViolation> {
    let cfg = &ledger.header.run;
    let work = crate::search::prepare_dag(dag, cfg);
    let mut race = cfg.race();
    let values = leaf_values_q(&work, &mut race);
    let rsm = rsm(&work, &values);
    let mut frontier: BTreeMap<Digest, Q64_64> = BTreeMap::new();
    let mut evaluated: BTreeSet<NodeIx> = BTreeSet::new();
    let mut report = CoverageReport::default();
    let fail = |record: usize, msg: String| Err(CoverageViolation { record, msg });
    let leaves: Vec<NodeIx> = work.leaves().collect();

    for (i, r) in ledger.records.iter().enumerate() {
        let node = r.ctx_digest.and_then(|d| work.lookup(&d));
        match r.event {
            Some(EventKind::Push) => {
                let (Some(d), Some(k)) = (r.ctx_digest, r.key_raw) else {
                    return fail(i, "push without digest or key".into());
                };
                frontier.insert(d, k);
            }
            Some(EventKind::Pop) => {
                report.pops_checked += 1;
                report.max_frontier = report.max_frontier.max(frontier.len());
                for (d, k) in &frontier {
                    let v = work.lookup(d).unwrap();
                    if let Some(m) = rsm[v.idx()] {
                        if m > *k {
                            return fail(i, format!("RSM {} exceeds key {} at {}", m.to_f64(), k.to_f64(), d));
                        }
                    }
                }
                for &l in &leaves {
                    if evaluated.contains(&l) || !values.contains_key(&l) {
                        continue;
                    }
                    let covered = core::iter::once(l)
                        .chain(work.ancestors(l))
                        .any(|a| frontier.contains_key(&work[a].digest));
                    if !covered {
                        return fail(i, format!("leaf {} is not below any frontier node", work[l].digest));
                    }
                }
                let Some(d) = r.ctx_digest else { return fail(i, "pop without digest".into()) };
                frontier.remove(&d);
            }
            Some(EventKind::LeafEval) => {
                if let Some(l) = node {
                    evaluated.insert(l);
                }
            }
            Some(EventKind::Stop) if r.reason == Some(StopReason::Certified) => {
                let b = r.incumbent.unwrap_or(Q64_64::MIN);
                for (l, v) in &values {
                    if !evaluated.contains(l) && *v > b {
                        return fail(i, format!("unexpanded leaf {} has value {} above B*", work[*l].digest, v.to_f64()));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::PublicCaps;
    use crate::ledger::Mode;
    use crate::prefix_dag::{compile, SharedDag, SharedEdge, SharedNode};
    use crate::search::{run, RunConfig};
    use alloc::string::ToString;
    use alloc::vec;

    fn tree() -> PrefixDag {
        let mut nodes = vec![SharedNode { id: "r".into(), state: "r".into(), leaf: false, delta_cost: 0.0, mtau: None }];
        let mut edges = Vec::new();
        for (i, leafs) in [3, 1, 2].iter().enumerate() {
            let u = alloc::format!("u{i}");
            nodes.push(SharedNode { id: u.clone(), state: u.clone(), leaf: false, delta_cost: 0.2 * i as f64, mtau: None });
            edges.push(SharedEdge { from: "r".into(), to: u.clone(), order: i as u64 });
            for j in 0..*leafs {
                let p = alloc::format!("{u}p{j}");
                nodes.push(SharedNode { id: p.clone(), state: p.to_string(), leaf: true, delta_cost: 0.3 * j as f64, mtau: None });
                edges.push(SharedEdge { from: u.clone(), to: p, order: j });
            }
        }
        let g = SharedDag { root: "r".into(), caps: PublicCaps { max_depth: 2, c_s_max: 1.0, c_s_min: 0.1 }, nodes, edges };
        compile(&g).unwrap().0
    }

    #[test]
    fn rsm_of_root_is_the_argmax_value() {
        let dag = tree();
        let mut race = Race::new(4);
        let vals = leaf_values_q(&dag, &mut race);
        assert_eq!(vals.len(), 6);
        let r = rsm(&dag, &vals);
        assert_eq!(r[0], Some(brute_force_argmax(&dag, &vals).unwrap().1));
    }

    #[test]
    fn coverage_holds_for_certified_modes() {
        let dag = tree();
        for seed in 0..30 {
            for mode in [Mode::Exact, Mode::Surrogate] {
                let mut cfg = RunConfig::for_dag(&dag, mode, seed);
                cfg.n_ub_factor = 1.7;
                let res = run(&dag, &cfg).unwrap();
                let rep = coverage_replay(&dag, &res.ledger).unwrap();
                assert!(rep.pops_checked as u64 >= res.expansions);
            }
        }
    }

    #[test]
    fn coverage_catches_a_lowered_key() {
        let dag = tree();
        let cfg = RunConfig::for_dag(&dag, Mode::Exact, 1);
        let mut ledger = run(&dag, &cfg).unwrap().ledger;
        let i = ledger.records.iter().position(|r| r.event == Some(EventKind::Push)).unwrap();
        ledger.records[i].key_raw = Some(Q64_64::from_f64(-100.0).unwrap());
        assert!(coverage_replay(&dag, &ledger).is_err());
    }
}
