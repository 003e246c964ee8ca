//! Experiment drivers behind the CLI: suites, tightness, N_ub sweeps and
//! the searches that pin adversarial fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use racecert_core::baselines::{beam_k, dist_level, greedy_by_bound, oracle_a, BaselineResult};
use racecert_core::digest::{hex_encode, PrfKey};
use racecert_core::fixed::Q64_64;
use racecert_core::ledger::{ClaimType, Mode, StopReason};
use racecert_core::oracle::{brute_force_argmax, leaf_values_q, rsm};
use racecert_core::prefix_dag::{PrefixDag, SharedDag};
use racecert_core::search::{prepare_dag, run_with, RunConfig, RunOptions, RunResult, DEFAULT_PRF_DOMAIN};
use racecert_core::validator::validate;

use crate::fixtures::{self, compiled};
use crate::io::{self, all_counts, graph_digest, IoError};
use crate::stats::summarize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    A,
    B,
    Adversarial,
    Toy,
    Pipeline,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::A => "A",
            Suite::B => "B",
            Suite::Adversarial => "adversarial",
            Suite::Toy => "toy",
            Suite::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Run(Mode),
    Greedy,
    DistLevel,
    Beam(usize),
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Run(Mode::Exact) => "exact".into(),
            Method::Run(Mode::Surrogate) => "surrogate".into(),
            Method::Run(Mode::Fallback) => "fallback".into(),
            Method::Greedy => "greedy".into(),
            Method::DistLevel => "dist_level".into(),
            Method::Beam(k) => format!("beam{k}"),
        }
    }

    pub fn all_modes() -> Vec<Method> {
        vec![Method::Run(Mode::Exact), Method::Run(Mode::Surrogate), Method::Run(Mode::Fallback)]
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub n_ub_factor: f64,
    pub tau: f64,
    pub salt: Option<Vec<u8>>,
    pub max_expansions: Option<u64>,
    pub deadline: Option<Duration>,
    pub budget: Option<racecert_core::budget::BudgetConfig>,
    /// Seeded node ids instead of the wall clock.
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    /// Runs this graph instead of the suite's generator.
    pub graph: Option<SharedDag>,
}

impl SuiteConfig {
    pub fn new(suite: Suite, seeds: Vec<u64>) -> Self {
        let mut methods = Method::all_modes();
        methods.extend([Method::Greedy, Method::DistLevel, Method::Beam(3)]);
        SuiteConfig {
            suite,
            seeds,
            methods,
            n_ub_factor: 1.5,
            tau: 1.0,
            salt: None,
            max_expansions: None,
            deadline: None,
            budget: None,
            deterministic: true,
            out: None,
            graph: None,
        }
    }
}

/// One graph to run, with the race seed it runs under.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub seed: u64,
    pub graph: SharedDag,
    pub base: Option<RunConfig>,
}

pub fn instances(cfg: &SuiteConfig) -> Vec<Instance> {
    let mut out = Vec::new();
    let plain = |name: String, seed: u64, graph: SharedDag| Instance { name, seed, graph, base: None };
    for &seed in &cfg.seeds {
        if let Some(g) = &cfg.graph {
            out.push(plain("custom".into(), seed, g.clone()));
            continue;
        }
        match cfg.suite {
            Suite::A => {
                for d in [3, 4, 5] {
                    out.push(plain(format!("D{d}"), seed, fixtures::balanced(d, 3, seed)));
                }
            }
            Suite::B => {
                for l in [3, 4] {
                    out.push(plain(format!("L{l}"), seed, fixtures::layered(l, 3, seed)));
                }
            }
            Suite::Pipeline => {
                for q in 0..20 {
                    out.push(plain(format!("q{q:02}"), seed, fixtures::pipeline(q)));
                }
            }
            Suite::Adversarial => out.push(plain("adversarial".into(), seed, fixtures::adversarial_graph())),
            Suite::Toy => {
                let g = fixtures::toy_graph();
                let dag = compiled(&g);
                let base = fixtures::toy_config(&dag, Mode::Exact);
                out.push(Instance { name: "toy".into(), seed: 0, graph: g, base: Some(base) });
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunRow {
    pub suite: String,
    pub instance: String,
    pub seed: u64,
    pub method: String,
    pub expansions: u64,
    pub wall_ms: f64,
    pub stop_slack: f64,
    pub pruned_winner: bool,
    pub found_value: f64,
    pub claim_type: String,
    pub stop_reason: String,
    pub replay_ok: Option<bool>,
    pub validate_ms: Option<f64>,
    pub ledger: String,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn run_config(dag: &PrefixDag, inst: &Instance, mode: Mode, cfg: &SuiteConfig) -> RunConfig {
    let mut rc = match &inst.base {
        Some(b) => {
            let mut b = b.clone();
            b.mode = mode;
            b
        }
        None => {
            let mut rc = RunConfig::for_dag(dag, mode, inst.seed);
            rc.n_ub_factor = cfg.n_ub_factor;
            rc
        }
    };
    rc.tau = cfg.tau;
    if let Some(salt) = &cfg.salt {
        rc.prf = PrfKey::new(salt, DEFAULT_PRF_DOMAIN);
    }
    if let Some(m) = cfg.max_expansions {
        rc.max_expansions = m;
    }
    rc.budget = cfg.budget.clone();
    rc
}

/// Realized argmax leaf of the race the run used.
pub fn realized_winner(dag: &PrefixDag, rc: &RunConfig) -> Option<racecert_core::prefix_dag::NodeIx> {
    let work = prepare_dag(dag, rc);
    let mut race = rc.race();
    brute_force_argmax(&work, &leaf_values_q(&work, &mut race)).map(|w| w.0)
}

pub fn execute(dag: &PrefixDag, rc: &RunConfig, cfg: &SuiteConfig) -> (RunResult, f64) {
    let start = Instant::now();
    let deadline = cfg.deadline.map(|d| start + d);
    let check = move || deadline.is_some_and(|d| Instant::now() >= d);
    let opts = RunOptions {
        deadline: if cfg.deadline.is_some() { Some(&check) } else { None },
        uuid_clock: if cfg.deterministic { None } else { Some(now_ms) },
    };
    let res = run_with(dag, rc, opts).expect("suite configurations are valid");
    (res, start.elapsed().as_secs_f64() * 1e3)
}

fn claim_name(c: ClaimType) -> String {
    format!("{c:?}")
}

fn reason_name(r: StopReason) -> String {
    format!("{r:?}")
}

fn baseline_row(inst: &Instance, cfg: &SuiteConfig, method: Method, r: BaselineResult, wall_ms: f64) -> RunRow {
    RunRow {
        suite: cfg.suite.name().into(),
        instance: inst.name.clone(),
        seed: inst.seed,
        method: method.name(),
        expansions: r.expansions,
        wall_ms,
        stop_slack: f64::NAN,
        pruned_winner: r.pruned_winner,
        found_value: r.found_value,
        claim_type: claim_name(ClaimType::NoCert),
        stop_reason: "Heuristic".into(),
        replay_ok: None,
        validate_ms: None,
        ledger: String::new(),
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<RunRow>, IoError> {
    let mut rows = Vec::new();
    for inst in instances(cfg) {
        let dag = compiled(&inst.graph);
        let gdigest = graph_digest(&inst.graph);
        let graph_file = cfg.out.as_ref().map(|o| o.join("graphs").join(format!("{}_{}_{}.json", cfg.suite.name(), inst.name, inst.seed)));
        if let Some(p) = &graph_file {
            io::save_graph(p, &inst.graph)?;
        }
        for &method in &cfg.methods {
            let base = run_config(&dag, &inst, Mode::Exact, cfg);
            let row = match method {
                Method::Run(mode) => {
                    let rc = run_config(&dag, &inst, mode, cfg);
                    let (mut res, wall_ms) = execute(&dag, &rc, cfg);
                    res.ledger.header.graph_sha256 = Some(gdigest);
                    let t = Instant::now();
                    let verdict = validate(&res.ledger, &dag, None);
                    let validate_ms = t.elapsed().as_secs_f64() * 1e3;
                    let winner = realized_winner(&dag, &rc);
                    let ledger = match &cfg.out {
                        Some(o) => {
                            let p = o.join("ledgers").join(format!(
                                "{}_{}_{}_{}.ndjson",
                                cfg.suite.name(),
                                inst.name,
                                inst.seed,
                                method.name()
                            ));
                            io::save_ledger(&p, &res.ledger)?;
                            p.display().to_string()
                        }
                        None => String::new(),
                    };
                    RunRow {
                        suite: cfg.suite.name().into(),
                        instance: inst.name.clone(),
                        seed: inst.seed,
                        method: method.name(),
                        expansions: res.expansions,
                        wall_ms,
                        stop_slack: res.stop_slack,
                        pruned_winner: winner.is_some_and(|w| !res.popped_leaves.contains(&w)),
                        found_value: res.incumbent_value(),
                        claim_type: claim_name(res.claim_type),
                        stop_reason: reason_name(res.stop_reason),
                        replay_ok: Some(verdict.ok()),
                        validate_ms: Some(validate_ms),
                        ledger,
                    }
                }
                Method::Greedy => {
                    let t = Instant::now();
                    let r = greedy_by_bound(&dag, &base);
                    baseline_row(&inst, cfg, method, r, t.elapsed().as_secs_f64() * 1e3)
                }
                Method::DistLevel => {
                    let t = Instant::now();
                    let r = dist_level(&dag, &base);
                    baseline_row(&inst, cfg, method, r, t.elapsed().as_secs_f64() * 1e3)
                }
                Method::Beam(k) => {
                    let t = Instant::now();
                    let r = beam_k(&dag, &base, Some(k));
                    baseline_row(&inst, cfg, method, r, t.elapsed().as_secs_f64() * 1e3)
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AggregateRow {
    pub suite: String,
    pub instance: String,
    pub method: String,
    pub runs: usize,
    pub mean_expansions: f64,
    pub ci95_expansions: f64,
    pub mean_wall_ms: f64,
    pub ci95_wall_ms: f64,
    pub max_stop_slack: f64,
    pub frac_pruned_winner: f64,
    pub replay_ok_all: Option<bool>,
}

/// Per (instance, method) means with 95% CIs, plus an `all` instance
/// pooling every instance of the suite.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.suite.clone(), r.instance.clone(), r.method.clone())).or_default().push(r);
        groups.entry((r.suite.clone(), "all".into(), r.method.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((suite, instance, method), rs)| {
            let exp = summarize(&rs.iter().map(|r| r.expansions as f64).collect::<Vec<_>>());
            let wall = summarize(&rs.iter().map(|r| r.wall_ms).collect::<Vec<_>>());
            let replay: Vec<bool> = rs.iter().filter_map(|r| r.replay_ok).collect();
            AggregateRow {
                suite,
                instance,
                method,
                runs: rs.len(),
                mean_expansions: exp.mean,
                ci95_expansions: exp.ci95,
                mean_wall_ms: wall.mean,
                ci95_wall_ms: wall.ci95,
                max_stop_slack: rs.iter().map(|r| r.stop_slack).fold(f64::NAN, f64::max),
                frac_pruned_winner: rs.iter().filter(|r| r.pruned_winner).count() as f64 / rs.len() as f64,
                replay_ok_all: (!replay.is_empty()).then(|| replay.iter().all(|b| *b)),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar describing how the CSVs were produced.
pub fn csv_metadata(cfg: &SuiteConfig) -> serde_json::Value {
    serde_json::json!({
        "suite": cfg.suite.name(),
        "seeds": cfg.seeds,
        "methods": cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "n_ub_factor": cfg.n_ub_factor,
        "tau": cfg.tau,
        "ci_method": "normal approximation, 1.96 * sample sd / sqrt(n)",
        "beam_scoring": "M_tau of the node (deterministic bound)",
        "stop_slack": "max(0, max frontier key - B*) at termination; NaN for baselines",
        "wall_ms": "per run, excluded from determinism checks",
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TightnessRow {
    pub suite: String,
    pub instance: String,
    pub seed: u64,
    pub mode: String,
    pub node: String,
    pub depth: u32,
    pub key: f64,
    pub rsm: f64,
    /// `Key(v) - B*`; at most zero at a certified stop.
    pub stop_slack: f64,
    /// `Key(v) - RSM(v)`; never negative for a sound key.
    pub key_minus_rsm: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TightnessRun {
    pub suite: String,
    pub instance: String,
    pub seed: u64,
    pub mode: String,
    pub frontier: usize,
    /// Largest `Key(v) - B*` over the frontier at stop; zero when the
    /// frontier is empty.
    pub max_stop_slack: f64,
    pub min_key_minus_rsm: f64,
    pub stop_reason: String,
}

pub fn tightness(cfg: &SuiteConfig) -> (Vec<TightnessRow>, Vec<TightnessRun>) {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for inst in instances(cfg) {
        let dag = compiled(&inst.graph);
        for mode in [Mode::Exact, Mode::Surrogate] {
            if !cfg.methods.contains(&Method::Run(mode)) {
                continue;
            }
            let rc = run_config(&dag, &inst, mode, cfg);
            let (res, _) = execute(&dag, &rc, cfg);
            let work = prepare_dag(&dag, &rc);
            let mut race = rc.race();
            let sub = rsm(&work, &leaf_values_q(&work, &mut race));
            let b = res.incumbent;
            let mut min_gap = f64::INFINITY;
            for (ix, key) in &res.frontier_at_stop {
                let r = sub[ix.idx()].map_or(f64::NEG_INFINITY, Q64_64::to_f64);
                let slack = if b == Q64_64::MIN { f64::INFINITY } else { (*key - b).to_f64() };
                let gap = sub[ix.idx()].map_or(f64::INFINITY, |r| (*key - r).to_f64());
                min_gap = min_gap.min(gap);
                rows.push(TightnessRow {
                    suite: cfg.suite.name().into(),
                    instance: inst.name.clone(),
                    seed: inst.seed,
                    mode: Method::Run(mode).name(),
                    node: work[*ix].digest.to_hex(),
                    depth: work[*ix].depth,
                    key: key.to_f64(),
                    rsm: r,
                    stop_slack: slack,
                    key_minus_rsm: gap,
                });
            }
            let max_slack = if res.frontier_at_stop.is_empty() {
                0.0
            } else {
                res.frontier_at_stop.iter().map(|(_, k)| (*k - b).to_f64()).fold(f64::NEG_INFINITY, f64::max)
            };
            runs.push(TightnessRun {
                suite: cfg.suite.name().into(),
                instance: inst.name.clone(),
                seed: inst.seed,
                mode: Method::Run(mode).name(),
                frontier: res.frontier_at_stop.len(),
                max_stop_slack: max_slack,
                min_key_minus_rsm: min_gap,
                stop_reason: reason_name(res.stop_reason),
            });
        }
    }
    (rows, runs)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NubRow {
    pub n_ub_factor: f64,
    pub runs: usize,
    pub expansions: f64,
    pub ci95_expansions: f64,
    pub kappa_records: usize,
    pub frac_strict_kappa: f64,
    pub mean_kappa: f64,
}

pub const NUB_FACTORS: [f64; 4] = [1.0, 1.5, 2.0, 4.0];

/// Surrogate runs per upper-count factor; kappa comes from validating each
/// ledger against the graph's exact counts.
pub fn nub_sweep(cfg: &SuiteConfig, factors: &[f64]) -> Vec<NubRow> {
    let mut out = Vec::new();
    let insts = instances(cfg);
    for &f in factors {
        let mut exps = Vec::new();
        let mut kappas = Vec::new();
        for inst in &insts {
            let dag = compiled(&inst.graph);
            let mut rc = run_config(&dag, inst, Mode::Surrogate, cfg);
            rc.n_ub_factor = f;
            let (res, _) = execute(&dag, &rc, cfg);
            exps.push(res.expansions as f64);
            let v = validate(&res.ledger, &dag, Some(&all_counts(&dag)));
            kappas.extend(v.tightened.iter().map(|t| t.kappa.to_f64()));
        }
        let s = summarize(&exps);
        let n = kappas.len();
        out.push(NubRow {
            n_ub_factor: f,
            runs: s.n,
            expansions: s.mean,
            ci95_expansions: s.ci95,
            kappa_records: n,
            frac_strict_kappa: if n == 0 { 0.0 } else { kappas.iter().filter(|k| **k < 0.0).count() as f64 / n as f64 },
            mean_kappa: if n == 0 { 0.0 } else { kappas.iter().sum::<f64>() / n as f64 },
        });
    }
    out
}

/// Whether `seed` makes the adversarial fixture split: distribution-level
/// pruning discards the realized winner while Exact certifies it.
pub fn adversarial_split(seed: u64) -> bool {
    let dag = compiled(&fixtures::adversarial_graph());
    let rc = RunConfig::for_dag(&dag, Mode::Exact, seed);
    let d = dist_level(&dag, &rc);
    let Ok(res) = racecert_core::search::run(&dag, &rc) else { return false };
    let winner = realized_winner(&dag, &rc);
    d.pruned_winner && res.stop_reason == StopReason::Certified && res.incumbent_leaf == winner
}

pub fn find_adversarial(start: u64, limit: u64) -> Option<u64> {
    (start..start.saturating_add(limit)).find(|s| adversarial_split(*s))
}

/// Fallback work on the zero-cost depth-2 binary tree under a salt:
/// `(|materialized \ oracle|, internal pops)`.
pub fn fallback_overhead(salt_hex: &str) -> (usize, u64) {
    let dag = compiled(&fixtures::binary_zero_cost());
    let rc = fixtures::tight_fallback_config(&dag, salt_hex);
    let res = racecert_core::search::run(&dag, &rc).expect("fixture runs");
    let a = oracle_a(&dag, &rc);
    let first = a.first().map(|x| x.0);
    let s = res.popped_leaves.iter().filter(|l| Some(**l) != first).count();
    (s, res.internal_pops)
}

pub fn find_tight_salt(start: u64, limit: u64) -> Option<String> {
    (start..start.saturating_add(limit)).map(|c| hex_encode(&c.to_be_bytes())).find(|h| {
        let (s, n) = fallback_overhead(h);
        s as u64 == n
    })
}
