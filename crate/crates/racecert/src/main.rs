use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use racecert::experiments::{
    aggregate, csv_metadata, find_adversarial, find_tight_salt, nub_sweep, run_suite, tightness, write_csv, Method,
    Suite, SuiteConfig, NUB_FACTORS,
};
use racecert::fixtures::{self, compiled};
use racecert::io;
use racecert_core::budget::BudgetConfig;
use racecert_core::fixed::Q64_64;
use racecert_core::ledger::{EventKind, Ledger, Mode};
use racecert_core::search::run;
use racecert_core::validator::{validate, Check, Failure};

#[derive(Parser)]
#[command(name = "racecert", version, about = "Run-wise certified best-first routing: suites, replay and validation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a suite and write per-run and aggregate CSVs plus ledgers.
    Suite(SuiteArgs),
    /// Per-frontier-node Key - RSM and Key - B* at stop.
    Tightness(SuiteArgs),
    /// Surrogate expansions and validator kappa across N_ub factors.
    NubSweep {
        #[command(flatten)]
        common: SuiteArgs,
        /// Comma-separated factors.
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<f64>>,
    },
    /// Replay ledgers against a graph; exit code 0 iff every check passes.
    Validate {
        #[arg(long)]
        graph: PathBuf,
        /// Public exact counts, `{"<hex digest>": n}`.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Verdict report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the stop metrics each ledger implies.
        #[arg(long)]
        recompute_metrics: bool,
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
    },
    /// Replay the 4-leaf toy with its scripted uniforms.
    ToyReplay {
        #[arg(long, value_enum, default_value = "exact")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search seeds (dist-level split) or salts (tight Fallback) for the
    /// pinned adversarial fixtures.
    FindAdversarial {
        #[arg(long, value_enum, default_value = "dist-level")]
        kind: Adversary,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        limit: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    A,
    B,
    Adversarial,
    Toy,
    Pipeline,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Exact,
    Surrogate,
    Fallback,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Adversary {
    DistLevel,
    FallbackTight,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, value_enum, default_value = "a")]
    suite: SuiteArg,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "all")]
    mode: ModeArg,
    /// Also run the baseline methods.
    #[arg(long)]
    baselines: bool,
    #[arg(long, default_value_t = 3)]
    beam_width: usize,
    #[arg(long, default_value_t = 1.5)]
    nub_factor: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// PRF salt for Fallback leaf uniforms.
    #[arg(long)]
    salt: Option<String>,
    /// Run this graph file instead of the suite generator.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Attach the budget controller with this catalog.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    price_max: u64,
    #[arg(long, default_value_t = 1000)]
    slo_ms: u32,
    #[arg(long)]
    max_expansions: Option<u64>,
    #[arg(long)]
    deadline_ms: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn deterministic() -> bool {
    std::env::var("RACECERT_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn modes(m: ModeArg) -> Vec<Method> {
    match m {
        ModeArg::Exact => vec![Method::Run(Mode::Exact)],
        ModeArg::Surrogate => vec![Method::Run(Mode::Surrogate)],
        ModeArg::Fallback => vec![Method::Run(Mode::Fallback)],
        ModeArg::All => Method::all_modes(),
    }
}

impl SuiteArgs {
    fn config(&self) -> Result<SuiteConfig> {
        if self.seeds == 0 {
            bail!("--seeds must be at least 1");
        }
        if !(self.nub_factor >= 1.0) {
            bail!("--nub-factor must be at least 1");
        }
        let suite = match self.suite {
            SuiteArg::A => Suite::A,
            SuiteArg::B => Suite::B,
            SuiteArg::Adversarial => Suite::Adversarial,
            SuiteArg::Toy => Suite::Toy,
            SuiteArg::Pipeline => Suite::Pipeline,
        };
        let mut cfg = SuiteConfig::new(suite, (self.seed..self.seed + self.seeds).collect());
        cfg.methods = modes(self.mode);
        if self.baselines {
            cfg.methods.extend([Method::Greedy, Method::DistLevel, Method::Beam(self.beam_width.max(1))]);
        }
        cfg.n_ub_factor = self.nub_factor;
        cfg.tau = self.tau;
        cfg.salt = match &self.salt {
            Some(h) => Some(racecert_core::digest::hex_decode(h).context("--salt must be hex")?),
            None => None,
        };
        cfg.graph = self.graph.as_deref().map(io::load_graph).transpose()?;
        cfg.budget = match &self.catalog {
            Some(p) => Some(BudgetConfig::new(io::load_catalog(p)?, self.price_max, self.slo_ms)),
            None => None,
        };
        cfg.max_expansions = self.max_expansions;
        cfg.deadline = self.deadline_ms.map(Duration::from_millis);
        cfg.deterministic = deterministic();
        cfg.out = Some(self.out.clone());
        Ok(cfg)
    }
}

fn write_meta(dir: &Path, name: &str, cfg: &SuiteConfig) -> Result<()> {
    io::write(&dir.join(name), &(serde_json::to_string_pretty(&csv_metadata(cfg))? + "\n"))?;
    Ok(())
}

fn cmd_suite(a: &SuiteArgs) -> Result<()> {
    let cfg = a.config()?;
    let rows = run_suite(&cfg)?;
    let agg = aggregate(&rows);
    write_csv(&a.out.join("runs.csv"), &rows)?;
    write_csv(&a.out.join("summary.csv"), &agg)?;
    write_meta(&a.out, "summary.meta.json", &cfg)?;
    println!("{:<12} {:<8} {:<12} {:>5} {:>12} {:>8} {:>10}", "suite", "inst", "method", "runs", "expansions", "ci95", "replay");
    for r in agg.iter().filter(|r| r.instance == "all") {
        let replay = r.replay_ok_all.map_or("-".to_string(), |b| b.to_string());
        println!(
            "{:<12} {:<8} {:<12} {:>5} {:>12.2} {:>8.2} {:>10}",
            r.suite, r.instance, r.method, r.runs, r.mean_expansions, r.ci95_expansions, replay
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_tightness(a: &SuiteArgs) -> Result<()> {
    let cfg = a.config()?;
    let (rows, runs) = tightness(&cfg);
    write_csv(&a.out.join("tightness_nodes.csv"), &rows)?;
    write_csv(&a.out.join("tightness_runs.csv"), &runs)?;
    write_meta(&a.out, "tightness.meta.json", &cfg)?;
    for mode in ["exact", "surrogate"] {
        let rs: Vec<_> = runs.iter().filter(|r| r.mode == mode).collect();
        if rs.is_empty() {
            continue;
        }
        let worst = rs.iter().map(|r| r.max_stop_slack).fold(f64::NEG_INFINITY, f64::max);
        let gap = rs.iter().map(|r| r.min_key_minus_rsm).fold(f64::INFINITY, f64::min);
        println!("{mode:<10} runs {:>4}  max stop slack {worst:+.6}  min key-RSM {gap:+.6}", rs.len());
    }
    Ok(())
}

fn cmd_nub_sweep(a: &SuiteArgs, factors: Option<Vec<f64>>) -> Result<()> {
    let cfg = a.config()?;
    let factors = factors.unwrap_or_else(|| NUB_FACTORS.to_vec());
    if factors.iter().any(|f| !(*f >= 1.0)) {
        bail!("factors must be at least 1");
    }
    let rows = nub_sweep(&cfg, &factors);
    write_csv(&a.out.join("nub_sweep.csv"), &rows)?;
    write_meta(&a.out, "nub_sweep.meta.json", &cfg)?;
    for r in &rows {
        println!(
            "factor {:>5.2}  expansions {:>9.2} +- {:>6.2}  strict kappa {:>5.3}  mean kappa {:+.4}",
            r.n_ub_factor, r.expansions, r.ci95_expansions, r.frac_strict_kappa, r.mean_kappa
        );
    }
    Ok(())
}

/// Metrics a CSV row reports, recomputed from the ledger alone.
fn ledger_metrics(l: &Ledger) -> Option<(u64, f64, String, String)> {
    let stop = l.records.iter().rev().find(|r| r.event == Some(EventKind::Stop))?;
    let slack = match (stop.max_key, stop.incumbent) {
        (Some(k), Some(b)) => (k - b).to_f64().max(0.0),
        (Some(_), None) => f64::INFINITY,
        (None, _) => 0.0,
    };
    let claim = stop.claim_type.map(|c| format!("{c:?}")).unwrap_or_default();
    let reason = stop.reason.map(|r| format!("{r:?}")).unwrap_or_default();
    Some((stop.expansions.unwrap_or(0), slack, claim, reason))
}

fn cmd_validate(
    graph: &Path,
    counts: Option<&Path>,
    out: Option<&Path>,
    recompute: bool,
    ledgers: &[PathBuf],
) -> Result<bool> {
    let (g, dag, _) = io::compile_graph(graph)?;
    let gd = io::graph_digest(&g);
    let counts = counts.map(io::load_counts).transpose()?;
    let mut all_ok = true;
    let mut report = Vec::new();
    println!(
        "{:<40} {:>7} {:>6} {:>5} {:>6} {:>6} {:>6} {:>9} {:>11}",
        "ledger", "records", "replay", "stop", "guards", "budget", "kappa", "parse_ms", "validate_ms"
    );
    for p in ledgers {
        let text = io::read_text(p)?;
        let t = Instant::now();
        let parsed = Ledger::parse(&text);
        let parse_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let mut v = match &parsed {
            Ok(l) => validate(l, &dag, counts.as_ref()),
            Err(_) => racecert_core::validator::validate_text(&text, &dag, counts.as_ref()),
        };
        let validate_ms = t.elapsed().as_secs_f64() * 1e3;
        if let Ok(l) = &parsed {
            if l.header.graph_sha256.is_some_and(|d| d != gd) {
                v.replay_ok = false;
                v.failures.insert(0, Failure { index: 0, check: Check::Replay, reason: "graph digest differs from the ledger header".into() });
            }
        }
        all_ok &= v.ok();
        println!(
            "{:<40} {:>7} {:>6} {:>5} {:>6} {:>6} {:>6} {:>9.3} {:>11.3}",
            p.display().to_string(),
            v.records,
            v.replay_ok,
            v.stop_rule_ok,
            v.guards_ok,
            v.budget_ok,
            v.tightened.len(),
            parse_ms,
            validate_ms
        );
        for f in v.failures.iter().take(5) {
            println!("    record {}: {:?}: {}", f.index, f.check, f.reason);
        }
        if recompute {
            if let Some((e, s, c, r)) = parsed.as_ref().ok().and_then(ledger_metrics) {
                println!("    expansions {e}  stop_slack {s}  claim {c}  reason {r}");
            }
        }
        report.push(serde_json::json!({ "ledger": p.display().to_string(), "parse_ms": parse_ms, "validate_ms": validate_ms, "verdict": v }));
    }
    if let Some(o) = out {
        io::write(o, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(all_ok)
}

fn cmd_toy(mode: ModeArg, out: Option<&Path>) -> Result<()> {
    let g = fixtures::toy_graph();
    let dag = compiled(&g);
    let mode = match mode {
        ModeArg::Exact | ModeArg::All => Mode::Exact,
        ModeArg::Surrogate => Mode::Surrogate,
        ModeArg::Fallback => Mode::Fallback,
    };
    let cfg = fixtures::toy_config(&dag, mode);
    let mut res = run(&dag, &cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    res.ledger.header.graph_sha256 = Some(io::graph_digest(&g));
    let label = |d| dag.lookup(d).map_or("?".to_string(), |ix| dag[ix].state_label.clone());
    for r in &res.ledger.records {
        let (Some(ev), Some(d)) = (r.event, r.ctx_digest.as_ref()) else { continue };
        let key = r.key_raw.map(Q64_64::to_f64);
        let nl = r.neg_log_t.map(Q64_64::to_f64);
        match ev {
            EventKind::Push => println!("push {:<3} key {:>9.6}  -log t {:>9.6}", label(d), key.unwrap_or(f64::NAN), nl.unwrap_or(f64::NAN)),
            EventKind::LeafEval => println!("leaf {:<3} value {:>9.6}", label(d), r.value.map_or(f64::NAN, Q64_64::to_f64)),
            _ => {}
        }
    }
    println!("stop {:?}  incumbent {:.6}  expansions {}", res.stop_reason, res.incumbent_value(), res.expansions);
    if let Some(o) = out {
        let tag = format!("{mode:?}").to_lowercase();
        io::save_graph(&o.join("toy.json"), &g)?;
        io::save_ledger(&o.join(format!("toy_{tag}.ndjson")), &res.ledger)?;
        println!("wrote {}", o.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Suite(a) => cmd_suite(&a).map(|_| true),
        Cmd::Tightness(a) => cmd_tightness(&a).map(|_| true),
        Cmd::NubSweep { common, factors } => cmd_nub_sweep(&common, factors).map(|_| true),
        Cmd::Validate { graph, counts, out, recompute_metrics, ledgers } => {
            cmd_validate(&graph, counts.as_deref(), out.as_deref(), recompute_metrics, &ledgers)
        }
        Cmd::ToyReplay { mode, out } => cmd_toy(mode, out.as_deref()).map(|_| true),
        Cmd::FindAdversarial { kind, seed, limit } => {
            let found = match kind {
                Adversary::DistLevel => find_adversarial(seed, limit).map(|s| format!("seed {s}")),
                Adversary::FallbackTight => find_tight_salt(seed, limit).map(|s| format!("salt {s}")),
            };
            match found {
                Some(f) => {
                    println!("{f}");
                    Ok(true)
                }
                None => Ok(false),
            }
        }
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
