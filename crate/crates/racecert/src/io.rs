//! File formats: graph specs, public counts, catalogs, ledgers and verdicts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use racecert_core::budget::CatalogEntry;
use racecert_core::digest::{sha256, Digest};
use racecert_core::ledger::{Ledger, LedgerError};
use racecert_core::prefix_dag::{compile, CompileCertificate, CompileError, PrefixDag, SharedDag};
use racecert_core::validator::{PublicCounts, Verdict};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: compile failed: {err:?}")]
    Compile { path: PathBuf, err: CompileError },
    #[error("{path}: {err}")]
    Ledger { path: PathBuf, err: LedgerError },
    #[error("{path}: bad public count key {key:?}")]
    CountKey { path: PathBuf, key: String },
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Fs { path: path.into(), source })
}

pub fn write(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Fs { path: dir.into(), source })?;
    }
    fs::write(path, text).map_err(|source| IoError::Fs { path: path.into(), source })
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read(path)?).map_err(|source| IoError::Json { path: path.into(), source })
}

pub fn load_graph(path: &Path) -> Result<SharedDag, IoError> {
    json(path)
}

/// Digest recorded in ledger headers: SHA-256 of the canonical JSON of the
/// graph file.
pub fn graph_digest(g: &SharedDag) -> Digest {
    sha256(&serde_json::to_vec(g).expect("graph serializes"))
}

pub fn compile_graph(path: &Path) -> Result<(SharedDag, PrefixDag, CompileCertificate), IoError> {
    let g = load_graph(path)?;
    let (dag, cert) = compile(&g).map_err(|err| IoError::Compile { path: path.into(), err })?;
    Ok((g, dag, cert))
}

pub fn save_graph(path: &Path, g: &SharedDag) -> Result<(), IoError> {
    write(path, &(serde_json::to_string_pretty(g).expect("graph serializes") + "\n"))
}

/// Public counts file: `{"<hex ctx_digest>": n_exact, ...}`.
pub fn load_counts(path: &Path) -> Result<PublicCounts, IoError> {
    let raw: BTreeMap<String, u64> = json(path)?;
    raw.into_iter()
        .map(|(k, n)| match Digest::from_hex(&k) {
            Some(d) => Ok((d, n)),
            None => Err(IoError::CountKey { path: path.into(), key: k }),
        })
        .collect()
}

/// Every exact count in the compiled graph, as a validator would receive
/// them from a public source.
pub fn all_counts(dag: &PrefixDag) -> PublicCounts {
    dag.nodes().filter_map(|(_, n)| n.n_exact.map(|c| (n.digest, c))).collect()
}

pub fn counts_json(counts: &PublicCounts) -> String {
    let m: BTreeMap<String, u64> = counts.iter().map(|(d, n)| (d.to_hex(), *n)).collect();
    serde_json::to_string_pretty(&m).expect("counts serialize") + "\n"
}

pub fn load_catalog(path: &Path) -> Result<Vec<CatalogEntry>, IoError> {
    json(path)
}

pub fn load_ledger(path: &Path) -> Result<Ledger, IoError> {
    Ledger::parse(&read(path)?).map_err(|err| IoError::Ledger { path: path.into(), err })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    read(path)
}

pub fn save_ledger(path: &Path, ledger: &Ledger) -> Result<(), IoError> {
    write(path, &ledger.to_ndjson())
}

pub fn save_verdict(path: &Path, v: &Verdict) -> Result<(), IoError> {
    write(path, &(serde_json::to_string_pretty(v).expect("verdict serializes") + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn graph_and_counts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = fixtures::toy_graph();
        let p = dir.path().join("g.json");
        save_graph(&p, &g).unwrap();
        let (back, dag, cert) = compile_graph(&p).unwrap();
        assert_eq!(back, g);
        assert!(cert.is_ok());
        let c = all_counts(&dag);
        let cp = dir.path().join("c.json");
        write(&cp, &counts_json(&c)).unwrap();
        assert_eq!(load_counts(&cp).unwrap(), c);
    }

    #[test]
    fn bad_count_key_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        write(&p, r#"{"zz": 3}"#).unwrap();
        assert!(matches!(load_counts(&p), Err(IoError::CountKey { .. })));
    }
}
