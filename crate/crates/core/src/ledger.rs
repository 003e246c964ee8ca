//! Append-only NDJSON audit ledger.
//!
//! The first line is a header carrying the schema tag and the full run
//! configuration; every following line is one `LedgerRecord`. Numeric
//! fields are rendered as raw fixed-point or integer decimal strings.
//! Every record field is optional at parse level so that partial excerpts
//! parse; the validator decides which fields an event requires.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::fixed::{Q0_64, Q32_32, Q64_64};
use crate::race::{Purpose, RngStream};
use crate::search::RunConfig;

pub const SCHEMA: &str = "racecert/ledger/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Exact,
    Surrogate,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClaimType {
    RunWiseExact,
    TruncationOnly,
    NoCert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyScope {
    PostProcessingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetEvent {
    None,
    BudgetFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Guard {
    CountFail,
    AcyclicityFail,
    NumClamp,
    Timeout,
    BudgetFail,
    CapExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Push,
    Pop,
    Expand,
    LeafEval,
    Materialize,
    Guard,
    Budget,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The mode's stop inequality holds (or the frontier is empty).
    Certified,
    /// Fallback's heuristic stop.
    Heuristic,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Q32_32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<String>,
}

/// Decimal-string serde for optional integers.
mod dec {
    use super::*;
    use crate::fixed::{parse_canonical_int, CanonicalInt};
    use serde::{Deserializer, Serializer};

    pub fn serialize<T: fmt::Display, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.collect_str(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, T: CanonicalInt, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
        let s = Option::<alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        match s {
            None => Ok(None),
            Some(s) => parse_canonical_int::<T>(&s).map(Some).map_err(serde::de::Error::custom),
        }
    }
}

macro_rules! record {
    ($( $(#[$m:meta])* $name:ident : $ty:ty ),* $(,)?) => {
        /// One ledger line.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct LedgerRecord {
            $(
                $(#[$m])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $name: Option<$ty>,
            )*
        }
    };
}

record! {
    event: EventKind,
    ctx_digest: Digest,
    ctx_repr: String,
    node_id: String,
    parent_id: String,
    mode: Mode,
    claim_type: ClaimType,
    privacy_scope: PrivacyScope,
    #[serde(rename = "U")]
    u: Q0_64,
    purpose: Purpose,
    #[serde(rename = "N", with = "dec")]
    n: u64,
    #[serde(rename = "Nub", with = "dec")]
    nub: u64,
    kappa: Q32_32,
    key_raw: Q64_64,
    key_tight: Q64_64,
    /// `-log t` (Exact) or `-log t_hat` (Surrogate) of the record's node.
    neg_log_t: Q64_64,
    #[serde(with = "dec")]
    winner: u32,
    /// Leaf value (Exact and Surrogate) or heuristic score (Fallback).
    value: Q64_64,
    incumbent: Q64_64,
    max_key: Q64_64,
    #[serde(with = "dec")]
    tie_token: u32,
    #[serde(with = "dec")]
    expansions: u64,
    reason: StopReason,
    router_rdp_eps: Q32_32,
    #[serde(with = "dec")]
    alpha_selected: u32,
    eps_delta: EpsDelta,
    #[serde(with = "dec")]
    price_spent: u64,
    #[serde(with = "dec")]
    price_cap: u64,
    #[serde(with = "dec")]
    sla_ms: u32,
    #[serde(with = "dec")]
    latency_acc_ms: u32,
    budget_event: BudgetEvent,
    dkey_pred: Q32_32,
    dkey_real: Q32_32,
    model_id: String,
    adapter_id: String,
    dp_cert_id: String,
    eps_train: Q32_32,
    delta_train: String,
    guards: Vec<Guard>,
    phi_before: Q32_32,
    phi_after: Q32_32,
    delta_phi: Q32_32,
    eta: Q32_32,
    claim_type_before: ClaimType,
    claim_type_after: ClaimType,
    mode_after: Mode,
    /// Human-readable duplicates of numeric fields; ignored by replay.
    #[serde(rename = "_display")]
    display: serde_json::Value,
}

impl LedgerRecord {
    pub fn new(event: EventKind) -> Self {
        LedgerRecord { event: Some(event), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHeader {
    pub schema: String,
    pub run: RunConfig,
    /// SHA-256 of the canonical JSON of the graph the run used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_sha256: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LedgerError {
    MalformedLine { line: usize, msg: String },
    OverflowOnParse { line: usize, msg: String },
    SchemaViolation { line: usize, msg: String },
}

impl LedgerError {
    pub fn line(&self) -> usize {
        match self {
            LedgerError::MalformedLine { line, .. }
            | LedgerError::OverflowOnParse { line, .. }
            | LedgerError::SchemaViolation { line, .. } => *line,
        }
    }
}

impl fmt::Display for LedgerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LedgerError::MalformedLine { line, msg } => write!(f, "line {line}: malformed: {msg}"),
            LedgerError::OverflowOnParse { line, msg } => write!(f, "line {line}: overflow: {msg}"),
            LedgerError::SchemaViolation { line, msg } => write!(f, "line {line}: schema violation: {msg}"),
        }
    }
}

impl core::error::Error for LedgerError {}

fn classify(line: usize, e: serde_json::Error) -> LedgerError {
    let msg = e.to_string();
    if msg.contains("overflows") {
        LedgerError::OverflowOnParse { line, msg }
    } else if e.is_syntax() || e.is_eof() {
        LedgerError::MalformedLine { line, msg }
    } else {
        LedgerError::SchemaViolation { line, msg }
    }
}

/// Parse a single record line (no header expected).
pub fn parse_record(line_no: usize, line: &str) -> Result<LedgerRecord, LedgerError> {
    serde_json::from_str(line).map_err(|e| classify(line_no, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub header: LedgerHeader,
    pub records: Vec<LedgerRecord>,
}

impl Ledger {
    pub fn new(run: RunConfig, graph_sha256: Option<Digest>) -> Self {
        Ledger { header: LedgerHeader { schema: SCHEMA.into(), run, graph_sha256 }, records: Vec::new() }
    }

    pub fn append(&mut self, rec: LedgerRecord) -> usize {
        self.records.push(rec);
        self.records.len() - 1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// NDJSON rendering: header line, then one line per record, each
    /// terminated by `\n`.
    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Strict parse. Line numbers are 1-based; the header is line 1.
    pub fn parse(text: &str) -> Result<Ledger, LedgerError> {
        let mut lines = text.split('\n');
        let first = lines.next().unwrap_or("");
        if first.trim().is_empty() {
            return Err(LedgerError::MalformedLine { line: 1, msg: "empty ledger".into() });
        }
        let header: LedgerHeader = serde_json::from_str(first).map_err(|e| classify(1, e))?;
        if header.schema != SCHEMA {
            return Err(LedgerError::SchemaViolation { line: 1, msg: alloc::format!("unknown schema {:?}", header.schema) });
        }
        let mut records = Vec::new();
        let rest: Vec<&str> = lines.collect();
        for (i, line) in rest.iter().enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                if i + 1 == rest.len() {
                    break;
                }
                return Err(LedgerError::MalformedLine { line: line_no, msg: "blank line".into() });
            }
            let rec = parse_record(line_no, line)?;
            if rec.event.is_none() {
                return Err(LedgerError::SchemaViolation { line: line_no, msg: "record without event".into() });
            }
            records.push(rec);
        }
        Ok(Ledger { header, records })
    }
}

/// UUIDv7 generator. In deterministic mode the 48-bit timestamp is a
/// counter starting at zero and the random bits come from a seeded stream;
/// otherwise the caller supplies wall-clock milliseconds.
#[derive(Debug, Clone)]
pub struct Uuid7Gen {
    rng: RngStream,
    clock: Option<fn() -> u64>,
    last_ms: u64,
}

impl Uuid7Gen {
    pub fn seeded(seed: u64) -> Self {
        Uuid7Gen { rng: RngStream::new(seed ^ 0x7575_6964_7637_0000), clock: None, last_ms: 0 }
    }

    pub fn with_clock(seed: u64, clock: fn() -> u64) -> Self {
        Uuid7Gen { clock: Some(clock), ..Uuid7Gen::seeded(seed) }
    }

    pub fn next_id(&mut self) -> String {
        let ms = match self.clock {
            Some(c) => c().max(self.last_ms),
            None => self.last_ms + 1,
        };
        self.last_ms = ms;
        let r1 = self.rng.next_u64();
        let r2 = self.rng.next_u64();
        let hi: u64 = (ms & 0xffff_ffff_ffff) << 16 | 0x7000 | (r1 & 0x0fff);
        let lo: u64 = 0x8000_0000_0000_0000 | (r2 & 0x3fff_ffff_ffff_ffff);
        format_uuid(hi, lo)
    }
}

fn format_uuid(hi: u64, lo: u64) -> String {
    let h = crate::digest::hex_encode(&hi.to_be_bytes());
    let l = crate::digest::hex_encode(&lo.to_be_bytes());
    alloc::format!("{}-{}-{}-{}-{}", &h[..8], &h[8..12], &h[12..16], &l[..4], &l[4..16])
}

/// True if `s` is a canonical lowercase version-7 UUID.
pub fn is_uuid_v7(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 36
        && [8, 13, 18, 23].iter().all(|&i| b[i] == b'-')
        && b.iter().enumerate().all(|(i, c)| [8, 13, 18, 23].contains(&i) || matches!(c, b'0'..=b'9' | b'a'..=b'f'))
        && b[14] == b'7'
        && matches!(b[19], b'8' | b'9' | b'a' | b'b')
}
