use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use bnndp::certify::Certificate;
use bnndp::oracle::McEstimate;

pub const REPORT_SCHEMA: &str = "bnn-dp-report/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEcho {
    pub command: String,
    pub model_sha256: String,
    pub center: Vec<f64>,
    pub radius: Option<f64>,
    pub task: String,
    pub tol: Option<f64>,
    pub seed: u64,
    pub audit_margin_sigmas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub certify_ms: f64,
    pub mc_ms: f64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusEcho {
    pub radius: f64,
    pub bracket: [f64; 2],
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub query: QueryEcho,
    pub certificate: Certificate,
    pub radius_search: Option<RadiusEcho>,
    pub mc_check: Option<McEstimate>,
    pub timing: Timing,
    /// SHA-256 over the report with `timing` and this field removed.
    pub determinism_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a JSON value with the listed top-level keys dropped.
pub fn hash_without(v: &Value, skip: &[&str]) -> String {
    let mut v = v.clone();
    if let Value::Object(map) = &mut v {
        for k in skip {
            map.remove(*k);
        }
    }
    sha256_hex(serde_json::to_string(&v).expect("value serializes").as_bytes())
}

impl Report {
    pub fn seal(mut self) -> Self {
        self.determinism_hash.clear();
        let v = serde_json::to_value(&self).expect("report serializes");
        self.determinism_hash = hash_without(&v, &["timing", "determinism_hash"]);
        self
    }
}
