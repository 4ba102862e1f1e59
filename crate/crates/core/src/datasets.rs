//! Labeled claim datasets: canonical JSON-lines I/O, upstream adapters and
//! seeded subsampling.
//!
//! The canonical record is `{"id", "claim", "label", "source", "hops"?}` with
//! `label` one of `"True"`, `"False"` or absent.
//!
//! Sampling algorithm (stable across platforms and runs):
//! 1. sort the claims by id (byte order);
//! 2. seed ChaCha8 with `seed` via `seed_from_u64`;
//! 3. partial Fisher-Yates: for `i in 0..n`, draw `j` uniformly from
//!    `i..len` (rejection sampling on `next_u64`, no modulo bias) and swap;
//! 4. keep the first `n` and sort them by id again.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::label::Label;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{missing} of {total} lines lack required fields")]
    SchemaMismatch { missing: usize, total: usize },
    #[error("requested {requested} claims but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("malformed upstream data: {0}")]
    Malformed(String),
    #[error("writing claims: {0}")]
    Write(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    #[serde(rename = "claim")]
    pub text: String,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
}

fn default_label_map() -> BTreeMap<String, Label> {
    [
        ("true", Label::True),
        ("supported", Label::True),
        ("supports", Label::True),
        ("support", Label::True),
        ("factual", Label::True),
        ("false", Label::False),
        ("refuted", Label::False),
        ("refutes", Label::False),
        ("refute", Label::False),
        ("not_supported", Label::False),
        ("contradict", Label::False),
        ("non-factual", Label::False),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    /// Expected number of valid records, checked after loading when set.
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default = "default_id_field")]
    pub id_field: String,
    #[serde(default = "default_claim_field")]
    pub claim_field: String,
    #[serde(default = "default_label_field")]
    pub label_field: String,
    /// Upstream label (matched case-insensitively) to verdict.
    #[serde(default = "default_label_map")]
    pub label_map: BTreeMap<String, Label>,
}

fn default_format() -> String {
    "jsonl".into()
}
fn default_id_field() -> String {
    "id".into()
}
fn default_claim_field() -> String {
    "claim".into()
}
fn default_label_field() -> String {
    "label".into()
}

impl DatasetManifest {
    /// Manifest for a canonical JSON-lines file.
    pub fn for_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            name,
            path,
            format: default_format(),
            size: None,
            id_field: default_id_field(),
            claim_field: default_claim_field(),
            label_field: default_label_field(),
            label_map: default_label_map(),
        }
    }

    pub fn map_label(&self, raw: &Value) -> Option<Label> {
        match raw {
            Value::Bool(b) => Some(Label::from_bool(*b)),
            Value::String(s) => self.label_map.get(&s.trim().to_lowercase()).copied(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub claims: Vec<Claim>,
    pub errors: Vec<LineError>,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn load_claims(manifest: &DatasetManifest) -> Result<LoadReport, DatasetError> {
    let unreadable = |source| DatasetError::FileUnreadable {
        path: manifest.path.display().to_string(),
        source,
    };
    if manifest.format != "jsonl" {
        return Err(DatasetError::Malformed(format!(
            "unsupported dataset format {:?}",
            manifest.format
        )));
    }
    let file = std::fs::File::open(&manifest.path).map_err(unreadable)?;
    let mut report = LoadReport::default();
    let mut seen = HashSet::new();
    let mut total = 0;
    let mut missing_required = 0;

    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(unreadable)?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let mut fail = |message: String| {
            report.errors.push(LineError {
                line: index + 1,
                message,
            })
        };
        let record: Value = match serde_json::from_str(&line) {
            Ok(v @ Value::Object(_)) => v,
            Ok(_) => {
                missing_required += 1;
                fail("record is not a JSON object".into());
                continue;
            }
            Err(e) => {
                missing_required += 1;
                fail(format!("invalid JSON: {e}"));
                continue;
            }
        };
        let id = record.get(&manifest.id_field).and_then(id_string);
        let text = record
            .get(&manifest.claim_field)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty());
        let (Some(id), Some(text)) = (id, text) else {
            missing_required += 1;
            fail(format!(
                "missing or empty {:?} / {:?}",
                manifest.id_field, manifest.claim_field
            ));
            continue;
        };
        let gold = match record.get(&manifest.label_field) {
            None | Some(Value::Null) => None,
            Some(raw) => match manifest.map_label(raw) {
                Some(l) => Some(l),
                None => {
                    fail(format!("unmapped label {raw}"));
                    continue;
                }
            },
        };
        if !seen.insert(id.clone()) {
            fail(format!("duplicate id {id:?}"));
            continue;
        }
        let source = record
            .get("source")
            .and_then(Value::as_str)
            .unwrap_or(&manifest.name)
            .to_string();
        let hops = record
            .get("hops")
            .and_then(Value::as_u64)
            .map(|h| h as u32);
        report.claims.push(Claim {
            id,
            text: text.to_string(),
            gold,
            source,
            hops,
        });
    }

    if total > 0 && missing_required * 2 > total {
        return Err(DatasetError::SchemaMismatch {
            missing: missing_required,
            total,
        });
    }
    if let Some(expected) = manifest.size {
        if expected != report.claims.len() {
            tracing::warn!(
                expected,
                loaded = report.claims.len(),
                "dataset size differs from manifest"
            );
        }
    }
    Ok(report)
}

pub fn write_claims<W: Write>(mut out: W, claims: &[Claim]) -> Result<(), DatasetError> {
    for claim in claims {
        let line = serde_json::to_string(claim).expect("claims always serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_claims(path: &Path, claims: &[Claim]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|source| DatasetError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    write_claims(std::io::BufWriter::new(file), claims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceLabel {
    Support,
    Refute,
    NotEnoughInfo,
}

impl EvidenceLabel {
    pub fn parse(raw: &str) -> Option<Self> {
        let norm: String = raw
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        match norm.as_str() {
            "support" | "supports" | "supported" => Some(Self::Support),
            "refute" | "refutes" | "refuted" | "contradict" | "contradicts" => Some(Self::Refute),
            "nei" | "notenoughinfo" | "notenoughinformation" => Some(Self::NotEnoughInfo),
            _ => None,
        }
    }
}

/// A claim with its per-evidence labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SciFactRecord {
    pub id: String,
    pub claim: String,
    pub labels: Vec<EvidenceLabel>,
}

impl SciFactRecord {
    /// Accepts the upstream layout (`evidence: {doc: [{label, ...}]}`, where
    /// an empty map means not-enough-info) or a flat `labels` list.
    pub fn from_value(v: &Value) -> Result<Self, DatasetError> {
        let id = v
            .get("id")
            .and_then(id_string)
            .ok_or_else(|| DatasetError::Malformed(format!("record without id: {v}")))?;
        let claim = v
            .get("claim")
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::Malformed(format!("record {id} without claim")))?
            .to_string();
        let mut raw = Vec::new();
        if let Some(list) = v.get("labels").and_then(Value::as_array) {
            raw.extend(list.iter().filter_map(Value::as_str).map(str::to_string));
        } else if let Some(evidence) = v.get("evidence").and_then(Value::as_object) {
            for sets in evidence.values() {
                for set in sets.as_array().into_iter().flatten() {
                    if let Some(l) = set.get("label").and_then(Value::as_str) {
                        raw.push(l.to_string());
                    }
                }
            }
            if raw.is_empty() {
                raw.push("NEI".into());
            }
        }
        let labels = raw
            .iter()
            .map(|l| {
                EvidenceLabel::parse(l)
                    .ok_or_else(|| DatasetError::Malformed(format!("record {id}: unknown label {l:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { id, claim, labels })
    }
}

/// Claim-level binary labels: all-Support is True, all-Refute is False;
/// conflicting, not-enough-info and unlabeled claims are dropped.
pub fn binarize_scifact(records: &[SciFactRecord]) -> Vec<Claim> {
    records
        .iter()
        .filter_map(|r| {
            let all = |want| !r.labels.is_empty() && r.labels.iter().all(|l| *l == want);
            let gold = if all(EvidenceLabel::Support) {
                Label::True
            } else if all(EvidenceLabel::Refute) {
                Label::False
            } else {
                return None;
            };
            Some(Claim {
                id: r.id.clone(),
                text: r.claim.clone(),
                gold: Some(gold),
                source: "scifact".into(),
                hops: None,
            })
        })
        .collect()
}

/// Read a JSON array or JSON-lines file into values.
pub fn read_records(path: &Path) -> Result<Vec<Value>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()));
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| DatasetError::Malformed(format!("record {}: {e}", i + 1)))
        })
        .collect()
}

/// HoVER records (`uid`, `claim`, `label`, `num_hops`), optionally
/// restricted to one hop count.
pub fn adapt_hover(records: &[Value], hops: Option<u32>) -> Result<Vec<Claim>, DatasetError> {
    let manifest = DatasetManifest::for_path("hover");
    let mut out = Vec::new();
    for r in records {
        let id = r
            .get("uid")
            .or_else(|| r.get("id"))
            .and_then(id_string)
            .ok_or_else(|| DatasetError::Malformed(format!("HoVER record without uid: {r}")))?;
        let text = r
            .get("claim")
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::Malformed(format!("HoVER record {id} without claim")))?;
        let n_hops = r.get("num_hops").and_then(Value::as_u64).map(|h| h as u32);
        if hops.is_some() && n_hops != hops {
            continue;
        }
        let gold = match r.get("label") {
            Some(raw) => Some(manifest.map_label(raw).ok_or_else(|| {
                DatasetError::Malformed(format!("HoVER record {id}: unknown label {raw}"))
            })?),
            None => None,
        };
        out.push(Claim {
            id,
            text: text.to_string(),
            gold,
            source: "hover".into(),
            hops: n_hops,
        });
    }
    Ok(out)
}

/// FeLM records: each segment of a world-knowledge response becomes one
/// claim labeled by its segment label.
pub fn adapt_felm(records: &[Value]) -> Result<Vec<Claim>, DatasetError> {
    let mut out = Vec::new();
    for (n, r) in records.iter().enumerate() {
        let domain = r.get("domain").and_then(Value::as_str);
        if domain.is_some_and(|d| d != "wk") {
            continue;
        }
        let base = r
            .get("index")
            .or_else(|| r.get("id"))
            .and_then(id_string)
            .unwrap_or_else(|| n.to_string());
        let segments = r
            .get("segmented_response")
            .and_then(Value::as_array)
            .ok_or_else(|| DatasetError::Malformed(format!("FeLM record {base} without segments")))?;
        let labels = r
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| DatasetError::Malformed(format!("FeLM record {base} without labels")))?;
        if segments.len() != labels.len() {
            return Err(DatasetError::Malformed(format!(
                "FeLM record {base}: {} segments but {} labels",
                segments.len(),
                labels.len()
            )));
        }
        for (i, (seg, label)) in segments.iter().zip(labels).enumerate() {
            let (Some(text), Some(label)) = (seg.as_str(), label.as_bool()) else {
                return Err(DatasetError::Malformed(format!(
                    "FeLM record {base}: segment {i} is not (text, bool)"
                )));
            };
            if text.trim().is_empty() {
                continue;
            }
            out.push(Claim {
                id: format!("{base}-{i}"),
                text: text.trim().to_string(),
                gold: Some(Label::from_bool(label)),
                source: "felm-wk".into(),
                hops: None,
            });
        }
    }
    Ok(out)
}

/// Uniform draw from `0..bound` without modulo bias.
fn uniform_below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Seeded subset of `n` claims; see the module docs for the algorithm.
pub fn sample_subset(claims: &[Claim], n: usize, seed: u64) -> Result<Vec<Claim>, DatasetError> {
    if n > claims.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: claims.len(),
        });
    }
    let mut pool: Vec<Claim> = claims.to_vec();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = i + uniform_below(&mut rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn write(lines: &str) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("claims.jsonl");
        std::fs::write(&path, lines).unwrap();
        (dir, DatasetManifest::for_path(path))
    }

    fn claim(id: &str) -> Claim {
        Claim {
            id: id.into(),
            text: format!("claim {id}"),
            gold: Some(Label::True),
            source: "t".into(),
            hops: None,
        }
    }

    #[test]
    fn labels_are_mapped() {
        let (_d, m) = write("{\"id\":\"1\",\"claim\":\"X\",\"label\":\"SUPPORTED\"}\n{\"id\":2,\"claim\":\"Y\",\"label\":false}\n");
        let r = load_claims(&m).unwrap();
        assert_eq!(r.claims[0].gold, Some(Label::True));
        assert_eq!(r.claims[1].id, "2");
        assert_eq!(r.claims[1].gold, Some(Label::False));
        assert!(r.errors.is_empty());
    }

    #[test]
    fn empty_file_loads_nothing() {
        let (_d, m) = write("");
        let r = load_claims(&m).unwrap();
        assert!(r.claims.is_empty() && r.errors.is_empty());
    }

    #[test]
    fn malformed_lines_are_reported() {
        let (_d, m) = write(
            "{\"id\":\"1\",\"claim\":\"X\"}\n{\"id\":\"2\"}\n{\"id\":\"3\",\"claim\":\"Z\",\"label\":\"maybe\"}\n{\"id\":\"1\",\"claim\":\"dup\"}\n",
        );
        let r = load_claims(&m).unwrap();
        assert_eq!(r.claims.len(), 1);
        assert_eq!(r.claims[0].gold, None);
        let lines: Vec<usize> = r.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
    }

    #[test]
    fn mostly_wrong_schema_is_rejected() {
        let (_d, m) = write("{\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"id\":\"1\",\"claim\":\"c\"}\n");
        assert!(matches!(
            load_claims(&m),
            Err(DatasetError::SchemaMismatch { missing: 2, total: 3 })
        ));
    }

    #[test]
    fn missing_file_is_unreadable() {
        let m = DatasetManifest::for_path("/nonexistent/claims.jsonl");
        assert!(matches!(load_claims(&m), Err(DatasetError::FileUnreadable { .. })));
    }

    #[test]
    fn scifact_binarization() {
        let rec = |id: &str, labels: &[EvidenceLabel]| SciFactRecord {
            id: id.into(),
            claim: format!("c{id}"),
            labels: labels.to_vec(),
        };
        use EvidenceLabel::*;
        let out = binarize_scifact(&[
            rec("a", &[Support, Support]),
            rec("b", &[Support, Refute]),
            rec("c", &[NotEnoughInfo]),
            rec("d", &[Refute]),
            rec("e", &[]),
            rec("f", &[Support, NotEnoughInfo]),
        ]);
        let got: Vec<_> = out.iter().map(|c| (c.id.as_str(), c.gold.unwrap())).collect();
        assert_eq!(got, vec![("a", Label::True), ("d", Label::False)]);
    }

    #[test]
    fn scifact_upstream_layout() {
        let v = json!({"id": 7, "claim": "x", "evidence": {"12": [{"sentences": [1], "label": "SUPPORT"}], "9": [{"label": "CONTRADICT"}]}});
        let r = SciFactRecord::from_value(&v).unwrap();
        assert_eq!(r.labels, vec![EvidenceLabel::Support, EvidenceLabel::Refute]);
        let empty = SciFactRecord::from_value(&json!({"id": "8", "claim": "y", "evidence": {}})).unwrap();
        assert_eq!(empty.labels, vec![EvidenceLabel::NotEnoughInfo]);
    }

    #[test]
    fn hover_hop_filter() {
        let recs = vec![
            json!({"uid": "a", "claim": "x", "label": "SUPPORTED", "num_hops": 4}),
            json!({"uid": "b", "claim": "y", "label": "NOT_SUPPORTED", "num_hops": 2}),
        ];
        let all = adapt_hover(&recs, None).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].gold, Some(Label::False));
        let four = adapt_hover(&recs, Some(4)).unwrap();
        assert_eq!(four.len(), 1);
        assert_eq!(four[0].hops, Some(4));
    }

    #[test]
    fn felm_segments_become_claims() {
        let recs = vec![
            json!({"index": 3, "domain": "wk", "segmented_response": ["A is B.", "C is D."], "labels": [true, false]}),
            json!({"index": 4, "domain": "math", "segmented_response": ["1+1=3"], "labels": [false]}),
        ];
        let out = adapt_felm(&recs).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].id, "3-1");
        assert_eq!(out[1].gold, Some(Label::False));
    }

    #[test]
    fn sampling_examples() {
        let claims: Vec<_> = ["c", "a", "b", "d"].iter().map(|i| claim(i)).collect();
        let full = sample_subset(&claims, 4, 1).unwrap();
        let ids: Vec<_> = full.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c", "d"]);
        assert_eq!(sample_subset(&claims, 2, 9).unwrap(), sample_subset(&claims, 2, 9).unwrap());
        assert!(sample_subset(&claims, 0, 9).unwrap().is_empty());
        assert!(matches!(
            sample_subset(&claims, 5, 9),
            Err(DatasetError::SampleTooLarge { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn sampling_is_pinned() {
        // guards the generator and draw procedure against silent changes
        let claims: Vec<_> = (0..20).map(|i| claim(&format!("{i:02}"))).collect();
        let ids: Vec<String> = sample_subset(&claims, 5, 42).unwrap().into_iter().map(|c| c.id).collect();
        assert_eq!(ids, ["01", "04", "17", "18", "19"]);
    }

    fn arb_claim() -> impl Strategy<Value = Claim> {
        (
            "[a-z0-9]{1,8}",
            "[ -~]{0,30}[a-z]",
            prop::option::of(any::<bool>()),
            "[a-z]{1,6}",
            prop::option::of(1u32..6),
        )
            .prop_map(|(id, text, gold, source, hops)| Claim {
                id,
                text: text.trim().to_string(),
                gold: gold.map(Label::from_bool),
                source,
                hops,
            })
    }

    proptest! {
        #[test]
        fn load_after_write_is_identity(claims in prop::collection::vec(arb_claim(), 0..20)) {
            let mut seen = HashSet::new();
            let claims: Vec<Claim> = claims.into_iter().filter(|c| seen.insert(c.id.clone())).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            save_claims(&path, &claims).unwrap();
            let back = load_claims(&DatasetManifest::for_path(&path)).unwrap();
            prop_assert!(back.errors.is_empty());
            prop_assert_eq!(back.claims, claims);
        }

        #[test]
        fn binarized_claims_never_conflict(labels in prop::collection::vec(prop::collection::vec(0u8..3, 0..4), 1..30)) {
            let records: Vec<SciFactRecord> = labels
                .iter()
                .enumerate()
                .map(|(i, ls)| SciFactRecord {
                    id: i.to_string(),
                    claim: "c".into(),
                    labels: ls.iter().map(|l| match l {
                        0 => EvidenceLabel::Support,
                        1 => EvidenceLabel::Refute,
                        _ => EvidenceLabel::NotEnoughInfo,
                    }).collect(),
                })
                .collect();
            for c in binarize_scifact(&records) {
                let raw = &records[c.id.parse::<usize>().unwrap()].labels;
                let want = if c.gold == Some(Label::True) { EvidenceLabel::Support } else { EvidenceLabel::Refute };
                prop_assert!(raw.iter().all(|l| *l == want));
            }
        }

        #[test]
        fn sample_is_subset_of_input(n in 0usize..15, seed in any::<u64>()) {
            let claims: Vec<_> = (0..15).map(|i| claim(&format!("{i:02}"))).collect();
            let s = sample_subset(&claims, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert!(s.windows(2).all(|w| w[0].id < w[1].id));
        }
    }
}
