//! Experiment reports: per-(input, target, order) rows plus the comparison
//! aggregates, emitted as csv or json.
//!
//! Aggregates are stored alongside the rows and must equal a recomputation
//! from them; both loaders check this.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::AttackParams;
use crate::clever::{ScoreOrder, TargetMode};
use crate::error::{Error, Result};
use crate::evt::{EvtFit, SamplePlan};

/// Scores closer than this count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub input_id: String,
    pub true_class: usize,
    pub target_class: usize,
    pub target_mode: TargetMode,
    pub order: ScoreOrder,
    pub gamma: Option<f64>,
    pub lipschitz: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub score: Option<f64>,
    pub evt_location: Option<f64>,
    pub evt_scale: Option<f64>,
    pub evt_shape: Option<f64>,
    pub evt_log_likelihood: Option<f64>,
    pub evt_degenerate: Option<bool>,
    pub attack_success: Option<bool>,
    pub attack_distortion: Option<f64>,
    pub error: Option<String>,
    /// Full fit diagnostics; json only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<EvtFit>,
    /// json only, so that csv output is reproducible byte for byte.
    #[serde(default)]
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub target_mode: TargetMode,
    pub order: ScoreOrder,
    /// Rows with a score.
    pub count: usize,
    pub avg_score: Option<f64>,
    pub attack_successes: usize,
    /// Mean distortion over successful attacks.
    pub avg_attack_distortion: Option<f64>,
    /// Share of inputs (scored under both orders) where this order's score is
    /// strictly larger. `None` unless both orders were run.
    pub pct_larger: Option<f64>,
    /// Mean of `(this − other) / other · 100` over the inputs this order wins.
    pub avg_pct_increase: Option<f64>,
    pub ties: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub transform: String,
    pub plan: SamplePlan,
    pub power_iters: usize,
    pub power_tol: f64,
    pub attack: Option<AttackParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleverReport {
    pub model: String,
    pub settings: ReportSettings,
    pub dataset_size: usize,
    pub evaluated: usize,
    /// Misclassified records.
    pub skipped: usize,
    /// Records never examined because the input limit was reached.
    #[serde(default)]
    pub truncated: usize,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Aggregates for every (target mode, order) present in `rows`, in sorted order.
pub fn compute_aggregates(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(TargetMode, ScoreOrder), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.target_mode, r.order)).or_default().push(r);
    }

    let mut out = Vec::new();
    for (&(mode, order), group) in &groups {
        let scores: Vec<f64> = group.iter().filter_map(|r| r.score).collect();
        let distortions: Vec<f64> = group
            .iter()
            .filter(|r| r.attack_success == Some(true))
            .filter_map(|r| r.attack_distortion)
            .collect();

        let other = match order {
            ScoreOrder::First => ScoreOrder::Second,
            ScoreOrder::Second => ScoreOrder::First,
        };
        let (mut pct_larger, mut avg_pct_increase, mut ties) = (None, None, None);
        if let Some(others) = groups.get(&(mode, other)) {
            let by_input: BTreeMap<&str, f64> = others
                .iter()
                .filter_map(|r| r.score.map(|s| (r.input_id.as_str(), s)))
                .collect();
            let pairs: Vec<(f64, f64)> = group
                .iter()
                .filter_map(|r| Some((r.score?, *by_input.get(r.input_id.as_str())?)))
                .collect();
            if !pairs.is_empty() {
                let wins: Vec<(f64, f64)> = pairs
                    .iter()
                    .copied()
                    .filter(|(mine, theirs)| mine - theirs > TIE_TOLERANCE)
                    .collect();
                let tie_count = pairs
                    .iter()
                    .filter(|(mine, theirs)| (mine - theirs).abs() <= TIE_TOLERANCE)
                    .count();
                let increases: Vec<f64> = wins
                    .iter()
                    .filter(|(_, theirs)| *theirs > 0.0)
                    .map(|(mine, theirs)| (mine - theirs) / theirs * 100.0)
                    .collect();
                pct_larger = Some(wins.len() as f64 / pairs.len() as f64 * 100.0);
                avg_pct_increase = mean(&increases);
                ties = Some(tie_count);
            }
        }

        out.push(Aggregate {
            target_mode: mode,
            order,
            count: scores.len(),
            avg_score: mean(&scores),
            attack_successes: distortions.len(),
            avg_attack_distortion: mean(&distortions),
            pct_larger,
            avg_pct_increase,
            ties,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Parse(format!("unknown report format {other:?}"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

const ROW_HEADER: [&str; 18] = [
    "input_id",
    "true_class",
    "target_class",
    "target_mode",
    "order",
    "gamma",
    "lipschitz",
    "a",
    "b",
    "score",
    "evt_location",
    "evt_scale",
    "evt_shape",
    "evt_log_likelihood",
    "evt_degenerate",
    "attack_success",
    "attack_distortion",
    "error",
];

const AGGREGATE_HEADER: [&str; 9] = [
    "target_mode",
    "order",
    "count",
    "avg_score",
    "attack_successes",
    "avg_attack_distortion",
    "pct_larger",
    "avg_pct_increase",
    "ties",
];

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        // Shortest representation that parses back to the same value.
        v.to_string()
    }
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn parse_opt<T: FromStr>(field: &str, name: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("bad {name} value {field:?}")))
}

fn parse_req<T: FromStr>(field: &str, name: &str) -> Result<T> {
    parse_opt(field, name)?.ok_or_else(|| Error::Parse(format!("missing {name}")))
}

impl CleverReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_writer(Vec::new());
        w.write_record(ROW_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.input_id.clone(),
                r.true_class.to_string(),
                r.target_class.to_string(),
                r.target_mode.to_string(),
                r.order.to_string(),
                opt(r.gamma, fmt_f64),
                opt(r.lipschitz, fmt_f64),
                opt(r.a, fmt_f64),
                opt(r.b, fmt_f64),
                opt(r.score, fmt_f64),
                opt(r.evt_location, fmt_f64),
                opt(r.evt_scale, fmt_f64),
                opt(r.evt_shape, fmt_f64),
                opt(r.evt_log_likelihood, fmt_f64),
                opt(r.evt_degenerate, |b| b.to_string()),
                opt(r.attack_success, |b| b.to_string()),
                opt(r.attack_distortion, fmt_f64),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let mut bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        if !self.aggregates.is_empty() {
            bytes.push(b'\n');
            let mut w = csv::WriterBuilder::new().from_writer(bytes);
            w.write_record(AGGREGATE_HEADER)?;
            for a in &self.aggregates {
                w.write_record([
                    a.target_mode.to_string(),
                    a.order.to_string(),
                    a.count.to_string(),
                    opt(a.avg_score, fmt_f64),
                    a.attack_successes.to_string(),
                    opt(a.avg_attack_distortion, fmt_f64),
                    opt(a.pct_larger, fmt_f64),
                    opt(a.avg_pct_increase, fmt_f64),
                    opt(a.ties, |t| t.to_string()),
                ])?;
            }
            bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        }
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn emit(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => Ok(self.to_json()),
        }
    }

    /// Writes the report atomically (temporary file, then rename).
    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        write_atomic(path.as_ref(), self.emit(format)?.as_bytes())
    }

    pub fn aggregates_consistent(&self) -> bool {
        compute_aggregates(&self.rows) == self.aggregates
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if !report.aggregates_consistent() {
            return Err(Error::Parse("aggregates disagree with rows".into()));
        }
        Ok(report)
    }
}

/// Rows and aggregates read back from a csv report.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Parses a csv report and checks its aggregates against the rows.
pub fn parse_csv_report(text: &str) -> Result<CsvReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records.next().transpose()?;
    if !header.is_some_and(|h| h.iter().eq(ROW_HEADER)) {
        return Err(Error::Parse("missing row header".into()));
    }
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    let mut in_aggregates = false;
    for record in records {
        let rec = record?;
        let f: Vec<&str> = rec.iter().collect();
        if !in_aggregates {
            if f.as_slice() == AGGREGATE_HEADER {
                in_aggregates = true;
                continue;
            }
            if f.len() != ROW_HEADER.len() {
                return Err(Error::Parse(format!("row has {} fields", f.len())));
            }
            rows.push(ReportRow {
                input_id: f[0].to_string(),
                true_class: parse_req(f[1], "true_class")?,
                target_class: parse_req(f[2], "target_class")?,
                target_mode: f[3].parse()?,
                order: f[4].parse()?,
                gamma: parse_opt(f[5], "gamma")?,
                lipschitz: parse_opt(f[6], "lipschitz")?,
                a: parse_opt(f[7], "a")?,
                b: parse_opt(f[8], "b")?,
                score: parse_opt(f[9], "score")?,
                evt_location: parse_opt(f[10], "evt_location")?,
                evt_scale: parse_opt(f[11], "evt_scale")?,
                evt_shape: parse_opt(f[12], "evt_shape")?,
                evt_log_likelihood: parse_opt(f[13], "evt_log_likelihood")?,
                evt_degenerate: parse_opt(f[14], "evt_degenerate")?,
                attack_success: parse_opt(f[15], "attack_success")?,
                attack_distortion: parse_opt(f[16], "attack_distortion")?,
                error: (!f[17].is_empty()).then(|| f[17].to_string()),
                fit: None,
                wall_time_ms: 0.0,
            });
        } else {
            if f.len() != AGGREGATE_HEADER.len() {
                return Err(Error::Parse(format!("aggregate has {} fields", f.len())));
            }
            aggregates.push(Aggregate {
                target_mode: f[0].parse()?,
                order: f[1].parse()?,
                count: parse_req(f[2], "count")?,
                avg_score: parse_opt(f[3], "avg_score")?,
                attack_successes: parse_req(f[4], "attack_successes")?,
                avg_attack_distortion: parse_opt(f[5], "avg_attack_distortion")?,
                pct_larger: parse_opt(f[6], "pct_larger")?,
                avg_pct_increase: parse_opt(f[7], "avg_pct_increase")?,
                ties: parse_opt(f[8], "ties")?,
            });
        }
    }
    if compute_aggregates(&rows) != aggregates {
        return Err(Error::Parse("aggregates disagree with rows".into()));
    }
    Ok(CsvReport { rows, aggregates })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
