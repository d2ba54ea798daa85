//! Run reports and their long-form merge.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robustshift::analysis::Summary;
use robustshift::attack::EvalReport;
use robustshift::bounds::BoundResult;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::num::Num;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    /// Written after each stage; a report left in this state was interrupted.
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub run_id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// SHA-256 over the config and every input file.
    pub input_hash: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub runs: Vec<RunRecord>,
    #[serde(default)]
    pub sweep: Vec<SweepRecord>,
    #[serde(default)]
    pub analyses: Vec<AnalysisRecord>,
    #[serde(default)]
    pub bounds: Vec<BoundsRecord>,
    /// Wall-clock seconds per stage, in execution order.
    #[serde(default)]
    pub timings: Vec<(String, Num)>,
}

/// One trained model and its test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub mode: String,
    pub transforms: Vec<String>,
    pub model_hash: String,
    pub model_file: PathBuf,
    pub history_file: PathBuf,
    pub n_test: usize,
    pub clean_acc: Num,
    pub robust_acc: Option<Num>,
    pub robust_wrt_pred: Option<Num>,
    /// Robust accuracy against an attack that may leave `[0, 1]`.
    pub robust_noclip: Option<Num>,
}

impl RunRecord {
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut m = vec![("clean_acc", self.clean_acc.0)];
        for (name, v) in [
            ("robust_acc", self.robust_acc),
            ("robust_wrt_pred", self.robust_wrt_pred),
            ("robust_noclip", self.robust_noclip),
        ] {
            if let Some(v) = v {
                m.push((name, v.0));
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub variant: String,
    pub mode: String,
    pub axis: String,
    pub value: Num,
    pub split: String,
    pub metric: String,
    pub accuracy: Num,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryNum {
    pub mean: Num,
    pub min: Num,
    pub max: Num,
    pub count: usize,
}

impl From<&Summary> for SummaryNum {
    fn from(s: &Summary) -> Self {
        SummaryNum {
            mean: Num(s.mean),
            min: Num(s.min),
            max: Num(s.max),
            count: s.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub kind: String,
    /// Dataset variant analyzed; absent for the synthetic Monte Carlo.
    pub variant: Option<String>,
    pub split: Option<String>,
    pub params: BTreeMap<String, Num>,
    pub summary: Option<SummaryNum>,
    /// Per-image values, per-class distances, bin counts or the single
    /// Monte Carlo estimate, depending on `kind`.
    pub values: Vec<Num>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub kind: String,
    pub params: BTreeMap<String, Num>,
    pub value: Num,
    /// `value` to four decimals, as bounds are usually quoted.
    pub rounded: String,
    pub form: String,
    pub exponential_lower: Option<Num>,
}

impl BoundsRecord {
    pub fn from_result(kind: &str, r: &BoundResult, extra: &[(&str, f64)]) -> Self {
        let mut params: BTreeMap<String, Num> = [("p", r.p), ("eps", r.eps)]
            .into_iter()
            .chain(r.d.map(|d| ("d", d as f64)))
            .chain(extra.iter().copied())
            .map(|(k, v)| (k.to_string(), Num(v)))
            .collect();
        params.retain(|_, v| v.0.is_finite());
        BoundsRecord {
            kind: kind.into(),
            params,
            value: Num(r.value),
            rounded: format!("{:.4}", r.value),
            form: serde_json::to_value(r.form)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            exponential_lower: r.exponential_lower.map(Num),
        }
    }
}

/// JSON form of an evaluation with full-precision number strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJson {
    pub n: usize,
    pub clean_acc: Num,
    pub robust_acc: Option<Num>,
    pub robust_wrt_pred: Option<Num>,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        EvalJson {
            n: r.n,
            clean_acc: Num(r.clean_acc),
            robust_acc: r.robust_acc.map(Num),
            robust_wrt_pred: r.robust_wrt_pred.map(Num),
        }
    }
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: not a JSON report: {e}", path.display())))?;
        let schema = raw.get("schema").and_then(serde_json::Value::as_u64);
        if schema != Some(u64::from(REPORT_SCHEMA)) {
            return Err(CliError::validation(format!(
                "{}: report schema {} is incompatible with {REPORT_SCHEMA}",
                path.display(),
                schema.map_or("missing".to_string(), |s| s.to_string())
            )));
        }
        serde_json::from_value(raw).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json + "\n").map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    /// Long-form rows `(variant, mode, metric, value)`.
    pub fn rows(&self) -> Vec<MergedRow> {
        let mut out = Vec::new();
        let mut push = |variant: &str, mode: &str, metric: String, value: f64| {
            out.push(MergedRow {
                run_id: self.run_id.clone(),
                variant: variant.to_string(),
                mode: mode.to_string(),
                metric,
                value: Num(value),
            })
        };
        for r in &self.runs {
            for (name, v) in r.metrics() {
                push(&r.variant, &r.mode, name.to_string(), v);
            }
        }
        for s in &self.sweep {
            let metric = format!("{}_{}[{}={}]", s.split, s.metric, s.axis, s.value);
            push(&s.variant, &s.mode, metric, s.accuracy.0);
        }
        for a in &self.analyses {
            let variant = a.variant.as_deref().unwrap_or("");
            match &a.summary {
                Some(s) if a.kind != "histogram" => push(variant, "", format!("{}_mean", a.kind), s.mean.0),
                _ => {
                    if let [v] = a.values.as_slice() {
                        push(variant, "", a.kind.clone(), v.0);
                    }
                }
            }
        }
        for b in &self.bounds {
            push("", "", format!("bound_{}", b.kind), b.value.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub run_id: String,
    pub variant: String,
    pub mode: String,
    pub metric: String,
    pub value: Num,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub rows: Vec<MergedRow>,
    /// Rows dropped because their run id was already merged.
    pub duplicate_rows: usize,
}

/// Concatenates the long-form rows of `paths` in order. Later reports with
/// an already-seen run id are skipped.
pub fn merge(paths: &[PathBuf]) -> Result<Merged> {
    if paths.is_empty() {
        return Err(CliError::validation("report merge needs at least one report"));
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    let mut duplicate_rows = 0;
    for p in paths {
        let report = RunReport::load(p)?;
        let r = report.rows();
        if seen.insert(report.run_id.clone()) {
            rows.extend(r);
        } else {
            duplicate_rows += r.len();
        }
    }
    Ok(Merged { rows, duplicate_rows })
}

pub fn write_merged_csv(rows: &[MergedRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    // An empty row set still gets a header.
    if rows.is_empty() {
        w.write_record(["run_id", "variant", "mode", "metric", "value"])
            .map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}
