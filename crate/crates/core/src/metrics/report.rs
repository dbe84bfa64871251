//! Evaluation and sensitivity reports with JSON and CSV renderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{average_precision, sensitivity, IobbDenominator, MetricError, Overlap};
use crate::detect::{BBox, Detection};

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const METRIC_KEYS: [&str; 6] = ["IoU30", "IoU50", "IoU70", "IoBB30", "IoBB50", "IoBB70"];
/// Test-split metrics folded into the sensitivity average.
pub const TEST_KEYS: [&str; 2] = ["IoU50", "IoBB50"];

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// AP per metric key; `None` when the split has no ground truth.
    pub ap: BTreeMap<String, Option<f64>>,
    pub images: usize,
    pub ground_truths: usize,
    /// Predictions left after the confidence filter.
    pub predictions: usize,
    pub conf_threshold: f64,
    pub iobb_denominator: IobbDenominator,
    pub mismatch_level: Option<f64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn compute(
        preds: &[Vec<Detection>],
        gts: &[Vec<BBox>],
        conf_threshold: f64,
        iobb_denominator: IobbDenominator,
    ) -> Result<Self, MetricError> {
        let kept: Vec<Vec<Detection>> = preds
            .iter()
            .map(|p| {
                p.iter()
                    .filter(|d| d.score >= conf_threshold)
                    .copied()
                    .collect()
            })
            .collect();
        let mut ap = BTreeMap::new();
        for overlap in [Overlap::IoU, Overlap::IoBB(iobb_denominator)] {
            for thr in THRESHOLDS {
                let key = format!("{}{}", overlap.label(), (thr * 100.0).round() as u32);
                let curve = average_precision(&kept, gts, overlap, thr)?;
                ap.insert(key, curve.map(|c| c.ap));
            }
        }
        Ok(EvalReport {
            ap,
            images: gts.len(),
            ground_truths: gts.iter().map(Vec::len).sum(),
            predictions: kept.iter().map(Vec::len).sum(),
            conf_threshold,
            iobb_denominator,
            mismatch_level: None,
            config_digest: String::new(),
        })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.ap.get(key).copied().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,ap\n");
        for k in METRIC_KEYS {
            out.push_str(&format!("{k},{}\n", fmt(self.get(k))));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub metric: String,
    pub perf_unregistered: Option<f64>,
    pub perf_registered: Option<f64>,
    pub sensitivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    /// Mean over rows in `averaged` with a defined sensitivity.
    pub average: Option<f64>,
    pub averaged: Vec<String>,
}

impl SensitivityReport {
    /// Rows `val/<key>` for every metric and `test/<key>` for the test pair
    /// when given. `subset` restricts the average to the named rows.
    pub fn from_reports(
        unregistered: &EvalReport,
        registered: &EvalReport,
        test: Option<(&EvalReport, &EvalReport)>,
        subset: Option<&[String]>,
    ) -> Self {
        let mut rows = Vec::new();
        let mut push = |split: &str, key: &str, u: &EvalReport, r: &EvalReport| {
            let (pu, pr) = (u.get(key), r.get(key));
            rows.push(SensitivityRow {
                metric: format!("{split}/{key}"),
                perf_unregistered: pu,
                perf_registered: pr,
                sensitivity: pu.zip(pr).and_then(|(a, b)| sensitivity(a, b)),
            });
        };
        for k in METRIC_KEYS {
            push("val", k, unregistered, registered);
        }
        if let Some((u, r)) = test {
            for k in TEST_KEYS {
                push("test", k, u, r);
            }
        }
        Self::from_rows(rows, subset)
    }

    pub fn from_rows(rows: Vec<SensitivityRow>, subset: Option<&[String]>) -> Self {
        let averaged: Vec<String> = rows
            .iter()
            .filter(|r| subset.is_none_or(|s| s.contains(&r.metric)))
            .filter(|r| r.sensitivity.is_some())
            .map(|r| r.metric.clone())
            .collect();
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| averaged.contains(&r.metric))
            .filter_map(|r| r.sensitivity)
            .collect();
        let average =
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        SensitivityReport {
            rows,
            average,
            averaged,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,perf_unregistered,perf_registered,sensitivity\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.metric,
                fmt(r.perf_unregistered),
                fmt(r.perf_registered),
                fmt(r.sensitivity)
            ));
        }
        out.push_str(&format!("average,,,{}\n", fmt(self.average)));
        out
    }
}
