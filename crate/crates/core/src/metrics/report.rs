use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::overlap::quantile_sorted;
use crate::error::{Error, Result};
use crate::volume::Modality;

/// Group label of aggregates pooled over every missing modality.
pub const ALL_GROUP: &str = "all";

/// One per-case measurement. `value` is `None` for an undefined result
/// (HD95 with exactly one empty mask).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub subject: String,
    pub missing: Option<Modality>,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let std = if sorted.len() > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stats {
            mean,
            std,
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// A missing-modality name or [`ALL_GROUP`].
    pub group: String,
    pub metric: String,
    pub count: usize,
    /// Undefined values left out of the statistics.
    pub excluded: usize,
    pub stats: Option<Stats>,
    /// Set when `count == 1`, where the reported std of 0 is a placeholder.
    pub single_record: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<Aggregate>,
}

fn group_aggregate(group: &str, metric: &str, values: &[Option<f64>]) -> Aggregate {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    Aggregate {
        group: group.to_string(),
        metric: metric.to_string(),
        count: defined.len(),
        excluded: values.len() - defined.len(),
        stats: Stats::of(&defined),
        single_record: defined.len() == 1,
    }
}

/// Per-metric statistics within each missing-modality group and pooled over
/// all records.
pub fn aggregate(records: Vec<MetricRecord>) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Empty("no metric records to aggregate".into()));
    }
    let mut grouped: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    let mut pooled: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in &records {
        if let Some(m) = r.missing {
            grouped
                .entry((m.name().to_string(), r.metric.clone()))
                .or_default()
                .push(r.value);
        }
        pooled.entry(r.metric.clone()).or_default().push(r.value);
    }
    let mut aggregates: Vec<Aggregate> = grouped
        .iter()
        .map(|((g, m), v)| group_aggregate(g, m, v))
        .collect();
    aggregates.extend(pooled.iter().map(|(m, v)| group_aggregate(ALL_GROUP, m, v)));
    Ok(MetricReport {
        records,
        aggregates,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn records_tsv(&self) -> String {
        let mut out = String::from("subject\tmissing_modality\tmetric\tvalue\n");
        for r in &self.records {
            let missing = r.missing.map_or("-", Modality::name);
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.subject,
                missing,
                r.metric,
                cell(r.value)
            )
            .unwrap();
        }
        out
    }

    pub fn summary_tsv(&self) -> String {
        let mut out = String::from(
            "group\tmetric\tn\texcluded\tmean\tstd\tq25\tmedian\tq75\tsingle_record\n",
        );
        for a in &self.aggregates {
            let s = a.stats;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                a.group,
                a.metric,
                a.count,
                a.excluded,
                cell(s.map(|s| s.mean)),
                cell(s.map(|s| s.std)),
                cell(s.map(|s| s.q25)),
                cell(s.map(|s| s.median)),
                cell(s.map(|s| s.q75)),
                a.single_record
            )
            .unwrap();
        }
        out
    }

    /// Writes `records.tsv`, `summary.tsv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("records.tsv", self.records_tsv())?;
        put("summary.tsv", self.summary_tsv())?;
        put(
            "report.json",
            serde_json::to_string_pretty(self).expect("report serializes"),
        )
    }

    pub fn find(&self, group: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.group == group && a.metric == metric)
    }
}
