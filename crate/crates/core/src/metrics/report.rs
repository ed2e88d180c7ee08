//! Per-case metric rows, aggregates and their CSV/JSON encodings.
//!
//! CSV schema (version 1): `case_id,region,dice,hausdorff95,dice_both_empty`
//! with one row per case and sub-region. Undefined distances are written
//! as `undefined` in both CSV and JSON.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{evaluate_case, DistanceMode};
use crate::error::{Error, Result};
use crate::stats::Summary;
use crate::volume::{LabelVolume, SubRegion};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "case_id,region,dice,hausdorff95,dice_both_empty";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Hausdorff percentile in `(0, 100]`.
    pub percentile: f64,
    pub mode: DistanceMode,
    pub spacing: [f64; 3],
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            percentile: 95.0,
            mode: DistanceMode::Surface,
            spacing: [1.0; 3],
        }
    }
}

mod maybe_distance {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(d) => s.serialize_f64(*d),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Some(v)),
            Raw::Text(t) if t == "undefined" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a distance or \"undefined\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: SubRegion,
    pub dice: f64,
    /// Dice was defined by convention because both masks were empty.
    pub dice_both_empty: bool,
    #[serde(rename = "hausdorff95", with = "maybe_distance")]
    pub hausdorff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub regions: Vec<RegionMetrics>,
}

impl CaseMetrics {
    pub fn region(&self, region: SubRegion) -> Option<&RegionMetrics> {
        self.regions.iter().find(|r| r.region == region)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub region: SubRegion,
    pub dice: Summary,
    /// Over cases with a defined distance; `None` if there are none.
    pub hausdorff95: Option<Summary>,
    pub hausdorff95_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Definitions {
    pub dice_empty: String,
    pub hausdorff: String,
    pub percentile_rule: String,
}

impl Default for Definitions {
    fn default() -> Self {
        Self {
            dice_empty: "both masks empty gives 1 (flagged); exactly one empty gives 0".into(),
            hausdorff: "max of the two directed percentile point-to-set distances; undefined if either mask is empty"
                .into(),
            percentile_rule: "nearest rank: value at the ceil(q*n)-th smallest".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Configuration label, e.g. `axial`, `coronal`, `fused`.
    pub name: String,
    pub config: MetricsConfig,
    pub definitions: Definitions,
    pub cases: Vec<CaseMetrics>,
    pub aggregates: Vec<RegionAggregate>,
}

fn aggregate(cases: &[CaseMetrics]) -> Vec<RegionAggregate> {
    SubRegion::ALL
        .iter()
        .filter_map(|&region| {
            let rows: Vec<&RegionMetrics> = cases.iter().filter_map(|c| c.region(region)).collect();
            let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
            let hd: Vec<f64> = rows.iter().filter_map(|r| r.hausdorff).collect();
            Some(RegionAggregate {
                region,
                dice: Summary::of(&dice)?,
                hausdorff95: Summary::of(&hd),
                hausdorff95_undefined: rows.len() - hd.len(),
            })
        })
        .collect()
}

fn fmt_distance(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |d| d.to_string())
}

impl MetricsReport {
    /// Sorts rows by case id and computes aggregates.
    pub fn new(name: impl Into<String>, config: MetricsConfig, mut cases: Vec<CaseMetrics>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let aggregates = aggregate(&cases);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            name: name.into(),
            config,
            definitions: Definitions::default(),
            cases,
            aggregates,
        }
    }

    pub fn aggregate(&self, region: SubRegion) -> Option<&RegionAggregate> {
        self.aggregates.iter().find(|a| a.region == region)
    }

    pub fn mean_dice(&self, region: SubRegion) -> Option<f64> {
        self.aggregate(region).map(|a| a.dice.mean)
    }

    /// Mean over cases with a defined distance.
    pub fn mean_hausdorff(&self, region: SubRegion) -> Option<f64> {
        self.aggregate(region).and_then(|a| a.hausdorff95).map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for case in &self.cases {
            for r in &case.regions {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    case.case_id,
                    r.region.abbrev(),
                    r.dice,
                    fmt_distance(r.hausdorff),
                    r.dice_both_empty
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a JSON report and checks that its aggregates match its rows.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricsReport =
            serde_json::from_str(text).map_err(|e| Error::format("metrics report", e.to_string()))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Unsupported(format!(
                "report schema version {}",
                report.schema_version
            )));
        }
        if aggregate(&report.cases) != report.aggregates {
            return Err(Error::format("metrics report", "aggregates do not match per-case rows"));
        }
        Ok(report)
    }
}

/// Evaluates `(case_id, prediction, truth)` triples in parallel.
pub fn evaluate_cases(cases: &[(String, &LabelVolume, &LabelVolume)], cfg: &MetricsConfig) -> Result<Vec<CaseMetrics>> {
    cases
        .par_iter()
        .map(|(id, pred, truth)| {
            Ok(CaseMetrics {
                case_id: id.clone(),
                regions: evaluate_case(pred, truth, cfg)?,
            })
        })
        .collect()
}

/// One box-plot row: a configuration's quantiles of one metric on one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub configuration: String,
    pub region: SubRegion,
    pub metric: String,
    pub summary: Option<Summary>,
}

pub const QUANTILE_CSV_HEADER: &str = "configuration,region,metric,count,min,q1,median,q3,max,mean";

impl QuantileRow {
    pub fn csv_line(&self) -> String {
        match &self.summary {
            Some(s) => format!(
                "{},{},{},{},{},{},{},{},{},{}",
                self.configuration,
                self.region.abbrev(),
                self.metric,
                s.count,
                s.min,
                s.q1,
                s.median,
                s.q3,
                s.max,
                s.mean
            ),
            None => format!(
                "{},{},{},0,undefined,undefined,undefined,undefined,undefined,undefined",
                self.configuration,
                self.region.abbrev(),
                self.metric
            ),
        }
    }
}

/// Region × metric × configuration quantile table.
pub fn quantile_table(reports: &[MetricsReport]) -> Vec<QuantileRow> {
    let mut rows = Vec::with_capacity(reports.len() * 6);
    for region in SubRegion::ALL {
        for metric in ["dice", "hausdorff95"] {
            for report in reports {
                let values: Vec<f64> = report
                    .cases
                    .iter()
                    .filter_map(|c| c.region(region))
                    .filter_map(|r| if metric == "dice" { Some(r.dice) } else { r.hausdorff })
                    .collect();
                rows.push(QuantileRow {
                    configuration: report.name.clone(),
                    region,
                    metric: metric.into(),
                    summary: Summary::of(&values),
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn row(region: SubRegion, dice: f64, hd: Option<f64>) -> RegionMetrics {
        RegionMetrics {
            region,
            dice,
            dice_both_empty: false,
            hausdorff: hd,
        }
    }

    fn sample() -> MetricsReport {
        let cases = (1..=5)
            .map(|i| CaseMetrics {
                case_id: format!("c{i}"),
                regions: vec![
                    row(SubRegion::WholeTumor, i as f64 / 5.0, Some(i as f64)),
                    row(SubRegion::TumorCore, 0.5, None),
                    row(SubRegion::EnhancingTumor, 0.25, if i == 3 { Some(2.0) } else { None }),
                ],
            })
            .rev()
            .collect();
        MetricsReport::new("axial", MetricsConfig::default(), cases)
    }

    #[test]
    fn aggregates_use_nearest_rank_quartiles() {
        let r = sample();
        let wt = r.aggregate(SubRegion::WholeTumor).unwrap();
        let hd = wt.hausdorff95.unwrap();
        assert_eq!((hd.q1, hd.median, hd.q3), (2.0, 3.0, 4.0));
        let tc = r.aggregate(SubRegion::TumorCore).unwrap();
        assert!(tc.hausdorff95.is_none());
        assert_eq!(tc.hausdorff95_undefined, 5);
        assert_eq!(r.cases[0].case_id, "c1");
    }

    #[test]
    fn json_roundtrip_and_undefined_marker() {
        let r = sample();
        let json = r.to_json().unwrap();
        assert!(json.contains("\"hausdorff95\": \"undefined\""));
        assert_eq!(MetricsReport::from_json(&json).unwrap(), r);
        let tampered = json.replacen("\"dice\": 0.5", "\"dice\": 0.75", 1);
        assert!(MetricsReport::from_json(&tampered).is_err());
    }

    #[test]
    fn json_roundtrip_is_bit_exact_for_arbitrary_floats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cases = (0..37)
            .map(|i| CaseMetrics {
                case_id: format!("c{i:02}"),
                regions: SubRegion::ALL
                    .iter()
                    .map(|&r| row(r, rng.gen::<f64>(), Some(rng.gen::<f64>() * 40.0)))
                    .collect(),
            })
            .collect();
        let r = MetricsReport::new("random", MetricsConfig::default(), cases);
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_layout() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 15);
        assert_eq!(lines[1], "c1,WT,0.2,1,false");
        assert_eq!(lines[2], "c1,TC,0.5,undefined,false");
    }

    #[test]
    fn quantile_table_shape() {
        let reports = vec![
            sample(),
            MetricsReport::new("fused", MetricsConfig::default(), sample().cases),
        ];
        let table = quantile_table(&reports);
        assert_eq!(table.len(), 3 * 2 * 2);
        let single = MetricsReport::new("one", MetricsConfig::default(), sample().cases[..1].to_vec());
        for row in quantile_table(&[single]) {
            if let Some(s) = row.summary {
                assert!(s.min == s.q1 && s.q1 == s.median && s.median == s.q3 && s.q3 == s.max);
            }
        }
    }
}
