//! Evaluation reports and plot-ready curve data.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Region;

pub const CSV_HEADER: &str = "case_id,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt";

/// Per-case metrics; arrays are in (ET, TC, WT) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation, accumulated in input order.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dice: [MeanStd; 3],
    pub hd95: [MeanStd; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    /// Free-form run metadata (seeds, config hash, metric conventions).
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Metric conventions recorded with every report.
pub fn metric_conventions() -> serde_json::Value {
    serde_json::json!({
        "threshold": 0.5,
        "dice_both_empty": 1.0,
        "dice_one_empty": 0.0,
        "hd95_both_empty": 0.0,
        "hd95_one_empty": "grid diagonal length (spacing-scaled)",
        "hd95_surface": "mask voxels with a 6-connected background neighbour; outside the grid is background",
        "hd95_percentile": "95th, linear interpolation over the union of both directed distance sets",
        "std": "population (divide by N)",
    })
}

impl EvalReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Self {
        let mut metadata = serde_json::Map::new();
        metadata.insert("conventions".into(), metric_conventions());
        EvalReport { cases, metadata }
    }

    pub fn summary(&self) -> Summary {
        let col = |f: &dyn Fn(&CaseMetrics) -> f64| {
            mean_std(&self.cases.iter().map(f).collect::<Vec<_>>())
        };
        Summary {
            dice: std::array::from_fn(|r| col(&|c| c.dice[r])),
            hd95: std::array::from_fn(|r| col(&|c| c.hd95[r])),
        }
    }

    /// One row per case followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let row = |s: &mut String, id: &str, v: [f64; 6]| {
            let _ = writeln!(
                s,
                "{id},{},{},{},{},{},{}",
                v[0], v[1], v[2], v[3], v[4], v[5]
            );
        };
        for c in &self.cases {
            row(
                &mut s,
                &c.case_id,
                [
                    c.dice[0], c.dice[1], c.dice[2], c.hd95[0], c.hd95[1], c.hd95[2],
                ],
            );
        }
        let sm = self.summary();
        let pick = |f: fn(&MeanStd) -> f64| -> [f64; 6] {
            std::array::from_fn(|i| {
                if i < 3 {
                    f(&sm.dice[i])
                } else {
                    f(&sm.hd95[i - 3])
                }
            })
        };
        row(&mut s, "mean", pick(|m| m.mean));
        row(&mut s, "std", pick(|m| m.std));
        s
    }

    /// Parses the per-case rows of [`EvalReport::to_csv`] output; summary
    /// rows are recomputed rather than read.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format("report CSV header mismatch".into()));
        }
        let mut cases = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(Error::Format(format!(
                    "report row {line:?} has {} cells",
                    cells.len()
                )));
            }
            if matches!(cells[0], "mean" | "std") {
                continue;
            }
            let mut v = [0.0; 6];
            for (slot, cell) in v.iter_mut().zip(&cells[1..]) {
                *slot = cell
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number {cell:?} in report")))?;
            }
            cases.push(CaseMetrics {
                case_id: cells[0].to_string(),
                dice: [v[0], v[1], v[2]],
                hd95: [v[3], v[4], v[5]],
            });
        }
        Ok(EvalReport::new(cases))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            cases: &'a [CaseMetrics],
            summary: Summary,
            metadata: &'a serde_json::Map<String, serde_json::Value>,
        }
        Ok(serde_json::to_string_pretty(&View {
            cases: &self.cases,
            summary: self.summary(),
            metadata: &self.metadata,
        })?)
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}

/// Dice values of one region sorted ascending, paired with their rank.
pub fn sorted_dice(report: &EvalReport, region: Region) -> Vec<(usize, f64)> {
    let mut v: Vec<f64> = report
        .cases
        .iter()
        .map(|c| c.dice[region.index()])
        .collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().enumerate().collect()
}

/// Empirical CDF points `(value, fraction of cases <= value)`, one per
/// distinct value.
pub fn dice_cdf(report: &EvalReport, region: Region) -> Vec<(f64, f64)> {
    let sorted = sorted_dice(report, region);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, (_, v)) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// CSV text for one region: sorted curve then CDF, in two sections keyed by
/// the `kind` column.
pub fn curve_csv(report: &EvalReport, region: Region) -> String {
    let mut s = String::from("kind,x,y\n");
    for (rank, v) in sorted_dice(report, region) {
        let _ = writeln!(s, "sorted,{rank},{v}");
    }
    for (v, f) in dice_cdf(report, region) {
        let _ = writeln!(s, "cdf,{v},{f}");
    }
    s
}

/// Writes `curves_<region>.csv` for ET, TC and WT.
pub fn report_curves(report: &EvalReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if report.cases.is_empty() {
        return Err(Error::Data(
            "cannot draw curves from an empty report".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Region::ALL
        .iter()
        .map(|&r| {
            let path = dir.join(format!("curves_{}.csv", r.name()));
            std::fs::write(&path, curve_csv(report, r)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
