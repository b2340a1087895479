//! The run's metrics CSV.
//!
//! Columns are fixed for a given class count: `phase`, `iteration`, `lr`, the
//! scalar columns in [`SCALAR_COLUMNS`], then `eval_split`, `miou`,
//! `pixel_accuracy` and one `iou_<c>` column per class. Cells that do not
//! apply to a row are left empty. Rows are kept grouped by phase in execution
//! order, so re-running one phase replaces exactly its own rows.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Phase;
use crate::error::{Error, Result};
use crate::eval::IoUReport;

pub const METRICS_VERSION: u32 = 1;

pub const SCALAR_COLUMNS: [&str; 15] = [
    "loss_total",
    "ce",
    "t_perceptual",
    "t_semantic",
    "t_kld",
    "t_feature_matching",
    "t_adversarial",
    "d_hinge",
    "s_target",
    "s_generated",
    "s_perceptual",
    "s_feature_matching",
    "s_kld",
    "kept_fraction",
    "probe_ce",
];

/// Row label used for the source-only model's evaluation.
pub const BASELINE: &str = "baseline";

pub fn header(num_classes: usize) -> String {
    let mut cols: Vec<String> = ["phase", "iteration", "lr"].iter().map(|s| s.to_string()).collect();
    cols.extend(SCALAR_COLUMNS.iter().map(|s| s.to_string()));
    cols.extend(["eval_split", "miou", "pixel_accuracy"].iter().map(|s| s.to_string()));
    cols.extend((0..num_classes).map(|c| format!("iou_{c}")));
    cols.join(",")
}

/// Phase that owns rows labelled `label`.
pub fn phase_of(label: &str) -> Option<Phase> {
    match label {
        BASELINE => Some(Phase::Pretrain),
        other => Phase::ALL.into_iter().find(|p| p.name() == other),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Row {
    pub phase: String,
    pub iteration: usize,
    pub lr: Option<f64>,
    pub scalars: Vec<(&'static str, f64)>,
    pub eval: Option<(String, IoUReport)>,
}

impl Row {
    pub fn new(phase: &str, iteration: usize) -> Self {
        Row { phase: phase.to_string(), iteration, ..Default::default() }
    }

    pub fn lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    pub fn set(mut self, column: &'static str, value: f64) -> Self {
        assert!(SCALAR_COLUMNS.contains(&column), "unknown metrics column {column}");
        self.scalars.push((column, value));
        self
    }

    pub fn set_opt(self, column: &'static str, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.set(column, v),
            None => self,
        }
    }

    pub fn eval(mut self, split: &str, report: IoUReport) -> Self {
        self.eval = Some((split.to_string(), report));
        self
    }

    fn to_line(&self, num_classes: usize) -> String {
        let mut cells = vec![self.phase.clone(), self.iteration.to_string(), fmt_opt(self.lr)];
        for col in SCALAR_COLUMNS {
            cells.push(fmt_opt(self.scalars.iter().rev().find(|(c, _)| *c == col).map(|&(_, v)| v)));
        }
        match &self.eval {
            Some((split, r)) => {
                cells.push(split.clone());
                cells.push(r.miou.to_string());
                cells.push(r.pixel_accuracy.to_string());
                cells.extend((0..num_classes).map(|c| fmt_opt(r.per_class.get(c).copied().flatten())));
            }
            None => cells.extend(std::iter::repeat_n(String::new(), 3 + num_classes)),
        }
        cells.join(",")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends rows for one phase, replacing whatever rows that phase had before.
pub struct MetricsLog {
    path: PathBuf,
    num_classes: usize,
    kept: Vec<(Phase, String)>,
    fresh: Vec<String>,
    phase: Phase,
}

impl MetricsLog {
    pub fn begin(path: &Path, num_classes: usize, phase: Phase) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = text.lines();
            if lines.next() != Some(header(num_classes).as_str()) {
                return Err(Error::format(path, "metrics header does not match this configuration"));
            }
            for line in lines.filter(|l| !l.is_empty()) {
                let label = line.split(',').next().unwrap_or_default();
                let owner = phase_of(label).ok_or_else(|| Error::format(path, format!("unknown phase label {label:?}")))?;
                if owner != phase {
                    kept.push((owner, line.to_string()));
                }
            }
        }
        Ok(MetricsLog { path: path.to_path_buf(), num_classes, kept, fresh: Vec::new(), phase })
    }

    pub fn push(&mut self, row: Row) {
        debug_assert_eq!(phase_of(&row.phase), Some(self.phase), "row label {} outside phase", row.phase);
        self.fresh.push(row.to_line(self.num_classes));
    }

    /// Appends an already formatted row, e.g. one copied from another run.
    pub fn push_line(&mut self, line: &str) {
        self.fresh.push(line.to_string());
    }

    /// Rewrites the file with all rows grouped by phase.
    pub fn flush(&self) -> Result<()> {
        let mut out = header(self.num_classes);
        out.push('\n');
        for p in Phase::ALL {
            for (_, line) in self.kept.iter().filter(|(q, _)| *q == p) {
                out.push_str(line);
                out.push('\n');
            }
            if p == self.phase {
                for line in &self.fresh {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&self.path, out).map_err(|e| Error::io(&self.path, e))
    }
}

/// The raw rows owned by `phase` in the file at `path`.
pub fn phase_lines(path: &Path, phase: Phase) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| phase_of(l.split(',').next().unwrap_or_default()) == Some(phase))
        .map(str::to_string)
        .collect())
}

/// A parsed metrics row, keyed by column name.
#[derive(Clone, Debug)]
pub struct Record {
    cells: HashMap<String, String>,
}

impl Record {
    pub fn get(&self, col: &str) -> Option<&str> {
        self.cells.get(col).map(|s| s.as_str()).filter(|s| !s.is_empty())
    }

    pub fn num(&self, col: &str) -> Option<f64> {
        self.get(col).and_then(|s| s.parse().ok())
    }

    pub fn phase(&self) -> &str {
        self.get("phase").unwrap_or_default()
    }

    pub fn iteration(&self) -> usize {
        self.num("iteration").unwrap_or(0.0) as usize
    }
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let cols: Vec<&str> = lines.next().ok_or_else(|| Error::format(path, "empty metrics file"))?.split(',').collect();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != cols.len() {
                return Err(Error::format(path, format!("row has {} cells, header has {}", cells.len(), cols.len())));
            }
            Ok(Record { cells: cols.iter().zip(cells).map(|(k, v)| (k.to_string(), v.to_string())).collect() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(miou: f64) -> IoUReport {
        IoUReport { per_class: vec![Some(miou), None], subset: vec![0, 1], miou, pixel_accuracy: 0.5, images: 1 }
    }

    #[test]
    fn rerunning_a_phase_replaces_only_its_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut log = MetricsLog::begin(&path, 2, Phase::Pretrain).unwrap();
        log.push(Row::new("pretrain", 1).lr(0.1).set("ce", 1.5));
        log.push(Row::new(BASELINE, 0).eval("target", report(0.25)));
        log.flush().unwrap();
        let mut log = MetricsLog::begin(&path, 2, Phase::Translation).unwrap();
        log.push(Row::new("translation", 0).set("probe_ce", 2.0));
        log.flush().unwrap();
        let mut log = MetricsLog::begin(&path, 2, Phase::Warmup).unwrap();
        log.push(Row::new("warmup", 1).eval("target", report(0.5)));
        log.flush().unwrap();
        let mut log = MetricsLog::begin(&path, 2, Phase::Pretrain).unwrap();
        log.push(Row::new("pretrain", 1).lr(0.1).set("ce", 1.25));
        log.flush().unwrap();

        let rows = read(&path).unwrap();
        let phases: Vec<&str> = rows.iter().map(|r| r.phase()).collect();
        assert_eq!(phases, ["pretrain", "warmup", "translation"]);
        assert_eq!(rows[0].num("ce"), Some(1.25));
        assert_eq!(rows[1].num("miou"), Some(0.5));
        assert_eq!(rows[1].get("iou_1"), None);
        assert_eq!(rows[2].num("probe_ce"), Some(2.0));
    }

    #[test]
    fn header_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        MetricsLog::begin(&path, 2, Phase::Pretrain).unwrap().flush().unwrap();
        assert!(MetricsLog::begin(&path, 3, Phase::Pretrain).is_err());
    }
}
