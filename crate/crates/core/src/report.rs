//! Run report: `report.json`, loss and mIoU curves, and probe panels.
//!
//! Curves are plain line charts drawn straight into RGB buffers, one chart per
//! series, without text. Each probe panel is a row of five tiles: the target
//! image, the teacher's prediction, the filtered pseudo-label (ignored pixels
//! black), the image the generator renders from the teacher's prediction, and
//! the student's prediction.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{ExperimentConfig, Phase};
use crate::error::{Error, Result};
use crate::labelops::{LabelMap, IGNORE_INDEX};
use crate::metrics::{self, Record, BASELINE, METRICS_VERSION};
use crate::params::BindMode;
use crate::pipeline::{
    load_phase_checkpoint, open_dataset, seg_from_checkpoint, translator_from_checkpoint, ContractReport, RunLayout,
    RunManifest,
};
use crate::synthdata::{write_png, ImageTensor, Split};
use crate::tensor::Tensor;
use crate::trainer::{filter_predictions, onehot_batch, predict};

const CHART_W: usize = 320;
const CHART_H: usize = 200;
const MARGIN: usize = 12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub num_classes: usize,
    pub baseline_source_miou: Option<f64>,
    pub baseline_miou: Option<f64>,
    pub post_warmup_miou: Option<f64>,
    pub post_joint_miou: Option<f64>,
    /// The last target evaluation row of the metrics file.
    pub final_miou: Option<f64>,
    pub final_phase: Option<String>,
    pub final_iteration: Option<usize>,
    pub per_class_iou: Vec<Option<f64>>,
    pub baseline_per_class_iou: Vec<Option<f64>>,
    pub delta_miou: Option<f64>,
    pub per_class_delta: Vec<Option<f64>>,
    pub probe_ce_initial: Option<f64>,
    pub probe_ce_final: Option<f64>,
    pub contracts: Option<ContractReport>,
    pub curves: Vec<PathBuf>,
    pub panels: Vec<PathBuf>,
}

fn per_class(r: &Record, c: usize) -> Vec<Option<f64>> {
    (0..c).map(|k| r.num(&format!("iou_{k}"))).collect()
}

fn last_target_eval<'a>(rows: &'a [Record], label: &str) -> Option<&'a Record> {
    rows.iter().rev().find(|r| r.phase() == label && r.get("eval_split") == Some("target"))
}

/// Writes the report for the run `cfg` describes and returns its contents.
pub fn write_report(cfg: &ExperimentConfig) -> Result<Report> {
    let layout = RunLayout::new(cfg);
    let rows = metrics::read(&layout.metrics())?;
    let c = cfg.dataset.scene.num_classes;
    let manifest = RunManifest::load(&layout.manifest())?;
    let out_dir = layout.report_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut rep = Report {
        metrics_version: METRICS_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        num_classes: c,
        contracts: manifest.and_then(|m| m.contracts),
        ..Default::default()
    };
    rep.baseline_source_miou =
        rows.iter().find(|r| r.phase() == BASELINE && r.get("eval_split") == Some("source")).and_then(|r| r.num("miou"));
    let baseline = last_target_eval(&rows, BASELINE);
    rep.baseline_miou = baseline.and_then(|r| r.num("miou"));
    rep.baseline_per_class_iou = baseline.map(|r| per_class(r, c)).unwrap_or_default();
    rep.post_warmup_miou = last_target_eval(&rows, "warmup").and_then(|r| r.num("miou"));
    rep.post_joint_miou = last_target_eval(&rows, "joint").and_then(|r| r.num("miou"));
    if let Some(last) = rows.iter().rev().find(|r| r.get("eval_split") == Some("target")) {
        rep.final_miou = last.num("miou");
        rep.final_phase = Some(last.phase().to_string());
        rep.final_iteration = Some(last.iteration());
        rep.per_class_iou = per_class(last, c);
    }
    if let (Some(f), Some(b)) = (rep.final_miou, rep.baseline_miou) {
        rep.delta_miou = Some(f - b);
    }
    if rep.baseline_per_class_iou.len() == rep.per_class_iou.len() {
        rep.per_class_delta = rep
            .per_class_iou
            .iter()
            .zip(&rep.baseline_per_class_iou)
            .map(|(f, b)| Some((*f)? - (*b)?))
            .collect();
    }
    let probe: Vec<f64> = rows.iter().filter(|r| r.phase() == "translation").filter_map(|r| r.num("probe_ce")).collect();
    rep.probe_ce_initial = probe.first().copied();
    rep.probe_ce_final = probe.last().copied();

    rep.curves = write_curves(&rows, &out_dir)?;
    rep.panels = write_panels(cfg, &layout, &out_dir)?;
    let path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&rep)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rep)
}

/// A white RGB canvas.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: vec![255; 3 * w * h] }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = 3 * (y as usize * self.w + x as usize);
            self.px[i..i + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_png(path, self.w as u32, self.h as u32, &self.px, image::ExtendedColorType::Rgb8)
    }
}

/// Line chart of `ys` against `xs` with a light frame and a zero line when in range.
fn chart(xs: &[f64], ys: &[f64]) -> Canvas {
    let mut cv = Canvas::new(CHART_W, CHART_H);
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    let (lo, hi) = (lo - pad, hi + pad);
    let (pw, ph) = ((CHART_W - 2 * MARGIN) as f64, (CHART_H - 2 * MARGIN) as f64);
    let map = |x: f64, y: f64| {
        let u = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
        (MARGIN as i64 + (u * pw).round() as i64, MARGIN as i64 + ((hi - y) / (hi - lo) * ph).round() as i64)
    };
    let frame = [200, 200, 200];
    let (l, t, r, b) = (MARGIN as i64, MARGIN as i64, (CHART_W - MARGIN) as i64, (CHART_H - MARGIN) as i64);
    cv.line((l, t), (r, t), frame);
    cv.line((r, t), (r, b), frame);
    cv.line((r, b), (l, b), frame);
    cv.line((l, b), (l, t), frame);
    if lo < 0.0 && hi > 0.0 {
        let (_, zy) = map(x0, 0.0);
        cv.line((l, zy), (r, zy), [230, 230, 230]);
    }
    let ink = [31, 119, 180];
    let pts: Vec<(i64, i64)> = xs.iter().zip(ys).map(|(&x, &y)| map(x, y)).collect();
    for w in pts.windows(2) {
        cv.line(w[0], w[1], ink);
    }
    cv
}

/// One chart per (phase, column) series with at least two points.
fn write_curves(rows: &[Record], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("curves");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut written = Vec::new();
    let mut series: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for phase in Phase::ALL {
        for col in ["loss_total", "probe_ce"] {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.phase() == phase.name())
                .filter_map(|r| Some((r.iteration() as f64, r.num(col)?)))
                .collect();
            series.push((format!("{}_{col}", phase.name()), pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()));
        }
    }
    let evals: Vec<f64> =
        rows.iter().filter(|r| r.get("eval_split") == Some("target")).filter_map(|r| r.num("miou")).collect();
    series.push(("target_miou".into(), (0..evals.len()).map(|i| i as f64).collect(), evals));
    for (name, xs, ys) in series {
        if xs.len() < 2 {
            continue;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{name}.png"));
        chart(&xs, &ys).save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Distinct colours for class ids; ignored pixels are black.
fn class_color(k: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [128, 128, 128],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    if k == IGNORE_INDEX {
        [0, 0, 0]
    } else {
        let base = PALETTE[k as usize % PALETTE.len()];
        let shade = (k as usize / PALETTE.len()) as u8;
        base.map(|v| v.wrapping_sub(shade.wrapping_mul(40)))
    }
}

fn label_rgb(l: &LabelMap) -> Vec<u8> {
    l.data().iter().flat_map(|&k| class_color(k)).collect()
}

/// Probe panels; written only once teacher, student and generator all exist.
fn write_panels(cfg: &ExperimentConfig, layout: &RunLayout, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("panels");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let have = |p: Phase| layout.checkpoint(p).exists();
    if !have(Phase::Pretrain) || !(have(Phase::Joint) || (have(Phase::Warmup) && have(Phase::Translation))) {
        return Ok(Vec::new());
    }
    let teacher = seg_from_checkpoint(&load_phase_checkpoint(cfg, Phase::Pretrain)?, "teacher")?;
    let (student, tr) = if have(Phase::Joint) {
        let ck = load_phase_checkpoint(cfg, Phase::Joint)?;
        (seg_from_checkpoint(&ck, "student")?, translator_from_checkpoint(&ck)?)
    } else {
        (
            seg_from_checkpoint(&load_phase_checkpoint(cfg, Phase::Warmup)?, "student")?,
            translator_from_checkpoint(&load_phase_checkpoint(cfg, Phase::Translation)?)?,
        )
    };
    let images: Vec<ImageTensor> =
        open_dataset(cfg)?.evaluation_set(Split::Probe)?.pairs.into_iter().map(|(im, _)| im).collect();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let c = cfg.dataset.scene.num_classes;
    let teacher_pred = predict(&teacher, &images)?;
    let filtered = filter_predictions(&teacher_pred, cfg.schedule.filter_keep_fraction, cfg.schedule.filter_scope)?;
    let student_pred = predict(&student, &images)?;
    let raw: Vec<&LabelMap> = teacher_pred.iter().map(|(l, _)| l).collect();
    let generated = {
        let tape = Tape::new();
        let pg = tr.gen.bind(&tape, BindMode::Frozen);
        let z = tape.constant(Tensor::zeros(&[images.len(), tr.gen.latent_dim()]));
        let img = tr.gen.translate(&pg, tape.constant(onehot_batch(&raw, c)?), z)?;
        (*img.value()).clone()
    };

    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let (h, w) = (image.height(), image.width());
        let tiles = [
            image.to_rgb8(),
            label_rgb(&teacher_pred[i].0),
            label_rgb(&filtered[i]),
            ImageTensor::from_batch(&generated, i).to_rgb8(),
            label_rgb(&student_pred[i].0),
        ];
        let mut px = vec![0u8; 3 * 5 * w * h];
        for (t, tile) in tiles.iter().enumerate() {
            for y in 0..h {
                let dst = 3 * (y * 5 * w + t * w);
                px[dst..dst + 3 * w].copy_from_slice(&tile[3 * y * w..3 * (y + 1) * w]);
            }
        }
        let path = dir.join(format!("probe_{i:02}.png"));
        write_png(&path, (5 * w) as u32, h as u32, &px, image::ExtendedColorType::Rgb8)?;
        written.push(path);
    }
    Ok(written)
}
