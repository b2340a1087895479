//! Acceptance suite. Prints one `criterion N PASS|FAIL: ...` line per
//! criterion and a summary line. A failing criterion makes the process exit
//! non-zero only when `REGEN_ACCEPTANCE_STRICT` is set, so that a workspace
//! test run still reaches the remaining suites. Criteria can be selected by
//! number: `cargo test -p regen-core --test acceptance -- 1 2 3`.
//!
//! Criteria 5 to 9 train the full default configuration several times
//! (about an hour on one core); their runs live under
//! `<target>/tmp/acceptance` and are recreated on every invocation.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regen::autograd::{Tape, Var};
use regen::config::{ExperimentConfig, Phase};
use regen::eval::{iou, ConfusionMatrix, UndefinedPolicy};
use regen::labelops::{filter_by_class_confidence, ConfidenceMap, LabelMap, IGNORE_INDEX};
use regen::losses::{
    cross_entropy_logits, feature_matching_from_outputs, feature_matching_loss, hinge_d_loss, hinge_g_loss, kld_loss,
    perceptual_loss, segmentation_loss, semantic_consistency_loss, translation_loss, LossWeights,
    SegmentationComponents, TranslationComponents, PERCEPTUAL_LAYER_WEIGHTS,
};
use regen::nets::{
    BnMode, DiscriminatorConfig, GeneratorConfig, MultiScalePatchDiscriminator, PerceptualExtractor, SegNet,
    SegNetConfig, TranslationGenerator, PERCEPTUAL_SEED,
};
use regen::params::BindMode;
use regen::pipeline::{self, RunLayout, RunManifest};
use regen::tensor::Tensor;

const H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const TRIALS: usize = 20;
const C: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Labels in `0..C` with roughly one pixel in ten ignored.
fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| if rng.random_bool(0.1) { IGNORE_INDEX } else { rng.random_range(0..C as u8) }).collect()
}

/// Patch logits kept at least 0.05 away from the hinge points at +-1.
fn hinge_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.5..2.5);
            if (v.abs() - 1.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
    let disc = MultiScalePatchDiscriminator::<f64>::new(DiscriminatorConfig::default(), 11);
    let teacher = SegNet::<f64>::new(SegNetConfig::default(), 12);
    let gen = TranslationGenerator::<f64>::new(GeneratorConfig::default(), 13);
    let latent = gen.latent_dim();
    let weights = LossWeights::default();
    let mut checks: BTreeMap<&str, common::GradCheck> = BTreeMap::new();
    let mut record = |name: &'static str, g: common::GradCheck| checks.entry(name).or_default().merge(g);

    for t in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t as u64);
        let img = |rng: &mut ChaCha8Rng| uniform(rng, &[1, 3, 8, 8], -1.0, 1.0);

        let y = labels(&mut rng, 64);
        let logits = uniform(&mut rng, &[1, C, 8, 8], -2.0, 2.0);
        record("cross_entropy_logits", common::gradcheck(&[logits], H, GRAD_TOL, |_, v| cross_entropy_logits(v[0], &y).unwrap().loss));

        let probs = uniform(&mut rng, &[1, C, 8, 8], 0.05, 1.0);
        record(
            "semantic_consistency_loss",
            common::gradcheck(&[probs], H, GRAD_TOL, |_, v| semantic_consistency_loss(v[0], &y).unwrap().loss),
        );

        let (a, b) = (img(&mut rng), img(&mut rng));
        record(
            "perceptual_loss",
            common::gradcheck(&[a, b], H, GRAD_TOL, |tape, v| {
                perceptual_loss(&phi, &phi.bind(tape), v[0], v[1], &PERCEPTUAL_LAYER_WEIGHTS).unwrap()
            }),
        );

        let (real, fake) = (img(&mut rng), img(&mut rng));
        record(
            "feature_matching_loss",
            common::gradcheck(&[fake.clone()], H, GRAD_TOL, |tape, v| {
                let p = disc.bind(tape, BindMode::Frozen);
                feature_matching_loss(&disc, &p, tape.constant(real.clone()), v[0]).unwrap()
            }),
        );

        let mu = uniform(&mut rng, &[2, 96], -1.5, 1.5);
        let logvar = uniform(&mut rng, &[2, 96], -2.0, 1.0);
        record("kld_loss", common::gradcheck(&[mu, logvar], H, GRAD_TOL, |_, v| kld_loss(v[0], v[1]).unwrap()));

        let d = [
            hinge_logits(&mut rng, &[1, 1, 8, 8]),
            hinge_logits(&mut rng, &[1, 1, 4, 4]),
            hinge_logits(&mut rng, &[1, 1, 8, 8]),
            hinge_logits(&mut rng, &[1, 1, 4, 4]),
        ];
        record("hinge_d_loss", common::gradcheck(&d, H, GRAD_TOL, |_, v| hinge_d_loss(&v[..2], &v[2..])));
        record("hinge_g_loss", common::gradcheck(&d[2..], H, GRAD_TOL, |_, v| hinge_g_loss(v)));

        // Translation objective as a function of the generated image and the
        // latent posterior, with every term switched on.
        let x_real = img(&mut rng);
        let x_gen = img(&mut rng);
        let mu = uniform(&mut rng, &[1, latent], -1.0, 1.0);
        let logvar = uniform(&mut rng, &[1, latent], -1.0, 0.5);
        let yt = labels(&mut rng, 64);
        let tw = weights.translation();
        record(
            "translation_loss",
            common::gradcheck(&[x_gen, mu, logvar], H, GRAD_TOL, |tape, v| {
                let pt = teacher.bind(tape, BindMode::Frozen);
                let pd = disc.bind(tape, BindMode::Frozen);
                let real = tape.constant(x_real.clone());
                let probs = teacher.forward(&pt, v[0], BnMode::Eval).unwrap().logits.softmax_channels();
                let r = disc.discriminate(&pd, real).unwrap();
                let f = disc.discriminate(&pd, v[0]).unwrap();
                let adv: Vec<Var<'_, f64>> = f.iter().map(|s| s.logits).collect();
                let terms = TranslationComponents {
                    perceptual: Some(perceptual_loss(&phi, &phi.bind(tape), v[0], real, &PERCEPTUAL_LAYER_WEIGHTS).unwrap()),
                    semantic: Some(semantic_consistency_loss(probs, &yt).unwrap().loss),
                    kld: Some(kld_loss(v[1], v[2]).unwrap()),
                    feature_matching: Some(feature_matching_from_outputs(&r, &f).unwrap()),
                    adversarial: Some(hinge_g_loss(&adv)),
                };
                translation_loss(&terms, &tw).unwrap().total
            }),
        );

        // Segmentation objective as a function of the student's logits on the
        // target batch and on the generated batch; the soft prediction is
        // rendered by the frozen generator for the perceptual and
        // feature-matching terms.
        let lt = uniform(&mut rng, &[1, C, 8, 8], -2.0, 2.0);
        let lg = uniform(&mut rng, &[1, C, 8, 8], -2.0, 2.0);
        let x_tgt = img(&mut rng);
        let y_filtered = labels(&mut rng, 64);
        let y_gen = labels(&mut rng, 64);
        let sw = weights.segmentation();
        record(
            "segmentation_loss",
            common::gradcheck(&[lt, lg], H, GRAD_TOL, |tape, v| {
                let pg = gen.bind(tape, BindMode::Frozen);
                let pd = disc.bind(tape, BindMode::Frozen);
                let real = tape.constant(x_tgt.clone());
                let z = tape.constant(Tensor::zeros(&[1, latent]));
                let rendered = gen.translate(&pg, v[0].softmax_channels(), z).unwrap();
                let lat = gen.encode_latent(&pg, real).unwrap();
                let terms = SegmentationComponents {
                    target: Some(cross_entropy_logits(v[0], &y_filtered).unwrap().loss),
                    generated: Some(cross_entropy_logits(v[1], &y_gen).unwrap().loss),
                    perceptual: Some(perceptual_loss(&phi, &phi.bind(tape), rendered, real, &PERCEPTUAL_LAYER_WEIGHTS).unwrap()),
                    feature_matching: Some(feature_matching_loss(&disc, &pd, real, rendered).unwrap()),
                    kld: Some(kld_loss(lat.mu, lat.logvar).unwrap()),
                };
                segmentation_loss(&terms, &sw).unwrap().total
            }),
        );
    }
    let seconds = started.elapsed().as_secs_f64();
    let failing: Vec<String> = checks
        .iter()
        .filter(|(_, g)| !g.passes(GRAD_TOL))
        .map(|(n, g)| format!("{n} (worst {:.2e}, {} kink violations)", g.worst, g.kink_violations))
        .collect();
    let worst = checks.values().map(|g| g.worst).fold(0.0, f64::max);
    let raw = checks.values().map(|g| g.raw_worst).fold(0.0, f64::max);
    let kinks: usize = checks.values().map(|g| g.kinks).sum();
    let refined = checks.values().map(|g| g.refined_worst).fold(0.0, f64::max);
    let elements: usize = checks.values().map(|g| g.elements).sum();
    let pass = failing.is_empty() && seconds < 120.0;
    let detail = if failing.is_empty() {
        format!(
            "{} losses x {TRIALS} trials, worst relative error {worst:.2e} over {elements} elements; \
             {kinks} elements straddle a kink at h (raw error up to {raw:.2e}) and match within {refined:.2e} at a smooth halved step; {seconds:.1}s",
            checks.len()
        )
    } else {
        format!("over tolerance: {}; {seconds:.1}s", failing.join(", "))
    };
    Outcome::new(pass, detail)
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let tape = Tape::<f64>::new();
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let y: Vec<u8> = (0..64).map(|_| rng.random_range(0..C as u8)).collect();
    let uniform_ce = semantic_consistency_loss(tape.constant(Tensor::full(&[1, C, 8, 8], 0.2)), &y).unwrap().loss.item();
    let flat_logits = cross_entropy_logits(tape.constant(Tensor::zeros(&[1, C, 8, 8])), &y).unwrap().loss.item();
    let ln_c = (C as f64).ln();
    let ok = (uniform_ce - ln_c).abs() <= 1e-6 && (flat_logits - ln_c).abs() <= 1e-6;
    pass &= ok;
    notes.push(format!("uniform CE {uniform_ce:.9} (ln 5 = {ln_c:.9})"));

    let one = tape.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
    let zero = tape.constant(Tensor::from_vec(&[1, 1], vec![0.0]));
    let k = kld_loss(one, zero).unwrap().item();
    pass &= (k - 0.5).abs() <= 1e-9;
    notes.push(format!("kld([1],[0]) = {k}"));

    let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
    let disc = MultiScalePatchDiscriminator::<f64>::new(DiscriminatorConfig::default(), 3);
    let (pp, pd) = (phi.bind(&tape), disc.bind(&tape, BindMode::Frozen));
    let mut identical_zero = true;
    for _ in 0..10 {
        let x = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
        let (a, b) = (tape.constant(x.clone()), tape.constant(x));
        identical_zero &= perceptual_loss(&phi, &pp, a, b, &PERCEPTUAL_LAYER_WEIGHTS).unwrap().item() == 0.0;
        identical_zero &= feature_matching_loss(&disc, &pd, a, b).unwrap().item() == 0.0;
    }
    pass &= identical_zero;
    notes.push(format!("perceptual/feature matching on identical inputs exactly 0: {identical_zero}"));
    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fractions = [(10, 0.10), (20, 0.20), (33, 0.33), (50, 0.50), (75, 0.75), (100, 1.0)];
    let (mut count_failures, mut oracle_failures, mut monotone_failures) = (0, 0, 0);
    for instance in 0..100 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let c = rng.random_range(1..=8usize);
        let data: Vec<u8> =
            (0..h * w).map(|_| if rng.random_bool(0.15) { IGNORE_INDEX } else { rng.random_range(0..c as u8) }).collect();
        // Every fourth instance has coarse confidences, so ties occur.
        let conf: Vec<f32> = (0..h * w)
            .map(|_| if instance % 4 == 0 { rng.random_range(0..4) as f32 / 4.0 } else { rng.random::<f32>() })
            .collect();
        let lm = LabelMap::new(h, w, c, data.clone()).unwrap();
        let cm = ConfidenceMap::new(h, w, conf.clone()).unwrap();

        let mut previous: Option<Vec<u8>> = None;
        for &(percent, f) in &fractions {
            let got = filter_by_class_confidence(&lm, &cm, f).unwrap();
            let got = got.data();
            if percent == 33 {
                for k in 0..c as u8 {
                    let n = data.iter().filter(|&&v| v == k).count();
                    let kept = got.iter().filter(|&&v| v == k).count();
                    if kept != (33 * n).div_ceil(100) {
                        count_failures += 1;
                    }
                }
            }
            if got != common::filter_oracle(&data, &conf, c, percent).as_slice() {
                oracle_failures += 1;
            }
            if let Some(prev) = &previous {
                let subset = prev.iter().zip(got).all(|(&p, &g)| p == IGNORE_INDEX || p == g);
                if !subset {
                    monotone_failures += 1;
                }
            }
            previous = Some(got.to_vec());
        }
    }
    let pass = count_failures == 0 && oracle_failures == 0 && monotone_failures == 0;
    Outcome::new(
        pass,
        format!(
            "100 instances: {count_failures} class counts off ceil(0.33 n), {oracle_failures} maps differ from the sort oracle, \
             {monotone_failures} monotonicity violations"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pairs = Vec::new();
    let mut mismatches = 0;
    let mut pooled = ConfusionMatrix::new(C);
    for _ in 0..50 {
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..C as u8)).collect();
        let gt = labels(&mut rng, 64);
        let mut cm = ConfusionMatrix::new(C);
        let (p, g) = (LabelMap::new(8, 8, C, pred.clone()).unwrap(), LabelMap::new(8, 8, C, gt.clone()).unwrap());
        cm.accumulate(&p, &g).unwrap();
        pooled.accumulate(&p, &g).unwrap();
        let module = iou(&cm, None, UndefinedPolicy::Exclude).unwrap().miou;
        let pair = vec![(pred, gt)];
        if module != common::miou_oracle(&pair, C) {
            mismatches += 1;
        }
        pairs.extend(pair);
    }
    let pooled_module = iou(&pooled, None, UndefinedPolicy::Exclude).unwrap().miou;
    let pooled_oracle = common::miou_oracle(&pairs, C);
    let hand = iou(&ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap(), None, UndefinedPolicy::Exclude)
        .unwrap()
        .miou;
    let pass = mismatches == 0 && pooled_module == pooled_oracle && (hand - 0.5357).abs() <= 1e-4;
    Outcome::new(
        pass,
        format!(
            "{mismatches}/50 per-pair mismatches, pooled {pooled_module} vs oracle {pooled_oracle}, hand case mIoU {hand:.6}"
        ),
    )
}

// ------------------------------------------------------------- criteria 5-9

struct Run {
    cfg: ExperimentConfig,
    seconds: f64,
    report: regen::report::Report,
}

fn full_config(root: &Path, name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.output_dir = root.join(name);
    cfg
}

fn run(cfg: ExperimentConfig) -> regen::Result<Run> {
    let started = Instant::now();
    let (_, report) = pipeline::run_all(&cfg, false)?;
    let seconds = started.elapsed().as_secs_f64();
    eprintln!("acceptance: {} finished in {seconds:.0}s, final mIoU {:?}", cfg.output_dir.display(), report.final_miou);
    Ok(Run { cfg, seconds, report })
}

/// The same seed with the segmentation-side perceptual term switched off.
/// Pretraining, warm-up and translation are taken over from `full`.
fn ablation(full: &Run, root: &Path, name: &str) -> regen::Result<Run> {
    let mut cfg = full.cfg.with_value("loss.enabled.seg_perceptual", serde_json::Value::Bool(false))?;
    cfg.output_dir = root.join(name);
    cfg.dataset_dir = Some(full.cfg.dataset_dir());
    pipeline::adopt_phases(&full.cfg, &cfg)?;
    run(cfg)
}

fn phase_seconds(cfg: &ExperimentConfig, phase: Phase) -> Option<f64> {
    RunManifest::load(&RunLayout::new(cfg).manifest()).ok().flatten()?.phases.get(&phase).map(|r| r.seconds)
}

fn criterion_5(a: &Run) -> Outcome {
    let (Some(init), Some(fin)) = (a.report.probe_ce_initial, a.report.probe_ce_final) else {
        return Outcome::new(false, "probe CE missing from the report");
    };
    let secs = phase_seconds(&a.cfg, Phase::Translation).unwrap_or(f64::INFINITY);
    let pass = fin <= 0.7 * init && secs <= 600.0;
    Outcome::new(pass, format!("probe CE {init:.4} -> {fin:.4} (ratio {:.3}), translation phase {secs:.0}s", fin / init))
}

fn criterion_6(a: &Run) -> Outcome {
    let r = &a.report;
    let (Some(base), Some(warm), Some(joint)) = (r.baseline_miou, r.post_warmup_miou, r.post_joint_miou) else {
        return Outcome::new(false, "report lacks baseline, post-warm-up or post-joint mIoU");
    };
    let delta = joint - base;
    let pass = delta >= 0.05 && a.seconds <= 1800.0;
    Outcome::new(
        pass,
        format!("baseline {base:.4}, post-warm-up {warm:.4}, post-joint {joint:.4}, delta {delta:+.4}, pipeline {:.0}s", a.seconds),
    )
}

fn criterion_7(pairs: &[(u64, f64, f64)]) -> Outcome {
    let wins = pairs.iter().filter(|(_, full, no_lp)| full >= no_lp).count();
    let detail = pairs
        .iter()
        .map(|(s, full, no_lp)| format!("seed {s}: full {full:.4} vs no L_p {no_lp:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(wins >= 2, format!("full >= ablation in {wins}/3 ({detail})"))
}

/// Checks the recorded contracts and recomputes the digests from the
/// checkpoints on disk.
fn contract_holds(cfg: &ExperimentConfig) -> Result<(), String> {
    let layout = RunLayout::new(cfg);
    let manifest = RunManifest::load(&layout.manifest()).map_err(|e| e.to_string())?.ok_or("no manifest")?;
    let contracts = manifest.contracts.as_ref().ok_or("no contract record")?;
    if !contracts.holds() {
        return Err("recorded contract violated".into());
    }
    let load = |phase, prefix| {
        regen::checkpoint::Checkpoint::load(&layout.checkpoint(phase))
            .and_then(|ck| pipeline::seg_from_checkpoint(&ck, prefix))
            .map_err(|e| e.to_string())
    };
    let teacher = load(Phase::Pretrain, "teacher")?;
    let warm = load(Phase::Warmup, "student")?;
    let student = load(Phase::Joint, "student")?;
    let recorded = manifest.phases.get(&Phase::Joint).and_then(|r| r.hashes.get("teacher")).ok_or("no teacher hash")?;
    if &teacher.params().digest_all() != recorded {
        return Err("teacher digest at joint end differs from the pretrained teacher".into());
    }
    let frozen = teacher.frozen_digest();
    if warm.frozen_digest() != frozen || student.frozen_digest() != frozen {
        return Err("frozen student layers differ from the teacher's".into());
    }
    Ok(())
}

fn criterion_8(runs: &[&Run]) -> Outcome {
    let bad: Vec<String> = runs
        .iter()
        .filter_map(|r| contract_holds(&r.cfg).err().map(|e| format!("{}: {e}", r.cfg.output_dir.display())))
        .collect();
    Outcome::new(bad.is_empty(), if bad.is_empty() { format!("{} runs checked", runs.len()) } else { bad.join("; ") })
}

fn criterion_9(a: &Run, b: &Run) -> Outcome {
    let read = |r: &Run| fs::read(RunLayout::new(&r.cfg).metrics()).unwrap_or_default();
    let (x, y) = (read(a), read(b));
    let pass = !x.is_empty() && x == y;
    Outcome::new(pass, format!("metrics.csv {} bytes vs {} bytes, identical: {}", x.len(), y.len(), x == y))
}

fn heavy(root: &Path, selected: &dyn Fn(usize) -> bool, out: &mut Vec<(usize, Outcome)>) -> regen::Result<()> {
    let a = run(full_config(root, "seed0_a", 0))?;
    for n in [5, 6] {
        if selected(n) {
            let o = if n == 5 { criterion_5(&a) } else { criterion_6(&a) };
            report_line(n, &o);
            out.push((n, o));
        }
    }
    let mut full_runs = vec![];
    let b = if selected(9) || selected(8) { Some(run(full_config(root, "seed0_b", 0))?) } else { None };
    if let Some(b) = &b {
        if selected(9) {
            let o = criterion_9(&a, b);
            report_line(9, &o);
            out.push((9, o));
        }
    }
    let mut others = Vec::new();
    if selected(7) {
        let mut pairs = Vec::new();
        let abl = ablation(&a, root, "seed0_no_lp")?;
        pairs.push((0, a.report.final_miou.unwrap_or(f64::NAN), abl.report.final_miou.unwrap_or(f64::NAN)));
        others.push(abl);
        for seed in [1, 2] {
            let full = run(full_config(root, &format!("seed{seed}"), seed))?;
            let abl = ablation(&full, root, &format!("seed{seed}_no_lp"))?;
            pairs.push((seed, full.report.final_miou.unwrap_or(f64::NAN), abl.report.final_miou.unwrap_or(f64::NAN)));
            others.push(full);
            others.push(abl);
        }
        let o = criterion_7(&pairs);
        report_line(7, &o);
        out.push((7, o));
    }
    if selected(8) {
        full_runs.push(&a);
        full_runs.extend(b.as_ref());
        full_runs.extend(others.iter());
        let o = criterion_8(&full_runs);
        report_line(8, &o);
        out.push((8, o));
    }
    Ok(())
}

fn report_line(n: usize, o: &Outcome) {
    println!("criterion {n} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let light: [(usize, fn() -> Outcome); 4] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4)];
    for (n, f) in light {
        if selected(n) {
            let o = f();
            report_line(n, &o);
            results.push((n, o));
        }
    }
    if (5..=9).any(selected) {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        if root.exists() {
            fs::remove_dir_all(&root).expect("clear acceptance directory");
        }
        fs::create_dir_all(&root).expect("create acceptance directory");
        if let Err(e) = heavy(&root, &selected, &mut results) {
            let missing: Vec<usize> =
                (5..=9).filter(|&n| selected(n) && !results.iter().any(|(m, _)| *m == n)).collect();
            for n in missing {
                let o = Outcome::new(false, format!("pipeline error: {e}"));
                report_line(n, &o);
                results.push((n, o));
            }
        }
    }
    results.sort_by_key(|(n, _)| *n);
    let failed: Vec<String> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.to_string()).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
    );
    if failed.is_empty() || std::env::var_os("REGEN_ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
