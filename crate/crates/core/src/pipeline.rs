//! Phases on disk. Every phase reads its prerequisites' outputs, then writes
//! its metrics rows, its checkpoint and a manifest entry under the run
//! directory. A phase counts as complete once its checkpoint (or, for the
//! data phase, the dataset manifest) exists.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Phase};
use crate::error::{Error, Result};
use crate::eval::IoUReport;
use crate::metrics::{self, MetricsLog, Row, BASELINE, METRICS_VERSION};
use crate::nets::{
    DiscriminatorConfig, GeneratorConfig, MultiScalePatchDiscriminator, PerceptualExtractor, SegNet, SegNetConfig,
    TranslationGenerator, PERCEPTUAL_SEED,
};
use crate::report;
use crate::synthdata::{build_dataset, sample_seed, Dataset, ImageTensor, Split, MANIFEST_FILE};
use crate::trainer::{
    predict, pretrain_source, semantic_probe, train_joint, train_translation, warmup_selftrain, Evaluator,
    TeacherLabels, TranslationContext, Translator,
};

pub const RUN_MANIFEST_VERSION: u32 = 1;

/// What to do when a phase's output already exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnComplete {
    /// Fail with [`Error::AlreadyComplete`].
    Refuse,
    /// Keep it if it was produced by the same settings, fail otherwise.
    Resume,
    /// Redo the phase.
    Overwrite,
}

impl OnComplete {
    pub fn from_force(force: bool) -> Self {
        if force {
            OnComplete::Overwrite
        } else {
            OnComplete::Refuse
        }
    }
}

/// File locations of one run.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunLayout { run_dir: cfg.run_dir(), data_dir: cfg.dataset_dir() }
    }

    pub fn config(&self) -> PathBuf {
        self.run_dir.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.run_dir.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.run_dir.join("checkpoints")
    }

    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.checkpoints().join(format!("{}.ckpt", phase.name()))
    }

    pub fn intermediate_checkpoint(&self, phase: Phase, iteration: usize) -> PathBuf {
        self.checkpoints().join(format!("{}_{iteration:06}.ckpt", phase.name()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join("report")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data_dir.join(MANIFEST_FILE)
    }

    /// The file whose presence marks `phase` as complete.
    pub fn completion_marker(&self, phase: Phase) -> PathBuf {
        match phase {
            Phase::Data => self.data_manifest(),
            p => self.checkpoint(p),
        }
    }
}

const SEED_STREAMS: [&str; 7] =
    ["seg_init", "pretrain", "warmup", "generator_init", "discriminator_init", "translation", "joint"];

/// Seed of one random stream, derived from the experiment seed and the stream name.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let tag = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    sample_seed(seed, tag)
}

pub fn derived_seeds(seed: u64) -> BTreeMap<String, u64> {
    SEED_STREAMS.iter().map(|s| (s.to_string(), derive_seed(seed, s))).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub fingerprint: String,
    pub config_hash: String,
    /// Optimizer updates performed in the phase.
    pub iterations: usize,
    pub seconds: f64,
    pub outputs: Vec<String>,
    pub hashes: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

/// Parameter digests checked at the end of joint training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub teacher_hash_pretrain: String,
    pub teacher_hash_final: String,
    /// Layers frozen after pretraining, as they were in the teacher.
    pub frozen_hash_pretrain: String,
    pub frozen_hash_final: String,
    pub teacher_unchanged: bool,
    pub frozen_unchanged: bool,
}

impl ContractReport {
    pub fn holds(&self) -> bool {
        self.teacher_unchanged && self.frozen_unchanged
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub metrics_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_dir: PathBuf,
    pub phases: BTreeMap<Phase, PhaseRecord>,
    pub contracts: Option<ContractReport>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub phase: Phase,
    pub skipped: bool,
    pub seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn update_manifest(cfg: &ExperimentConfig, layout: &RunLayout, edit: impl FnOnce(&mut RunManifest)) -> Result<()> {
    let mut m = RunManifest::load(&layout.manifest())?.unwrap_or_default();
    m.format_version = RUN_MANIFEST_VERSION;
    m.metrics_version = METRICS_VERSION;
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.seeds = derived_seeds(cfg.seed);
    m.dataset_dir = layout.data_dir.clone();
    edit(&mut m);
    write_json(&layout.config(), &serde_json::to_value(cfg)?)?;
    write_json(&layout.manifest(), &m)
}

fn record_phase(cfg: &ExperimentConfig, layout: &RunLayout, phase: Phase, record: PhaseRecord) -> Result<()> {
    update_manifest(cfg, layout, |m| {
        m.phases.insert(phase, record);
    })
}

fn new_record(cfg: &ExperimentConfig, phase: Phase, iterations: usize, started: Instant) -> PhaseRecord {
    PhaseRecord {
        fingerprint: cfg.phase_fingerprint(phase),
        config_hash: cfg.hash(),
        iterations,
        seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    }
}

fn dataset_matches(cfg: &ExperimentConfig, ds: &Dataset) -> bool {
    let m = ds.manifest();
    let c = cfg.dataset.counts();
    m.scene == cfg.dataset.scene
        && m.shift == cfg.dataset.shift
        && ds.count(Split::Source) == c.source
        && ds.count(Split::Target) == c.target
        && ds.count(Split::Probe) == c.probe
}

fn stored_fingerprint_matches(cfg: &ExperimentConfig, layout: &RunLayout, phase: Phase) -> Result<bool> {
    match phase {
        Phase::Data => Ok(dataset_matches(cfg, &Dataset::open(&layout.data_dir)?)),
        p => Ok(Checkpoint::load(&layout.checkpoint(p))?.header.fingerprint == cfg.phase_fingerprint(p)),
    }
}

/// Whether `phase` has to run, given what is already on disk.
fn should_run(cfg: &ExperimentConfig, layout: &RunLayout, phase: Phase, mode: OnComplete) -> Result<bool> {
    let marker = layout.completion_marker(phase);
    if !marker.exists() {
        return Ok(true);
    }
    match mode {
        OnComplete::Overwrite => Ok(true),
        OnComplete::Refuse => Err(Error::AlreadyComplete { phase: phase.name().into(), path: marker }),
        OnComplete::Resume => {
            if stored_fingerprint_matches(cfg, layout, phase)? {
                log::info!("{phase}: already complete, skipping");
                Ok(false)
            } else {
                Err(Error::StalePrerequisite { phase: phase.name().into(), path: marker })
            }
        }
    }
}

/// Opens the dataset and checks that it is the one `cfg` describes.
pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let layout = RunLayout::new(cfg);
    if !layout.data_manifest().exists() {
        return Err(Error::PhaseNotRun { phase: Phase::Data.name().into(), path: layout.data_manifest() });
    }
    let ds = Dataset::open(&layout.data_dir)?;
    if !dataset_matches(cfg, &ds) {
        return Err(Error::StalePrerequisite { phase: Phase::Data.name().into(), path: layout.data_manifest() });
    }
    Ok(ds)
}

/// Loads the checkpoint of a prerequisite phase, rejecting one made under other settings.
pub fn load_phase_checkpoint(cfg: &ExperimentConfig, phase: Phase) -> Result<Checkpoint> {
    let path = RunLayout::new(cfg).checkpoint(phase);
    if !path.exists() {
        return Err(Error::PhaseNotRun { phase: phase.name().into(), path });
    }
    let ck = Checkpoint::load(&path)?;
    if ck.header.fingerprint != cfg.phase_fingerprint(phase) {
        return Err(Error::StalePrerequisite { phase: phase.name().into(), path });
    }
    Ok(ck)
}

pub fn seg_config(cfg: &ExperimentConfig) -> SegNetConfig {
    SegNetConfig { num_classes: cfg.dataset.scene.num_classes, ..Default::default() }
}

pub fn generator_config(cfg: &ExperimentConfig) -> GeneratorConfig {
    GeneratorConfig { num_classes: cfg.dataset.scene.num_classes, ..Default::default() }
}

pub fn seg_from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<SegNet<f32>> {
    let config: SegNetConfig = serde_json::from_value(ck.architecture(prefix)?.clone())?;
    let mut net = SegNet::new(config, 0);
    ck.restore(prefix, net.params_mut())?;
    Ok(net)
}

pub fn translator_from_checkpoint(ck: &Checkpoint) -> Result<Translator> {
    let gc: GeneratorConfig = serde_json::from_value(ck.architecture("generator")?.clone())?;
    let dc: DiscriminatorConfig = serde_json::from_value(ck.architecture("discriminator")?.clone())?;
    let mut tr = Translator { gen: TranslationGenerator::new(gc, 0), disc: MultiScalePatchDiscriminator::new(dc, 0) };
    ck.restore("generator", tr.gen.params_mut())?;
    ck.restore("discriminator", tr.disc.params_mut())?;
    Ok(tr)
}

fn insert_translator(ck: &mut Checkpoint, tr: &Translator) -> Result<()> {
    ck.insert("generator", serde_json::to_value(tr.gen.config())?, tr.gen.params());
    ck.insert("discriminator", serde_json::to_value(tr.disc.config())?, tr.disc.params());
    Ok(())
}

fn evaluator<'a>(cfg: &'a ExperimentConfig, pairs: &'a [(ImageTensor, crate::labelops::LabelMap)]) -> Evaluator<'a> {
    Evaluator { pairs, subset: cfg.eval.subset.as_deref(), policy: cfg.eval.undefined_policy }
}

fn due(it: usize, every: usize) -> bool {
    every > 0 && it % every == 0
}

/// Loads the frozen teacher and checks it against the digest recorded when it was trained.
fn load_teacher(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<SegNet<f32>> {
    let ck = load_phase_checkpoint(cfg, Phase::Pretrain)?;
    let mut teacher = seg_from_checkpoint(&ck, "teacher")?;
    teacher.freeze_all();
    let recorded = RunManifest::load(&layout.manifest())?
        .and_then(|m| m.phases.get(&Phase::Pretrain).and_then(|r| r.hashes.get("teacher").cloned()));
    if let Some(h) = recorded {
        if h != teacher.params().digest_all() {
            return Err(Error::Contract(format!(
                "teacher in {} differs from the one recorded at pretraining",
                layout.checkpoint(Phase::Pretrain).display()
            )));
        }
    }
    Ok(teacher)
}

pub fn generate_data(cfg: &ExperimentConfig, mode: OnComplete) -> Result<PhaseOutcome> {
    let layout = RunLayout::new(cfg);
    if !should_run(cfg, &layout, Phase::Data, mode)? {
        return Ok(PhaseOutcome { phase: Phase::Data, skipped: true, seconds: 0.0 });
    }
    let started = Instant::now();
    for split in [Split::Source, Split::Target, Split::Probe] {
        let dir = layout.data_dir.join(split.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    log::info!("data: rendering into {}", layout.data_dir.display());
    let d = &cfg.dataset;
    let manifest = build_dataset(&d.scene, d.counts(), &d.shift, &layout.data_dir)?;
    let mut rec = new_record(cfg, Phase::Data, 0, started);
    rec.outputs.push(layout.data_manifest().display().to_string());
    rec.metrics.insert("samples".into(), manifest.entries.len() as f64);
    let seconds = rec.seconds;
    record_phase(cfg, &layout, Phase::Data, rec)?;
    Ok(PhaseOutcome { phase: Phase::Data, skipped: false, seconds })
}

pub fn pretrain(cfg: &ExperimentConfig, mode: OnComplete) -> Result<PhaseOutcome> {
    let layout = RunLayout::new(cfg);
    if !should_run(cfg, &layout, Phase::Pretrain, mode)? {
        return Ok(PhaseOutcome { phase: Phase::Pretrain, skipped: true, seconds: 0.0 });
    }
    let started = Instant::now();
    let ds = open_dataset(cfg)?;
    let pairs = ds.source_pairs()?;
    let target = ds.evaluation_set(Split::Target)?;
    let sched = &cfg.schedule;
    let mut net = SegNet::new(seg_config(cfg), derive_seed(cfg.seed, "seg_init"));
    let mut log = MetricsLog::begin(&layout.metrics(), cfg.dataset.scene.num_classes, Phase::Pretrain)?;
    log::info!("pretrain: {} source images, {} epochs", pairs.len(), sched.pretrain_epochs);
    pretrain_source(&mut net, &pairs, sched, derive_seed(cfg.seed, "pretrain"), &mut |r| log.push(r))?;
    let source = evaluator(cfg, &pairs).run(&net)?;
    let tgt = evaluator(cfg, &target.pairs).run(&net)?;
    log::info!("pretrain: source mIoU {:.4}, target mIoU {:.4}", source.miou, tgt.miou);
    log.push(Row::new(BASELINE, 0).eval("source", source.clone()));
    log.push(Row::new(BASELINE, 0).eval("target", tgt.clone()));
    log.flush()?;

    let iterations = sched.pretrain_epochs * pairs.len().div_ceil(sched.pretrain_batch);
    let mut ck = Checkpoint::new("pretrain", iterations, &cfg.hash(), &cfg.phase_fingerprint(Phase::Pretrain));
    ck.insert("teacher", serde_json::to_value(net.config())?, net.params());
    ck.header.metrics.insert("source_miou".into(), source.miou);
    ck.header.metrics.insert("target_miou".into(), tgt.miou);
    ck.save(&layout.checkpoint(Phase::Pretrain))?;

    let mut rec = new_record(cfg, Phase::Pretrain, iterations, started);
    rec.outputs.push(layout.checkpoint(Phase::Pretrain).display().to_string());
    rec.hashes.insert("teacher".into(), net.params().digest_all());
    rec.hashes.insert("teacher_frozen_layers".into(), net.frozen_digest());
    rec.metrics = ck.header.metrics.clone();
    let seconds = rec.seconds;
    record_phase(cfg, &layout, Phase::Pretrain, rec)?;
    Ok(PhaseOutcome { phase: Phase::Pretrain, skipped: false, seconds })
}

pub fn warmup(cfg: &ExperimentConfig, mode: OnComplete) -> Result<PhaseOutcome> {
    let layout = RunLayout::new(cfg);
    if !should_run(cfg, &layout, Phase::Warmup, mode)? {
        return Ok(PhaseOutcome { phase: Phase::Warmup, skipped: true, seconds: 0.0 });
    }
    let started = Instant::now();
    let teacher = load_teacher(cfg, &layout)?;
    let ds = open_dataset(cfg)?;
    let targets = ds.target_images()?.images;
    let eval_set = ds.evaluation_set(Split::Target)?;
    let mut student = teacher.clone();
    student.freeze_partial();

    let log = RefCell::new(MetricsLog::begin(&layout.metrics(), cfg.dataset.scene.num_classes, Phase::Warmup)?);
    let mut iterations = 0;
    let mut last = None;
    log::info!("warmup: {} rounds over {} target images", cfg.schedule.warmup_rounds, targets.len());
    warmup_selftrain(
        &mut student,
        &targets,
        &cfg.schedule,
        derive_seed(cfg.seed, "warmup"),
        &mut |r| log.borrow_mut().push(r),
        &mut |round, it, s| {
            let r = evaluator(cfg, &eval_set.pairs).run(s)?;
            log::info!("warmup: round {round}, target mIoU {:.4}", r.miou);
            last = Some(r.miou);
            iterations = it;
            log.borrow_mut().push(Row::new("warmup", it).eval("target", r));
            Ok(())
        },
    )?;
    log.into_inner().flush()?;

    let mut ck = Checkpoint::new("warmup", iterations, &cfg.hash(), &cfg.phase_fingerprint(Phase::Warmup));
    ck.insert("student", serde_json::to_value(student.config())?, student.params());
    if let Some(m) = last {
        ck.header.metrics.insert("target_miou".into(), m);
    }
    ck.save(&layout.checkpoint(Phase::Warmup))?;

    let mut rec = new_record(cfg, Phase::Warmup, iterations, started);
    rec.outputs.push(layout.checkpoint(Phase::Warmup).display().to_string());
    rec.hashes.insert("student".into(), student.params().digest_all());
    rec.hashes.insert("student_frozen_layers".into(), student.frozen_digest());
    rec.metrics = ck.header.metrics.clone();
    let seconds = rec.seconds;
    record_phase(cfg, &layout, Phase::Warmup, rec)?;
    Ok(PhaseOutcome { phase: Phase::Warmup, skipped: false, seconds })
}

fn probe_labels(teacher: &SegNet<f32>, ds: &Dataset) -> Result<Vec<crate::labelops::LabelMap>> {
    let images: Vec<ImageTensor> = ds.evaluation_set(Split::Probe)?.pairs.into_iter().map(|(im, _)| im).collect();
    Ok(predict(teacher, &images)?.into_iter().map(|(l, _)| l).collect())
}

pub fn train_translation_phase(cfg: &ExperimentConfig, mode: OnComplete) -> Result<PhaseOutcome> {
    let layout = RunLayout::new(cfg);
    if !should_run(cfg, &layout, Phase::Translation, mode)? {
        return Ok(PhaseOutcome { phase: Phase::Translation, skipped: true, seconds: 0.0 });
    }
    let started = Instant::now();
    let teacher = load_teacher(cfg, &layout)?;
    let ds = open_dataset(cfg)?;
    let targets = ds.target_images()?.images;
    let labels = TeacherLabels::compute(&teacher, &targets, &cfg.schedule)?;
    let probe = probe_labels(&teacher, &ds)?;
    let phi = PerceptualExtractor::new(PERCEPTUAL_SEED);
    let c = cfg.dataset.scene.num_classes;
    let ctx = TranslationContext { teacher: &teacher, phi: &phi, weights: &cfg.loss, num_classes: c };
    let mut tr = Translator {
        gen: TranslationGenerator::new(generator_config(cfg), derive_seed(cfg.seed, "generator_init")),
        disc: MultiScalePatchDiscriminator::new(DiscriminatorConfig::default(), derive_seed(cfg.seed, "discriminator_init")),
    };
    let sched = &cfg.schedule;
    let hash = cfg.hash();
    let fingerprint = cfg.phase_fingerprint(Phase::Translation);

    let log = RefCell::new(MetricsLog::begin(&layout.metrics(), c, Phase::Translation)?);
    let initial = semantic_probe(&tr, &ctx, &probe)?;
    log.borrow_mut().push(Row::new("translation", 0).set("probe_ce", initial));
    let mut last = initial;
    log::info!("translation: {} iterations, probe CE {initial:.4}", sched.iter_tr);
    train_translation(
        &mut tr,
        &ctx,
        &targets,
        &labels.raw,
        sched,
        derive_seed(cfg.seed, "translation"),
        &mut |r| log.borrow_mut().push(r),
        &mut |it, tr| {
            if due(it, cfg.eval.eval_interval) || it == sched.iter_tr {
                last = semantic_probe(tr, &ctx, &probe)?;
                log::info!("translation: iteration {it}, probe CE {last:.4}");
                log.borrow_mut().push(Row::new("translation", it).set("probe_ce", last));
            }
            if due(it, sched.checkpoint_every) && it < sched.iter_tr {
                let mut ck = Checkpoint::new("translation", it, &hash, &fingerprint);
                insert_translator(&mut ck, tr)?;
                ck.save(&layout.intermediate_checkpoint(Phase::Translation, it))?;
            }
            Ok(())
        },
    )?;
    log.into_inner().flush()?;

    let mut ck = Checkpoint::new("translation", sched.iter_tr, &hash, &fingerprint);
    insert_translator(&mut ck, &tr)?;
    ck.header.metrics.insert("probe_ce_initial".into(), initial);
    ck.header.metrics.insert("probe_ce_final".into(), last);
    ck.save(&layout.checkpoint(Phase::Translation))?;

    let mut rec = new_record(cfg, Phase::Translation, sched.iter_tr, started);
    rec.outputs.push(layout.checkpoint(Phase::Translation).display().to_string());
    rec.hashes.insert("generator".into(), tr.gen.params().digest_all());
    rec.hashes.insert("discriminator".into(), tr.disc.params().digest_all());
    rec.hashes.insert("teacher".into(), teacher.params().digest_all());
    rec.metrics = ck.header.metrics.clone();
    let seconds = rec.seconds;
    record_phase(cfg, &layout, Phase::Translation, rec)?;
    Ok(PhaseOutcome { phase: Phase::Translation, skipped: false, seconds })
}

pub fn train_joint_phase(cfg: &ExperimentConfig, mode: OnComplete) -> Result<PhaseOutcome> {
    let layout = RunLayout::new(cfg);
    if !should_run(cfg, &layout, Phase::Joint, mode)? {
        return Ok(PhaseOutcome { phase: Phase::Joint, skipped: true, seconds: 0.0 });
    }
    let started = Instant::now();
    let teacher = load_teacher(cfg, &layout)?;
    let mut student = seg_from_checkpoint(&load_phase_checkpoint(cfg, Phase::Warmup)?, "student")?;
    student.freeze_partial();
    let mut tr = translator_from_checkpoint(&load_phase_checkpoint(cfg, Phase::Translation)?)?;
    let ds = open_dataset(cfg)?;
    let targets = ds.target_images()?.images;
    let eval_set = ds.evaluation_set(Split::Target)?;
    let sched = &cfg.schedule;
    let labels = TeacherLabels::compute(&teacher, &targets, sched)?;
    let probe = probe_labels(&teacher, &ds)?;
    let phi = PerceptualExtractor::new(PERCEPTUAL_SEED);
    let c = cfg.dataset.scene.num_classes;
    let ctx = TranslationContext { teacher: &teacher, phi: &phi, weights: &cfg.loss, num_classes: c };
    let teacher_before = teacher.params().digest_all();
    let frozen_before = teacher.frozen_digest();
    let hash = cfg.hash();
    let fingerprint = cfg.phase_fingerprint(Phase::Joint);

    let log = RefCell::new(MetricsLog::begin(&layout.metrics(), c, Phase::Joint)?);
    let mut last: Option<IoUReport> = None;
    log::info!("joint: {} iterations", sched.iter_joint);
    train_joint(
        &mut tr,
        &mut student,
        &ctx,
        &targets,
        &labels,
        sched,
        derive_seed(cfg.seed, "joint"),
        &mut |r| log.borrow_mut().push(r),
        &mut |it, tr, s| {
            if due(it, cfg.eval.eval_interval) || it == sched.iter_joint {
                let r = evaluator(cfg, &eval_set.pairs).run(s)?;
                let p = semantic_probe(tr, &ctx, &probe)?;
                log::info!("joint: iteration {it}, target mIoU {:.4}, probe CE {p:.4}", r.miou);
                log.borrow_mut().push(Row::new("joint", it).set("probe_ce", p).eval("target", r.clone()));
                last = Some(r);
            }
            if due(it, sched.checkpoint_every) && it < sched.iter_joint {
                let mut ck = Checkpoint::new("joint", it, &hash, &fingerprint);
                ck.insert("student", serde_json::to_value(s.config())?, s.params());
                insert_translator(&mut ck, tr)?;
                ck.save(&layout.intermediate_checkpoint(Phase::Joint, it))?;
            }
            Ok(())
        },
    )?;
    log.into_inner().flush()?;

    let contracts = ContractReport {
        teacher_unchanged: teacher.params().digest_all() == teacher_before,
        frozen_unchanged: student.frozen_digest() == frozen_before,
        teacher_hash_pretrain: teacher_before,
        teacher_hash_final: teacher.params().digest_all(),
        frozen_hash_pretrain: frozen_before,
        frozen_hash_final: student.frozen_digest(),
    };

    let mut ck = Checkpoint::new("joint", sched.iter_joint, &hash, &fingerprint);
    ck.insert("student", serde_json::to_value(student.config())?, student.params());
    insert_translator(&mut ck, &tr)?;
    if let Some(r) = &last {
        ck.header.metrics.insert("target_miou".into(), r.miou);
    }
    ck.save(&layout.checkpoint(Phase::Joint))?;

    let mut rec = new_record(cfg, Phase::Joint, sched.iter_joint, started);
    rec.outputs.push(layout.checkpoint(Phase::Joint).display().to_string());
    rec.hashes.insert("student".into(), student.params().digest_all());
    rec.hashes.insert("student_frozen_layers".into(), contracts.frozen_hash_final.clone());
    rec.hashes.insert("teacher".into(), contracts.teacher_hash_final.clone());
    rec.metrics = ck.header.metrics.clone();
    let seconds = rec.seconds;
    let holds = contracts.holds();
    update_manifest(cfg, &layout, |m| {
        m.phases.insert(Phase::Joint, rec);
        m.contracts = Some(contracts);
    })?;
    if !holds {
        return Err(Error::Contract("teacher or frozen student layers changed during training".into()));
    }
    Ok(PhaseOutcome { phase: Phase::Joint, skipped: false, seconds })
}

/// Evaluation of one checkpoint, as written to `report/eval_<phase>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `baseline` for the source-only model, otherwise the checkpoint's phase.
    pub phase: String,
    pub checkpoint: PathBuf,
    pub iteration: usize,
    pub network: String,
    pub target: IoUReport,
    pub source: Option<IoUReport>,
}

/// The most advanced phase checkpoint holding a segmentation network.
pub fn latest_segmentation_checkpoint(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let layout = RunLayout::new(cfg);
    [Phase::Joint, Phase::Warmup, Phase::Pretrain]
        .into_iter()
        .map(|p| layout.checkpoint(p))
        .find(|p| p.exists())
        .ok_or_else(|| Error::PhaseNotRun { phase: Phase::Pretrain.name().into(), path: layout.checkpoint(Phase::Pretrain) })
}

pub fn evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let layout = RunLayout::new(cfg);
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_segmentation_checkpoint(cfg)?,
    };
    let ck = Checkpoint::load(&path)?;
    let (network, phase) = if ck.has("student") {
        ("student", ck.header.phase.clone())
    } else if ck.has("teacher") {
        ("teacher", BASELINE.to_string())
    } else {
        return Err(Error::InvalidArgument(format!("{} holds no segmentation network", path.display())));
    };
    let net = seg_from_checkpoint(&ck, network)?;
    let ds = open_dataset(cfg)?;
    let target = evaluator(cfg, &ds.evaluation_set(Split::Target)?.pairs).run(&net)?;
    let source = if network == "teacher" { Some(evaluator(cfg, &ds.source_pairs()?).run(&net)?) } else { None };
    let summary =
        EvalSummary { phase, checkpoint: path, iteration: ck.header.iteration, network: network.into(), target, source };
    write_json(&layout.report_dir().join(format!("eval_{}.json", summary.phase)), &summary)?;
    Ok(summary)
}

/// Every phase, then evaluation and the report. Completed phases made under
/// the same settings are kept unless `force` is set.
pub fn run_all(cfg: &ExperimentConfig, force: bool) -> Result<(Vec<PhaseOutcome>, report::Report)> {
    let mode = if force { OnComplete::Overwrite } else { OnComplete::Resume };
    let outcomes = vec![
        generate_data(cfg, mode)?,
        pretrain(cfg, mode)?,
        warmup(cfg, mode)?,
        train_translation_phase(cfg, mode)?,
        train_joint_phase(cfg, mode)?,
    ];
    evaluate(cfg, None)?;
    let rep = report::write_report(cfg)?;
    Ok((outcomes, rep))
}

/// Copies the completed phases of `src` whose settings `dst` shares, so that
/// `dst` only runs what differs. Returns the phases copied.
pub fn adopt_phases(src: &ExperimentConfig, dst: &ExperimentConfig) -> Result<Vec<Phase>> {
    let (from, to) = (RunLayout::new(src), RunLayout::new(dst));
    let src_manifest = RunManifest::load(&from.manifest())?.unwrap_or_default();
    let mut adopted = Vec::new();
    for phase in [Phase::Pretrain, Phase::Warmup, Phase::Translation, Phase::Joint] {
        let (a, b) = (from.checkpoint(phase), to.checkpoint(phase));
        if src.phase_fingerprint(phase) != dst.phase_fingerprint(phase) || !a.exists() || b.exists() {
            continue;
        }
        if phase.prerequisites().iter().any(|&p| p != Phase::Data && !to.checkpoint(p).exists()) {
            continue;
        }
        fs::create_dir_all(to.checkpoints()).map_err(|e| Error::io(to.checkpoints(), e))?;
        let mut log = MetricsLog::begin(&to.metrics(), dst.dataset.scene.num_classes, phase)?;
        for line in metrics::phase_lines(&from.metrics(), phase)? {
            log.push_line(&line);
        }
        log.flush()?;
        fs::copy(&a, &b).map_err(|e| Error::io(&a, e))?;
        let mut rec = src_manifest.phases.get(&phase).cloned().unwrap_or_default();
        rec.config_hash = dst.hash();
        rec.outputs = vec![b.display().to_string()];
        let contracts = (phase == Phase::Joint).then(|| src_manifest.contracts.clone()).flatten();
        update_manifest(dst, &to, |m| {
            m.phases.insert(phase, rec);
            if contracts.is_some() {
                m.contracts = contracts;
            }
        })?;
        adopted.push(phase);
    }
    Ok(adopted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: Value,
    pub output_dir: PathBuf,
    pub final_miou: Option<f64>,
    pub reused: Vec<Phase>,
}

fn value_label(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars().map(|c| if c.is_ascii_alphanumeric() || ".-_".contains(c) { c } else { '_' }).collect()
}

/// Full runs with `axis` set to each of `values`, under `<output_dir>/sweep/`.
/// Phases unaffected by the axis are computed once and shared, and finished
/// phases of the base run in `<output_dir>/run` are reused as well. Writes
/// `<output_dir>/sweep/<axis>.csv` with one `value,final_miou` row per point.
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[Value], force: bool) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let root = cfg.output_dir.join("sweep");
    let mut points: Vec<(ExperimentConfig, SweepPoint)> = Vec::new();
    for v in values {
        let mut point = cfg.with_value(axis, v.clone())?;
        point.output_dir = root.join(format!("{axis}={}", value_label(v)));
        if point.phase_fingerprint(Phase::Data) == cfg.phase_fingerprint(Phase::Data) {
            point.dataset_dir = Some(cfg.dataset_dir());
        }
        if force {
            let run = point.run_dir();
            if run.exists() {
                fs::remove_dir_all(&run).map_err(|e| Error::io(&run, e))?;
            }
        }
        let mut reused = adopt_phases(cfg, &point)?;
        for (earlier, _) in &points {
            reused.extend(adopt_phases(earlier, &point)?);
        }
        log::info!("sweep: {axis} = {v} (reusing {} phases)", reused.len());
        let (_, rep) = run_all(&point, false)?;
        points.push((point.clone(), SweepPoint { value: v.clone(), output_dir: point.output_dir, final_miou: rep.final_miou, reused }));
    }
    let mut csv = String::from("value,final_miou\n");
    for (_, p) in &points {
        csv.push_str(&format!("{},{}\n", value_label(&p.value), p.final_miou.map(|m| m.to_string()).unwrap_or_default()));
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let path = root.join(format!("{axis}.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(points.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_stream_and_experiment() {
        let a = derived_seeds(0);
        let b = derived_seeds(1);
        assert_eq!(a.len(), SEED_STREAMS.len());
        let mut vals: Vec<u64> = a.values().copied().collect();
        vals.sort();
        vals.dedup();
        assert_eq!(vals.len(), SEED_STREAMS.len());
        assert!(a.iter().all(|(k, v)| b[k] != *v));
        assert_eq!(derive_seed(7, "joint"), derive_seed(7, "joint"));
    }

    #[test]
    fn value_labels_are_path_safe() {
        assert_eq!(value_label(&serde_json::json!(0.5)), "0.5");
        assert_eq!(value_label(&serde_json::json!("a/b c")), "a_b_c");
        assert_eq!(value_label(&serde_json::json!([1, 2])), "_1_2_");
    }
}
