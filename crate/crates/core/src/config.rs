//! Experiment configuration: one JSON document with full-default fallback.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::UndefinedPolicy;
use crate::losses::LossWeights;
use crate::synthdata::{DomainShiftParams, SceneSpec, SplitCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub shift: DomainShiftParams,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out target-domain scenes for the translation probe and panels.
    pub n_probe: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneSpec::default(),
            shift: DomainShiftParams::default(),
            n_source: 200,
            n_target: 200,
            n_probe: 8,
        }
    }
}

impl DatasetConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { source: self.n_source, target: self.n_target, probe: self.n_probe }
    }
}

/// Whether confidence thresholds are computed per image or over the whole target split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterScope {
    #[default]
    Image,
    Dataset,
}

impl std::str::FromStr for FilterScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FilterScope::Image),
            "dataset" => Ok(FilterScope::Dataset),
            _ => Err(Error::InvalidArgument(format!("filter scope must be image or dataset, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub warmup_rounds: usize,
    pub warmup_epochs: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
    pub iter_tr: usize,
    pub iter_joint: usize,
    pub batch_translation: usize,
    pub batch_joint: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_weight_decay: f64,
    pub poly_power: f64,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub filter_keep_fraction: f64,
    pub filter_scope: FilterScope,
    /// Condition the generator on a straight-through hard argmax instead of
    /// the student's soft probabilities.
    pub hard_onehot: bool,
    pub bn_momentum: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain_epochs: 20,
            pretrain_batch: 8,
            pretrain_lr: 0.01,
            warmup_rounds: 3,
            warmup_epochs: 1,
            warmup_batch: 2,
            warmup_lr: 2.5e-3,
            iter_tr: 2000,
            iter_joint: 2000,
            batch_translation: 1,
            batch_joint: 2,
            seg_lr: 2.5e-4,
            seg_momentum: 0.9,
            seg_weight_decay: 5e-4,
            poly_power: 0.8,
            gen_lr: 1e-4,
            disc_lr: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            filter_keep_fraction: 0.33,
            filter_scope: FilterScope::Image,
            hard_onehot: false,
            bn_momentum: 0.1,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Classes averaged into mIoU; all classes when absent.
    pub subset: Option<Vec<usize>>,
    pub undefined_policy: UndefinedPolicy,
    pub eval_interval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { subset: None, undefined_policy: UndefinedPolicy::Exclude, eval_interval: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub schedule: TrainSchedule,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Where the dataset lives; `<output_dir>/data` when absent.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            schedule: TrainSchedule::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset_dir: None,
        }
    }
}

/// Training phases in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Data,
    Pretrain,
    Warmup,
    Translation,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Data, Phase::Pretrain, Phase::Warmup, Phase::Translation, Phase::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Data => "data",
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Translation => "translation",
            Phase::Joint => "joint",
        }
    }

    /// Config paths whose values determine this phase's output, on top of
    /// those of its prerequisites.
    fn own_paths(self) -> &'static [&'static str] {
        match self {
            Phase::Data => &["dataset"],
            Phase::Pretrain => &[
                "seed",
                "schedule.pretrain_epochs",
                "schedule.pretrain_batch",
                "schedule.pretrain_lr",
                "schedule.seg_momentum",
                "schedule.seg_weight_decay",
                "schedule.poly_power",
                "schedule.bn_momentum",
            ],
            Phase::Warmup => &[
                "schedule.warmup_rounds",
                "schedule.warmup_epochs",
                "schedule.warmup_batch",
                "schedule.warmup_lr",
                "schedule.filter_keep_fraction",
                "schedule.filter_scope",
            ],
            Phase::Translation => &[
                "schedule.iter_tr",
                "schedule.batch_translation",
                "schedule.gen_lr",
                "schedule.disc_lr",
                "schedule.adam_beta1",
                "schedule.adam_beta2",
                "loss.lambda_p",
                "loss.lambda_c",
                "loss.lambda_kld",
                "loss.lambda_f",
                "loss.lambda_adv",
                "loss.perceptual_layers",
                "loss.enabled.perceptual",
                "loss.enabled.semantic",
                "loss.enabled.kld",
                "loss.enabled.feature_matching",
                "loss.enabled.adversarial",
            ],
            Phase::Joint => &["schedule", "loss"],
        }
    }

    pub fn prerequisites(self) -> &'static [Phase] {
        match self {
            Phase::Data => &[],
            Phase::Pretrain => &[Phase::Data],
            Phase::Warmup => &[Phase::Pretrain],
            Phase::Translation => &[Phase::Pretrain],
            Phase::Joint => &[Phase::Warmup, Phase::Translation],
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, key| cur.get(key))
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl ExperimentConfig {
    /// Parses JSON, naming the offending field and position on failure.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!("at `{path}` (line {}, column {}): {inner}", inner.line(), inner.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.dataset.scene.validate().map_err(cfg_err)?;
        self.dataset.shift.validate().map_err(cfg_err)?;
        self.loss.validate()?;
        let scene = &self.dataset.scene;
        if scene.height % 8 != 0 || scene.width % 8 != 0 {
            return Err(Error::Config(format!(
                "dataset.scene: height and width must be multiples of 8, got {}x{}",
                scene.height, scene.width
            )));
        }
        let s = &self.schedule;
        let positive = [
            ("pretrain_lr", s.pretrain_lr),
            ("warmup_lr", s.warmup_lr),
            ("seg_lr", s.seg_lr),
            ("gen_lr", s.gen_lr),
            ("disc_lr", s.disc_lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("schedule.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("pretrain_batch", s.pretrain_batch), ("warmup_batch", s.warmup_batch), ("batch_translation", s.batch_translation), ("batch_joint", s.batch_joint), ("log_every", s.log_every)] {
            if v == 0 {
                return Err(Error::Config(format!("schedule.{name} must be >= 1")));
            }
        }
        if !(s.filter_keep_fraction > 0.0 && s.filter_keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "schedule.filter_keep_fraction must be in (0, 1], got {}",
                s.filter_keep_fraction
            )));
        }
        for (name, v) in [("seg_momentum", s.seg_momentum), ("adam_beta1", s.adam_beta1), ("adam_beta2", s.adam_beta2), ("bn_momentum", s.bn_momentum)] {
            if !(0.0..1.0).contains(&v) && !(name == "bn_momentum" && v == 1.0) {
                return Err(Error::Config(format!("schedule.{name} must be in [0, 1), got {v}")));
            }
        }
        if !(s.seg_weight_decay >= 0.0 && s.poly_power >= 0.0) {
            return Err(Error::Config("schedule.seg_weight_decay and poly_power must be >= 0".into()));
        }
        if let Some(sub) = &self.eval.subset {
            if sub.is_empty() {
                return Err(Error::Config("eval.subset must not be empty".into()));
            }
            if let Some(&k) = sub.iter().find(|&&k| k >= scene.num_classes) {
                return Err(Error::Config(format!("eval.subset class {k} is outside [0, {})", scene.num_classes)));
            }
        }
        Ok(())
    }

    /// Canonical JSON: defaults filled in, keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::to_value(self).expect("config serializes")).expect("value serializes")
    }

    /// Digest of every setting that influences `phase` or any phase it depends on.
    pub fn phase_fingerprint(&self, phase: Phase) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut phases = vec![phase];
        let mut i = 0;
        while i < phases.len() {
            for &p in phases[i].prerequisites() {
                if !phases.contains(&p) {
                    phases.push(p);
                }
            }
            i += 1;
        }
        phases.sort();
        let mut picked = serde_json::Map::new();
        for p in phases {
            for &path in p.own_paths() {
                picked.insert(path.to_string(), lookup(&v, path).cloned().unwrap_or(Value::Null));
            }
        }
        sha256_hex(Value::Object(picked).to_string().as_bytes())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("run")
    }

    /// Every dotted path that names a leaf value, e.g. `loss.lambda_pseg`.
    pub fn field_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        leaf_paths(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }

    /// Copy of this config with the value at a dotted path replaced.
    pub fn with_value(&self, path: &str, value: Value) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let mut cur = &mut v;
        for key in path.split('.') {
            cur = match cur.get_mut(key) {
                Some(next) => next,
                None => {
                    return Err(Error::Config(format!(
                        "unknown config path `{path}`; valid paths: {}",
                        self.field_paths().join(", ")
                    )))
                }
            };
        }
        *cur = value;
        let cfg = Self::from_json_str(&v.to_string()).map_err(|e| Error::Config(format!("setting `{path}`: {e}")))?;
        Ok(cfg)
    }
}
