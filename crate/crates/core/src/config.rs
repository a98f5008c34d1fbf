//! Experiment configuration documents (TOML).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::ProbeConfig;
use crate::data::Resize;
use crate::error::{Error, Result};
use crate::network::{BackboneSpec, EmaSchedule, HeadConfig, LeapSelection};
use crate::optim::{CosineSchedule, OptimizerConfig};
use crate::tensor::Precision;
use crate::trainer::{MlaanRule, SyncPolicy, TrainerKind, TrainerMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneSpec,
    pub partition: PartitionConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub run: RunConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Number of gradient-isolated modules.
    #[serde(rename = "K")]
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainerKind,
    #[serde(default = "defaults::span")]
    pub k: usize,
    #[serde(default = "defaults::p")]
    pub p: usize,
    #[serde(default = "defaults::r")]
    pub r: f64,
    #[serde(default)]
    pub mlaan_rule: MlaanRule,
    #[serde(default)]
    pub sync_period: SyncPeriod,
    #[serde(default)]
    pub reseed_double: bool,
    #[serde(default = "defaults::head_conv_layers")]
    pub head_conv_layers: usize,
    #[serde(default = "defaults::fractions")]
    pub leap_fractions: Vec<f64>,
    #[serde(default = "defaults::ema_schedule")]
    pub ema_schedule: EmaSchedule,
}

/// `"epoch"`, `"never"`, or a positive step count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SyncPeriod(pub SyncPolicy);

impl Serialize for SyncPeriod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            SyncPolicy::Epoch => s.serialize_str("epoch"),
            SyncPolicy::Never => s.serialize_str("never"),
            SyncPolicy::Steps(n) => s.serialize_u64(n),
        }
    }
}

impl<'de> Deserialize<'de> for SyncPeriod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = SyncPeriod;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"epoch\", \"never\" or a positive step count")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<SyncPeriod, E> {
                match v {
                    "epoch" => Ok(SyncPeriod(SyncPolicy::Epoch)),
                    "never" => Ok(SyncPeriod(SyncPolicy::Never)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<SyncPeriod, E> {
                u64::try_from(v)
                    .map(|n| SyncPeriod(SyncPolicy::Steps(n)))
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<SyncPeriod, E> {
                Ok(SyncPeriod(SyncPolicy::Steps(v)))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Rate of the cascaded heads; equal to `lr` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_cascaded: Option<f64>,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: defaults::lr(),
            lr_cascaded: None,
            min_lr: 0.0,
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Master seed; required so that no run draws on ambient entropy.
    pub seed: u64,
    #[serde(default = "defaults::precision")]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Idx,
    Cifar10bin,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Training files: `[images, labels]` for IDX, batch files for CIFAR-10.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub test_paths: Vec<PathBuf>,
    /// Deterministic training subsample size; 0 keeps everything.
    #[serde(default)]
    pub subset_size: usize,
    #[serde(default = "defaults::resize")]
    pub resize: Resize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub per_class: usize,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    #[serde(default)]
    pub shared: f64,
    /// Dataset seed; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

mod defaults {
    use super::*;

    pub fn span() -> usize {
        3
    }
    pub fn p() -> usize {
        3
    }
    pub fn r() -> f64 {
        0.99
    }
    pub fn head_conv_layers() -> usize {
        1
    }
    pub fn fractions() -> Vec<f64> {
        LeapSelection::default().fractions
    }
    pub fn ema_schedule() -> EmaSchedule {
        EmaSchedule::Linear
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn precision() -> Precision {
        Precision::F32
    }
    pub fn resize() -> Resize {
        Resize::None
    }
    pub fn noise() -> f64 {
        1.0
    }
}

impl ExperimentConfig {
    /// Parses and validates a document; relative dataset paths resolve
    /// against `base` and must exist.
    pub fn from_toml_str(doc: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(doc).map_err(|e| toml_error(doc, &e))?;
        if let Some(base) = base {
            for p in cfg.dataset.paths.iter_mut().chain(cfg.dataset.test_paths.iter_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&doc, path.parent())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let blocks = self.backbone.blocks();
        if self.partition.k == 0 || self.partition.k > blocks.max(1) {
            return Err(Error::validation(
                "partition.K",
                format!("need 1 ≤ K ≤ {} (one block per module at most), got {}", blocks.max(1), self.partition.k),
            ));
        }
        let t = &self.trainer;
        if t.mode.uses_cascades() {
            if t.k <= 1 {
                return Err(Error::validation("trainer.k", format!("cascade span must exceed 1, got {}", t.k)));
            }
            if t.k > self.partition.k {
                return Err(Error::validation(
                    "trainer.k",
                    format!("cascade span {} exceeds the {} modules", t.k, self.partition.k),
                ));
            }
        }
        if !(t.r > 0.0 && t.r < 1.0) {
            return Err(Error::validation("trainer.r", format!("must lie in (0, 1), got {}", t.r)));
        }
        if t.sync_period.0 == SyncPolicy::Steps(0) {
            return Err(Error::validation("trainer.sync_period", "step period must be positive"));
        }
        if t.head_conv_layers > 2 {
            return Err(Error::validation("trainer.head_conv_layers", "at most 2 conv layers per head"));
        }
        if t.leap_fractions.is_empty() || t.leap_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::validation("trainer.leap_fractions", "need fractions in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::validation("optimizer.lr", format!("must be positive, got {}", o.lr)));
        }
        if let Some(c) = o.lr_cascaded {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::validation("optimizer.lr_cascaded", format!("must be non-negative, got {c}")));
            }
        }
        if !(o.min_lr >= 0.0 && o.min_lr <= o.lr) {
            return Err(Error::validation("optimizer.min_lr", "must lie in [0, lr]"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::validation("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::validation("optimizer.weight_decay", "must be non-negative"));
        }
        if self.run.batch_size == 0 {
            return Err(Error::validation("run.batch_size", "must be positive"));
        }
        self.probe.validate()?;
        self.validate_dataset()
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                let s = d
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::validation("dataset.synthetic", "required for kind = \"synthetic\""))?;
                if s.per_class < 5 {
                    return Err(Error::validation("dataset.synthetic.per_class", "need at least 5 for a test split"));
                }
                if !(s.noise >= 0.0 && s.noise.is_finite()) {
                    return Err(Error::validation("dataset.synthetic.noise", "must be non-negative"));
                }
                if !d.paths.is_empty() || !d.test_paths.is_empty() {
                    return Err(Error::validation("dataset.paths", "synthetic data takes no files"));
                }
            }
            DatasetKind::Idx => {
                if d.paths.len() != 2 {
                    return Err(Error::validation("dataset.paths", "IDX needs [images, labels]"));
                }
                if d.test_paths.len() != 2 {
                    return Err(Error::validation("dataset.test_paths", "IDX needs [images, labels]"));
                }
            }
            DatasetKind::Cifar10bin => {
                if d.paths.is_empty() {
                    return Err(Error::validation("dataset.paths", "need at least one batch file"));
                }
                if d.test_paths.is_empty() {
                    return Err(Error::validation("dataset.test_paths", "need at least one batch file"));
                }
            }
        }
        if d.kind != DatasetKind::Synthetic && d.synthetic.is_some() {
            return Err(Error::validation("dataset.synthetic", "only valid for kind = \"synthetic\""));
        }
        for (key, list) in [("dataset.paths", &d.paths), ("dataset.test_paths", &d.test_paths)] {
            if let Some(missing) = list.iter().find(|p| !p.is_file()) {
                return Err(Error::validation(key, format!("{} does not exist", missing.display())));
            }
        }
        Ok(())
    }

    pub fn trainer_mode(&self) -> TrainerMode {
        let t = &self.trainer;
        TrainerMode {
            kind: t.mode,
            rule: t.mlaan_rule,
            k: t.k,
            p: t.p,
            r: t.r,
            sync: t.sync_period.0,
            reseed_double: t.reseed_double,
            leap: LeapSelection {
                fractions: t.leap_fractions.clone(),
                ema_schedule: t.ema_schedule,
            },
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            conv_layers: self.trainer.head_conv_layers,
        }
    }

    /// Optimizer for `samples` training examples over the configured epochs.
    pub fn optimizer_for(&self, samples: usize) -> OptimizerConfig {
        let o = &self.optimizer;
        let steps = (self.run.epochs * samples.div_ceil(self.run.batch_size)) as u64;
        OptimizerConfig {
            lr_independent: o.lr,
            lr_cascaded: o.lr_cascaded.unwrap_or(o.lr),
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            schedule: CosineSchedule {
                initial_lr: o.lr,
                min_lr: o.min_lr,
                total_steps: steps.max(1),
            },
        }
    }
}

/// Turns a TOML error into a validation error naming `section.key`.
fn toml_error(doc: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let field = msg.split('`').nth(1).map(str::to_string);
    // a missing field is reported on the span of its table, header included
    let missing = msg.starts_with("missing field");
    let section = e.span().and_then(|span| {
        let end = if missing { span.end } else { span.start };
        doc[..end.min(doc.len())]
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')).map(|s| s.trim().to_string()))
    });
    let key = match (section, field) {
        (Some(s), Some(f)) if msg.starts_with("unknown field") || msg.starts_with("missing field") => format!("{s}.{f}"),
        (Some(s), _) => {
            // the span of a bad value starts at the value; name the key on that line
            let line = e
                .span()
                .and_then(|sp| doc[..sp.start.min(doc.len())].lines().last())
                .and_then(|l| l.split('=').next())
                .map(|k| k.trim().to_string())
                .filter(|k| !k.is_empty() && !k.starts_with('['));
            match line {
                Some(k) => format!("{s}.{k}"),
                None => s,
            }
        }
        (None, Some(f)) => f,
        (None, None) => "config".to_string(),
    };
    Error::validation(key, msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[backbone]
depth = 10
width = 4
classes = 3
input_shape = [1, 8, 8]

[partition]
K = 4

[trainer]
mode = "mlaan"

[run]
epochs = 2
seed = 7

[dataset]
kind = "synthetic"

[dataset.synthetic]
per_class = 10
"#;

    fn key_of(doc: &str) -> String {
        match ExperimentConfig::from_toml_str(doc, None).unwrap_err() {
            Error::Validation { key, .. } => key,
            other => panic!("not a validation error: {other}"),
        }
    }

    #[test]
    fn minimal_document_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, None).unwrap();
        assert_eq!(cfg.trainer.k, 3);
        assert_eq!(cfg.trainer.p, 3);
        assert_eq!(cfg.trainer.r, 0.99);
        assert_eq!(cfg.trainer.mlaan_rule, MlaanRule::EmaTeacher);
        assert_eq!(cfg.trainer.sync_period.0, SyncPolicy::Epoch);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 1e-4);
        assert_eq!(cfg.run.precision, Precision::F32);
        assert_eq!(cfg.output.dir, PathBuf::from("out"));
        assert_eq!(cfg.probe, ProbeConfig::default());
        let mode = cfg.trainer_mode();
        assert!(mode.validate().is_ok());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, None).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap(), None).unwrap();
        assert_eq!(cfg, again);
        let mut steps = cfg.clone();
        steps.trainer.sync_period = SyncPeriod(SyncPolicy::Steps(25));
        steps.optimizer.lr_cascaded = Some(0.02);
        let back = ExperimentConfig::from_toml_str(&steps.to_toml_string().unwrap(), None).unwrap();
        assert_eq!(steps, back);
    }

    #[test]
    fn sync_period_forms() {
        for (text, want) in [("\"never\"", SyncPolicy::Never), ("\"epoch\"", SyncPolicy::Epoch), ("40", SyncPolicy::Steps(40))] {
            let doc = MINIMAL.replace("mode = \"mlaan\"", &format!("mode = \"mlaan\"\nsync_period = {text}"));
            assert_eq!(ExperimentConfig::from_toml_str(&doc, None).unwrap().trainer.sync_period.0, want);
        }
        let doc = MINIMAL.replace("mode = \"mlaan\"", "mode = \"mlaan\"\nsync_period = 0");
        assert_eq!(key_of(&doc), "trainer.sync_period");
        let doc = MINIMAL.replace("mode = \"mlaan\"", "mode = \"mlaan\"\nsync_period = \"often\"");
        assert_eq!(key_of(&doc), "trainer.sync_period");
    }

    #[test]
    fn errors_name_the_offending_key() {
        assert_eq!(key_of(&MINIMAL.replace("mode = \"mlaan\"", "mode = \"mlaan\"\nk = 1")), "trainer.k");
        assert_eq!(key_of(&MINIMAL.replace("seed = 7\n", "")), "run.seed");
        assert_eq!(key_of(&MINIMAL.replace("epochs = 2", "epochs = 2\nspeed = 3")), "run.speed");
        assert_eq!(key_of(&MINIMAL.replace("epochs = 2", "epochs = \"two\"")), "run.epochs");
        assert_eq!(key_of(&MINIMAL.replace("mode = \"mlaan\"", "mode = \"dgl\"")), "trainer.mode");
        assert_eq!(key_of(&MINIMAL.replace("K = 4", "K = 9")), "partition.K");
        assert_eq!(key_of(&MINIMAL.replace("width = 4", "width = 0")), "backbone.width");
        assert_eq!(key_of(&format!("{MINIMAL}\n[optimizer]\nlr = -1.0\n")), "optimizer.lr");
        assert_eq!(key_of(&format!("{MINIMAL}\n[probe]\nepochs = 0\nbatch_size = 8\nlr = 0.1\nmomentum = 0.9\nweight_decay = 0.0\n")), "probe.epochs");
        let idx = MINIMAL
            .replace("kind = \"synthetic\"", "kind = \"idx\"\npaths = [\"/nonexistent/a\", \"/nonexistent/b\"]\ntest_paths = [\"/nonexistent/c\", \"/nonexistent/d\"]")
            .replace("[dataset.synthetic]\nper_class = 10\n", "");
        assert_eq!(key_of(&idx), "dataset.paths");
        let r = MINIMAL.replace("mode = \"mlaan\"", "mode = \"mlaan\"\nr = 1.0");
        assert_eq!(key_of(&r), "trainer.r");
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a", "b", "c", "d"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        let idx = MINIMAL
            .replace("kind = \"synthetic\"", "kind = \"idx\"\npaths = [\"a\", \"b\"]\ntest_paths = [\"c\", \"d\"]")
            .replace("[dataset.synthetic]\nper_class = 10\n", "");
        let cfg = ExperimentConfig::from_toml_str(&idx, Some(dir.path())).unwrap();
        assert_eq!(cfg.dataset.paths[0], dir.path().join("a"));
    }

    #[test]
    fn optimizer_schedule_spans_the_run() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, None).unwrap();
        let opt = cfg.optimizer_for(130);
        assert_eq!(opt.schedule.total_steps, 2 * 3);
        assert_eq!(opt.lr_cascaded, opt.lr_independent);
    }
}
