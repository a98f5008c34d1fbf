//! End-to-end runs: training with checkpoints, mode ablations, memory
//! comparisons, and evaluation/probing/CKA of saved checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{layerwise_cka, linear_probe, meter_peak_activations, CkaReport, LayerValue, MemoryReport, MetricsSeries};
use crate::checkpoint::{load_checkpoint, load_sidecar, save_checkpoint, Sidecar};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_cifar10_bin, load_idx, resize, subsample_indices, synth_dataset, Dataset, Resize, SynthSpec};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Element;
use crate::trainer::{evaluate, EvalReport, FitConfig, Trainer, TrainerKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mlnn";

/// Training and test splits described by `cfg`, shaped for its backbone.
pub fn load_datasets<T: Element>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = &cfg.dataset;
    let classes = cfg.backbone.classes;
    let (train, test) = match d.kind {
        DatasetKind::Synthetic => {
            let s = d.synthetic.as_ref().ok_or_else(|| Error::validation("dataset.synthetic", "missing"))?;
            let spec = SynthSpec {
                classes,
                per_class: s.per_class,
                shape: cfg.backbone.input_shape,
                noise: s.noise,
                shared: s.shared,
            };
            let (train, test) = synth_dataset(&spec, s.seed.unwrap_or(cfg.run.seed))?;
            let keep = subsample_indices(train.len(), d.subset_size, cfg.run.seed);
            (train.subset(&keep), test)
        }
        DatasetKind::Idx => {
            let train = load_idx(&d.paths[0], &d.paths[1], classes)?;
            let keep = subsample_indices(train.len(), d.subset_size, cfg.run.seed);
            (train.subset(&keep), load_idx(&d.test_paths[0], &d.test_paths[1], classes)?)
        }
        DatasetKind::Cifar10bin => {
            if classes != 10 {
                return Err(Error::validation("backbone.classes", "CIFAR-10 has 10 classes"));
            }
            (
                load_cifar10_bin(&d.paths, d.subset_size, cfg.run.seed)?,
                load_cifar10_bin(&d.test_paths, 0, cfg.run.seed)?,
            )
        }
    };
    Ok((fit_shape(train, cfg, d.resize)?, fit_shape(test, cfg, d.resize)?))
}

fn fit_shape<T: Element>(data: Dataset<T>, cfg: &ExperimentConfig, policy: Resize) -> Result<Dataset<T>> {
    if data.sample_shape() == cfg.backbone.input_shape {
        Ok(data)
    } else {
        resize(&data, cfg.backbone.input_shape, policy)
    }
}

/// A freshly initialized trainer for `cfg`; `samples` sizes the LR schedule.
pub fn build_trainer<T: Element>(cfg: &ExperimentConfig, samples: usize) -> Result<Trainer<T>> {
    let mode = cfg.trainer_mode();
    let net = Network::assemble(&cfg.backbone, cfg.partition.k, &cfg.head(), &mode.machinery(), cfg.run.seed)?;
    Trainer::new(net, mode, cfg.optimizer_for(samples))
}

pub fn fit_config(cfg: &ExperimentConfig) -> FitConfig {
    FitConfig {
        epochs: cfg.run.epochs as u64,
        batch_size: cfg.run.batch_size,
        seed: cfg.run.seed,
    }
}

pub struct RunOutcome<T: Element> {
    pub trainer: Trainer<T>,
    pub metrics: MetricsSeries,
    pub test: EvalReport,
}

/// Trains `cfg` into `out`, writing `metrics.csv` and a checkpoint after
/// every epoch. With `resume`, continues from that checkpoint's state and
/// metrics; its configuration must equal `cfg` apart from `run.epochs`.
pub fn train<T: Element>(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&crate::analysis::EpochRecord),
) -> Result<RunOutcome<T>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, test) = load_datasets::<T>(cfg)?;
    let mut trainer = build_trainer::<T>(cfg, train.len())?;
    let mut metrics = MetricsSeries::default();
    if let Some(path) = resume {
        let side = load_sidecar(path)?;
        let mut saved = side.config.clone();
        saved.run.epochs = cfg.run.epochs;
        saved.output = cfg.output.clone();
        if saved != *cfg {
            return Err(Error::validation("resume", "checkpoint was written under a different configuration"));
        }
        if side.config.run.epochs != cfg.run.epochs {
            // the schedule length is part of the trajectory
            return Err(Error::validation("run.epochs", "must match the checkpointed run to resume it exactly"));
        }
        load_checkpoint::<T>(path)?.restore_into(&mut trainer)?;
        metrics = side.metrics;
    }
    fs::write(out.join("config.toml"), cfg.to_toml_string()?).map_err(|e| Error::io(out.join("config.toml"), e))?;
    metrics.save(&out.join(METRICS_FILE))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let start_epoch = trainer.epoch;
    trainer.fit(&train, &test, &fit_config(cfg), &mut metrics, |t, m| {
        if let Some(last) = m.records.last() {
            on_epoch(last);
        }
        m.save(&out.join(METRICS_FILE))?;
        save_checkpoint(&ckpt, t, cfg, m)
    })?;
    if trainer.epoch == start_epoch {
        save_checkpoint(&ckpt, &trainer, cfg, &metrics)?;
    }
    let test = evaluate(&trainer.net, &test)?;
    Ok(RunOutcome { trainer, metrics, test })
}

/// One row of an ablation table: a mode's results averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: TrainerKind,
    pub seeds: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub best_test_error: f64,
    pub final_train_loss: f64,
    pub peak_elements: u64,
    pub wall_time_s: f64,
}

pub const ABLATION_HEADER: &str = "mode,seeds,mean_test_error,std_test_error,best_test_error,final_train_loss,peak_elements,wall_time_s";

/// Runs `cfg` once per mode and seed under `out/<mode>/seed<s>/` and writes
/// `out/summary.csv` with one row per mode.
pub fn ablate<T: Element>(cfg: &ExperimentConfig, modes: &[TrainerKind], seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    if modes.is_empty() {
        return Err(Error::validation("grid", "no modes given"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "no seeds given"));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        let mut errors = Vec::new();
        let (mut best, mut loss, mut peak, mut wall) = (f64::INFINITY, 0.0, 0u64, 0.0);
        for &seed in seeds {
            let mut c = cfg.clone();
            c.trainer.mode = mode;
            c.run.seed = seed;
            c.validate().map_err(|e| match e {
                Error::Validation { key, reason } => Error::validation(key, format!("{reason} (mode {mode})")),
                other => other,
            })?;
            let dir = out.join(mode.name()).join(format!("seed{seed}"));
            let run = train::<T>(&c, &dir, None, |_| {})?;
            errors.push(run.test.test_error);
            for r in &run.metrics.records {
                best = best.min(r.test_error);
                peak = peak.max(r.peak_elements);
                wall += r.wall_time_s;
            }
            loss += run.metrics.records.last().map_or(f64::NAN, |r| r.train_loss);
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        rows.push(AblationRow {
            mode,
            seeds: seeds.len(),
            mean_test_error: mean,
            std_test_error: var.sqrt(),
            best_test_error: best,
            final_train_loss: loss / n,
            peak_elements: peak,
            wall_time_s: wall,
        });
    }
    write_ablation(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mode, r.seeds, r.mean_test_error, r.std_test_error, r.best_test_error, r.final_train_loss, r.peak_elements, r.wall_time_s
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KSweepRow {
    pub modules: usize,
    pub mode: TrainerKind,
    pub peak_elements: u64,
    pub peak_main: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemstatReport {
    pub batch_size: usize,
    pub bp: MemoryReport,
    pub local: Vec<MemoryReport>,
    /// `1 − peak(mode) / peak(bp)` for each entry of `local`.
    pub reduction: Vec<f64>,
    pub k_sweep: Vec<KSweepRow>,
}

/// Meters one step of every mode at the configured `K`, and of greedy local
/// learning and the configured mode over `K ∈ {1, 2, 4, 8}`.
pub fn memstat<T: Element>(cfg: &ExperimentConfig) -> Result<MemstatReport> {
    let (train, _) = load_datasets::<T>(cfg)?;
    let take: Vec<usize> = (0..cfg.run.batch_size.min(train.len())).collect();
    let batch = train.batch(&take);
    let meter = |mode: TrainerKind, k: usize| -> Result<Option<MemoryReport>> {
        let mut c = cfg.clone();
        c.trainer.mode = mode;
        c.partition.k = k;
        if c.validate().is_err() {
            return Ok(None);
        }
        let t = build_trainer::<T>(&c, train.len())?;
        meter_peak_activations(&t, &batch).map(Some)
    };
    let bp = meter(TrainerKind::Bp, cfg.partition.k)?.ok_or_else(|| Error::validation("partition.K", "invalid for bp"))?;
    let mut local = Vec::new();
    for mode in TrainerKind::ALL.into_iter().filter(|&m| m != TrainerKind::Bp) {
        if let Some(r) = meter(mode, cfg.partition.k)? {
            local.push(r);
        }
    }
    let reduction = local.iter().map(|r| 1.0 - r.peak_elements as f64 / bp.peak_elements as f64).collect();
    let mut sweep_modes = vec![TrainerKind::GreedyLocal];
    if cfg.trainer.mode != TrainerKind::GreedyLocal {
        sweep_modes.push(cfg.trainer.mode);
    }
    let mut k_sweep = Vec::new();
    for mode in sweep_modes {
        for k in [1, 2, 4, 8] {
            if let Some(r) = meter(mode, k)? {
                k_sweep.push(KSweepRow {
                    modules: k,
                    mode,
                    peak_elements: r.peak_elements,
                    peak_main: r.peak_main,
                });
            }
        }
    }
    Ok(MemstatReport {
        batch_size: batch.labels.len(),
        bp,
        local,
        reduction,
        k_sweep,
    })
}

/// A dataset named on the command line: `idx:IMAGES,LABELS`,
/// `cifar10bin:FILE[,FILE…]`, or `synthetic[:SEED]` (the checkpoint's own
/// synthetic family, test split).
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Idx(PathBuf, PathBuf),
    Cifar10Bin(Vec<PathBuf>),
    Synthetic(Option<u64>),
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let paths: Vec<PathBuf> = rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
        match kind {
            "idx" if paths.len() == 2 => Ok(DatasetSource::Idx(paths[0].clone(), paths[1].clone())),
            "idx" => Err(Error::validation("dataset", "expected idx:IMAGES,LABELS")),
            "cifar10bin" if !paths.is_empty() => Ok(DatasetSource::Cifar10Bin(paths)),
            "cifar10bin" => Err(Error::validation("dataset", "expected cifar10bin:FILE[,FILE…]")),
            "synthetic" if rest.is_empty() => Ok(DatasetSource::Synthetic(None)),
            "synthetic" => rest
                .parse()
                .map(|s| DatasetSource::Synthetic(Some(s)))
                .map_err(|_| Error::validation("dataset", format!("bad synthetic seed `{rest}`"))),
            other => Err(Error::validation("dataset", format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Loads `src` and brings it to the network's input shape with `policy`.
pub fn load_source<T: Element>(src: &DatasetSource, cfg: &ExperimentConfig, policy: Resize) -> Result<Dataset<T>> {
    let classes = cfg.backbone.classes;
    let data = match src {
        DatasetSource::Idx(img, lbl) => {
            for p in [img, lbl] {
                if !p.is_file() {
                    return Err(Error::validation("dataset", format!("{} does not exist", p.display())));
                }
            }
            load_idx(img, lbl, classes)?
        }
        DatasetSource::Cifar10Bin(paths) => {
            if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                return Err(Error::validation("dataset", format!("{} does not exist", p.display())));
            }
            load_cifar10_bin(paths, 0, cfg.run.seed)?
        }
        DatasetSource::Synthetic(seed) => {
            let s = cfg
                .dataset
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::validation("dataset", "the checkpoint was not trained on synthetic data"))?;
            let spec = SynthSpec {
                classes,
                per_class: s.per_class,
                shape: cfg.backbone.input_shape,
                noise: s.noise,
                shared: s.shared,
            };
            synth_dataset(&spec, seed.or(s.seed).unwrap_or(cfg.run.seed))?.1
        }
    };
    if data.classes > classes || data.labels.iter().any(|&l| l >= classes) {
        return Err(Error::validation("dataset", format!("labels exceed the network's {classes} classes")));
    }
    if data.sample_shape() == cfg.backbone.input_shape {
        Ok(data)
    } else {
        resize(&data, cfg.backbone.input_shape, policy)
    }
}

/// A trainer restored from a checkpoint, plus its sidecar.
pub fn restore<T: Element>(path: &Path) -> Result<(Sidecar, Trainer<T>)> {
    let side = load_sidecar(path)?;
    // the schedule length does not matter outside training
    let mut trainer = build_trainer::<T>(&side.config, 1)?;
    load_checkpoint::<T>(path)?.restore_into(&mut trainer)?;
    Ok((side, trainer))
}

pub fn eval_checkpoint<T: Element>(path: &Path, src: &DatasetSource, policy: Resize) -> Result<EvalReport> {
    let (side, trainer) = restore::<T>(path)?;
    let data = load_source::<T>(src, &side.config, policy)?;
    evaluate(&trainer.net, &data)
}

/// Probes the given layers (all when `None`) of a checkpointed network on
/// its own training and test data.
pub fn probe_checkpoint<T: Element>(path: &Path, layer: Option<usize>) -> Result<Vec<LayerValue>> {
    let (side, trainer) = restore::<T>(path)?;
    let (train, test) = load_datasets::<T>(&side.config)?;
    let layers: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => (0..trainer.net.feature_layers()).collect(),
    };
    layers
        .into_iter()
        .map(|l| linear_probe(&trainer.net, l, &train, &test, &side.config.probe, side.config.run.seed))
        .collect()
}

/// Samples of the comparison batch used by `cka_checkpoints`.
pub const CKA_SAMPLES: usize = 1000;

/// Layerwise CKA of two checkpoints on the first test samples of `a`'s data.
pub fn cka_checkpoints<T: Element>(a: &Path, b: &Path) -> Result<CkaReport> {
    let (side, ta) = restore::<T>(a)?;
    let (_, tb) = restore::<T>(b)?;
    let (_, test) = load_datasets::<T>(&side.config)?;
    let take: Vec<usize> = (0..test.len().min(CKA_SAMPLES)).collect();
    layerwise_cka(&ta.net, &tb.net, &test.subset(&take))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::peek_header;

    fn cfg(mode: &str, epochs: usize) -> ExperimentConfig {
        let doc = format!(
            r#"
[backbone]
depth = 6
width = 3
classes = 3
input_shape = [1, 6, 6]
[partition]
K = 4
[trainer]
mode = "{mode}"
k = 2
p = 1
[optimizer]
lr = 0.05
[run]
epochs = {epochs}
batch_size = 16
seed = 5
precision = "f64"
[dataset]
kind = "synthetic"
[dataset.synthetic]
per_class = 20
noise = 0.8
"#
        );
        ExperimentConfig::from_toml_str(&doc, None).unwrap()
    }

    #[test]
    fn train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let run = train::<f64>(&cfg("mlaan", 2), dir.path(), None, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(MetricsSeries::load(&dir.path().join(METRICS_FILE)).unwrap(), run.metrics);
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        assert_eq!(peek_header(&ckpt).unwrap().epoch, 2);
        let (side, t) = restore::<f64>(&ckpt).unwrap();
        assert!(t.net.store.state_bit_eq(&run.trainer.net.store));
        assert_eq!(side.metrics, run.metrics);
        let again = eval_checkpoint::<f64>(&ckpt, &DatasetSource::Synthetic(None), Resize::None).unwrap();
        assert_eq!(again.test_error, run.test.test_error);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let full_dir = tempfile::tempdir().unwrap();
        let full = train::<f64>(&cfg("mlaan", 3), full_dir.path(), None, |_| {}).unwrap();
        // a run stopped after its first epoch
        let c = cfg("mlaan", 3);
        let ckpt_dir = tempfile::tempdir().unwrap();
        let first = {
            let (train_set, test_set) = load_datasets::<f64>(&c).unwrap();
            let mut t = build_trainer::<f64>(&c, train_set.len()).unwrap();
            let mut m = MetricsSeries::default();
            let mut fc = fit_config(&c);
            fc.epochs = 1;
            t.fit(&train_set, &test_set, &fc, &mut m, |_, _| Ok(())).unwrap();
            let p = ckpt_dir.path().join(CHECKPOINT_FILE);
            save_checkpoint(&p, &t, &c, &m).unwrap();
            p
        };
        let resumed_dir = tempfile::tempdir().unwrap();
        let resumed = train::<f64>(&c, resumed_dir.path(), Some(&first), |_| {}).unwrap();
        assert!(resumed.metrics.same_run(&full.metrics));
        assert!(resumed.trainer.net.store.state_bit_eq(&full.trainer.net.store));
        let a = fs::read_to_string(full_dir.path().join(METRICS_FILE)).unwrap();
        let b = fs::read_to_string(resumed_dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(strip_wall(&a), strip_wall(&b));
    }

    fn strip_wall(csv: &str) -> Vec<String> {
        csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
    }

    #[test]
    fn resume_refuses_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        train::<f64>(&cfg("mlaan", 1), dir.path(), None, |_| {}).unwrap();
        let other = tempfile::tempdir().unwrap();
        let err = train::<f64>(&cfg("bp", 1), other.path(), Some(&dir.path().join(CHECKPOINT_FILE)), |_| {});
        assert!(err.is_err());
    }

    #[test]
    fn ablation_has_one_row_per_mode() {
        let dir = tempfile::tempdir().unwrap();
        let modes = [TrainerKind::GreedyLocal, TrainerKind::Mlaan];
        let rows = ablate::<f64>(&cfg("mlaan", 1), &modes, &[1, 2], dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().next().unwrap(), ABLATION_HEADER);
        assert_eq!(summary.lines().count(), 3);
        assert!(dir.path().join("mlaan/seed2/metrics.csv").is_file());
    }

    #[test]
    fn memstat_reports_every_local_mode() {
        let r = memstat::<f64>(&cfg("mlaan", 1)).unwrap();
        assert_eq!(r.local.len(), 4);
        // on a backbone this shallow only the plain local mode is guaranteed below bp
        assert!(r.local[0].peak_elements < r.bp.peak_elements);
        assert_eq!(r.local[0].mode, TrainerKind::GreedyLocal);
        let greedy: Vec<u64> = r.k_sweep.iter().filter(|s| s.mode == TrainerKind::GreedyLocal).map(|s| s.peak_main).collect();
        assert_eq!(greedy.len(), 3, "K = 8 exceeds the 4 blocks");
        assert!(greedy.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dataset_source_strings() {
        assert_eq!(
            "idx:a,b".parse::<DatasetSource>().unwrap(),
            DatasetSource::Idx("a".into(), "b".into())
        );
        assert_eq!("synthetic:4".parse::<DatasetSource>().unwrap(), DatasetSource::Synthetic(Some(4)));
        assert_eq!("synthetic".parse::<DatasetSource>().unwrap(), DatasetSource::Synthetic(None));
        assert!("idx:a".parse::<DatasetSource>().is_err());
        assert!("stl10:x".parse::<DatasetSource>().is_err());
    }
}
