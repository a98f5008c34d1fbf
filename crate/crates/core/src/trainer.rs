//! Training rules: end-to-end backprop, greedy local, multilaminar (overlapping
//! cascades), leap-augmented, and their combination, plus the epoch loop and
//! evaluation.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::metrics::{EpochRecord, MetricsSeries};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ActivationMeter, Graph, NormMode, Region};
use crate::network::{LeapSelection, LeapSpec, Machinery, Network};
use crate::nn::forward_seq;
use crate::optim::{align_flat, sgd_nesterov_step, OptimizerConfig, UpdateForm};
use crate::params::ParamId;
use crate::seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Bp,
    GreedyLocal,
    MlmOnly,
    LamOnly,
    Mlaan,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 5] = [
        TrainerKind::Bp,
        TrainerKind::GreedyLocal,
        TrainerKind::MlmOnly,
        TrainerKind::LamOnly,
        TrainerKind::Mlaan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Bp => "bp",
            TrainerKind::GreedyLocal => "greedy_local",
            TrainerKind::MlmOnly => "mlm_only",
            TrainerKind::LamOnly => "lam_only",
            TrainerKind::Mlaan => "mlaan",
        }
    }

    pub fn uses_cascades(self) -> bool {
        matches!(self, TrainerKind::MlmOnly | TrainerKind::Mlaan)
    }

    pub fn uses_leaps(self) -> bool {
        matches!(self, TrainerKind::LamOnly | TrainerKind::Mlaan)
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation("trainer.mode", format!("unknown mode `{s}`")))
    }
}

/// How the last module of each cascade window combines with its EMA replicas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlaanRule {
    /// The EMA replicas only parameterize the frozen stack on the cascaded
    /// path; module parameters receive gradient terms only.
    #[default]
    EmaTeacher,
    /// `θ_s ← θ_s − r·λ − (2−r)·η_d·∇L(ŷ_s)` with λ flattened and aligned
    /// to θ_s, followed by a plain step on the cascade gradients.
    Literal,
}

/// When gradient-trained replicas are re-copied from their live sources.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SyncPolicy {
    #[default]
    Epoch,
    Steps(u64),
    Never,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerMode {
    pub kind: TrainerKind,
    pub rule: MlaanRule,
    /// Cascade window span.
    pub k: usize,
    /// Leap sources per replica pair; 0 disables replicas.
    pub p: usize,
    /// EMA rate.
    pub r: f64,
    pub sync: SyncPolicy,
    /// Also reset the EMA replicas to their sources on resync.
    pub reseed_double: bool,
    pub leap: LeapSelection,
}

impl TrainerMode {
    pub fn new(kind: TrainerKind) -> Self {
        TrainerMode {
            kind,
            rule: MlaanRule::default(),
            k: 3,
            p: 3,
            r: 0.99,
            sync: SyncPolicy::default(),
            reseed_double: false,
            leap: LeapSelection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_cascades() && self.k <= 1 {
            return Err(Error::validation("trainer.k", format!("cascade span must exceed 1, got {}", self.k)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::validation("trainer.r", format!("EMA rate must lie in (0, 1), got {}", self.r)));
        }
        if let SyncPolicy::Steps(0) = self.sync {
            return Err(Error::validation("trainer.sync_period", "period must be positive"));
        }
        Ok(())
    }

    pub fn machinery(&self) -> Machinery {
        let leap = (self.p > 0).then(|| LeapSpec {
            p: self.p,
            rate: self.r,
            selection: self.leap.clone(),
        });
        Machinery {
            independent_heads: self.kind != TrainerKind::Bp,
            cascade_span: self.kind.uses_cascades().then_some(self.k),
            head_leaps: if self.kind == TrainerKind::LamOnly { leap.clone() } else { None },
            cascade_leaps: if self.kind == TrainerKind::Mlaan { leap } else { None },
        }
    }
}

/// Retained activation elements of one module's independent pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ModuleFootprint {
    pub main: usize,
    pub aux: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Local losses of modules `0..K−1` (empty for end-to-end training).
    pub independent: Vec<f64>,
    /// One per cascade window actually run.
    pub cascaded: Vec<f64>,
    /// Loss of the network's own classifier output.
    pub final_loss: f64,
    pub lr: f64,
    pub peak_elements: usize,
    pub peak_main: usize,
    pub largest_tensor: usize,
    pub modules: Vec<ModuleFootprint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub test_error: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FitConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size.max(1)) as u64
    }
}

const EVAL_BATCH: usize = 256;
const NON_FINITE_LIMIT: u32 = 3;

#[derive(Debug)]
pub struct Trainer<T: Element> {
    pub net: Network<T>,
    pub mode: TrainerMode,
    pub opt: OptimizerConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    meter: Rc<ActivationMeter>,
}

impl<T: Element> Clone for Trainer<T> {
    /// The clone gets its own activation meter.
    fn clone(&self) -> Self {
        Trainer {
            net: self.net.clone(),
            mode: self.mode.clone(),
            opt: self.opt,
            step: self.step,
            epoch: self.epoch,
            meter: ActivationMeter::new(),
        }
    }
}

impl<T: Element> Trainer<T> {
    pub fn new(net: Network<T>, mode: TrainerMode, opt: OptimizerConfig) -> Result<Self> {
        mode.validate()?;
        opt.validate()?;
        Ok(Trainer {
            net,
            mode,
            opt,
            step: 0,
            epoch: 0,
            meter: ActivationMeter::new(),
        })
    }

    pub fn meter(&self) -> &Rc<ActivationMeter> {
        &self.meter
    }

    /// One optimizer step under the configured rule.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        match self.mode.kind {
            TrainerKind::Bp => self.step_bp(batch),
            TrainerKind::GreedyLocal => self.step_greedy_local(batch),
            TrainerKind::MlmOnly => self.step_multilaminar(batch),
            TrainerKind::LamOnly => self.step_leap_augmented(batch),
            TrainerKind::Mlaan => self.step_mlaan(batch),
        }
    }

    /// One global forward and backward through the whole network.
    pub fn step_bp(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let lr = self.opt.schedule.lr_at(self.step)?;
        self.meter.reset_peaks();
        self.net.store.reset_counters();
        let (loss, footprint) = {
            let mut g = Graph::metered(self.meter.clone());
            let x = g.input(batch.images.clone());
            let logits = self.net.forward_train(&mut g, x, true)?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            let value = finite_loss(&g, loss, "end-to-end loss")?;
            g.backward(loss, &mut self.net.store)?;
            let footprint = ModuleFootprint {
                main: g.retained_in(Region::Main),
                aux: g.retained_in(Region::Aux),
            };
            (value, footprint)
        };
        sgd_nesterov_step(&mut self.net.store, &self.opt, lr, |_| false);
        self.step += 1;
        Ok(self.report(Vec::new(), Vec::new(), loss, lr, vec![footprint]))
    }

    pub fn step_greedy_local(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        self.step_local(batch)
    }

    pub fn step_multilaminar(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        if self.net.cascades.is_empty() && self.net.k() > 1 {
            return Err(Error::State("multilaminar step without cascade groups".into()));
        }
        self.step_local(batch)
    }

    pub fn step_leap_augmented(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        self.step_local(batch)
    }

    pub fn step_mlaan(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        if self.net.cascades.is_empty() && self.net.k() > 1 {
            return Err(Error::State("combined step without cascade groups".into()));
        }
        self.step_local(batch)
    }

    /// Shared local step. Module `j` trains on a detached copy of module
    /// `j−1`'s output. The cascade window ending at `j` is run right after
    /// module `j`'s own pass, re-forwarding its members from the stored window
    /// input. Every gradient term is accumulated before any parameter moves.
    fn step_local(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let lr = self.opt.schedule.lr_at(self.step)?;
        self.meter.reset_peaks();
        self.net.store.reset_counters();
        let k = self.net.k();
        let scale = self.opt.cascade_scale();
        let run_cascades = scale != 0.0 && !self.net.cascades.is_empty();
        let literal_owners: Vec<usize> = if self.mode.rule == MlaanRule::Literal {
            self.net.cascades.iter().filter(|c| c.leap.is_some()).map(|c| c.last()).collect()
        } else {
            Vec::new()
        };

        let mut window_inputs: Vec<Option<Tensor<T>>> = vec![None; k];
        let mut snapshots: Vec<(usize, Vec<Tensor<T>>)> = Vec::new();
        let mut independent = Vec::with_capacity(k.saturating_sub(1));
        let mut cascaded = Vec::new();
        let mut footprints = Vec::with_capacity(k);
        let mut final_loss = 0.0;
        let mut x = batch.images.clone();
        for j in 0..k {
            if run_cascades && self.net.cascades.iter().any(|c| c.start == j) {
                self.meter.acquire(Region::Main, x.numel());
                window_inputs[j] = Some(x.clone());
            }
            let (loss, out, footprint) = self.independent_pass(j, &x, &batch.labels)?;
            footprints.push(footprint);
            if j + 1 < k {
                independent.push(loss);
            } else {
                final_loss = loss;
            }
            if literal_owners.contains(&j) {
                let ids = self.net.module_param_ids(j);
                let grads = ids.iter().map(|&id| self.net.store.param(id).grad.clone()).collect();
                for &id in &ids {
                    self.net.store.param_mut(id).grad.fill(T::zero());
                }
                snapshots.push((j, grads));
            }
            if run_cascades {
                for gi in 0..self.net.cascades.len() {
                    if self.net.cascades[gi].last() != j {
                        continue;
                    }
                    let start = self.net.cascades[gi].start;
                    let input = window_inputs[start].take().expect("window input stored at its start");
                    cascaded.push(self.cascade_pass(gi, &input, &batch.labels, scale)?);
                    self.meter.release(Region::Main, input.numel());
                }
            }
            x = out;
        }

        // Cascade gradients of literal-rule modules are applied as a plain
        // step; only the rule's own terms touch θ_s.
        let cascade_grads: Vec<Vec<Tensor<T>>> = snapshots
            .iter()
            .map(|(j, _)| {
                self.net
                    .module_param_ids(*j)
                    .iter()
                    .map(|&id| self.net.store.param(id).grad.clone())
                    .collect()
            })
            .collect();
        let excluded: Vec<ParamId> = snapshots.iter().flat_map(|(j, _)| self.net.module_param_ids(*j)).collect();
        sgd_nesterov_step(&mut self.net.store, &self.opt, lr, |id| excluded.contains(&id));
        let Network { store, leaps, cascades, .. } = &mut self.net;
        for pair in leaps.iter().chain(cascades.iter().filter_map(|c| c.leap.as_ref())) {
            pair.ema_update(store)?;
        }
        for ((j, g_indep), g_casc) in snapshots.iter().zip(&cascade_grads) {
            self.literal_update(*j, g_indep, g_casc, lr)?;
        }
        self.step += 1;
        Ok(self.report(independent, cascaded, final_loss, lr, footprints))
    }

    /// Module `j`'s own forward and backward on the boundary value `x`:
    /// accumulates gradients of its local loss without stepping. Returns the
    /// loss, the module output and its retained footprint.
    pub fn independent_pass(&mut self, j: usize, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, ModuleFootprint)> {
        let k = self.net.k();
        let Network {
            store,
            modules,
            heads,
            leaps,
            ..
        } = &mut self.net;
        let train = NormMode::Train { update_stats: true };
        let mut g = Graph::metered(self.meter.clone());
        let xin = g.input(x.clone());
        let h = forward_seq(&modules[j].layers, &mut g, store, xin, train)?;
        let out = g.value(h).clone();
        let logits = if j + 1 < k {
            g.set_region(Region::Aux);
            let mut a = h;
            if let Some(pair) = leaps.iter().find(|l| l.owner == j) {
                a = pair.forward(&mut g, store, a, train)?;
            }
            let head = heads
                .iter()
                .find(|hd| hd.owner == j)
                .ok_or_else(|| Error::State(format!("module {j} has no auxiliary head")))?;
            forward_seq(&head.layers, &mut g, store, a, train)?
        } else {
            h
        };
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let value = finite_loss(&g, loss, &format!("local loss of module {j}"))?;
        g.backward(loss, store)?;
        let footprint = ModuleFootprint {
            main: g.retained_in(Region::Main),
            aux: g.retained_in(Region::Aux),
        };
        Ok((value, out, footprint))
    }

    fn cascade_pass(&mut self, gi: usize, input: &Tensor<T>, labels: &[usize], scale: f64) -> Result<f64> {
        let k = self.net.k();
        let Network {
            store,
            modules,
            cascades,
            ..
        } = &mut self.net;
        let group = &cascades[gi];
        let mut g = Graph::metered(self.meter.clone());
        let mut h = g.input(input.clone());
        // statistics were already folded in by the members' own passes
        let replay = NormMode::Train { update_stats: false };
        for m in group.members() {
            h = forward_seq(&modules[m].layers, &mut g, store, h, replay)?;
        }
        if group.last() + 1 < k {
            g.set_region(Region::Aux);
            let train = NormMode::Train { update_stats: true };
            if let Some(pair) = &group.leap {
                h = pair.forward(&mut g, store, h, train)?;
            }
            h = forward_seq(&group.head, &mut g, store, h, train)?;
        }
        let loss = g.softmax_cross_entropy(h, labels)?;
        let value = finite_loss(&g, loss, &format!("cascaded loss of window {gi}"))?;
        g.backward_scaled(loss, T::from_f64_lossy(scale), store)?;
        Ok(value)
    }

    fn literal_update(&mut self, j: usize, g_indep: &[Tensor<T>], g_casc: &[Tensor<T>], lr: f64) -> Result<()> {
        let ids = self.net.module_param_ids(j);
        let pair = self
            .net
            .cascades
            .iter()
            .find(|c| c.last() == j)
            .and_then(|c| c.leap.as_ref())
            .ok_or_else(|| Error::State(format!("module {j} has no EMA replicas")))?;
        let lambda: Vec<T> = pair
            .double_param_ids()
            .into_iter()
            .flat_map(|id| self.net.store.param(id).value.data().to_vec())
            .collect();
        let mut theta: Vec<T> = ids.iter().flat_map(|&id| self.net.store.param(id).value.data().to_vec()).collect();
        let grad: Vec<T> = g_indep.iter().flat_map(|t| t.data().to_vec()).collect();
        let lambda = align_flat(&lambda, theta.len());
        UpdateForm::collapsed().apply(&mut theta, &lambda, &grad, lr, self.mode.r)?;
        let lr_t = T::from_f64_lossy(lr);
        let casc = g_casc.iter().flat_map(|t| t.data().iter().copied());
        for (t, g) in theta.iter_mut().zip(casc) {
            *t -= lr_t * g;
        }
        let mut offset = 0;
        for &id in &ids {
            let p = self.net.store.param_mut(id);
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("parameters of module {j} after the literal update")));
        }
        Ok(())
    }

    fn report(&self, independent: Vec<f64>, cascaded: Vec<f64>, final_loss: f64, lr: f64, modules: Vec<ModuleFootprint>) -> StepReport {
        let reading = self.meter.reading();
        StepReport {
            independent,
            cascaded,
            final_loss,
            lr,
            peak_elements: reading.peak_total,
            peak_main: reading.peak_main,
            largest_tensor: reading.largest_tensor,
            modules,
        }
    }

    fn maybe_resync(&mut self, end_of_epoch: bool) -> Result<()> {
        let due = match self.mode.sync {
            SyncPolicy::Epoch => end_of_epoch,
            SyncPolicy::Steps(n) => !end_of_epoch && self.step.is_multiple_of(n),
            SyncPolicy::Never => false,
        };
        if due {
            self.net.resync_all(self.mode.reseed_double)?;
        }
        Ok(())
    }

    /// Runs epochs `self.epoch + 1 ..= cfg.epochs`, appending one record per
    /// epoch to `metrics` and calling `on_epoch` after each.
    pub fn fit<F>(&mut self, train: &Dataset<T>, test: &Dataset<T>, cfg: &FitConfig, metrics: &mut MetricsSeries, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer<T>, &MetricsSeries) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::validation("dataset", "training set is empty"));
        }
        let mut bad_steps = 0;
        while self.epoch < cfg.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut seed::substream(cfg.seed, "shuffle", self.epoch));
            let (mut loss_sum, mut counted, mut peak, mut lr) = (0.0, 0usize, 0usize, 0.0);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch = train.batch(chunk);
                match self.step(&batch) {
                    Ok(rep) => {
                        bad_steps = 0;
                        loss_sum += rep.final_loss;
                        counted += 1;
                        peak = peak.max(rep.peak_elements);
                        lr = rep.lr;
                    }
                    Err(Error::NonFinite(what)) => {
                        bad_steps += 1;
                        self.net.store.zero_grads();
                        lr = self.opt.schedule.lr_at(self.step)?;
                        self.step += 1;
                        if bad_steps >= NON_FINITE_LIMIT {
                            return Err(Error::NonFinite(format!(
                                "{what}; {NON_FINITE_LIMIT} consecutive non-finite steps, aborting at step {}",
                                self.step
                            )));
                        }
                    }
                    Err(e) => return Err(e),
                }
                self.maybe_resync(false)?;
            }
            self.maybe_resync(true)?;
            self.epoch += 1;
            let test_error = evaluate(&self.net, test)?.test_error;
            metrics.record(EpochRecord {
                epoch: self.epoch,
                train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
                test_error,
                lr,
                peak_elements: peak as u64,
                wall_time_s: started.elapsed().as_secs_f64(),
            })?;
            on_epoch(self, metrics)?;
        }
        Ok(())
    }
}

fn finite_loss<T: Element>(g: &Graph<T>, loss: crate::graph::NodeId, what: &str) -> Result<f64> {
    let v = g.value(loss).data()[0].as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Argmax error of the main network in eval mode; never mutates the network.
pub fn evaluate<T: Element>(net: &Network<T>, data: &Dataset<T>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::validation("dataset", "evaluation set is empty"));
    }
    let mut correct = vec![0usize; data.classes];
    let mut total = vec![0usize; data.classes];
    for batch in data.batches(EVAL_BATCH) {
        let logits = net.predict(batch.images)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            total[label] += 1;
            if argmax(row) == label {
                correct[label] += 1;
            }
        }
    }
    let right: usize = correct.iter().sum();
    Ok(EvalReport {
        test_error: 1.0 - right as f64 / data.len() as f64,
        per_class_accuracy: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
        samples: data.len(),
    })
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}
