//! Residual backbone construction, partitioning into gradient-isolated local
//! modules, and the auxiliary machinery attached to them.
//!
//! Module indices are zero-based throughout: module `j` here is `f_{θ_{j+1}}`
//! in one-based notation.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NormMode};
use crate::nn::{forward_seq, forward_seq_eval, seq_param_ids, Layer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Stem + `depth − 2` residual blocks + classifier.
    pub depth: usize,
    pub width: usize,
    pub classes: usize,
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
}

impl BackboneSpec {
    pub fn blocks(&self) -> usize {
        self.depth.saturating_sub(2)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (w, c, cin) = (self.width, self.classes, self.input_shape[0]);
        let stem = 9 * cin * w + 2 * w;
        let block = 9 * w * w + 2 * w;
        stem + self.blocks() * block + w * c + c
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::validation("backbone.depth", "must be at least 2"));
        }
        if self.width == 0 {
            return Err(Error::validation("backbone.width", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::validation("backbone.classes", "need at least 2 classes"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::validation("backbone.input_shape", "dimensions must be positive"));
        }
        Ok(())
    }
}

/// Auxiliary head layout: `conv_layers × (3×3 conv → BN → ReLU)` → global pool → linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub conv_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { conv_layers: 1 }
    }
}

impl HeadConfig {
    pub fn param_count(&self, channels: usize, classes: usize) -> usize {
        self.conv_layers * (9 * channels * channels + 2 * channels) + channels * classes + classes
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Vec<Layer>,
    pub blocks: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

/// Stem conv → `depth − 2` residual blocks → global pool → linear classifier.
pub fn build_backbone<T: Element>(spec: &BackboneSpec, seed: u64, store: &mut ParamStore<T>) -> Result<Backbone> {
    spec.validate()?;
    let stem = vec![
        Layer::conv3x3(store, seed, "stem.conv", spec.input_shape[0], spec.width)?,
        Layer::batch_norm(store, "stem.bn", spec.width)?,
        Layer::Relu,
    ];
    let blocks = (0..spec.blocks())
        .map(|i| Layer::residual_block(store, seed, &format!("block{i}"), spec.width))
        .collect::<Result<Vec<_>>>()?;
    let classifier = vec![
        Layer::GlobalAvgPool,
        Layer::linear(store, seed, "fc", spec.width, spec.classes, true)?,
    ];
    Ok(Backbone {
        stem,
        blocks,
        classifier,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    /// Block index range of each module.
    pub ranges: Vec<Range<usize>>,
}

impl PartitionPlan {
    /// Near-equal contiguous split; the first `blocks % k` modules take one extra block.
    pub fn new(blocks: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("partition.K", "must be at least 1"));
        }
        if k > blocks.max(1) {
            return Err(Error::validation(
                "partition.K",
                format!("{k} modules exceed the {blocks} partitionable blocks"),
            ));
        }
        let (base, rem) = (blocks / k, blocks % k);
        let mut start = 0;
        let ranges = (0..k)
            .map(|j| {
                let len = base + usize::from(j < rem);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(PartitionPlan { ranges })
    }

    pub fn modules(&self) -> usize {
        self.ranges.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LocalModule {
    pub index: usize,
    pub layers: Vec<Layer>,
}

/// Splits the backbone; the stem joins module 0, the pool + classifier join the last module.
pub fn partition(backbone: Backbone, k: usize) -> Result<(PartitionPlan, Vec<LocalModule>)> {
    let plan = PartitionPlan::new(backbone.blocks.len(), k)?;
    let mut blocks = backbone.blocks.into_iter();
    let mut modules: Vec<LocalModule> = plan
        .ranges
        .iter()
        .enumerate()
        .map(|(index, r)| LocalModule {
            index,
            layers: blocks.by_ref().take(r.len()).collect(),
        })
        .collect();
    modules[0].layers.splice(0..0, backbone.stem);
    modules.last_mut().unwrap().layers.extend(backbone.classifier);
    Ok((plan, modules))
}

#[derive(Clone, Debug)]
pub struct IndependentAuxHead {
    pub owner: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub struct CascadeGroup {
    pub start: usize,
    pub span: usize,
    /// Empty when the last member is the final module, whose output already is the prediction.
    pub head: Vec<Layer>,
    pub leap: Option<LeapReplicaPair>,
}

impl CascadeGroup {
    pub fn last(&self) -> usize {
        self.start + self.span - 1
    }

    pub fn members(&self) -> Range<usize> {
        self.start..self.start + self.span
    }
}

/// Location of a leap source layer in the main network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceLayer {
    pub module: usize,
    pub layer: usize,
}

/// Two replica stacks of later-module layers inserted before an auxiliary head.
#[derive(Clone, Debug)]
pub struct LeapReplicaPair {
    pub owner: usize,
    pub sources: Vec<SourceLayer>,
    /// Gradient-trained copies, one per source.
    pub phi_prime: Vec<Layer>,
    /// EMA-trained copies of the deepest sources.
    pub phi_double: Vec<Layer>,
    /// For each `phi_double[i]`, the index of its source in `sources`/`phi_prime`.
    pub double_of: Vec<usize>,
    pub ema_rate: f64,
}

impl LeapReplicaPair {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: NodeId, mode: NormMode) -> Result<NodeId> {
        let h = forward_seq(&self.phi_prime, g, store, x, mode)?;
        forward_seq(&self.phi_double, g, store, h, mode)
    }

    pub fn double_param_ids(&self) -> Vec<ParamId> {
        seq_param_ids(&self.phi_double)
    }

    pub fn prime_param_ids(&self) -> Vec<ParamId> {
        seq_param_ids(&self.phi_prime)
    }

    /// Applies `λ ← rλ + (1−r)φ′` to every EMA replica from its gradient-trained twin.
    pub fn ema_update<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (double, &src) in self.phi_double.iter().zip(&self.double_of) {
            for (d, s) in double.param_ids().into_iter().zip(self.phi_prime[src].param_ids()) {
                let source = store.param(s).value.clone();
                crate::optim::ema_update(&mut store.param_mut(d).value, &source, self.ema_rate)?;
            }
        }
        Ok(())
    }
}

/// Which relative depths of the remaining network leap sources are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeapSelection {
    /// Visited round-robin; defaults to early / middle / deep.
    pub fractions: Vec<f64>,
    pub ema_schedule: EmaSchedule,
}

impl Default for LeapSelection {
    fn default() -> Self {
        LeapSelection {
            fractions: vec![0.1, 0.5, 0.9],
            ema_schedule: EmaSchedule::Linear,
        }
    }
}

/// How many of the `p` replicas of module `j` also get an EMA copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSchedule {
    /// `ceil(p·(j+1)/K)`: earlier modules use fewer EMA layers.
    Linear,
    /// Every replica has an EMA copy.
    Full,
}

impl EmaSchedule {
    pub fn ema_layers(self, p: usize, owner: usize, modules: usize) -> usize {
        match self {
            EmaSchedule::Linear => (p * (owner + 1)).div_ceil(modules),
            EmaSchedule::Full => p,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub store: ParamStore<T>,
    pub modules: Vec<LocalModule>,
    pub heads: Vec<IndependentAuxHead>,
    pub cascades: Vec<CascadeGroup>,
    /// Replicas feeding the independent heads, keyed by owner.
    pub leaps: Vec<LeapReplicaPair>,
}

/// What to attach on top of the partitioned backbone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Machinery {
    pub independent_heads: bool,
    pub cascade_span: Option<usize>,
    pub head_leaps: Option<LeapSpec>,
    pub cascade_leaps: Option<LeapSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeapSpec {
    pub p: usize,
    pub rate: f64,
    pub selection: LeapSelection,
}

impl<T: Element> Network<T> {
    pub fn from_modules(store: ParamStore<T>, modules: Vec<LocalModule>) -> Self {
        Network {
            store,
            modules,
            heads: Vec::new(),
            cascades: Vec::new(),
            leaps: Vec::new(),
        }
    }

    /// Builds, partitions and equips a network in one go.
    pub fn assemble(spec: &BackboneSpec, k: usize, head: &HeadConfig, machinery: &Machinery, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = build_backbone(spec, seed, &mut store)?;
        let (_, modules) = partition(backbone, k)?;
        let mut net = Network::from_modules(store, modules);
        if machinery.independent_heads {
            net.attach_independent_heads(spec.width, spec.classes, head, seed)?;
        }
        if let Some(span) = machinery.cascade_span {
            net.attach_cascade_groups(span, spec.width, spec.classes, head, seed)?;
        }
        if let Some(leap) = &machinery.head_leaps {
            for owner in 0..net.k().saturating_sub(1) {
                let p = leap.p.min(net.leap_candidates(owner).len());
                if p == 0 {
                    continue;
                }
                let pair = net.build_leap_replicas(owner, p, &leap.selection, leap.rate, &format!("leap{owner}"))?;
                net.leaps.push(pair);
            }
        }
        if let Some(leap) = &machinery.cascade_leaps {
            for gi in 0..net.cascades.len() {
                let owner = net.cascades[gi].last();
                let p = leap.p.min(net.leap_candidates(owner).len());
                if p == 0 {
                    continue;
                }
                let pair = net.build_leap_replicas(owner, p, &leap.selection, leap.rate, &format!("cleap{gi}"))?;
                net.cascades[gi].leap = Some(pair);
            }
        }
        Ok(net)
    }

    pub fn k(&self) -> usize {
        self.modules.len()
    }

    pub fn module_param_ids(&self, j: usize) -> Vec<ParamId> {
        seq_param_ids(&self.modules[j].layers)
    }

    pub fn main_param_ids(&self) -> Vec<ParamId> {
        (0..self.k()).flat_map(|j| self.module_param_ids(j)).collect()
    }

    pub fn head(&self, owner: usize) -> Option<&IndependentAuxHead> {
        self.heads.iter().find(|h| h.owner == owner)
    }

    pub fn leap(&self, owner: usize) -> Option<&LeapReplicaPair> {
        self.leaps.iter().find(|l| l.owner == owner)
    }

    /// Every EMA replica pair in the network (independent and cascaded paths).
    pub fn all_leaps(&self) -> impl Iterator<Item = &LeapReplicaPair> {
        self.leaps.iter().chain(self.cascades.iter().filter_map(|c| c.leap.as_ref()))
    }

    /// Every module except the last gets a head; the last module ends in the classifier.
    pub fn attach_independent_heads(&mut self, channels: usize, classes: usize, cfg: &HeadConfig, seed: u64) -> Result<()> {
        for owner in 0..self.k().saturating_sub(1) {
            let layers = build_head(&mut self.store, seed, &format!("head{owner}"), channels, classes, cfg)?;
            self.heads.push(IndependentAuxHead { owner, layers });
        }
        Ok(())
    }

    /// Stride-1 windows `{i..i+span−1}`, one unshared cascaded head per window.
    pub fn attach_cascade_groups(&mut self, span: usize, channels: usize, classes: usize, cfg: &HeadConfig, seed: u64) -> Result<()> {
        let k = self.k();
        if span <= 1 || span > k {
            return Err(Error::validation(
                "trainer.k",
                format!("cascade span must satisfy 1 < k ≤ K = {k}, got {span}"),
            ));
        }
        for start in 0..=k - span {
            let last = start + span - 1;
            let head = if last + 1 == k {
                Vec::new()
            } else {
                build_head(&mut self.store, seed, &format!("cascade{start}"), channels, classes, cfg)?
            };
            self.cascades.push(CascadeGroup {
                start,
                span,
                head,
                leap: None,
            });
        }
        Ok(())
    }

    /// Number of cascade groups containing module `j`.
    pub fn cascade_membership(&self, j: usize) -> usize {
        self.cascades.iter().filter(|c| c.members().contains(&j)).count()
    }

    /// Shape-preserving layers of modules after `owner`, in network order.
    pub fn leap_candidates(&self, owner: usize) -> Vec<SourceLayer> {
        self.modules
            .iter()
            .skip(owner + 1)
            .flat_map(|m| {
                m.layers
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.is_shape_preserving_block())
                    .map(move |(layer, _)| SourceLayer { module: m.index, layer })
            })
            .collect()
    }

    /// Picks `p` sources at the configured relative depths of the remaining
    /// network and deep-copies each twice.
    pub fn build_leap_replicas(&mut self, owner: usize, p: usize, selection: &LeapSelection, rate: f64, prefix: &str) -> Result<LeapReplicaPair> {
        if owner + 1 >= self.k() {
            return Err(Error::validation("trainer.p", format!("module {owner} has no subsequent modules")));
        }
        if p == 0 {
            return Err(Error::validation("trainer.p", "must be at least 1 when replicas are requested"));
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::validation("trainer.r", format!("EMA rate must lie in (0, 1), got {rate}")));
        }
        if selection.fractions.is_empty() || selection.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::validation("trainer.leap_fractions", "need fractions within [0, 1]"));
        }
        let candidates = self.leap_candidates(owner);
        let m = candidates.len();
        if p > m {
            return Err(Error::validation(
                "trainer.p",
                format!("{p} leap sources requested but only {m} layers follow module {owner}"),
            ));
        }
        let mut taken = vec![false; m];
        for l in 0..p {
            let frac = selection.fractions[l % selection.fractions.len()];
            let want = ((frac * m as f64).floor() as usize).min(m - 1);
            let idx = (0..m)
                .flat_map(|d| [want.checked_add(d), want.checked_sub(d)])
                .flatten()
                .find(|&i| i < m && !taken[i])
                .expect("p ≤ m leaves a free slot");
            taken[idx] = true;
        }
        let sources: Vec<SourceLayer> = (0..m).filter(|&i| taken[i]).map(|i| candidates[i]).collect();
        let n_ema = selection.ema_schedule.ema_layers(p, owner, self.k()).min(p);
        let mut phi_prime = Vec::with_capacity(p);
        for (l, src) in sources.iter().enumerate() {
            let layer = self.modules[src.module].layers[src.layer].clone();
            phi_prime.push(layer.replicate(&mut self.store, &format!("{prefix}.prime{l}"), true)?);
        }
        let double_of: Vec<usize> = (p - n_ema..p).collect();
        let mut phi_double = Vec::with_capacity(n_ema);
        for &l in &double_of {
            let src = sources[l];
            let layer = self.modules[src.module].layers[src.layer].clone();
            phi_double.push(layer.replicate(&mut self.store, &format!("{prefix}.ema{l}"), false)?);
        }
        Ok(LeapReplicaPair {
            owner,
            sources,
            phi_prime,
            phi_double,
            double_of,
            ema_rate: rate,
        })
    }

    /// Re-copies the replicas of `pair` from the live source layers.
    pub fn resync_replicas(&mut self, pair: &LeapReplicaPair, reseed_double: bool) -> Result<()> {
        for (replica, src) in pair.phi_prime.iter().zip(&pair.sources) {
            let source = self.modules[src.module].layers[src.layer].clone();
            replica.copy_from(&source, &mut self.store)?;
            for id in replica.param_ids() {
                self.store.param_mut(id).velocity.fill(T::zero());
            }
        }
        if reseed_double {
            for (replica, &l) in pair.phi_double.iter().zip(&pair.double_of) {
                let src = pair.sources[l];
                let source = self.modules[src.module].layers[src.layer].clone();
                replica.copy_from(&source, &mut self.store)?;
            }
        }
        Ok(())
    }

    /// Resyncs every replica pair in the network.
    pub fn resync_all(&mut self, reseed_double: bool) -> Result<()> {
        let pairs: Vec<LeapReplicaPair> = self.all_leaps().cloned().collect();
        for pair in &pairs {
            self.resync_replicas(pair, reseed_double)?;
        }
        Ok(())
    }

    /// Main-path logits in eval mode (running statistics, no mutation).
    pub fn predict(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images);
        let mut h = x;
        for m in &self.modules {
            h = forward_seq_eval(&m.layers, &mut g, &self.store, h)?;
        }
        Ok(g.value(h).clone())
    }

    /// Main-path train-mode forward without any detach: the unpartitioned network.
    pub fn forward_train(&mut self, g: &mut Graph<T>, x: NodeId, update_stats: bool) -> Result<NodeId> {
        let mut h = x;
        for j in 0..self.k() {
            let layers = std::mem::take(&mut self.modules[j].layers);
            let out = forward_seq(&layers, g, &mut self.store, h, NormMode::Train { update_stats });
            self.modules[j].layers = layers;
            h = out?;
        }
        Ok(h)
    }

    /// Number of entries `layer_features` returns.
    pub fn feature_layers(&self) -> usize {
        let blocks: usize = self
            .modules
            .iter()
            .map(|m| m.layers.iter().filter(|l| l.is_shape_preserving_block()).count())
            .sum();
        blocks + 1
    }

    /// Pooled features after each main-path layer of interest, in eval mode.
    ///
    /// Layer 0 is the stem output; layer `i ≥ 1` is the output of backbone
    /// block `i − 1` (the last index is the input to the classifier).
    pub fn layer_features(&self, images: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let mut h = g.input(images);
        let mut feats = Vec::new();
        for m in &self.modules {
            for (li, layer) in m.layers.iter().enumerate() {
                if matches!(layer, Layer::GlobalAvgPool) {
                    break;
                }
                h = layer.forward_eval(&mut g, &self.store, h)?;
                let stem_end = m.index == 0 && li + 1 == stem_len(&m.layers);
                if layer.is_shape_preserving_block() || stem_end {
                    let pooled = g.global_avg_pool(h)?;
                    feats.push(g.value(pooled).clone());
                }
            }
        }
        Ok(feats)
    }

    /// Digest of the main path only; networks trained under different
    /// modes share it when their backbones match.
    pub fn main_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.modules {
            for l in &m.layers {
                hasher.update(l.kind().as_bytes());
                for id in l.param_ids() {
                    let p = self.store.param(id);
                    hasher.update(p.name.as_bytes());
                    hasher.update(format!("{:?}", p.value.shape()).as_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stable digest of the architecture: layer kinds, parameter names and shapes.
    pub fn arch_digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut describe = |tag: &str, layers: &[Layer]| {
            hasher.update(tag.as_bytes());
            for l in layers {
                hasher.update(l.kind().as_bytes());
                for id in l.param_ids() {
                    let p = self.store.param(id);
                    hasher.update(p.name.as_bytes());
                    hasher.update(format!("{:?}{}", p.value.shape(), p.trainable).as_bytes());
                }
            }
        };
        for m in &self.modules {
            describe(&format!("module{}", m.index), &m.layers);
        }
        for h in &self.heads {
            describe(&format!("head{}", h.owner), &h.layers);
        }
        for c in &self.cascades {
            describe(&format!("cascade{}+{}", c.start, c.span), &c.head);
            if let Some(l) = &c.leap {
                describe(&format!("cleap{:?}{:?}", l.sources, l.double_of), &l.phi_prime);
                describe("ema", &l.phi_double);
            }
        }
        for l in &self.leaps {
            describe(&format!("leap{}{:?}{:?}", l.owner, l.sources, l.double_of), &l.phi_prime);
            describe("ema", &l.phi_double);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Number of leading stem layers (conv, BN, ReLU) in module 0.
fn stem_len(layers: &[Layer]) -> usize {
    layers.iter().take_while(|l| !l.is_shape_preserving_block() && !matches!(l, Layer::GlobalAvgPool)).count()
}

pub fn build_head<T: Element>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    channels: usize,
    classes: usize,
    cfg: &HeadConfig,
) -> Result<Vec<Layer>> {
    if cfg.conv_layers > 2 {
        return Err(Error::validation("head.conv_layers", "at most 2 conv layers"));
    }
    let mut layers = Vec::new();
    for c in 0..cfg.conv_layers {
        layers.push(Layer::conv3x3(store, seed, &format!("{name}.conv{c}"), channels, channels)?);
        layers.push(Layer::batch_norm(store, &format!("{name}.bn{c}"), channels)?);
        layers.push(Layer::Relu);
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::linear(store, seed, &format!("{name}.fc"), channels, classes, true)?);
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(depth: usize, width: usize) -> BackboneSpec {
        BackboneSpec {
            depth,
            width,
            classes: 10,
            input_shape: [1, 8, 8],
        }
    }

    #[test]
    fn partition_sizes() {
        assert_eq!(PartitionPlan::new(16, 8).unwrap().sizes(), vec![2; 8]);
        assert_eq!(PartitionPlan::new(17, 8).unwrap().sizes(), vec![3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(PartitionPlan::new(16, 1).unwrap().sizes(), vec![16]);
        assert!(PartitionPlan::new(4, 5).is_err());
        assert!(PartitionPlan::new(4, 0).is_err());
    }

    #[test]
    fn backbone_param_count_matches_closed_form() {
        for (depth, width) in [(2, 4), (5, 3), (18, 8)] {
            let s = spec(depth, width);
            let mut store = ParamStore::<f32>::new();
            build_backbone(&s, 0, &mut store).unwrap();
            let total: usize = store.params().iter().map(|p| p.value.numel()).sum();
            // stem 9·1·w + 2w; blocks (9w² + 2w) each; classifier w·10 + 10
            let w = width;
            let expected = 9 * w + 2 * w + (depth - 2) * (9 * w * w + 2 * w) + 10 * w + 10;
            assert_eq!(total, expected);
            assert_eq!(s.param_count(), expected);
        }
    }

    #[test]
    fn head_count_matches_closed_form() {
        let s = spec(6, 4);
        let mut net = Network::<f32>::assemble(&s, 4, &HeadConfig::default(), &Machinery::default(), 1).unwrap();
        let before = net.store.params().iter().map(|p| p.value.numel()).sum::<usize>();
        net.attach_independent_heads(4, 10, &HeadConfig { conv_layers: 2 }, 1).unwrap();
        assert_eq!(net.heads.len(), 3);
        let after = net.store.params().iter().map(|p| p.value.numel()).sum::<usize>();
        // per head: 2·(9·16 + 8) + 4·10 + 10
        assert_eq!(after - before, 3 * (2 * (9 * 16 + 8) + 40 + 10));
        assert_eq!(HeadConfig { conv_layers: 2 }.param_count(4, 10), 2 * (9 * 16 + 8) + 50);
    }

    #[test]
    fn cascade_windows_and_membership() {
        let s = spec(8, 2);
        let m = Machinery {
            independent_heads: true,
            cascade_span: Some(3),
            ..Machinery::default()
        };
        let net = Network::<f32>::assemble(&s, 6, &HeadConfig::default(), &m, 0).unwrap();
        let windows: Vec<_> = net.cascades.iter().map(|c| c.members()).collect();
        assert_eq!(windows, vec![0..3, 1..4, 2..5, 3..6]);
        let counts: Vec<_> = (0..6).map(|j| net.cascade_membership(j)).collect();
        assert_eq!(counts, vec![1, 2, 3, 3, 2, 1]);
        assert!(net.cascades.last().unwrap().head.is_empty());
    }

    #[test]
    fn cascade_span_bounds() {
        let s = spec(8, 2);
        let mut net = Network::<f32>::assemble(&s, 6, &HeadConfig::default(), &Machinery::default(), 0).unwrap();
        assert!(net.attach_cascade_groups(1, 2, 10, &HeadConfig::default(), 0).is_err());
        assert!(net.attach_cascade_groups(7, 2, 10, &HeadConfig::default(), 0).is_err());
    }

    #[test]
    fn ema_schedule_ramp() {
        let s = EmaSchedule::Linear;
        // one-based module 2 and 15 of 16 at p = 3
        assert_eq!(s.ema_layers(3, 1, 16), 1);
        assert_eq!(s.ema_layers(3, 14, 16), 3);
        assert_eq!(EmaSchedule::Full.ema_layers(3, 0, 16), 3);
    }

    #[test]
    fn last_owner_with_single_source() {
        let s = spec(18, 2);
        let mut net = Network::<f32>::assemble(&s, 8, &HeadConfig::default(), &Machinery::default(), 0).unwrap();
        let pair = net.build_leap_replicas(6, 1, &LeapSelection::default(), 0.9, "x").unwrap();
        assert_eq!(pair.sources, vec![SourceLayer { module: 7, layer: 0 }]);
        assert!(net.build_leap_replicas(6, 3, &LeapSelection::default(), 0.9, "y").is_err());
        assert!(net.build_leap_replicas(7, 1, &LeapSelection::default(), 0.9, "z").is_err());
    }

    #[test]
    fn leap_sources_spread_over_depth() {
        let s = spec(18, 2);
        let mut net = Network::<f32>::assemble(&s, 8, &HeadConfig::default(), &Machinery::default(), 0).unwrap();
        let pair = net.build_leap_replicas(0, 3, &LeapSelection::default(), 0.9, "x").unwrap();
        // 14 candidate blocks after module 0 at fractions 0.1/0.5/0.9 → 1, 7, 12
        let flat: Vec<usize> = pair.sources.iter().map(|s| (s.module - 1) * 2 + s.layer).collect();
        assert_eq!(flat, vec![1, 7, 12]);
        assert_eq!(pair.phi_double.len(), 1);
        assert_eq!(pair.double_of, vec![2]);
    }

    #[test]
    fn replicas_start_as_bitwise_copies() {
        let s = spec(10, 3);
        let mut net = Network::<f64>::assemble(&s, 4, &HeadConfig::default(), &Machinery::default(), 5).unwrap();
        let pair = net.build_leap_replicas(1, 2, &LeapSelection { ema_schedule: EmaSchedule::Full, ..Default::default() }, 0.9, "x").unwrap();
        for (i, src) in pair.sources.iter().enumerate() {
            let source = &net.modules[src.module].layers[src.layer];
            for (a, b) in source.param_ids().into_iter().zip(pair.phi_prime[i].param_ids()) {
                assert!(net.store.param(a).value.bit_eq(&net.store.param(b).value));
            }
            for (a, b) in source.param_ids().into_iter().zip(pair.phi_double[i].param_ids()) {
                assert!(net.store.param(a).value.bit_eq(&net.store.param(b).value));
                assert!(!net.store.param(b).trainable);
            }
        }
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = Network::<f32>::assemble(&spec(6, 2), 2, &HeadConfig::default(), &Machinery::default(), 0).unwrap();
        let b = Network::<f32>::assemble(&spec(6, 2), 2, &HeadConfig::default(), &Machinery::default(), 9).unwrap();
        let c = Network::<f32>::assemble(&spec(6, 3), 2, &HeadConfig::default(), &Machinery::default(), 0).unwrap();
        assert_eq!(a.arch_digest(), b.arch_digest());
        assert_ne!(a.arch_digest(), c.arch_digest());
    }
}
