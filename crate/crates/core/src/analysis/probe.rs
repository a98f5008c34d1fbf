//! Linear probes on frozen, pooled intermediate features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::cka::LayerValue;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::network::Network;
use crate::nn::Layer;
use crate::optim::{sgd_nesterov_step, OptimizerConfig};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{Element, Tensor};
use crate::trainer::argmax;

/// Training budget of a probe classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("probe.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("probe.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("probe.lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("probe.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("probe.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Probe test error of one layer. The probe weights are dropped on return.
pub type ProbeResult = LayerValue;

/// Pooled, eval-mode features of `layer` for every sample, `[N×C]`.
fn features<T: Element>(net: &Network<T>, data: &Dataset<T>, layer: usize) -> Result<Tensor<T>> {
    let n = net.feature_layers();
    if layer >= n {
        return Err(Error::validation("probe.layer", format!("layer {layer} out of range 0..{n}")));
    }
    let mut rows = Vec::new();
    let mut width = 0;
    for b in data.batches(256) {
        let mut all = net.layer_features(b.images)?;
        let f = all.swap_remove(layer);
        width = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Tensor::new(vec![data.len(), width], rows)
}

fn gather<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out).expect("gathered rows")
}

/// Trains a fresh linear classifier on the frozen features of `layer` with
/// the engine's SGD stack and reports its test error. `net` is only read.
pub fn linear_probe<T: Element>(
    net: &Network<T>,
    layer: usize,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let xtr = features(net, train, layer)?;
    let xte = features(net, test, layer)?;
    let d = xtr.shape()[1];
    let mut store = ParamStore::new();
    let probe = Layer::linear(&mut store, seed, &format!("probe{layer}"), d, train.classes, true)?;
    let steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as u64;
    let opt = OptimizerConfig::new(cfg.lr, cfg.momentum, cfg.weight_decay, steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::substream(seed, "probe/shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            {
                let mut g = Graph::new();
                let x = g.input(gather(&xtr, chunk));
                let z = probe.forward(&mut g, &mut store, x, NormMode::Eval)?;
                let loss = g.softmax_cross_entropy(z, &labels)?;
                g.backward(loss, &mut store)?;
            }
            sgd_nesterov_step(&mut store, &opt, opt.schedule.lr_at(step)?, |_| false);
            step += 1;
        }
    }
    let mut g = Graph::new();
    let x = g.input(xte);
    let z = probe.forward(&mut g, &mut store, x, NormMode::Eval)?;
    let logits = g.value(z);
    let c = logits.shape()[1];
    let wrong = logits
        .data()
        .chunks(c)
        .zip(&test.labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    Ok(LayerValue {
        layer,
        value: wrong as f64 / test.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::network::{BackboneSpec, HeadConfig, Machinery};

    fn setup(seed: u64) -> (Network<f64>, Dataset<f64>, Dataset<f64>) {
        let spec = BackboneSpec {
            depth: 4,
            width: 4,
            classes: 4,
            input_shape: [1, 4, 4],
        };
        let net = Network::assemble(&spec, 2, &HeadConfig::default(), &Machinery::default(), seed).unwrap();
        let data = SynthSpec {
            classes: 4,
            per_class: 50,
            shape: [1, 4, 4],
            noise: 0.2,
            shared: 0.0,
        };
        let (train, test) = synth_dataset(&data, seed).unwrap();
        (net, train, test)
    }

    #[test]
    fn probing_reads_the_network_only() {
        let (net, train, test) = setup(1);
        let before = net.store.clone();
        let cfg = ProbeConfig { epochs: 2, ..ProbeConfig::default() };
        let r = linear_probe(&net, 1, &train, &test, &cfg, 3).unwrap();
        assert!(net.store.values_bit_eq(&before));
        assert!((0.0..=1.0).contains(&r.value));
        assert_eq!(r.layer, 1);
    }

    #[test]
    fn layer_out_of_range() {
        let (net, train, test) = setup(2);
        assert_eq!(net.feature_layers(), 3);
        let err = linear_probe(&net, 3, &train, &test, &ProbeConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("probe.layer"));
    }

    #[test]
    fn final_layer_probe_tracks_the_classifier() {
        use crate::analysis::MetricsSeries;
        use crate::trainer::{evaluate, FitConfig, Trainer, TrainerKind, TrainerMode};
        let (net, train, test) = setup(3);
        let mut t = Trainer::new(net, TrainerMode::new(TrainerKind::Bp), OptimizerConfig::new(0.05, 0.9, 5e-4, 100)).unwrap();
        let cfg = FitConfig { epochs: 20, batch_size: 32, seed: 3 };
        t.fit(&train, &test, &cfg, &mut MetricsSeries::default(), |_, _| Ok(())).unwrap();
        let own = evaluate(&t.net, &test).unwrap().test_error;
        let last = t.net.feature_layers() - 1;
        let r = linear_probe(&t.net, last, &train, &test, &ProbeConfig::default(), 1).unwrap();
        assert!(own < 0.3, "{own}");
        assert!((r.value - own).abs() <= 0.05, "probe {} vs own {own}", r.value);
    }

    #[test]
    fn probing_is_deterministic() {
        let (net, train, test) = setup(4);
        let cfg = ProbeConfig { epochs: 3, ..ProbeConfig::default() };
        let a = linear_probe(&net, 2, &train, &test, &cfg, 9).unwrap();
        let b = linear_probe(&net, 2, &train, &test, &cfg, 9).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = ProbeConfig { lr: 0.0, ..ProbeConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("probe.lr"));
    }
}
