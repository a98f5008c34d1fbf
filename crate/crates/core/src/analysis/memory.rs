//! Peak retained-activation accounting for one training step.

use serde::Serialize;

use crate::data::Batch;
use crate::error::Result;
use crate::tensor::Element;
use crate::trainer::{ModuleFootprint, Trainer, TrainerKind};

/// Bytes per element used for `bytes_estimate`, independent of the run's precision.
pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub mode: TrainerKind,
    pub modules: usize,
    /// Most activation elements alive at once during the step.
    pub peak_elements: u64,
    /// Same, counting only main-path activations (and stored window inputs).
    pub peak_main: u64,
    /// `peak_elements − peak_main`: what the auxiliary networks add on top.
    pub head_overhead: u64,
    pub largest_tensor: u64,
    pub per_module: Vec<ModuleFootprint>,
    pub bytes_estimate: u64,
}

/// Runs one step of `trainer`'s mode on a private copy and reports the meter.
/// The trainer itself is not touched.
pub fn meter_peak_activations<T: Element>(trainer: &Trainer<T>, batch: &Batch<T>) -> Result<MemoryReport> {
    let mut probe = trainer.clone();
    let rep = probe.step(batch)?;
    let peak = rep.peak_elements as u64;
    let main = rep.peak_main as u64;
    Ok(MemoryReport {
        mode: trainer.mode.kind,
        modules: trainer.net.k(),
        peak_elements: peak,
        peak_main: main,
        head_overhead: peak.saturating_sub(main),
        largest_tensor: rep.largest_tensor as u64,
        per_module: rep.modules,
        bytes_estimate: peak * BYTES_PER_ELEMENT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{IndependentAuxHead, LocalModule, Network};
    use crate::nn::Layer;
    use crate::optim::OptimizerConfig;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::trainer::TrainerMode;

    /// `k` modules, each one bias-free `c×c` linear layer, with `c×c` heads.
    fn uniform_chain(k: usize, c: usize) -> Network<f64> {
        let mut store = ParamStore::new();
        let modules = (0..k)
            .map(|j| LocalModule {
                index: j,
                layers: vec![Layer::linear(&mut store, 1, &format!("m{j}"), c, c, false).unwrap()],
            })
            .collect();
        let heads: Vec<_> = (0..k.saturating_sub(1))
            .map(|j| IndependentAuxHead {
                owner: j,
                layers: vec![Layer::linear(&mut store, 1, &format!("h{j}"), c, c, false).unwrap()],
            })
            .collect();
        let mut net = Network::from_modules(store, modules);
        net.heads = heads;
        net
    }

    fn batch(n: usize, c: usize) -> Batch<f64> {
        let x: Vec<f64> = (0..n * c).map(|i| (i as f64 * 0.37).sin()).collect();
        Batch {
            images: Tensor::from_f64(vec![n, c], &x).unwrap(),
            labels: (0..n).map(|i| i % c).collect(),
        }
    }

    fn report(kind: TrainerKind, k: usize) -> MemoryReport {
        let opt = OptimizerConfig::new(0.1, 0.9, 0.0, 10);
        let t = Trainer::new(uniform_chain(k, 3), TrainerMode::new(kind), opt).unwrap();
        meter_peak_activations(&t, &batch(5, 3)).unwrap()
    }

    #[test]
    fn one_module_peaks_agree() {
        let (bp, local) = (report(TrainerKind::Bp, 1), report(TrainerKind::GreedyLocal, 1));
        assert_eq!(bp.peak_elements, local.peak_elements);
        assert_eq!(bp.peak_main, local.peak_main);
    }

    #[test]
    fn retention_counts_on_uniform_chain() {
        // every node retains its output: input and K matmuls of N·c, plus a scalar loss
        let nc = 15;
        for k in [1, 2, 4, 8] {
            let bp = report(TrainerKind::Bp, k);
            assert_eq!(bp.peak_elements, (k as u64 + 1) * nc + 1);
            assert_eq!(bp.head_overhead, 0);
            let local = report(TrainerKind::GreedyLocal, k);
            // one module at a time: input, its output, then head output and loss
            let want = if k == 1 { 2 * nc + 1 } else { 3 * nc + 1 };
            assert_eq!(local.peak_elements, want, "K={k}");
            assert_eq!(local.peak_main, 2 * nc + 1);
            assert_eq!(local.bytes_estimate, 4 * local.peak_elements);
            assert!(local.peak_elements >= local.largest_tensor);
        }
    }

    #[test]
    fn metering_leaves_the_trainer_untouched() {
        let opt = OptimizerConfig::new(0.1, 0.9, 0.0, 10);
        let t = Trainer::new(uniform_chain(3, 3), TrainerMode::new(TrainerKind::GreedyLocal), opt).unwrap();
        let before = t.net.store.clone();
        meter_peak_activations(&t, &batch(4, 3)).unwrap();
        assert!(t.net.store.values_bit_eq(&before));
        assert_eq!(t.step, 0);
    }
}
