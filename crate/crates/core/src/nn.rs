//! Layer records that own parameters in a [`ParamStore`] and emit graph ops.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, NodeId, NormMode, BN_EPS};
use crate::params::{ParamId, ParamStore, RunningStats, StatsId};
use crate::seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: ParamId,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
    },
    Relu,
    /// `relu(bn(conv3x3(x)) + x)`, channel- and resolution-preserving.
    ResidualBlock {
        conv: ParamId,
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
    },
    GlobalAvgPool,
    /// `x · W + b` on `[N×D]` inputs, `W` stored as `[D×C]`.
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
}

/// Normal(0, std²) tensor drawn from the init substream of `name`.
pub fn init_normal<T: Element>(master_seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = seed::substream(master_seed, &format!("init/{name}"), 0);
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl Layer {
    /// `3×3`, stride 1, pad 1 convolution with Kaiming fan-in init.
    pub fn conv3x3<T: Element>(store: &mut ParamStore<T>, seed: u64, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let wname = format!("{name}.w");
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let weight = store.add(wname.clone(), init_normal(seed, &wname, &[cout, cin, 3, 3], std), true)?;
        Ok(Layer::Conv2d {
            weight,
            stride: 1,
            pad: 1,
        })
    }

    pub fn batch_norm<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?;
        let stats = store.add_stats(format!("{name}.stats"), RunningStats::new(channels))?;
        Ok(Layer::BatchNorm2d { gamma, beta, stats })
    }

    pub fn residual_block<T: Element>(store: &mut ParamStore<T>, seed: u64, name: &str, width: usize) -> Result<Self> {
        let Layer::Conv2d { weight: conv, .. } = Layer::conv3x3(store, seed, &format!("{name}.conv"), width, width)? else {
            unreachable!()
        };
        let Layer::BatchNorm2d { gamma, beta, stats } = Layer::batch_norm(store, &format!("{name}.bn"), width)? else {
            unreachable!()
        };
        Ok(Layer::ResidualBlock {
            conv,
            gamma,
            beta,
            stats,
        })
    }

    /// Fully connected layer, weights `N(0, 1/fan_in)`, bias zero.
    pub fn linear<T: Element>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.w");
        let std = (1.0 / inputs as f64).sqrt();
        let weight = store.add(wname.clone(), init_normal(seed, &wname, &[inputs, outputs], std), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[outputs]), true)?)
        } else {
            None
        };
        Ok(Layer::Linear { weight, bias })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            Layer::Conv2d { weight, .. } => vec![weight],
            Layer::BatchNorm2d { gamma, beta, .. } => vec![gamma, beta],
            Layer::ResidualBlock { conv, gamma, beta, .. } => vec![conv, gamma, beta],
            Layer::Linear { weight, bias } => std::iter::once(weight).chain(bias).collect(),
            Layer::Relu | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    pub fn stats_ids(&self) -> Vec<StatsId> {
        match *self {
            Layer::BatchNorm2d { stats, .. } | Layer::ResidualBlock { stats, .. } => vec![stats],
            _ => Vec::new(),
        }
    }

    /// Blocks that map `[N×C×H×W]` to the same shape; eligible as leap sources.
    pub fn is_shape_preserving_block(&self) -> bool {
        matches!(self, Layer::ResidualBlock { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm2d { .. } => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::ResidualBlock { .. } => "residual_block",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear { .. } => "linear",
        }
    }

    /// Deep copy with fresh parameters holding the current values. Copies are
    /// trainable unless `trainable` is false (EMA-only replicas).
    pub fn replicate<T: Element>(&self, store: &mut ParamStore<T>, prefix: &str, trainable: bool) -> Result<Layer> {
        let copy_param = |store: &mut ParamStore<T>, id: ParamId, suffix: &str| -> Result<ParamId> {
            let value = store.param(id).value.clone();
            store.add(format!("{prefix}.{suffix}"), value, trainable)
        };
        let layer = match *self {
            Layer::Conv2d { weight, stride, pad } => Layer::Conv2d {
                weight: copy_param(store, weight, "w")?,
                stride,
                pad,
            },
            Layer::BatchNorm2d { gamma, beta, stats } => Layer::BatchNorm2d {
                gamma: copy_param(store, gamma, "gamma")?,
                beta: copy_param(store, beta, "beta")?,
                stats: {
                    let s = store.stats(stats).clone();
                    store.add_stats(format!("{prefix}.stats"), s)?
                },
            },
            Layer::ResidualBlock { conv, gamma, beta, stats } => Layer::ResidualBlock {
                conv: copy_param(store, conv, "conv.w")?,
                gamma: copy_param(store, gamma, "bn.gamma")?,
                beta: copy_param(store, beta, "bn.beta")?,
                stats: {
                    let s = store.stats(stats).clone();
                    store.add_stats(format!("{prefix}.bn.stats"), s)?
                },
            },
            Layer::Linear { weight, bias } => Layer::Linear {
                weight: copy_param(store, weight, "w")?,
                bias: bias.map(|b| copy_param(store, b, "b")).transpose()?,
            },
            Layer::Relu => Layer::Relu,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
        };
        Ok(layer)
    }

    /// Copies `source`'s parameter values and running stats into `self`.
    pub fn copy_from<T: Element>(&self, source: &Layer, store: &mut ParamStore<T>) -> Result<()> {
        for (src, dst) in source.param_ids().into_iter().zip(self.param_ids()) {
            store.copy_value(src, dst)?;
        }
        for (src, dst) in source.stats_ids().into_iter().zip(self.stats_ids()) {
            store.copy_stats(src, dst)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: NodeId, mode: NormMode) -> Result<NodeId> {
        match *self {
            Layer::BatchNorm2d { gamma, beta, stats } => {
                let (gn, bn) = (g.param(store, gamma), g.param(store, beta));
                g.batch_norm2d(x, gn, bn, store.stats_mut(stats), mode, BN_EPS)
            }
            Layer::ResidualBlock { conv, gamma, beta, stats } => {
                let w = g.param(store, conv);
                let h = g.conv2d(x, w, 1, 1)?;
                let (gn, bn) = (g.param(store, gamma), g.param(store, beta));
                let h = g.batch_norm2d(h, gn, bn, store.stats_mut(stats), mode, BN_EPS)?;
                let h = g.add(h, x)?;
                Ok(g.relu(h))
            }
            _ => self.forward_stateless(g, store, x),
        }
    }

    /// Eval-mode forward that never touches running statistics.
    pub fn forward_eval<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match *self {
            Layer::BatchNorm2d { gamma, beta, stats } => {
                let (gn, bn) = (g.param(store, gamma), g.param(store, beta));
                let mut s = store.stats(stats).clone();
                g.batch_norm2d(x, gn, bn, &mut s, NormMode::Eval, BN_EPS)
            }
            Layer::ResidualBlock { conv, gamma, beta, stats } => {
                let w = g.param(store, conv);
                let h = g.conv2d(x, w, 1, 1)?;
                let (gn, bn) = (g.param(store, gamma), g.param(store, beta));
                let mut s = store.stats(stats).clone();
                let h = g.batch_norm2d(h, gn, bn, &mut s, NormMode::Eval, BN_EPS)?;
                let h = g.add(h, x)?;
                Ok(g.relu(h))
            }
            _ => self.forward_stateless(g, store, x),
        }
    }

    fn forward_stateless<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match *self {
            Layer::Conv2d { weight, stride, pad } => {
                let w = g.param(store, weight);
                g.conv2d(x, w, stride, pad)
            }
            Layer::Relu => Ok(g.relu(x)),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Linear { weight, bias } => {
                let w = g.param(store, weight);
                let y = g.matmul(x, w)?;
                match bias {
                    Some(b) => {
                        let b = g.param(store, b);
                        g.add_bias(y, b)
                    }
                    None => Ok(y),
                }
            }
            Layer::BatchNorm2d { .. } | Layer::ResidualBlock { .. } => unreachable!("stateful layers handled by caller"),
        }
    }
}

pub fn forward_seq<T: Element>(
    layers: &[Layer],
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    mut x: NodeId,
    mode: NormMode,
) -> Result<NodeId> {
    for layer in layers {
        x = layer.forward(g, store, x, mode)?;
    }
    Ok(x)
}

pub fn forward_seq_eval<T: Element>(layers: &[Layer], g: &mut Graph<T>, store: &ParamStore<T>, mut x: NodeId) -> Result<NodeId> {
    for layer in layers {
        x = layer.forward_eval(g, store, x)?;
    }
    Ok(x)
}

pub fn seq_param_ids(layers: &[Layer]) -> Vec<ParamId> {
    layers.iter().flat_map(Layer::param_ids).collect()
}
