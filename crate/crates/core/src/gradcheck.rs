//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its entries)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel_error<T: Element>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| rel_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}

fn eval_loss<T: Element, F>(store: &mut ParamStore<T>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<T>, &mut ParamStore<T>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss);
    v.item().map(|x| x.as_f64()).ok_or_else(|| Error::NonScalarLoss(v.shape().to_vec()))
}

/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of `id`, leaving the value restored.
pub fn numeric_gradient<T: Element, F>(store: &mut ParamStore<T>, id: ParamId, eps: f64, f: &mut F) -> Result<Tensor<T>>
where
    F: FnMut(&mut Graph<T>, &mut ParamStore<T>) -> Result<NodeId>,
{
    let n = store.param(id).value.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.param(id).value.data()[i];
        let plus = orig + T::from_f64_lossy(eps);
        let minus = orig - T::from_f64_lossy(eps);
        store.param_mut(id).value.data_mut()[i] = plus;
        let fp = eval_loss(store, f)?;
        store.param_mut(id).value.data_mut()[i] = minus;
        let fm = eval_loss(store, f)?;
        store.param_mut(id).value.data_mut()[i] = orig;
        // divide by the step actually taken after rounding into T
        out.push(T::from_f64_lossy((fp - fm) / (plus - minus).as_f64()));
    }
    Tensor::new(store.param(id).value.shape().to_vec(), out)
}

/// Compares autodiff gradients of the scalar program `f` with central
/// differences. `f` must be a pure function of the store (no running-stat
/// updates). Gradients of `params` are zeroed before and after.
pub fn finite_diff_check<T: Element, F>(store: &mut ParamStore<T>, params: &[ParamId], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<T>, &mut ParamStore<T>) -> Result<NodeId>,
{
    for &id in params {
        store.param_mut(id).grad.fill(T::zero());
    }
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
    }
    let mut per_param = Vec::with_capacity(params.len());
    for &id in params {
        let analytic = store.param(id).grad.clone();
        let numeric = numeric_gradient(store, id, eps, &mut f)?;
        per_param.push((store.param(id).name.clone(), max_rel_error(&analytic, &numeric)));
        store.param_mut(id).grad.fill(T::zero());
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_tight() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(vec![3], &[0.3, -1.2, 2.5]).unwrap(), true).unwrap();
        let report = finite_diff_check(&mut store, &[w], 1e-5, |g, s| {
            let x = g.param(s, w);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(vec![2], &[0.7, -0.4]).unwrap(), true).unwrap();
        let mut f = |g: &mut Graph<f64>, s: &mut ParamStore<f64>| {
            let x = g.param(s, w);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let loss = f(&mut g, &mut store).unwrap();
        g.backward_scaled(loss, 2.0, &mut store).unwrap();
        let corrupted = store.param(w).grad.clone();
        let numeric = numeric_gradient(&mut store, w, 1e-5, &mut f).unwrap();
        // |2g − g| / max(|2g|, |g|)
        assert!((max_rel_error(&corrupted, &numeric) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn detach_boundary_agrees_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add("w1", Tensor::from_f64(vec![1, 1], &[0.8]).unwrap(), true).unwrap();
        let w2 = store.add("w2", Tensor::from_f64(vec![1, 1], &[-1.3]).unwrap(), true).unwrap();
        let x = Tensor::from_f64(vec![1, 1], &[2.0]).unwrap();
        let mut f = |g: &mut Graph<f64>, s: &mut ParamStore<f64>| {
            let xi = g.input(x.clone());
            let (a, b) = (g.param(s, w1), g.param(s, w2));
            let h = g.matmul(xi, a)?;
            let h = g.detach(h);
            let y = g.matmul(h, b)?;
            Ok(g.sum(y))
        };
        let mut g = Graph::new();
        let loss = f(&mut g, &mut store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.param(w1).grad.data()[0].to_bits(), 0.0f64.to_bits());
        assert!(store.param(w2).grad.data()[0] != 0.0);
        // With the boundary value held fixed, as downstream code sees it, w1
        // has no influence and the central difference is exactly zero.
        let frozen = Tensor::from_f64(vec![1, 1], &[1.6]).unwrap();
        let mut local = |g: &mut Graph<f64>, s: &mut ParamStore<f64>| {
            let _ = g.param(s, w1);
            let h = g.input(frozen.clone());
            let b = g.param(s, w2);
            let y = g.matmul(h, b)?;
            Ok(g.sum(y))
        };
        assert_eq!(numeric_gradient(&mut store, w1, 1e-5, &mut local).unwrap().data()[0], 0.0);
        // the total derivative through the detach is not zero; only the tape's is
        let n1 = numeric_gradient(&mut store, w1, 1e-5, &mut f).unwrap();
        assert!(n1.data()[0].abs() > 0.1);
    }
}
