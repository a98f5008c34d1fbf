//! Linear centered kernel alignment between layer representations.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Element, Tensor};

/// One `{layer, value}` entry of a similarity or probe table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerValue {
    pub layer: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaReport {
    pub layers: Vec<LayerValue>,
    pub mean: f64,
}

fn centered<T: Element>(x: &Tensor<T>, what: &str) -> Result<(Vec<f64>, usize, usize)> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::shape("cka", format!("{what} must be [N×d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::validation("cka", format!("{what} needs at least 2 samples")));
    }
    let mut v = x.to_f64_vec();
    for c in 0..d {
        let mean = (0..n).map(|i| v[i * d + c]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * d + c] -= mean;
        }
    }
    Ok((v, n, d))
}

/// Frobenius norm squared of `Aᵀ B` for row-major `A [n×da]`, `B [n×db]`.
fn cross_norm_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut m = vec![0.0; da * db];
    f64::gemm(da, n, db, 1.0, a, 1, da as isize, b, db as isize, 1, 0.0, &mut m, db as isize, 1);
    m.iter().map(|v| v * v).sum()
}

/// `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F · ‖Yᶜᵀ Yᶜ‖_F)` with column-centred features,
/// computed in `f64` whatever the element type.
pub fn cka_linear<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (xc, n, dx) = centered(x, "X")?;
    let (yc, ny, dy) = centered(y, "Y")?;
    if n != ny {
        return Err(Error::shape("cka", format!("{n} vs {ny} samples")));
    }
    let xx = cross_norm_sq(&xc, dx, &xc, dx, n).sqrt();
    let yy = cross_norm_sq(&yc, dy, &yc, dy, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::State("CKA is undefined for zero-variance features".into()));
    }
    Ok(cross_norm_sq(&yc, dy, &xc, dx, n) / (xx * yy))
}

/// CKA of every pooled main-path layer of `a` against the same layer of `b`.
pub fn layerwise_cka<T: Element>(a: &Network<T>, b: &Network<T>, data: &Dataset<T>) -> Result<CkaReport> {
    if a.main_digest() != b.main_digest() {
        return Err(Error::validation("checkpoint", "main-path architectures differ"));
    }
    let fa = a.layer_features(data.images.clone())?;
    let fb = b.layer_features(data.images.clone())?;
    let layers = fa
        .iter()
        .zip(&fb)
        .enumerate()
        .map(|(layer, (x, y))| Ok(LayerValue { layer, value: cka_linear(x, y)? }))
        .collect::<Result<Vec<_>>>()?;
    let mean = layers.iter().map(|l| l.value).sum::<f64>() / layers.len().max(1) as f64;
    Ok(CkaReport { layers, mean })
}
