use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel that entered the statistics.
    pub count: usize,
}

impl Var {
    /// Batch normalization over every axis except axis 1 using batch statistics.
    pub fn batch_norm_train(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xs = self.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", &xs, gamma.shape()));
        }
        let c = xs[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm", &xs, gamma.shape()));
        }
        let b = xs[0];
        let inner: usize = xs[2..].iter().product();
        let count = b * inner;
        if count == 0 {
            return Err(Error::invalid("batch norm over an empty batch"));
        }
        let x = self.value().data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let s: f64 = x[(bi * c + ci) * inner..][..inner].iter().sum();
                mean[ci] += s;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += x[(bi * c + ci) * inner..][..inner]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, be) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * inner;
                for k in o..o + inner {
                    let h = (x[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    out[k] = h * g[ci] + be[ci];
                }
            }
        }
        let gamma_v = gamma.value_rc();
        let (nx, ng, nb) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        let shape = xs.clone();
        let y = self.tape().op(
            Tensor::from_parts(xs, out),
            &[self, gamma, beta],
            move |gout| {
                let gd = gout.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let o = (bi * c + ci) * inner;
                        for k in o..o + inner {
                            sum_dy[ci] += gd[k];
                            sum_dy_xhat[ci] += gd[k] * xhat[k];
                        }
                    }
                }
                let gx = nx.then(|| {
                    let gm = gamma_v.data();
                    let nf = count as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let o = (bi * c + ci) * inner;
                            let scale = gm[ci] * inv_std[ci] / nf;
                            for k in o..o + inner {
                                dx[k] =
                                    scale * (nf * gd[k] - sum_dy[ci] - xhat[k] * sum_dy_xhat[ci]);
                            }
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                vec![
                    gx,
                    ng.then(|| Tensor::from_parts(vec![c], sum_dy_xhat)),
                    nb.then(|| Tensor::from_parts(vec![c], sum_dy)),
                ]
            },
        );
        Ok((y, BatchStats { mean, var, count }))
    }

    /// Layer normalization over the last axis with affine `[D]` parameters.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let xs = self.shape().to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::invalid("layer norm of a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", &xs, gamma.shape()));
        }
        let x = self.value().data();
        let rows = x.len() / d.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let (g, be) = (gamma.value().data(), beta.value().data());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + be[j];
            }
        }
        let gamma_v = gamma.value_rc();
        let (nx, ng, nb) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        let shape = xs.clone();
        Ok(self.tape().op(
            Tensor::from_parts(xs, out),
            &[self, gamma, beta],
            move |gout| {
                let gd = gout.data();
                let gm = gamma_v.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = nx.then(|| vec![0.0; gd.len()]);
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let nf = d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            dx[r * d + j] = inv_std[r] / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                }
                vec![
                    dx.map(|v| Tensor::from_parts(shape.clone(), v)),
                    ng.then(|| Tensor::from_parts(vec![d], dgamma)),
                    nb.then(|| Tensor::from_parts(vec![d], dbeta)),
                ]
            },
        ))
    }
}
