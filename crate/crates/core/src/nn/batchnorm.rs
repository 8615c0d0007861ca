//! Batch normalization over the last (channel) axis.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<R = f32> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    pub epsilon: R,
    pub momentum: R,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid(
                "batchnorm needs at least one channel".into(),
            ));
        }
        Ok(Self {
            gamma: Tensor::full(&[channels], R::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], R::one()),
            epsilon: R::lit(BN_EPSILON),
            momentum: R::lit(BN_MOMENTUM),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(a, b)` such that inference output is `a * x + b`.
    pub fn folded_affine(&self) -> (Vec<R>, Vec<R>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let a = self.gamma.data()[c] / (self.running_var.data()[c] + self.epsilon).sqrt();
            scale.push(a);
            shift.push(self.beta.data()[c] - a * self.running_mean.data()[c]);
        }
        (scale, shift)
    }

    pub fn update_running(&mut self, stats: &BatchStats<R>) {
        let mom = self.momentum;
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = mom * *rm + (R::one() - mom) * stats.mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = mom * *rv + (R::one() - mom) * stats.var[ch];
        }
    }

    pub fn cast<S: Real>(&self) -> BatchNorm<S> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            epsilon: self.epsilon.cast(),
            momentum: self.momentum.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum BnCache<R = f32> {
    Train {
        xhat: Vec<Tensor<R>>,
        inv_std: Vec<R>,
    },
    Infer {
        inputs: Vec<Tensor<R>>,
    },
}

#[derive(Debug, Clone)]
pub struct BnGrads<R = f32> {
    pub inputs: Vec<Tensor<R>>,
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
}

fn check_channels<R: Real>(inputs: &[Tensor<R>], c: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Empty("batchnorm batch".into()));
    }
    for x in inputs {
        if x.shape().last() != Some(&c) {
            return shape_err(format!("batchnorm over {c} channels got {:?}", x.shape()));
        }
    }
    Ok(())
}

/// Training mode: normalizes with batch statistics (over batch and spatial positions)
/// and updates the running statistics by exponential moving average.
pub fn batchnorm_train<R: Real>(
    inputs: &[Tensor<R>],
    bn: &mut BatchNorm<R>,
) -> Result<(Vec<Tensor<R>>, BnCache<R>)> {
    let (outs, cache, stats) = batchnorm_batch_stats(inputs, bn)?;
    bn.update_running(&stats);
    Ok((outs, cache))
}

/// Per-channel batch mean and biased variance from one training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats<R = f32> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Training-mode normalization without touching the running statistics.
pub fn batchnorm_batch_stats<R: Real>(
    inputs: &[Tensor<R>],
    bn: &BatchNorm<R>,
) -> Result<(Vec<Tensor<R>>, BnCache<R>, BatchStats<R>)> {
    let c = bn.channels();
    check_channels(inputs, c)?;
    let mut sum = vec![R::zero(); c];
    let mut count = 0usize;
    for x in inputs {
        for px in x.data().chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v;
            }
            count += 1;
        }
    }
    let m = R::lit(count as f64);
    let mean: Vec<R> = sum.iter().map(|&s| s / m).collect();
    let mut var = vec![R::zero(); c];
    for x in inputs {
        for px in x.data().chunks_exact(c) {
            for ((v, &xv), &mu) in var.iter_mut().zip(px).zip(&mean) {
                let d = xv - mu;
                *v += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<R> = var
        .iter()
        .map(|&v| R::one() / (v + bn.epsilon).sqrt())
        .collect();

    let mut outs = Vec::with_capacity(inputs.len());
    let mut xhats = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (hpx, ypx) in xhat
            .data_mut()
            .chunks_exact_mut(c)
            .zip(y.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let xh = (hpx[ch] - mean[ch]) * inv_std[ch];
                hpx[ch] = xh;
                ypx[ch] = bn.gamma.data()[ch] * xh + bn.beta.data()[ch];
            }
        }
        outs.push(y);
        xhats.push(xhat);
    }

    Ok((
        outs,
        BnCache::Train {
            xhat: xhats,
            inv_std,
        },
        BatchStats { mean, var },
    ))
}

/// Inference mode: evaluates the folded affine form `a * x + b` from running statistics.
pub fn batchnorm_infer<R: Real>(input: &Tensor<R>, bn: &BatchNorm<R>) -> Result<Tensor<R>> {
    let c = bn.channels();
    check_channels(std::slice::from_ref(input), c)?;
    let (a, b) = bn.folded_affine();
    let mut y = input.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = a[ch] * px[ch] + b[ch];
        }
    }
    Ok(y)
}

pub fn batchnorm_infer_batch<R: Real>(
    inputs: &[Tensor<R>],
    bn: &BatchNorm<R>,
) -> Result<(Vec<Tensor<R>>, BnCache<R>)> {
    let outs = inputs
        .iter()
        .map(|x| batchnorm_infer(x, bn))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outs,
        BnCache::Infer {
            inputs: inputs.to_vec(),
        },
    ))
}

pub fn batchnorm_backward<R: Real>(
    cache: &BnCache<R>,
    bn: &BatchNorm<R>,
    grad_out: &[Tensor<R>],
) -> Result<BnGrads<R>> {
    let c = bn.channels();
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    match cache {
        BnCache::Train { xhat, inv_std } => {
            if xhat.len() != grad_out.len() {
                return shape_err("batchnorm gradient batch size mismatch");
            }
            let mut sum_dxhat = vec![R::zero(); c];
            let mut sum_dxhat_xhat = vec![R::zero(); c];
            let mut count = 0usize;
            for (xh, g) in xhat.iter().zip(grad_out) {
                for (hpx, gpx) in xh.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += gpx[ch] * hpx[ch];
                        dbeta[ch] += gpx[ch];
                        let dxh = gpx[ch] * bn.gamma.data()[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * hpx[ch];
                    }
                    count += 1;
                }
            }
            let m = R::lit(count as f64);
            let mut inputs = Vec::with_capacity(grad_out.len());
            for (xh, g) in xhat.iter().zip(grad_out) {
                let mut dx = g.clone();
                for (dpx, hpx) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(xh.data().chunks_exact(c))
                {
                    for ch in 0..c {
                        let dxh = dpx[ch] * bn.gamma.data()[ch];
                        dpx[ch] = inv_std[ch] / m
                            * (m * dxh - sum_dxhat[ch] - hpx[ch] * sum_dxhat_xhat[ch]);
                    }
                }
                inputs.push(dx);
            }
            Ok(BnGrads {
                inputs,
                gamma: Tensor::from_vec(&[c], dgamma)?,
                beta: Tensor::from_vec(&[c], dbeta)?,
            })
        }
        BnCache::Infer { inputs: xs } => {
            let (a, _) = bn.folded_affine();
            let mut inputs = Vec::with_capacity(grad_out.len());
            for (x, g) in xs.iter().zip(grad_out) {
                let mut dx = g.clone();
                for (dpx, xpx) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(x.data().chunks_exact(c))
                {
                    for ch in 0..c {
                        let s = (bn.running_var.data()[ch] + bn.epsilon).sqrt();
                        dgamma[ch] += dpx[ch] * (xpx[ch] - bn.running_mean.data()[ch]) / s;
                        dbeta[ch] += dpx[ch];
                        dpx[ch] = dpx[ch] * a[ch];
                    }
                }
                inputs.push(dx);
            }
            Ok(BnGrads {
                inputs,
                gamma: Tensor::from_vec(&[c], dgamma)?,
                beta: Tensor::from_vec(&[c], dbeta)?,
            })
        }
    }
}
