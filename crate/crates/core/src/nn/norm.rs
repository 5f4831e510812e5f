use crate::error::{Error, Result};
use crate::module::{Buffer, ForwardCtx, Module, ParamBuilder, Parameter};
use crate::tensor::{BackwardFn, Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics produced by a train-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, as used for the running estimate.
    pub var_unbiased: Vec<T>,
}

/// Per-channel normalization of `[B,C,H,W]`.
///
/// With `running = None` the batch mean and biased variance are used and
/// gradients flow through them; otherwise the given statistics are treated
/// as constants.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: f64,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("batch_norm", format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", s, gamma.shape()));
    }
    let n = b * hw;
    let xd = x.data();
    let eps = T::from_f64(eps);
    let at = move |bi: usize, ch: usize| (bi * c + ch) * hw;

    let (mean, var, stats) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::invalid("batch_norm", "running statistics length mismatch"));
            }
            (m.to_vec(), v.to_vec(), None)
        }
        None => {
            if n < 2 {
                return Err(Error::invalid("batch_norm", "train mode needs more than one value per channel"));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for bi in 0..b {
                    sum += xd[at(bi, ch)..at(bi, ch) + hw].iter().copied().sum::<T>();
                }
                let mu = sum / T::from_usize(n);
                let mut sq = T::zero();
                for bi in 0..b {
                    for &v in &xd[at(bi, ch)..at(bi, ch) + hw] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::from_usize(n);
            }
            let unbiased = var.iter().map(|&v| v * T::from_usize(n) / T::from_usize(n - 1)).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let o = at(bi, ch);
            for i in o..o + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }

    let batch_stats = running.is_none();
    let gamma2 = gamma.clone();
    let backward: BackwardFn<T> = Box::new(move |g, needs| {
        let gd = gamma2.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let o = at(bi, ch);
                for i in o..o + hw {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); g.len()];
            let nf = T::from_usize(n);
            for bi in 0..b {
                for ch in 0..c {
                    let o = at(bi, ch);
                    let k = gd[ch] * inv_std[ch];
                    for i in o..o + hw {
                        gx[i] = if batch_stats {
                            k * (g[i] - sum_g[ch] / nf - xhat[i] * sum_gx[ch] / nf)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
    });
    let y = Tensor::from_op(
        "batch_norm",
        out,
        s.to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        backward,
    );
    Ok((y, stats))
}

pub struct BatchNorm2d<T: Real> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Self {
        BatchNorm2d {
            gamma: pb.full("weight", &[channels], 1.0),
            beta: pb.zeros("bias", &[channels]),
            running_mean: pb.buffer("running_mean", &[channels], 0.0),
            running_var: pb.buffer("running_var", &[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if ctx.is_train() {
            let (y, stats) = batch_norm(x, self.gamma.tensor(), self.beta.tensor(), None, self.eps)?;
            let stats = stats.expect("train mode returns stats");
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            self.running_mean.update(|rm| {
                rm.iter_mut().zip(&stats.mean).for_each(|(r, &v)| *r = keep * *r + m * v)
            });
            self.running_var.update(|rv| {
                rv.iter_mut()
                    .zip(&stats.var_unbiased)
                    .for_each(|(r, &v)| *r = keep * *r + m * v)
            });
            Ok(y)
        } else {
            let (rm, rv) = (self.running_mean.get(), self.running_var.get());
            Ok(batch_norm(x, self.gamma.tensor(), self.beta.tensor(), Some((&rm, &rv)), self.eps)?.0)
        }
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let bn = BatchNorm2d::<f64>::new(&ParamBuilder::new(0), 2);
        let x = Tensor::from_f64(&[0.5, -1.0, 2.0, 3.0, -0.25, 8.0, 1.0, 0.0], &[1, 2, 2, 2]).unwrap();
        let y = bn.forward(&x, &mut ForwardCtx::eval()).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= a.abs() * 1e-5);
        }
    }

    #[test]
    fn train_mode_normalizes_and_updates_running_stats() {
        let bn = BatchNorm2d::<f64>::new(&ParamBuilder::new(0), 1);
        let x = Tensor::from_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 1, 2]).unwrap();
        let y = bn.forward(&x, &mut ForwardCtx::train(0)).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((bn.running_mean.get()[0] - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 = 5/3
        assert!((bn.running_var.get()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_single_value() {
        let bn = BatchNorm2d::<f64>::new(&ParamBuilder::new(0), 1);
        let x = Tensor::from_f64(&[1.0], &[1, 1, 1, 1]).unwrap();
        assert!(bn.forward(&x, &mut ForwardCtx::train(0)).is_err());
    }
}
