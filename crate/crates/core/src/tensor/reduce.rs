use super::{BackwardFn, Real, Tensor};
use crate::error::{Error, Result};

/// Relative gap below which the two largest elements of a `max_axis` lane
/// count as tied in the kink trace.
const TIE_TOLERANCE: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g, _| vec![Some(vec![g[0]; n])]);
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], backward)
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum along one axis; the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("sum_axis", out, shape, vec![self.clone()], backward))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Maximum along one axis (kept with extent 1). The gradient flows to the
    /// first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("max_axis", self.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * n * inner + i];
                let mut best_k = 0;
                for k in 1..n {
                    let v = x[(o * n + k) * inner + i];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = (o * n + best_k) * inner + i;
            }
        }
        if super::kink::enabled() {
            // A maximum shared by several elements up to rounding (copies made
            // by an upsampling, say) is recorded as a tie, so that perturbing
            // it does not look like crossing a kink.
            let token = |o: usize, i: usize, j: usize| {
                let best = out[j].as_f64();
                let runner_up = (0..n)
                    .map(|k| (o * n + k) * inner + i)
                    .filter(|&idx| idx != arg[j])
                    .map(|idx| x[idx].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                if best - runner_up <= TIE_TOLERANCE * best.abs() {
                    u64::MAX
                } else {
                    arg[j] as u64
                }
            };
            super::kink::record((0..outer).flat_map(|o| (0..inner).map(move |i| token(o, i, o * inner + i))));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let len = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut gx = vec![T::zero(); len];
            for (&a, &gi) in arg.iter().zip(g) {
                gx[a] += gi;
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("max_axis", out, shape, vec![self.clone()], backward))
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] = y[at(k)] / z;
                }
            }
        }
        let out = y.clone();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut gx = vec![T::zero(); out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot = (0..n).fold(T::zero(), |acc, k| acc + g[at(k)] * out[at(k)]);
                    for k in 0..n {
                        gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("softmax", y, self.shape().to_vec(), vec![self.clone()], backward))
    }
}
