use super::{BackwardFn, Real, Tensor};
use crate::error::{Error, Result};

/// `c[m,n] += a[m,k] * b[k,n]` for row-major slices.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`;
    /// leading extents must match exactly.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), rhs.shape());
        let r = a.len();
        if r < 2 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
        let batch: usize = a[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &rhs.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a[..r - 2].to_vec();
        shape.extend([m, n]);
        let (lhs, rhs2) = (self.clone(), rhs.clone());
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    gemm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &rhs2.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    gemm_tn_acc(
                        &lhs.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op("matmul", out, shape, vec![self.clone(), rhs.clone()], backward))
    }

    /// Affine map over the last axis: `x[..., in] W[out, in]^T + b[out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape("linear", xs, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape("linear", ws, b.shape()));
            }
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = self.numel() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = bias {
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(b.data());
            }
        }
        gemm_nt_acc(self.data(), weight.data(), &mut out, rows, in_f, out_f);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out_f;

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (x2, w2) = (self.clone(), weight.clone());
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * in_f];
                gemm_acc(g, w2.data(), &mut gx, rows, out_f, in_f);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); out_f * in_f];
                gemm_tn_acc(g, x2.data(), &mut gw, rows, out_f, in_f);
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        });
        Ok(Tensor::from_op("linear", out, shape, parents, backward))
    }
}
