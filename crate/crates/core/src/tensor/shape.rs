use super::reduce::axis_blocks;
use super::{numel, strides, BackwardFn, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let backward: BackwardFn<T> = Box::new(|g, _| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        // Source index of every output element.
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            index.push(off);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                off += src_strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                counter[ax] = 0;
            }
        }
        let x = self.data();
        let data = index.iter().map(|&i| x[i]).collect();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&i, &gi) in index.iter().zip(g) {
                gx[i] = gi;
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("permute", data, out_shape, vec![self.clone()], backward))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, n, inner) = axis_blocks(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("narrow", data, shape, vec![self.clone()], backward))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn split(&self, axis: usize, parts: usize) -> Result<Vec<Tensor<T>>> {
        if axis >= self.rank() || parts == 0 || self.shape()[axis] % parts != 0 {
            return Err(Error::invalid(
                "split",
                format!("cannot split axis {axis} of {:?} into {parts} parts", self.shape()),
            ));
        }
        let len = self.shape()[axis] / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<T: Real>(items: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("concat", "empty input list"))?;
    if axis >= first.rank() {
        return Err(Error::invalid("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    for t in &items[1..] {
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
    }
    let (outer, _, inner) = axis_blocks(first.shape(), axis);
    let extents: Vec<usize> = items.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &n) in items.iter().zip(&extents) {
            data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let ext = extents.clone();
    let backward: BackwardFn<T> = Box::new(move |g, needs| {
        let mut grads: Vec<Option<Vec<T>>> = ext
            .iter()
            .zip(needs)
            .map(|(&n, &need)| need.then(|| Vec::with_capacity(outer * n * inner)))
            .collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gi, &n) in grads.iter_mut().zip(&ext) {
                if let Some(gi) = gi {
                    gi.extend_from_slice(&g[off..off + n * inner]);
                }
                off += n * inner;
            }
        }
        grads
    });
    Ok(Tensor::from_op("concat", data, shape, items.to_vec(), backward))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(&(0..numel(shape)).map(|v| v as f64).collect::<Vec<_>>(), shape).unwrap()
    }

    #[test]
    fn split_concat_inverse() {
        let x = iota(&[2, 8, 3, 3]);
        let parts = x.split(1, 4).unwrap();
        assert_eq!(parts[0].shape(), &[2, 2, 3, 3]);
        let y = concat(&parts, 1).unwrap();
        assert_eq!(x.data(), y.data());
        assert_eq!(x.shape(), y.shape());
    }

    #[test]
    fn split_rejects_uneven() {
        assert!(iota(&[1, 6]).split(1, 4).is_err());
    }

    #[test]
    fn permute_transposes() {
        let x = iota(&[2, 3]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_shape_errors() {
        assert!(concat(&[iota(&[1, 2, 2]), iota(&[1, 2, 3])], 1).is_err());
        assert!(concat::<f64>(&[], 0).is_err());
    }
}
