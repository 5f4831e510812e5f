use crate::error::{Error, Result};
use crate::tensor::{BackwardFn, Real, Tensor};

/// Bin `i` of `out` over an extent `n`: `[floor(i*n/out), ceil((i+1)*n/out))`.
pub fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out)))
        .collect()
}

/// Adaptive average pooling `[B,C,H,W] -> [B,C,h,w]`.
pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::invalid("adaptive_avg_pool", format!("expected [B,C,H,W], got {:?}", x.shape())));
    }
    let (planes, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::invalid(
            "adaptive_avg_pool",
            format!("output {oh}x{ow} not within input {h}x{w}"),
        ));
    }
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let xd = x.data();
    let mut y = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &xd[pl * h * w..(pl + 1) * h * w];
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut s = T::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        s += src[r * w + c];
                    }
                }
                y.push(s / T::from_usize((r1 - r0) * (c1 - c0)));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let mut gx = vec![T::zero(); planes * h * w];
        for pl in 0..planes {
            let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let gv = g[(pl * oh + i) * ow + j] / T::from_usize((r1 - r0) * (c1 - c0));
                    for r in r0..r1 {
                        for c in c0..c1 {
                            dst[r * w + c] += gv;
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("adaptive_avg_pool", y, shape, vec![x.clone()], backward))
}

/// Global max over the spatial axes: `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("global_max_pool", format!("expected [B,C,H,W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?
        .max_axis(2)?
        .reshape(&[s[0], s[1], 1, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_for_eight_into_three() {
        assert_eq!(adaptive_bins(8, 3), vec![(0, 3), (2, 6), (5, 8)]);
        assert_eq!(adaptive_bins(4, 4), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn identity_and_global_mean() {
        let x = Tensor::<f64>::from_f64(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[1, 1, 4, 4]).unwrap();
        assert_eq!(adaptive_avg_pool(&x, (4, 4)).unwrap().data(), x.data());
        assert_eq!(adaptive_avg_pool(&x, (1, 1)).unwrap().data(), &[7.5]);
        assert!(adaptive_avg_pool(&x, (5, 4)).is_err());
    }
}
