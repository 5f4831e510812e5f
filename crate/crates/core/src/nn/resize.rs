use crate::error::{Error, Result};
use crate::tensor::{BackwardFn, Real, Tensor};

/// Interpolation used by the decoder's upsampling steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for Upsample {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bilinear" => Ok(Upsample::Bilinear),
            "nearest" => Ok(Upsample::Nearest),
            _ => Err(format!("unknown upsampling mode `{s}` (bilinear|nearest)")),
        }
    }
}

impl std::fmt::Display for Upsample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Upsample::Bilinear => "bilinear",
            Upsample::Nearest => "nearest",
        })
    }
}

/// Source taps for one output coordinate: `(lo, hi, frac)`.
/// Half-pixel centres: `src = (dst + 0.5) * in/out - 0.5`, clamped at 0.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn check_target(op: &'static str, x: &Tensor<impl Real>, size: (usize, usize)) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::invalid(op, format!("expected [B,C,H,W], got {:?}", x.shape())));
    }
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::invalid(op, format!("zero target extent {size:?}")));
    }
    Ok(())
}

/// Bilinear resize of `[B,C,H,W]` to `[B,C,h,w]` (align_corners = false).
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    check_target("bilinear_resize", x, size)?;
    let (planes, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = size;
    let rows = bilinear_taps(h, oh);
    let cols: Vec<(usize, usize, T)> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::from_f64(f)))
        .collect();
    let xd = x.data();
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &xd[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
                let gx = T::one() - fx;
                let top = gx * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = gx * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[r * ow + c] = gy * top + fy * bot;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let mut gx = vec![T::zero(); planes * h * w];
        for pl in 0..planes {
            let gsrc = &g[pl * oh * ow..(pl + 1) * oh * ow];
            let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
            for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                let gy = T::one() - fy;
                for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let gv = gsrc[r * ow + c];
                    let gxw = T::one() - fx;
                    dst[y0 * w + x0] += gv * gy * gxw;
                    dst[y0 * w + x1] += gv * gy * fx;
                    dst[y1 * w + x0] += gv * fy * gxw;
                    dst[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("bilinear_resize", out, shape, vec![x.clone()], backward))
}

/// Nearest-neighbour resize: output `d` reads input `floor(d * in/out)`.
pub fn nearest_resize<T: Real>(x: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    check_target("nearest_resize", x, size)?;
    let (planes, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = size;
    let src_of = |d: usize, input: usize, output: usize| ((d * input) / output).min(input - 1);
    let mut index = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        for r in 0..oh {
            for c in 0..ow {
                index.push(pl * h * w + src_of(r, h, oh) * w + src_of(c, w, ow));
            }
        }
    }
    let xd = x.data();
    let out = index.iter().map(|&i| xd[i]).collect();
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let n = x.numel();
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let mut gx = vec![T::zero(); n];
        for (&i, &gi) in index.iter().zip(g) {
            gx[i] += gi;
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("nearest_resize", out, shape, vec![x.clone()], backward))
}

/// Resizes by an integer factor with the given interpolation.
pub fn upsample<T: Real>(x: &Tensor<T>, factor: usize, mode: Upsample) -> Result<Tensor<T>> {
    if x.rank() != 4 || factor == 0 {
        return Err(Error::invalid("upsample", format!("factor {factor} on {:?}", x.shape())));
    }
    let size = (x.shape()[2] * factor, x.shape()[3] * factor);
    resize(x, size, mode)
}

pub fn resize<T: Real>(x: &Tensor<T>, size: (usize, usize), mode: Upsample) -> Result<Tensor<T>> {
    match mode {
        Upsample::Bilinear => bilinear_resize(x, size),
        Upsample::Nearest => nearest_resize(x, size),
    }
}
