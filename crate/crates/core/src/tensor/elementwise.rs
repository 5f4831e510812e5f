use super::{strides, BackwardFn, Real, Tensor};
use crate::error::{Error, Result};

/// Output shape for a broadcast binary op.
///
/// Operands must have the same rank; each axis either matches or one side
/// has extent 1. This covers batch, per-channel and per-pixel gating without
/// rank-promotion rules.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// For each output element, the source index in an operand of shape `src`.
fn source_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            offset += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            offset -= eff[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    idx
}

struct Broadcast {
    shape: Vec<usize>,
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(op, a, b)?;
        let map = |s: &[usize]| (s != shape.as_slice()).then(|| source_index(&shape, s));
        Ok(Broadcast {
            a: map(a),
            b: map(b),
            shape,
        })
    }

    #[inline]
    fn ia(&self, i: usize) -> usize {
        self.a.as_ref().map_or(i, |m| m[i])
    }

    #[inline]
    fn ib(&self, i: usize) -> usize {
        self.b.as_ref().map_or(i, |m| m[i])
    }
}

type Partial<T> = fn(T, T) -> T;

fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    da: Partial<T>,
    db: Partial<T>,
) -> Result<Tensor<T>> {
    let bc = Broadcast::new(op, a.shape(), b.shape())?;
    let n: usize = bc.shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if bc.a.is_none() && bc.b.is_none() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(ad[bc.ia(i)], bd[bc.ib(i)])).collect()
    };
    let shape = bc.shape.clone();
    let (a2, b2) = (a.clone(), b.clone());
    let backward: BackwardFn<T> = Box::new(move |g, needs| {
        let (ad, bd) = (a2.data(), b2.data());
        let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
        let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = (bc.ia(i), bc.ib(i));
            let (x, y) = (ad[ia], bd[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += gi * da(x, y);
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += gi * db(x, y);
            }
        }
        vec![ga, gb]
    });
    Ok(Tensor::from_op(op, data, shape, vec![a.clone(), b.clone()], backward))
}

fn unary<T: Real>(op: &'static str, x: &Tensor<T>, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let out = data.clone();
    let x2 = x.clone();
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let gx = x2
            .data()
            .iter()
            .zip(&out)
            .zip(g)
            .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
            .collect();
        vec![Some(gx)]
    });
    Tensor::from_op(op, data, x.shape().to_vec(), vec![x.clone()], backward)
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, rhs, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, rhs, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, rhs, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("div", self, rhs, |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let data = self.data().iter().map(|&v| v * c).collect();
        let backward: BackwardFn<T> =
            Box::new(move |g, _| vec![Some(g.iter().map(|&gi| gi * c).collect())]);
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], backward)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let data = self.data().iter().map(|&v| v + c).collect();
        let backward: BackwardFn<T> = Box::new(|g, _| vec![Some(g.to_vec())]);
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], backward)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary("neg", self, |v| -v, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary("ln", self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary("sqrt", self, |v| v.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn square(&self) -> Tensor<T> {
        unary("square", self, |v| v * v, |x, _| x + x)
    }

    pub fn relu(&self) -> Tensor<T> {
        if super::kink::enabled() {
            super::kink::record(self.data().iter().map(|&v| (v > T::zero()) as u64));
        }
        unary(
            "relu",
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary("sigmoid", self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary("tanh", self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Elementwise binary cross-entropy between `sigmoid(self)` and `target`,
    /// evaluated from logits as `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(), target.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let (x2, t2) = (self.clone(), target.clone());
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                x2.data()
                    .iter()
                    .zip(t2.data())
                    .zip(g)
                    .map(|((&x, &t), &gi)| gi * (sigmoid_scalar(x) - t))
                    .collect()
            });
            let gt = needs[1].then(|| x2.data().iter().zip(g).map(|(&x, &gi)| -gi * x).collect());
            vec![gx, gt]
        });
        Ok(Tensor::from_op(
            "bce_with_logits",
            data,
            self.shape().to_vec(),
            vec![self.clone(), target.clone()],
            backward,
        ))
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
