//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kink::traced;
use crate::tensor::Tensor;

/// Step reductions tried before an element is skipped as sitting on a kink.
pub const MAX_SHRINKS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn sampled(mut self, max_elements: usize, seed: u64) -> Self {
        self.max_elements = Some(max_elements);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements left unchecked because every probe step straddled a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let out = f(inputs)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarRoot(out.shape().to_vec()));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check objective".into(),
        });
    }
    Ok(v)
}

/// Compares the analytic gradient of scalar `f` with respect to each input
/// against central differences. `f` must build its result only from the
/// tensors it is handed.
///
/// A probe pair whose kink trace differs from the base point's straddles a
/// ReLU, max or bilinear-cell boundary; its step is quartered up to
/// [`MAX_SHRINKS`] times, after which the element is counted as skipped.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
    let (root, base_trace) = traced(|| f(&leaves));
    let root = root?;
    if !root.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check objective".into(),
        });
    }
    root.backward()?;
    drop(root);

    let mut reports = Vec::with_capacity(inputs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let elements: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let base = inputs[i].to_vec();
        let mut report = InputReport {
            input: i,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: elements.len(),
            skipped: 0,
        };
        'elements: for &j in &elements {
            let mut step = opts.step;
            let mut shrinks = 0;
            let numeric = loop {
                let mut plus = base.clone();
                plus[j] += step;
                probe[i] = Tensor::new(plus, leaf.shape())?;
                let (fp, tp) = traced(|| eval_scalar(&mut f, &probe));
                let mut minus = base.clone();
                minus[j] -= step;
                probe[i] = Tensor::new(minus, leaf.shape())?;
                let (fm, tm) = traced(|| eval_scalar(&mut f, &probe));
                if tp == base_trace && tm == base_trace {
                    break (fp? - fm?) / (2.0 * step);
                }
                if shrinks == MAX_SHRINKS {
                    report.skipped += 1;
                    continue 'elements;
                }
                step /= 4.0;
                shrinks += 1;
            };
            let err = relative_error(analytic[j], numeric, opts.floor);
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst_element = j;
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
        probe[i] = inputs[i].detach();
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol: opts.tol,
    })
}
