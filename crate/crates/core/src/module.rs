//! Parameters, running-statistics buffers, and the forward context.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{numel, Real, Tensor};

/// Named trainable tensor. The name is a dotted path such as
/// `fam.q_linear.weight` and is stable across save/load.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        Parameter {
            name: name.into(),
            tensor: Tensor::param(data, shape).expect("parameter shape"),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.grad()
    }

    /// Replaces the value with a fresh leaf; any gradient is discarded.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::invalid(
                "set_data",
                format!("`{}` expects {} values, got {}", self.name, self.numel(), data.len()),
            ));
        }
        self.tensor = Tensor::param(data, &self.tensor.shape().to_vec())?;
        Ok(())
    }

    /// Installs `t` as the parameter value (used by gradient checks to route
    /// a caller-owned leaf through a module).
    pub fn set_tensor(&mut self, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.shape() {
            return Err(Error::shape("set_tensor", self.shape(), t.shape()));
        }
        self.tensor = t;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}

/// Non-trainable state (batch-norm running statistics). Interior mutability
/// lets train-mode forwards update it through a shared reference.
#[derive(Debug)]
pub struct Buffer<T: Real> {
    name: String,
    shape: Vec<usize>,
    data: Mutex<Vec<T>>,
}

impl<T: Real> Buffer<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), data.len());
        Buffer {
            name: name.into(),
            shape: shape.to_vec(),
            data: Mutex::new(data),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn get(&self) -> Vec<T> {
        self.data.lock().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, v: Vec<T>) -> Result<()> {
        if v.len() != numel(&self.shape) {
            return Err(Error::invalid("buffer", format!("`{}` length mismatch", self.name)));
        }
        *self.data.lock().expect("buffer lock poisoned") = v;
        Ok(())
    }

    pub(crate) fn update(&self, f: impl FnOnce(&mut Vec<T>)) {
        f(&mut self.data.lock().expect("buffer lock poisoned"));
    }
}

pub trait Module<T: Real> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.iter().flat_map(|m| m.parameters()).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().flat_map(|m| m.parameters_mut()).collect()
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.iter().flat_map(|m| m.buffers()).collect()
    }
}

/// Implements [`Module`] for a struct by concatenating its fields in order.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Real> $crate::module::Module<T> for $ty<T> {
            fn parameters(&self) -> Vec<&$crate::module::Parameter<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::module::Module::parameters(&self.$field)); )*
                v
            }
            fn parameters_mut(&mut self) -> Vec<&mut $crate::module::Parameter<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::module::Module::parameters_mut(&mut self.$field)); )*
                v
            }
            fn buffers(&self) -> Vec<&$crate::module::Buffer<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::module::Module::buffers(&self.$field)); )*
                v
            }
        }
    };
}
pub(crate) use impl_module;

/// Hands out named, deterministically initialized parameters. Every
/// parameter draws from its own stream derived from `(seed, full name)`, so
/// adding a module never perturbs the initial values of another.
#[derive(Debug, Clone)]
pub struct ParamBuilder {
    seed: u64,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&self, name: &str) -> Self {
        ParamBuilder {
            seed: self.seed,
            prefix: self.path(name),
        }
    }

    pub fn path(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn uniform<T: Real>(&self, leaf: &str, shape: &[usize], bound: f64) -> Parameter<T> {
        let name = self.path(leaf);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Parameter::new(name, data, shape)
    }

    pub fn full<T: Real>(&self, leaf: &str, shape: &[usize], v: f64) -> Parameter<T> {
        Parameter::new(self.path(leaf), vec![T::from_f64(v); numel(shape)], shape)
    }

    pub fn zeros<T: Real>(&self, leaf: &str, shape: &[usize]) -> Parameter<T> {
        self.full(leaf, shape, 0.0)
    }

    pub fn buffer<T: Real>(&self, leaf: &str, shape: &[usize], v: f64) -> Buffer<T> {
        Buffer::new(self.path(leaf), vec![T::from_f64(v); numel(shape)], shape)
    }
}

/// Per-forward state: train/eval mode, the dropout stream, and an optional
/// multiply-accumulate tally.
#[derive(Debug)]
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
    macs: u64,
    by_module: BTreeMap<String, u64>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            macs: 0,
            by_module: BTreeMap::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::eval()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Runs `f` and attributes the MACs it performed to `module`.
    pub fn scoped<R>(&mut self, module: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let before = self.macs;
        let r = f(self);
        let spent = self.macs - before;
        *self.by_module.entry(module.to_string()).or_default() += spent;
        r
    }

    pub fn macs_by_module(&self) -> &BTreeMap<String, u64> {
        &self.by_module
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_name_scoped() {
        let pb = ParamBuilder::new(5).sub("fam").sub("q_linear");
        let a: Parameter<f32> = pb.uniform("weight", &[3, 2], 0.5);
        let b: Parameter<f32> = pb.uniform("weight", &[3, 2], 0.5);
        assert_eq!(a.name(), "fam.q_linear.weight");
        assert_eq!(a.data(), b.data());
        let c: Parameter<f32> = pb.uniform("bias", &[6], 0.5);
        assert_ne!(a.data(), &c.data()[..]);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn set_data_checks_length() {
        let mut p = Parameter::<f64>::new("w", vec![0.0; 4], &[2, 2]);
        assert!(p.set_data(vec![1.0; 3]).is_err());
        p.set_data(vec![1.0; 4]).unwrap();
        assert!(p.tensor().requires_grad());
    }
}
