use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::BatchStats;
use crate::{rng, Error, Real, Result, Tensor};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    /// Running statistics are buffers, not optimized parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Normalization affine parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight | ParamKind::LinearBias)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let leaf = name.rsplit('.').next()?;
        Some(match leaf {
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            "scale" => ParamKind::NormScale,
            "shift" => ParamKind::NormShift,
            "bias" => ParamKind::LinearBias,
            "weight" if name.contains(".head.") => ParamKind::LinearWeight,
            "weight" => ParamKind::ConvWeight,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, named parameter and buffer storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Momentum of the running-statistics moving average.
pub const RUNNING_MOMENTUM: f64 = 0.1;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> ParamId {
        let init = if kind == ParamKind::RunningVar || kind == ParamKind::NormScale { T::one() } else { T::zero() };
        self.params.push(Param { name, kind, value: Tensor::full(shape, init) });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    pub(crate) fn truncated(&self, len: usize) -> Self {
        ParamStore { params: self.params[..len].to_vec() }
    }

    /// Replace every value by name. The incoming set must match exactly.
    pub fn assign<'a, I>(&mut self, named: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor<T>)>,
    {
        let mut seen = alloc::vec![false; self.params.len()];
        for (name, value) in named {
            let id = self
                .find(name)
                .ok_or_else(|| Error::invalid("load parameters", format!("unexpected record {name}")))?;
            let slot = &mut self.params[id];
            if slot.value.shape() != value.shape() {
                return Err(Error::shape(
                    "load parameters",
                    format!("{name}: expected {:?}, found {:?}", slot.value.shape(), value.shape()),
                ));
            }
            if seen[id] {
                return Err(Error::invalid("load parameters", format!("duplicate record {name}")));
            }
            seen[id] = true;
            slot.value = value;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid("load parameters", format!("missing record {}", self.params[missing].name)));
        }
        Ok(())
    }

    /// He-normal convolution weights, `N(0, 1/fan_in)` classifiers, unit
    /// norm scales and zero shifts/biases, drawn from one seeded stream in
    /// storage order.
    pub fn init(&mut self, seed: u64) {
        let mut r = rng::stream(seed);
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            let fill = |v: f64| Tensor::full(&shape, T::of(v));
            p.value = match p.kind {
                ParamKind::ConvWeight | ParamKind::LinearWeight => {
                    let fan_in: usize = if p.kind == ParamKind::ConvWeight { shape[1..].iter().product() } else { shape[0] };
                    let gain = if p.kind == ParamKind::ConvWeight { 2.0 } else { 1.0 };
                    let std = libm::sqrt(gain / fan_in as f64);
                    let data = (0..p.value.numel()).map(|_| T::of(std * r.sample::<f64, _>(StandardNormal))).collect();
                    Tensor::new(&shape, data).expect("shape preserved")
                }
                ParamKind::NormScale | ParamKind::RunningVar => fill(1.0),
                ParamKind::NormShift | ParamKind::RunningMean | ParamKind::LinearBias => fill(0.0),
            };
        }
    }

    pub(crate) fn apply_running(&mut self, mean: ParamId, var: ParamId, stats: &BatchStats<T>) {
        let m = T::of(RUNNING_MOMENTUM);
        let keep = T::one() - m;
        for (slot, new) in [(mean, &stats.mean), (var, &stats.var)] {
            for (v, &s) in self.params[slot].value.data_mut().iter_mut().zip(new) {
                *v = keep * *v + m * s;
            }
        }
    }
}
