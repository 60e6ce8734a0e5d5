//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::collections::{BTreeMap, HashMap};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Gradients, NormStats, Tape, Var};
use crate::tensor::Tensor;

/// Momentum applied to stored batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)) for a `fan_in×fan_out` matrix.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Exponential moving averages of batch statistics with zero-debiasing:
/// after `t` updates each average equals `Σ (1 − m)·m^(t−s)·batch_s`
/// divided by `1 − m^t`, so the mean-0/variance-1 starting values carry no
/// weight once the first batch has been seen.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
            updates: 0,
        }
    }

    /// `running ← running + w·(batch − running)` with
    /// `w = (1 − m) / (1 − m^t)` at update `t`.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        self.updates += 1;
        let m = BN_MOMENTUM;
        let w = T::lit((1.0 - m) / (1.0 - m.powi(self.updates.min(i32::MAX as u64) as i32)));
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r += w * (b - *r);
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r += w * (b - *r);
        }
    }
}

/// Trainable tensors in registration order, plus batch-norm running
/// statistics keyed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    pub running: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            running: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Draws every tensor of `specs` in order from one RNG seeded with `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for spec in specs {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Glorot => {
                    let (fan_in, fan_out) = match spec.shape.as_slice() {
                        [a, b] => (*a, *b),
                        other => {
                            return Err(Error::Shape(format!(
                                "glorot init needs a matrix, {} is {other:?}",
                                spec.name
                            )))
                        }
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    let data = (0..spec.numel()).map(|_| T::lit(dist.sample(&mut rng))).collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
            };
            store.insert(spec.name.clone(), tensor)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Folds measured batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        for (name, batch) in stats {
            self.running
                .entry(name.clone())
                .or_insert_with(|| RunningStats::new(batch.mean.len()))
                .update(batch);
        }
    }
}

/// One forward pass: a fresh tape, the parameters bound into it on first
/// use, and the batch statistics measured along the way.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub training: bool,
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            batch_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The tape variable of parameter `name`, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let pos = self
            .store
            .position(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[pos] {
            return Ok(v);
        }
        let v = self.tape.param(self.store.tensors[pos].clone());
        self.bound[pos] = Some(v);
        Ok(v)
    }

    /// Batch norm of layer `name` using parameters `{name}.gamma`/`{name}.beta`:
    /// batch statistics in training, running statistics otherwise.
    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.training {
            let (y, stats) = self.tape.batch_norm(x, gamma, beta, NormStats::Batch)?;
            if let Some(stats) = stats {
                self.batch_stats.push((name.to_string(), stats));
            }
            Ok(y)
        } else {
            let width = self.tape.value(gamma).numel();
            let default;
            let running = match self.store.running.get(name) {
                Some(r) => r,
                None => {
                    default = RunningStats::new(width);
                    &default
                }
            };
            let (y, _) = self.tape.batch_norm(
                x,
                gamma,
                beta,
                NormStats::Running {
                    mean: &running.mean,
                    var: &running.var,
                },
            )?;
            Ok(y)
        }
    }

    /// Number of parameters bound so far and their scalar total.
    pub fn bound_counts(&self) -> (usize, usize) {
        self.bound
            .iter()
            .zip(self.store.tensors())
            .filter(|(b, _)| b.is_some())
            .fold((0, 0), |(n, s), (_, t)| (n + 1, s + t.numel()))
    }

    /// Gradient for every stored parameter, in store order; parameters the
    /// loss never reached get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .zip(self.store.tensors())
            .map(|(b, t)| {
                b.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
