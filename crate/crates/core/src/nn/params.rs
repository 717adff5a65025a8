//! Named, seeded parameter storage with safetensors persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Initial value of a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Uniform { bound: f64 },
    Normal { std: f64 },
}

impl Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv and linear layers.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// All trainable weights and persistent buffers of a model, keyed by dotted path.
///
/// Initialization draws from a ChaCha stream seeded at construction, so two
/// stores built with the same seed and the same sequence of `get` calls hold
/// bit-identical values.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeSet<String>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("len", &self.vars.lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            buffers: Mutex::new(BTreeSet::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn path(&self, prefix: &str) -> ParamPath<'_> {
        self.root().pp(prefix)
    }

    fn sample(&self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { bound } => {
                let mut rng = self.rng.lock().unwrap();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Normal { std } => {
                let mut rng = self.rng.lock().unwrap();
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    fn get_or_create(&self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        if let Some(v) = self.vars.lock().unwrap().get(&name) {
            if v.shape() != &shape {
                return Err(shape_err!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                ));
            }
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.sample(&shape, init)?)?;
        self.vars.lock().unwrap().insert(name.clone(), var.clone());
        if buffer {
            self.buffers.lock().unwrap().insert(name);
        }
        Ok(var)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites a parameter in place; every model holding it sees the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(shape_err!(
                "cannot assign {:?} to parameter {name} of shape {:?}",
                value.shape(),
                var.shape()
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Sets every parameter and buffer whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<()> {
        for (name, var) in self.vars.lock().unwrap().iter() {
            if name.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// Trainable (non-buffer) parameters under any of the given prefixes.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        let buffers = self.buffers.lock().unwrap();
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(n, _)| !buffers.contains(*n))
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn parameter_count(&self, prefixes: &[&str]) -> usize {
        self.trainable(prefixes)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Snapshot of every tensor under `prefix` (detached copies).
    pub fn tensors(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.lock().unwrap().iter() {
            if name.starts_with(prefix) {
                out.insert(name.clone(), var.as_tensor().copy()?.detach());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, prefix: &str) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self.tensors(prefix)?.into_iter().collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Loads values for every parameter stored in `path` that this store already
    /// declares. Every declared parameter under `required_prefix` must be present.
    pub fn load(&self, path: &Path, required_prefix: &str) -> Result<usize> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
            ));
        }
        let stored = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().unwrap();
        let mut loaded = 0;
        for (name, var) in vars.iter() {
            match stored.get(name) {
                Some(t) => {
                    if t.shape() != var.shape() {
                        return Err(Error::format(
                            path,
                            format!(
                                "{name} stored with shape {:?}, model expects {:?}",
                                t.shape(),
                                var.shape()
                            ),
                        ));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
                None if name.starts_with(required_prefix) => {
                    return Err(Error::format(path, format!("missing tensor {name}")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }
}

/// A prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .get_or_create(self.full(name), shape.into(), init, false)?
            .as_tensor()
            .clone())
    }

    /// A persistent non-trainable tensor (e.g. running statistics).
    pub fn buffer(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Var> {
        self.store
            .get_or_create(self.full(name), shape.into(), init, true)
    }
}
