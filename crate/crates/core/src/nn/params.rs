//! Parameter registry.
//!
//! Model construction registers names, shapes and initializers only; data is
//! materialized separately. Parameter counting (the audit) therefore never
//! allocates the buffers, and the same architecture can be materialized at
//! any scalar precision.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Trainable parameters receive gradients and optimizer updates;
    /// the rest are state buffers (batch-norm running statistics).
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to a registered parameter. Indexes into the registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(pub(crate) usize);

/// Registered architecture: every parameter's name, shape and initializer.
#[derive(Default)]
pub struct ArchSpec {
    specs: Vec<ParamSpec>,
    by_name: IndexMap<String, usize>,
}

impl ArchSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> ParamRef {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.specs.len();
        self.by_name.insert(name.clone(), idx);
        self.specs.push(ParamSpec { name, shape, init, trainable });
        ParamRef(idx)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn lookup(&self, name: &str) -> Option<ParamRef> {
        self.by_name.get(name).copied().map(ParamRef)
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.specs[r.0].name
    }

    /// Trainable parameter count, optionally restricted to a name prefix.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable && s.name.starts_with(prefix))
            .map(|s| s.numel())
            .sum()
    }

    /// Materialize all parameters. Deterministic in `seed`.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Params<S> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bufs = self
            .specs
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<S> = match spec.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::TruncNormal { std } => {
                        (0..n).map(|_| S::of_f64(trunc_normal(&mut rng, std))).collect()
                    }
                };
                data
            })
            .collect();
        Params { bufs }
    }
}

/// Standard normal, resampled until within two standard deviations.
fn trunc_normal(rng: &mut ChaCha20Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let v = z * std;
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Materialized parameter values, aligned with an [`ArchSpec`].
pub struct Params<S> {
    bufs: Vec<Vec<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn data(&self, r: ParamRef) -> &[S] {
        &self.bufs[r.0]
    }

    pub fn data_mut(&mut self, r: ParamRef) -> &mut Vec<S> {
        &mut self.bufs[r.0]
    }

    pub fn buffers(&self) -> &[Vec<S>] {
        &self.bufs
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<S>] {
        &mut self.bufs
    }

    /// Convert every buffer to another scalar type through f64.
    pub fn convert<T: Scalar>(&self) -> Params<T> {
        Params {
            bufs: self
                .bufs
                .iter()
                .map(|b| b.iter().map(|&v| T::of_f64(v.as_f64())).collect())
                .collect(),
        }
    }
}

/// One forward/backward pass: a tape plus lazily bound parameter leaves.
pub struct Ctx<'a, S: Scalar> {
    pub tape: Tape<S>,
    arch: &'a ArchSpec,
    params: &'a mut Params<S>,
    bound: Vec<Option<TensorId>>,
    /// Training mode: batch-norm uses batch statistics and updates buffers.
    pub training: bool,
    /// When false, parameter leaves are bound untracked (inference).
    pub grad_enabled: bool,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(arch: &'a ArchSpec, params: &'a mut Params<S>, training: bool, grad_enabled: bool) -> Self {
        let n = arch.specs().len();
        Ctx {
            tape: Tape::new(),
            arch,
            params,
            bound: vec![None; n],
            training,
            grad_enabled,
        }
    }

    /// Bind a parameter onto the tape (cached per context).
    pub fn param(&mut self, r: ParamRef) -> Result<TensorId> {
        if let Some(id) = self.bound[r.0] {
            return Ok(id);
        }
        let spec = &self.arch.specs()[r.0];
        let requires = spec.trainable && self.grad_enabled;
        let id = self
            .tape
            .leaf(self.params.data(r).to_vec(), &spec.shape, requires)?;
        self.bound[r.0] = Some(id);
        Ok(id)
    }

    /// Raw buffer access (batch-norm running statistics).
    pub fn buffer(&self, r: ParamRef) -> &[S] {
        self.params.data(r)
    }

    pub fn buffer_mut(&mut self, r: ParamRef) -> &mut Vec<S> {
        self.params.data_mut(r)
    }

    /// Gradients of all bound trainable parameters, by registry index.
    pub fn take_grads(&self) -> Vec<(usize, Vec<S>)> {
        let mut out = Vec::new();
        for (idx, slot) in self.bound.iter().enumerate() {
            if let Some(id) = slot {
                if let Some(g) = self.tape.grad(*id) {
                    out.push((idx, g.to_vec()));
                }
            }
        }
        out
    }
}

/// Name-scoped view over an [`ArchSpec`] used while building modules.
pub struct Scope<'a> {
    arch: &'a mut ArchSpec,
    path: String,
}

impl<'a> Scope<'a> {
    pub fn root(arch: &'a mut ArchSpec) -> Self {
        Scope { arch, path: String::new() }
    }

    pub fn child(&mut self, seg: &str) -> Scope<'_> {
        let path = if self.path.is_empty() {
            seg.to_string()
        } else {
            format!("{}.{}", self.path, seg)
        };
        Scope { arch: self.arch, path }
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamRef {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        self.arch.register(full, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamRef {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        self.arch.register(full, shape, init, false)
    }
}

/// Configuration error helper naming the offending module.
pub fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
