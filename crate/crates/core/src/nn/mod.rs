//! The two segmentation networks, built as parameter tables plus a forward
//! pass that records onto an autodiff [`Graph`].
//!
//! Every tensor an architecture owns is declared once by its plan
//! ([`NetSpec::plan`]); the forward pass looks tensors up by the same layer
//! paths, and loading a checkpoint requires exactly the planned keys.

mod checkpoint;
mod params;
mod segment;
mod unet;
mod vnet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BatchNormConfig, BatchNormStats, Graph, Mode, Var};
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Init, ParamInfo, ParamStore};
pub use segment::{slice_input, volume_input, CropOrder};
pub use unet::UNetSpec;
pub use vnet::VNetSpec;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input rejected: {0}")]
    Input(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Architecture choice plus its hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NetSpec {
    Unet(UNetSpec),
    Vnet(VNetSpec),
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Unet(s) => s.validate(),
            NetSpec::Vnet(s) => s.validate(),
        }
    }

    /// Trainable parameters and running buffers, in creation order.
    pub fn plan(&self) -> (Vec<ParamInfo>, Vec<ParamInfo>) {
        let mut p = Planner::default();
        match self {
            NetSpec::Unet(s) => s.plan(&mut p),
            NetSpec::Vnet(s) => s.plan(&mut p),
        }
        (p.params, p.buffers)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match self {
            NetSpec::Unet(s) => s.check_input(shape),
            NetSpec::Vnet(s) => s.check_input(shape),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            NetSpec::Unet(s) => s.num_classes,
            NetSpec::Vnet(s) => s.num_classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NetSpec::Unet(_) => "unet",
            NetSpec::Vnet(_) => "vnet",
        }
    }
}

#[derive(Default)]
pub(crate) struct Planner {
    params: Vec<ParamInfo>,
    buffers: Vec<ParamInfo>,
}

impl Planner {
    /// `weight [cout, cin, kernel..]` and optionally `bias [cout]`.
    pub(crate) fn conv(&mut self, path: &str, cin: usize, cout: usize, kernel: &[usize], bias: bool) {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        self.params.push(ParamInfo::new(format!("{path}.weight"), shape, Init::Gaussian { fan_in }));
        if bias {
            self.params.push(ParamInfo::new(format!("{path}.bias"), vec![cout], Init::Constant(0.0)));
        }
    }

    /// `weight [cin, cout, kernel..]`. With stride equal to the kernel every
    /// output voxel sums exactly `cin` products, hence `fan_in = cin`.
    pub(crate) fn conv_transpose(&mut self, path: &str, cin: usize, cout: usize, kernel: &[usize], bias: bool) {
        let mut shape = vec![cin, cout];
        shape.extend_from_slice(kernel);
        self.params.push(ParamInfo::new(format!("{path}.weight"), shape, Init::Gaussian { fan_in: cin }));
        if bias {
            self.params.push(ParamInfo::new(format!("{path}.bias"), vec![cout], Init::Constant(0.0)));
        }
    }

    pub(crate) fn batch_norm(&mut self, path: &str, c: usize) {
        self.params.push(ParamInfo::new(format!("{path}.gamma"), vec![c], Init::Constant(1.0)));
        self.params.push(ParamInfo::new(format!("{path}.beta"), vec![c], Init::Constant(0.0)));
        self.buffers.push(ParamInfo::new(format!("{path}.running_mean"), vec![c], Init::Constant(0.0)));
        self.buffers.push(ParamInfo::new(format!("{path}.running_var"), vec![c], Init::Constant(1.0)));
    }

    pub(crate) fn prelu(&mut self, path: &str, c: usize) {
        self.params.push(ParamInfo::new(format!("{path}.slope"), vec![c], Init::Constant(0.25)));
    }
}

/// Named intermediate output recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub name: String,
    pub var: Var,
    pub shape: Vec<usize>,
}

/// Result of [`Network::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Class scores `[N, classes, spatial..]`.
    pub scores: Var,
    /// `(parameter index, graph leaf)` for every bound parameter.
    pub bindings: Vec<(usize, Var)>,
    pub trace: Vec<TraceEntry>,
}

impl Forward {
    pub fn trace_shape(&self, name: &str) -> Option<&[usize]> {
        self.trace.iter().find(|t| t.name == name).map(|t| t.shape.as_slice())
    }
}

pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph<f32>,
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
    bn: BatchNormConfig,
    bound: Vec<Option<Var>>,
    updates: Vec<(usize, Tensor<f32>)>,
    trace: Vec<TraceEntry>,
}

impl<'a> Ctx<'a> {
    fn param(&mut self, key: &str) -> Result<Var> {
        let i = self.params.index_of(key).ok_or_else(|| NnError::Missing(key.into()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.g.param(self.params.tensor(i).clone());
        self.bound[i] = Some(v);
        Ok(v)
    }

    fn optional_param(&mut self, key: &str) -> Result<Option<Var>> {
        match self.params.index_of(key) {
            Some(_) => self.param(key).map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn conv(&mut self, path: &str, x: Var, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let w = self.param(&format!("{path}.weight"))?;
        let b = self.optional_param(&format!("{path}.bias"))?;
        Ok(self.g.conv(x, w, b, stride, pad)?)
    }

    pub(crate) fn conv_transpose(&mut self, path: &str, x: Var, stride: &[usize]) -> Result<Var> {
        let w = self.param(&format!("{path}.weight"))?;
        let b = self.optional_param(&format!("{path}.bias"))?;
        Ok(self.g.conv_transpose(x, w, b, stride)?)
    }

    pub(crate) fn batch_norm(&mut self, path: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{path}.gamma"))?;
        let beta = self.param(&format!("{path}.beta"))?;
        let buf = |key: String| self.buffers.index_of(&key).ok_or(NnError::Missing(key));
        let (im, iv) = (buf(format!("{path}.running_mean"))?, buf(format!("{path}.running_var"))?);
        let mut stats = BatchNormStats {
            mean: self.buffers.tensor(im).data().to_vec(),
            var: self.buffers.tensor(iv).data().to_vec(),
        };
        let y = self.g.batch_norm(x, gamma, beta, &mut stats, self.mode, self.bn)?;
        if self.mode == Mode::Train {
            let c = stats.mean.len();
            self.updates.push((im, Tensor::new(vec![c], stats.mean)?));
            self.updates.push((iv, Tensor::new(vec![c], stats.var)?));
        }
        Ok(y)
    }

    pub(crate) fn prelu(&mut self, path: &str, x: Var) -> Result<Var> {
        let slope = self.param(&format!("{path}.slope"))?;
        Ok(self.g.prelu(x, slope)?)
    }

    pub(crate) fn record(&mut self, name: impl Into<String>, var: Var) {
        let shape = self.g.shape(var).to_vec();
        self.trace.push(TraceEntry { name: name.into(), var, shape });
    }
}

/// A network: spec, trainable parameters and running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetSpec,
    params: ParamStore,
    buffers: ParamStore,
}

impl Network {
    /// Initializes every planned tensor in plan order from `rng`.
    pub fn build(spec: NetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (plan, buffer_plan) = spec.plan();
        let mut params = ParamStore::new();
        for info in &plan {
            params.insert(info.key.clone(), info.materialize(rng))?;
        }
        let mut buffers = ParamStore::new();
        for info in &buffer_plan {
            buffers.insert(info.key.clone(), info.materialize(rng))?;
        }
        Ok(Network { spec, params, buffers })
    }

    /// Assembles a network from stored tensors; keys, order and shapes must
    /// match the plan exactly.
    pub fn from_parts(spec: NetSpec, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        spec.validate()?;
        let (plan, buffer_plan) = spec.plan();
        for (what, store, plan) in [("parameter", &params, &plan), ("buffer", &buffers, &buffer_plan)] {
            if store.len() != plan.len() {
                return Err(NnError::Checkpoint(format!(
                    "{} {what} tensors, the {} spec declares {}",
                    store.len(),
                    spec.name(),
                    plan.len()
                )));
            }
            for (i, info) in plan.iter().enumerate() {
                if store.key(i) != info.key {
                    return Err(NnError::Checkpoint(format!("{what} {i} is {}, expected {}", store.key(i), info.key)));
                }
                if store.tensor(i).shape() != info.shape.as_slice() {
                    return Err(NnError::Checkpoint(format!(
                        "{} has shape {:?}, expected {:?}",
                        info.key,
                        store.tensor(i).shape(),
                        info.shape
                    )));
                }
            }
        }
        Ok(Network { spec, params, buffers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.spec.check_input(shape)
    }

    /// Records the forward pass of `input` onto `g`.
    ///
    /// Parameters become gradient-tracking leaves. In train mode batch-norm
    /// running statistics are updated and dropout draws from `rng`.
    pub fn forward(&mut self, g: &mut Graph<f32>, input: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Forward> {
        let (fwd, updates) = self.run(g, input, mode, rng)?;
        for (i, t) in updates {
            *self.buffers.tensor_mut(i) = t;
        }
        Ok(fwd)
    }

    fn run(
        &self,
        g: &mut Graph<f32>,
        input: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Forward, Vec<(usize, Tensor<f32>)>)> {
        self.spec.check_input(g.shape(input))?;
        let bn = match &self.spec {
            NetSpec::Vnet(s) => s.batch_norm,
            NetSpec::Unet(_) => BatchNormConfig::default(),
        };
        let mut ctx = Ctx {
            g,
            params: &self.params,
            buffers: &self.buffers,
            mode,
            rng,
            bn,
            bound: vec![None; self.params.len()],
            updates: Vec::new(),
            trace: Vec::new(),
        };
        let scores = match &self.spec {
            NetSpec::Unet(s) => s.forward(&mut ctx, input)?,
            NetSpec::Vnet(s) => s.forward(&mut ctx, input)?,
        };
        let bindings = ctx.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
        Ok((Forward { scores, bindings, trace: ctx.trace }, ctx.updates))
    }

    /// Eval-mode class scores; the network is not modified.
    pub fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fwd, _) = self.run(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(fwd.scores).clone())
    }
}

#[cfg(test)]
mod tests;
