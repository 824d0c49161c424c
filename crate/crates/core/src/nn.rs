//! Parameter storage, forward sessions, and the basic layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Model part a parameter is billed to in the budget audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SpatialBackbone,
    FrequencyBranch,
    ProjectionHead,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::SpatialBackbone,
        Component::FrequencyBranch,
        Component::ProjectionHead,
        Component::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::SpatialBackbone => "spatial_backbone",
            Component::FrequencyBranch => "frequency_branch",
            Component::ProjectionHead => "projection_head",
            Component::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub component: Component,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (batchnorm running stats).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>, component: Component) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(),
            component,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            tensor,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    component: p.component,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Copies gradients from a backward pass into the parameter tensors.
    pub fn accumulate_grads(&mut self, bound: &[(ParamId, Var)], grads: &Grads<T>) -> Result<()> {
        for &(id, var) in bound {
            if let Some(g) = grads.get(var) {
                self.params[id.0].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for u in updates {
            let n = u.count as f64;
            let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let mean = self.buffers[u.mean.0].tensor.data_mut();
            for (r, &b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            let var = self.buffers[u.var.0].tensor.data_mut();
            for (r, &b) in var.iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
}

/// One forward pass: binds parameters to tape leaves on first use and
/// collects batchnorm statistics in training mode.
pub struct Session<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

pub struct SessionOutput<T> {
    pub bound: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, train: bool, track_grads: bool) -> Self {
        Self {
            tape,
            bound: vec![None; store.params.len()],
            store,
            train,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    /// Uses caller-provided leaves for the parameters, in store order.
    pub fn with_bound(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, vars: &[Var], train: bool) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(Error::InvalidArgument {
                op: "session",
                detail: format!("{} leaves for {} parameters", vars.len(), store.params.len()),
            });
        }
        Ok(Self {
            tape,
            bound: vars.iter().copied().map(Some).collect(),
            store,
            train,
            track_grads: true,
            bn_updates: Vec::new(),
        })
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let src = &self.store.params[id.0].tensor;
        let v = if self.track_grads {
            self.tape.leaf(src)
        } else {
            let mut t = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("consistent");
            t.requires_grad = false;
            self.tape.leaf(&t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.store.buffer(id)
    }

    pub fn finish(self) -> SessionOutput<T> {
        SessionOutput {
            bound: self
                .bound
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
                .collect(),
            bn_updates: self.bn_updates,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    /// He-normal with fan-out (convolutions followed by batchnorm).
    KaimingFanOut,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn,
    Normal(f64),
    Zeros,
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub component: Component,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, component: Component) -> Self {
        Self { store, rng, component }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: WeightInit, fan_in: usize, fan_out: usize) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            WeightInit::KaimingFanOut => {
                let std = (2.0 / fan_out as f64).sqrt();
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| T::lit(d.sample(self.rng))).collect()
            }
            WeightInit::UniformFanIn => {
                let b = 1.0 / (fan_in as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b).unwrap();
                (0..n).map(|_| T::lit(d.sample(self.rng))).collect()
            }
            WeightInit::Normal(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| T::lit(d.sample(self.rng))).collect()
            }
            WeightInit::Zeros => vec![T::zero(); n],
        };
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.store.add_param(name, t, self.component)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, shape: ConvShape) -> Conv2d {
        let cig = c_in / shape.groups;
        let fan_in = cig * k * k;
        let fan_out = c_out / shape.groups * k * k;
        let weight = self.tensor(&format!("{name}.weight"), &[c_out, cig, k, k], shape.init, fan_in, fan_out);
        let bias = shape.bias.then(|| {
            let init = match shape.init {
                WeightInit::UniformFanIn => WeightInit::UniformFanIn,
                _ => WeightInit::Zeros,
            };
            self.tensor(&format!("{name}.bias"), &[c_out], init, fan_in, fan_out)
        });
        Conv2d {
            weight,
            bias,
            stride: shape.stride,
            padding: shape.padding.unwrap_or((k - 1) / 2),
            groups: shape.groups,
        }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, init: WeightInit) -> Linear {
        let weight = self.tensor(&format!("{name}.weight"), &[d_out, d_in], init, d_in, d_out);
        let bias_init = match init {
            WeightInit::UniformFanIn => WeightInit::UniformFanIn,
            _ => WeightInit::Zeros,
        };
        let bias = Some(self.tensor(&format!("{name}.bias"), &[d_out], bias_init, d_in, d_out));
        Linear { weight, bias }
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> BatchNorm2d {
        let gamma = self
            .store
            .add_param(format!("{name}.weight"), Tensor::full([c], T::one()), self.component);
        let beta = self
            .store
            .add_param(format!("{name}.bias"), Tensor::zeros([c]), self.component);
        let running_mean = self.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([c]));
        let running_var = self
            .store
            .add_buffer(format!("{name}.running_var"), Tensor::full([c], T::one()));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub stride: usize,
    pub padding: Option<usize>,
    pub groups: usize,
    pub bias: bool,
    pub init: WeightInit,
}

impl ConvShape {
    pub fn plain(stride: usize) -> Self {
        Self {
            stride,
            padding: None,
            groups: 1,
            bias: false,
            init: WeightInit::KaimingFanOut,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, init: WeightInit) -> Self {
        self.bias = true;
        self.init = init;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        if s.train {
            let (y, stats) = s.tape.batchnorm_train(x, g, b, self.eps)?;
            s.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var,
                count: stats.count,
            });
            Ok(y)
        } else {
            let mean = s.store.buffer(self.running_mean).data().to_vec();
            let var = s.store.buffer(self.running_var).data().to_vec();
            s.tape.batchnorm_eval(x, g, b, &mean, &var, self.eps)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Hardswish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Hardswish => tape.hardswish(x),
        }
    }
}
