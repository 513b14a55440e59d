//! Named parameter storage, deterministic initialization, and the small
//! layers (convolution, channel layer norm) shared by attention and bodies.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::rng::Gaussian;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How a parameter is filled at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, redrawn beyond two standard deviations.
    TruncNormal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Replaces tensors by name; shapes must match.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(invalid!("parameter names differ from the model's"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(invalid!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if seen.insert(n.as_str(), i).is_some() {
                return Err(invalid!("duplicate parameter name `{n}`"));
            }
        }
        if names.len() != tensors.len() {
            return Err(invalid!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            ));
        }
        Ok(ParamStore { names, tensors })
    }
}

/// Registers parameters in a fixed order, drawing initial values from one
/// SplitMix64-backed stream.
pub struct ParamBuilder {
    store: ParamStore<f32>,
    index: HashMap<String, usize>,
    rng: Gaussian,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(init_seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            index: HashMap::new(),
            rng: Gaussian::new(init_seed),
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(
        &mut self,
        name: impl Into<String>,
        f: impl FnOnce(&mut Self) -> Result<R>,
    ) -> Result<R> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        if self.index.contains_key(&full) {
            return Err(invalid!("duplicate parameter name `{full}`"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::TruncNormal(std) => (0..n).map(|_| self.rng.truncated(std) as f32).collect(),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.uniform_sym(bound) as f32).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let id = self.store.tensors.len();
        self.store.tensors.push(Tensor::new(shape.to_vec(), data)?);
        self.store.names.push(full.clone());
        self.index.insert(full, id);
        Ok(ParamId(id))
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }

    pub fn count(&self) -> usize {
        self.store.count()
    }
}

/// Records attention internals during a forward pass.
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub records: Vec<ProbeRecord>,
}

#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub label: String,
    /// `None` when the maps were reused from another block.
    pub scores: Option<Tensor<f64>>,
    pub maps: Tensor<f64>,
}

/// Bound parameters plus optional instrumentation for one forward pass.
pub struct Ctx<'a, 't, T: Real> {
    pub params: &'a [Var<'t, T>],
    pub probe: Option<&'a RefCell<AttentionProbe>>,
}

impl<'a, 't, T: Real> Ctx<'a, 't, T> {
    pub fn new(params: &'a [Var<'t, T>]) -> Self {
        Ctx {
            params,
            probe: None,
        }
    }

    pub fn with_probe(params: &'a [Var<'t, T>], probe: &'a RefCell<AttentionProbe>) -> Self {
        Ctx {
            params,
            probe: Some(probe),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params[id.0]
    }

    pub(crate) fn record(&self, label: &str, scores: Option<Var<'t, T>>, maps: Var<'t, T>) {
        if let Some(probe) = self.probe {
            probe.borrow_mut().records.push(ProbeRecord {
                label: label.to_string(),
                scores: scores.map(|s| s.value().cast()),
                maps: maps.value().cast(),
            });
        }
    }
}

/// 2-D convolution with "same" padding for odd kernels unless strided.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    /// Kaiming-uniform weights (spatial convolutions).
    Kaiming,
    /// Truncated normal, std 0.02 (pointwise projections).
    Projection,
    /// All zeros, weight and bias.
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        init: ConvInit,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(invalid!(
                "{name}: {c_in}->{c_out} channels not divisible by {groups} groups"
            ));
        }
        if kernel.is_multiple_of(2) {
            return Err(invalid!("{name}: kernel {kernel} must be odd"));
        }
        let fan_in = c_in / groups * kernel * kernel;
        let w_init = match init {
            ConvInit::Kaiming => Init::KaimingUniform { fan_in },
            ConvInit::Projection => Init::TruncNormal(0.02),
            ConvInit::Zero => Init::Zeros,
        };
        let (weight, bias) = pb.scope(name, |pb| {
            let w = pb.add("weight", &[c_out, c_in / groups, kernel, kernel], w_init)?;
            let b = if bias {
                Some(pb.add("bias", &[c_out], Init::Zeros)?)
            } else {
                None
            };
            Ok((w, b))
        })?;
        Ok(Conv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            groups,
        })
    }

    /// Pointwise projection with bias.
    pub fn pointwise(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 1, 1, 1, true, ConvInit::Projection)
    }

    /// `k × k` convolution with bias and "same" padding.
    pub fn spatial(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, k, 1, 1, true, ConvInit::Kaiming)
    }

    /// Depthwise `k × k` convolution with bias.
    pub fn depthwise(pb: &mut ParamBuilder, name: &str, c: usize, k: usize) -> Result<Self> {
        Self::new(pb, name, c, c, k, 1, c, true, ConvInit::Kaiming)
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            cx.p(self.weight),
            self.bias.map(|b| cx.p(b)),
            self.stride,
            self.kernel / 2,
            self.groups,
        )
    }
}

/// Layer norm over the channel axis of a `[C, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(ChannelNorm {
                gamma: pb.add("gamma", &[c], Init::Ones)?,
                beta: pb.add("beta", &[c], Init::Zeros)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm_axis(cx.p(self.gamma), cx.p(self.beta), LN_EPS, 0)
    }
}
