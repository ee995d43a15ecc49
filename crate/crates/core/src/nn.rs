//! Named parameter storage with seeded initialization, and the convolutional
//! building blocks shared by the transforms and the SNR branch.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub enum Init {
    /// Uniform in `[-b, b]` with `b = 1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
    /// Explicit values in row-major order.
    Values(Vec<f64>),
}

/// All trainable tensors of a model, keyed by dotted path.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..count).map(|_| self.rng.gen_range(-b..=b)).collect()
            }
            Init::Uniform(b) => (0..count).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; count],
            Init::Values(v) => {
                if v.len() != count {
                    return Err(Error::State(format!("{name}: {} init values for {count}", v.len())));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(tensor)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Vars whose path starts with one of `prefixes`.
    pub fn vars_under(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Overwrites a parameter in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Snapshot of every parameter as flat f64 values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)))
            .collect()
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.01)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Rearranges `[B, C*r*r, H, W]` into `[B, C, H*r, W*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let out_c = c / (r * r);
    Ok(x
        .reshape((b, out_c, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, out_c, h * r, w * r))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    mask: Option<Tensor>,
}

impl Conv2d {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = s.var("weight", &[c_out, c_in, k, k], Init::FanIn(fan_in))?;
        let bias = s.var("bias", &[c_out], Init::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding: k / 2,
            mask: None,
        })
    }

    /// Convolution whose weights and bias start at zero.
    pub fn zeroed(s: &mut Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let weight = s.var("weight", &[c_out, c_in, k, k], Init::Const(0.0))?;
        let bias = s.var("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: k / 2,
            mask: None,
        })
    }

    /// Masked convolution: `mask` has the kernel's spatial shape `[k, k]`.
    pub fn masked(s: &mut Scope, c_in: usize, c_out: usize, k: usize, mask: &[f64]) -> Result<Self> {
        let mut conv = Self::new(s, c_in, c_out, k, 1)?;
        let m = Tensor::from_vec(mask.to_vec(), (1, 1, k, k), &s.device())?.to_dtype(s.dtype())?;
        conv.mask = Some(m);
        Ok(conv)
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok(match &self.mask {
            Some(m) => self.weight.broadcast_mul(m)?,
            None => self.weight.clone(),
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(3).unwrap_or(1)
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = match &self.mask {
            Some(m) => self.weight.broadcast_mul(m)?,
            None => self.weight.clone(),
        };
        let x = x.contiguous()?;
        let (_, c, h, wd) = x.dims4()?;
        // candle's tiled CPU convolution mistakes a contiguous NCHW input for
        // channels-last when C == H == W; pad explicitly to avoid that shape.
        let y = if self.padding > 0 && c == h && h == wd {
            let p = self.padding;
            x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?.conv2d(&w, 0, self.stride, 1, 1)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Generalized divisive normalization, or its inverse.
///
/// `y = x / sqrt(beta + gamma * x^2)` with the channel-mixing `gamma` applied as a
/// 1x1 convolution. `beta` and `gamma` are stored as square roots so both stay
/// nonnegative under unconstrained updates.
#[derive(Debug, Clone)]
pub struct Gdn {
    beta_root: Tensor,
    gamma_root: Tensor,
    inverse: bool,
}

impl Gdn {
    pub fn new(s: &mut Scope, channels: usize, inverse: bool) -> Result<Self> {
        let beta_root = s.var("beta", &[channels], Init::Const(1.0))?;
        let mut gamma = vec![0.0; channels * channels];
        for c in 0..channels {
            gamma[c * channels + c] = 0.1f64.sqrt();
        }
        let gamma_root = s.var("gamma", &[channels, channels, 1, 1], Init::Values(gamma))?;
        Ok(Self {
            beta_root,
            gamma_root,
            inverse,
        })
    }
}

impl Module for Gdn {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.beta_root.dim(0)?;
        let beta = (self.beta_root.sqr()? + 1e-6)?.reshape((1, c, 1, 1))?;
        let gamma = self.gamma_root.sqr()?;
        let norm = x.sqr()?.conv2d(&gamma, 0, 1, 1, 1)?.broadcast_add(&beta)?.sqrt()?;
        if self.inverse {
            x * norm
        } else {
            x / norm
        }
    }
}

/// Two 3x3 convolutions with leaky activations and an identity (or 1x1) skip.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 1)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut s.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// Residual block whose last convolution starts at zero, so the block is
    /// the identity at initialization.
    pub fn identity_init(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), channels, channels, 3, 1)?,
            conv2: Conv2d::zeroed(&mut s.pp("conv2"), channels, channels, 3)?,
            skip: None,
        })
    }
}

impl Module for ResidualBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.conv1.forward(x)?, 0.01)?;
        let h = candle_nn::ops::leaky_relu(&self.conv2.forward(&h)?, 0.01)?;
        let identity = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        h + identity
    }
}

/// Stride-2 residual block ending in GDN.
#[derive(Debug, Clone)]
pub struct ResidualBlockDown {
    conv1: Conv2d,
    conv2: Conv2d,
    gdn: Gdn,
    skip: Conv2d,
}

impl ResidualBlockDown {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 2)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1)?,
            gdn: Gdn::new(&mut s.pp("gdn"), c_out, false)?,
            skip: Conv2d::new(&mut s.pp("skip"), c_in, c_out, 1, 2)?,
        })
    }
}

impl Module for ResidualBlockDown {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.conv1.forward(x)?, 0.01)?;
        let h = self.gdn.forward(&self.conv2.forward(&h)?)?;
        h + self.skip.forward(x)?
    }
}

/// 3x3 convolution followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct SubpelConv {
    conv: Conv2d,
    r: usize,
}

impl SubpelConv {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize, r: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(s, c_in, c_out * r * r, 3, 1)?,
            r,
        })
    }
}

impl Module for SubpelConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.conv.forward(x)?;
        pixel_shuffle(&y, self.r).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => candle_core::Error::Msg(other.to_string()),
        })
    }
}

/// Upsampling residual block ending in inverse GDN.
#[derive(Debug, Clone)]
pub struct ResidualBlockUp {
    subpel: SubpelConv,
    conv: Conv2d,
    igdn: Gdn,
    skip: SubpelConv,
}

impl ResidualBlockUp {
    pub fn new(s: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            subpel: SubpelConv::new(&mut s.pp("subpel"), c_in, c_out, 2)?,
            conv: Conv2d::new(&mut s.pp("conv"), c_out, c_out, 3, 1)?,
            igdn: Gdn::new(&mut s.pp("igdn"), c_out, true)?,
            skip: SubpelConv::new(&mut s.pp("skip"), c_in, c_out, 2)?,
        })
    }
}

impl Module for ResidualBlockUp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.subpel.forward(x)?, 0.01)?;
        let h = self.igdn.forward(&self.conv.forward(&h)?)?;
        h + self.skip.forward(x)?
    }
}

/// Bottleneck residual unit used by [`AttentionBlock`].
#[derive(Debug, Clone)]
struct ResidualUnit {
    reduce: Conv2d,
    mix: Conv2d,
    expand: Conv2d,
}

impl ResidualUnit {
    fn new(s: &mut Scope, c: usize) -> Result<Self> {
        let half = (c / 2).max(1);
        Ok(Self {
            reduce: Conv2d::new(&mut s.pp("reduce"), c, half, 1, 1)?,
            mix: Conv2d::new(&mut s.pp("mix"), half, half, 3, 1)?,
            expand: Conv2d::new(&mut s.pp("expand"), half, c, 1, 1)?,
        })
    }
}

impl Module for ResidualUnit {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.reduce.forward(x)?.relu()?;
        let h = self.mix.forward(&h)?.relu()?;
        let h = self.expand.forward(&h)?;
        (h + x)?.relu()
    }
}

/// Simplified attention block: a trunk gated by a sigmoid mask branch.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    trunk: ResidualUnit,
    mask: ResidualUnit,
    mask_out: Conv2d,
}

impl AttentionBlock {
    pub fn new(s: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            trunk: ResidualUnit::new(&mut s.pp("trunk"), c)?,
            mask: ResidualUnit::new(&mut s.pp("mask"), c)?,
            mask_out: Conv2d::new(&mut s.pp("mask_out"), c, c, 1, 1)?,
        })
    }
}

impl Module for AttentionBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let a = self.trunk.forward(x)?;
        let b = candle_nn::ops::sigmoid(&self.mask_out.forward(&self.mask.forward(x)?)?)?;
        (a * b)? + x
    }
}

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.var("weight", &[d_in, d_out], Init::FanIn(d_in))?,
            bias: s.var("bias", &[d_out], Init::FanIn(d_in))?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Layer normalization over the last dimension with learned affine terms.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, d: usize) -> Result<Self> {
        Ok(Self {
            gain: s.var("gain", &[d], Init::Const(1.0))?,
            shift: s.var("shift", &[d], Init::Const(0.0))?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)
    }
}

/// Sequential stack of modules.
pub struct Sequential(pub Vec<Box<dyn Module + Send + Sync>>);

impl Module for Sequential {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for m in &self.0 {
            h = m.forward(&h)?;
        }
        Ok(h)
    }
}

/// Leaky ReLU as a module, for use inside [`Sequential`].
pub struct LeakyRelu;

impl Module for LeakyRelu {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::leaky_relu(x, 0.01)
    }
}
