//! Analysis, synthesis and hyper transforms, the feature-adaptive modulation
//! and the entropy-parameter network.

use candle_core::{Module, Tensor, D};

use crate::entropy::SIGMA_MIN;
use crate::nn::{
    leaky_relu, sigmoid, softplus, AttentionBlock, Conv2d, LeakyRelu, ResidualBlock, ResidualBlockDown,
    ResidualBlockUp, Scope, Sequential, SubpelConv,
};
use crate::{Error, Result};

/// Rate–distortion trade-offs of the eight quality levels.
pub const LAMBDAS: [f64; 8] = [0.0001, 0.0002, 0.0004, 0.0008, 0.0016, 0.0028, 0.0064, 0.012];

/// Level-0 SNR attention groups 4×4 positions into one token; level 1 uses one
/// token per position.
pub const LEVEL0_PATCH: usize = 4;
pub const LEVEL1_PATCH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub quality_index: u8,
    pub snr_kernel: usize,
}

impl ModelConfig {
    pub fn new(n: usize, m: usize, k: usize, quality_index: u8) -> Result<Self> {
        let cfg = Self {
            n,
            m,
            k,
            quality_index,
            snr_kernel: crate::snr::DEFAULT_KERNEL,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale default widths.
    pub fn desk(quality_index: u8) -> Result<Self> {
        Self::new(64, 64, 64, quality_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.m < 4 || self.k < 4 {
            return Err(Error::Argument(format!(
                "channel counts must be at least 4 (n={}, m={}, k={})",
                self.n, self.m, self.k
            )));
        }
        if self.quality_index as usize >= LAMBDAS.len() {
            return Err(Error::Argument(format!("quality index {} not in 0..=7", self.quality_index)));
        }
        if self.snr_kernel < 3 || self.snr_kernel % 2 == 0 {
            return Err(Error::Argument(format!("snr kernel {} must be odd and >= 3", self.snr_kernel)));
        }
        Ok(())
    }

    pub fn lambda_d(&self) -> f64 {
        LAMBDAS[self.quality_index as usize]
    }

    /// Attention heads for a token width: 4 when it divides evenly.
    pub fn heads(width: usize) -> usize {
        [4, 2, 1].into_iter().find(|h| width % h == 0).unwrap_or(1)
    }
}

fn boxed<M: Module + Send + Sync + 'static>(m: M) -> Box<dyn Module + Send + Sync> {
    Box::new(m)
}

/// First analysis stage: image to `N` channels at 1/4 resolution.
pub struct AnalysisStage0(Sequential);

impl AnalysisStage0 {
    pub fn new(s: &mut Scope, n: usize) -> Result<Self> {
        Ok(Self(Sequential(vec![
            boxed(ResidualBlockDown::new(&mut s.pp("0"), 3, n)?),
            boxed(ResidualBlock::new(&mut s.pp("1"), n, n)?),
            boxed(ResidualBlockDown::new(&mut s.pp("2"), n, n)?),
        ])))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Second analysis stage: 1/4 to 1/16 resolution, `M` channels.
pub struct AnalysisStage1(Sequential);

impl AnalysisStage1 {
    pub fn new(s: &mut Scope, n: usize, m: usize) -> Result<Self> {
        Ok(Self(Sequential(vec![
            boxed(AttentionBlock::new(&mut s.pp("0"), n)?),
            boxed(ResidualBlock::new(&mut s.pp("1"), n, n)?),
            boxed(ResidualBlockDown::new(&mut s.pp("2"), n, n)?),
            boxed(ResidualBlock::new(&mut s.pp("3"), n, n)?),
            boxed(Conv2d::new(&mut s.pp("4"), n, m, 3, 2)?),
            boxed(AttentionBlock::new(&mut s.pp("5"), m)?),
        ])))
    }

    pub fn forward(&self, y0: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(y0)?)
    }
}

/// Main decoder: `M` channels at 1/16 resolution back to RGB.
pub struct Synthesis(Sequential);

impl Synthesis {
    pub fn new(s: &mut Scope, n: usize, m: usize) -> Result<Self> {
        Ok(Self(Sequential(vec![
            boxed(AttentionBlock::new(&mut s.pp("0"), m)?),
            boxed(ResidualBlock::new(&mut s.pp("1"), m, n)?),
            boxed(ResidualBlockUp::new(&mut s.pp("2"), n, n)?),
            boxed(ResidualBlock::new(&mut s.pp("3"), n, n)?),
            boxed(ResidualBlockUp::new(&mut s.pp("4"), n, n)?),
            boxed(AttentionBlock::new(&mut s.pp("5"), n)?),
            boxed(ResidualBlock::new(&mut s.pp("6"), n, n)?),
            boxed(ResidualBlockUp::new(&mut s.pp("7"), n, n)?),
            boxed(ResidualBlock::new(&mut s.pp("8"), n, n)?),
            boxed(SubpelConv::new(&mut s.pp("9"), n, 3, 2)?),
        ])))
    }

    /// Unclamped output, used by the training losses.
    pub fn forward_raw(&self, y_hat: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(y_hat)?)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn forward(&self, y_hat: &Tensor) -> Result<Tensor> {
        Ok(self.forward_raw(y_hat)?.clamp(0.0, 1.0)?)
    }
}

pub struct HyperAnalysis(Sequential);

impl HyperAnalysis {
    pub fn new(s: &mut Scope, n: usize, m: usize, k: usize) -> Result<Self> {
        Ok(Self(Sequential(vec![
            boxed(Conv2d::new(&mut s.pp("0"), m, n, 3, 1)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("2"), n, n, 3, 1)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("4"), n, n, 3, 2)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("6"), n, n, 3, 1)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("8"), n, k, 3, 2)?),
        ])))
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(y)?)
    }
}

pub struct HyperSynthesis(Sequential);

impl HyperSynthesis {
    pub fn new(s: &mut Scope, n: usize, m: usize, k: usize) -> Result<Self> {
        let wide = n * 3 / 2;
        Ok(Self(Sequential(vec![
            boxed(Conv2d::new(&mut s.pp("0"), k, n, 3, 1)?),
            boxed(LeakyRelu),
            boxed(SubpelConv::new(&mut s.pp("2"), n, n, 2)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("4"), n, wide, 3, 1)?),
            boxed(LeakyRelu),
            boxed(SubpelConv::new(&mut s.pp("6"), wide, wide, 2)?),
            boxed(LeakyRelu),
            boxed(Conv2d::new(&mut s.pp("8"), wide, 2 * m, 3, 1)?),
        ])))
    }

    pub fn forward(&self, z_hat: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(z_hat)?)
    }
}

/// `y = y_raw ⊙ m(s) + a(s)` with `m = 2·sigmoid(head)`. Both heads end in a
/// zero-initialized convolution, so the module starts as the identity.
pub struct FeatureAdapt {
    m1: Conv2d,
    m2: Conv2d,
    a1: Conv2d,
    a2: Conv2d,
}

impl FeatureAdapt {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            m1: Conv2d::new(&mut s.pp("mul1"), channels, channels, 3, 1)?,
            m2: Conv2d::zeroed(&mut s.pp("mul2"), channels, channels, 3)?,
            a1: Conv2d::new(&mut s.pp("add1"), channels, channels, 3, 1)?,
            a2: Conv2d::zeroed(&mut s.pp("add2"), channels, channels, 3)?,
        })
    }

    /// Multiplicative and additive maps derived from the fused SNR features.
    pub fn heads(&self, s_fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = (sigmoid(&self.m2.forward(&leaky_relu(&self.m1.forward(s_fused)?)?)?)? * 2.0)?;
        let a = self.a2.forward(&leaky_relu(&self.a1.forward(s_fused)?)?)?;
        Ok((m, a))
    }

    pub fn forward(&self, y_raw: &Tensor, s_fused: &Tensor) -> Result<Tensor> {
        if y_raw.dims() != s_fused.dims() {
            return Err(Error::Argument(format!(
                "feature shapes disagree: {:?} vs {:?}",
                y_raw.dims(),
                s_fused.dims()
            )));
        }
        let (m, a) = self.heads(s_fused)?;
        modulate(y_raw, &m, &a)
    }
}

pub fn modulate(y: &Tensor, m: &Tensor, a: &Tensor) -> Result<Tensor> {
    Ok(((y * m)? + a)?)
}

/// Aggregates hyper-decoder output and context features into `(μ, σ)`.
pub struct EntropyParameters {
    pub layers: [Conv2d; 3],
    m: usize,
}

impl EntropyParameters {
    pub fn new(s: &mut Scope, m: usize) -> Result<Self> {
        let (h1, h2) = (m * 10 / 3, m * 8 / 3);
        Ok(Self {
            layers: [
                Conv2d::new(&mut s.pp("0"), 4 * m, h1, 1, 1)?,
                Conv2d::new(&mut s.pp("2"), h1, h2, 1, 1)?,
                Conv2d::new(&mut s.pp("4"), h2, 2 * m, 1, 1)?,
            ],
            m,
        })
    }

    /// Returns `(μ, σ)` with `σ ≥ SIGMA_MIN`.
    pub fn forward(&self, hyper: &Tensor, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        if hyper.dims() != ctx.dims() || hyper.dim(1)? != 2 * self.m {
            return Err(Error::Argument(format!(
                "entropy inputs disagree: {:?} vs {:?}",
                hyper.dims(),
                ctx.dims()
            )));
        }
        let x = Tensor::cat(&[hyper, ctx], 1)?;
        let h = leaky_relu(&self.layers[0].forward(&x)?)?;
        let h = leaky_relu(&self.layers[1].forward(&h)?)?;
        let out = self.layers[2].forward(&h)?;
        split_params(&out, self.m)
    }
}

/// Splits raw parameters into `μ` (first half) and the bounded scale.
pub fn split_params(raw: &Tensor, m: usize) -> Result<(Tensor, Tensor)> {
    let mu = raw.narrow(1, 0, m)?;
    let sigma = softplus(&raw.narrow(1, m, m)?)?.maximum(SIGMA_MIN)?;
    Ok((mu, sigma))
}

/// Mean absolute value over all elements, for diagnostics.
pub fn mean_abs(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.flatten_all()?.mean(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_scalar()?)
}
