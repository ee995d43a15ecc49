//! Quantization, likelihood models and CDF-table construction.

use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use lumen_rans::{CdfTableSet, PRECISION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, Init, Scope};
use crate::{Error, Result};

pub const SIGMA_MIN: f64 = 0.11;
pub const SIGMA_MAX: f64 = 256.0;
pub const SCALE_BINS: usize = 64;
/// Half-width of a Gaussian table in standard deviations.
pub const TAIL_STDS: f64 = 9.0;
pub const MAX_HALF_WIDTH: i32 = 128;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Tail mass left outside a factorized table's support.
pub const FACTORIZED_TAIL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-1/2, 1/2)`.
    Noise,
    Round,
    /// Rounded values with an identity gradient.
    Ste,
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "round" => Ok(Self::Round),
            "ste" => Ok(Self::Ste),
            other => Err(Error::Argument(format!("unknown quantization mode {other:?}"))),
        }
    }
}

/// Quantizer owning the seeded noise source used in training.
pub struct Quantizer {
    rng: ChaCha8Rng,
}

impl Quantizer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn noise(&mut self, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let u: Vec<f64> = (0..n).map(|_| self.rng.gen::<f64>() - 0.5).collect();
        Ok(Tensor::from_vec(u, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Quantizes `v` around `means` (zero when absent).
    pub fn quantize(&mut self, v: &Tensor, mode: QuantMode, means: Option<&Tensor>) -> Result<Tensor> {
        if let Some(m) = means {
            if m.dims() != v.dims() {
                return Err(Error::Argument(format!("means {:?} vs values {:?}", m.dims(), v.dims())));
            }
        }
        Ok(match mode {
            QuantMode::Noise => (v + self.noise(v.dims(), v.dtype())?)?,
            QuantMode::Round => round_around(v, means)?,
            QuantMode::Ste => (v + (round_around(v, means)? - v)?.detach())?,
        })
    }
}

fn round_around(v: &Tensor, means: Option<&Tensor>) -> Result<Tensor> {
    Ok(match means {
        Some(m) => ((v - m)?.round()? + m)?,
        None => v.round()?,
    })
}

/// Standard normal CDF.
fn phi(x: &Tensor) -> Result<Tensor> {
    Ok((((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)? * 0.5)?)
}

pub fn phi_f64(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability mass of the unit-width bin around each value under `N(μ, σ²)`,
/// floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    // Evaluated on the lower tail, where the CDF difference keeps precision.
    let v = (y_hat - mu)?.abs()?;
    let upper = phi(&((0.5 - &v)? / sigma)?)?;
    let lower = phi(&((v.neg()? - 0.5)? / sigma)?)?;
    Ok((upper - lower)?.maximum(LIKELIHOOD_FLOOR)?)
}

/// Total surprisal in bits.
pub fn bits(likelihoods: &Tensor) -> Result<Tensor> {
    Ok((likelihoods.log()?.sum_all()? / -std::f64::consts::LN_2)?)
}

/// Learned per-channel density for the hyper-latent: a cumulative function
/// built from monotone elementwise maps, as in the factorized prior of the
/// variational hyperprior.
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

impl FactorizedPrior {
    pub const FILTERS: [usize; 3] = [3, 3, 3];
    pub const INIT_SCALE: f64 = 10.0;

    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        let mut dims = vec![1];
        dims.extend(Self::FILTERS);
        dims.push(1);
        let scale = Self::INIT_SCALE.powf(1.0 / (Self::FILTERS.len() + 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..dims.len() - 1 {
            let init = (1.0 / scale / dims[k + 1] as f64).exp_m1().ln();
            matrices.push(s.var(&format!("matrix{k}"), &[channels, dims[k + 1], dims[k]], Init::Const(init))?);
            biases.push(s.var(&format!("bias{k}"), &[channels, dims[k + 1], 1], Init::Uniform(0.5))?);
            if k + 1 < dims.len() - 1 {
                factors.push(s.var(&format!("factor{k}"), &[channels, dims[k + 1], 1], Init::Const(0.0))?);
            }
        }
        Ok(Self {
            channels,
            matrices,
            biases,
            factors,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits of the cumulative function for `x` shaped `[C, 1, L]`.
    fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, m) in self.matrices.iter().enumerate() {
            h = crate::nn::softplus(m)?.matmul(&h)?.broadcast_add(&self.biases[k])?;
            if let Some(f) = self.factors.get(k) {
                h = (&h + f.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Likelihood of every element of `z` (`[B, C, h, w]`).
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Argument(format!("expected {} channels, found {c}", self.channels)));
        }
        let flat = z.transpose(0, 1)?.reshape((c, 1, b * h * w))?;
        let lower = self.logits_cumulative(&(&flat - 0.5)?)?;
        let upper = self.logits_cumulative(&(&flat + 0.5)?)?;
        // Evaluate on the side where the sigmoids are far from saturation.
        let sign = (&lower + &upper)?.sign()?.neg()?;
        let hi = candle_nn::ops::sigmoid(&(&sign * &upper)?)?;
        let lo = candle_nn::ops::sigmoid(&(&sign * &lower)?)?;
        let p = (hi - lo)?.abs()?.maximum(LIKELIHOOD_FLOOR)?;
        Ok(p.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    /// One quantized table per channel, covering the integers whose tails
    /// outside the support hold at most [`FACTORIZED_TAIL`] each.
    pub fn build_tables(&self) -> Result<CdfTableSet> {
        let c = self.channels;
        let r = MAX_HALF_WIDTH;
        // Half-integer grid -r-1/2 ..= r+1/2.
        let grid: Vec<f64> = (-r..=r + 1).map(|k| k as f64 - 0.5).collect();
        let n = grid.len();
        let x = Tensor::from_vec(grid, (1, 1, n), &Device::Cpu)?
            .to_dtype(self.matrices[0].dtype())?
            .broadcast_as((c, 1, n))?
            .contiguous()?;
        let logits: Vec<Vec<f64>> = self
            .logits_cumulative(&x)?
            .to_dtype(DType::F64)?
            .reshape((c, n))?
            .to_vec2()?;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut pmfs = Vec::with_capacity(c);
        let mut offsets = Vec::with_capacity(c);
        for row in &logits {
            // cdf[i] is the mass below k - 1/2 for k = -r + i
            let cdf: Vec<f64> = row.iter().map(|&v| sig(v)).collect();
            let mut lo = 0;
            while lo + 1 < r as usize && cdf[lo + 1] <= FACTORIZED_TAIL {
                lo += 1;
            }
            let mut hi = n - 1;
            while hi > r as usize + 1 && 1.0 - cdf[hi - 1] <= FACTORIZED_TAIL {
                hi -= 1;
            }
            // slots cover k = lo-r ..= hi-1-r
            let mut pmf: Vec<f64> = (lo..hi).map(|i| (cdf[i + 1] - cdf[i]).max(0.0)).collect();
            pmf.push(cdf[lo] + (1.0 - cdf[hi]));
            pmfs.push(pmf);
            offsets.push(lo as i32 - r);
        }
        Ok(CdfTableSet::from_pmfs(&pmfs, offsets, PRECISION)?)
    }
}

/// Logarithmically spaced scale bins from [`SIGMA_MIN`] to [`SIGMA_MAX`].
pub fn scale_table() -> Vec<f64> {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    (0..SCALE_BINS)
        .map(|i| {
            if i == SCALE_BINS - 1 {
                SIGMA_MAX
            } else {
                (lo + (hi - lo) * i as f64 / (SCALE_BINS - 1) as f64).exp()
            }
        })
        .collect()
}

/// Index of the smallest bin at least `sigma`; scales above the last bin use it.
pub fn scale_index(table: &[f64], sigma: f64) -> usize {
    table.partition_point(|&b| b < sigma).min(table.len() - 1)
}

pub fn half_width(sigma: f64) -> i32 {
    ((TAIL_STDS * sigma).ceil() as i32).min(MAX_HALF_WIDTH)
}

/// Zero-mean discretized Gaussian over `-hw..=hw` plus the escape slot that
/// carries both tails.
pub fn gaussian_pmf(sigma: f64) -> (Vec<f64>, i32) {
    let hw = half_width(sigma);
    let mut pmf: Vec<f64> = (-hw..=hw)
        .map(|k| {
            let k = k as f64;
            phi_f64((k + 0.5) / sigma) - phi_f64((k - 0.5) / sigma)
        })
        .collect();
    pmf.push(2.0 * phi_f64((-hw as f64 - 0.5) / sigma));
    (pmf, -hw)
}

pub fn build_gaussian_tables() -> Result<CdfTableSet> {
    let (pmfs, offsets): (Vec<_>, Vec<_>) = scale_table().into_iter().map(gaussian_pmf).unzip();
    Ok(CdfTableSet::from_pmfs(&pmfs, offsets, PRECISION)?)
}

/// Spatial mask of a causal `k×k` convolution: rows above the centre and the
/// positions left of it in the centre row.
pub fn causal_mask(k: usize) -> Vec<f64> {
    let c = k / 2;
    (0..k * k)
        .map(|i| {
            let (r, col) = (i / k, i % k);
            if r < c || (r == c && col < c) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub const CONTEXT_KERNEL: usize = 5;

/// Masked 5×5 convolution predicting context features from causal neighbours.
pub struct ContextModel {
    pub conv: Conv2d,
}

impl ContextModel {
    pub fn new(s: &mut Scope, m: usize) -> Result<Self> {
        let mask = causal_mask(CONTEXT_KERNEL);
        Ok(Self {
            conv: Conv2d::masked(s, m, 2 * m, CONTEXT_KERNEL, &mask)?,
        })
    }

    pub fn forward(&self, y_hat: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(y_hat)?)
    }
}
