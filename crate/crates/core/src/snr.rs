//! SNR map estimation and the SNR-aware branch.
//!
//! The map is `s = x̄ / max(|g - x̄|, ε)` where `g` is the luma of the input and
//! `x̄` its box-filtered version. The branch turns compressed-domain features into
//! local (residual) and non-local (attention) features and blends them per
//! pixel with the normalized map.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor, D};

use crate::image::{resize_map, to_grayscale, ImageTensor, Plane};
use crate::nn::{LayerNorm, LeakyRelu, Linear, ResidualBlock, Scope, Sequential};
use crate::{Error, Result};

pub const SNR_EPS: f64 = 1e-6;
pub const SNR_MAX: f64 = 100.0;
pub const DEFAULT_KERNEL: usize = 3;
/// Tokens whose normalized SNR falls below this are hidden as attention keys.
pub const MASK_THRESHOLD: f64 = 0.5;

static MAPS_BUILT: AtomicUsize = AtomicUsize::new(0);

/// Number of SNR maps computed by this process.
pub fn maps_built() -> usize {
    MAPS_BUILT.load(Ordering::Relaxed)
}

/// Per-pixel SNR of an image, clamped to `[0, SNR_MAX]`.
///
/// The box filter replicates edge pixels, so every output averages exactly
/// `kernel_size²` samples.
pub fn compute_snr_map(x: &ImageTensor, kernel_size: usize) -> Result<Plane> {
    if kernel_size < 3 || kernel_size % 2 == 0 {
        return Err(Error::Argument(format!("kernel size {kernel_size} must be odd and at least 3")));
    }
    MAPS_BUILT.fetch_add(1, Ordering::Relaxed);
    let gray = to_grayscale(x);
    let (h, w) = (gray.h, gray.w);
    let r = (kernel_size / 2) as isize;
    let area = (kernel_size * kernel_size) as f64;

    // Separable sums: horizontal, then vertical.
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += gray.at(y, xx);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc += rows[yy * w + x];
            }
            let smooth = acc / area;
            let noise = (gray.at(y, x) - smooth).abs();
            data.push((smooth / noise.max(SNR_EPS)).clamp(0.0, SNR_MAX));
        }
    }
    Ok(Plane::new(data, h, w))
}

/// Min–max normalization to `[0, 1]`. A constant map becomes all ones when
/// positive and all zeros otherwise.
pub fn normalize_map(s: &Plane) -> Plane {
    let (lo, hi) = s.min_max();
    let range = hi - lo;
    if range <= f64::EPSILON * hi.abs().max(1.0) {
        let v = if hi > 0.0 { 1.0 } else { 0.0 };
        return Plane::filled(v, s.h, s.w);
    }
    Plane::new(s.data.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect(), s.h, s.w)
}

/// Normalized SNR maps resized to both feature levels, batched `[B, 1, h, w]`.
#[derive(Debug, Clone)]
pub struct SnrInputs {
    pub level0: Tensor,
    pub level1: Tensor,
}

impl SnrInputs {
    /// Level 0 is at 1/4 and level 1 at 1/16 of the (padded) image size.
    pub fn from_images(images: &[&ImageTensor], kernel_size: usize, dtype: DType) -> Result<Self> {
        let mut l0 = Vec::new();
        let mut l1 = Vec::new();
        for img in images {
            let s = normalize_map(&compute_snr_map(img, kernel_size)?);
            l0.push(resize_map(&s, img.h / 4, img.w / 4)?.to_tensor(dtype)?);
            l1.push(resize_map(&s, img.h / 16, img.w / 16)?.to_tensor(dtype)?);
        }
        Ok(Self {
            level0: Tensor::cat(&l0, 0)?,
            level1: Tensor::cat(&l1, 0)?,
        })
    }
}

/// `f_s ⊙ s + f_l ⊙ (1 − s)`, with `s` `[B, 1, h, w]` broadcast over channels.
pub fn snr_fuse(f_s: &Tensor, f_l: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = f_s.dims4()?;
    if f_s.dims() != f_l.dims() || s.dims() != [b, 1, h, w] {
        return Err(Error::Argument(format!(
            "fusion shapes disagree: {:?}, {:?}, {:?}",
            f_s.dims(),
            f_l.dims(),
            s.dims()
        )));
    }
    let s = s.clamp(0.0, 1.0)?;
    let inv = (s.ones_like()? - &s)?;
    Ok((f_s.broadcast_mul(&s)? + f_l.broadcast_mul(&inv)?)?)
}

/// Scaled dot-product attention over `[B, heads, T, d]` inputs.
///
/// `key_mask` is `[B, T]` with 1 for usable keys and 0 for hidden ones; hidden
/// keys receive exactly zero weight. Returns the output and the weights.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
    if let Some(mask) = key_mask {
        let (b, t) = mask.dims2()?;
        let bias = ((mask - 1.0)? * 1e30)?.reshape((b, 1, 1, t))?.to_dtype(logits.dtype())?;
        logits = logits.broadcast_add(&bias)?;
    }
    let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Key mask per image: tokens at or above the threshold. An image with no
/// such token keeps every key.
pub fn key_mask_from_snr(token_snr: &[Vec<f64>], threshold: f64, dtype: DType) -> Result<Tensor> {
    let b = token_snr.len();
    let t = token_snr.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(b * t);
    for row in token_snr {
        let keep: Vec<f64> = row.iter().map(|&s| if s >= threshold { 1.0 } else { 0.0 }).collect();
        if keep.iter().all(|&k| k == 0.0) {
            data.extend(std::iter::repeat(1.0).take(t));
        } else {
            data.extend(keep);
        }
    }
    Ok(Tensor::from_vec(data, (b, t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Transformer block over patch tokens with SNR-masked keys.
pub struct SnrAttention {
    patch: usize,
    heads: usize,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    ffn: Sequential,
}

impl SnrAttention {
    pub fn new(s: &mut Scope, channels: usize, patch: usize, heads: usize) -> Result<Self> {
        let d = channels * patch * patch;
        if d % heads != 0 {
            return Err(Error::Argument(format!("token width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            patch,
            heads,
            norm1: LayerNorm::new(&mut s.pp("norm1"), d)?,
            qkv: Linear::new(&mut s.pp("qkv"), d, 3 * d)?,
            proj: Linear::new(&mut s.pp("proj"), d, d)?,
            norm2: LayerNorm::new(&mut s.pp("norm2"), d)?,
            ffn: Sequential(vec![
                Box::new(Linear::new(&mut s.pp("ffn1"), d, d)?),
                Box::new(LeakyRelu),
                Box::new(Linear::new(&mut s.pp("ffn2"), d, d)?),
            ]),
        })
    }

    fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.patch;
        Ok(x.reshape((b, c, h / p, p, w / p, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, (h / p) * (w / p), c * p * p))?)
    }

    fn untokens(&self, t: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let b = t.dim(0)?;
        let p = self.patch;
        Ok(t.reshape((b, h / p, w / p, c, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, c, h, w))?)
    }

    /// Mean normalized SNR of each patch token, per image.
    fn token_snr(&self, s: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (b, _, h, w) = s.dims4()?;
        let p = self.patch;
        let pooled = s
            .to_dtype(DType::F64)?
            .reshape((b, h / p, p, w / p, p))?
            .mean(4)?
            .mean(2)?
            .reshape((b, (h / p) * (w / p)))?;
        Ok(pooled.to_vec2()?)
    }

    pub fn forward(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if s.dims() != [b, 1, h, w] {
            return Err(Error::Argument(format!(
                "snr map {:?} does not match features {:?}",
                s.dims(),
                x.dims()
            )));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Argument(format!("{h}x{w} not divisible by patch {}", self.patch)));
        }
        let mask = key_mask_from_snr(&self.token_snr(s)?, MASK_THRESHOLD, x.dtype())?;
        let tokens = self.tokens(x)?;
        let (_, t, d) = tokens.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(&self.norm1.forward(&tokens)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let (att, _) = masked_attention(&q, &k, &v, Some(&mask))?;
        let att = att.transpose(1, 2)?.reshape((b, t, d))?;
        let tokens = (tokens + self.proj.forward(&att)?)?;
        let tokens = (&tokens + self.ffn.forward(&self.norm2.forward(&tokens)?)?)?;
        self.untokens(&tokens, c, h, w)
    }
}

/// Local, non-local and fused features of one level.
#[derive(Debug, Clone)]
pub struct SnrFeatures {
    pub local: Tensor,
    pub nonlocal: Tensor,
    pub s_resized: Tensor,
    pub fused: Tensor,
}

/// SNR-aware branch for one feature level.
pub struct SnrLevel {
    channels: usize,
    local: [ResidualBlock; 2],
    attention: SnrAttention,
}

impl SnrLevel {
    pub fn new(s: &mut Scope, channels: usize, patch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            channels,
            local: [
                ResidualBlock::identity_init(&mut s.pp("local0"), channels)?,
                ResidualBlock::identity_init(&mut s.pp("local1"), channels)?,
            ],
            attention: SnrAttention::new(&mut s.pp("attention"), channels, patch, heads)?,
        })
    }

    pub fn local_features(&self, feat: &Tensor) -> Result<Tensor> {
        let c = feat.dim(1)?;
        if c != self.channels {
            return Err(Error::Argument(format!("expected {} channels, found {c}", self.channels)));
        }
        let h = self.local[0].forward(feat)?;
        Ok(self.local[1].forward(&h)?)
    }

    pub fn nonlocal_features(&self, feat: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.attention.forward(feat, s)
    }

    pub fn forward(&self, feat: &Tensor, s: &Tensor) -> Result<SnrFeatures> {
        let local = self.local_features(feat)?;
        let nonlocal = self.nonlocal_features(feat, s)?;
        let fused = snr_fuse(&local, &nonlocal, s)?;
        Ok(SnrFeatures {
            local,
            nonlocal,
            s_resized: s.clone(),
            fused,
        })
    }
}
