//! Image-level compress/decompress.
//!
//! The context model makes `ŷ` coding serial: at every position the causal
//! context and the entropy parameters are recomputed from already-decoded
//! values. Encoder and decoder run the same plain `f32` routine
//! ([`SerialEntropy`]), so both sides derive bit-identical `(μ, σ)` and
//! table choices.

use candle_core::{DType, Device, Tensor};
use lumen_rans::native::NativeCoder;
use lumen_rans::{CdfTableSet, Container, RansDecoder};

use crate::entropy::{causal_mask, scale_index, CONTEXT_KERNEL, SIGMA_MIN};
use crate::image::{ImageTensor, DOWNSAMPLE};
use crate::model::{JointModel, Tables};
use crate::snr::SnrInputs;
use crate::{Error, Result};

/// Quantized latents exactly as coded.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// `ŷ` as `[M, h, w]`.
    pub y_hat: Vec<f32>,
    /// `ẑ` as `[K, h/4, w/4]`.
    pub z_hat: Vec<i32>,
    pub y_dims: (usize, usize, usize),
    pub z_dims: (usize, usize, usize),
}

/// Context and entropy-parameter weights flattened for per-position evaluation.
pub struct SerialEntropy {
    m: usize,
    /// `(dy, dx)` offsets of the causal taps.
    taps: Vec<(isize, isize)>,
    /// Context weights laid out `[tap][in][out]`.
    ctx_w: Vec<f32>,
    ctx_b: Vec<f32>,
    layers: Vec<(Vec<f32>, Vec<f32>, usize, usize)>,
}

fn to_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl SerialEntropy {
    pub fn new(model: &JointModel) -> Result<Self> {
        let m = model.cfg.m;
        let k = CONTEXT_KERNEL;
        let conv = &model.context.conv;
        let w = to_f32(&conv.effective_weight()?)?; // [2m, m, k, k]
        let bias = conv.bias.as_ref().map(to_f32).transpose()?.unwrap_or_else(|| vec![0.0; 2 * m]);
        let mask = causal_mask(k);
        let mut taps = Vec::new();
        let mut ctx_w = Vec::new();
        for (t, &keep) in mask.iter().enumerate() {
            if keep == 0.0 {
                continue;
            }
            taps.push(((t / k) as isize - (k / 2) as isize, (t % k) as isize - (k / 2) as isize));
            for c in 0..m {
                for o in 0..2 * m {
                    ctx_w.push(w[((o * m + c) * k * k) + t]);
                }
            }
        }
        let mut layers = Vec::new();
        for conv in &model.entropy_params.layers {
            let (out, inp, _, _) = conv.weight.dims4()?;
            let b = conv.bias.as_ref().map(to_f32).transpose()?.unwrap_or_else(|| vec![0.0; out]);
            layers.push((to_f32(&conv.weight)?, b, out, inp));
        }
        Ok(Self {
            m,
            taps,
            ctx_w,
            ctx_b: bias,
            layers,
        })
    }

    /// `(μ, σ)` at `(i, j)` given the hyper features there and `ŷ` decoded so far.
    pub fn params_at(&self, y_hat: &[f32], h: usize, w: usize, i: usize, j: usize, hyper: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let m = self.m;
        let mut x = Vec::with_capacity(4 * m);
        x.extend_from_slice(hyper);
        let mut ctx = self.ctx_b.clone();
        for (t, &(dy, dx)) in self.taps.iter().enumerate() {
            let (yy, xx) = (i as isize + dy, j as isize + dx);
            if yy < 0 || xx < 0 || xx >= w as isize {
                continue;
            }
            let pos = yy as usize * w + xx as usize;
            for c in 0..m {
                let v = y_hat[c * h * w + pos];
                if v == 0.0 {
                    continue;
                }
                let row = &self.ctx_w[(t * m + c) * 2 * m..(t * m + c + 1) * 2 * m];
                for (acc, &wt) in ctx.iter_mut().zip(row) {
                    *acc += wt * v;
                }
            }
        }
        x.extend_from_slice(&ctx);
        let last = self.layers.len() - 1;
        for (l, (weight, bias, out, inp)) in self.layers.iter().enumerate() {
            let mut next = bias.clone();
            for (o, acc) in next.iter_mut().enumerate() {
                let row = &weight[o * inp..(o + 1) * inp];
                *acc += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f32>();
            }
            if l != last {
                for v in &mut next {
                    if *v < 0.0 {
                        *v *= 0.01;
                    }
                }
            }
            debug_assert_eq!(next.len(), *out);
            x = next;
        }
        let mu = x[..m].to_vec();
        let sigma = x[m..]
            .iter()
            .map(|&v| (v.max(0.0) + (1.0 + (-v.abs()).exp()).ln()).max(SIGMA_MIN as f32))
            .collect();
        (mu, sigma)
    }
}

/// Hyper features as `[2M, h, w]` in `f32`.
fn hyper_features(model: &JointModel, z_hat: &[i32], z_dims: (usize, usize, usize)) -> Result<Vec<f32>> {
    let (k, hz, wz) = z_dims;
    let z = Tensor::from_vec(z_hat.iter().map(|&v| v as f32).collect::<Vec<_>>(), (1, k, hz, wz), &Device::Cpu)?
        .to_dtype(model.dtype())?;
    to_f32(&model.h_s.forward(&z)?)
}

fn position_hyper(hyper: &[f32], channels: usize, hw: usize, pos: usize) -> Vec<f32> {
    (0..channels).map(|c| hyper[c * hw + pos]).collect()
}

/// Serially quantizes and codes `y` (`[M, h, w]`); returns the stream and `ŷ`.
pub fn encode_latent(
    serial: &SerialEntropy,
    tables: &Tables,
    y: &[f32],
    hyper: &[f32],
    h: usize,
    w: usize,
) -> Result<(Vec<u8>, Vec<f32>)> {
    let m = serial.m;
    let hw = h * w;
    let mut y_hat = vec![0f32; m * hw];
    let mut symbols = Vec::with_capacity(m * hw);
    let mut ids = Vec::with_capacity(m * hw);
    for i in 0..h {
        for j in 0..w {
            let pos = i * w + j;
            let (mu, sigma) = serial.params_at(&y_hat, h, w, i, j, &position_hyper(hyper, 2 * m, hw, pos));
            for c in 0..m {
                let sym = (y[c * hw + pos] - mu[c]).round();
                let sym = sym.clamp(i32::MIN as f32 / 2.0, i32::MAX as f32 / 2.0) as i32;
                symbols.push(sym);
                ids.push(scale_index(&tables.scales, sigma[c] as f64) as u32);
                y_hat[c * hw + pos] = sym as f32 + mu[c];
            }
        }
    }
    Ok((lumen_rans::encode(&symbols, &ids, &tables.gaussian)?, y_hat))
}

pub fn decode_latent(
    serial: &SerialEntropy,
    tables: &Tables,
    stream: &[u8],
    hyper: &[f32],
    h: usize,
    w: usize,
) -> Result<Vec<f32>> {
    let m = serial.m;
    let hw = h * w;
    let mut y_hat = vec![0f32; m * hw];
    let mut decoder = RansDecoder::new(stream)?;
    for i in 0..h {
        for j in 0..w {
            let pos = i * w + j;
            let (mu, sigma) = serial.params_at(&y_hat, h, w, i, j, &position_hyper(hyper, 2 * m, hw, pos));
            for c in 0..m {
                let id = scale_index(&tables.scales, sigma[c] as f64) as u32;
                let sym = decoder.decode_one(&tables.gaussian, id)?;
                y_hat[c * hw + pos] = sym as f32 + mu[c];
            }
        }
    }
    decoder.finish()?;
    Ok(y_hat)
}

fn channel_ids(k: usize, per_channel: usize) -> Vec<u32> {
    (0..k as u32).flat_map(|c| std::iter::repeat(c).take(per_channel)).collect()
}

fn require_tables(model: &JointModel) -> Result<&Tables> {
    model
        .tables()
        .ok_or_else(|| Error::State("coding tables are not built; load a checkpoint or update tables".into()))
}

/// The hyper-latent is coded in one batch call, through the native coder
/// when `LUMEN_NATIVE_CODER` names one.
pub fn encode_hyper(tables: &CdfTableSet, z_hat: &[i32], z_dims: (usize, usize, usize)) -> Result<Vec<u8>> {
    let (k, hz, wz) = z_dims;
    let ids = channel_ids(k, hz * wz);
    Ok(match NativeCoder::from_env(tables)? {
        Some(native) => native.encode(z_hat, &ids)?,
        None => lumen_rans::encode(z_hat, &ids, tables)?,
    })
}

pub fn decode_hyper(tables: &CdfTableSet, stream: &[u8], z_dims: (usize, usize, usize)) -> Result<Vec<i32>> {
    let (k, hz, wz) = z_dims;
    let ids = channel_ids(k, hz * wz);
    Ok(match NativeCoder::from_env(tables)? {
        Some(native) => native.decode(stream, &ids, ids.len())?,
        None => lumen_rans::decode(stream, &ids, tables, ids.len())?,
    })
}

/// Compresses a padded image. Returns the container and the coded latents.
pub fn compress(model: &JointModel, x: &ImageTensor) -> Result<(Container, Latents)> {
    let tables = require_tables(model)?;
    if x.h % DOWNSAMPLE != 0 || x.w % DOWNSAMPLE != 0 {
        return Err(Error::Argument(format!(
            "image {}x{} is not padded to a multiple of {DOWNSAMPLE}",
            x.h, x.w
        )));
    }
    let dtype = model.dtype();
    let t = x.to_tensor(dtype)?;
    let snr = if model.snr_enabled() {
        Some(SnrInputs::from_images(&[x], model.cfg.snr_kernel, dtype)?)
    } else {
        None
    };
    let a = model.analysis(&t, snr.as_ref())?;
    let (_, m, h, w) = a.y.dims4()?;
    let z = model.h_a.forward(&a.y)?;
    let (_, k, hz, wz) = z.dims4()?;
    let z_hat: Vec<i32> = to_f32(&z.round()?)?.into_iter().map(|v| v as i32).collect();
    let z_dims = (k, hz, wz);
    let z_stream = encode_hyper(&tables.factorized, &z_hat, z_dims)?;

    let hyper = hyper_features(model, &z_hat, z_dims)?;
    let serial = SerialEntropy::new(model)?;
    let y = to_f32(&a.y)?;
    let (y_stream, y_hat) = encode_latent(&serial, tables, &y, &hyper, h, w)?;

    let container = Container::new(
        model.cfg.quality_index,
        x.orig_h as u32,
        x.orig_w as u32,
        z_stream,
        y_stream,
    );
    Ok((
        container,
        Latents {
            y_hat,
            z_hat,
            y_dims: (m, h, w),
            z_dims,
        },
    ))
}

/// Decodes the latents of a container without running the synthesis.
pub fn decode_latents(model: &JointModel, c: &Container) -> Result<Latents> {
    let tables = require_tables(model)?;
    if c.quality_index != model.cfg.quality_index {
        return Err(Error::Config(format!(
            "stream has quality {} but the model was trained for quality {}",
            c.quality_index, model.cfg.quality_index
        )));
    }
    let ph = (c.orig_h as usize).div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    let pw = (c.orig_w as usize).div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    let (h, w) = (ph / 16, pw / 16);
    let z_dims = (model.cfg.k, ph / 64, pw / 64);
    let z_hat = decode_hyper(&tables.factorized, &c.z_stream, z_dims)?;
    let hyper = hyper_features(model, &z_hat, z_dims)?;
    let serial = SerialEntropy::new(model)?;
    let y_hat = decode_latent(&serial, tables, &c.y_stream, &hyper, h, w)?;
    Ok(Latents {
        y_hat,
        z_hat,
        y_dims: (model.cfg.m, h, w),
        z_dims,
    })
}

/// Main decoder on coded latents; output cropped to the original size.
pub fn synthesize(model: &JointModel, latents: &Latents, orig_h: usize, orig_w: usize) -> Result<ImageTensor> {
    let (m, h, w) = latents.y_dims;
    let y = Tensor::from_vec(latents.y_hat.clone(), (1, m, h, w), &Device::Cpu)?.to_dtype(model.dtype())?;
    let x = model.g_s.forward(&y)?;
    Ok(ImageTensor::from_tensor(&x, 0, orig_h, orig_w)?.crop_to_original())
}

pub fn decompress(model: &JointModel, c: &Container) -> Result<(ImageTensor, Latents)> {
    let latents = decode_latents(model, c)?;
    let img = synthesize(model, &latents, c.orig_h as usize, c.orig_w as usize)?;
    Ok((img, latents))
}
