//! Image quality and rate metrics. Images have dynamic range 1.

use crate::image::ImageTensor;
use crate::{Error, Result};

/// Reported for identical images instead of infinity.
pub const DB_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SIZE: usize = 160;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Argument(format!("image sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        DB_CAP
    } else {
        (-10.0 * mse.log10()).min(DB_CAP)
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// `−10·log10(1 − v)`, capped at [`DB_CAP`].
pub fn ms_ssim_db(v: f64) -> f64 {
    if v >= 1.0 {
        DB_CAP
    } else {
        (-10.0 * (1.0 - v).log10()).min(DB_CAP)
    }
}

/// Container bits per original pixel.
pub fn bpp(container_bytes: usize, orig_h: usize, orig_w: usize) -> f64 {
    8.0 * container_bytes as f64 / (orig_h * orig_w) as f64
}

/// Normalized Gaussian taps; at coarse scales narrower than the standard
/// window the window shrinks to the largest odd length that fits.
fn gaussian_window(len: usize) -> Vec<f64> {
    let c = (len / 2) as f64;
    let g: Vec<f64> = (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

#[derive(Clone)]
struct Channel {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

impl Channel {
    /// Separable valid-mode filtering.
    fn filter(&self, g: &[f64]) -> Channel {
        let k = g.len();
        let (h, w) = (self.h - k + 1, self.w - k + 1);
        let mut rows = vec![0.0; self.h * w];
        for y in 0..self.h {
            for x in 0..w {
                rows[y * w + x] = (0..k).map(|i| g[i] * self.data[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = (0..k).map(|i| g[i] * rows[(y + i) * w + x]).sum();
            }
        }
        Channel { data: out, h, w }
    }

    fn map(&self, other: &Channel, f: impl Fn(f64, f64) -> f64) -> Channel {
        Channel {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            h: self.h,
            w: self.w,
        }
    }

    /// 2×2 average pooling; an odd trailing row or column is dropped.
    fn downsample(&self) -> Channel {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.data[(2 * y + dy) * self.w + 2 * x + dx];
                out[y * w + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
        Channel { data: out, h, w }
    }
}

/// Mean SSIM and mean contrast–structure term of one scale.
fn ssim_cs(a: &Channel, b: &Channel) -> (f64, f64) {
    let mut len = WINDOW.min(a.h).min(a.w);
    if len % 2 == 0 {
        len -= 1;
    }
    let g = gaussian_window(len);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_a = a.filter(&g);
    let mu_b = b.filter(&g);
    let saa = a.map(a, |x, y| x * y).filter(&g);
    let sbb = b.map(b, |x, y| x * y).filter(&g);
    let sab = a.map(b, |x, y| x * y).filter(&g);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = saa.data[i] - ma * ma;
        let vb = sbb.data[i] - mb * mb;
        let cov = sab.data[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        cs += cs_i;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs_i;
    }
    let n = mu_a.data.len() as f64;
    (ssim / n, cs / n)
}

fn channel(img: &ImageTensor, c: usize) -> Channel {
    let n = img.h * img.w;
    Channel {
        data: img.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect(),
        h: img.h,
        w: img.w,
    }
}

/// Five-scale MS-SSIM, averaged over the RGB channels. Negative contrast
/// terms are clamped to zero before the weighted product.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    if a.h.min(a.w) < MS_SSIM_MIN_SIZE {
        return Err(Error::Argument(format!(
            "MS-SSIM needs images of at least {MS_SSIM_MIN_SIZE}x{MS_SSIM_MIN_SIZE}, got {}x{}",
            a.h, a.w
        )));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let (mut x, mut y) = (channel(a, c), channel(b, c));
        let mut v = 1.0;
        for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&x, &y);
            if s + 1 == MS_SSIM_WEIGHTS.len() {
                v *= ssim.max(0.0).powf(wt);
            } else {
                v *= cs.max(0.0).powf(wt);
                x = x.downsample();
                y = y.downsample();
            }
        }
        total += v;
    }
    Ok(total / 3.0)
}
