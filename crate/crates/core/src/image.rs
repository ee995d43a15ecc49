//! Image tensors, single-channel planes, file I/O, padding and resizing.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::{Error, Result};

/// Product of every stride-2 stage between the image and the hyper-latent.
pub const DOWNSAMPLE: usize = 64;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A 3-channel image in `[0, 1]`, stored channel-major as `[3, h, w]`.
///
/// `orig_h`/`orig_w` record the size before padding; padding only ever grows
/// the bottom and right edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
}

/// A single-channel real-valued grid `[h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub data: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl Plane {
    pub fn new(data: Vec<f64>, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), h * w, "plane data does not match {h}x{w}");
        Self { data, h, w }
    }

    pub fn filled(value: f64, h: usize, w: usize) -> Self {
        Self::new(vec![value; h * w], h, w)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 1, self.h, self.w), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

impl ImageTensor {
    /// Wraps unpadded data; original dimensions equal the data dimensions.
    pub fn new(data: Vec<f32>, h: usize, w: usize) -> Result<Self> {
        if data.len() != 3 * h * w || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "{} values do not form a 3x{h}x{w} image",
                data.len()
            )));
        }
        Ok(Self {
            data,
            h,
            w,
            orig_h: h,
            orig_w: w,
        })
    }

    pub fn filled(rgb: [f32; 3], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(h * w));
        }
        Self {
            data,
            h,
            w,
            orig_h: h,
            orig_w: w,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        let mut put = |x: usize, y: usize, rgb: [f32; 3]| {
            for (c, v) in rgb.into_iter().enumerate() {
                data[(c * h + y) * w + x] = v;
            }
        };
        match img {
            DynamicImage::ImageRgb8(buf) => {
                for (x, y, p) in buf.enumerate_pixels() {
                    put(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
                }
            }
            DynamicImage::ImageRgba8(buf) => {
                for (x, y, p) in buf.enumerate_pixels() {
                    put(x as usize, y as usize, [p[0], p[1], p[2]].map(|v| v as f32 / 255.0));
                }
            }
            DynamicImage::ImageRgb16(buf) => {
                for (x, y, p) in buf.enumerate_pixels() {
                    put(x as usize, y as usize, p.0.map(|v| v as f32 / 65535.0));
                }
            }
            DynamicImage::ImageRgba16(buf) => {
                for (x, y, p) in buf.enumerate_pixels() {
                    put(x as usize, y as usize, [p[0], p[1], p[2]].map(|v| v as f32 / 65535.0));
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "expected an 8- or 16-bit RGB image, found {:?}",
                    other.color()
                )))
            }
        }
        Self::new(data, h, w)
    }

    /// Pads by edge replication so both dimensions are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let h = self.h.div_ceil(m) * m;
        let w = self.w.div_ceil(m) * m;
        let mut out = self.pad_to(h, w);
        out.orig_h = self.orig_h;
        out.orig_w = self.orig_w;
        out
    }

    /// Edge-replicates to at least `h x w`; original dims are kept.
    pub fn pad_to(&self, h: usize, w: usize) -> Self {
        let (h, w) = (h.max(self.h), w.max(self.w));
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let sy = y.min(self.h - 1);
                for x in 0..w {
                    data.push(self.at(c, sy, x.min(self.w - 1)));
                }
            }
        }
        Self {
            data,
            h,
            w,
            orig_h: self.orig_h,
            orig_w: self.orig_w,
        }
    }

    /// Crops a window; the result is unpadded.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.h || x0 + w > self.w || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.h + y) * self.w;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(data, h, w)
    }

    /// Removes padding, returning the original-size image.
    pub fn crop_to_original(&self) -> Self {
        self.crop(0, 0, self.orig_h, self.orig_w)
            .expect("original dims never exceed padded dims")
    }

    /// `[1, 3, h, w]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 3, self.h, self.w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Stacks images of identical size into `[B, 3, h, w]`.
    pub fn batch_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Reads image `index` from a `[B, 3, h, w]` tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize, orig_h: usize, orig_w: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 || orig_h > h || orig_w > w {
            return Err(Error::Argument(format!("cannot read a {orig_h}x{orig_w} image from {:?}", t.dims())));
        }
        let data: Vec<f32> = t
            .get(index)?
            .to_dtype(DType::F32)?
            .clamp(0f32, 1f32)?
            .flatten_all()?
            .to_vec1()?;
        Ok(Self {
            data,
            h,
            w,
            orig_h,
            orig_w,
        })
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.w as u32, self.h as u32, |x, y| {
            let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes the original-size region as an 8-bit RGB file (format from the extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.crop_to_original()
            .to_rgb8()
            .save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Mean over all channels of the original-size region.
    pub fn mean(&self) -> f64 {
        let c = self.crop_to_original();
        c.data.iter().map(|&v| v as f64).sum::<f64>() / c.data.len() as f64
    }
}

/// Decodes an RGB image, scales it to `[0, 1]` and pads it to a multiple of
/// [`DOWNSAMPLE`] by edge replication.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(ImageTensor::from_dynamic(&img)?.pad_to_multiple(DOWNSAMPLE))
}

/// BT.601 luma of every pixel.
pub fn to_grayscale(x: &ImageTensor) -> Plane {
    let n = x.h * x.w;
    let data = (0..n)
        .map(|i| {
            LUMA[0] * x.data[i] as f64 + LUMA[1] * x.data[n + i] as f64 + LUMA[2] * x.data[2 * n + i] as f64
        })
        .collect();
    Plane::new(data, x.h, x.w)
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn resize_map(s: &Plane, h: usize, w: usize) -> Result<Plane> {
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("resize target {h}x{w} must be positive")));
    }
    if h == s.h && w == s.w {
        return Ok(s.clone());
    }
    let coords = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(h, s.h);
    let xs = coords(w, s.w);
    let lerp = |a: f64, b: f64, t: f64| (a + t * (b - a)).clamp(a.min(b), a.max(b));
    let mut data = Vec::with_capacity(h * w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(s.at(y0, x0), s.at(y0, x1), tx);
            let bottom = lerp(s.at(y1, x0), s.at(y1, x1), tx);
            data.push(lerp(top, bottom, ty));
        }
    }
    Ok(Plane::new(data, h, w))
}
