//! Corpus evaluation, RD plots and the sequential compress/enhance baselines.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use serde::{Deserialize, Serialize};

use crate::codec::{compress, decompress};
use crate::data::PairedDataset;
use crate::image::{load_image, ImageTensor, DOWNSAMPLE};
use crate::metrics::{ms_ssim, ms_ssim_db, psnr};
use crate::model::{JointModel, Stage};
use crate::{Error, Result};

/// One image at one quality; also the CSV row schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub image_id: String,
    pub quality: u8,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
}

/// Per-quality means over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RdSummary {
    pub quality: u8,
    pub images: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
}

/// Compresses `low` and scores the reconstruction against `gt`.
pub fn evaluate_image(model: &JointModel, image_id: &str, low: &ImageTensor, gt: &ImageTensor) -> Result<RdPoint> {
    let (container, _) = compress(model, &low.pad_to_multiple(DOWNSAMPLE))?;
    let (x_hat, _) = decompress(model, &container)?;
    let x_hat = x_hat.crop_to_original();
    let gt = gt.crop_to_original();
    let s = ms_ssim(&x_hat, &gt)?;
    Ok(RdPoint {
        image_id: image_id.to_string(),
        quality: model.cfg.quality_index,
        bpp: container.bpp(),
        psnr: psnr(&x_hat, &gt)?,
        ms_ssim: s,
        ms_ssim_db: ms_ssim_db(s),
    })
}

/// Scores every pair under `dir` with every model. Images are spread over
/// the available cores; the output order is (model, image) regardless.
pub fn evaluate_corpus(dir: &Path, models: &[JointModel]) -> Result<Vec<RdPoint>> {
    let dataset = PairedDataset::scan(dir).map_err(|e| match e {
        Error::Ingestion(m) if m.starts_with("no image") => Error::Argument(format!("empty corpus: {m}")),
        other => other,
    })?;
    let ids: Vec<String> = dataset
        .pairs
        .iter()
        .map(|(l, _)| l.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(ids.len()).max(1);
    let mut points = Vec::with_capacity(ids.len() * models.len());
    for model in models {
        let mut chunks: Vec<Result<Vec<RdPoint>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let (dataset, ids) = (&dataset, &ids);
                    scope.spawn(move || {
                        (t..ids.len())
                            .step_by(threads)
                            .map(|i| {
                                let (low, gt) = dataset.load_pair(i)?;
                                evaluate_image(model, &ids[i], &low, &gt)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            chunks = handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect();
        });
        let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
        let mut model_points: Vec<Option<RdPoint>> = vec![None; ids.len()];
        for (t, chunk) in chunks.into_iter().enumerate() {
            for (k, p) in chunk.into_iter().enumerate() {
                model_points[t + k * threads] = Some(p);
            }
        }
        points.extend(model_points.into_iter().map(|p| p.expect("every image scored")));
    }
    Ok(points)
}

pub fn summarize(points: &[RdPoint]) -> Vec<RdSummary> {
    let mut qualities: Vec<u8> = points.iter().map(|p| p.quality).collect();
    qualities.sort_unstable();
    qualities.dedup();
    qualities
        .into_iter()
        .map(|q| {
            let sel: Vec<&RdPoint> = points.iter().filter(|p| p.quality == q).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&RdPoint) -> f64| sel.iter().map(|p| f(p)).sum::<f64>() / n;
            RdSummary {
                quality: q,
                images: sel.len(),
                bpp: mean(|p| p.bpp),
                psnr: mean(|p| p.psnr),
                ms_ssim: mean(|p| p.ms_ssim),
                ms_ssim_db: mean(|p| p.ms_ssim_db),
            }
        })
        .collect()
}

pub fn write_csv(points: &[RdPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<RdPoint>, _>>()?)
}

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font for plot labels, from `LUMEN_PLOT_FONT` or a
/// few common system locations. Without one, plots are drawn unlabeled.
fn plot_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var_os("LUMEN_PLOT_FONT").map(PathBuf::from);
        env.into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .filter_map(|p| std::fs::read(p).ok())
            .any(|bytes| register_font("sans-serif", FontStyle::Normal, Vec::leak(bytes)).is_ok())
    })
}

/// PSNR and MS-SSIM (dB) against bpp, one marker per quality.
pub fn plot_rd(summary: &[RdSummary], path: &Path) -> Result<()> {
    if summary.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let labeled = plot_font();
    let plot_err = |e: &dyn fmt::Display| Error::Format(format!("{}: {e}", path.display()));
    let root = BitMapBackend::new(path, (1200, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let panels = root.split_evenly((1, 2));
    let max_bpp = summary.iter().map(|s| s.bpp).fold(0.0, f64::max) * 1.1 + 1e-3;
    let series: [(&str, fn(&RdSummary) -> f64); 2] = [("PSNR (dB)", |s| s.psnr), ("MS-SSIM (dB)", |s| s.ms_ssim_db)];
    for (panel, (label, f)) in panels.iter().zip(series) {
        let lo = summary.iter().map(f).fold(f64::INFINITY, f64::min) - 1.0;
        let hi = summary.iter().map(f).fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let mut builder = ChartBuilder::on(panel);
        builder.margin(20);
        if labeled {
            builder.caption(label, ("sans-serif", 20)).x_label_area_size(40).y_label_area_size(50);
        }
        let mut chart = builder
            .build_cartesian_2d(0.0..max_bpp, lo..hi)
            .map_err(|e| plot_err(&e))?;
        let mut mesh = chart.configure_mesh();
        if labeled {
            mesh.x_desc("bpp").y_desc(label);
        } else {
            mesh.disable_axes().x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(|e| plot_err(&e))?;
        let pts: Vec<(f64, f64)> = summary.iter().map(|s| (s.bpp, f(s))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), &BLUE))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, BLUE.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))
}

/// Order of the two stages in a sequential baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Compress the low-light image, enhance the decoded result.
    Cbe,
    /// Enhance first, then compress the enhanced image.
    Ebc,
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbe" => Ok(Self::Cbe),
            "ebc" => Ok(Self::Ebc),
            other => Err(Error::Argument(format!("unknown pipeline mode {other:?}"))),
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cbe => "cbe",
            Self::Ebc => "ebc",
        })
    }
}

pub trait Codec {
    /// Compresses and decodes `x`, returning the reconstruction and its bpp.
    fn round_trip(&self, x: &ImageTensor) -> Result<(ImageTensor, f64)>;
}

pub trait Enhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor>;
}

/// The learned codec with the SNR branch out of the loop: a model trained
/// only as a plain rate–distortion codec.
pub struct ModelCodec<'a>(&'a JointModel);

impl<'a> ModelCodec<'a> {
    pub fn new(model: &'a JointModel) -> Result<Self> {
        if model.stage != Stage::Pretrained {
            return Err(Error::State(format!(
                "sequential baselines need a compression-only checkpoint, found stage {:?}",
                model.stage
            )));
        }
        Ok(Self(model))
    }
}

impl Codec for ModelCodec<'_> {
    fn round_trip(&self, x: &ImageTensor) -> Result<(ImageTensor, f64)> {
        let (c, _) = compress(self.0, &x.pad_to_multiple(DOWNSAMPLE))?;
        let (x_hat, _) = decompress(self.0, &c)?;
        Ok((x_hat.crop_to_original(), c.bpp()))
    }
}

pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(x.clone())
    }
}

/// Any executable called as `program [args..] <input.png> <output.png>`.
pub struct ExternalEnhancer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Enhancer for ExternalEnhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let (input, output) = (dir.path().join("in.png"), dir.path().join("out.png"));
        x.save(&input)?;
        let program = self.program.display().to_string();
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Enhancer {
                program: program.clone(),
                status: e.to_string(),
            })?;
        if !status.success() {
            return Err(Error::Enhancer {
                program,
                status: status.to_string(),
            });
        }
        let out = load_image(&output)?.crop_to_original();
        if (out.h, out.w) != (x.orig_h, x.orig_w) {
            return Err(Error::Enhancer {
                program,
                status: format!("returned {}x{} for a {}x{} input", out.h, out.w, x.orig_h, x.orig_w),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub output: ImageTensor,
    pub bpp: f64,
}

pub fn sequential_pipeline(
    x: &ImageTensor,
    mode: PipelineMode,
    codec: &dyn Codec,
    enhancer: &dyn Enhancer,
) -> Result<PipelineReport> {
    let x = x.crop_to_original();
    let (output, bpp) = match mode {
        PipelineMode::Cbe => {
            let (decoded, bpp) = codec.round_trip(&x)?;
            (enhancer.enhance(&decoded)?, bpp)
        }
        PipelineMode::Ebc => codec.round_trip(&enhancer.enhance(&x)?)?,
    };
    Ok(PipelineReport { mode, output, bpp })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_means() {
        let p = |id: &str, q, bpp| RdPoint {
            image_id: id.into(),
            quality: q,
            bpp,
            psnr: 30.0,
            ms_ssim: 0.9,
            ms_ssim_db: 10.0,
        };
        let one = summarize(&[p("a", 1, 0.5)]);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].bpp, one[0].psnr, one[0].images), (0.5, 30.0, 1));
        let s = summarize(&[p("a", 1, 0.5), p("b", 1, 1.5), p("a", 2, 2.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].bpp, 1.0);
        assert_eq!(s[1].quality, 2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let points = vec![RdPoint {
            image_id: "x.png".into(),
            quality: 3,
            bpp: 0.123456789012345,
            psnr: 31.00000000001,
            ms_ssim: 0.987654321,
            ms_ssim_db: ms_ssim_db(0.987654321),
        }];
        write_csv(&points, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image_id,quality,bpp,psnr,ms_ssim,ms_ssim_db"));
        assert_eq!(read_csv(&path).unwrap(), points);
    }

    #[test]
    fn plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.png");
        let s = |q, bpp, psnr| RdSummary {
            quality: q,
            images: 1,
            bpp,
            psnr,
            ms_ssim: 0.9,
            ms_ssim_db: 10.0 + psnr / 10.0,
        };
        plot_rd(&[s(0, 0.1, 25.0), s(3, 0.4, 29.0), s(7, 1.2, 34.0)], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (1200, 500));
        assert!(plot_rd(&[], &path).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("CbE".parse::<PipelineMode>().unwrap(), PipelineMode::Cbe);
        assert_eq!(PipelineMode::Ebc.to_string(), "ebc");
        assert!("both".parse::<PipelineMode>().is_err());
    }
}
