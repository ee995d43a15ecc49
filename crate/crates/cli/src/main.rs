use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Parser, Subcommand};
use lumen_core::checkpoint;
use lumen_core::codec::{compress, decompress};
use lumen_core::data::{iterate_pairs, prefetch};
use lumen_core::eval::{
    evaluate_corpus, plot_rd, sequential_pipeline, summarize, write_csv, ExternalEnhancer, ModelCodec, PipelineMode,
};
use lumen_core::image::load_image;
use lumen_core::metrics::psnr;
use lumen_core::model::JointModel;
use lumen_core::train::{MetricsLog, TrainConfig, TrainStage, Trainer};
use lumen_core::transforms::ModelConfig;
use lumen_core::{Error, Result};
use lumen_rans::Container;

#[derive(Parser, Debug)]
#[command(name = "lumen", version, about = "Joint low-light compression and enhancement codec")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compress a low-light image into a container file.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a container into an enhanced image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one stage and write a checkpoint.
    Train {
        #[arg(long)]
        stage: TrainStage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        quality: u8,
        #[arg(long, default_value_t = 1000)]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Starting weights; required for the joint and guidance stages.
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        /// Channel width (N = M = K) of a freshly initialized model.
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Guidance weight; defaults to a tenth of the distortion weight.
        #[arg(long)]
        lambda_g: Option<f64>,
        /// CSV metrics log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Load images on a background thread.
        #[arg(long)]
        prefetch: bool,
    },
    /// Score a paired corpus at one or more qualities.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; `{q}` is replaced by each quality index.
        #[arg(long)]
        ckpt: String,
        /// Inclusive range such as `0..7`, or a comma-separated list.
        #[arg(long, default_value = "0..7")]
        qualities: String,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Sequential compress/enhance baseline with an external enhancer.
    Pipeline {
        #[arg(long)]
        mode: PipelineMode,
        /// Executable called as `<enhancer> <input.png> <output.png>`.
        #[arg(long)]
        enhancer: PathBuf,
        /// Compression-only (pretrained) checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Normal-light reference for reporting PSNR.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

fn parse_qualities(s: &str) -> Result<Vec<u8>> {
    let bad = || Error::Argument(format!("cannot parse qualities {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u8 = a.trim().parse().map_err(|_| bad())?;
        let b: u8 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        return if a <= b { Ok((a..=b).collect()) } else { Err(bad()) };
    }
    s.split(',').map(|q| q.trim().parse().map_err(|_| bad())).collect()
}

fn load_models(template: &str, qualities: &[u8]) -> Result<Vec<JointModel>> {
    if !template.contains("{q}") {
        let model = checkpoint::load(Path::new(template), DType::F32)?;
        if !qualities.contains(&model.cfg.quality_index) {
            return Err(Error::Config(format!(
                "{template} holds quality {} which is not among {qualities:?}",
                model.cfg.quality_index
            )));
        }
        return Ok(vec![model]);
    }
    qualities
        .iter()
        .map(|q| {
            let path = template.replace("{q}", &q.to_string());
            let model = checkpoint::load(Path::new(&path), DType::F32)?;
            if model.cfg.quality_index != *q {
                return Err(Error::Config(format!("{path} holds quality {}", model.cfg.quality_index)));
            }
            Ok(model)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Encode { ckpt, input, output } => {
            let model = checkpoint::load(&ckpt, DType::F32)?;
            let (container, _) = compress(&model, &load_image(&input)?)?;
            std::fs::write(&output, container.to_bytes()).map_err(|e| Error::io(&output, e))?;
            println!("{} bytes, {:.4} bpp", container.byte_len(), container.bpp());
        }
        Cmd::Decode { ckpt, input, output } => {
            let model = checkpoint::load(&ckpt, DType::F32)?;
            let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let (img, _) = decompress(&model, &Container::from_bytes(&bytes)?)?;
            img.save(&output)?;
        }
        Cmd::Train {
            stage,
            data,
            quality,
            iters,
            seed,
            ckpt_out,
            ckpt_in,
            batch,
            patch,
            channels,
            lambda_g,
            log,
            prefetch: background,
        } => {
            let mut model = match &ckpt_in {
                Some(path) => checkpoint::load(path, DType::F32)?,
                None => JointModel::new(ModelConfig::new(channels, channels, channels, quality)?, seed, DType::F32)?,
            };
            model.cfg.quality_index = quality;
            let mut cfg = TrainConfig::new(stage, quality)?;
            cfg.iters = iters;
            cfg.seed = seed;
            cfg.batch = batch;
            cfg.patch = patch;
            if let Some(g) = lambda_g {
                cfg.lambda_g = g;
            }
            cfg.validate()?;
            let mut log = log.as_deref().map(MetricsLog::create).transpose()?;
            let pairs = iterate_pairs(&data, patch, seed)?;
            let mut samples: Box<dyn Iterator<Item = _>> = if background {
                Box::new(prefetch(pairs, 2 * batch).into_iter())
            } else {
                Box::new(pairs)
            };
            let mut trainer = Trainer::new(&mut model, stage, cfg)?;
            trainer.run(&mut samples, log.as_mut(), |r| {
                if r.iter % 100 == 0 || r.skipped {
                    eprintln!(
                        "iter {:>7} loss {:.5} D {:.4} Ry {:.4} Rz {:.4} lr {:.2e}{}",
                        r.iter,
                        r.loss,
                        r.distortion,
                        r.rate_y,
                        r.rate_z,
                        r.lr,
                        if r.skipped { " (skipped)" } else { "" }
                    );
                }
            })?;
            checkpoint::save(&mut model, &ckpt_out)?;
        }
        Cmd::Eval {
            data,
            ckpt,
            qualities,
            out,
            plot,
        } => {
            let models = load_models(&ckpt, &parse_qualities(&qualities)?)?;
            let points = evaluate_corpus(&data, &models)?;
            write_csv(&points, &out)?;
            let summary = summarize(&points);
            for s in &summary {
                println!(
                    "q{} ({} images): {:.4} bpp, {:.2} dB PSNR, {:.4} MS-SSIM ({:.2} dB)",
                    s.quality, s.images, s.bpp, s.psnr, s.ms_ssim, s.ms_ssim_db
                );
            }
            if let Some(plot) = plot {
                plot_rd(&summary, &plot)?;
            }
        }
        Cmd::Pipeline {
            mode,
            enhancer,
            ckpt,
            input,
            output,
            gt,
        } => {
            let model = checkpoint::load(&ckpt, DType::F32)?;
            let codec = ModelCodec::new(&model)?;
            let enhancer = ExternalEnhancer {
                program: enhancer,
                args: Vec::new(),
            };
            let report = sequential_pipeline(&load_image(&input)?, mode, &codec, &enhancer)?;
            report.output.save(&output)?;
            print!("mode {} bpp {:.4}", report.mode, report.bpp);
            if let Some(gt) = gt {
                print!(" psnr {:.2}", psnr(&report.output, &load_image(&gt)?.crop_to_original())?);
            }
            println!();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_ranges() {
        assert_eq!(parse_qualities("0..7").unwrap(), (0..=7).collect::<Vec<u8>>());
        assert_eq!(parse_qualities("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_qualities("1, 5").unwrap(), vec![1, 5]);
        assert!(parse_qualities("5..2").is_err());
        assert!(parse_qualities("x").is_err());
    }
}
