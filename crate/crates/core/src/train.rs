//! Losses, the two-stage training loop, loss-cap step skipping and the
//! learning-rate schedule.
//!
//! Distortion is measured on the 8-bit scale so the λ values carry over from
//! the usual conventions: the pretraining term is `255²·MSE`, the joint term
//! `255·L1`. Rates are in bits per pixel of the input batch.

use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::entropy::{bits, QuantMode, Quantizer};
use crate::image::ImageTensor;
use crate::model::{JointModel, Stage, SNR_PREFIXES};
use crate::snr::SnrInputs;
use crate::transforms::LAMBDAS;
use crate::{Error, Result};

pub const PIXEL_MAX: f64 = 255.0;
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_DECAY_STEPS: [u64; 4] = [500_000, 600_000, 700_000, 850_000];
pub const PRETRAIN_LAMBDA: f64 = 0.0016;
/// λ_d / λ_g when guidance is enabled.
pub const GUIDANCE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Plain rate–distortion codec on the input image, MSE distortion.
    Pretrain,
    /// Low-light input, normal-light target, L1 distortion.
    Joint,
    /// Joint plus the teacher-latent guidance term.
    Guidance,
}

impl TrainStage {
    /// Exponent of the distortion norm.
    pub fn p_norm(self) -> u8 {
        match self {
            Self::Pretrain => 2,
            Self::Joint | Self::Guidance => 1,
        }
    }
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "joint" => Ok(Self::Joint),
            "guidance" => Ok(Self::Guidance),
            other => Err(Error::Argument(format!("unknown training stage {other:?}"))),
        }
    }
}

/// Threshold above which a step is skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossCap {
    /// `factor` times an exponential moving average of accepted losses.
    Ema { factor: f64, decay: f64 },
    Fixed(f64),
    Off,
}

impl Default for LossCap {
    fn default() -> Self {
        LossCap::Ema {
            factor: 5.0,
            decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub batch: usize,
    pub patch: usize,
    pub iters: u64,
    pub lr: f64,
    pub lr_decay_steps: Vec<u64>,
    pub loss_cap: LossCap,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a stage and quality index.
    pub fn new(stage: TrainStage, quality_index: u8) -> Result<Self> {
        let lambda_d = match stage {
            TrainStage::Pretrain => PRETRAIN_LAMBDA,
            _ => *LAMBDAS
                .get(quality_index as usize)
                .ok_or_else(|| Error::Argument(format!("quality index {quality_index} not in 0..=7")))?,
        };
        let lambda_g = if stage == TrainStage::Guidance {
            lambda_d / GUIDANCE_RATIO
        } else {
            0.0
        };
        Ok(Self {
            lambda_d,
            lambda_g,
            batch: 8,
            patch: 256,
            iters: 1000,
            lr: DEFAULT_LR,
            lr_decay_steps: DEFAULT_DECAY_STEPS.to_vec(),
            loss_cap: LossCap::default(),
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !LAMBDAS.contains(&self.lambda_d) {
            return Err(Error::Argument(format!("lambda_d {} is not one of {LAMBDAS:?}", self.lambda_d)));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return Err(Error::Argument(format!("lambda_g {} must be nonnegative", self.lambda_g)));
        }
        if self.lr_decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("decay steps must be strictly increasing".into()));
        }
        if self.batch == 0 || self.patch == 0 || self.patch % crate::image::DOWNSAMPLE != 0 {
            return Err(Error::Argument(format!(
                "batch must be positive and patch a multiple of {}",
                crate::image::DOWNSAMPLE
            )));
        }
        match self.loss_cap {
            LossCap::Ema { factor, decay } if factor <= 0.0 || !(0.0..1.0).contains(&decay) => {
                Err(Error::Argument("loss cap factor must be positive and decay in [0, 1)".into()))
            }
            LossCap::Fixed(v) if v <= 0.0 => Err(Error::Argument("loss cap must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Base rate halved once for every decay step already reached.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let n = cfg.lr_decay_steps.iter().filter(|&&s| s <= iter).count();
    cfg.lr * 0.5f64.powi(n as i32)
}

/// Scalar loss terms; `total = lambda·distortion + rate_y + rate_z`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub distortion: Tensor,
    pub rate_y: Tensor,
    pub rate_z: Tensor,
}

fn pixels(x: &Tensor) -> Result<f64> {
    let (b, _, h, w) = x.dims4()?;
    Ok((b * h * w) as f64)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn rd_terms(distortion: Tensor, x: &Tensor, p_y: &Tensor, p_z: &Tensor, lambda_d: f64) -> Result<LossTerms> {
    let n = pixels(x)?;
    let rate_y = (bits(p_y)? / n)?;
    let rate_z = (bits(p_z)? / n)?;
    let total = ((&distortion * lambda_d)? + &rate_y)?.add(&rate_z)?;
    Ok(LossTerms {
        total,
        distortion,
        rate_y,
        rate_z,
    })
}

/// `λ·255²·MSE(x, x_rec) + R_y + R_z`.
pub fn rd_pretrain_loss(x: &Tensor, x_rec: &Tensor, p_y: &Tensor, p_z: &Tensor, lambda_d: f64) -> Result<LossTerms> {
    same_shape(x, x_rec, "reconstruction")?;
    let d = ((x - x_rec)?.sqr()?.mean_all()? * (PIXEL_MAX * PIXEL_MAX))?;
    rd_terms(d, x, p_y, p_z, lambda_d)
}

/// `λ·255·L1(x_gt, x_hat) + R_y + R_z`.
pub fn joint_loss(x_gt: &Tensor, x_hat: &Tensor, p_y: &Tensor, p_z: &Tensor, lambda_d: f64) -> Result<LossTerms> {
    same_shape(x_gt, x_hat, "reconstruction")?;
    let d = ((x_gt - x_hat)?.abs()?.mean_all()? * PIXEL_MAX)?;
    rd_terms(d, x_gt, p_y, p_z, lambda_d)
}

/// Mean absolute error of each latent level against its teacher, summed.
pub fn guidance_loss(y0_gt: &Tensor, y0: &Tensor, y_gt: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(y0_gt, y0, "level-0 latents")?;
    same_shape(y_gt, y, "level-1 latents")?;
    let l0 = (y0_gt - y0)?.abs()?.mean_all()?;
    let l1 = (y_gt - y)?.abs()?.mean_all()?;
    Ok((l0 + l1)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: u64,
    pub loss: f64,
    pub distortion: f64,
    pub rate_y: f64,
    pub rate_z: f64,
    pub guidance: f64,
    pub lr: f64,
    pub skipped: bool,
}

/// CSV writer for [`StepReport`]s.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, r: &StepReport) -> Result<()> {
        self.writer.serialize(r)?;
        self.writer.flush().map_err(|e| Error::io("metrics log", e))
    }
}

pub struct Trainer<'a> {
    pub model: &'a mut JointModel,
    pub stage: TrainStage,
    pub cfg: TrainConfig,
    optimizer: AdamW,
    quantizer: Quantizer,
    ema: Option<f64>,
    iter: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut JointModel, stage: TrainStage, cfg: TrainConfig) -> Result<Self> {
        if stage != TrainStage::Pretrain && model.stage < Stage::Pretrained {
            return Err(Error::State(
                "joint training starts from pretrained weights; run the pretrain stage first".into(),
            ));
        }
        let vars: Vec<Var> = match stage {
            TrainStage::Pretrain => model
                .store
                .named()
                .filter(|(name, _)| !SNR_PREFIXES.iter().any(|p| name.split('.').next() == Some(p)))
                .map(|(_, v)| v.clone())
                .collect(),
            _ => model.store.vars(),
        };
        let params = ParamsAdamW {
            lr: lr_at(0, &cfg),
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            optimizer: AdamW::new(vars, params)?,
            quantizer: Quantizer::new(cfg.seed),
            model,
            stage,
            cfg,
            ema: None,
            iter: 0,
        })
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    fn cap(&self) -> Option<f64> {
        match (self.cfg.loss_cap, self.ema) {
            (LossCap::Ema { factor, .. }, Some(ema)) => Some(factor * ema),
            (LossCap::Fixed(v), _) => Some(v),
            _ => None,
        }
    }

    /// Loss of the current parameters on `batch`, consuming quantization noise.
    pub fn loss(&mut self, batch: &[PairedSample]) -> Result<(LossTerms, Option<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let dtype = self.model.dtype();
        let lows: Vec<&ImageTensor> = batch.iter().map(|s| &s.low).collect();
        let x = ImageTensor::batch_tensor(&lows, dtype)?;
        if self.stage == TrainStage::Pretrain {
            let out = self.model.forward(&x, None, &mut self.quantizer, QuantMode::Noise)?;
            let terms = rd_pretrain_loss(&x, &out.x_hat, &out.y_likelihoods, &out.z_likelihoods, self.cfg.lambda_d)?;
            return Ok((terms, None));
        }
        let gts: Vec<&ImageTensor> = batch.iter().map(|s| &s.gt).collect();
        let x_gt = ImageTensor::batch_tensor(&gts, dtype)?;
        let snr = SnrInputs::from_images(&lows, self.model.cfg.snr_kernel, dtype)?;
        let out = self.model.forward(&x, Some(&snr), &mut self.quantizer, QuantMode::Noise)?;
        let mut terms = joint_loss(&x_gt, &out.x_hat, &out.y_likelihoods, &out.z_likelihoods, self.cfg.lambda_d)?;
        if self.stage != TrainStage::Guidance {
            return Ok((terms, None));
        }
        let (y0_gt, y_gt) = self.model.teacher_latents(&x_gt)?;
        let s = guidance_loss(&y0_gt, &out.y0, &y_gt, &out.y)?;
        if self.cfg.lambda_g != 0.0 {
            terms.total = (&terms.total + (&s * self.cfg.lambda_g)?)?;
        }
        Ok((terms, Some(s)))
    }

    /// One optimizer step, or a recorded skip when the loss exceeds the cap.
    pub fn step(&mut self, batch: &[PairedSample]) -> Result<StepReport> {
        let iter = self.iter;
        let lr = lr_at(iter, &self.cfg);
        let (terms, guidance) = self.loss(batch)?;
        let mut values = [0.0; 5];
        let named = [
            ("distortion", Some(&terms.distortion)),
            ("rate_y", Some(&terms.rate_y)),
            ("rate_z", Some(&terms.rate_z)),
            ("guidance", guidance.as_ref()),
            ("total", Some(&terms.total)),
        ];
        for (slot, (component, t)) in values.iter_mut().zip(named) {
            if let Some(t) = t {
                *slot = scalar(t)?;
                if !slot.is_finite() {
                    return Err(Error::NonFinite { component, iter });
                }
            }
        }
        let [distortion, rate_y, rate_z, guidance, loss] = values;
        let skipped = self.cap().is_some_and(|cap| loss > cap);
        if !skipped {
            self.optimizer.set_learning_rate(lr);
            self.optimizer.backward_step(&terms.total)?;
            if let LossCap::Ema { decay, .. } = self.cfg.loss_cap {
                self.ema = Some(self.ema.map_or(loss, |e| decay * e + (1.0 - decay) * loss));
            }
            self.model.invalidate_tables();
        }
        self.iter += 1;
        Ok(StepReport {
            iter,
            loss,
            distortion,
            rate_y,
            rate_z,
            guidance,
            lr,
            skipped,
        })
    }

    /// Runs `cfg.iters` steps, drawing batches from `samples`, and marks the
    /// model with the stage reached.
    pub fn run(
        &mut self,
        samples: &mut dyn Iterator<Item = Result<PairedSample>>,
        mut log: Option<&mut MetricsLog>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(self.cfg.iters as usize);
        for _ in 0..self.cfg.iters {
            let batch = samples
                .take(self.cfg.batch)
                .collect::<Result<Vec<_>>>()?;
            if batch.len() < self.cfg.batch {
                return Err(Error::Ingestion("sample stream ended early".into()));
            }
            let r = self.step(&batch)?;
            if let Some(log) = log.as_deref_mut() {
                log.write(&r)?;
            }
            on_step(&r);
            reports.push(r);
        }
        self.finish();
        Ok(reports)
    }

    /// Records training progress on the model.
    pub fn finish(&mut self) {
        let reached = match self.stage {
            TrainStage::Pretrain => Stage::Pretrained,
            _ => Stage::Joint,
        };
        self.model.stage = self.model.stage.max(reached);
        self.model.invalidate_tables();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::ModelConfig;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::new(TrainStage::Joint, 3).unwrap();
        let cases = [
            (0, 1e-4),
            (499_999, 1e-4),
            (500_000, 5e-5),
            (600_000, 2.5e-5),
            (700_000, 1.25e-5),
            (850_000, 6.25e-6),
            (850_001, 6.25e-6),
        ];
        for (i, lr) in cases {
            assert!((lr_at(i, &cfg) - lr).abs() < 1e-18, "{i}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(TrainStage::Guidance, 7).unwrap();
        assert!((cfg.lambda_g - 0.0012).abs() < 1e-15);
        cfg.validate().unwrap();
        cfg.lr_decay_steps = vec![5, 5];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(TrainStage::Joint, 0).unwrap();
        cfg.lambda_d = 0.5;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::new(TrainStage::Joint, 8).is_err());
        assert_eq!("guidance".parse::<TrainStage>().unwrap(), TrainStage::Guidance);
        assert!("x".parse::<TrainStage>().is_err());
    }

    #[test]
    fn perfect_reconstruction_with_uniform_rate() {
        // 2^3-symbol uniform pmfs: 3 bits per latent element
        let x = t(&[0.2; 48], &[1, 3, 4, 4]);
        let p_y = t(&[0.125; 32], &[1, 2, 4, 4]);
        let p_z = t(&[0.125; 16], &[1, 1, 4, 4]);
        let l = rd_pretrain_loss(&x, &x, &p_y, &p_z, 0.0016).unwrap();
        assert_eq!(scalar(&l.distortion).unwrap(), 0.0);
        assert!((scalar(&l.rate_y).unwrap() - 6.0).abs() < 1e-12);
        assert!((scalar(&l.rate_z).unwrap() - 3.0).abs() < 1e-12);
        assert!((scalar(&l.total).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_is_linear_in_lambda() {
        let a = t(&[0.1, 0.5, 0.9, 0.3], &[1, 1, 2, 2]);
        let b = t(&[0.2, 0.5, 0.7, 0.0], &[1, 1, 2, 2]);
        let p = t(&[0.5; 4], &[1, 1, 2, 2]);
        let l1 = joint_loss(&a, &b, &p, &p, 0.01).unwrap();
        let l2 = joint_loss(&a, &b, &p, &p, 0.02).unwrap();
        let l0 = joint_loss(&a, &b, &p, &p, 0.0).unwrap();
        let d = scalar(&l1.distortion).unwrap();
        assert!((d - 255.0 * 0.6 / 4.0).abs() < 1e-12);
        let rates = |l: &LossTerms| scalar(&l.rate_y).unwrap() + scalar(&l.rate_z).unwrap();
        assert_eq!(rates(&l1), rates(&l2));
        assert_eq!(scalar(&l0.total).unwrap(), rates(&l0));
        let dl = scalar(&l2.total).unwrap() - scalar(&l1.total).unwrap();
        assert!((dl - 0.01 * d).abs() < 1e-12);
    }

    #[test]
    fn guidance_term() {
        let y0 = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 8, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(scalar(&guidance_loss(&y0, &y0, &y, &y).unwrap()).unwrap(), 0.0);
        let s = guidance_loss(&(&y0 + 0.75).unwrap(), &y0, &y, &y).unwrap();
        assert!((scalar(&s).unwrap() - 0.75).abs() < 1e-12);
        assert!(guidance_loss(&y0, &y, &y, &y).is_err());
    }

    #[test]
    fn joint_requires_pretrained_weights() {
        let mut model = JointModel::new(ModelConfig::new(8, 8, 8, 0).unwrap(), 0, DType::F32).unwrap();
        let cfg = TrainConfig::new(TrainStage::Joint, 0).unwrap();
        assert!(matches!(Trainer::new(&mut model, TrainStage::Joint, cfg), Err(Error::State(_))));
    }
}
