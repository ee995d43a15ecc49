//! The joint model: two-level adapted analysis, hyperprior with context
//! model, and the main decoder.

use candle_core::{DType, Tensor};
use lumen_rans::CdfTableSet;

use crate::entropy::{
    build_gaussian_tables, gaussian_likelihood, scale_table, ContextModel, FactorizedPrior, QuantMode, Quantizer,
};
use crate::nn::ParamStore;
use crate::snr::{SnrFeatures, SnrInputs, SnrLevel};
use crate::transforms::{
    AnalysisStage0, AnalysisStage1, EntropyParameters, FeatureAdapt, HyperAnalysis, HyperSynthesis, ModelConfig,
    Synthesis, LEVEL0_PATCH, LEVEL1_PATCH,
};
use crate::{Error, Result};

/// Training progress recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initialized = 0,
    /// Trained as a plain rate–distortion codec; the SNR branch is unused.
    Pretrained = 1,
    Joint = 2,
}

impl Stage {
    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Self::Initialized),
            1 => Ok(Self::Pretrained),
            2 => Ok(Self::Joint),
            other => Err(Error::Checkpoint(format!("unknown stage {other}"))),
        }
    }
}

/// Parameter prefixes of the SNR branch and the feature-adaptive modules.
pub const SNR_PREFIXES: [&str; 4] = ["snr0", "snr1", "fa0", "fa1"];

/// Quantized tables shared by encoder and decoder.
pub struct Tables {
    pub gaussian: CdfTableSet,
    pub factorized: CdfTableSet,
    pub scales: Vec<f64>,
}

pub struct JointModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stage: Stage,
    pub g_a0: AnalysisStage0,
    pub g_a1: AnalysisStage1,
    pub g_s: Synthesis,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    pub snr0: SnrLevel,
    pub snr1: SnrLevel,
    pub fa0: FeatureAdapt,
    pub fa1: FeatureAdapt,
    pub prior: FactorizedPrior,
    pub context: ContextModel,
    pub entropy_params: EntropyParameters,
    tables: Option<Tables>,
}

/// Features of both analysis levels, before and after adaptation.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub y0_raw: Tensor,
    pub y0: Tensor,
    pub y1_raw: Tensor,
    pub y: Tensor,
    pub snr: Option<(SnrFeatures, SnrFeatures)>,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Unclamped reconstruction.
    pub x_hat: Tensor,
    pub y_likelihoods: Tensor,
    pub z_likelihoods: Tensor,
    pub y0: Tensor,
    pub y: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl JointModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let (n, m, k) = (cfg.n, cfg.m, cfg.k);
        let mut root = store.root();
        let g_a0 = AnalysisStage0::new(&mut root.pp("g_a0"), n)?;
        let g_a1 = AnalysisStage1::new(&mut root.pp("g_a1"), n, m)?;
        let g_s = Synthesis::new(&mut root.pp("g_s"), n, m)?;
        let h_a = HyperAnalysis::new(&mut root.pp("h_a"), n, m, k)?;
        let h_s = HyperSynthesis::new(&mut root.pp("h_s"), n, m, k)?;
        let w0 = n * LEVEL0_PATCH * LEVEL0_PATCH;
        let w1 = m * LEVEL1_PATCH * LEVEL1_PATCH;
        let snr0 = SnrLevel::new(&mut root.pp("snr0"), n, LEVEL0_PATCH, ModelConfig::heads(w0))?;
        let snr1 = SnrLevel::new(&mut root.pp("snr1"), m, LEVEL1_PATCH, ModelConfig::heads(w1))?;
        let fa0 = FeatureAdapt::new(&mut root.pp("fa0"), n)?;
        let fa1 = FeatureAdapt::new(&mut root.pp("fa1"), m)?;
        let prior = FactorizedPrior::new(&mut root.pp("prior"), k)?;
        let context = ContextModel::new(&mut root.pp("context"), m)?;
        let entropy_params = EntropyParameters::new(&mut root.pp("entropy_params"), m)?;
        Ok(Self {
            cfg,
            store,
            stage: Stage::Initialized,
            g_a0,
            g_a1,
            g_s,
            h_a,
            h_s,
            snr0,
            snr1,
            fa0,
            fa1,
            prior,
            context,
            entropy_params,
            tables: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Whether encoding conditions on the SNR branch. A model trained only as
    /// a plain codec leaves it out.
    pub fn snr_enabled(&self) -> bool {
        self.stage != Stage::Pretrained
    }

    pub fn analysis(&self, x: &Tensor, snr: Option<&SnrInputs>) -> Result<Analysis> {
        let y0_raw = self.g_a0.forward(x)?;
        let Some(s) = snr else {
            let y1_raw = self.g_a1.forward(&y0_raw)?;
            return Ok(Analysis {
                y0: y0_raw.clone(),
                y0_raw,
                y: y1_raw.clone(),
                y1_raw,
                snr: None,
            });
        };
        let f0 = self.snr0.forward(&y0_raw, &s.level0)?;
        let y0 = self.fa0.forward(&y0_raw, &f0.fused)?;
        let y1_raw = self.g_a1.forward(&y0)?;
        let f1 = self.snr1.forward(&y1_raw, &s.level1)?;
        let y = self.fa1.forward(&y1_raw, &f1.fused)?;
        Ok(Analysis {
            y0_raw,
            y0,
            y1_raw,
            y,
            snr: Some((f0, f1)),
        })
    }

    /// Teacher latents of the unadapted encoders, cut from the graph.
    pub fn teacher_latents(&self, x_gt: &Tensor) -> Result<(Tensor, Tensor)> {
        let y0 = self.g_a0.forward(x_gt)?;
        let y = self.g_a1.forward(&y0)?;
        Ok((y0.detach(), y.detach()))
    }

    /// Training-style forward pass with relaxed (or rounded) quantization.
    pub fn forward(
        &self,
        x: &Tensor,
        snr: Option<&SnrInputs>,
        quantizer: &mut Quantizer,
        mode: QuantMode,
    ) -> Result<ForwardOutput> {
        let a = self.analysis(x, snr)?;
        self.forward_latent(a.y0, a.y, quantizer, mode)
    }

    /// Entropy model and decoder applied to a given latent.
    pub fn forward_latent(
        &self,
        y0: Tensor,
        y: Tensor,
        quantizer: &mut Quantizer,
        mode: QuantMode,
    ) -> Result<ForwardOutput> {
        let z = self.h_a.forward(&y)?;
        let z_hat = quantizer.quantize(&z, mode, None)?;
        let z_likelihoods = self.prior.likelihood(&z_hat)?;
        let hyper = self.h_s.forward(&z_hat)?;
        let y_hat = quantizer.quantize(&y, mode, None)?;
        let ctx = self.context.forward(&y_hat)?;
        let (mu, sigma) = self.entropy_params.forward(&hyper, &ctx)?;
        let y_likelihoods = gaussian_likelihood(&y_hat, &mu, &sigma)?;
        let x_hat = self.g_s.forward_raw(&y_hat)?;
        Ok(ForwardOutput {
            x_hat,
            y_likelihoods,
            z_likelihoods,
            y0,
            y,
            y_hat,
            z_hat,
            mu,
            sigma,
        })
    }

    /// Rebuilds the coding tables from the current parameters.
    pub fn update_tables(&mut self) -> Result<()> {
        self.tables = Some(Tables {
            gaussian: build_gaussian_tables()?,
            factorized: self.prior.build_tables()?,
            scales: scale_table(),
        });
        Ok(())
    }

    pub fn tables(&self) -> Option<&Tables> {
        self.tables.as_ref()
    }

    pub fn set_tables(&mut self, gaussian: CdfTableSet, factorized: CdfTableSet) -> Result<()> {
        let scales = scale_table();
        if gaussian.len() != scales.len() || factorized.len() != self.cfg.k {
            return Err(Error::Checkpoint(format!(
                "expected {} gaussian and {} factorized tables, found {} and {}",
                scales.len(),
                self.cfg.k,
                gaussian.len(),
                factorized.len()
            )));
        }
        self.tables = Some(Tables {
            gaussian,
            factorized,
            scales,
        });
        Ok(())
    }

    /// Drops tables after a parameter change so stale tables are never used.
    pub fn invalidate_tables(&mut self) {
        self.tables = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small() -> JointModel {
        JointModel::new(ModelConfig::new(8, 8, 8, 3).unwrap(), 1, DType::F32).unwrap()
    }

    #[test]
    fn shape_algebra() {
        let model = small();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 128, 192), &Device::Cpu).unwrap();
        let img = crate::image::ImageTensor::from_tensor(&x, 0, 128, 192).unwrap();
        let snr = SnrInputs::from_images(&[&img], 3, DType::F32).unwrap();
        let a = model.analysis(&x, Some(&snr)).unwrap();
        assert_eq!(a.y0.dims(), &[1, 8, 32, 48]);
        assert_eq!(a.y.dims(), &[1, 8, 8, 12]);
        let out = model.forward(&x, Some(&snr), &mut Quantizer::new(0), QuantMode::Noise).unwrap();
        assert_eq!(out.z_hat.dims(), &[1, 8, 2, 3]);
        assert_eq!(out.x_hat.dims(), x.dims());
        assert_eq!(out.y_likelihoods.dims(), out.y.dims());
        let finite = out.x_hat.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite());
        assert!(finite);
    }

    #[test]
    fn zero_input_and_biases_give_zero_latents() {
        let model = small();
        for (name, var) in model.store.named() {
            if name.ends_with(".bias") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let a = model.analysis(&x, None).unwrap();
        let z = model.h_a.forward(&a.y).unwrap();
        let hs = model.h_s.forward(&z).unwrap();
        let img = model.g_s.forward(&a.y).unwrap();
        for t in [&a.y0, &a.y, &z, &hs, &img] {
            assert!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stage_codes() {
        assert_eq!(Stage::from_u32(2).unwrap(), Stage::Joint);
        assert!(Stage::from_u32(3).is_err());
        assert!(Stage::Joint > Stage::Pretrained);
    }
}
