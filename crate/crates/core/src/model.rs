//! Learnable parameters and the trained-model bundle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acm::{ConfidenceMeasure, ThresholdState};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorParams, LevelRange};
use crate::optim::TrainConfig;
use crate::predictor::PredictorParams;

/// Every learnable weight of the network. Gradient buffers and momentum
/// buffers use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: ExtractorParams,
    pub predictor: PredictorParams,
}

impl ModelParams {
    pub fn random(config: &TrainConfig, input_channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let levels = config.levels()?;
        let extractor = ExtractorParams::random(levels, input_channels, config.fused_width, config.fusion, rng);
        let predictor = PredictorParams::random(levels, config.fused_width, config.hidden_width, classes, rng);
        Ok(Self { extractor, predictor })
    }

    pub fn zeros(config: &TrainConfig, input_channels: usize, classes: usize) -> Result<Self> {
        let levels = config.levels()?;
        Ok(Self {
            extractor: ExtractorParams::zeros(levels, input_channels, config.fused_width, config.fusion),
            predictor: PredictorParams::zeros(levels, config.fused_width, config.hidden_width, classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            extractor: self.extractor.zeros_like(),
            predictor: self.predictor.zeros_like(),
        }
    }

    pub fn levels(&self) -> LevelRange {
        self.extractor.levels
    }

    pub fn classes(&self) -> usize {
        self.predictor.classes()
    }

    pub fn input_channels(&self) -> usize {
        self.extractor.base_channels / 3
    }

    /// All tensors in a fixed order: context head, fusion layers (finest
    /// first), then per-level predictor hidden/output layers (finest first);
    /// each layer contributes weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.extractor.tensors();
        out.extend(self.predictor.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor.tensors_mut();
        out.extend(self.predictor.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A trained network plus everything inference needs to reproduce the
/// training-time gates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub thresholds: ThresholdState,
    pub config: TrainConfig,
}

impl Model {
    /// Fresh model seeded from `config.seed`, thresholds at `tau_init`.
    pub fn init(config: &TrainConfig, input_channels: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(config, input_channels, classes, &mut rng)
    }

    pub(crate) fn init_with_rng(
        config: &TrainConfig,
        input_channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if !(2..=255).contains(&classes) {
            return Err(Error::invalid(format!("class count {classes} outside [2, 255]")));
        }
        let params = ModelParams::random(config, input_channels, classes, rng)?;
        let thresholds = ThresholdState::new(config.levels()?, config.tau_init, config.gamma, config.r)?;
        Ok(Self {
            params,
            thresholds,
            config: config.clone(),
        })
    }

    pub fn levels(&self) -> LevelRange {
        self.params.levels()
    }

    pub fn classes(&self) -> usize {
        self.params.classes()
    }

    pub fn measure(&self) -> ConfidenceMeasure {
        self.config.confidence
    }
}
