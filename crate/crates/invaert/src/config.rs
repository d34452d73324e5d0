use invaert_nn::FlowConfig;
use serde::{Deserialize, Serialize};

use crate::error::{InvaertError, Result};

/// Optimizer schedule for one network (or the encoder/decoder pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub decay_period: usize,
    pub decay_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Stop after this many epochs without a new best test loss. `None`
    /// uses a tenth of the epoch budget.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Schedule {
    pub fn new(batch_size: usize, lr: f64, epochs: usize, decay_period: usize, decay_rate: f64) -> Self {
        Self { batch_size, lr, epochs, decay_period, decay_rate, weight_decay: 0.0, patience: None }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Same schedule with `epochs` total and the decay period shrunk in
    /// proportion, so the final learning rate is unchanged.
    pub fn scaled_to(&self, epochs: usize) -> Self {
        let ratio = epochs as f64 / self.epochs.max(1) as f64;
        let period = ((self.decay_period as f64 * ratio).round() as usize).max(1);
        Self { epochs, decay_period: period, ..self.clone() }
    }

    pub fn patience(&self) -> usize {
        self.patience.unwrap_or_else(|| self.epochs.div_ceil(10)).max(1)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.epochs > 0
            && self.decay_period > 0
            && self.decay_rate > 0.0
            && self.decay_rate <= 1.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(InvaertError::Config(format!("{what} schedule has a non-positive or out-of-range value: {self:?}")))
        }
    }
}

/// Network widths. Depths count hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub emulator_hidden: usize,
    pub emulator_depth: usize,
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    pub flow: FlowConfig,
}

impl Architecture {
    pub fn synthetic() -> Self {
        Self {
            emulator_hidden: 60,
            emulator_depth: 7,
            encoder_hidden: 32,
            encoder_depth: 5,
            decoder_hidden: 64,
            decoder_depth: 5,
            flow: FlowConfig::new(16, 16, 24, 3, false),
        }
    }

    pub fn ehr() -> Self {
        Self { emulator_hidden: 80, flow: FlowConfig::new(16, 10, 18, 3, true), ..Self::synthetic() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub preset: String,
    pub emulator: Schedule,
    pub flow: Schedule,
    pub vae: Schedule,
    /// Penalties `[β_d, β_v, β_r]` on decoder, KL and re-evaluation terms.
    pub beta: [f64; 3],
    pub latent_dim: usize,
    /// Noise scale applied to the reference output standard deviations.
    pub delta: f64,
    pub seed: u64,
    pub arch: Architecture,
}

impl TrainingConfig {
    /// Full-length schedules for noiseless synthetic data.
    pub fn synthetic() -> Self {
        Self {
            preset: "synthetic".into(),
            emulator: Schedule::new(256, 1e-3, 20_000, 100, 0.98),
            flow: Schedule::new(512, 2e-3, 1500, 200, 0.85),
            vae: Schedule::new(256, 1e-3, 20_000, 100, 0.985),
            beta: [1.0, 2000.0, 20.0],
            latent_dim: 19,
            delta: 0.0,
            seed: 0,
            arch: Architecture::synthetic(),
        }
    }

    /// Full-length schedules for the wide prior with noisy labels.
    pub fn ehr() -> Self {
        Self {
            preset: "ehr".into(),
            emulator: Schedule::new(256, 3e-3, 25_000, 100, 0.98),
            flow: Schedule::new(512, 4e-3, 1000, 200, 0.5).with_weight_decay(2e-4),
            vae: Schedule::new(512, 1e-3, 2000, 100, 0.97).with_weight_decay(2e-4),
            beta: [1.0, 1000.0, 10.0],
            latent_dim: 19,
            delta: 1.0,
            seed: 0,
            arch: Architecture::ehr(),
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "synthetic" | "structural" => Ok(Self::synthetic()),
            "ehr" => Ok(Self::ehr()),
            other => Err(InvaertError::Config(format!("unknown training preset {other:?} (synthetic|ehr)"))),
        }
    }

    /// Shrinks every epoch budget to `epochs[i]`, keeping the decay ratios.
    pub fn scaled(mut self, emulator: usize, flow: usize, vae: usize) -> Self {
        self.emulator = self.emulator.scaled_to(emulator);
        self.flow = self.flow.scaled_to(flow);
        self.vae = self.vae.scaled_to(vae);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.emulator.validate("emulator")?;
        self.flow.validate("flow")?;
        self.vae.validate("vae")?;
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(InvaertError::Config(format!("penalties must be non-negative, got {:?}", self.beta)));
        }
        if self.latent_dim == 0 {
            return Err(InvaertError::Config("latent dimension must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(InvaertError::Config(format!("noise scale must be non-negative, got {}", self.delta)));
        }
        if self.arch.flow.dim != cvsim_core::N_OUTPUTS {
            return Err(InvaertError::Config("flow dimension must equal the output dimension".into()));
        }
        Ok(())
    }
}
