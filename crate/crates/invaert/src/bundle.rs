use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use cvsim_core::dataset::{NormStats, PriorBox};
use cvsim_core::{N_OUTPUTS, N_PARAMS};
use invaert_nn::{Mlp, RealNvp, Tensor2D};
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::data::{denormalize, normalize_outputs, normalize_params};
use crate::error::{InvaertError, Result};

pub const BUNDLE_VERSION: u32 = 1;

/// Trained networks with everything needed to use them on physical values.
/// Networks are optional so each can be trained and saved separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub config: TrainingConfig,
    pub prior: PriorBox,
    pub v_stats: NormStats,
    pub y_stats: NormStats,
    pub emulator: Option<Mlp>,
    pub flow: Option<RealNvp>,
    pub encoder: Option<Mlp>,
    pub decoder: Option<Mlp>,
}

fn missing(what: &str) -> InvaertError {
    InvaertError::Bundle(format!("bundle has no trained {what}"))
}

impl ModelBundle {
    pub fn new(config: TrainingConfig, prior: PriorBox, v_stats: NormStats, y_stats: NormStats) -> Self {
        Self { version: BUNDLE_VERSION, config, prior, v_stats, y_stats, emulator: None, flow: None, encoder: None, decoder: None }
    }

    pub fn emulator(&self) -> Result<&Mlp> {
        self.emulator.as_ref().ok_or_else(|| missing("emulator"))
    }

    pub fn flow(&self) -> Result<&RealNvp> {
        self.flow.as_ref().ok_or_else(|| missing("flow"))
    }

    pub fn decoder(&self) -> Result<&Mlp> {
        self.decoder.as_ref().ok_or_else(|| missing("decoder"))
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn emulate_normalized(&self, v: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.emulator()?.forward(v)?)
    }

    /// Emulated outputs for physical parameter rows.
    pub fn emulate(&self, v: &[[f64; N_PARAMS]]) -> Result<Vec<[f64; N_OUTPUTS]>> {
        let y = self.emulate_normalized(&normalize_params(v, &self.v_stats))?;
        Ok(denormalize(&y, &self.y_stats))
    }

    /// Decoder on normalized outputs and latent draws (one row each).
    pub fn decode_normalized(&self, y: &Tensor2D, w: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.decoder()?.forward(&y.concat_cols(w)?)?)
    }

    /// Decoded physical parameters for physical output rows.
    pub fn decode(&self, y: &[[f64; N_OUTPUTS]], w: &Tensor2D) -> Result<Vec<[f64; N_PARAMS]>> {
        let v = self.decode_normalized(&normalize_outputs(y, &self.y_stats), w)?;
        Ok(denormalize(&v, &self.v_stats))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(InvaertError::Bundle(format!("unsupported bundle version {} (expected {BUNDLE_VERSION})", self.version)));
        }
        let (dv, dy, dw) = (self.v_stats.dim(), self.y_stats.dim(), self.latent_dim());
        let check = |name: &str, net: &Option<Mlp>, i: usize, o: usize| -> Result<()> {
            if let Some(n) = net {
                n.validate()?;
                if n.input_dim() != i || n.output_dim() != o {
                    return Err(InvaertError::Bundle(format!(
                        "{name} maps {}→{}, expected {i}→{o}",
                        n.input_dim(),
                        n.output_dim()
                    )));
                }
            }
            Ok(())
        };
        check("emulator", &self.emulator, dv, dy)?;
        check("encoder", &self.encoder, dv, 2 * dw)?;
        check("decoder", &self.decoder, dy + dw, dv)?;
        if let Some(f) = &self.flow {
            if f.dim() != dy {
                return Err(InvaertError::Bundle(format!("flow dimension {} differs from output dimension {dy}", f.dim())));
            }
        }
        self.v_stats.validate()?;
        self.y_stats.validate()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let b: Self = serde_json::from_reader(r)?;
        b.validate()?;
        Ok(b)
    }
}
