use std::io::Write;

use cvsim_core::dataset::rng_for;
use cvsim_core::outputs::simulate_outputs;
use cvsim_core::parallel::par_map;
use cvsim_core::{ParameterVector, SolverConfig, N_OUTPUTS, N_PARAMS, OUTPUT_NAMES, PARAM_NAMES};
use invaert_nn::Tensor2D;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{InvaertError, Result};

/// Relative slack (as a fraction of each prior width) before a decoded
/// parameter is flagged as out of range.
pub const RANGE_SLACK: f64 = 0.1;

/// A representative complete output (heart rate 72.91 bpm, LVEF 0.50), used
/// as the default target of the inversion and manifold commands.
pub const REFERENCE_OUTPUT: [f64; N_OUTPUTS] =
    [72.91, 142.78, 111.55, 22.78, -1.51, 22.37, 13.13, 1.61, 12.56, 7.27, 76.81, 153.61, 0.50, 5.60, 1725.48, 74.53];

/// How decoded parameters are mapped back to outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Reconstruction {
    Emulator,
    Simulator(SolverConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconSource {
    Emulator,
    Simulator,
    /// Simulator requested but the row was out of range or the integration
    /// failed, so the emulator was used.
    EmulatorFallback,
}

impl ReconSource {
    pub fn name(self) -> &'static str {
        match self {
            ReconSource::Emulator => "emulator",
            ReconSource::Simulator => "simulator",
            ReconSource::EmulatorFallback => "emulator_fallback",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub target: [f64; N_OUTPUTS],
    pub w: Tensor2D,
    pub v_hat: Vec<[f64; N_PARAMS]>,
    pub y_hat: Vec<[f64; N_OUTPUTS]>,
    pub source: Vec<ReconSource>,
    pub out_of_range: Vec<bool>,
}

/// `‖y − ŷ‖₂ / ‖y‖₂`.
pub fn relative_l2(y: &[f64], y_hat: &[f64]) -> f64 {
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = y.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

impl InversionResult {
    pub fn len(&self) -> usize {
        self.v_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_hat.is_empty()
    }

    pub fn abs_errors(&self) -> Vec<[f64; N_OUTPUTS]> {
        self.y_hat.iter().map(|y| std::array::from_fn(|k| (y[k] - self.target[k]).abs())).collect()
    }

    pub fn relative_errors(&self) -> Vec<f64> {
        self.y_hat.iter().map(|y| relative_l2(&self.target, y)).collect()
    }

    /// Relative l2 error restricted to the components in `keep`.
    pub fn relative_errors_on(&self, keep: &[usize]) -> Vec<f64> {
        let t: Vec<f64> = keep.iter().map(|&k| self.target[k]).collect();
        self.y_hat
            .iter()
            .map(|y| {
                let h: Vec<f64> = keep.iter().map(|&k| y[k]).collect();
                relative_l2(&t, &h)
            })
            .collect()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().into_iter().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["draw".to_string(), "source".into(), "out_of_range".into()];
        header.extend(PARAM_NAMES.iter().map(|n| n.to_string()));
        header.extend(OUTPUT_NAMES.iter().map(|n| format!("{n}_hat")));
        header.extend(OUTPUT_NAMES.iter().map(|n| format!("{n}_abs_err")));
        header.push("rel_l2_err".into());
        writeln!(w, "{}", header.join(","))?;
        let abs = self.abs_errors();
        let rel = self.relative_errors();
        for i in 0..self.len() {
            let mut row = vec![i.to_string(), self.source[i].name().into(), self.out_of_range[i].to_string()];
            row.extend(self.v_hat[i].iter().map(|x| format!("{x:e}")));
            row.extend(self.y_hat[i].iter().map(|x| format!("{x:e}")));
            row.extend(abs[i].iter().map(|x| format!("{x:e}")));
            row.push(format!("{:e}", rel[i]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `n × d` standard-normal latent draws from stream `stream` of `seed`.
pub fn latent_draws(n: usize, d: usize, seed: u64, stream: u64) -> Tensor2D {
    let mut rng = rng_for(seed, stream);
    Tensor2D { rows: n, cols: d, data: (0..n * d).map(|_| rng.sample(StandardNormal)).collect() }
}

/// Maps decoded parameters back to outputs. Out-of-range rows and failed
/// integrations always go through the emulator.
pub fn reconstruct(
    bundle: &ModelBundle,
    v_hat: &[[f64; N_PARAMS]],
    out_of_range: &[bool],
    recon: &Reconstruction,
) -> Result<(Vec<[f64; N_OUTPUTS]>, Vec<ReconSource>)> {
    let emulated = bundle.emulate(v_hat)?;
    match recon {
        Reconstruction::Emulator => Ok((emulated, vec![ReconSource::Emulator; v_hat.len()])),
        Reconstruction::Simulator(cfg) => {
            let idx: Vec<usize> = (0..v_hat.len()).collect();
            let sims = par_map(&idx, |&i| {
                if out_of_range[i] {
                    return None;
                }
                match simulate_outputs(&ParameterVector::from_array(&v_hat[i]), cfg) {
                    Ok(e) if e.output.is_complete() => Some(e.output.values),
                    Ok(_) => None,
                    Err(err) => {
                        log::warn!("simulation of decoded row {i} failed: {err}");
                        None
                    }
                }
            });
            let mut y = Vec::with_capacity(v_hat.len());
            let mut src = Vec::with_capacity(v_hat.len());
            for (i, s) in sims.into_iter().enumerate() {
                match s {
                    Some(v) => {
                        y.push(v);
                        src.push(ReconSource::Simulator);
                    }
                    None => {
                        y.push(emulated[i]);
                        src.push(ReconSource::EmulatorFallback);
                    }
                }
            }
            Ok((y, src))
        }
    }
}

/// Decodes `y` with the given latent rows and reconstructs the outputs.
pub fn invert_with_latents(bundle: &ModelBundle, y: &[f64; N_OUTPUTS], w: Tensor2D, recon: &Reconstruction) -> Result<InversionResult> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(InvaertError::Input("inversion target must be complete and finite".into()));
    }
    if w.cols != bundle.latent_dim() {
        return Err(InvaertError::Input(format!("latent draws have {} columns, expected {}", w.cols, bundle.latent_dim())));
    }
    let ys = vec![*y; w.rows];
    let v_hat = bundle.decode(&ys, &w)?;
    let out_of_range: Vec<bool> = v_hat.iter().map(|v| !bundle.prior.contains(v, RANGE_SLACK)).collect();
    let (y_hat, source) = reconstruct(bundle, &v_hat, &out_of_range, recon)?;
    Ok(InversionResult { target: *y, w, v_hat, y_hat, source, out_of_range })
}

/// Decodes `n_w` latent draws for the complete output `y`.
pub fn invert(bundle: &ModelBundle, y: &[f64; N_OUTPUTS], n_w: usize, seed: u64, recon: &Reconstruction) -> Result<InversionResult> {
    invert_with_latents(bundle, y, latent_draws(n_w, bundle.latent_dim(), seed, 0), recon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_l2(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((relative_l2(&[3.0, 4.0], &[3.0, 3.0]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn latent_draws_are_seeded() {
        assert_eq!(latent_draws(4, 3, 1, 0), latent_draws(4, 3, 1, 0));
        assert_ne!(latent_draws(4, 3, 1, 0), latent_draws(4, 3, 1, 1));
    }
}
