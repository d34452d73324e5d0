//! Inversion with missing outputs: sample the flow, overwrite the observed
//! components, rank the completions by density and decode the most likely.

use cvsim_core::dataset::rng_for;
use cvsim_core::{ClinicalOutput, N_OUTPUTS};
use invaert_nn::Tensor2D;

use crate::bundle::ModelBundle;
use crate::data::denormalize;
use crate::error::{InvaertError, Result};
use crate::invert::{invert_with_latents, latent_draws, InversionResult, Reconstruction};

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Row of the flow sample this completion came from.
    pub index: usize,
    pub y: [f64; N_OUTPUTS],
    /// Log-density in normalized output space.
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub target: ClinicalOutput,
    pub missing: Vec<usize>,
    pub n_samples: usize,
    /// Most likely completions, best first.
    pub top: Vec<Candidate>,
    /// One inversion per entry of `top`.
    pub inversions: Vec<InversionResult>,
}

impl ImputationResult {
    pub fn observed(&self) -> Vec<usize> {
        (0..N_OUTPUTS).filter(|k| !self.missing.contains(k)).collect()
    }

    /// Relative l2 errors of every draw restricted to the observed components.
    pub fn observed_relative_errors(&self) -> Vec<f64> {
        let obs = self.observed();
        self.inversions.iter().flat_map(|inv| inv.relative_errors_on(&obs)).collect()
    }
}

/// Indices sorted by descending log-probability. Ties keep index order and
/// non-finite values go last.
pub fn rank_by_log_prob(lp: &[f64]) -> Vec<usize> {
    let key = |i: usize| if lp[i].is_nan() { f64::NEG_INFINITY } else { lp[i] };
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    idx
}

/// Runs the missing-data inversion for `y` using `m` flow samples, keeping
/// `top_k` completions and decoding `n_w` latent draws for each.
#[allow(clippy::too_many_arguments)]
pub fn impute(
    bundle: &ModelBundle,
    y: &ClinicalOutput,
    m: usize,
    top_k: usize,
    n_w: usize,
    seed: u64,
    recon: &Reconstruction,
) -> Result<ImputationResult> {
    if top_k == 0 || m == 0 {
        return Err(InvaertError::Input("need at least one flow sample and one retained completion".into()));
    }
    let missing = y.missing();
    let observed: Vec<usize> = (0..N_OUTPUTS).filter(|k| y.present[*k]).collect();
    if observed.is_empty() {
        log::warn!("no observed components; completions are plain flow samples");
    }
    let stats = &bundle.y_stats;
    let y_norm: Vec<f64> = (0..N_OUTPUTS)
        .map(|k| if y.present[k] { (y.values[k] - stats.mean[k]) / stats.std[k] } else { 0.0 })
        .collect();
    let flow = bundle.flow()?;
    let (samples, n_samples) = if missing.is_empty() {
        // Every completion would equal the observation.
        (Tensor2D::from_vec(1, N_OUTPUTS, y_norm.clone())?, m)
    } else {
        let mut s = flow.sample(m, &mut rng_for(seed, 1))?;
        for i in 0..s.rows {
            for &k in &observed {
                s.set(i, k, y_norm[k]);
            }
        }
        (s, m)
    };
    let lp = flow.log_prob(&samples)?;
    let phys: Vec<[f64; N_OUTPUTS]> = denormalize(&samples, stats);
    let top: Vec<Candidate> = if missing.is_empty() {
        (0..top_k).map(|i| Candidate { index: i, y: y.values, log_prob: lp[0] }).collect()
    } else {
        rank_by_log_prob(&lp)
            .into_iter()
            .take(top_k)
            .map(|i| {
                let mut c = phys[i];
                // Observed entries are copied verbatim rather than round-tripped.
                for &k in &observed {
                    c[k] = y.values[k];
                }
                Candidate { index: i, y: c, log_prob: lp[i] }
            })
            .collect()
    };
    let inversions = top
        .iter()
        .enumerate()
        .map(|(r, c)| invert_with_latents(bundle, &c.y, latent_draws(n_w, bundle.latent_dim(), seed, 100 + r as u64), recon))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputationResult { target: *y, missing, n_samples, top, inversions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_is_stable_and_descending() {
        let lp = [0.5, 2.0, f64::NAN, 2.0, -1.0];
        assert_eq!(rank_by_log_prob(&lp), vec![1, 3, 0, 4, 2]);
    }
}
