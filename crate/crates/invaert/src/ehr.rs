//! Batch inversion of partially observed records and the per-component
//! error table.

use std::io::Write;

use cvsim_core::dataset::{filter_min_present, EhrRecord};
use cvsim_core::parallel::par_map;
use cvsim_core::{ClinicalOutput, N_OUTPUTS, OUTPUT_NAMES};
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{InvaertError, Result};
use crate::impute::impute;
use crate::invert::Reconstruction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrOptions {
    /// Latent draws per patient, split evenly over the retained completions.
    pub n_w: usize,
    pub top_k: usize,
    /// Flow samples per patient.
    pub m: usize,
    /// Records need strictly more present components than this.
    pub min_present: usize,
    pub seed: u64,
}

impl Default for EhrOptions {
    fn default() -> Self {
        Self { n_w: 100, top_k: 4, m: 10_000, min_present: 10, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PatientPrediction {
    pub id: String,
    pub target: ClinicalOutput,
    /// `N_w` emulator reconstructions.
    pub y_hat: Vec<[f64; N_OUTPUTS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    pub name: String,
    /// Patients with this component present.
    pub count: usize,
    /// Mean absolute error; `None` when no patient has the component.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrReport {
    pub delta: f64,
    pub n_patients: usize,
    pub components: Vec<ComponentError>,
}

impl EhrReport {
    pub fn error(&self, k: usize) -> Option<f64> {
        self.components[k].error
    }
}

fn draws_for(rank: usize, n_w: usize, top_k: usize) -> usize {
    n_w / top_k + usize::from(rank < n_w % top_k)
}

/// Imputes, decodes and emulates every record with more than
/// `opts.min_present` observed components.
pub fn ehr_predict(bundle: &ModelBundle, records: &[EhrRecord], opts: &EhrOptions) -> Result<Vec<PatientPrediction>> {
    if opts.n_w < opts.top_k || opts.top_k == 0 {
        return Err(InvaertError::Input(format!("need at least one draw per completion (n_w {}, top_k {})", opts.n_w, opts.top_k)));
    }
    let kept = filter_min_present(records, opts.min_present);
    if kept.len() < records.len() {
        log::info!("{} of {} records have too few components and are skipped", records.len() - kept.len(), records.len());
    }
    let idx: Vec<usize> = (0..kept.len()).collect();
    let out = par_map(&idx, |&q| -> Result<PatientPrediction> {
        let rec = &kept[q];
        let seed = opts.seed.wrapping_add(q as u64 * 7919);
        let res = impute(bundle, &rec.y, opts.m, opts.top_k, opts.n_w.div_ceil(opts.top_k), seed, &Reconstruction::Emulator)?;
        let mut y_hat = Vec::with_capacity(opts.n_w);
        for (rank, inv) in res.inversions.iter().enumerate() {
            y_hat.extend(inv.y_hat.iter().take(draws_for(rank, opts.n_w, opts.top_k)));
        }
        Ok(PatientPrediction { id: rec.id.clone(), target: rec.y, y_hat })
    });
    out.into_iter().collect()
}

/// `e_k = (1/|P_k|)(1/N_w) Σ_{q∈P_k} Σ_i |y_k − Ŷ_ik|` over patients with component `k`.
pub fn ehr_error_report(predictions: &[PatientPrediction], delta: f64) -> EhrReport {
    let components = (0..N_OUTPUTS)
        .map(|k| {
            let mut count = 0;
            let mut total = 0.0;
            for p in predictions {
                let Some(y) = p.target.get(k) else { continue };
                if p.y_hat.is_empty() {
                    continue;
                }
                count += 1;
                total += p.y_hat.iter().map(|h| (y - h[k]).abs()).sum::<f64>() / p.y_hat.len() as f64;
            }
            ComponentError { name: OUTPUT_NAMES[k].to_string(), count, error: (count > 0).then(|| total / count as f64) }
        })
        .collect();
    EhrReport { delta, n_patients: predictions.len(), components }
}

/// One row per output: counts, then one error column per report.
pub fn write_error_table<W: Write>(reports: &[EhrReport], mut w: W) -> std::io::Result<()> {
    let mut header = vec!["output".to_string(), "counts".to_string()];
    header.extend(reports.iter().map(|r| format!("delta={}", r.delta)));
    writeln!(w, "{}", header.join(","))?;
    for k in 0..N_OUTPUTS {
        let count = reports.first().map_or(0, |r| r.components[k].count);
        let mut row = vec![OUTPUT_NAMES[k].to_string(), count.to_string()];
        row.extend(reports.iter().map(|r| match r.components[k].error {
            Some(e) => format!("{e:.3}"),
            None => "None".to_string(),
        }));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Per-patient target, reconstruction mean and a ±3σ band across draws.
pub fn write_patient_predictions<W: Write>(preds: &[PatientPrediction], mut w: W) -> std::io::Result<()> {
    writeln!(w, "id,output,target,mean,std,lower_3sd,upper_3sd")?;
    for p in preds {
        let n = p.y_hat.len().max(1) as f64;
        for k in 0..N_OUTPUTS {
            let mean = p.y_hat.iter().map(|h| h[k]).sum::<f64>() / n;
            let var = p.y_hat.iter().map(|h| (h[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let target = p.target.get(k).map_or(String::new(), |v| format!("{v:e}"));
            writeln!(w, "{},{},{target},{mean:e},{sd:e},{:e},{:e}", p.id, OUTPUT_NAMES[k], mean - 3.0 * sd, mean + 3.0 * sd)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_split_evenly() {
        assert_eq!((0..4).map(|r| draws_for(r, 100, 4)).sum::<usize>(), 100);
        assert_eq!((0..4).map(|r| draws_for(r, 10, 4)).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
    }
}
