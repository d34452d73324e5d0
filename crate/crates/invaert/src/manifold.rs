//! Sampling the set of parameters that map to one output, and its singular
//! value spectrum.

use std::io::Write;

use cvsim_core::dataset::PriorBox;
use cvsim_core::{N_OUTPUTS, N_PARAMS, PARAM_NAMES};

use crate::bundle::ModelBundle;
use crate::error::{InvaertError, Result};
use crate::invert::latent_draws;

#[derive(Debug, Clone)]
pub struct ManifoldSample {
    pub target: [f64; N_OUTPUTS],
    pub points: Vec<[f64; N_PARAMS]>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `CE(n) = Σ₁ⁿ σᵢ² / Σ σⱼ²` for `n = 1..=23`.
    pub cumulative_energy: Vec<f64>,
}

impl ManifoldSample {
    /// Physical parameters and their prior-scaled counterparts, one row per point.
    pub fn write_parallel_coordinates<W: Write>(&self, prior: &PriorBox, mut w: W) -> std::io::Result<()> {
        let mut header: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        header.extend(PARAM_NAMES.iter().map(|s| format!("{s}_scaled")));
        writeln!(w, "point,{}", header.join(","))?;
        let bounds = prior.bounds();
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|x| format!("{x:e}")).collect();
            row.extend(p.iter().zip(&bounds).map(|(x, b)| format!("{:.6}", scale01(*x, *b))));
            writeln!(w, "{i},{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_spectrum<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "mode,singular_value,cumulative_energy")?;
        for (i, (s, c)) in self.singular_values.iter().zip(&self.cumulative_energy).enumerate() {
            writeln!(w, "{},{s:e},{c:.10}", i + 1)?;
        }
        Ok(())
    }
}

fn scale01(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Columns mapped to `[0, 1]` by the prior bounds, then centered.
pub fn prior_scaled_centered(points: &[[f64; N_PARAMS]], prior: &PriorBox) -> Vec<Vec<f64>> {
    let bounds = prior.bounds();
    let mut m: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&bounds).map(|(x, b)| scale01(*x, *b)).collect()).collect();
    let n = m.len().max(1) as f64;
    for j in 0..N_PARAMS {
        let mean = m.iter().map(|r| r[j]).sum::<f64>() / n;
        m.iter_mut().for_each(|r| r[j] -= mean);
    }
    m
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n × n` row-major matrix.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of a row-major `n × n` matrix.
pub fn jacobi_eigh(n: usize, mut a: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + c] = v[k * n + i];
        }
    }
    (values, vecs)
}

/// Singular values of the `rows × n` matrix `x`, descending. The right
/// singular vectors come from the Gram matrix; each value is then taken as
/// `‖X vᵢ‖`, which keeps small values accurate.
pub fn singular_values(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.first().map_or(0, Vec::len);
    let mut g = vec![0.0; n * n];
    for r in x {
        for i in 0..n {
            if r[i] == 0.0 {
                continue;
            }
            for j in i..n {
                g[i * n + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g[i * n + j] = g[j * n + i];
        }
    }
    let (_, vecs) = jacobi_eigh(n, g);
    let mut s: Vec<f64> = (0..n)
        .map(|c| x.iter().map(|r| (0..n).map(|k| r[k] * vecs[k * n + c]).sum::<f64>().powi(2)).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Running fraction of squared singular values. An all-zero spectrum counts
/// as fully captured.
pub fn cumulative_energy(s: &[f64]) -> Vec<f64> {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return vec![1.0; s.len()];
    }
    let mut acc = 0.0;
    let mut ce: Vec<f64> = s
        .iter()
        .map(|x| {
            acc += x * x;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = ce.last_mut() {
        *last = 1.0;
    }
    ce
}

/// Decodes `k` latent draws at `y` and analyses the spread of the result.
pub fn manifold(bundle: &ModelBundle, y: &[f64; N_OUTPUTS], k: usize, seed: u64) -> Result<ManifoldSample> {
    if k < N_PARAMS {
        return Err(InvaertError::Input(format!("manifold sampling needs at least {N_PARAMS} points, got {k}")));
    }
    let w = latent_draws(k, bundle.latent_dim(), seed, 0);
    let points = bundle.decode(&vec![*y; k], &w)?;
    let s = singular_values(&prior_scaled_centered(&points, &bundle.prior));
    let ce = cumulative_energy(&s);
    Ok(ManifoldSample { target: *y, points, singular_values: s, cumulative_energy: ce })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let (vals, vecs) = jacobi_eigh(3, a.clone());
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        assert!((vals.iter().sum::<f64>() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_point_has_no_spread() {
        let prior = PriorBox::structural();
        let p = prior.center.to_array();
        let s = singular_values(&prior_scaled_centered(&vec![p; 30], &prior));
        assert!(s.iter().all(|&x| x < 1e-12));
        let ce = cumulative_energy(&s);
        assert_eq!(ce[N_PARAMS - 1], 1.0);
    }
}
