//! Time-resolved spectra of the state matrix `A(t)`, stiffness ratio and
//! intrinsic timescales.

use num_complex::Complex64;
use serde::Serialize;

use crate::eigen::{eigen6, EigenDecomposition};
use crate::error::Result;
use crate::model::{Cvsim6, STATE_NAMES};
use crate::ode::{integrate, SolverConfig, StateTrajectory};
use crate::parallel;
use crate::params::ParameterVector;

pub const DEFAULT_SR_TOL: f64 = 1e-14;

/// Relative tolerance under which two SR values count as equal when the
/// extremum is located; the earliest instant wins.
const SR_TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SpectrumSample {
    pub t: f64,
    pub eigen: EigenDecomposition,
    pub sr: f64,
    pub degenerate: bool,
    /// max |Re λ|, reported alongside SR.
    pub spectral_radius: f64,
    pub residual: f64,
}

impl SpectrumSample {
    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigen.values
    }

    pub fn timescales(&self) -> Vec<f64> {
        self.eigen.values.iter().map(|l| 1.0 / l.re.abs()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StiffnessRatio {
    pub sr: f64,
    pub degenerate: bool,
}

/// SR = max|Re λ| / min|Re λ|. A minimum below `tol` is replaced by the
/// smallest |Re λ| that is not below `tol`, plus `tol`.
pub fn stiffness_ratio(eigs: &[Complex64], tol: f64) -> StiffnessRatio {
    let re: Vec<f64> = eigs.iter().map(|l| l.re.abs()).collect();
    let max = re.iter().copied().fold(0.0, f64::max);
    let min = re.iter().copied().fold(f64::INFINITY, f64::min);
    if re.is_empty() || max < tol {
        return StiffnessRatio { sr: 1.0, degenerate: true };
    }
    if min >= tol {
        return StiffnessRatio { sr: max / min, degenerate: false };
    }
    let fallback = re.iter().copied().filter(|&x| x >= tol).fold(f64::INFINITY, f64::min);
    StiffnessRatio { sr: max / (fallback + tol), degenerate: false }
}

/// RC_{j,k} = R C_j C_k / (C_j + C_k).
pub fn rc_constant(r: f64, cj: f64, ck: f64) -> f64 {
    r * cj * ck / (cj + ck)
}

#[derive(Debug, Clone, Serialize)]
pub struct RcEntry {
    pub name: String,
    pub value: f64,
}

/// RC constants for the six resistive links, using systolic ventricular
/// capacitances for the outflow links and diastolic ones for the inflows.
pub fn rc_table(v: &ParameterVector) -> Vec<RcEntry> {
    let e = |name: &str, value: f64| RcEntry { name: name.to_string(), value };
    vec![
        e("Rl_out,Cl_sys,Ca", rc_constant(v.rl_out, v.cl_sys, v.ca)),
        e("Rr_out,Cr_sys,Cpa", rc_constant(v.rr_out, v.cr_sys, v.cpa)),
        e("Rl_in,Cpv,Cl_dia", rc_constant(v.rl_in, v.cpv, v.cl_dia)),
        e("Rr_in,Cv,Cr_dia", rc_constant(v.rr_in, v.cv, v.cr_dia)),
        e("Ra,Ca,Cv", rc_constant(v.ra, v.ca, v.cv)),
        e("Rpv,Cpa,Cpv", rc_constant(v.rpv, v.cpa, v.cpv)),
    ]
}

pub fn spectrum_at(model: &Cvsim6, t: f64, p: &[f64; 6], tol: f64) -> Result<SpectrumSample> {
    let a = model.matrix_form(t, p).a;
    let eigen = eigen6(&a)?;
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    let residual = eigen.max_relative_residual(6, &flat);
    let sr = stiffness_ratio(&eigen.values, tol);
    let spectral_radius = eigen.values.iter().map(|l| l.re.abs()).fold(0.0, f64::max);
    Ok(SpectrumSample { t, eigen, sr: sr.sr, degenerate: sr.degenerate, spectral_radius, residual })
}

#[derive(Debug, Clone)]
pub struct StiffnessReport {
    pub samples: Vec<SpectrumSample>,
    pub idx_sr_max: usize,
    pub idx_sr_min: usize,
    pub t_sr_max: f64,
    pub t_sr_min: f64,
    pub ttot: f64,
    pub rc: Vec<RcEntry>,
    pub max_residual: f64,
    pub all_real: bool,
}

impl StiffnessReport {
    pub fn sr_max(&self) -> &SpectrumSample {
        &self.samples[self.idx_sr_max]
    }

    pub fn sr_min(&self) -> &SpectrumSample {
        &self.samples[self.idx_sr_min]
    }

    /// CSV rows `t, Re λ1..6, Im λ1..6, SR, max|Re λ|`.
    pub fn write_spectrum_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let re: Vec<String> = (1..=6).map(|k| format!("re_l{k}")).collect();
        let im: Vec<String> = (1..=6).map(|k| format!("im_l{k}")).collect();
        writeln!(w, "t,{},{},SR,spectral_radius", re.join(","), im.join(","))?;
        for s in &self.samples {
            let re: Vec<String> = s.eigen.values.iter().map(|l| format!("{}", l.re)).collect();
            let im: Vec<String> = s.eigen.values.iter().map(|l| format!("{}", l.im)).collect();
            writeln!(w, "{},{},{},{},{}", s.t, re.join(","), im.join(","), s.sr, s.spectral_radius)?;
        }
        Ok(())
    }

    /// 6×6 table of |Q| (rows: state components, columns: eigenvectors).
    pub fn write_radar_csv<W: std::io::Write>(sample: &SpectrumSample, mut w: W) -> Result<()> {
        let cols: Vec<String> = sample.eigen.values.iter().map(|l| format!("q[{:.6e}]", l.re)).collect();
        writeln!(w, "# t = {}", sample.t)?;
        writeln!(w, "state,{}", cols.join(","))?;
        for (i, name) in STATE_NAMES.iter().enumerate() {
            let row: Vec<String> = sample.eigen.vectors.iter().map(|q| format!("{:e}", q[i].norm())).collect();
            writeln!(w, "{name},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Spectra at every grid sample of the last `n_last` cycles of `traj`.
pub fn scan_trajectory(model: &Cvsim6, traj: &StateTrajectory, n_last: usize, tol: f64) -> Result<StiffnessReport> {
    let ttot = model.consts.ttot;
    let t_from = traj.end_time() - n_last as f64 * ttot - 1e-9;
    let idx: Vec<usize> = (0..traj.len()).filter(|&i| traj.t[i] >= t_from).collect();
    let samples = parallel::par_map(&idx, |&i| spectrum_at(model, traj.t[i], &traj.p[i], tol))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(samples, model, ttot))
}

fn build_report(samples: Vec<SpectrumSample>, model: &Cvsim6, ttot: f64) -> StiffnessReport {
    let mut imax = 0;
    let mut imin = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.sr > samples[imax].sr * (1.0 + SR_TIE_RTOL) {
            imax = i;
        }
        if s.sr < samples[imin].sr * (1.0 - SR_TIE_RTOL) {
            imin = i;
        }
    }
    let max_residual = samples.iter().map(|s| s.residual).fold(0.0, f64::max);
    let all_real = samples.iter().all(|s| s.eigen.values.iter().all(|l| l.im == 0.0));
    StiffnessReport {
        t_sr_max: samples[imax].t,
        t_sr_min: samples[imin].t,
        idx_sr_max: imax,
        idx_sr_min: imin,
        samples,
        ttot,
        rc: rc_table(&model.params),
        max_residual,
        all_real,
    }
}

/// Integrates `v` and scans the last two cycles.
pub fn stiffness_scan(v: &ParameterVector, cfg: &SolverConfig) -> Result<StiffnessReport> {
    let model = Cvsim6::new(*v)?;
    let traj = integrate(v, cfg)?;
    scan_trajectory(&model, &traj, 2, DEFAULT_SR_TOL)
}

/// Distance between two instants modulo the cycle length.
pub fn phase_distance(a: f64, b: f64, ttot: f64) -> f64 {
    let d = (a - b).rem_euclid(ttot);
    d.min(ttot - d)
}
