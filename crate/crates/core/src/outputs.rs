//! The 16 clinical outputs extracted from the last three simulated cycles,
//! and the heteroskedastic measurement-noise model attached to them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CoreError, Result};
use crate::model::{PA, PPA, PPV, PR, PV};
use crate::ode::{integrate_tail, SolverConfig, StateTrajectory};
use crate::params::{ParameterVector, MMHG_TO_BARYE};

pub const N_OUTPUTS: usize = 16;

pub const OUTPUT_NAMES: [&str; N_OUTPUTS] = [
    "Hr", "Pa_sys", "Pa_dia", "Pr_sys", "Pr_dia", "Ppa_sys", "Ppa_dia", "Pr_edp", "Pw", "Pcvp",
    "Vl_sys", "Vl_dia", "LVEF", "CO", "SVR", "PVR",
];

pub const OUTPUT_UNITS: [&str; N_OUTPUTS] = [
    "bpm", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mL", "mL", "-",
    "L/min", "dyn*s/cm^5", "dyn*s/cm^5",
];

/// Measurement standard deviations, in the units of [`OUTPUT_UNITS`].
pub const OUTPUT_STD: [f64; N_OUTPUTS] =
    [3.0, 1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 10.0, 20.0, 0.02, 0.2, 50.0, 5.0];

pub mod idx {
    pub const HR: usize = 0;
    pub const PA_SYS: usize = 1;
    pub const PA_DIA: usize = 2;
    pub const PR_SYS: usize = 3;
    pub const PR_DIA: usize = 4;
    pub const PPA_SYS: usize = 5;
    pub const PPA_DIA: usize = 6;
    pub const PR_EDP: usize = 7;
    pub const PW: usize = 8;
    pub const PCVP: usize = 9;
    pub const VL_SYS: usize = 10;
    pub const VL_DIA: usize = 11;
    pub const LVEF: usize = 12;
    pub const CO: usize = 13;
    pub const SVR: usize = 14;
    pub const PVR: usize = 15;
}

pub fn output_index(name: &str) -> Option<usize> {
    OUTPUT_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name))
}

/// Output vector in the fixed column order of [`OUTPUT_NAMES`]; components
/// with `present[k] == false` are missing and their value is ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicalOutput {
    pub values: [f64; N_OUTPUTS],
    pub present: [bool; N_OUTPUTS],
}

impl ClinicalOutput {
    pub fn complete(values: [f64; N_OUTPUTS]) -> Self {
        Self { values, present: [true; N_OUTPUTS] }
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.present[k].then_some(self.values[k])
    }

    pub fn n_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..N_OUTPUTS).filter(|&k| !self.present[k]).collect()
    }

    pub fn with_missing(mut self, missing: &[usize]) -> Self {
        for &k in missing {
            self.present[k] = false;
            self.values[k] = f64::NAN;
        }
        self
    }

    pub fn csv_header() -> String {
        OUTPUT_NAMES.join(",")
    }

    /// Missing components become empty fields.
    pub fn to_csv_row(&self) -> String {
        (0..N_OUTPUTS)
            .map(|k| self.get(k).map(|x| format!("{x}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() != N_OUTPUTS {
            return Err(CoreError::Parse(format!("expected {N_OUTPUTS} output fields, got {}", fields.len())));
        }
        let mut out = Self { values: [f64::NAN; N_OUTPUTS], present: [false; N_OUTPUTS] };
        for (k, f) in fields.iter().enumerate() {
            let f = f.trim();
            if f.is_empty() {
                continue;
            }
            out.values[k] = f
                .parse()
                .map_err(|_| CoreError::Parse(format!("column {} ({}): cannot parse {f:?}", k, OUTPUT_NAMES[k])))?;
            out.present[k] = true;
        }
        Ok(out)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, name) in OUTPUT_NAMES.iter().enumerate() {
            m.insert(name.to_string(), self.get(k).map_or(serde_json::Value::Null, |x| x.into()));
        }
        serde_json::Value::Object(m)
    }

    /// Missing keys and nulls are treated as missing components.
    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| CoreError::Parse("output JSON must be an object".into()))?;
        let mut out = Self { values: [f64::NAN; N_OUTPUTS], present: [false; N_OUTPUTS] };
        for (key, val) in obj {
            let k = output_index(key).ok_or_else(|| CoreError::Parse(format!("unknown output {key:?}")))?;
            match val {
                serde_json::Value::Null => {}
                serde_json::Value::Number(n) => {
                    out.values[k] = n.as_f64().unwrap_or(f64::NAN);
                    out.present[k] = true;
                }
                other => return Err(CoreError::Parse(format!("{key}: expected a number or null, got {other}"))),
            }
        }
        Ok(out)
    }
}

impl Serialize for ClinicalOutput {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClinicalOutput {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Self::from_json_value(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub s: [f64; N_OUTPUTS],
    pub delta: f64,
}

impl NoiseModel {
    pub fn new(delta: f64) -> Self {
        Self { s: OUTPUT_STD, delta }
    }

    pub fn std(&self, k: usize) -> f64 {
        self.delta * self.s[k]
    }
}

/// `y + η` with `η_k ~ N(0, (δ s_k)²)` on present components.
pub fn add_noise<R: Rng + ?Sized>(y: &ClinicalOutput, noise: &NoiseModel, rng: &mut R) -> ClinicalOutput {
    let mut out = *y;
    for k in 0..N_OUTPUTS {
        let e: f64 = rng.sample(StandardNormal);
        if out.present[k] && noise.delta != 0.0 {
            out.values[k] += noise.std(k) * e;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Extraction {
    pub output: ClinicalOutput,
    /// Set when the last two cycles' systolic Pa differ by more than 1 %.
    pub non_periodic: bool,
}

fn trapezoid_mean(t: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    let span = t[t.len() - 1] - t[0];
    let mut s = 0.0;
    for i in 1..t.len() {
        s += 0.5 * (t[i] - t[i - 1]) * (f(i) + f(i - 1));
    }
    s / span
}

/// Computes the outputs over the last three cycles of `traj`.
pub fn extract_outputs(traj: &StateTrajectory, v: &ParameterVector) -> Result<Extraction> {
    let ttot = traj.ttot;
    let t_end = traj.end_time();
    if t_end < 3.0 * ttot * (1.0 - 1e-9) {
        return Err(CoreError::Extraction(format!("trajectory spans {t_end:.4} s, need three cycles")));
    }
    let start = traj.t.partition_point(|&t| t < t_end - 3.0 * ttot - 1e-9);
    let t = &traj.t[start..];
    let p = &traj.p[start..];
    let q = &traj.q[start..];
    let vol = &traj.v[start..];
    if t.len() < 4 {
        return Err(CoreError::Extraction("too few samples in the final three cycles".into()));
    }

    let max_of = |f: &dyn Fn(usize) -> f64| (0..t.len()).map(f).fold(f64::NEG_INFINITY, f64::max);
    let min_of = |f: &dyn Fn(usize) -> f64| (0..t.len()).map(f).fold(f64::INFINITY, f64::min);

    let mean_pa = trapezoid_mean(t, |i| p[i][PA]);
    let mean_ppa = trapezoid_mean(t, |i| p[i][PPA]);
    let pw = trapezoid_mean(t, |i| p[i][PPV]);
    let pcvp = trapezoid_mean(t, |i| p[i][PV]);
    let co = trapezoid_mean(t, |i| q[i][2]);
    if !(co > 0.0) {
        return Err(CoreError::Extraction(format!("non-positive cardiac output {co}")));
    }
    let vl_sys = min_of(&|i| vol[i][0]);
    let vl_dia = max_of(&|i| vol[i][0]);

    let mm = |x: f64| x / MMHG_TO_BARYE;
    let values = [
        v.hr,
        mm(max_of(&|i| p[i][PA])),
        mm(min_of(&|i| p[i][PA])),
        mm(max_of(&|i| p[i][PR])),
        mm(min_of(&|i| p[i][PR])),
        mm(max_of(&|i| p[i][PPA])),
        mm(min_of(&|i| p[i][PPA])),
        mm(p[p.len() - 1][PR]),
        mm(pw),
        mm(pcvp),
        vl_sys,
        vl_dia,
        (vl_dia - vl_sys) / vl_dia,
        co * 60.0 / 1000.0,
        (mean_pa - pcvp) / co,
        (mean_ppa - pw) / co,
    ];

    let cycle_max = |from: f64, to: f64| {
        traj.t
            .iter()
            .zip(&traj.p)
            .filter(|(ti, _)| **ti >= from - 1e-9 && **ti <= to + 1e-9)
            .map(|(_, pi)| pi[PA])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let last = cycle_max(t_end - ttot, t_end);
    let prev = cycle_max(t_end - 2.0 * ttot, t_end - ttot);
    let non_periodic = ((last - prev) / last).abs() > 0.01;
    if non_periodic {
        log::warn!("last two cycles differ in systolic Pa: {} vs {}", mm(prev), mm(last));
    }
    Ok(Extraction { output: ClinicalOutput::complete(values), non_periodic })
}

/// Simulates `v` and extracts its outputs. Only the final three cycles are
/// sampled onto the output grid.
pub fn simulate_outputs(v: &ParameterVector, cfg: &SolverConfig) -> Result<Extraction> {
    let traj = integrate_tail(v, cfg, 3)?;
    extract_outputs(&traj, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cvsim6;
    use crate::ode::{trajectory_from_pressures, SolverStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lvef_and_co_arithmetic() {
        let lvef: f64 = (153.61 - 76.81) / 153.61;
        assert!((lvef - 0.4999).abs() < 1e-4);
        let co: f64 = (153.61 - 76.81) * 72.91 / 1000.0;
        assert!((co - 5.60).abs() < 0.01);
    }

    #[test]
    fn constant_pressures_give_equal_extrema() {
        let v = ParameterVector::default();
        let m = Cvsim6::new(v).unwrap();
        let t: Vec<f64> = (0..=3000).map(|k| k as f64 * 1e-3).collect();
        let mut p0 = [2e4; 6];
        p0[PA] = 1.2e5;
        let p = vec![p0; t.len()];
        let tr = trajectory_from_pressures(&m, t, p, SolverStats::default());
        let y = extract_outputs(&tr, &v).unwrap().output;
        let mm = |x: f64| x / MMHG_TO_BARYE;
        assert!((y.values[idx::PA_SYS] - mm(1.2e5)).abs() < 1e-9);
        assert!((y.values[idx::PA_DIA] - mm(1.2e5)).abs() < 1e-9);
        assert!((y.values[idx::PPA_SYS] - y.values[idx::PPA_DIA]).abs() < 1e-12);
        assert!((y.values[idx::PW] - mm(2e4)).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_is_identity() {
        let y = ClinicalOutput::complete([1.0; N_OUTPUTS]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&y, &NoiseModel::new(0.0), &mut rng), y);
    }

    #[test]
    fn noise_std_on_heart_rate() {
        for (delta, want) in [(1.0, 3.0), (2.0, 6.0)] {
            let y = ClinicalOutput::complete([0.0; N_OUTPUTS]);
            let noise = NoiseModel::new(delta);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| add_noise(&y, &noise, &mut rng).values[0]).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((sd / want - 1.0).abs() < 0.02, "δ={delta}: sd {sd}");
        }
    }

    #[test]
    fn csv_and_json_keep_missing_fields() {
        let mut vals = [0.0; N_OUTPUTS];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = k as f64 + 0.5;
        }
        let y = ClinicalOutput::complete(vals).with_missing(&[3, 10]);
        let row = y.to_csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[3], "");
        let back = ClinicalOutput::from_csv_fields(&fields).unwrap();
        assert_eq!(back.present, y.present);
        assert_eq!(back.get(4), Some(4.5));
        let js = serde_json::to_string(&y).unwrap();
        assert!(js.contains("\"Pr_sys\":null"));
        let back: ClinicalOutput = serde_json::from_str(&js).unwrap();
        assert_eq!(back.missing(), vec![3, 10]);
    }
}
