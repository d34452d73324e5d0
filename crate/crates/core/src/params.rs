//! The 23 physiological inputs of the six-compartment model.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Conversion factor between mmHg and Barye (dyn/cm²).
pub const MMHG_TO_BARYE: f64 = 1333.22;

/// Number of model inputs.
pub const N_PARAMS: usize = 23;

/// Short names of the inputs, in canonical column order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "Hr", "Pth", "rsys", "Cl_dia", "Cl_sys", "Ca", "Cv", "Cr_dia", "Cr_sys", "Cpa", "Cpv", "Rl_in",
    "Rl_out", "Ra", "Rr_in", "Rr_out", "Rpv", "Vl0", "Va0", "Vv0", "Vr0", "Vpa0", "Vpv0",
];

/// Units of each input column.
pub const PARAM_UNITS: [&str; N_PARAMS] = [
    "bpm", "mmHg", "-", "mL/Barye", "mL/Barye", "mL/Barye", "mL/Barye", "mL/Barye", "mL/Barye",
    "mL/Barye", "mL/Barye", "Barye*s/mL", "Barye*s/mL", "Barye*s/mL", "Barye*s/mL",
    "Barye*s/mL", "Barye*s/mL", "mL", "mL", "mL", "mL", "mL", "mL",
];

/// Broad grouping used by the prior presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    HeartRate,
    Pressure,
    Fraction,
    Capacitance,
    Resistance,
    Volume,
}

pub fn param_kind(index: usize) -> ParamKind {
    match index {
        0 => ParamKind::HeartRate,
        1 => ParamKind::Pressure,
        2 => ParamKind::Fraction,
        3..=10 => ParamKind::Capacitance,
        11..=16 => ParamKind::Resistance,
        _ => ParamKind::Volume,
    }
}

/// Model inputs. `pth` is stored in mmHg, everything else in the CGS units of
/// [`PARAM_UNITS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    #[serde(rename = "Hr")]
    pub hr: f64,
    #[serde(rename = "Pth")]
    pub pth: f64,
    pub rsys: f64,
    #[serde(rename = "Cl_dia")]
    pub cl_dia: f64,
    #[serde(rename = "Cl_sys")]
    pub cl_sys: f64,
    #[serde(rename = "Ca")]
    pub ca: f64,
    #[serde(rename = "Cv")]
    pub cv: f64,
    #[serde(rename = "Cr_dia")]
    pub cr_dia: f64,
    #[serde(rename = "Cr_sys")]
    pub cr_sys: f64,
    #[serde(rename = "Cpa")]
    pub cpa: f64,
    #[serde(rename = "Cpv")]
    pub cpv: f64,
    #[serde(rename = "Rl_in")]
    pub rl_in: f64,
    #[serde(rename = "Rl_out")]
    pub rl_out: f64,
    #[serde(rename = "Ra")]
    pub ra: f64,
    #[serde(rename = "Rr_in")]
    pub rr_in: f64,
    #[serde(rename = "Rr_out")]
    pub rr_out: f64,
    #[serde(rename = "Rpv")]
    pub rpv: f64,
    #[serde(rename = "Vl0")]
    pub vl0: f64,
    #[serde(rename = "Va0")]
    pub va0: f64,
    #[serde(rename = "Vv0")]
    pub vv0: f64,
    #[serde(rename = "Vr0")]
    pub vr0: f64,
    #[serde(rename = "Vpa0")]
    pub vpa0: f64,
    #[serde(rename = "Vpv0")]
    pub vpv0: f64,
}

impl Default for ParameterVector {
    /// Reference adult values. The systolic fraction is one third of the
    /// cycle (printed as 0.33 in the usual reference tables).
    fn default() -> Self {
        Self {
            hr: 72.0,
            pth: -4.0,
            rsys: 1.0 / 3.0,
            cl_dia: 7.5e-3,
            cl_sys: 3.0e-4,
            ca: 1.2e-3,
            cv: 7.5e-2,
            cr_dia: 1.5e-2,
            cr_sys: 9.0e-4,
            cpa: 3.23e-3,
            cpv: 6.3e-3,
            rl_in: 13.33,
            rl_out: 8.0,
            ra: 1333.22,
            rr_in: 66.66,
            rr_out: 4.0,
            rpv: 106.66,
            vl0: 15.0,
            va0: 715.0,
            vv0: 2500.0,
            vr0: 15.0,
            vpa0: 90.0,
            vpv0: 490.0,
        }
    }
}

impl ParameterVector {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.hr, self.pth, self.rsys, self.cl_dia, self.cl_sys, self.ca, self.cv, self.cr_dia,
            self.cr_sys, self.cpa, self.cpv, self.rl_in, self.rl_out, self.ra, self.rr_in,
            self.rr_out, self.rpv, self.vl0, self.va0, self.vv0, self.vr0, self.vpa0, self.vpv0,
        ]
    }

    pub fn from_array(a: &[f64; N_PARAMS]) -> Self {
        Self {
            hr: a[0],
            pth: a[1],
            rsys: a[2],
            cl_dia: a[3],
            cl_sys: a[4],
            ca: a[5],
            cv: a[6],
            cr_dia: a[7],
            cr_sys: a[8],
            cpa: a[9],
            cpv: a[10],
            rl_in: a[11],
            rl_out: a[12],
            ra: a[13],
            rr_in: a[14],
            rr_out: a[15],
            rpv: a[16],
            vl0: a[17],
            va0: a[18],
            vv0: a[19],
            vr0: a[20],
            vpa0: a[21],
            vpv0: a[22],
        }
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        let arr: [f64; N_PARAMS] = s.try_into().map_err(|_| {
            CoreError::InvalidParameter(format!("expected {N_PARAMS} values, got {}", s.len()))
        })?;
        Ok(Self::from_array(&arr))
    }

    /// Transthoracic pressure in Barye.
    pub fn pth_barye(&self) -> f64 {
        self.pth * MMHG_TO_BARYE
    }

    /// Sum of the six unstressed volumes (mL).
    pub fn unstressed_volume(&self) -> f64 {
        self.vl0 + self.va0 + self.vv0 + self.vr0 + self.vpa0 + self.vpv0
    }

    /// Checks the positivity and range invariants.
    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if let Some(i) = a.iter().position(|x| !x.is_finite()) {
            return Err(CoreError::InvalidParameter(format!("{} is not finite", PARAM_NAMES[i])));
        }
        if !(self.rsys > 0.0 && self.rsys < 1.0) {
            return Err(CoreError::InvalidParameter(format!(
                "rsys must lie in (0, 1), got {}",
                self.rsys
            )));
        }
        for (i, &x) in a.iter().enumerate() {
            if i == 1 || i == 2 {
                continue;
            }
            if x <= 0.0 {
                return Err(CoreError::InvalidParameter(format!(
                    "{} must be strictly positive, got {x}",
                    PARAM_NAMES[i]
                )));
            }
        }
        Ok(())
    }

    pub fn csv_header() -> String {
        PARAM_NAMES.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.to_array().iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let vals = row
            .split(',')
            .enumerate()
            .map(|(i, s)| {
                s.trim().parse::<f64>().map_err(|_| {
                    CoreError::Parse(format!("column {} ({}): cannot parse {s:?}", i, name_or(i)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_slice(&vals)
    }
}

fn name_or(i: usize) -> &'static str {
    PARAM_NAMES.get(i).copied().unwrap_or("?")
}
