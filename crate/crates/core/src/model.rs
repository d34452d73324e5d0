//! Closed-form physics of the six-compartment circulation: elastance drivers,
//! valve flows, the pressure ODE right-hand side (explicit and `A·P + b`
//! forms), the initial-condition linear system and compartment volumes.
//!
//! Internal units are Barye, mL and s. State ordering is
//! `[Pl, Pa, Pv, Pr, Ppa, Ppv]`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::params::{ParameterVector, MMHG_TO_BARYE};

/// Total circulating blood volume (mL).
pub const TOTAL_BLOOD_VOLUME: f64 = 5000.0;

pub const STATE_NAMES: [&str; 6] = ["Pl", "Pa", "Pv", "Pr", "Ppa", "Ppv"];
pub const FLOW_NAMES: [&str; 6] = ["Ql_in", "Ql_out", "Qa", "Qr_in", "Qr_out", "Qpv"];
pub const VOLUME_NAMES: [&str; 7] = ["Vl", "Va", "Vv", "Vr", "Vpa", "Vpv", "Vtot"];

pub const PL: usize = 0;
pub const PA: usize = 1;
pub const PV: usize = 2;
pub const PR: usize = 3;
pub const PPA: usize = 4;
pub const PPV: usize = 5;

/// Relative width (in units of the cycle length) inside which a phase is
/// snapped onto an activation breakpoint.
const PHASE_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub vtot: f64,
    pub vtot0: f64,
    pub ttot: f64,
    pub tsys: f64,
    pub tdia: f64,
    pub mmhg_to_barye: f64,
}

impl DerivedConstants {
    pub fn stressed_volume(&self) -> f64 {
        self.vtot - self.vtot0
    }
}

pub fn derived_constants(v: &ParameterVector) -> Result<DerivedConstants> {
    if !(v.hr > 0.0) || !v.hr.is_finite() {
        return Err(CoreError::InvalidParameter(format!("Hr must be positive, got {}", v.hr)));
    }
    if !(v.rsys > 0.0 && v.rsys < 1.0) {
        return Err(CoreError::InvalidParameter(format!("rsys must lie in (0,1), got {}", v.rsys)));
    }
    let ttot = 60.0 / v.hr;
    let tsys = ttot * v.rsys;
    let vtot0 = v.unstressed_volume();
    let c = DerivedConstants {
        vtot: TOTAL_BLOOD_VOLUME,
        vtot0,
        ttot,
        tsys,
        tdia: ttot - tsys,
        mmhg_to_barye: MMHG_TO_BARYE,
    };
    if c.stressed_volume() <= 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "unstressed volume {vtot0} mL exceeds total blood volume"
        )));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Pressures at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureState {
    pub p: [f64; 6],
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowVector {
    pub ql_in: f64,
    pub ql_out: f64,
    pub qa: f64,
    pub qr_in: f64,
    pub qr_out: f64,
    pub qpv: f64,
}

impl FlowVector {
    pub fn to_array(&self) -> [f64; 6] {
        [self.ql_in, self.ql_out, self.qa, self.qr_in, self.qr_out, self.qpv]
    }
}

/// `dP/dt = A·P + b` at a frozen valve configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSystemForm {
    pub a: [[f64; 6]; 6],
    pub b: [f64; 6],
}

impl LinearSystemForm {
    pub fn apply(&self, p: &[f64; 6]) -> [f64; 6] {
        let mut out = self.b;
        for (i, row) in self.a.iter().enumerate() {
            out[i] += row.iter().zip(p).map(|(a, x)| a * x).sum::<f64>();
        }
        out
    }
}

/// Elastance and its time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub e: f64,
    pub de_dt: f64,
}

impl Activation {
    pub fn compliance(&self) -> f64 {
        1.0 / self.e
    }

    /// dC/dt = -E⁻² dE/dt.
    pub fn compliance_rate(&self) -> f64 {
        -self.de_dt / (self.e * self.e)
    }
}

/// Compartment volumes (mL) and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Volumes {
    pub v: [f64; 6],
    pub total: f64,
}

/// Initial pressures plus diagnostics of the mass-conservation system.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub state: PressureState,
    /// Full solution `[Pl_dia, Pl_sys, Pa, Pv, Pr_dia, Pr_sys, Ppa, Ppv]` (Barye).
    pub unknowns: [f64; 8],
    /// Residuals of the eight equations divided by the stressed volume.
    pub scaled_residuals: [f64; 8],
    pub condition: f64,
    /// Set when one of the initial compartment volumes is negative.
    pub negative_volume: bool,
}

/// Model instance with the derived constants cached. Every method is a pure
/// function of its arguments.
#[derive(Debug, Clone, Copy)]
pub struct Cvsim6 {
    pub params: ParameterVector,
    pub consts: DerivedConstants,
    pth: f64,
}

impl Cvsim6 {
    pub fn new(params: ParameterVector) -> Result<Self> {
        params.validate()?;
        let consts = derived_constants(&params)?;
        Ok(Self { params, consts, pth: params.pth_barye() })
    }

    /// Transthoracic pressure (Barye).
    pub fn pth(&self) -> f64 {
        self.pth
    }

    /// Position inside the current cycle, snapped onto breakpoints.
    pub fn phase(&self, t: f64) -> f64 {
        let tt = self.consts.ttot;
        let mut p = t - (t / tt).floor() * tt;
        let tol = PHASE_SNAP * tt;
        if p < 0.0 || (tt - p).abs() <= tol || p.abs() <= tol {
            p = 0.0;
        }
        let ts = self.consts.tsys;
        if (p - ts).abs() <= tol {
            p = ts;
        } else if (p - 1.5 * ts).abs() <= tol {
            p = 1.5 * ts;
        }
        p
    }

    pub fn activation(&self, t: f64, side: Side) -> Activation {
        let (c_dia, c_sys) = match side {
            Side::Left => (self.params.cl_dia, self.params.cl_sys),
            Side::Right => (self.params.cr_dia, self.params.cr_sys),
        };
        let e_dia = 1.0 / c_dia;
        let half_span = 0.5 * (1.0 / c_sys - e_dia);
        let ts = self.consts.tsys;
        let p = self.phase(t);
        let pi = std::f64::consts::PI;
        if p == 0.0 || p >= 1.5 * ts {
            // Diastolic plateau; the breakpoint takes its right-limit.
            Activation { e: e_dia, de_dt: 0.0 }
        } else if p < ts {
            let x = pi * p / ts;
            Activation { e: half_span * (1.0 - x.cos()) + e_dia, de_dt: half_span * x.sin() * pi / ts }
        } else if p == ts {
            Activation { e: 2.0 * half_span + e_dia, de_dt: 0.0 }
        } else {
            let x = 2.0 * pi * (p - ts) / ts;
            Activation {
                e: half_span * (1.0 + x.cos()) + e_dia,
                de_dt: -half_span * x.sin() * 2.0 * pi / ts,
            }
        }
    }

    pub fn elastance(&self, t: f64, side: Side) -> f64 {
        self.activation(t, side).e
    }

    /// Valve conductances `[g_l_in, g_l_out, g_a, g_r_in, g_r_out, g_pv]`
    /// with the four valve indicators evaluated at `p` (strict inequality).
    pub fn conductances(&self, p: &[f64; 6]) -> [f64; 6] {
        let v = &self.params;
        let open = |up: f64, down: f64, r: f64| if up > down { 1.0 / r } else { 0.0 };
        [
            open(p[PPV], p[PL], v.rl_in),
            open(p[PL], p[PA], v.rl_out),
            1.0 / v.ra,
            open(p[PV], p[PR], v.rr_in),
            open(p[PR], p[PPA], v.rr_out),
            1.0 / v.rpv,
        ]
    }

    pub fn flows(&self, p: &[f64; 6]) -> FlowVector {
        let g = self.conductances(p);
        FlowVector {
            ql_in: (p[PPV] - p[PL]) * g[0],
            ql_out: (p[PL] - p[PA]) * g[1],
            qa: (p[PA] - p[PV]) * g[2],
            qr_in: (p[PV] - p[PR]) * g[3],
            qr_out: (p[PR] - p[PPA]) * g[4],
            qpv: (p[PPA] - p[PPV]) * g[5],
        }
    }

    pub fn rhs(&self, t: f64, p: &[f64; 6]) -> [f64; 6] {
        let q = self.flows(p);
        let l = self.activation(t, Side::Left);
        let r = self.activation(t, Side::Right);
        let v = &self.params;
        let pth = self.pth;
        [
            (q.ql_in - q.ql_out - (p[PL] - pth) * l.compliance_rate()) * l.e,
            (q.ql_out - q.qa) / v.ca,
            (q.qa - q.qr_in) / v.cv,
            (q.qr_in - q.qr_out - (p[PR] - pth) * r.compliance_rate()) * r.e,
            (q.qr_out - q.qpv) / v.cpa,
            (q.qpv - q.ql_in) / v.cpv,
        ]
    }

    pub fn matrix_form(&self, t: f64, p: &[f64; 6]) -> LinearSystemForm {
        let g = self.conductances(p);
        let l = self.activation(t, Side::Left);
        let r = self.activation(t, Side::Right);
        let v = &self.params;
        let pth = self.pth;
        let mut a = [[0.0; 6]; 6];
        let mut b = [0.0; 6];

        // -(P - Pth)·Ċ·E = (P - Pth)·Ė/E
        let lrate = l.de_dt / l.e;
        a[PL][PPV] = l.e * g[0];
        a[PL][PL] = -l.e * (g[0] + g[1]) + lrate;
        a[PL][PA] = l.e * g[1];
        b[PL] = -pth * lrate;

        a[PA][PL] = g[1] / v.ca;
        a[PA][PA] = -(g[1] + g[2]) / v.ca;
        a[PA][PV] = g[2] / v.ca;

        a[PV][PA] = g[2] / v.cv;
        a[PV][PV] = -(g[2] + g[3]) / v.cv;
        a[PV][PR] = g[3] / v.cv;

        let rrate = r.de_dt / r.e;
        a[PR][PV] = r.e * g[3];
        a[PR][PR] = -r.e * (g[3] + g[4]) + rrate;
        a[PR][PPA] = r.e * g[4];
        b[PR] = -pth * rrate;

        a[PPA][PR] = g[4] / v.cpa;
        a[PPA][PPA] = -(g[4] + g[5]) / v.cpa;
        a[PPA][PPV] = g[5] / v.cpa;

        a[PPV][PPA] = g[5] / v.cpv;
        a[PPV][PPV] = -(g[5] + g[0]) / v.cpv;
        a[PPV][PL] = g[0] / v.cpv;

        LinearSystemForm { a, b }
    }

    pub fn volumes(&self, t: f64, p: &[f64; 6]) -> Volumes {
        let v = &self.params;
        let pth = self.pth;
        let cl = self.activation(t, Side::Left).compliance();
        let cr = self.activation(t, Side::Right).compliance();
        let vols = [
            v.vl0 + (p[PL] - pth) * cl,
            v.va0 + (p[PA] - pth / 3.0) * v.ca,
            v.vv0 + p[PV] * v.cv,
            v.vr0 + (p[PR] - pth) * cr,
            v.vpa0 + (p[PPA] - pth) * v.cpa,
            v.vpv0 + (p[PPV] - pth) * v.cpv,
        ];
        Volumes { v: vols, total: vols.iter().sum() }
    }

    /// Assembles the 8×8 mass-conservation system in unknowns
    /// `[Pl_dia, Pl_sys, Pa, Pv, Pr_dia, Pr_sys, Ppa, Ppv]`.
    fn ic_system(&self, stressed_volume: f64) -> ([[f64; 8]; 8], [f64; 8]) {
        let v = &self.params;
        let c = &self.consts;
        let pth = self.pth;
        let mut m = [[0.0; 8]; 8];
        let mut rhs = [0.0; 8];

        // Stroke volume q = Cl_dia(Pl_dia - Pth) - Cl_sys(Pl_sys - Pth) = row·x + q_const.
        let mut q = [0.0; 8];
        q[0] = v.cl_dia;
        q[1] = -v.cl_sys;
        let q_const = -(v.cl_dia - v.cl_sys) * pth;

        // q = Cr_dia(Pr_dia - Pth) - Cr_sys(Pr_sys - Pth)
        let mut row = q;
        row[4] -= v.cr_dia;
        row[5] += v.cr_sys;
        m[0] = row;
        rhs[0] = -(v.cr_dia - v.cr_sys) * pth - q_const;

        // q = T (P_i - P_j) / R for the six downstream links.
        let links = [
            (1, 2, c.tsys, v.rl_out),
            (2, 3, c.ttot, v.ra),
            (3, 4, c.tdia, v.rr_in),
            (5, 6, c.tsys, v.rr_out),
            (6, 7, c.ttot, v.rpv),
            (7, 0, c.tdia, v.rl_in),
        ];
        for (k, &(i, j, tt, r)) in links.iter().enumerate() {
            let mut row = q;
            row[i] -= tt / r;
            row[j] += tt / r;
            m[k + 1] = row;
            rhs[k + 1] = -q_const;
        }

        m[7] = [v.cl_dia, 0.0, v.ca, v.cv, v.cr_dia, 0.0, v.cpa, v.cpv];
        rhs[7] = stressed_volume
            + v.cl_dia * pth
            + v.ca * pth / 3.0
            + v.cr_dia * pth
            + v.cpa * pth
            + v.cpv * pth;
        (m, rhs)
    }

    pub fn initial_conditions(&self) -> Result<InitialConditions> {
        self.initial_conditions_with_volume(self.consts.stressed_volume())
    }

    /// Same as [`Cvsim6::initial_conditions`] with an explicit stressed
    /// volume `Vtot - Vtot0`.
    pub fn initial_conditions_with_volume(&self, stressed_volume: f64) -> Result<InitialConditions> {
        let (m, rhs) = self.ic_system(stressed_volume);
        let a: Vec<f64> = m.iter().flatten().copied().collect();
        let condition = linalg::condition_estimate(8, &a)?;
        let lu = linalg::Lu::factor(8, a.clone()).map_err(|_| CoreError::Singular { condition })?;
        let mut x = rhs.to_vec();
        lu.solve_in_place(&mut x);
        let unknowns: [f64; 8] = x.try_into().expect("length 8");

        let mut scaled_residuals = [0.0; 8];
        for i in 0..8 {
            let ax: f64 = (0..8).map(|j| m[i][j] * unknowns[j]).sum();
            scaled_residuals[i] = (ax - rhs[i]) / stressed_volume;
        }
        let state = PressureState {
            p: [unknowns[0], unknowns[2], unknowns[3], unknowns[4], unknowns[6], unknowns[7]],
            t: 0.0,
        };
        let vols = self.volumes(0.0, &state.p);
        let negative_volume = vols.v.iter().any(|&x| x < 0.0);
        if negative_volume {
            log::warn!("initial conditions give a negative compartment volume: {:?}", vols.v);
        }
        Ok(InitialConditions { state, unknowns, scaled_residuals, condition, negative_volume })
    }
}

pub fn elastance(t: f64, v: &ParameterVector, side: Side) -> Result<f64> {
    Ok(Cvsim6::new(*v)?.elastance(t, side))
}

pub fn flows(state: &PressureState, v: &ParameterVector) -> Result<FlowVector> {
    Ok(Cvsim6::new(*v)?.flows(&state.p))
}

pub fn rhs(state: &PressureState, v: &ParameterVector) -> Result<[f64; 6]> {
    Ok(Cvsim6::new(*v)?.rhs(state.t, &state.p))
}

pub fn matrix_form(state: &PressureState, v: &ParameterVector) -> Result<LinearSystemForm> {
    Ok(Cvsim6::new(*v)?.matrix_form(state.t, &state.p))
}

pub fn solve_initial_conditions(v: &ParameterVector) -> Result<InitialConditions> {
    Cvsim6::new(*v)?.initial_conditions()
}

pub fn volumes(state: &PressureState, v: &ParameterVector) -> Result<Volumes> {
    Ok(Cvsim6::new(*v)?.volumes(state.t, &state.p))
}

pub fn mmhg(barye: f64) -> f64 {
    barye / MMHG_TO_BARYE
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Cvsim6 {
        Cvsim6::new(ParameterVector::default()).unwrap()
    }

    #[test]
    fn derived_constants_defaults() {
        let c = derived_constants(&ParameterVector::default()).unwrap();
        assert!((c.ttot - 0.833_333_333_333).abs() < 1e-9);
        assert!((c.vtot0 - 3825.0).abs() < 1e-12);
        assert!((c.stressed_volume() - 1175.0).abs() < 1e-12);
        assert!((c.tsys + c.tdia - c.ttot).abs() < 1e-15);
    }

    #[test]
    fn derived_constants_symmetric_split() {
        let v = ParameterVector { hr: 60.0, rsys: 0.5, ..Default::default() };
        let c = derived_constants(&v).unwrap();
        assert!((c.tsys - 0.5).abs() < 1e-15);
        assert!((c.tdia - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derived_constants_reject_invalid() {
        let v = ParameterVector { hr: 0.0, ..Default::default() };
        assert!(derived_constants(&v).is_err());
        let v = ParameterVector { rsys: 1.2, ..Default::default() };
        assert!(derived_constants(&v).is_err());
    }

    #[test]
    fn elastance_branches() {
        let m = model();
        let ts = m.consts.tsys;
        let v = m.params;
        assert!((m.elastance(0.0, Side::Left) - 1.0 / v.cl_dia).abs() < 1e-9);
        assert!((m.elastance(0.0, Side::Left) - 133.333_333).abs() < 1e-3);
        assert!((m.elastance(ts, Side::Left) - 1.0 / v.cl_sys).abs() < 1e-9);
        assert!((m.elastance(1.5 * ts, Side::Left) - 1.0 / v.cl_dia).abs() < 1e-9);
        assert!((m.elastance(ts, Side::Right) - 1.0 / v.cr_sys).abs() < 1e-9);
        // Breakpoints take right-limit derivatives.
        assert_eq!(m.activation(1.5 * ts, Side::Left).de_dt, 0.0);
        assert_eq!(m.activation(ts, Side::Left).de_dt, 0.0);
    }

    #[test]
    fn elastance_is_periodic_and_continuous() {
        let m = model();
        let tt = m.consts.ttot;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..5.0);
            let a = m.elastance(t, Side::Left);
            let b = m.elastance(t + tt, Side::Left);
            assert!((a - b).abs() <= 1e-8 * a.abs(), "t={t}: {a} vs {b}");
        }
        for &bp in &[m.consts.tsys, 1.5 * m.consts.tsys] {
            let lo = m.elastance(bp - 1e-9, Side::Right);
            let hi = m.elastance(bp + 1e-9, Side::Right);
            assert!((lo - hi).abs() < 1e-4, "jump at {bp}: {lo} vs {hi}");
        }
    }

    #[test]
    fn elastance_rate_matches_finite_difference() {
        let m = model();
        let ts = m.consts.tsys;
        for &t in &[0.3 * ts, 0.9 * ts, 1.2 * ts, 1.45 * ts, 2.0 * ts] {
            let h = 1e-7;
            let fd = (m.elastance(t + h, Side::Left) - m.elastance(t - h, Side::Left)) / (2.0 * h);
            let an = m.activation(t, Side::Left).de_dt;
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "t={t}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn closed_mitral_gives_zero_inflow() {
        let m = model();
        let p = [10.0, 5.0, 1.0, 1.0, 1.0, 3.0];
        assert_eq!(m.flows(&p).ql_in, 0.0);
    }

    #[test]
    fn ohm_law_on_arterial_resistance() {
        let v = ParameterVector { ra: MMHG_TO_BARYE, ..Default::default() };
        let m = Cvsim6::new(v).unwrap();
        let p = [0.0, 100.0 * MMHG_TO_BARYE, 0.0, 0.0, 0.0, 0.0];
        assert!((m.flows(&p).qa - 100.0).abs() < 1e-12);
    }

    #[test]
    fn tied_pressures_close_the_valve() {
        let m = model();
        let p = [5.0, 5.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(m.flows(&p).ql_out, 0.0);
    }

    #[test]
    fn valved_flows_never_negative() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2e4..2e5));
            let q = m.flows(&p);
            assert!(q.ql_in >= 0.0 && q.ql_out >= 0.0 && q.qr_in >= 0.0 && q.qr_out >= 0.0);
        }
    }

    #[test]
    fn uniform_pressure_in_diastolic_plateau_is_equilibrium() {
        let v = ParameterVector { pth: 0.0, ..Default::default() };
        let m = Cvsim6::new(v).unwrap();
        let t = 0.9 * m.consts.ttot;
        let d = m.rhs(t, &[1000.0; 6]);
        assert!(d.iter().all(|x| x.abs() < 1e-12), "{d:?}");
    }

    #[test]
    fn rhs_equals_matrix_form_on_random_states() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1e4..2e5));
            let t = rng.gen_range(0.0..10.0);
            let direct = m.rhs(t, &p);
            let via_matrix = m.matrix_form(t, &p).apply(&p);
            let scale = direct.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
            for i in 0..6 {
                assert!(
                    (direct[i] - via_matrix[i]).abs() <= 1e-10 * scale,
                    "component {i}: {} vs {}",
                    direct[i],
                    via_matrix[i]
                );
            }
        }
    }

    #[test]
    fn all_valves_closed_leaves_only_windkessel_links() {
        let m = model();
        // Pl < Pa, Ppv < Pl, Pr < Ppa, Pv < Pr: every valve closed.
        let p = [50.0, 100.0, 10.0, 20.0, 30.0, 5.0];
        let a = m.matrix_form(0.9 * m.consts.ttot, &p).a;
        let mut nonzero = vec![];
        for i in 0..6 {
            for j in 0..6 {
                if i != j && a[i][j] != 0.0 {
                    nonzero.push((i, j));
                }
            }
        }
        nonzero.sort();
        assert_eq!(nonzero, vec![(PA, PV), (PV, PA), (PPA, PPV), (PPV, PPA)]);
        assert_eq!(a[PL][PL], 0.0);
        assert_eq!(a[PR][PR], 0.0);
    }

    #[test]
    fn initial_conditions_satisfy_system() {
        let m = model();
        let ic = m.initial_conditions().unwrap();
        for r in ic.scaled_residuals {
            assert!(r.abs() < 1e-8, "{:?}", ic.scaled_residuals);
        }
        assert!(!ic.negative_volume);
        let vol = m.volumes(0.0, &ic.state.p);
        assert!((vol.total - 5000.0).abs() / 5000.0 < 1e-6);
        let stressed: f64 = vol.total - m.params.unstressed_volume();
        assert!((stressed - 1175.0).abs() < 1e-6);
    }

    #[test]
    fn doubling_stressed_volume_keeps_residuals_small() {
        let m = model();
        let base = m.initial_conditions().unwrap();
        let doubled = m.initial_conditions_with_volume(2.0 * 1175.0).unwrap();
        assert!(doubled.scaled_residuals.iter().all(|r| r.abs() < 1e-8));
        assert!((doubled.state.p[PA] - base.state.p[PA]).abs() > 1.0);
    }

    #[test]
    fn arterial_rate_sign_follows_net_inflow() {
        let m = model();
        let ic = m.initial_conditions().unwrap();
        let t = 1e-6;
        let d = m.rhs(t, &ic.state.p);
        assert!(d.iter().all(|x| x.is_finite()));
        let q = m.flows(&ic.state.p);
        assert_eq!(d[PA].signum(), (q.ql_out - q.qa).signum());
    }

    #[test]
    fn volume_identities() {
        let m = model();
        let pth = m.pth();
        let vol = m.volumes(0.5, &[pth, 0.0, 0.0, pth, pth, pth]);
        assert!((vol.v[0] - m.params.vl0).abs() < 1e-12);
        assert!((vol.v[2] - m.params.vv0).abs() < 1e-12);
    }
}
