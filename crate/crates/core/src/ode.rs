//! Fixed-step RK4 and adaptive three-stage Radau IIA, both sampled onto a
//! uniform output grid through dense output.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::Lu;
use crate::model::{Cvsim6, Side};
use crate::params::ParameterVector;

/// An autonomous-or-not ODE system of fixed dimension.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N]) -> [f64; N];
    fn jacobian(&self, t: f64, y: &[f64; N]) -> [[f64; N]; N];
}

impl OdeSystem<6> for Cvsim6 {
    fn rhs(&self, t: f64, y: &[f64; 6]) -> [f64; 6] {
        Cvsim6::rhs(self, t, y)
    }

    // Valve indicators are frozen at the current iterate.
    fn jacobian(&self, t: f64, y: &[f64; 6]) -> [[f64; 6]; 6] {
        self.matrix_form(t, y).a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Radau,
}

impl std::str::FromStr for Method {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Method::Rk4),
            "radau" => Ok(Method::Radau),
            other => Err(CoreError::Parse(format!("unknown method {other:?} (rk4|radau)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed RK4 step (s).
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
    pub n_cycles: usize,
    /// Uniform output spacing (s).
    pub output_dt: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Radau, dt: 4e-3, rtol: 1e-7, atol: 1e-9, n_cycles: 12, output_dt: 1e-3 }
    }
}

impl SolverConfig {
    pub fn rk4(dt: f64) -> Self {
        Self { method: Method::Rk4, dt, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CoreError::InvalidParameter(format!("solver config: {what}")));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.output_dt > 0.0) {
            return bad("output_dt must be positive");
        }
        if self.n_cycles == 0 {
            return bad("n_cycles must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    pub lu_factorizations: usize,
    pub newton_failures: usize,
}

/// Pressures, flows, volumes and elastances on the uniform output grid.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub t: Vec<f64>,
    /// Pressures (Barye).
    pub p: Vec<[f64; 6]>,
    /// Flows (mL/s).
    pub q: Vec<[f64; 6]>,
    /// Six volumes followed by their total (mL).
    pub v: Vec<[f64; 7]>,
    /// Left and right elastance (Barye/mL).
    pub elastance: Vec<[f64; 2]>,
    pub ttot: f64,
    pub stats: SolverStats,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        *self.t.last().unwrap_or(&0.0)
    }

    pub fn max_volume_drift(&self, vtot: f64) -> f64 {
        self.v.iter().map(|v| (v[6] - vtot).abs() / vtot).fold(0.0, f64::max)
    }

    /// Grid times where `Pl < Pa` inside an ejection window, i.e. between the
    /// first and last sample of a cycle at which `Pl > Pa`. A well-resolved
    /// solution has none; a too-coarse explicit step makes the ventricle dip
    /// below the aorta mid-ejection.
    pub fn ejection_reversals(&self) -> Vec<f64> {
        use crate::model::{PA, PL};
        let mut out = vec![];
        let n_cycles = (self.end_time() / self.ttot).round() as usize;
        for c in 0..n_cycles.max(1) {
            let (t0, t1) = (c as f64 * self.ttot, (c + 1) as f64 * self.ttot);
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.t[i] >= t0 && self.t[i] < t1).collect();
            let open: Vec<usize> = idx.iter().copied().filter(|&i| self.p[i][PL] > self.p[i][PA]).collect();
            let (Some(&a), Some(&b)) = (open.first(), open.last()) else { continue };
            out.extend((a..=b).filter(|&i| self.p[i][PL] < self.p[i][PA]).map(|i| self.t[i]));
        }
        out
    }

    /// Writes the trajectory as CSV with pressures in mmHg.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        use crate::model::{FLOW_NAMES, STATE_NAMES, VOLUME_NAMES};
        use crate::params::MMHG_TO_BARYE;
        writeln!(w, "# t in s; pressures in mmHg; flows in mL/s; volumes in mL")?;
        let mut header = vec!["t".to_string()];
        header.extend(STATE_NAMES.iter().map(|s| s.to_string()));
        header.extend(FLOW_NAMES.iter().map(|s| s.to_string()));
        header.extend(VOLUME_NAMES.iter().map(|s| s.to_string()));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![format!("{}", self.t[i])];
            row.extend(self.p[i].iter().map(|x| format!("{}", x / MMHG_TO_BARYE)));
            row.extend(self.q[i].iter().map(|x| format!("{x}")));
            row.extend(self.v[i].iter().map(|x| format!("{x}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Uniform grid `0, dt, 2dt, …` up to `t_end` inclusive (with rounding slack).
pub fn output_grid(t_end: f64, dt: f64) -> Vec<f64> {
    let n = (t_end / dt * (1.0 + 1e-12)).floor() as usize;
    (0..=n).map(|k| k as f64 * dt).collect()
}

/// Integrates the model from its mass-conserving initial state over
/// `n_cycles` heart cycles.
pub fn integrate(v: &ParameterVector, cfg: &SolverConfig) -> Result<StateTrajectory> {
    integrate_tail(v, cfg, cfg.n_cycles)
}

/// Like [`integrate`] but only keeps the output-grid samples of the last
/// `tail_cycles` cycles.
pub fn integrate_tail(v: &ParameterVector, cfg: &SolverConfig, tail_cycles: usize) -> Result<StateTrajectory> {
    cfg.validate()?;
    let model = Cvsim6::new(*v)?;
    let ic = model.initial_conditions()?;
    let t_end = cfg.n_cycles as f64 * model.consts.ttot;
    let mut grid = output_grid(t_end, cfg.output_dt);
    if tail_cycles < cfg.n_cycles {
        let t_from = t_end - tail_cycles as f64 * model.consts.ttot - 1e-9;
        grid.retain(|&t| t >= t_from);
    }
    let (p, stats) = match cfg.method {
        Method::Rk4 => rk4_dense(&model, 0.0, ic.state.p, &grid, cfg.dt)?,
        Method::Radau => {
            let opts = RadauOptions { rtol: cfg.rtol, atol: cfg.atol, h0: model.consts.ttot / 1000.0, ..Default::default() };
            radau_dense(&model, 0.0, ic.state.p, &grid, &opts)?
        }
    };
    Ok(trajectory_from_pressures(&model, grid, p, stats))
}

pub fn trajectory_from_pressures(
    model: &Cvsim6,
    t: Vec<f64>,
    p: Vec<[f64; 6]>,
    stats: SolverStats,
) -> StateTrajectory {
    let mut q = Vec::with_capacity(t.len());
    let mut v = Vec::with_capacity(t.len());
    let mut el = Vec::with_capacity(t.len());
    for (ti, pi) in t.iter().zip(&p) {
        q.push(model.flows(pi).to_array());
        let vol = model.volumes(*ti, pi);
        let mut row = [0.0; 7];
        row[..6].copy_from_slice(&vol.v);
        row[6] = vol.total;
        v.push(row);
        el.push([model.elastance(*ti, Side::Left), model.elastance(*ti, Side::Right)]);
    }
    StateTrajectory { t, p, q, v, elastance: el, ttot: model.consts.ttot, stats }
}

fn axpy<const N: usize>(y: &[f64; N], a: f64, x: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| y[i] + a * x[i])
}

fn all_finite<const N: usize>(y: &[f64; N]) -> bool {
    y.iter().all(|x| x.is_finite())
}

/// Classical RK4 with cubic Hermite interpolation onto `grid`.
pub fn rk4_dense<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    t0: f64,
    y0: [f64; N],
    grid: &[f64],
    dt: f64,
) -> Result<(Vec<[f64; N]>, SolverStats)> {
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(grid.len());
    let t_end = *grid.last().unwrap_or(&t0);
    let mut t = t0;
    let mut y = y0;
    let mut f = sys.rhs(t, &y);
    stats.rhs_evals += 1;
    let mut next = 0;
    while next < grid.len() && grid[next] <= t {
        out.push(y);
        next += 1;
    }
    while next < grid.len() {
        let h = dt.min(t_end - t);
        if h <= 0.0 {
            break;
        }
        let k1 = f;
        let k2 = sys.rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k1));
        let k3 = sys.rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k2));
        let k4 = sys.rhs(t + h, &axpy(&y, h, &k3));
        let y_new: [f64; N] = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        let t_new = if t_end - (t + h) < 1e-12 * dt { t_end } else { t + h };
        if !all_finite(&y_new) {
            return Err(CoreError::Diverged { t: t_new });
        }
        let f_new = sys.rhs(t_new, &y_new);
        stats.rhs_evals += 4;
        stats.steps += 1;
        while next < grid.len() && grid[next] <= t_new {
            out.push(hermite(t, t_new, &y, &y_new, &k1, &f_new, grid[next]));
            next += 1;
        }
        t = t_new;
        y = y_new;
        f = f_new;
    }
    while out.len() < grid.len() {
        out.push(y);
    }
    Ok((out, stats))
}

fn hermite<const N: usize>(
    t0: f64,
    t1: f64,
    y0: &[f64; N],
    y1: &[f64; N],
    f0: &[f64; N],
    f1: &[f64; N],
    t: f64,
) -> [f64; N] {
    let h = t1 - t0;
    let s = ((t - t0) / h).clamp(0.0, 1.0);
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    std::array::from_fn(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
}

// Radau IIA (order 5) coefficients in the transformed (real + complex pair)
// formulation.
const S6: f64 = 2.449_489_742_783_178;
const C: [f64; 3] = [(4.0 - S6) / 10.0, (4.0 + S6) / 10.0, 1.0];
const E: [f64; 3] = [(-13.0 - 7.0 * S6) / 3.0, (-13.0 + 7.0 * S6) / 3.0, -1.0 / 3.0];
const T: [[f64; 3]; 3] = [
    [0.094_438_762_488_975_24, -0.141_255_295_020_954_21, 0.030_029_194_105_147_42],
    [0.250_213_122_965_333_32, 0.204_129_352_293_799_94, -0.382_942_112_757_261_92],
    [1.0, 1.0, 0.0],
];
const TI: [[f64; 3]; 3] = [
    [4.178_718_591_551_904_28, 0.327_682_820_761_062_37, 0.523_376_445_499_449_51],
    [-4.178_718_591_551_904_28, -0.327_682_820_761_062_37, 0.476_623_554_500_550_44],
    [0.502_872_634_945_786_82, -2.571_926_949_855_605_22, 0.596_039_204_828_224_92],
];
const P: [[f64; 3]; 3] = [
    [13.0 / 3.0 + 7.0 * S6 / 3.0, -23.0 / 3.0 - 22.0 * S6 / 3.0, 10.0 / 3.0 + 5.0 * S6],
    [13.0 / 3.0 - 7.0 * S6 / 3.0, -23.0 / 3.0 + 22.0 * S6 / 3.0, 10.0 / 3.0 - 5.0 * S6],
    [1.0 / 3.0, -8.0 / 3.0, 10.0 / 3.0],
];
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn mu_real() -> f64 {
    3.0 + 3f64.powf(2.0 / 3.0) - 3f64.powf(1.0 / 3.0)
}

fn mu_complex() -> Complex64 {
    Complex64::new(
        3.0 + 0.5 * (3f64.powf(1.0 / 3.0) - 3f64.powf(2.0 / 3.0)),
        -0.5 * (3f64.powf(5.0 / 6.0) + 3f64.powf(7.0 / 6.0)),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct RadauOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step (s).
    pub h0: f64,
    pub max_step: f64,
    pub newton_max_iter: usize,
    /// Scaled-increment threshold for Newton convergence.
    pub newton_tol: f64,
}

impl Default for RadauOptions {
    fn default() -> Self {
        Self { rtol: 1e-7, atol: 1e-9, h0: 1e-3, max_step: f64::INFINITY, newton_max_iter: 10, newton_tol: 1e-3 }
    }
}

/// Factored iteration matrices `μ/h·I − J` for the real eigenvalue and the
/// complex pair.
pub struct IterationMatrices {
    pub real: Lu<f64>,
    pub complex: Lu<Complex64>,
}

impl IterationMatrices {
    pub fn factor<const N: usize>(h: f64, jac: &[[f64; N]; N]) -> Result<Self> {
        let mr = mu_real() / h;
        let mc = mu_complex() / h;
        let mut a = Vec::with_capacity(N * N);
        let mut b = Vec::with_capacity(N * N);
        for (i, row) in jac.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let d = if i == j { 1.0 } else { 0.0 };
                a.push(mr * d - x);
                b.push(mc * d - Complex64::new(x, 0.0));
            }
        }
        Ok(Self { real: Lu::factor(N, a)?, complex: Lu::factor(N, b)? })
    }
}

/// Result of one simplified-Newton solve of the collocation system.
#[derive(Debug, Clone)]
pub struct NewtonOutcome<const N: usize> {
    pub converged: bool,
    pub iterations: usize,
    /// Stage increments `Z_i = Y_i − y` at the three collocation nodes.
    pub z: [[f64; N]; 3],
    pub rate: Option<f64>,
    /// Scaled RMS norm of each Newton increment.
    pub increments: Vec<f64>,
}

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(x, s)| (x / s) * (x / s)).sum();
    (s / v.len() as f64).sqrt()
}

/// Simplified Newton iteration for the Radau stage equations with a reused
/// Jacobian (baked into `lu`).
#[allow(clippy::too_many_arguments)]
pub fn newton_step<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    t: f64,
    y: &[f64; N],
    h: f64,
    z0: [[f64; N]; 3],
    scale: &[f64; N],
    lu: &IterationMatrices,
    max_iter: usize,
    tol: f64,
) -> NewtonOutcome<N> {
    let mr = mu_real() / h;
    let mc = mu_complex() / h;
    let mut z = z0;
    let mut w = [[0.0; N]; 3];
    for i in 0..3 {
        for k in 0..N {
            w[i][k] = (0..3).map(|j| TI[i][j] * z[j][k]).sum();
        }
    }
    let mut increments = Vec::new();
    let mut rate = None;
    let mut old_norm: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..max_iter {
        iterations = k + 1;
        let mut f = [[0.0; N]; 3];
        let mut finite = true;
        for i in 0..3 {
            let yi: [f64; N] = std::array::from_fn(|m| y[m] + z[i][m]);
            f[i] = sys.rhs(t + C[i] * h, &yi);
            finite &= all_finite(&f[i]);
        }
        if !finite {
            break;
        }
        let mut fr = vec![0.0; N];
        let mut fc = vec![Complex64::new(0.0, 0.0); N];
        for m in 0..N {
            let mut sr = 0.0;
            let mut sc = Complex64::new(0.0, 0.0);
            for i in 0..3 {
                sr += f[i][m] * TI[0][i];
                sc += f[i][m] * Complex64::new(TI[1][i], TI[2][i]);
            }
            fr[m] = sr - mr * w[0][m];
            fc[m] = sc - mc * Complex64::new(w[1][m], w[2][m]);
        }
        lu.real.solve_in_place(&mut fr);
        lu.complex.solve_in_place(&mut fc);
        let mut dw = vec![0.0; 3 * N];
        let mut sc3 = vec![0.0; 3 * N];
        for m in 0..N {
            dw[m] = fr[m];
            dw[N + m] = fc[m].re;
            dw[2 * N + m] = fc[m].im;
            sc3[m] = scale[m];
            sc3[N + m] = scale[m];
            sc3[2 * N + m] = scale[m];
        }
        let norm = rms_scaled(&dw, &sc3);
        increments.push(norm);
        if let Some(old) = old_norm {
            rate = Some(norm / old);
        }
        if let Some(r) = rate {
            if r >= 1.0 || r.powi((max_iter - k) as i32) / (1.0 - r) * norm > tol {
                break;
            }
        }
        for m in 0..N {
            w[0][m] += dw[m];
            w[1][m] += dw[N + m];
            w[2][m] += dw[2 * N + m];
        }
        for i in 0..3 {
            for m in 0..N {
                z[i][m] = (0..3).map(|j| T[i][j] * w[j][m]).sum();
            }
        }
        if norm == 0.0 || norm < 1e-3 * tol || rate.is_some_and(|r| r / (1.0 - r) * norm < tol) {
            converged = true;
            break;
        }
        old_norm = Some(norm);
    }
    NewtonOutcome { converged, iterations, z, rate, increments }
}

/// Collocation polynomial of one accepted step.
#[derive(Debug, Clone, Copy)]
struct RadauDense<const N: usize> {
    t_old: f64,
    h: f64,
    y_old: [f64; N],
    q: [[f64; 3]; N],
}

impl<const N: usize> RadauDense<N> {
    fn new(t_old: f64, h: f64, y_old: [f64; N], z: &[[f64; N]; 3]) -> Self {
        let mut q = [[0.0; 3]; N];
        for (k, qk) in q.iter_mut().enumerate() {
            for (j, qkj) in qk.iter_mut().enumerate() {
                *qkj = (0..3).map(|i| z[i][k] * P[i][j]).sum();
            }
        }
        Self { t_old, h, y_old, q }
    }

    fn eval(&self, t: f64) -> [f64; N] {
        let x = (t - self.t_old) / self.h;
        let (x1, x2, x3) = (x, x * x, x * x * x);
        std::array::from_fn(|k| self.y_old[k] + self.q[k][0] * x1 + self.q[k][1] * x2 + self.q[k][2] * x3)
    }
}

fn predict_factor(h: f64, h_old: Option<f64>, err: f64, err_old: Option<f64>) -> f64 {
    let mult = match (h_old, err_old) {
        (Some(ho), Some(eo)) if err > 0.0 => h / ho * (eo / err).powf(0.25),
        _ => 1.0,
    };
    if err == 0.0 {
        return MAX_FACTOR;
    }
    mult.min(1.0) * err.powf(-0.25)
}

/// Adaptive Radau IIA integration sampled at every time in `grid`
/// (ascending, starting at or after `t0`).
pub fn radau_dense<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    t0: f64,
    y0: [f64; N],
    grid: &[f64],
    opts: &RadauOptions,
) -> Result<(Vec<[f64; N]>, SolverStats)> {
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(grid.len());
    let t_end = *grid.last().unwrap_or(&t0);
    let mut next = 0;
    while next < grid.len() && grid[next] <= t0 {
        out.push(y0);
        next += 1;
    }

    let mut t = t0;
    let mut y = y0;
    let mut f = sys.rhs(t, &y);
    let mut jac = sys.jacobian(t, &y);
    stats.rhs_evals += 1;
    stats.jacobian_evals += 1;
    let mut current_jac = true;
    let mut h_abs = opts.h0.min(opts.max_step);
    let mut h_old: Option<f64> = None;
    let mut err_old: Option<f64> = None;
    let mut lu: Option<IterationMatrices> = None;
    let mut dense: Option<RadauDense<N>> = None;

    while t < t_end {
        let min_step = 10.0 * (next_up(t) - t).abs();
        if h_abs > opts.max_step {
            h_abs = opts.max_step;
            h_old = None;
            err_old = None;
        } else if h_abs < min_step {
            h_abs = min_step;
            h_old = None;
            err_old = None;
        }
        let mut rejected = false;
        let (t_new, y_new, z, err_norm, n_iter, rate) = loop {
            if h_abs < min_step {
                return Err(CoreError::NewtonFailure { t, h: h_abs });
            }
            let mut t_new = t + h_abs;
            if t_new > t_end {
                t_new = t_end;
            }
            let h = t_new - t;
            h_abs = h;
            let z0 = match &dense {
                None => [[0.0; N]; 3],
                Some(d) => {
                    let mut z0 = [[0.0; N]; 3];
                    for (i, zi) in z0.iter_mut().enumerate() {
                        let yi = d.eval(t + h * C[i]);
                        *zi = std::array::from_fn(|k| yi[k] - y[k]);
                    }
                    z0
                }
            };
            let scale: [f64; N] = std::array::from_fn(|k| opts.atol + y[k].abs() * opts.rtol);

            let mut outcome = None;
            loop {
                if lu.is_none() {
                    stats.lu_factorizations += 1;
                    lu = IterationMatrices::factor(h, &jac).ok();
                }
                let Some(m) = &lu else { break };
                let o = newton_step(sys, t, &y, h, z0, &scale, m, opts.newton_max_iter, opts.newton_tol);
                stats.rhs_evals += 3 * o.iterations;
                if o.converged {
                    outcome = Some(o);
                    break;
                }
                if current_jac {
                    break;
                }
                jac = sys.jacobian(t, &y);
                stats.jacobian_evals += 1;
                current_jac = true;
                lu = None;
            }
            let Some(o) = outcome else {
                stats.newton_failures += 1;
                h_abs *= 0.5;
                lu = None;
                continue;
            };

            let y_new: [f64; N] = std::array::from_fn(|k| y[k] + o.z[2][k]);
            let ze: [f64; N] = std::array::from_fn(|k| (0..3).map(|i| o.z[i][k] * E[i]).sum::<f64>() / h);
            let m = lu.as_ref().expect("factored");
            let mut err: Vec<f64> = (0..N).map(|k| f[k] + ze[k]).collect();
            m.real.solve_in_place(&mut err);
            let scale: Vec<f64> = (0..N).map(|k| opts.atol + y[k].abs().max(y_new[k].abs()) * opts.rtol).collect();
            let mut err_norm = rms_scaled(&err, &scale);
            let safety = 0.9 * (2 * opts.newton_max_iter + 1) as f64 / (2 * opts.newton_max_iter + o.iterations) as f64;
            if rejected && err_norm > 1.0 {
                let ye: [f64; N] = std::array::from_fn(|k| y[k] + err[k]);
                let fe = sys.rhs(t, &ye);
                stats.rhs_evals += 1;
                let mut err2: Vec<f64> = (0..N).map(|k| fe[k] + ze[k]).collect();
                m.real.solve_in_place(&mut err2);
                err_norm = rms_scaled(&err2, &scale);
            }
            if !err_norm.is_finite() || err_norm > 1.0 {
                let factor = if err_norm.is_finite() { predict_factor(h_abs, h_old, err_norm, err_old) } else { 0.0 };
                h_abs *= MIN_FACTOR.max(safety * factor);
                lu = None;
                rejected = true;
                stats.rejected += 1;
                continue;
            }
            break (t_new, y_new, o.z, err_norm, o.iterations, (safety, o.rate));
        };
        let (safety, rate) = rate;

        if !all_finite(&y_new) {
            return Err(CoreError::Diverged { t: t_new });
        }
        let recompute_jac = n_iter > 2 && rate.is_some_and(|r| r > 1e-3);
        let mut factor = predict_factor(h_abs, h_old, err_norm, err_old);
        factor = MAX_FACTOR.min(safety * factor);
        if !recompute_jac && factor < 1.2 {
            factor = 1.0;
        } else {
            lu = None;
        }
        let f_new = sys.rhs(t_new, &y_new);
        stats.rhs_evals += 1;
        if recompute_jac {
            jac = sys.jacobian(t_new, &y_new);
            stats.jacobian_evals += 1;
            current_jac = true;
        } else {
            current_jac = false;
        }
        let d = RadauDense::new(t, t_new - t, y, &z);
        while next < grid.len() && grid[next] <= t_new {
            out.push(if grid[next] == t_new { y_new } else { d.eval(grid[next]) });
            next += 1;
        }
        stats.steps += 1;
        h_old = Some(h_abs);
        err_old = Some(err_norm);
        h_abs *= factor;
        t = t_new;
        y = y_new;
        f = f_new;
        dense = Some(d);
    }
    while out.len() < grid.len() {
        out.push(y);
    }
    Ok((out, stats))
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}
