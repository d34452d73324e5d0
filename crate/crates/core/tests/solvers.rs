use std::time::Instant;

use cvsim_core::model::{PL, TOTAL_BLOOD_VOLUME};
use cvsim_core::ode::{rk4_dense, OdeSystem};
use cvsim_core::outputs::{extract_outputs, idx, simulate_outputs};
use cvsim_core::{integrate, ParameterVector, SolverConfig};

struct Decay(f64);

impl OdeSystem<1> for Decay {
    fn rhs(&self, _t: f64, y: &[f64; 1]) -> [f64; 1] {
        [self.0 * y[0]]
    }
    fn jacobian(&self, _t: f64, _y: &[f64; 1]) -> [[f64; 1]; 1] {
        [[self.0]]
    }
}

#[test]
fn radau_conserves_total_volume_quickly() {
    let t = Instant::now();
    let traj = integrate(&ParameterVector::default(), &SolverConfig::default()).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let drift = traj.max_volume_drift(TOTAL_BLOOD_VOLUME);
    assert!(drift < 1e-4, "{drift:e}");
    assert!(elapsed < 5.0, "{elapsed} s");
    let dt: Vec<f64> = traj.t.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(dt.iter().all(|&d| (d - 1e-3).abs() < 1e-9));
}

#[test]
fn coarse_rk4_reverses_the_ejection_pressure_gradient() {
    let v = ParameterVector::default();
    let coarse = integrate(&v, &SolverConfig::rk4(2e-2)).unwrap();
    let rev = coarse.ejection_reversals();
    assert!(!rev.is_empty());
    // The reference solution keeps Pl above Pa for the whole ejection.
    let reference = integrate(&v, &SolverConfig::default()).unwrap();
    assert!(reference.ejection_reversals().is_empty());
    // And the coarse run visibly misses the reference ventricular pressure.
    let worst = coarse.p.iter().zip(&reference.p).map(|(a, b)| (a[PL] - b[PL]).abs()).fold(0.0, f64::max);
    assert!(worst / 1333.22 > 5.0, "{worst}");
}

#[test]
fn fine_rk4_agrees_with_radau() {
    let v = ParameterVector::default();
    let rk = simulate_outputs(&v, &SolverConfig::rk4(4e-3)).unwrap().output.values;
    let radau = simulate_outputs(&v, &SolverConfig::default()).unwrap().output.values;
    for k in [idx::PA_SYS, idx::PA_DIA, idx::PR_SYS, idx::PR_DIA, idx::PPA_SYS, idx::PPA_DIA, idx::PR_EDP, idx::PW, idx::PCVP] {
        assert!((rk[k] - radau[k]).abs() < 0.5, "component {k}: {} vs {}", rk[k], radau[k]);
    }
    let drift = integrate(&v, &SolverConfig::rk4(4e-3)).unwrap().max_volume_drift(TOTAL_BLOOD_VOLUME);
    assert!(drift < 1e-3, "{drift:e}");
}

#[test]
fn loose_radau_stays_stable_where_coarse_rk4_does_not() {
    let v = ParameterVector::default();
    let cfg = SolverConfig { rtol: 1e-4, atol: 1e-6, ..Default::default() };
    let traj = integrate(&v, &cfg).unwrap();
    assert!(traj.ejection_reversals().is_empty());
    assert!(traj.max_volume_drift(TOTAL_BLOOD_VOLUME) < 1e-3);
}

#[test]
fn rk4_global_error_is_fourth_order() {
    let sys = Decay(-2.0);
    let err = |dt: f64| {
        let (y, _) = rk4_dense(&sys, 0.0, [1.0], &[1.0], dt).unwrap();
        (y[0][0] - (-2.0f64).exp()).abs()
    };
    let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
    for ratio in [e1 / e2, e2 / e3] {
        assert!((ratio / 16.0 - 1.0).abs() < 0.1, "ratio {ratio}");
    }
}

#[test]
fn outputs_are_insensitive_to_grid_refinement() {
    let v = ParameterVector::default();
    let coarse = integrate(&v, &SolverConfig::default()).unwrap();
    let fine = integrate(&v, &SolverConfig { output_dt: 5e-4, ..Default::default() }).unwrap();
    let a = extract_outputs(&coarse, &v).unwrap().output.values;
    let b = extract_outputs(&fine, &v).unwrap().output.values;
    for k in 0..a.len() {
        let scale = a[k].abs().max(1.0);
        assert!((a[k] - b[k]).abs() / scale < 1e-3, "component {k}: {} vs {}", a[k], b[k]);
    }
}

#[test]
fn default_heart_rate_is_copied_exactly() {
    let y = simulate_outputs(&ParameterVector::default(), &SolverConfig::default()).unwrap().output;
    assert_eq!(y.values[idx::HR], 72.0);
    assert!(y.values[idx::PA_SYS] > y.values[idx::PA_DIA]);
    assert!(y.values[idx::VL_DIA] > y.values[idx::VL_SYS]);
}
