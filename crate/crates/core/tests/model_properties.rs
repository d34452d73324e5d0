use cvsim_core::{Cvsim6, ParameterVector, N_PARAMS};
use proptest::prelude::*;

fn params_strategy() -> impl Strategy<Value = ParameterVector> {
    prop::array::uniform23(0.7f64..1.3).prop_map(|f| {
        let base = ParameterVector::default().to_array();
        ParameterVector::from_array(&std::array::from_fn::<f64, N_PARAMS, _>(|i| base[i] * f[i]))
    })
}

proptest! {
    #[test]
    fn matrix_form_reproduces_the_right_hand_side(v in params_strategy(), t in 0.0f64..2.0, p in prop::array::uniform6(-5.0e3f64..2.0e5)) {
        let m = Cvsim6::new(v).unwrap();
        let f = m.rhs(t, &p);
        let lin = m.matrix_form(t, &p).apply(&p);
        let scale = f.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for i in 0..6 {
            prop_assert!((f[i] - lin[i]).abs() <= 1e-10 * scale, "{i}: {} vs {}", f[i], lin[i]);
        }
    }

    #[test]
    fn valves_only_pass_forward_flow(v in params_strategy(), p in prop::array::uniform6(-5.0e3f64..2.0e5)) {
        let m = Cvsim6::new(v).unwrap();
        let q = m.flows(&p).to_array();
        for (k, &x) in q.iter().enumerate() {
            // Qa and Qpv are plain resistors; the other four sit behind valves.
            if k != 2 && k != 5 {
                prop_assert!(x >= 0.0, "flow {k} = {x}");
            }
        }
    }

    #[test]
    fn initial_state_holds_the_total_volume(v in params_strategy()) {
        let m = Cvsim6::new(v).unwrap();
        let ic = m.initial_conditions().unwrap();
        let vol = m.volumes(0.0, &ic.state.p);
        prop_assert!((vol.total - cvsim_core::model::TOTAL_BLOOD_VOLUME).abs() < 1e-8 * 5000.0);
    }
}
