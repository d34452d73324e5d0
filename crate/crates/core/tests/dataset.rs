use cvsim_core::dataset::{
    generate, pseudo_ehr, read_ehr_csv, sample_prior, split_sizes, write_ehr_csv, Dataset, NormStats, PriorBox, PseudoEhrConfig, Split,
};
use cvsim_core::outputs::{idx, simulate_outputs};
use cvsim_core::{ParameterVector, SolverConfig, N_OUTPUTS, OUTPUT_NAMES, PARAM_NAMES};
use proptest::prelude::*;

fn small() -> Dataset {
    generate(&PriorBox::structural(), 8, &SolverConfig::default(), 17, None).unwrap()
}

#[test]
fn small_generation_is_deterministic_and_exhaustive() {
    let a = small();
    let b = small();
    assert_eq!(a.len(), 8);
    assert_eq!(a.v, b.v);
    assert_eq!(a.y, b.y);
    let sizes = [Split::Train, Split::Test, Split::Validation].map(|s| a.indices(s).len());
    assert_eq!(sizes.iter().sum::<usize>(), 8);
    assert_eq!(sizes, split_sizes(8));

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.save(da.path()).unwrap();
    b.save(db.path()).unwrap();
    for f in ["train.csv", "test.csv", "validation.csv", "metadata.json"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
    let back = Dataset::load(da.path()).unwrap();
    assert_eq!(back.v, a.v);
    assert_eq!(back.y, a.y);
    assert_eq!(back.stats, a.stats);
    assert_eq!(back.split, a.split);
}

#[test]
fn stored_rows_resimulate_to_their_outputs() {
    let ds = small();
    for (v, y) in ds.v.iter().zip(&ds.y) {
        let again = simulate_outputs(&ParameterVector::from_array(v), &ds.meta.solver).unwrap().output.values;
        for k in 0..N_OUTPUTS {
            assert!((again[k] - y[k]).abs() <= 1e-6 * y[k].abs().max(1e-12), "{}: {} vs {}", OUTPUT_NAMES[k], again[k], y[k]);
        }
    }
}

#[test]
fn default_row_matches_a_finely_resolved_reference() {
    let rows = sample_prior(&PriorBox::point(ParameterVector::default()), 3, 0);
    assert!(rows.iter().all(|r| *r == ParameterVector::default().to_array()));
    let y = simulate_outputs(&ParameterVector::from_array(&rows[0]), &SolverConfig::default()).unwrap().output.values;
    // Independent integrator: explicit RK4 with a step far below the stiff timescales.
    let reference = simulate_outputs(&ParameterVector::default(), &SolverConfig::rk4(1e-4)).unwrap().output.values;
    for k in 0..N_OUTPUTS {
        assert!((y[k] - reference[k]).abs() <= 1e-3 * reference[k].abs().max(1.0), "{}: {} vs {}", OUTPUT_NAMES[k], y[k], reference[k]);
    }
}

#[test]
fn training_statistics_standardize_the_training_split() {
    let rows = sample_prior(&PriorBox::structural(), 500, 4);
    let stats = NormStats::fit(&rows, &PARAM_NAMES).unwrap();
    for j in 0..PARAM_NAMES.len() {
        let z: Vec<f64> = rows.iter().map(|r| stats.normalize(r)[j]).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pseudo_records_round_trip_through_csv() {
    let ds = small();
    let cfg = PseudoEhrConfig { seed: 9, missing_prob: 0.3, ..Default::default() };
    let recs = pseudo_ehr(&ds.y, &cfg);
    assert!(recs.iter().all(|r| !r.y.present[idx::VL_SYS]));
    let mut buf = vec![];
    write_ehr_csv(&recs, &mut buf).unwrap();
    let back = read_ehr_csv(&buf[..], false).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.y.present, b.y.present);
        for k in 0..N_OUTPUTS {
            if a.y.present[k] {
                assert_eq!(a.y.values[k], b.y.values[k]);
            }
        }
    }
    let again = pseudo_ehr(&ds.y, &cfg);
    assert!(again.iter().zip(&recs).all(|(a, b)| a.id == b.id && a.y.to_csv_row() == b.y.to_csv_row()));
}

proptest! {
    #[test]
    fn normalization_round_trips(rows in prop::collection::vec(prop::array::uniform4(-1e3f64..1e3), 3..40)) {
        prop_assume!((0..4).all(|j| rows.iter().any(|r| r[j] != rows[0][j])));
        let stats = NormStats::fit(&rows, &["a", "b", "c", "d"]).unwrap();
        for r in &rows {
            let back = stats.denormalize(&stats.normalize(r));
            for j in 0..4 {
                prop_assert!((back[j] - r[j]).abs() < 1e-12 * r[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn prior_draws_stay_inside_their_box(seed in 0u64..1000, ehr in any::<bool>()) {
        let prior = if ehr { PriorBox::ehr() } else { PriorBox::structural() };
        for row in sample_prior(&prior, 20, seed) {
            prop_assert!(prior.contains(&row, 0.0));
            prop_assert!(ParameterVector::from_array(&row).validate().is_ok());
        }
    }
}
