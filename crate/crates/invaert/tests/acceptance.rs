//! End-to-end acceptance run: every criterion is checked at its stated
//! tolerance and reported on one PASS/FAIL line. Runs without the libtest
//! harness so the lines are always printed.
//!
//! `INVAERT_ACCEPTANCE_CACHE=<dir>` keeps datasets and trained bundles between
//! runs. `INVAERT_ACCEPTANCE_ONLY=2,8` restricts the run to some criteria.

use std::path::PathBuf;
use std::time::Instant;

use cvsim_core::dataset::{generate, pseudo_ehr, Dataset, PriorBox, PseudoEhrConfig, Split};
use cvsim_core::eigen::eigen6;
use cvsim_core::model::TOTAL_BLOOD_VOLUME;
use cvsim_core::outputs::{idx, simulate_outputs};
use cvsim_core::stiffness::{phase_distance, rc_table, stiffness_scan};
use cvsim_core::{integrate, ClinicalOutput, Cvsim6, ParameterVector, SolverConfig, N_OUTPUTS, OUTPUT_NAMES};
use invaert::ehr::{ehr_error_report, ehr_predict, write_error_table, EhrOptions, EhrReport};
use invaert::invert::{invert_with_latents, latent_draws};
use invaert::manifold::prior_scaled_centered;
use invaert::train::{kl_standard_normal, new_emulator, new_flow, new_vae, train_emulator, train_flow, train_vae_decoder};
use invaert::{impute, invert, manifold, ModelBundle, Reconstruction, TrainingConfig, TrainingData, REFERENCE_OUTPUT};
use invaert_nn::{FlowConfig, Mlp, Module, RealNvp, Tape, Tensor2D, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 2024;
const N_STRUCTURAL: usize = 10_000;
const EPOCHS: (usize, usize, usize) = (1500, 400, 1000);

const N_EHR: usize = 3000;
const EHR_EPOCHS: (usize, usize, usize) = (1500, 200, 1000);
const DELTAS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Mean absolute reconstruction errors reported for the full-scale model.
const REFERENCE_MEAN_ABS: [f64; N_OUTPUTS] = [
    4.62e-2, 3.37e-1, 2.50e-1, 8.16e-2, 1.12e-2, 8.06e-2, 5.12e-2, 1.82e-2, 4.89e-2, 2.72e-2, 1.49e-1, 3.29e-1, 5.04e-4, 1.41e-2, 1.02,
    8.79e-2,
];
const IMPUTATION_MASK: [usize; 7] = [idx::PA_DIA, idx::PR_DIA, idx::PPA_DIA, idx::PW, idx::VL_SYS, idx::SVR, idx::PVR];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Collects failed sub-checks; the criterion passes when there are none.
#[derive(Default)]
struct Checks {
    notes: Vec<String>,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, msg: String) {
        if ok {
            self.notes.push(msg);
        } else {
            self.failed.push(msg);
        }
    }

    fn finish(self) -> Outcome {
        if self.failed.is_empty() {
            outcome(true, self.notes.join("; "))
        } else {
            outcome(false, format!("failed: {}", self.failed.join("; ")))
        }
    }
}

fn cache_dir() -> Option<PathBuf> {
    let d = PathBuf::from(std::env::var_os("INVAERT_ACCEPTANCE_CACHE")?);
    std::fs::create_dir_all(&d).ok()?;
    Some(d)
}

fn dataset(prior: &PriorBox, n: usize, tag: &str) -> Dataset {
    let path = cache_dir().map(|d| d.join(format!("{tag}_{n}_{DATA_SEED}")));
    if let Some(p) = &path {
        if p.join("metadata.json").exists() {
            return Dataset::load(p).unwrap();
        }
    }
    let t = Instant::now();
    let ds = generate(prior, n, &SolverConfig::default(), DATA_SEED, None).unwrap();
    println!("    generated {n} {tag} samples in {:.0} s", t.elapsed().as_secs_f64());
    if let Some(p) = &path {
        std::fs::create_dir_all(p).unwrap();
        ds.save(p).unwrap();
    }
    ds
}

fn cached_bundle(name: &str, build: impl FnOnce() -> ModelBundle) -> ModelBundle {
    let path = cache_dir().map(|d| d.join(format!("{name}.json")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return ModelBundle::load(p).unwrap();
    }
    let b = build();
    if let Some(p) = &path {
        b.save(p).unwrap();
    }
    b
}

fn structural_bundle(ds: &Dataset) -> ModelBundle {
    let (e, f, v) = EPOCHS;
    cached_bundle(&format!("structural_{e}_{f}_{v}"), || {
        let data = TrainingData::from_dataset(ds).unwrap();
        let cfg = TrainingConfig::synthetic().scaled(e, f, v);
        let mut b = ModelBundle::new(cfg.clone(), PriorBox::structural(), data.v_stats.clone(), data.y_stats.clone());
        let mut emu = new_emulator(&cfg, data.v_dim(), data.y_dim());
        train_emulator(&data, &cfg, &mut emu).unwrap();
        let mut flow = new_flow(&cfg, data.y_dim());
        train_flow(&data, &cfg, &mut flow).unwrap();
        let mut pair = new_vae(&cfg, data.v_dim(), data.y_dim());
        train_vae_decoder(&data, &cfg, &emu, &mut pair).unwrap();
        b.emulator = Some(emu);
        b.flow = Some(flow);
        b.encoder = Some(pair.encoder);
        b.decoder = Some(pair.decoder);
        b
    })
}

fn max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let traj = integrate(&ParameterVector::default(), &SolverConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let drift = traj.max_volume_drift(TOTAL_BLOOD_VOLUME);
    outcome(drift < 1e-4 && secs < 5.0, format!("max relative volume drift {drift:.2e}, {secs:.3} s"))
}

fn criterion_2() -> Outcome {
    let v = ParameterVector::default();
    let r = stiffness_scan(&v, &SolverConfig::default()).unwrap();
    let l = r.sr_max().eigenvalues();
    let tau = r.sr_max().timescales();
    let rc = rc_table(&v);
    let mut c = Checks::default();
    for (k, target) in [(0, -520.95), (1, -355.93)] {
        let rel = (l[k].re / target - 1.0).abs();
        c.check(rel < 0.01, format!("λ{} = {:.2} ({:.2}%)", k + 1, l[k].re, 100.0 * rel));
    }
    for (k, reference) in [(0, 0.0019), (1, 0.0028)] {
        let a = (tau[k] / reference - 1.0).abs();
        let b = (tau[k] / rc[k].value - 1.0).abs();
        c.check(a < 0.05 && b < 0.05, format!("τ{} = {:.5} s (RC {:.5} s)", k + 1, tau[k], rc[k].value));
    }
    let dmax = phase_distance(r.t_sr_max, 9.444, r.ttot);
    let dmin = phase_distance(r.t_sr_min, 8.618, r.ttot);
    c.check(dmax <= 2e-3, format!("SR max at {:.3} s", r.t_sr_max));
    c.check(dmin <= 2e-3, format!("SR min at {:.3} s", r.t_sr_min));
    c.finish()
}

fn criterion_3() -> Outcome {
    let v = ParameterVector::default();
    let coarse = integrate(&v, &SolverConfig::rk4(2e-2)).unwrap();
    let reversals = coarse.ejection_reversals();
    let fine = simulate_outputs(&v, &SolverConfig::rk4(4e-3)).unwrap().output.values;
    let radau = simulate_outputs(&v, &SolverConfig::default()).unwrap().output.values;
    let pressures = [
        idx::PA_SYS,
        idx::PA_DIA,
        idx::PR_SYS,
        idx::PR_DIA,
        idx::PPA_SYS,
        idx::PPA_DIA,
        idx::PR_EDP,
        idx::PW,
        idx::PCVP,
    ];
    let worst = max(pressures.iter().map(|&k| (fine[k] - radau[k]).abs()));
    let mut c = Checks::default();
    c.check(!reversals.is_empty(), format!("dt 2e-2: Pl < Pa at {} samples while ejecting", reversals.len()));
    c.check(worst < 0.5, format!("dt 4e-3: max pressure difference to Radau {worst:.3} mmHg"));
    c.finish()
}

fn criterion_4(ds: &Dataset, b: &ModelBundle) -> Outcome {
    let (v, y) = ds.rows(Split::Validation);
    let pred = b.emulate(&v).unwrap();
    let mut rel: Vec<f64> = pred.iter().zip(&y).map(|(p, y)| invaert::relative_l2(y, p)).collect();
    rel.sort_by(f64::total_cmp);
    let (median, worst) = (rel[rel.len() / 2], rel[rel.len() - 1]);
    outcome(
        median < 0.02 && worst < 0.05,
        format!("validation relative error median {:.3}%, max {:.3}% over {} rows", 100.0 * median, 100.0 * worst, rel.len()),
    )
}

fn criterion_5(ds: &Dataset, b: &ModelBundle) -> Outcome {
    let sim = Reconstruction::Simulator(SolverConfig::default());
    let inv = invert(b, &REFERENCE_OUTPUT, 100, 1, &sim).unwrap();
    let worst = inv.max_relative_error();
    let mut c = Checks::default();
    c.check(worst <= 0.01, format!("reference output: max relative error {:.3}% over 100 draws", 100.0 * worst));

    let (_, y) = ds.rows(Split::Validation);
    let mut mean = [0.0; N_OUTPUTS];
    let mut fallbacks = 0;
    for (i, yi) in y.iter().enumerate() {
        let r = invert_with_latents(b, yi, latent_draws(1, b.latent_dim(), 1, 1000 + i as u64), &sim).unwrap();
        fallbacks += usize::from(r.source[0] != invaert::invert::ReconSource::Simulator);
        for (m, e) in mean.iter_mut().zip(r.abs_errors()[0]) {
            *m += e / y.len() as f64;
        }
    }
    let ratios: Vec<f64> = mean.iter().zip(&REFERENCE_MEAN_ABS).map(|(m, r)| m / r).collect();
    let (k, ratio) = ratios.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    c.check(
        ratios.iter().all(|r| *r <= 5.0),
        format!("validation mean abs errors at most {ratio:.2}x reference ({}; {fallbacks} emulator fallbacks)", OUTPUT_NAMES[k]),
    );
    c.finish()
}

fn criterion_6(b: &ModelBundle) -> Outcome {
    let m = manifold(b, &REFERENCE_OUTPUT, 5000, 3).unwrap();
    let ce12 = m.cumulative_energy[11];
    let x = prior_scaled_centered(&m.points, &b.prior);
    let mat = nalgebra::DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j]);
    let mut oracle: Vec<f64> = mat.singular_values().iter().copied().collect();
    oracle.sort_by(|a, b| b.total_cmp(a));
    let scale = oracle[0].max(1.0);
    let diff = max(m.singular_values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()));
    let mut c = Checks::default();
    c.check(ce12 >= 0.97, format!("CE(12) = {:.4}", ce12));
    c.check(diff <= 1e-8 * scale, format!("max singular value difference to nalgebra {diff:.1e}"));
    c.finish()
}

fn criterion_7(b: &ModelBundle) -> Outcome {
    let y = ClinicalOutput::complete(REFERENCE_OUTPUT).with_missing(&IMPUTATION_MASK);
    let res = impute(b, &y, 100_000, 4, 5, 9, &Reconstruction::Simulator(SolverConfig::default())).unwrap();
    let worst = max(res.observed_relative_errors());
    outcome(
        worst <= 0.02,
        format!("max observed relative error {:.3}% over {} draws", 100.0 * worst, res.observed_relative_errors().len()),
    )
}

fn ehr_bundles(ds: &Dataset) -> Vec<ModelBundle> {
    let data = TrainingData::from_dataset(ds).unwrap();
    let (e, f, v) = EHR_EPOCHS;
    let base = TrainingConfig::ehr().scaled(e, f, v);
    let emulator = cached_bundle(&format!("ehr_emulator_{e}"), || {
        let mut b = ModelBundle::new(base.clone(), PriorBox::ehr(), data.v_stats.clone(), data.y_stats.clone());
        let mut emu = new_emulator(&base, data.v_dim(), data.y_dim());
        train_emulator(&data, &base, &mut emu).unwrap();
        b.emulator = Some(emu);
        b
    });
    let emu = emulator.emulator.clone().unwrap();
    DELTAS
        .iter()
        .map(|&delta| {
            cached_bundle(&format!("ehr_{e}_{f}_{v}_delta{delta}"), || {
                let cfg = base.clone().with_delta(delta);
                let mut b = ModelBundle::new(cfg.clone(), PriorBox::ehr(), data.v_stats.clone(), data.y_stats.clone());
                let mut flow = new_flow(&cfg, data.y_dim());
                train_flow(&data, &cfg, &mut flow).unwrap();
                let mut pair = new_vae(&cfg, data.v_dim(), data.y_dim());
                train_vae_decoder(&data, &cfg, &emu, &mut pair).unwrap();
                b.emulator = Some(emu.clone());
                b.flow = Some(flow);
                b.encoder = Some(pair.encoder);
                b.decoder = Some(pair.decoder);
                b
            })
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let ds = dataset(&PriorBox::ehr(), N_EHR, "ehr");
    let bundles = ehr_bundles(&ds);
    let (_, y) = ds.rows(Split::Validation);
    let records = pseudo_ehr(&y, &PseudoEhrConfig { seed: 17, ..Default::default() });
    let opts = EhrOptions { m: 2000, seed: 5, ..Default::default() };
    let reports: Vec<EhrReport> = bundles
        .iter()
        .map(|b| ehr_error_report(&ehr_predict(b, &records, &opts).unwrap(), b.config.delta))
        .collect();
    let mut table = Vec::new();
    write_error_table(&reports, &mut table).unwrap();
    for line in String::from_utf8(table).unwrap().lines() {
        println!("    {line}");
    }
    let at = |delta: f64, k: usize| reports.iter().find(|r| r.delta == delta).and_then(|r| r.error(k)).unwrap_or(f64::NAN);
    let mut c = Checks::default();
    for k in [idx::HR, idx::PA_SYS] {
        let (lo, hi) = (at(0.5, k), at(2.0, k));
        c.check(hi > lo, format!("{}: {:.3} at δ=2 vs {:.3} at δ=0.5", OUTPUT_NAMES[k], hi, lo));
    }
    c.check(reports[0].n_patients > 0, format!("{} patients", reports[0].n_patients));
    c.finish()
}

const FD_STEP: f64 = 1e-6;

fn randomize<M: Module>(m: &mut M, scale: f64, rng: &mut ChaCha8Rng) {
    for p in m.params_mut() {
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// Worst relative mismatch between tape gradients and central differences.
fn fd_mismatch<M: Module + Clone>(m: &M, loss: impl Fn(&M, &mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars = m.register(&mut tape);
    let l = loss(m, &mut tape, &vars);
    let grads = m.collect_grads(&tape.backward(l).unwrap(), &vars);
    let eval = |mm: &M| {
        let mut t = Tape::new();
        let v = mm.register(&mut t);
        let l = loss(mm, &mut t, &v);
        t.value(l).data[0]
    };
    let mut worst: f64 = 0.0;
    for k in 0..grads.len() {
        for i in 0..grads[k].len() {
            let mut plus = m.clone();
            plus.params_mut()[k].data[i] += FD_STEP;
            let mut minus = m.clone();
            minus.params_mut()[k].data[i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = grads[k].data[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}

fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor2D {
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn criterion_9() -> Outcome {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mlp = Mlp::swish(4, 6, 2, 3, &mut rng);
    let x = random_tensor(5, 4, 1.5, &mut rng);
    let t = random_tensor(5, 3, 1.0, &mut rng);
    let g_mlp = fd_mismatch(&mlp, |n, tape, vars| {
        let xv = tape.constant(&x);
        let tv = tape.constant(&t);
        let out = n.forward_tape(tape, vars, xv).unwrap();
        let r = tape.sub(out, tv).unwrap();
        let sq = tape.square(r);
        tape.sum_all(sq)
    });
    let mut flow = RealNvp::new(FlowConfig::new(4, 2, 5, 2, true), &mut rng);
    randomize(&mut flow, 0.5, &mut rng);
    let y = random_tensor(7, 4, 2.0, &mut rng);
    let g_flow = fd_mismatch(&flow, |f, tape, vars| {
        let yv = tape.constant(&y);
        f.clone().mean_log_prob_tape(tape, vars, yv, true).unwrap()
    });
    c.check(g_mlp < 1e-5 && g_flow < 1e-5, format!("gradient mismatch mlp {g_mlp:.1e}, flow {g_flow:.1e}"));

    let mut bij = 0.0f64;
    for bn in [false, true] {
        let mut f = RealNvp::new(FlowConfig::new(16, 6, 12, 2, bn), &mut rng);
        randomize(&mut f, 0.3, &mut rng);
        let y = random_tensor(32, 16, 2.0, &mut rng);
        let (z, ld_inv) = f.inverse(&y).unwrap();
        let (back, ld_fwd) = f.forward(&z).unwrap();
        bij = bij.max(back.max_abs_diff(&y));
        bij = bij.max(max(ld_inv.iter().zip(&ld_fwd).map(|(a, b)| (a + b).abs())));
    }
    c.check(bij < 1e-8, format!("flow round trip {bij:.1e}"));

    let kl_ok = kl_standard_normal(&[0.0; 3], &[0.0; 3]) == 0.0
        && (kl_standard_normal(&[2.0], &[0.0]) - 2.0).abs() < 1e-15
        && (kl_standard_normal(&[0.0], &[-1.0]) - 0.5 * (f64::exp(-1.0) + 1.0 - 1.0)).abs() < 1e-15;
    c.check(kl_ok, "KL closed form".into());

    let mut rhs_worst = 0.0f64;
    let base = ParameterVector::default().to_array();
    for _ in 0..200 {
        let v: [f64; 23] = std::array::from_fn(|i| base[i] * rng.gen_range(0.7..1.3));
        let m = Cvsim6::new(ParameterVector::from_array(&v)).unwrap();
        let t = rng.gen_range(0.0..2.0);
        let p: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-5.0e3..2.0e5));
        let f = m.rhs(t, &p);
        let lin = m.matrix_form(t, &p).apply(&p);
        let scale = f.iter().map(|x| x.abs()).fold(1.0, f64::max);
        rhs_worst = rhs_worst.max(max((0..6).map(|i| (f[i] - lin[i]).abs() / scale)));
        // The matrix must also be well formed for the eigen solver.
        eigen6(&m.matrix_form(t, &p).a).unwrap();
    }
    c.check(rhs_worst <= 1e-10, format!("rhs vs matrix form {rhs_worst:.1e}"));

    let syn = TrainingConfig::synthetic();
    let ehr = TrainingConfig::ehr();
    let vae = new_vae(&syn, 23, 16);
    let counts = [
        new_emulator(&syn, 23, 16).param_count(),
        vae.encoder.param_count(),
        vae.decoder.param_count(),
        new_flow(&syn, 16).param_count(),
        new_emulator(&ehr, 23, 16).param_count(),
        new_flow(&ehr, 16).param_count(),
    ];
    c.check(counts == [24376, 6246, 20439, 51712, 42096, 20280], format!("parameter counts {counts:?}"));

    let gen = || generate(&PriorBox::structural(), 6, &SolverConfig::default(), 31, Some(1)).unwrap();
    let (a, b) = (gen(), gen());
    let train = |ds: &Dataset| {
        let data = TrainingData::from_dataset(ds).unwrap();
        let cfg = TrainingConfig::synthetic().scaled(3, 2, 2).with_seed(4);
        let mut emu = new_emulator(&cfg, 23, 16);
        train_emulator(&data, &cfg, &mut emu).unwrap();
        emu
    };
    let same = a.v == b.v && a.y == b.y && train(&a) == train(&b);
    c.check(same, "fixed seeds reproduce data and weights".into());
    c.finish()
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("INVAERT_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let started = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |k: usize, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let o = f();
        println!("criterion {k}: {} ({:.0} s) {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64(), o.detail);
        results.push((k, o));
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    if [4, 5, 6, 7].iter().any(|&k| wanted(k)) {
        let ds = dataset(&PriorBox::structural(), N_STRUCTURAL, "structural");
        let bundle = structural_bundle(&ds);
        run(4, &mut || criterion_4(&ds, &bundle));
        run(5, &mut || criterion_5(&ds, &bundle));
        run(6, &mut || criterion_6(&bundle));
        run(7, &mut || criterion_7(&bundle));
    }
    run(8, &mut criterion_8);
    run(9, &mut criterion_9);

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    println!("acceptance: {} of {} criteria passed in {:.0} s", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
