//! Commands that only need the circulation model: simulate, stiffness,
//! gen-data and pseudo-ehr.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use cvsim_core::dataset::{self, Dataset, PriorBox, PriorPreset, PseudoEhrConfig, Split};
use cvsim_core::model::TOTAL_BLOOD_VOLUME;
use cvsim_core::outputs::{extract_outputs, output_index};
use cvsim_core::stiffness::{rc_table, scan_trajectory, StiffnessReport};
use cvsim_core::{integrate, Cvsim6, Method, ParameterVector, SolverConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::settings::{create, prepare_out_dir, read_json, require_file, resolve, usage, write_json, Global};

/// Solver flags shared by every command that integrates the model.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct SolverArgs {
    /// Integrator (radau|rk4).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// RK4 step in seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Heart cycles to integrate.
    #[arg(long = "cycles")]
    #[serde(rename = "n_cycles", skip_serializing_if = "Option::is_none")]
    pub cycles: Option<usize>,
    /// Output grid spacing in seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dt: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
}

/// Parameter source flags.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ParamArgs {
    /// JSON object of parameter overrides (e.g. {"Hr": 80}); unnamed parameters keep their defaults.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    /// Use the reference parameter set.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defaults: Option<bool>,
}

fn load_params(params: &Option<PathBuf>, defaults: bool) -> anyhow::Result<ParameterVector> {
    match (params, defaults) {
        (Some(_), true) => Err(usage("--params and --defaults are mutually exclusive")),
        (None, false) => Err(usage("pass --defaults or --params <file>")),
        (None, true) => Ok(ParameterVector::default()),
        (Some(path), false) => {
            let over = read_json(path, "parameter file")?;
            if !over.is_object() {
                return Err(usage(format!("{} must hold a JSON object of parameter values", path.display())));
            }
            let mut v = serde_json::to_value(ParameterVector::default())?;
            for (k, x) in over.as_object().into_iter().flatten() {
                let slot = v.get_mut(k).ok_or_else(|| usage(format!("unknown parameter {k:?} in {}", path.display())))?;
                *slot = x.clone();
            }
            let p: ParameterVector = serde_json::from_value(v).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            p.validate()?;
            Ok(p)
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    pub params: Option<PathBuf>,
    pub defaults: bool,
    pub solver: SolverConfig,
}

pub fn simulate(args: &SimulateArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: SimulateSettings = resolve(section, args, "simulate")?;
    s.solver.validate()?;
    let v = load_params(&s.params, s.defaults)?;
    prepare_out_dir(global, "simulate", &s)?;
    let traj = integrate(&v, &s.solver)?;
    let ex = extract_outputs(&traj, &v)?;
    let mut w = create(&global.out_dir.join("trajectory.csv"))?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    let drift = traj.max_volume_drift(TOTAL_BLOOD_VOLUME);
    if ex.non_periodic {
        log::warn!("trajectory has not settled: systolic Pa differs by more than 1% between the last two cycles");
    }
    write_json(
        &global.out_dir.join("outputs.json"),
        &json!({
            "outputs": ex.output.to_json_value(),
            "non_periodic": ex.non_periodic,
            "max_volume_drift": drift,
            "solver_stats": traj.stats,
        }),
    )?;
    println!("Pa {:.2}/{:.2} mmHg, CO {:.3} L/min, max volume drift {drift:.3e}", ex.output.values[1], ex.output.values[2], ex.output.values[13]);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StiffnessArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Trailing cycles to scan.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_cycles: Option<usize>,
    /// Threshold below which |Re λ| counts as zero in the stiffness ratio.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessSettings {
    pub params: Option<PathBuf>,
    pub defaults: bool,
    pub solver: SolverConfig,
    pub tail_cycles: usize,
    pub sr_tol: f64,
}

impl Default for StiffnessSettings {
    fn default() -> Self {
        Self {
            params: None,
            defaults: false,
            solver: SolverConfig::default(),
            tail_cycles: 2,
            sr_tol: cvsim_core::stiffness::DEFAULT_SR_TOL,
        }
    }
}

fn sample_summary(r: &StiffnessReport, idx: usize) -> Value {
    let s = &r.samples[idx];
    json!({
        "t": s.t,
        "phase": s.t.rem_euclid(r.ttot),
        "sr": s.sr,
        "degenerate": s.degenerate,
        "eigenvalues_re": s.eigen.values.iter().map(|l| l.re).collect::<Vec<_>>(),
        "eigenvalues_im": s.eigen.values.iter().map(|l| l.im).collect::<Vec<_>>(),
        "timescales": s.timescales(),
    })
}

pub fn stiffness(args: &StiffnessArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: StiffnessSettings = resolve(section, args, "stiffness")?;
    s.solver.validate()?;
    if s.tail_cycles == 0 || s.tail_cycles > s.solver.n_cycles {
        return Err(usage(format!("tail_cycles must lie in 1..={}", s.solver.n_cycles)));
    }
    let v = load_params(&s.params, s.defaults)?;
    prepare_out_dir(global, "stiffness", &s)?;
    let model = Cvsim6::new(v)?;
    let traj = integrate(&v, &s.solver)?;
    let report = scan_trajectory(&model, &traj, s.tail_cycles, s.sr_tol)?;
    let out = &global.out_dir;
    let mut w = create(&out.join("spectrum.csv"))?;
    report.write_spectrum_csv(&mut w)?;
    w.flush()?;
    for (name, sample) in [("radar_sr_max.csv", report.sr_max()), ("radar_sr_min.csv", report.sr_min())] {
        let mut w = create(&out.join(name))?;
        StiffnessReport::write_radar_csv(sample, &mut w)?;
        w.flush()?;
    }
    write_json(
        &out.join("stiffness.json"),
        &json!({
            "ttot": report.ttot,
            "sr_max": sample_summary(&report, report.idx_sr_max),
            "sr_min": sample_summary(&report, report.idx_sr_min),
            "rc_constants": rc_table(&v),
            "max_residual": report.max_residual,
            "all_real": report.all_real,
        }),
    )?;
    let l = &report.sr_max().eigen.values;
    println!(
        "SR max {:.1} at t = {:.3} s (λ1 = {:.2}, λ2 = {:.2}); SR min {:.2} at t = {:.3} s",
        report.sr_max().sr,
        report.t_sr_max,
        l[0].re,
        l[1].re,
        report.sr_min().sr,
        report.t_sr_min
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Prior preset (structural|ehr).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorPreset>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSettings {
    pub n: usize,
    pub prior: PriorPreset,
    pub solver: SolverConfig,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self { n: 10_000, prior: PriorPreset::Structural, solver: SolverConfig::default() }
    }
}

pub fn gen_data(args: &GenDataArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: GenDataSettings = resolve(section, args, "gen-data")?;
    s.solver.validate()?;
    if s.prior == PriorPreset::Custom {
        return Err(usage("gen-data needs the structural or ehr prior"));
    }
    if s.n < 3 {
        return Err(usage("gen-data needs at least 3 samples to fill the splits"));
    }
    prepare_out_dir(global, "gen-data", &s)?;
    let ds = dataset::generate(&PriorBox::from_preset(s.prior), s.n, &s.solver, global.seed, global.workers)?;
    ds.save(&global.out_dir)?;
    println!(
        "{} samples ({} failed simulations replaced) written to {}",
        ds.len(),
        ds.meta.failures,
        global.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PseudoEhrArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Split to draw rows from (train|test|validation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Keep only the first rows of the split.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Independent probability that a component is missing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_prob: Option<f64>,
    /// Components that are never recorded (repeatable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub always_missing: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoEhrSettings {
    pub data: Option<PathBuf>,
    pub split: String,
    pub limit: Option<usize>,
    pub delta: f64,
    pub missing_prob: f64,
    pub always_missing: Vec<String>,
}

impl Default for PseudoEhrSettings {
    fn default() -> Self {
        let d = PseudoEhrConfig::default();
        Self {
            data: None,
            split: "validation".into(),
            limit: None,
            delta: d.delta,
            missing_prob: d.missing_prob,
            always_missing: d.always_missing.iter().map(|&k| cvsim_core::OUTPUT_NAMES[k].to_string()).collect(),
        }
    }
}

pub fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "validation" => Ok(Split::Validation),
        other => Err(usage(format!("unknown split {other:?} (train|test|validation)"))),
    }
}

pub fn load_dataset(path: &Option<PathBuf>) -> anyhow::Result<Dataset> {
    let dir = path.as_ref().ok_or_else(|| usage("--data <dir> is required"))?;
    require_file(&dir.join("metadata.json"), "dataset metadata")?;
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

pub fn pseudo_ehr(args: &PseudoEhrArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: PseudoEhrSettings = resolve(section, args, "pseudo-ehr")?;
    let split = parse_split(&s.split)?;
    if !(s.delta >= 0.0 && (0.0..=1.0).contains(&s.missing_prob)) {
        return Err(usage("delta must be non-negative and missing_prob within [0, 1]"));
    }
    let always_missing = s
        .always_missing
        .iter()
        .map(|n| output_index(n).ok_or_else(|| usage(format!("unknown output {n:?}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let ds = load_dataset(&s.data)?;
    prepare_out_dir(global, "pseudo-ehr", &s)?;
    let (_, mut y) = ds.rows(split);
    if let Some(n) = s.limit {
        y.truncate(n);
    }
    let cfg = PseudoEhrConfig { delta: s.delta, missing_prob: s.missing_prob, always_missing, seed: global.seed };
    let records = dataset::pseudo_ehr(&y, &cfg);
    let mut w = create(&global.out_dir.join("pseudo_ehr.csv"))?;
    dataset::write_ehr_csv(&records, &mut w)?;
    w.flush()?;
    println!("{} records written", records.len());
    Ok(())
}
