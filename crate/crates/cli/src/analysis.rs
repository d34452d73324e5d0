//! Commands built on trained bundles: train, invert, impute, manifold and
//! ehr-report.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use cvsim_core::dataset::load_ehr_csv;
use cvsim_core::{ClinicalOutput, SolverConfig, N_OUTPUTS, OUTPUT_NAMES};
use invaert::ehr::{ehr_error_report, ehr_predict, write_error_table, write_patient_predictions, EhrOptions};
use invaert::invert::ReconSource;
use invaert::train::{new_emulator, new_flow, new_vae};
use invaert::{ModelBundle, Reconstruction, TrainReport, TrainingConfig, TrainingData, REFERENCE_OUTPUT};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::settings::{create, prepare_out_dir, read_json, require_file, resolve, usage, write_json, Global};
use crate::simulation::{load_dataset, SolverArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainModule {
    Emulator,
    Flow,
    Vaed,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Network to train.
    #[arg(value_enum)]
    pub module: TrainModule,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Hyperparameter preset (synthetic|ehr).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Existing bundle to extend; its other networks are kept.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emulator_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae_epochs: Option<usize>,
    /// Label noise scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub module: TrainModule,
    pub data: Option<PathBuf>,
    pub preset: String,
    pub bundle: Option<PathBuf>,
    pub emulator_epochs: Option<usize>,
    pub flow_epochs: Option<usize>,
    pub vae_epochs: Option<usize>,
    pub delta: Option<f64>,
    /// Full training configuration; replaces the preset when given.
    pub training: Option<TrainingConfig>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            module: TrainModule::All,
            data: None,
            preset: "synthetic".into(),
            bundle: None,
            emulator_epochs: None,
            flow_epochs: None,
            vae_epochs: None,
            delta: None,
            training: None,
        }
    }
}

impl TrainSettings {
    fn training_config(&self, seed: u64) -> anyhow::Result<TrainingConfig> {
        let mut cfg = match &self.training {
            Some(c) => c.clone(),
            None => TrainingConfig::from_preset(&self.preset)?,
        };
        if let Some(e) = self.emulator_epochs {
            cfg.emulator = cfg.emulator.scaled_to(e);
        }
        if let Some(e) = self.flow_epochs {
            cfg.flow = cfg.flow.scaled_to(e);
        }
        if let Some(e) = self.vae_epochs {
            cfg.vae = cfg.vae.scaled_to(e);
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_bundle(path: &Path) -> anyhow::Result<ModelBundle> {
    require_file(path, "bundle")?;
    Ok(ModelBundle::load(path)?)
}

fn write_report(out: &Path, r: &TrainReport) -> anyhow::Result<()> {
    let mut w = create(&out.join(format!("{}_curve.csv", r.module)))?;
    r.write_curve_csv(&mut w)?;
    w.flush()?;
    println!(
        "{}: {} epochs, best test loss {:.4e} at epoch {}{}{}",
        r.module,
        r.epochs_run,
        r.best_test,
        r.best_epoch,
        if r.stopped_early { " (stopped early)" } else { "" },
        if r.aborted { " (aborted on non-finite loss)" } else { "" }
    );
    Ok(())
}

pub fn train(args: &TrainArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: TrainSettings = resolve(section, args, "train")?;
    let cfg = s.training_config(global.seed)?;
    let ds = load_dataset(&s.data)?;
    let data = TrainingData::from_dataset(&ds)?;
    let mut bundle = match &s.bundle {
        Some(p) => {
            let b = load_bundle(p)?;
            if b.v_stats != data.v_stats || b.y_stats != data.y_stats {
                return Err(usage(format!("bundle {} was trained on a different dataset", p.display())));
            }
            b
        }
        None => ModelBundle::new(cfg.clone(), ds.meta.prior.clone(), data.v_stats.clone(), data.y_stats.clone()),
    };
    prepare_out_dir(global, "train", &s)?;
    let (vd, yd) = (data.v_dim(), data.y_dim());
    let mut reports = vec![];
    if matches!(s.module, TrainModule::Emulator | TrainModule::All) {
        let mut emu = new_emulator(&cfg, vd, yd);
        reports.push(invaert::train_emulator(&data, &cfg, &mut emu)?);
        bundle.emulator = Some(emu);
    }
    if matches!(s.module, TrainModule::Flow | TrainModule::All) {
        let mut flow = new_flow(&cfg, yd);
        reports.push(invaert::train_flow(&data, &cfg, &mut flow)?);
        bundle.flow = Some(flow);
    }
    if matches!(s.module, TrainModule::Vaed | TrainModule::All) {
        let emu = bundle
            .emulator
            .clone()
            .ok_or_else(|| usage("training the inverse model needs a bundle with a trained emulator (--bundle)"))?;
        let mut pair = new_vae(&cfg, vd, yd);
        reports.push(invaert::train_vae_decoder(&data, &cfg, &emu, &mut pair)?);
        bundle.encoder = Some(pair.encoder);
        bundle.decoder = Some(pair.decoder);
    }
    bundle.config = cfg;
    let out = &global.out_dir;
    for r in &reports {
        write_report(out, r)?;
    }
    write_json(&out.join("train_report.json"), &reports)?;
    bundle.save(&out.join("bundle.json"))?;
    println!("bundle written to {}", out.join("bundle.json").display());
    Ok(())
}

/// Reads an output vector in JSON (object keyed by output name, nulls for
/// missing components).
fn load_target(path: &Option<PathBuf>) -> anyhow::Result<ClinicalOutput> {
    match path {
        None => Ok(ClinicalOutput::complete(REFERENCE_OUTPUT)),
        Some(p) => {
            let v = read_json(p, "output file")?;
            ClinicalOutput::from_json_value(&v).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn complete_target(path: &Option<PathBuf>) -> anyhow::Result<[f64; N_OUTPUTS]> {
    let y = load_target(path)?;
    if !y.is_complete() {
        let names: Vec<&str> = y.missing().iter().map(|&k| OUTPUT_NAMES[k]).collect();
        return Err(usage(format!("target is missing {}; use impute for partial outputs", names.join(", "))));
    }
    Ok(y.values)
}

fn reconstruction(simulator: bool, solver: &SolverConfig) -> Reconstruction {
    if simulator {
        Reconstruction::Simulator(*solver)
    } else {
        Reconstruction::Emulator
    }
}

fn require_bundle(path: &Option<PathBuf>) -> anyhow::Result<ModelBundle> {
    load_bundle(path.as_ref().ok_or_else(|| usage("--bundle <file> is required"))?)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InvertArgs {
    /// Trained bundle.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    /// Complete output vector as a JSON object (default: the built-in reference output).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<PathBuf>,
    /// Latent draws.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nw: Option<usize>,
    /// Reconstruct outputs with the simulator instead of the emulator.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulator: Option<bool>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSettings {
    pub bundle: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub nw: usize,
    pub simulator: bool,
    pub solver: SolverConfig,
}

impl Default for InvertSettings {
    fn default() -> Self {
        Self { bundle: None, y: None, nw: 100, simulator: false, solver: SolverConfig::default() }
    }
}

fn source_counts(src: &[ReconSource]) -> Value {
    let count = |s: ReconSource| src.iter().filter(|&&x| x == s).count();
    json!({
        "emulator": count(ReconSource::Emulator),
        "simulator": count(ReconSource::Simulator),
        "emulator_fallback": count(ReconSource::EmulatorFallback),
    })
}

pub fn invert(args: &InvertArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: InvertSettings = resolve(section, args, "invert")?;
    if s.nw == 0 {
        return Err(usage("nw must be positive"));
    }
    s.solver.validate()?;
    let bundle = require_bundle(&s.bundle)?;
    let y = complete_target(&s.y)?;
    prepare_out_dir(global, "invert", &s)?;
    let res = invaert::invert(&bundle, &y, s.nw, global.seed, &reconstruction(s.simulator, &s.solver))?;
    let out = &global.out_dir;
    let mut w = create(&out.join("inversion.csv"))?;
    res.write_csv(&mut w)?;
    w.flush()?;
    let abs = res.abs_errors();
    let mean_abs: Vec<f64> = (0..N_OUTPUTS).map(|k| abs.iter().map(|a| a[k]).sum::<f64>() / abs.len() as f64).collect();
    let rel = res.relative_errors();
    let max_rel = res.max_relative_error();
    write_json(
        &out.join("inversion.json"),
        &json!({
            "n_draws": res.len(),
            "max_relative_error": max_rel,
            "mean_relative_error": rel.iter().sum::<f64>() / rel.len() as f64,
            "mean_abs_error": OUTPUT_NAMES.iter().zip(&mean_abs).map(|(n, e)| (n.to_string(), json!(e))).collect::<serde_json::Map<_, _>>(),
            "out_of_range": res.out_of_range.iter().filter(|&&b| b).count(),
            "sources": source_counts(&res.source),
        }),
    )?;
    println!("{} draws, max relative error {:.4}%", res.len(), 100.0 * max_rel);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImputeArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    /// Output vector as a JSON object; nulls or absent keys are missing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<PathBuf>,
    /// Additional components to treat as missing (repeatable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop: Option<Vec<String>>,
    /// Flow samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Completions kept.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    /// Latent draws per completion.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nw: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulator: Option<bool>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeSettings {
    pub bundle: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub drop: Vec<String>,
    pub m: usize,
    pub top_k: usize,
    pub nw: usize,
    pub simulator: bool,
    pub solver: SolverConfig,
}

impl Default for ImputeSettings {
    fn default() -> Self {
        Self { bundle: None, y: None, drop: vec![], m: 10_000, top_k: 4, nw: 5, simulator: false, solver: SolverConfig::default() }
    }
}

pub fn impute(args: &ImputeArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: ImputeSettings = resolve(section, args, "impute")?;
    s.solver.validate()?;
    let bundle = require_bundle(&s.bundle)?;
    let drop = s
        .drop
        .iter()
        .map(|n| cvsim_core::outputs::output_index(n).ok_or_else(|| usage(format!("unknown output {n:?}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let y = load_target(&s.y)?.with_missing(&drop);
    prepare_out_dir(global, "impute", &s)?;
    let res = invaert::impute(&bundle, &y, s.m, s.top_k, s.nw, global.seed, &reconstruction(s.simulator, &s.solver))?;
    let out = &global.out_dir;
    let mut w = create(&out.join("imputation_candidates.csv"))?;
    writeln!(w, "rank,sample,log_prob,{}", OUTPUT_NAMES.join(","))?;
    for (r, c) in res.top.iter().enumerate() {
        let vals: Vec<String> = c.y.iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{r},{},{:e},{}", c.index, c.log_prob, vals.join(","))?;
    }
    w.flush()?;
    for (r, inv) in res.inversions.iter().enumerate() {
        let mut w = create(&out.join(format!("imputation_draws_{r}.csv")))?;
        inv.write_csv(&mut w)?;
        w.flush()?;
    }
    let errs = res.observed_relative_errors();
    let max_obs = errs.iter().copied().fold(0.0, f64::max);
    write_json(
        &out.join("imputation.json"),
        &json!({
            "missing": res.missing.iter().map(|&k| OUTPUT_NAMES[k]).collect::<Vec<_>>(),
            "flow_samples": res.n_samples,
            "log_probs": res.top.iter().map(|c| c.log_prob).collect::<Vec<_>>(),
            "max_observed_relative_error": max_obs,
        }),
    )?;
    println!("{} completions, max relative error on observed components {:.4}%", res.top.len(), 100.0 * max_obs);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ManifoldArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    /// Complete output vector as a JSON object (default: the built-in reference output).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<PathBuf>,
    /// Decoded points.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSettings {
    pub bundle: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub k: usize,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        Self { bundle: None, y: None, k: 5000 }
    }
}

pub fn manifold(args: &ManifoldArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: ManifoldSettings = resolve(section, args, "manifold")?;
    let bundle = require_bundle(&s.bundle)?;
    let y = complete_target(&s.y)?;
    prepare_out_dir(global, "manifold", &s)?;
    let m = invaert::manifold(&bundle, &y, s.k, global.seed)?;
    let out = &global.out_dir;
    let mut w = create(&out.join("manifold_points.csv"))?;
    m.write_parallel_coordinates(&bundle.prior, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("manifold_spectrum.csv"))?;
    m.write_spectrum(&mut w)?;
    w.flush()?;
    println!("CE(12) = {:.4}", m.cumulative_energy[11]);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EhrReportArgs {
    /// Trained bundles, one error column each (repeatable).
    #[arg(long = "bundle")]
    #[serde(rename = "bundles", skip_serializing_if = "Option::is_none")]
    pub bundles: Option<Vec<PathBuf>>,
    /// Patient table: optional id column plus output columns, blanks for missing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
    /// Skip unrecognized columns instead of failing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_unknown: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nw: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Records need strictly more present components than this.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_present: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EhrReportSettings {
    pub bundles: Vec<PathBuf>,
    pub records: Option<PathBuf>,
    pub ignore_unknown: bool,
    pub nw: usize,
    pub top_k: usize,
    pub m: usize,
    pub min_present: usize,
}

impl Default for EhrReportSettings {
    fn default() -> Self {
        let o = EhrOptions::default();
        Self { bundles: vec![], records: None, ignore_unknown: false, nw: o.n_w, top_k: o.top_k, m: o.m, min_present: o.min_present }
    }
}

pub fn ehr_report(args: &EhrReportArgs, global: &Global, section: Option<&Value>) -> anyhow::Result<()> {
    let s: EhrReportSettings = resolve(section, args, "ehr-report")?;
    if s.bundles.is_empty() {
        return Err(usage("at least one --bundle is required"));
    }
    let path = s.records.as_ref().ok_or_else(|| usage("--records <csv> is required"))?;
    require_file(path, "records file")?;
    let records = load_ehr_csv(path, s.ignore_unknown)?;
    let bundles = s.bundles.iter().map(|p| load_bundle(p)).collect::<anyhow::Result<Vec<_>>>()?;
    prepare_out_dir(global, "ehr-report", &s)?;
    let opts = EhrOptions { n_w: s.nw, top_k: s.top_k, m: s.m, min_present: s.min_present, seed: global.seed };
    let out = &global.out_dir;
    let mut reports = Vec::with_capacity(bundles.len());
    for (i, b) in bundles.iter().enumerate() {
        let preds = ehr_predict(b, &records, &opts)?;
        let mut w = create(&out.join(format!("ehr_predictions_{i}.csv")))?;
        write_patient_predictions(&preds, &mut w)?;
        w.flush()?;
        reports.push(ehr_error_report(&preds, b.config.delta));
        log::info!("bundle {} done ({} patients)", s.bundles[i].display(), preds.len());
    }
    let mut w = create(&out.join("ehr_errors.csv"))?;
    write_error_table(&reports, &mut w)?;
    w.flush()?;
    write_json(&out.join("ehr_report.json"), &reports)?;
    println!("{} of {} records used", reports[0].n_patients, records.len());
    Ok(())
}
