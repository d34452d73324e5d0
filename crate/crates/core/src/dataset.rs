//! Uniform priors around the reference parameters, simulation-based dataset
//! generation, z-score statistics, persistence and EHR-style CSV records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ode::SolverConfig;
use crate::outputs::{add_noise, simulate_outputs, ClinicalOutput, NoiseModel, N_OUTPUTS, OUTPUT_NAMES};
use crate::parallel;
use crate::params::{param_kind, ParamKind, ParameterVector, N_PARAMS, PARAM_NAMES};

/// Reference split sizes; smaller datasets keep the same proportions.
pub const SPLIT_REFERENCE: [usize; 3] = [37_500, 12_500, 4_000];

/// Maximum tolerated simulator failure rate during generation.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Independent RNG stream for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorPreset {
    Structural,
    Ehr,
    Custom,
}

impl std::str::FromStr for PriorPreset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "structural" => Ok(Self::Structural),
            "ehr" => Ok(Self::Ehr),
            other => Err(CoreError::Parse(format!("unknown prior preset {other:?} (structural|ehr)"))),
        }
    }
}

/// Per-parameter bounds expressed as multiples of a centre vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub preset: PriorPreset,
    pub center: ParameterVector,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PriorBox {
    fn from_fn(preset: PriorPreset, f: impl Fn(usize) -> (f64, f64)) -> Self {
        let (lower, upper) = (0..N_PARAMS).map(f).unzip();
        Self { preset, center: ParameterVector::default(), lower, upper }
    }

    /// Capacitances ±50 %, everything else ±30 %.
    pub fn structural() -> Self {
        Self::from_fn(PriorPreset::Structural, |i| match param_kind(i) {
            ParamKind::Capacitance => (0.5, 1.5),
            _ => (0.7, 1.3),
        })
    }

    /// Heart rate −20 %/+60 %, capacitances and resistances −80 %/+60 %,
    /// everything else ±30 %.
    pub fn ehr() -> Self {
        Self::from_fn(PriorPreset::Ehr, |i| match param_kind(i) {
            ParamKind::HeartRate => (0.8, 1.6),
            ParamKind::Capacitance | ParamKind::Resistance => (0.2, 1.6),
            _ => (0.7, 1.3),
        })
    }

    pub fn from_preset(p: PriorPreset) -> Self {
        match p {
            PriorPreset::Ehr => Self::ehr(),
            _ => Self::structural(),
        }
    }

    /// Degenerate prior collapsed onto `center`.
    pub fn point(center: ParameterVector) -> Self {
        Self { preset: PriorPreset::Custom, center, lower: vec![1.0; N_PARAMS], upper: vec![1.0; N_PARAMS] }
    }

    /// Physical bounds `(lo, hi)` per parameter.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let c = self.center.to_array();
        (0..N_PARAMS)
            .map(|i| {
                let (a, b) = (self.lower[i] * c[i], self.upper[i] * c[i]);
                (a.min(b), a.max(b))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != N_PARAMS || self.upper.len() != N_PARAMS {
            return Err(CoreError::InvalidParameter("prior must have 23 bounds".into()));
        }
        for i in 0..N_PARAMS {
            if self.lower[i] > self.upper[i] {
                return Err(CoreError::InvalidParameter(format!("prior bounds inverted for {}", PARAM_NAMES[i])));
            }
            if self.lower[i] <= 0.0 && i != 1 {
                return Err(CoreError::InvalidParameter(format!(
                    "prior lower bound must keep {} positive",
                    PARAM_NAMES[i]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, v: &[f64; N_PARAMS], slack: f64) -> bool {
        self.bounds().iter().zip(v).all(|(&(lo, hi), &x)| {
            let w = (hi - lo).max(f64::EPSILON * hi.abs());
            x >= lo - slack * w && x <= hi + slack * w
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; N_PARAMS] {
        let b = self.bounds();
        std::array::from_fn(|i| {
            let u: f64 = rng.gen();
            b[i].0 + u * (b[i].1 - b[i].0)
        })
    }
}

/// `n` i.i.d. uniform draws; row `i` uses stream `i` of `seed`.
pub fn sample_prior(prior: &PriorBox, n: usize, seed: u64) -> Vec<[f64; N_PARAMS]> {
    (0..n).map(|i| prior.draw(&mut rng_for(seed, i as u64))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

/// Split sizes in the reference 37500:12500:4000 proportions.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let total: usize = SPLIT_REFERENCE.iter().sum();
    let train = (n as f64 * SPLIT_REFERENCE[0] as f64 / total as f64).round() as usize;
    let test = (n as f64 * SPLIT_REFERENCE[1] as f64 / total as f64).round() as usize;
    let train = train.min(n);
    let test = test.min(n - train);
    [train, test, n - train - test]
}

/// Column-wise z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits mean and (sample) standard deviation per column. Fails on a
    /// zero-variance column.
    pub fn fit<const D: usize>(rows: &[[f64; D]], names: &[&str]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(CoreError::Dataset("need at least two rows for statistics".into()));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..D).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..D)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect();
        let s = Self { names: names.iter().map(|s| s.to_string()).collect(), mean, std };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (j, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            let name = self.names.get(j).map(String::as_str).unwrap_or("?");
            if !m.is_finite() || !s.is_finite() {
                return Err(CoreError::Dataset(format!("non-finite statistics in column {name}")));
            }
            if s <= 0.0 {
                return Err(CoreError::Dataset(format!("column {name} has zero standard deviation")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(z, (m, s))| z * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub prior: PriorBox,
    pub seed: u64,
    pub solver: SolverConfig,
    pub n: usize,
    /// Simulations that failed and were replaced by a fresh draw.
    pub failures: usize,
    pub non_periodic: usize,
}

/// Stored statistics for inputs and outputs, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub v: NormStats,
    pub y: NormStats,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub v: Vec<[f64; N_PARAMS]>,
    pub y: Vec<[f64; N_OUTPUTS]>,
    pub split: Vec<Split>,
    pub stats: DatasetStats,
    pub meta: GenerationMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn indices(&self, s: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == s).collect()
    }

    pub fn rows(&self, s: Split) -> (Vec<[f64; N_PARAMS]>, Vec<[f64; N_OUTPUTS]>) {
        let idx = self.indices(s);
        (idx.iter().map(|&i| self.v[i]).collect(), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Assembles a dataset from rows, tagging the splits in order and
    /// fitting statistics on the training rows.
    pub fn from_rows(v: Vec<[f64; N_PARAMS]>, y: Vec<[f64; N_OUTPUTS]>, meta: GenerationMeta) -> Result<Self> {
        if v.len() != y.len() {
            return Err(CoreError::Dataset("input and output row counts differ".into()));
        }
        let [ntr, nte, _] = split_sizes(v.len());
        let split: Vec<Split> = (0..v.len())
            .map(|i| if i < ntr { Split::Train } else if i < ntr + nte { Split::Test } else { Split::Validation })
            .collect();
        let train_v: Vec<_> = v[..ntr].to_vec();
        let train_y: Vec<_> = y[..ntr].to_vec();
        let stats = DatasetStats { v: NormStats::fit(&train_v, &PARAM_NAMES)?, y: NormStats::fit(&train_y, &OUTPUT_NAMES)? };
        Ok(Self { v, y, split, stats, meta })
    }

    /// One CSV per split plus `metadata.json` holding statistics, prior,
    /// seed and solver settings.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in [Split::Train, Split::Test, Split::Validation] {
            let mut w = BufWriter::new(File::create(dir.join(format!("{}.csv", s.name())))?);
            writeln!(w, "{},{}", PARAM_NAMES.join(","), OUTPUT_NAMES.join(","))?;
            for i in self.indices(s) {
                let row: Vec<String> = self.v[i].iter().chain(self.y[i].iter()).map(|x| format!("{x}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            w.flush()?;
        }
        let meta = serde_json::json!({ "stats": self.stats, "generation": self.meta });
        std::fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
        let stats: DatasetStats = serde_json::from_value(meta["stats"].clone())?;
        let gen: GenerationMeta = serde_json::from_value(meta["generation"].clone())?;
        let (mut v, mut y, mut split) = (vec![], vec![], vec![]);
        for s in [Split::Train, Split::Test, Split::Validation] {
            let mut rdr = csv::Reader::from_path(dir.join(format!("{}.csv", s.name())))?;
            for (r, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let vals: Vec<f64> = rec
                    .iter()
                    .enumerate()
                    .map(|(c, f)| {
                        f.trim().parse().map_err(|_| CoreError::Parse(format!("{}.csv row {} col {}: {f:?}", s.name(), r + 2, c + 1)))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != N_PARAMS + N_OUTPUTS {
                    return Err(CoreError::Parse(format!("{}.csv row {}: expected 39 columns", s.name(), r + 2)));
                }
                v.push(std::array::from_fn(|j| vals[j]));
                y.push(std::array::from_fn(|j| vals[N_PARAMS + j]));
                split.push(s);
            }
        }
        Ok(Self { v, y, split, stats, meta: gen })
    }
}

/// Simulates `n` prior draws. A failed simulation is replaced by another
/// draw from the same row stream; generation aborts when more than 5 % of
/// the attempts fail.
pub fn generate(prior: &PriorBox, n: usize, cfg: &SolverConfig, seed: u64, workers: Option<usize>) -> Result<Dataset> {
    prior.validate()?;
    const MAX_ATTEMPTS: usize = 50;
    let rows = parallel::with_workers(workers, || {
        parallel::par_map_range(n, |i| {
            let mut rng = rng_for(seed, i as u64);
            let mut failures = 0;
            for _ in 0..MAX_ATTEMPTS {
                let v = prior.draw(&mut rng);
                let pv = ParameterVector::from_array(&v);
                match simulate_outputs(&pv, cfg) {
                    Ok(ex) if ex.output.values.iter().all(|x| x.is_finite()) => {
                        return Ok((v, ex.output.values, failures, ex.non_periodic));
                    }
                    Ok(_) => failures += 1,
                    Err(e) => {
                        log::debug!("row {i}: simulation failed: {e}");
                        failures += 1;
                    }
                }
            }
            Err(CoreError::Dataset(format!("row {i}: {MAX_ATTEMPTS} consecutive simulation failures")))
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let failures: usize = rows.iter().map(|r| r.2).sum();
    let non_periodic = rows.iter().filter(|r| r.3).count();
    let rate = failures as f64 / (n + failures).max(1) as f64;
    if rate > MAX_FAILURE_RATE {
        return Err(CoreError::Dataset(format!(
            "simulator failure rate {:.1}% ({failures} of {} attempts) exceeds {:.0}%",
            100.0 * rate,
            n + failures,
            100.0 * MAX_FAILURE_RATE
        )));
    }
    if failures > 0 {
        log::info!("{failures} failed simulations were resampled");
    }
    let meta = GenerationMeta { prior: prior.clone(), seed, solver: *cfg, n, failures, non_periodic };
    let (v, y): (Vec<_>, Vec<_>) = rows.into_iter().map(|r| (r.0, r.1)).unzip();
    Dataset::from_rows(v, y, meta)
}

/// One patient row of an EHR-style table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrRecord {
    pub id: String,
    pub y: ClinicalOutput,
}

impl EhrRecord {
    pub fn n_present(&self) -> usize {
        self.y.n_present()
    }
}

const ID_COLUMNS: [&str; 3] = ["id", "patient_id", "patient"];

/// Reads an EHR CSV: an optional id column plus any subset of the output
/// columns, blanks meaning missing. Unknown columns are an error unless
/// `ignore_unknown` is set, in which case they are skipped with a warning.
pub fn load_ehr_csv(path: &Path, ignore_unknown: bool) -> Result<Vec<EhrRecord>> {
    let f = File::open(path)?;
    read_ehr_csv(BufReader::new(f), ignore_unknown)
}

pub fn read_ehr_csv<R: BufRead>(reader: R, ignore_unknown: bool) -> Result<Vec<EhrRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut id_col = None;
    let mut map = vec![None; header.len()];
    for (c, name) in header.iter().enumerate() {
        let name = name.trim();
        if ID_COLUMNS.iter().any(|n| n.eq_ignore_ascii_case(name)) {
            id_col = Some(c);
        } else if let Some(k) = crate::outputs::output_index(name) {
            map[c] = Some(k);
        } else if ignore_unknown {
            log::warn!("ignoring unknown EHR column {name:?}");
        } else {
            return Err(CoreError::Parse(format!("unknown EHR column {name:?}")));
        }
    }
    let mut out = vec![];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut y = ClinicalOutput { values: [f64::NAN; N_OUTPUTS], present: [false; N_OUTPUTS] };
        for (c, field) in rec.iter().enumerate() {
            let Some(k) = map[c] else { continue };
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            y.values[k] = field.parse().map_err(|_| {
                CoreError::Parse(format!("row {} column {} ({}): cannot parse {field:?}", r + 2, c + 1, OUTPUT_NAMES[k]))
            })?;
            y.present[k] = true;
        }
        let id = id_col.map(|c| rec.get(c).unwrap_or("").to_string()).unwrap_or_else(|| format!("{}", r + 1));
        out.push(EhrRecord { id, y });
    }
    Ok(out)
}

pub fn write_ehr_csv<W: Write>(records: &[EhrRecord], mut w: W) -> Result<()> {
    writeln!(w, "id,{}", OUTPUT_NAMES.join(","))?;
    for r in records {
        writeln!(w, "{},{}", r.id, r.y.to_csv_row())?;
    }
    Ok(())
}

/// Records with strictly more than `min` present components.
pub fn filter_min_present(records: &[EhrRecord], min: usize) -> Vec<EhrRecord> {
    records.iter().filter(|r| r.n_present() > min).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEhrConfig {
    pub delta: f64,
    /// Probability that each component is independently missing.
    pub missing_prob: f64,
    /// Components that are never recorded.
    pub always_missing: Vec<usize>,
    pub seed: u64,
}

impl Default for PseudoEhrConfig {
    fn default() -> Self {
        Self { delta: 1.0, missing_prob: 0.15, always_missing: vec![crate::outputs::idx::VL_SYS], seed: 0 }
    }
}

/// Noisy, partially observed records built from simulated outputs.
pub fn pseudo_ehr(y: &[[f64; N_OUTPUTS]], cfg: &PseudoEhrConfig) -> Vec<EhrRecord> {
    let noise = NoiseModel::new(cfg.delta);
    y.iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut rng = rng_for(cfg.seed, i as u64);
            let mut rec = add_noise(&ClinicalOutput::complete(*yi), &noise, &mut rng);
            for k in 0..N_OUTPUTS {
                let u: f64 = rng.gen();
                if u < cfg.missing_prob || cfg.always_missing.contains(&k) {
                    rec.present[k] = false;
                    rec.values[k] = f64::NAN;
                }
            }
            EhrRecord { id: format!("P{:05}", i + 1), y: rec }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        assert_eq!(split_sizes(54_000), [37_500, 12_500, 4_000]);
        assert_eq!(split_sizes(10_000), [6944, 2315, 741]);
        let s = split_sizes(8);
        assert_eq!(s.iter().sum::<usize>(), 8);
    }

    #[test]
    fn zero_width_prior_gives_defaults() {
        let rows = sample_prior(&PriorBox::point(ParameterVector::default()), 5, 1);
        for r in rows {
            assert_eq!(r, ParameterVector::default().to_array());
        }
    }

    #[test]
    fn structural_prior_bounds() {
        let rows = sample_prior(&PriorBox::structural(), 100_000, 3);
        let ca: Vec<f64> = rows.iter().map(|r| r[5]).collect();
        let lo = ca.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ca.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo / 0.6e-3 - 1.0).abs() < 0.01 && lo >= 0.6e-3);
        assert!((hi / 1.8e-3 - 1.0).abs() < 0.01 && hi <= 1.8e-3);
    }

    #[test]
    fn ehr_prior_heart_rate_range() {
        let rows = sample_prior(&PriorBox::ehr(), 100_000, 4);
        let lo = rows.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!((lo / 57.6 - 1.0).abs() < 0.01);
        assert!((hi / 115.2 - 1.0).abs() < 0.01);
    }

    #[test]
    fn prior_keeps_pth_ordered() {
        let b = PriorBox::structural().bounds();
        assert!(b[1].0 < b[1].1 && b[1].1 < 0.0);
    }

    #[test]
    fn normalization_round_trip() {
        let rows: Vec<[f64; 3]> = (0..50).map(|i| [i as f64, (i * i) as f64, -(i as f64) * 0.5 + 3.0]).collect();
        let s = NormStats::fit(&rows, &["a", "b", "c"]).unwrap();
        let z = s.normalize(&s.mean);
        assert!(z.iter().all(|x| x.abs() < 1e-15));
        for r in &rows {
            let back = s.denormalize(&s.normalize(r));
            for j in 0..3 {
                assert!((back[j] - r[j]).abs() < 1e-12);
            }
        }
        let flat: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 1.0]).collect();
        let err = NormStats::fit(&flat, &["x", "const"]).unwrap_err().to_string();
        assert!(err.contains("const"), "{err}");
    }

    #[test]
    fn ehr_filter_and_blank_rows() {
        let csv = "id,Hr,Pa_sys,Pa_dia,Pr_sys,Pr_dia,Ppa_sys,Ppa_dia,Pr_edp,Pw,Pcvp,Vl_sys,Vl_dia,LVEF,CO,SVR,PVR\n\
                   a,,,,,,,,,,,,,,,,\n\
                   b,70,120,80,25,2,25,10,4,9,5,,,0.6,,,\n";
        let recs = read_ehr_csv(csv.as_bytes(), false).unwrap();
        assert_eq!(recs[0].n_present(), 0);
        assert_eq!(recs[1].n_present(), 11);
        let kept = filter_min_present(&recs, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");
    }

    #[test]
    fn ehr_rejects_unknown_and_bad_cells() {
        assert!(read_ehr_csv("id,Hr,Foo\n1,70,3\n".as_bytes(), false).is_err());
        assert!(read_ehr_csv("id,Hr,Foo\n1,70,3\n".as_bytes(), true).is_ok());
        let err = read_ehr_csv("id,Hr\n1,abc\n".as_bytes(), false).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }
}
