//! Normalized matrices for training, plus per-epoch label noise.

use cvsim_core::dataset::{Dataset, NormStats, Split};
use cvsim_core::outputs::OUTPUT_STD;
use cvsim_core::{N_OUTPUTS, N_PARAMS};
use invaert_nn::Tensor2D;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{InvaertError, Result};

#[derive(Debug, Clone)]
pub struct SplitData {
    pub v: Tensor2D,
    pub y: Tensor2D,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.v.rows
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows == 0
    }
}

/// Z-scored train/test/validation matrices and the statistics used.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: SplitData,
    pub test: SplitData,
    pub validation: SplitData,
    pub v_stats: NormStats,
    pub y_stats: NormStats,
    /// Reference output noise standard deviations in normalized units (δ = 1).
    pub noise_std: Vec<f64>,
}

fn normalize_rows<const D: usize>(rows: &[[f64; D]], stats: &NormStats) -> Tensor2D {
    let mut t = Tensor2D::zeros(rows.len(), D);
    for (i, r) in rows.iter().enumerate() {
        t.row_mut(i).copy_from_slice(&stats.normalize(r));
    }
    t
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let split = |s: Split| {
            let (v, y) = ds.rows(s);
            SplitData { v: normalize_rows(&v, &ds.stats.v), y: normalize_rows(&y, &ds.stats.y) }
        };
        Self::from_parts(split(Split::Train), split(Split::Test), split(Split::Validation), ds.stats.v.clone(), ds.stats.y.clone())
    }

    /// Builds from already-normalized matrices (used by toy problems whose
    /// dimensions differ from the circulation model).
    pub fn from_parts(train: SplitData, test: SplitData, validation: SplitData, v_stats: NormStats, y_stats: NormStats) -> Result<Self> {
        if train.is_empty() {
            return Err(InvaertError::Input("training split is empty".into()));
        }
        for (name, s) in [("train", &train), ("test", &test), ("validation", &validation)] {
            if s.v.rows != s.y.rows || s.v.cols != v_stats.dim() || s.y.cols != y_stats.dim() {
                return Err(InvaertError::Input(format!("{name} split shape does not match the statistics")));
            }
        }
        let noise_std = if y_stats.dim() == N_OUTPUTS {
            OUTPUT_STD.iter().zip(&y_stats.std).map(|(s, sd)| s / sd).collect()
        } else {
            vec![0.0; y_stats.dim()]
        };
        Ok(Self { train, test, validation, v_stats, y_stats, noise_std })
    }

    pub fn v_dim(&self) -> usize {
        self.v_stats.dim()
    }

    pub fn y_dim(&self) -> usize {
        self.y_stats.dim()
    }

    /// Overrides the normalized noise scale (toy problems).
    pub fn with_noise_std(mut self, s: Vec<f64>) -> Self {
        self.noise_std = s;
        self
    }
}

/// `y + δ·s⊙ε` with a fresh standard-normal `ε` per entry.
pub fn noisy_labels<R: Rng + ?Sized>(y: &Tensor2D, noise_std: &[f64], delta: f64, rng: &mut R) -> Tensor2D {
    if delta == 0.0 {
        return y.clone();
    }
    let mut out = y.clone();
    for i in 0..out.rows {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v += delta * noise_std[j] * e;
        }
    }
    out
}

pub fn normalize_params(rows: &[[f64; N_PARAMS]], stats: &NormStats) -> Tensor2D {
    normalize_rows(rows, stats)
}

pub fn normalize_outputs(rows: &[[f64; N_OUTPUTS]], stats: &NormStats) -> Tensor2D {
    normalize_rows(rows, stats)
}

pub fn denormalize<const D: usize>(t: &Tensor2D, stats: &NormStats) -> Vec<[f64; D]> {
    (0..t.rows)
        .map(|i| {
            let d = stats.denormalize(t.row(i));
            std::array::from_fn(|j| d[j])
        })
        .collect()
}
