//! Real-NVP flow. The generative direction maps base samples `z` to data `y`
//! block by block: affine coupling, then (optionally) the inverse of a batch
//! normalization layer. The density direction runs the exact inverse.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mlp::{Activation, Mlp};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2D;
use crate::{Module, NnError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// Hidden layers per coupling subnet.
    pub depth: usize,
    pub batch_norm: bool,
}

impl FlowConfig {
    pub fn new(dim: usize, blocks: usize, hidden: usize, depth: usize, batch_norm: bool) -> Self {
        Self { dim, blocks, hidden, depth, batch_norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub log_gamma: Tensor2D,
    pub beta: Tensor2D,
    pub running_mean: Tensor2D,
    pub running_var: Tensor2D,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            log_gamma: Tensor2D::zeros(1, dim),
            beta: Tensor2D::zeros(1, dim),
            running_mean: Tensor2D::zeros(1, dim),
            running_var: Tensor2D::full(1, dim, 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Log-determinant of the normalizing direction under the running statistics.
    fn eval_logdet(&self) -> f64 {
        self.log_gamma.data.iter().zip(&self.running_var.data).map(|(lg, v)| lg - 0.5 * (v + self.eps).ln()).sum()
    }

    /// Normalizing direction with running statistics.
    fn normalize(&self, x: &mut Tensor2D) {
        for i in 0..x.rows {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                let sd = (self.running_var.data[j] + self.eps).sqrt();
                *v = (*v - self.running_mean.data[j]) / sd * self.log_gamma.data[j].exp() + self.beta.data[j];
            }
        }
    }

    fn denormalize(&self, x: &mut Tensor2D) {
        for i in 0..x.rows {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                let sd = (self.running_var.data[j] + self.eps).sqrt();
                *v = (*v - self.beta.data[j]) * (-self.log_gamma.data[j]).exp() * sd + self.running_mean.data[j];
            }
        }
    }

    fn update_running(&mut self, mean: &[f64], var_biased: &[f64], n: usize) {
        let m = self.momentum;
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for j in 0..mean.len() {
            self.running_mean.data[j] = (1.0 - m) * self.running_mean.data[j] + m * mean[j];
            self.running_var.data[j] = (1.0 - m) * self.running_var.data[j] + m * var_biased[j] * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingBlock {
    /// Components passed through unchanged and fed to the subnets.
    pub fixed: Vec<usize>,
    /// Components transformed affinely.
    pub rest: Vec<usize>,
    pub s: Mlp,
    pub t: Mlp,
    pub bn: Option<BatchNorm>,
}

impl CouplingBlock {
    /// Number of parameter tensors, in [`Module::params`] order.
    fn n_tensors(&self) -> usize {
        self.s.layers.len() * 2 + self.t.layers.len() * 2 + if self.bn.is_some() { 2 } else { 0 }
    }

    /// Coupling map `rest ← rest·exp(s) + t` (or its inverse) with per-row
    /// log-determinant added into `logdet`.
    fn couple(&self, x: &mut Tensor2D, logdet: &mut [f64], inverse: bool) -> Result<()> {
        let xa = x.select_cols(&self.fixed);
        let s = self.s.forward(&xa)?;
        let t = self.t.forward(&xa)?;
        for i in 0..x.rows {
            let mut ld = 0.0;
            for (k, &j) in self.rest.iter().enumerate() {
                let (sk, tk) = (s.get(i, k), t.get(i, k));
                let v = x.get(i, j);
                x.set(i, j, if inverse { (v - tk) * (-sk).exp() } else { v * sk.exp() + tk });
                ld += sk;
            }
            logdet[i] += if inverse { -ld } else { ld };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealNvp {
    pub config: FlowConfig,
    pub blocks: Vec<CouplingBlock>,
}

fn check_logdet(logdet: &[f64]) -> Result<()> {
    match logdet.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(NnError::NonFinite(format!("flow log-determinant at row {i}"))),
        None => Ok(()),
    }
}

impl RealNvp {
    /// Block `k` keeps the components whose index parity equals `k mod 2` and
    /// transforms the others. Final subnet layers start at zero, so the
    /// initial flow is the identity.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let blocks = (0..config.blocks)
            .map(|k| {
                let (fixed, rest): (Vec<usize>, Vec<usize>) = (0..d).partition(|i| i % 2 == k % 2);
                let widths = |n_in: usize, n_out: usize| {
                    let mut w = vec![n_in];
                    w.extend(std::iter::repeat(config.hidden).take(config.depth));
                    w.push(n_out);
                    w
                };
                let mut s = Mlp::new(&widths(fixed.len(), rest.len()), Activation::Relu, Activation::Tanh, rng);
                let mut t = Mlp::new(&widths(fixed.len(), rest.len()), Activation::Relu, Activation::Identity, rng);
                s.zero_last();
                t.zero_last();
                let bn = config.batch_norm.then(|| BatchNorm::new(d));
                CouplingBlock { fixed, rest, s, t, bn }
            })
            .collect();
        Self { config, blocks }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols != self.dim() {
            return Err(NnError::Shape(format!("flow of dim {} given {} columns", self.dim(), x.cols)));
        }
        Ok(())
    }

    /// Generative direction `z → y` with per-row `log|det ∂y/∂z|`.
    pub fn forward(&self, z: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
        self.check_input(z)?;
        let mut x = z.clone();
        let mut logdet = vec![0.0; x.rows];
        for b in &self.blocks {
            b.couple(&mut x, &mut logdet, false)?;
            if let Some(bn) = &b.bn {
                bn.denormalize(&mut x);
                let l = bn.eval_logdet();
                logdet.iter_mut().for_each(|v| *v -= l);
            }
        }
        check_logdet(&logdet)?;
        Ok((x, logdet))
    }

    /// Density direction `y → z` with per-row `log|det ∂z/∂y|`.
    pub fn inverse(&self, y: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
        self.check_input(y)?;
        let mut x = y.clone();
        let mut logdet = vec![0.0; x.rows];
        for b in self.blocks.iter().rev() {
            if let Some(bn) = &b.bn {
                bn.normalize(&mut x);
                let l = bn.eval_logdet();
                logdet.iter_mut().for_each(|v| *v += l);
            }
            b.couple(&mut x, &mut logdet, true)?;
        }
        check_logdet(&logdet)?;
        Ok((x, logdet))
    }

    /// Per-row log-density of `y`.
    pub fn log_prob(&self, y: &Tensor2D) -> Result<Vec<f64>> {
        let (z, logdet) = self.inverse(y)?;
        Ok((0..z.rows)
            .map(|i| standard_normal_logpdf(z.row(i)) + logdet[i])
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor2D> {
        let d = self.dim();
        let z = Tensor2D { rows: n, cols: d, data: (0..n * d).map(|_| rng.sample(StandardNormal)).collect() };
        Ok(self.forward(&z)?.0)
    }

    /// Differentiable mean log-density of the rows of `y`. In training mode the
    /// batch-norm layers normalize with batch statistics and update their
    /// running averages.
    pub fn mean_log_prob_tape(&mut self, tape: &mut Tape, vars: &[Var], y: Var, train: bool) -> Result<Var> {
        if tape.value(y).cols != self.dim() {
            return Err(NnError::Shape(format!("flow of dim {} given {} columns", self.dim(), tape.value(y).cols)));
        }
        let n = tape.value(y).rows;
        let d = self.dim();
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in &self.blocks {
            offsets.push(off);
            off += b.n_tensors();
        }
        let mut x = y;
        // Scalar contributions shared by every row, and per-row coupling terms.
        let mut shared: Option<Var> = None;
        let mut per_row: Option<Var> = None;
        for (bi, b) in self.blocks.iter_mut().enumerate().rev() {
            let o = offsets[bi];
            let ns = b.s.params().len();
            let nt = b.t.params().len();
            let (sv, tv) = (&vars[o..o + ns], &vars[o + ns..o + ns + nt]);
            if let Some(bn) = &mut b.bn {
                let (lg, beta) = (vars[o + ns + nt], vars[o + ns + nt + 1]);
                let (mean, var) = if train {
                    let mean = tape.mean_rows(x);
                    let neg = tape.scale(mean, -1.0);
                    let xc = tape.add_row(x, neg)?;
                    let sq = tape.square(xc);
                    let var = tape.mean_rows(sq);
                    bn.update_running(&tape.value(mean).data.clone(), &tape.value(var).data.clone(), n);
                    (neg, var)
                } else {
                    let neg = tape.constant(&bn.running_mean.map(|m| -m));
                    (neg, tape.constant(&bn.running_var))
                };
                let xc = tape.add_row(x, mean)?;
                let ve = tape.add_scalar(var, bn.eps);
                let inv_sd = tape.powf(ve, -0.5);
                let xn = tape.mul_row(xc, inv_sd)?;
                let g = tape.exp(lg);
                let xs = tape.mul_row(xn, g)?;
                x = tape.add_row(xs, beta)?;
                let log_ve = tape.log(ve);
                let half = tape.scale(log_ve, -0.5);
                let l = tape.add(lg, half)?;
                let l = tape.sum_all(l);
                shared = Some(match shared {
                    Some(s) => tape.add(s, l)?,
                    None => l,
                });
            }
            let xa = tape.select_cols(x, &b.fixed);
            let xb = tape.select_cols(x, &b.rest);
            let s = b.s.forward_tape(tape, sv, xa)?;
            let t = b.t.forward_tape(tape, tv, xa)?;
            let diff = tape.sub(xb, t)?;
            let neg_s = tape.scale(s, -1.0);
            let e = tape.exp(neg_s);
            let zb = tape.mul(diff, e)?;
            x = tape.merge_cols(&[(xa, &b.fixed), (zb, &b.rest)], d)?;
            let ld = tape.sum_cols(neg_s);
            per_row = Some(match per_row {
                Some(p) => tape.add(p, ld)?,
                None => ld,
            });
        }
        // log π0(z) = −½‖z‖² − ½d·ln 2π
        let sq = tape.square(x);
        let sq = tape.sum_cols(sq);
        let mut lp = tape.scale(sq, -0.5);
        if let Some(p) = per_row {
            lp = tape.add(lp, p)?;
        }
        let mean = tape.mean_all(lp);
        let mut out = tape.add_scalar(mean, -0.5 * d as f64 * LN_2PI);
        if let Some(s) = shared {
            out = tape.add(out, s)?;
        }
        if !tape.value(out).is_finite() {
            return Err(NnError::NonFinite("flow log-likelihood".into()));
        }
        Ok(out)
    }
}

pub fn standard_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

impl Module for RealNvp {
    fn params(&self) -> Vec<&Tensor2D> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend(b.s.params());
            p.extend(b.t.params());
            if let Some(bn) = &b.bn {
                p.push(&bn.log_gamma);
                p.push(&bn.beta);
            }
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.extend(b.s.params_mut());
            p.extend(b.t.params_mut());
            if let Some(bn) = &mut b.bn {
                p.push(&mut bn.log_gamma);
                p.push(&mut bn.beta);
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn masks_alternate() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let f = RealNvp::new(FlowConfig::new(5, 3, 4, 2, false), &mut rng);
        assert_eq!(f.blocks[0].fixed, vec![0, 2, 4]);
        assert_eq!(f.blocks[1].fixed, vec![1, 3]);
        assert_eq!(f.blocks[2].fixed, f.blocks[0].fixed);
    }

    #[test]
    fn identity_at_init() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let f = RealNvp::new(FlowConfig::new(4, 4, 8, 3, false), &mut rng);
        let z = Tensor2D::from_vec(2, 4, vec![0.1, -0.4, 2.0, 0.3, 1.0, 1.0, -1.0, 0.0]).unwrap();
        let (y, ld) = f.forward(&z).unwrap();
        assert_eq!(y, z);
        assert!(ld.iter().all(|&v| v == 0.0));
    }
}
