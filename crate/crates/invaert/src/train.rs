//! The three optimization problems: emulator regression, flow maximum
//! likelihood, and the joint encoder/decoder objective with KL and
//! re-evaluation penalties. All losses are per-sample sums averaged over the
//! minibatch, so the penalty weights keep their relative meaning.

use std::io::Write;
use std::time::Instant;

use cvsim_core::dataset::{rng_for, PriorBox};
use invaert_nn::{Adam, Mlp, Module, NnError, RealNvp, StepLr, Tape, Tensor2D, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::config::{Schedule, TrainingConfig};
use crate::data::{noisy_labels, TrainingData};
use crate::error::{InvaertError, Result};

// RNG stream bases, one block per purpose so no two draws share a stream.
const STREAM_INIT: u64 = 0;
const STREAM_EMULATOR: u64 = 1 << 20;
const STREAM_FLOW: u64 = 2 << 20;
const STREAM_VAE: u64 = 3 << 20;
const STREAM_VAE_TEST: u64 = 4 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub module: String,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_test: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Learning-rate halvings after a non-finite loss.
    pub backoffs: usize,
    /// Training stopped on a repeated non-finite loss; the best checkpoint was kept.
    pub aborted: bool,
    pub seconds: f64,
}

impl TrainReport {
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,lr,train_loss,test_loss")?;
        for e in &self.curve {
            writeln!(w, "{},{:e},{:e},{:e}", e.epoch, e.lr, e.train_loss, e.test_loss)?;
        }
        Ok(())
    }

    pub fn final_train_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

/// Labels seen during `epoch`: the clean labels plus fresh noise when `delta > 0`.
pub fn epoch_labels(y: &Tensor2D, noise_std: &[f64], delta: f64, seed: u64, stream: u64, epoch: usize) -> Tensor2D {
    let mut rng = rng_for(seed, stream + 2 * epoch as u64 + 1);
    noisy_labels(y, noise_std, delta, &mut rng)
}

struct LoopSpec<'a> {
    name: &'a str,
    schedule: &'a Schedule,
    n_train: usize,
    seed: u64,
    stream: u64,
    labels: &'a Tensor2D,
    noise_std: &'a [f64],
    delta: f64,
    max_backoffs: usize,
}

fn is_non_finite(e: &InvaertError) -> bool {
    matches!(e, InvaertError::Nn(NnError::NonFinite(_)))
}

/// Minibatch loop with shuffling, step decay, best-test checkpointing,
/// patience-based early stopping and learning-rate backoff on divergence.
fn fit<M: Clone>(
    model: &mut M,
    spec: LoopSpec<'_>,
    mut step: impl FnMut(&mut M, &mut Adam, &[usize], &Tensor2D, &mut rand_chacha::ChaCha8Rng) -> Result<f64>,
    mut test: impl FnMut(&M) -> Result<f64>,
) -> Result<TrainReport> {
    let s = spec.schedule;
    let sched = StepLr::new(s.lr, s.decay_period, s.decay_rate);
    let new_opt = || Adam::new(s.lr).with_weight_decay(s.weight_decay);
    let mut opt = new_opt();
    let started = Instant::now();
    let mut report = TrainReport {
        module: spec.name.to_string(),
        curve: Vec::new(),
        best_epoch: 0,
        best_test: f64::INFINITY,
        epochs_run: 0,
        stopped_early: false,
        backoffs: 0,
        aborted: false,
        seconds: 0.0,
    };
    let mut best: Option<M> = None;
    let mut since_best = 0;
    let mut lr_scale = 1.0;
    let mut order: Vec<usize> = (0..spec.n_train).collect();
    for epoch in 0..s.epochs {
        opt.lr = sched.lr(epoch) * lr_scale;
        let y_epoch = epoch_labels(spec.labels, spec.noise_std, spec.delta, spec.seed, spec.stream, epoch);
        let mut rng = rng_for(spec.seed, spec.stream + 2 * epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut outcome: Result<()> = Ok(());
        for batch in order.chunks(s.batch_size) {
            match step(model, &mut opt, batch, &y_epoch, &mut rng) {
                Ok(l) => total += l * batch.len() as f64,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        let train_loss = total / spec.n_train as f64;
        let test_loss = match outcome {
            Ok(()) => match test(model) {
                Ok(t) => t,
                Err(e) if is_non_finite(&e) => f64::NAN,
                Err(e) => return Err(e),
            },
            Err(e) if is_non_finite(&e) => f64::NAN,
            Err(e) => return Err(e),
        };
        report.epochs_run = epoch + 1;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            let Some(b) = &best else {
                return Err(InvaertError::Diverged(format!("{} loss is non-finite in epoch {epoch} before any checkpoint", spec.name)));
            };
            *model = b.clone();
            opt = new_opt();
            if report.backoffs < spec.max_backoffs {
                report.backoffs += 1;
                lr_scale *= 0.5;
                log::warn!("{}: non-finite loss in epoch {epoch}, restarting from the best checkpoint at half the learning rate", spec.name);
                continue;
            }
            log::warn!("{}: non-finite loss in epoch {epoch}, stopping with the best checkpoint", spec.name);
            report.aborted = true;
            break;
        }
        report.curve.push(EpochLog { epoch, lr: opt.lr, train_loss, test_loss });
        if test_loss < report.best_test {
            report.best_test = test_loss;
            report.best_epoch = epoch;
            best = Some(model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= s.patience() {
                report.stopped_early = true;
                break;
            }
        }
        if epoch % 50 == 0 || epoch + 1 == s.epochs {
            log::debug!("{} epoch {epoch}: train {train_loss:.4e} test {test_loss:.4e}", spec.name);
        }
    }
    if let Some(b) = best {
        *model = b;
    }
    report.seconds = started.elapsed().as_secs_f64();
    log::info!(
        "{}: {} epochs in {:.1}s, best test loss {:.4e} at epoch {}",
        spec.name,
        report.epochs_run,
        report.seconds,
        report.best_test,
        report.best_epoch
    );
    Ok(report)
}

/// Mean over rows of the row-wise squared error sum.
fn sse_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows.max(1) as f64;
    let r = tape.sub(a, b)?;
    let sq = tape.square(r);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / n))
}

fn sse_mean_plain(a: &Tensor2D, b: &Tensor2D) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.rows.max(1) as f64
}

fn init_rng(cfg: &TrainingConfig, k: u64) -> rand_chacha::ChaCha8Rng {
    rng_for(cfg.seed, STREAM_INIT + k)
}

pub fn new_emulator(cfg: &TrainingConfig, v_dim: usize, y_dim: usize) -> Mlp {
    Mlp::swish(v_dim, cfg.arch.emulator_hidden, cfg.arch.emulator_depth, y_dim, &mut init_rng(cfg, 1))
}

pub fn new_flow(cfg: &TrainingConfig, y_dim: usize) -> RealNvp {
    let mut fc = cfg.arch.flow;
    fc.dim = y_dim;
    RealNvp::new(fc, &mut init_rng(cfg, 2))
}

pub fn new_vae(cfg: &TrainingConfig, v_dim: usize, y_dim: usize) -> VaePair {
    let a = &cfg.arch;
    VaePair {
        encoder: Mlp::swish(v_dim, a.encoder_hidden, a.encoder_depth, 2 * cfg.latent_dim, &mut init_rng(cfg, 3)),
        decoder: Mlp::swish(y_dim + cfg.latent_dim, a.decoder_hidden, a.decoder_depth, v_dim, &mut init_rng(cfg, 4)),
    }
}

/// Regression of normalized outputs on normalized parameters, without noise.
pub fn train_emulator(data: &TrainingData, cfg: &TrainingConfig, net: &mut Mlp) -> Result<TrainReport> {
    cfg.emulator.validate("emulator")?;
    let spec = LoopSpec {
        name: "emulator",
        schedule: &cfg.emulator,
        n_train: data.train.len(),
        seed: cfg.seed,
        stream: STREAM_EMULATOR,
        labels: &data.train.y,
        noise_std: &data.noise_std,
        delta: 0.0,
        max_backoffs: 0,
    };
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    fit(
        net,
        spec,
        |net, opt, batch, y, _| {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let x = tape.constant(&data.train.v.gather_rows(batch));
            let t = tape.constant(&y.gather_rows(batch));
            let out = net.forward_tape(&mut tape, &vars, x)?;
            let loss = sse_mean(&mut tape, out, t)?;
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(NnError::NonFinite("emulator loss".into()).into());
            }
            let g = net.collect_grads(&tape.backward(loss)?, &vars);
            opt.update(net.params_mut(), &g);
            Ok(value)
        },
        |net| Ok(sse_mean_plain(&net.forward(&held_out.v)?, &held_out.y)),
    )
}

/// Maximum likelihood on noise-injected normalized outputs.
pub fn train_flow(data: &TrainingData, cfg: &TrainingConfig, flow: &mut RealNvp) -> Result<TrainReport> {
    cfg.flow.validate("flow")?;
    let spec = LoopSpec {
        name: "flow",
        schedule: &cfg.flow,
        n_train: data.train.len(),
        seed: cfg.seed,
        stream: STREAM_FLOW,
        labels: &data.train.y,
        noise_std: &data.noise_std,
        delta: cfg.delta,
        max_backoffs: 1,
    };
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    fit(
        flow,
        spec,
        |flow, opt, batch, y, _| {
            let mut tape = Tape::new();
            let vars = flow.register(&mut tape);
            let yb = tape.constant(&y.gather_rows(batch));
            let ll = flow.mean_log_prob_tape(&mut tape, &vars, yb, true)?;
            let loss = tape.scale(ll, -1.0);
            let value = tape.value(loss).data[0];
            let g = flow.collect_grads(&tape.backward(loss)?, &vars);
            opt.update(flow.params_mut(), &g);
            Ok(value)
        },
        |flow| {
            let lp = flow.log_prob(&held_out.y)?;
            Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
        },
    )
}

/// Encoder and decoder trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaePair {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl VaePair {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim() / 2
    }
}

impl Module for VaePair {
    fn params(&self) -> Vec<&Tensor2D> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// The loss terms, each already averaged over the batch and unweighted.
#[derive(Debug, Clone, Copy)]
pub struct VaeTerms {
    pub total: Var,
    pub decoder: Var,
    pub kl: Var,
    pub reeval: Var,
}

/// `½Σ(μ² + σ² − log σ² − 1)` for one sample.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

/// Builds the joint objective on `tape`. `eps` holds the standard-normal
/// draws of the reparameterization `w = μ + ε⊙σ`.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss_tape(
    tape: &mut Tape,
    pair: &VaePair,
    pair_vars: &[Var],
    emulator: &Mlp,
    emulator_vars: &[Var],
    v: &Tensor2D,
    y: &Tensor2D,
    eps: &Tensor2D,
    beta: [f64; 3],
) -> Result<VaeTerms> {
    let d = pair.latent_dim();
    let n = v.rows.max(1) as f64;
    let n_enc = pair.encoder.params().len();
    let (ev, dv) = pair_vars.split_at(n_enc);
    let vb = tape.constant(v);
    let yb = tape.constant(y);
    let e = tape.constant(eps);
    let h = pair.encoder.forward_tape(tape, ev, vb)?;
    let mu = tape.select_cols(h, &(0..d).collect::<Vec<_>>());
    let logvar = tape.select_cols(h, &(d..2 * d).collect::<Vec<_>>());
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(e, sigma)?;
    let w = tape.add(mu, noise)?;
    let inp = tape.concat_cols(yb, w)?;
    let v_hat = pair.decoder.forward_tape(tape, dv, inp)?;
    let decoder = sse_mean(tape, v_hat, vb)?;

    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let k = tape.add(mu2, var)?;
    let k = tape.sub(k, logvar)?;
    let k = tape.sum_all(k);
    let k = tape.add_scalar(k, -((v.rows * d) as f64));
    let kl = tape.scale(k, 0.5 / n);

    let y_hat = emulator.forward_tape(tape, emulator_vars, v_hat)?;
    let reeval = sse_mean(tape, y_hat, yb)?;

    let a = tape.scale(decoder, beta[0]);
    let b = tape.scale(kl, beta[1]);
    let c = tape.scale(reeval, beta[2]);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(VaeTerms { total, decoder, kl, reeval })
}

fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    Tensor2D { rows, cols, data: (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect() }
}

/// Joint encoder/decoder training with the emulator frozen.
pub fn train_vae_decoder(data: &TrainingData, cfg: &TrainingConfig, emulator: &Mlp, pair: &mut VaePair) -> Result<TrainReport> {
    cfg.vae.validate("vae")?;
    let beta = cfg.beta;
    let d = pair.latent_dim();
    let spec = LoopSpec {
        name: "vae",
        schedule: &cfg.vae,
        n_train: data.train.len(),
        seed: cfg.seed,
        stream: STREAM_VAE,
        labels: &data.train.y,
        noise_std: &data.noise_std,
        delta: cfg.delta,
        max_backoffs: 1,
    };
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    let test_eps = standard_normal(held_out.len(), d, &mut rng_for(cfg.seed, STREAM_VAE_TEST));
    fit(
        pair,
        spec,
        |pair, opt, batch, y, rng| {
            let mut tape = Tape::new();
            let pv = pair.register(&mut tape);
            let evars = emulator.register_frozen(&mut tape);
            let eps = standard_normal(batch.len(), d, rng);
            let terms = vae_loss_tape(
                &mut tape,
                pair,
                &pv,
                emulator,
                &evars,
                &data.train.v.gather_rows(batch),
                &y.gather_rows(batch),
                &eps,
                beta,
            )?;
            let value = tape.value(terms.total).data[0];
            if !value.is_finite() {
                return Err(NnError::NonFinite("encoder/decoder loss".into()).into());
            }
            let g = pair.collect_grads(&tape.backward(terms.total)?, &pv);
            opt.update(pair.params_mut(), &g);
            Ok(value)
        },
        |pair| vae_loss_eval(pair, emulator, &held_out.v, &held_out.y, &test_eps, beta).map(|t| t[0]),
    )
}

/// `[total, decoder, kl, reeval]` without a tape.
pub fn vae_loss_eval(pair: &VaePair, emulator: &Mlp, v: &Tensor2D, y: &Tensor2D, eps: &Tensor2D, beta: [f64; 3]) -> Result<[f64; 4]> {
    let d = pair.latent_dim();
    let h = pair.encoder.forward(v)?;
    let mut w = Tensor2D::zeros(v.rows, d);
    let mut kl = 0.0;
    for i in 0..v.rows {
        let r = h.row(i);
        let (mu, lv) = r.split_at(d);
        kl += kl_standard_normal(mu, lv);
        for j in 0..d {
            w.set(i, j, mu[j] + eps.get(i, j) * (0.5 * lv[j]).exp());
        }
    }
    kl /= v.rows.max(1) as f64;
    let v_hat = pair.decoder.forward(&y.concat_cols(&w)?)?;
    let dec = sse_mean_plain(&v_hat, v);
    let re = sse_mean_plain(&emulator.forward(&v_hat)?, y);
    let total = beta[0] * dec + beta[1] * kl + beta[2] * re;
    if !total.is_finite() {
        return Err(NnError::NonFinite("encoder/decoder test loss".into()).into());
    }
    Ok([total, dec, kl, re])
}

/// Trains all four networks in order (emulator, flow, encoder/decoder).
pub fn train_all(data: &TrainingData, cfg: &TrainingConfig, prior: PriorBox) -> Result<(ModelBundle, Vec<TrainReport>)> {
    cfg.validate()?;
    let mut bundle = ModelBundle::new(cfg.clone(), prior, data.v_stats.clone(), data.y_stats.clone());
    let mut reports = Vec::with_capacity(3);
    let mut emu = new_emulator(cfg, data.v_dim(), data.y_dim());
    reports.push(train_emulator(data, cfg, &mut emu)?);
    let mut flow = new_flow(cfg, data.y_dim());
    reports.push(train_flow(data, cfg, &mut flow)?);
    let mut pair = new_vae(cfg, data.v_dim(), data.y_dim());
    reports.push(train_vae_decoder(data, cfg, &emu, &mut pair)?);
    bundle.emulator = Some(emu);
    bundle.flow = Some(flow);
    bundle.encoder = Some(pair.encoder);
    bundle.decoder = Some(pair.decoder);
    Ok((bundle, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_standard_normal(&[0.0; 19], &[0.0; 19]), 0.0);
        assert!((kl_standard_normal(&[1.0; 19], &[0.0; 19]) - 9.5).abs() < 1e-14);
    }

    #[test]
    fn epoch_noise_is_fresh_and_reproducible() {
        let y = Tensor2D::zeros(3, 2);
        let a = epoch_labels(&y, &[1.0, 1.0], 1.0, 7, STREAM_FLOW, 0);
        let b = epoch_labels(&y, &[1.0, 1.0], 1.0, 7, STREAM_FLOW, 1);
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a, epoch_labels(&y, &[1.0, 1.0], 1.0, 7, STREAM_FLOW, 0));
        assert_eq!(epoch_labels(&y, &[1.0, 1.0], 0.0, 7, STREAM_FLOW, 0), y);
    }
}
