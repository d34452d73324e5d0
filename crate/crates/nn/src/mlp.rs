use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{swish, Tape, Var};
use crate::tensor::{gemm, Tensor2D};
use crate::{Module, NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => swish(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Swish => tape.swish(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Affine layer `x·W + b` with `W` stored as in×out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor2D,
    pub b: Tensor2D,
}

impl Linear {
    /// Uniform fan-in initialization, `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = if fan_in > 0 { 1.0 / (fan_in as f64).sqrt() } else { 1.0 };
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let w = Tensor2D { rows: fan_in, cols: fan_out, data: draw(fan_in * fan_out) };
        let b = Tensor2D { rows: 1, cols: fan_out, data: draw(fan_out) };
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Tensor2D::zeros(fan_in, fan_out), b: Tensor2D::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }
}

/// Fully connected network. Hidden layers use `hidden`, the last layer `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Row count above which the inference path splits the batch across threads.
#[cfg(feature = "parallel")]
const PAR_ROWS: usize = 2048;

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least an input and an output width");
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    /// `input → hidden (×depth) → output` with Swish hidden layers and linear output.
    pub fn swish<R: Rng + ?Sized>(input: usize, hidden: usize, depth: usize, output: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(depth));
        widths.push(output);
        Self::new(&widths, Activation::Swish, Activation::Identity, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    /// Zeroes the last layer so the network outputs `output(0)` everywhere.
    pub fn zero_last(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            *l = Linear::zeros(l.fan_in(), l.fan_out());
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(NnError::Shape(format!("layer {k} outputs {} but layer {} takes {}", pair[0].fan_out(), k + 1, pair[1].fan_in())));
            }
        }
        for l in &self.layers {
            if l.b.shape() != (1, l.fan_out()) || l.w.len() != l.fan_in() * l.fan_out() {
                return Err(NnError::Shape("inconsistent layer storage".into()));
            }
        }
        Ok(())
    }

    fn act(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Differentiable forward pass; `vars` come from [`Module::register`].
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..self.layers.len() {
            h = tape.matmul(h, vars[2 * k])?;
            h = tape.add_row(h, vars[2 * k + 1])?;
            h = self.act(k).on_tape(tape, h);
        }
        Ok(h)
    }

    fn forward_block(&self, x: &Tensor2D) -> Tensor2D {
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = Tensor2D::zeros(h.rows, l.fan_out());
            for i in 0..out.rows {
                out.row_mut(i).copy_from_slice(&l.b.data);
            }
            gemm(&h, false, &l.w, false, &mut out, 1.0);
            let a = self.act(k);
            if a != Activation::Identity {
                out.data.iter_mut().for_each(|v| *v = a.apply(*v));
            }
            h = out;
        }
        h
    }

    /// Inference pass without a tape.
    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.cols != self.input_dim() {
            return Err(NnError::Shape(format!("MLP expects {} inputs, got {}", self.input_dim(), x.cols)));
        }
        #[cfg(feature = "parallel")]
        if x.rows > PAR_ROWS {
            use rayon::prelude::*;
            let chunks: Vec<Tensor2D> = x
                .data
                .par_chunks(PAR_ROWS * x.cols)
                .map(|c| self.forward_block(&Tensor2D { rows: c.len() / x.cols, cols: x.cols, data: c.to_vec() }))
                .collect();
            let mut data = Vec::with_capacity(x.rows * self.output_dim());
            chunks.iter().for_each(|c| data.extend_from_slice(&c.data));
            return Tensor2D::from_vec(x.rows, self.output_dim(), data);
        }
        Ok(self.forward_block(x))
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor2D> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2D> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}
