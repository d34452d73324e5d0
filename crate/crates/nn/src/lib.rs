//! Dense `f64` tensors with a reverse-mode tape, plus the handful of model
//! families the inversion pipeline needs: Swish MLPs, Real-NVP coupling flows
//! (optionally with batch normalization) and Adam with step decay.

pub mod flow;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use flow::{BatchNorm, CouplingBlock, FlowConfig, RealNvp};
pub use mlp::{Activation, Linear, Mlp};
pub use optim::{Adam, StepLr};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2D;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Anything with an ordered list of trainable tensors.
pub trait Module {
    fn params(&self) -> Vec<&Tensor2D>;
    fn params_mut(&mut self) -> Vec<&mut Tensor2D>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Puts every parameter on the tape as a constant, so gradients still flow
    /// through the module to its inputs but never into its weights.
    fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.constant(p)).collect()
    }

    /// Collects the gradient of each registered parameter, zeros where none flowed.
    fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor2D> {
        self.params().into_iter().zip(vars).map(|(p, &v)| grads.get_or_zeros(v, p)).collect()
    }
}
