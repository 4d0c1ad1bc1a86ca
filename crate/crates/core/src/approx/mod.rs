//! Policy and value function approximators: small MLPs over a flat parameter
//! vector, a loss-expression tape, and the optimiser.

pub mod net;
pub mod optim;
pub mod policy;
pub mod tape;

pub use net::{Architecture, HeadKind, PolicyForward, ValueForward};
pub use optim::{adam_step, clip_grad_norm, global_norm, OptimizerState};
pub use policy::{policy_logprob, policy_mode, policy_probs, policy_sample, value};
pub use tape::{Adjoints, Tape, Var};
