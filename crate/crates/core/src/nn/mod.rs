//! Neural-network primitives: parameters, the op tape, and gradient checks.

pub mod gradcheck;
pub mod param;
pub mod tape;

pub use gradcheck::{grad_check, CheckOpts, GradCheckReport, ScalarFn};
pub use param::{GradSink, ParamId, ParamTensor, ParameterSet};
pub use tape::{Tape, TapeGrads, ValId};

use crate::error::CoreError;
use crate::tensor::Real;

/// Pointwise activation functions shared by layer programs and the dense
/// oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, data: &mut [Real]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for v in data {
                    *v = v.tanh();
                }
            }
        }
    }

    /// Multiplies `grad` in place by the derivative evaluated at
    /// pre-activation `z`.
    pub fn apply_deriv(&self, z: &[Real], grad: &mut [Real]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &v) in grad.iter_mut().zip(z) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &v) in grad.iter_mut().zip(z) {
                    let t = v.tanh();
                    *g *= 1.0 - t * t;
                }
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self, CoreError> {
        match s {
            "identity" | "id" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(CoreError::Config(format!("unknown activation {other}"))),
        }
    }
}
