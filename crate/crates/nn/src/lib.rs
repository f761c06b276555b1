//! Small dense reverse-mode autodiff stack: tensors, a recording tape,
//! MLPs, a Gaussian-mixture head, Adam and finite-difference checking.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use gmm::{Gmm, GmmParams, GmmVars};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::Mlp;
pub use params::ParamSet;
pub use tape::{backward, Bound, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut r = a.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    if r <= -PI {
        r += two_pi;
    }
    r
}
