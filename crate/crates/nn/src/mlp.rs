use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Fully connected net: tanh on hidden layers, linear output.
///
/// Layers live in a shared [`ParamSet`] starting at `offset`, as
/// `(weight in x out, bias 1 x out)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    offset: usize,
}

impl Mlp {
    /// Registers Xavier-uniform weights and zero biases.
    pub fn new(params: &mut ParamSet, prefix: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output widths");
        let offset = params.len();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            let weight = Tensor::from_vec(fan_in, fan_out, data).expect("sized");
            params.push(format!("{prefix}.w{l}"), weight);
            params.push(format!("{prefix}.b{l}"), Tensor::zeros(1, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            offset,
        }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Index of layer `l`'s weight in the parameter set (bias follows it).
    pub fn weight_index(&self, l: usize) -> usize {
        self.offset + 2 * l
    }

    fn check_input(&self, shape: &[usize], cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(NnError::ShapeMismatch {
                op: "mlp_forward",
                left: shape.to_vec(),
                right: vec![self.input_width()],
            });
        }
        Ok(())
    }

    /// Recorded forward pass over a batch `n x input_width`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xv = tape.value(x);
        self.check_input(xv.shape(), xv.cols())?;
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = bound.var(self.weight_index(l));
            let b = bound.var(self.weight_index(l) + 1);
            h = tape.affine(h, w, b)?;
            if l + 1 < self.num_layers() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording.
    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape(), x.cols())?;
        let n = x.rows();
        let mut h = x.data().to_vec();
        for l in 0..self.num_layers() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = params.get(self.weight_index(l));
            let b = params.get(self.weight_index(l) + 1);
            let mut out = Vec::with_capacity(n * fo);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            gemm(n, fi, fo, &h, false, w.data(), false, &mut out, true);
            if l + 1 < self.num_layers() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        Tensor::from_vec(n, self.output_width(), h)
    }
}
