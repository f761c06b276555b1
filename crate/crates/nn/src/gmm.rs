//! Diagonal Gaussian mixture head.
//!
//! A head row has width `k * (1 + 2 * dim)`: `k` mixture logits, then `k`
//! mean blocks of `dim`, then `k` log-std blocks of `dim`.

use std::f64::consts::PI;

use crate::error::{NnError, Result};
use crate::tape::{logsumexp, Tape, Var};
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Gmm {
    pub components: usize,
    pub dim: usize,
    /// Floor on the log standard deviations.
    #[serde(default = "default_log_std_min")]
    pub log_std_min: f64,
}

fn default_log_std_min() -> f64 {
    LOG_STD_MIN
}

/// Tape handles for a batch of mixtures.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    /// `n x k` log mixture weights.
    pub log_weights: Var,
    /// `n x (k*dim)`.
    pub means: Var,
    /// `n x (k*dim)`, already clamped.
    pub log_stds: Var,
}

/// One mixture as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub log_stds: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn new(components: usize, dim: usize) -> Self {
        Self { components, dim, log_std_min: LOG_STD_MIN }
    }

    /// Raises the log-std floor; must stay below [`LOG_STD_MAX`].
    pub fn with_log_std_min(mut self, floor: f64) -> Self {
        self.log_std_min = floor.min(LOG_STD_MAX);
        self
    }

    pub fn head_width(&self) -> usize {
        self.components * (1 + 2 * self.dim)
    }

    pub fn split(&self, tape: &mut Tape, head: Var) -> Result<GmmVars> {
        let (k, d) = (self.components, self.dim);
        let w = tape.value(head).cols();
        if w != self.head_width() {
            return Err(NnError::ShapeMismatch {
                op: "gmm_split",
                left: vec![w],
                right: vec![self.head_width()],
            });
        }
        let logits = tape.slice_cols(head, 0, k)?;
        let log_weights = tape.log_softmax_rows(logits);
        let means = tape.slice_cols(head, k, k * d)?;
        let raw = tape.slice_cols(head, k + k * d, k * d)?;
        let log_stds = tape.clamp(raw, self.log_std_min, LOG_STD_MAX);
        Ok(GmmVars {
            log_weights,
            means,
            log_stds,
        })
    }

    /// Per-row `log sum_k w_k N(a; mu_k, diag sigma_k^2)`, an `n x 1` column.
    pub fn log_prob(&self, tape: &mut Tape, g: &GmmVars, actions: Var) -> Result<Var> {
        let d = self.dim;
        let tiled: Vec<Var> = vec![actions; self.components];
        let a = tape.concat_cols(&tiled)?;
        let diff = tape.sub(a, g.means)?;
        let neg_ls = tape.neg(g.log_stds);
        let inv_std = tape.exp(neg_ls);
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.square(z);
        let quad = tape.sum_groups(z2, d)?;
        let log_det = tape.sum_groups(g.log_stds, d)?;
        let half_quad = tape.scale(quad, -0.5);
        let comp = tape.sub(half_quad, log_det)?;
        let comp = tape.add_scalar(comp, -0.5 * d as f64 * (2.0 * PI).ln());
        let joint = tape.add(comp, g.log_weights)?;
        Ok(tape.logsumexp_rows(joint))
    }

    /// Reparameterized draw `mu_k + sigma_k * z` with the component index per
    /// row held fixed (gradients reach only the chosen component).
    pub fn sample(&self, tape: &mut Tape, g: &GmmVars, comps: &[usize], noise: Var) -> Result<Var> {
        let mu = tape.select_groups(g.means, self.dim, comps)?;
        let ls = tape.select_groups(g.log_stds, self.dim, comps)?;
        let sd = tape.exp(ls);
        let scaled = tape.mul(sd, noise)?;
        tape.add(mu, scaled)
    }

    /// Unpacks row `r` of a head output into plain values.
    pub fn params_from_row(&self, head: &Tensor, r: usize) -> GmmParams {
        let (k, d) = (self.components, self.dim);
        let row = head.row_slice(r);
        let l = logsumexp(&row[..k]);
        let weights = row[..k].iter().map(|v| (v - l).exp()).collect();
        let block = |start: usize, clamp: bool| -> Vec<Vec<f64>> {
            (0..k)
                .map(|c| {
                    row[start + c * d..start + (c + 1) * d]
                        .iter()
                        .map(|&v| if clamp { v.clamp(self.log_std_min, LOG_STD_MAX) } else { v })
                        .collect()
                })
                .collect()
        };
        GmmParams {
            weights,
            means: block(k, false),
            log_stds: block(k + k * d, true),
        }
    }
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn log_prob(&self, a: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|c| {
                let mut lp = self.weights[c].ln();
                for (j, &x) in a.iter().enumerate() {
                    let ls = self.log_stds[c][j];
                    let z = (x - self.means[c][j]) * (-ls).exp();
                    lp += -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln();
                }
                lp
            })
            .collect();
        logsumexp(&terms)
    }

    /// Inverse-CDF component choice from a uniform draw in `[0, 1)`.
    pub fn choose_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return c;
            }
        }
        self.components() - 1
    }

    pub fn sample(&self, component: usize, z: &[f64]) -> Vec<f64> {
        self.means[component]
            .iter()
            .zip(&self.log_stds[component])
            .zip(z)
            .map(|((m, ls), n)| m + ls.exp() * n)
            .collect()
    }

    /// Weighted mean over components.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.means.first().map_or(0, Vec::len);
        let mut out = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}
