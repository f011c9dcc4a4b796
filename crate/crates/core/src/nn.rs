//! Per-point MLP building blocks shared by the loss and reconstruction
//! networks.

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `fan_in x fan_out`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("fan_in x fan_out")
}

/// Stack of fully connected layers applied row-wise to an `n x d` input.
///
/// Layer `i` owns parameters `{prefix}.{first + i}.w` (`d_in x d_out`) and
/// `{prefix}.{first + i}.b` (`d_out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    first: usize,
    relu_last: bool,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], relu_last: bool) -> Self {
        Self::starting_at(prefix, dims, 0, relu_last)
    }

    /// Like [`Mlp::new`] but numbering layers from `first`.
    pub fn starting_at(prefix: &str, dims: &[usize], first: usize, relu_last: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            first,
            relu_last,
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{}.w", self.prefix, self.first + layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{}.b", self.prefix, self.first + layer)
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Xavier weights and zero biases; optionally an all-zero last layer.
    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R, zero_last: bool) -> Result<()> {
        for l in 0..self.layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let w = if zero_last && l + 1 == self.layers() {
                Tensor::zeros(&[i, o])
            } else {
                xavier_uniform(rng, i, o)
            };
            params.insert(self.weight_name(l), w)?;
            params.insert(self.bias_name(l), Tensor::zeros(&[o]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers() {
            let w = bound.var(&self.weight_name(l))?;
            let b = bound.var(&self.bias_name(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < self.layers() || self.relu_last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Per-point MLP followed by a max over points: `n x d -> 1 x d_out`.
    pub fn forward_pooled(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.forward(tape, bound, x)?;
        tape.max_rows(h)
    }
}
