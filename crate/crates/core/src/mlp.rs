//! Per-node multilayer perceptron shared by the teacher and the students.

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;

/// Layer layout of an MLP stored in a [`ParamSet`] under `prefix`.
///
/// Hidden layers use `tanh`; the head is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    prefix: String,
    layers: usize,
}

impl Mlp {
    /// Registers Glorot-uniform weights and zero biases for `widths`
    /// (`[input, hidden.., output]`).
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit));
            params.insert(format!("{prefix}.l{i}.w"), w)?;
            params.insert(format!("{prefix}.l{i}.b"), Matrix::zeros(1, fan_out))?;
        }
        Ok(Self::existing(prefix, widths.len() - 1))
    }

    /// Refers to an MLP whose parameters are already in a set.
    pub fn existing(prefix: &str, layers: usize) -> Self {
        Self {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    pub fn build(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var> {
        let mut h = input;
        for l in 0..self.layers {
            let w = tape.param(params, &self.weight_name(l))?;
            let b = tape.param(params, &self.bias_name(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row_bias(h, b)?;
            if l + 1 < self.layers {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Plain evaluation without recording a tape.
    pub fn eval(&self, params: &ParamSet, input: &Matrix) -> Result<Matrix> {
        let mut h = input.clone();
        for l in 0..self.layers {
            h = h
                .matmul(params.require(&self.weight_name(l))?)?
                .add_row_bias(params.require(&self.bias_name(l))?)?;
            if l + 1 < self.layers {
                h = h.map(libm::tanh);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_evaluation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let mlp = Mlp::init(&mut params, "m", &[3, 4, 4, 2], &mut rng).unwrap();
        assert_eq!(params.param_count(), 3 * 4 + 4 + 4 * 4 + 4 + 4 * 2 + 2);
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let out = mlp.build(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.value(out), &mlp.eval(&params, &x).unwrap());
    }
}
