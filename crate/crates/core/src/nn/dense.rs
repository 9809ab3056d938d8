use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamBlock, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layer `y = act(W x + b)`, `W` stored row-major as
/// `[outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            weight: ParamBlock::uniform(format!("{name}.weight"), &[outputs, inputs], bound, rng),
            bias: ParamBlock::uniform(format!("{name}.bias"), &[outputs], bound, rng),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, input: &[f64]) -> Result<DenseCache> {
        let (n_out, n_in) = (self.outputs(), self.inputs());
        if input.len() != n_in {
            return Err(Error::Shape {
                context: self.weight.name.clone(),
                expected: n_in,
                actual: input.len(),
            });
        }
        let w = &self.weight.values;
        let output = (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = self.bias.values[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                self.activation.apply(z)
            })
            .collect();
        Ok(DenseCache {
            input: input.to_vec(),
            output,
        })
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input.
    pub fn backward(&mut self, cache: &DenseCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let (n_out, n_in) = (self.outputs(), self.inputs());
        if upstream.len() != n_out {
            return Err(Error::Shape {
                context: format!("{} upstream", self.weight.name),
                expected: n_out,
                actual: upstream.len(),
            });
        }
        let mut dx = vec![0.0; n_in];
        for o in 0..n_out {
            let dz = upstream[o] * self.activation.derivative(cache.output[o]);
            if dz == 0.0 {
                continue;
            }
            self.bias.grad[o] += dz;
            let base = o * n_in;
            for i in 0..n_in {
                self.weight.grad[base + i] += dz * cache.input[i];
                dx[i] += dz * self.weight.values[base + i];
            }
        }
        Ok(dx)
    }
}

impl Parameterized for Dense {
    fn blocks(&self) -> Vec<&ParamBlock> {
        vec![&self.weight, &self.bias]
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("d", 3, 3, Activation::Identity, &mut rng);
        d.weight.values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        d.bias.values = vec![0.0; 3];
        assert_eq!(d.forward(&[0.5, -2.0, 7.0]).unwrap().output, vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("d", 4, 2, Activation::Tanh, &mut rng);
        d.bias.values = vec![0.0; 2];
        assert_eq!(d.forward(&[0.0; 4]).unwrap().output, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("d", 4, 2, Activation::Tanh, &mut rng);
        assert!(matches!(d.forward(&[0.0; 3]), Err(Error::Shape { .. })));
        let cache = d.forward(&[0.0; 4]).unwrap();
        assert!(d.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Identity] {
            let mut d = Dense::new("d", 3, 4, act, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coef: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = gradient_check(
                &mut d,
                |d| {
                    let c = d.forward(&x).unwrap();
                    d.backward(&c, &coef).unwrap();
                    c.output.iter().zip(&coef).map(|(a, b)| a * b).sum()
                },
                &GradCheckConfig::default(),
            );
            assert!(report.passed(1e-4), "{report:?}");
        }
    }
}
