use rand::Rng;

use super::{ParamBlock, Parameterized};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM cell with gate order input, forget, candidate, output. The weight is
/// `[4H, I + H]` acting on the concatenation `[x_t, h_{t-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
    input_size: usize,
    hidden_size: usize,
}

/// Forward activations of every step, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCache {
    steps: usize,
    /// `[x_t, h_{t-1}]` per step.
    concat: Vec<Vec<f64>>,
    /// Post-activation gates `[i, f, g, o]` per step.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    c0: Vec<f64>,
    /// Hidden state after each step.
    pub hidden: Vec<Vec<f64>>,
}

impl LstmCache {
    pub fn last_hidden(&self) -> &[f64] {
        &self.hidden[self.steps - 1]
    }

    pub fn last_cell(&self) -> &[f64] {
        &self.cells[self.steps - 1]
    }
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(name: &str, input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut bias = ParamBlock::uniform(format!("{name}.bias"), &[4 * hidden_size], bound, rng);
        // unit forget-gate bias
        for b in &mut bias.values[hidden_size..2 * hidden_size] {
            *b += 1.0;
        }
        Lstm {
            weight: ParamBlock::uniform(
                format!("{name}.weight"),
                &[4 * hidden_size, input_size + hidden_size],
                bound,
                rng,
            ),
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn zeros(name: &str, input_size: usize, hidden_size: usize) -> Self {
        Lstm {
            weight: ParamBlock::zeros(format!("{name}.weight"), &[4 * hidden_size, input_size + hidden_size]),
            bias: ParamBlock::zeros(format!("{name}.bias"), &[4 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// Runs the recurrence over `inputs` (row-major, `steps × input_size`)
    /// from `(h0, c0)`; zeros when `None`.
    pub fn forward(&self, inputs: &[f64], initial: Option<(&[f64], &[f64])>) -> Result<LstmCache> {
        let (ni, nh) = (self.input_size, self.hidden_size);
        if inputs.is_empty() || inputs.len() % ni != 0 {
            return Err(Error::Shape {
                context: format!("{} input", self.weight.name),
                expected: ni,
                actual: inputs.len(),
            });
        }
        let steps = inputs.len() / ni;
        let (mut h, mut c) = match initial {
            Some((h0, c0)) => {
                if h0.len() != nh || c0.len() != nh {
                    return Err(Error::Shape {
                        context: format!("{} initial state", self.weight.name),
                        expected: nh,
                        actual: h0.len().max(c0.len()),
                    });
                }
                (h0.to_vec(), c0.to_vec())
            }
            None => (vec![0.0; nh], vec![0.0; nh]),
        };
        let c0 = c.clone();
        let width = ni + nh;
        let w = &self.weight.values;
        let mut cache = LstmCache {
            steps,
            concat: Vec::with_capacity(steps),
            gates: Vec::with_capacity(steps),
            cells: Vec::with_capacity(steps),
            c0,
            hidden: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let mut z = inputs[t * ni..(t + 1) * ni].to_vec();
            z.extend_from_slice(&h);
            let mut gates = self.bias.values.clone();
            for (r, g) in gates.iter_mut().enumerate() {
                let row = &w[r * width..(r + 1) * width];
                *g += row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            }
            for k in 0..nh {
                gates[k] = sigmoid(gates[k]);
                gates[nh + k] = sigmoid(gates[nh + k]);
                gates[2 * nh + k] = gates[2 * nh + k].tanh();
                gates[3 * nh + k] = sigmoid(gates[3 * nh + k]);
            }
            for k in 0..nh {
                c[k] = gates[nh + k] * c[k] + gates[k] * gates[2 * nh + k];
                h[k] = gates[3 * nh + k] * c[k].tanh();
            }
            cache.concat.push(z);
            cache.gates.push(gates);
            cache.cells.push(c.clone());
            cache.hidden.push(h.clone());
        }
        Ok(cache)
    }

    /// Backpropagation through the whole sequence. `d_hidden` holds the
    /// upstream gradient on each step's hidden output (`steps × H`, row-major).
    /// Returns the input gradient (`steps × I`) and the gradients on `(h0, c0)`.
    #[allow(clippy::type_complexity)]
    pub fn backward(&mut self, cache: &LstmCache, d_hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (ni, nh) = (self.input_size, self.hidden_size);
        if d_hidden.len() != cache.steps * nh {
            return Err(Error::Shape {
                context: format!("{} upstream", self.weight.name),
                expected: cache.steps * nh,
                actual: d_hidden.len(),
            });
        }
        let width = ni + nh;
        let mut dx = vec![0.0; cache.steps * ni];
        let mut dh_next = vec![0.0; nh];
        let mut dc_next = vec![0.0; nh];
        let mut dgate = vec![0.0; 4 * nh];
        for t in (0..cache.steps).rev() {
            let gates = &cache.gates[t];
            let c = &cache.cells[t];
            let c_prev = if t == 0 { &cache.c0 } else { &cache.cells[t - 1] };
            for k in 0..nh {
                let (i, f, g, o) = (gates[k], gates[nh + k], gates[2 * nh + k], gates[3 * nh + k]);
                let dh = d_hidden[t * nh + k] + dh_next[k];
                let tc = c[k].tanh();
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dgate[k] = dc * g * i * (1.0 - i);
                dgate[nh + k] = dc * c_prev[k] * f * (1.0 - f);
                dgate[2 * nh + k] = dc * i * (1.0 - g * g);
                dgate[3 * nh + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let z = &cache.concat[t];
            let mut dz = vec![0.0; width];
            for (r, &dg) in dgate.iter().enumerate() {
                self.bias.grad[r] += dg;
                let base = r * width;
                let wrow = &self.weight.values[base..base + width];
                let grow = &mut self.weight.grad[base..base + width];
                for j in 0..width {
                    grow[j] += dg * z[j];
                    dz[j] += dg * wrow[j];
                }
            }
            dx[t * ni..(t + 1) * ni].copy_from_slice(&dz[..ni]);
            dh_next.copy_from_slice(&dz[ni..]);
        }
        Ok((dx, dh_next, dc_next))
    }
}

impl Parameterized for Lstm {
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
    fn zero_parameters_give_zero_hidden() {
        let lstm = Lstm::zeros("l", 3, 5);
        let cache = lstm.forward(&[0.3, -1.0, 2.0, 0.1, 0.2, 0.3], None).unwrap();
        assert!(cache.hidden.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn single_step_is_one_cell_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lstm = Lstm::new("l", 2, 3, &mut rng);
        let x = [0.5, -0.25];
        let cache = lstm.forward(&x, None).unwrap();
        let nh = 3;
        let mut expect = vec![0.0; nh];
        for k in 0..nh {
            let pre = |gate: usize| {
                let r = gate * nh + k;
                lstm.bias.values[r] + (0..2).map(|j| lstm.weight.values[r * 5 + j] * x[j]).sum::<f64>()
            };
            let c = sigmoid(pre(0)) * pre(2).tanh();
            expect[k] = sigmoid(pre(3)) * c.tanh();
        }
        for (a, b) in cache.last_hidden().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let lstm = Lstm::zeros("l", 3, 2);
        assert!(lstm.forward(&[], None).is_err());
        assert!(lstm.forward(&[1.0, 2.0], None).is_err());
        assert!(lstm.forward(&[1.0, 2.0, 3.0], Some((&[0.0], &[0.0, 0.0]))).is_err());
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lstm = Lstm::new("l", 3, 4, &mut rng);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let c0: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let coef: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = gradient_check(
            &mut lstm,
            |l| {
                let cache = l.forward(&x, Some((&h0, &c0))).unwrap();
                l.backward(&cache, &coef).unwrap();
                cache.hidden.iter().flatten().zip(&coef).map(|(h, c)| h * c).sum()
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lstm = Lstm::new("l", 2, 3, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut d_last = vec![0.0; 9];
        d_last[6..].copy_from_slice(&[0.3, -0.7, 1.1]);
        let loss = |l: &Lstm, x: &[f64]| -> f64 {
            let c = l.forward(x, None).unwrap();
            c.last_hidden().iter().zip(&d_last[6..]).map(|(a, b)| a * b).sum()
        };
        let cache = lstm.forward(&x, None).unwrap();
        let (dx, _, _) = lstm.backward(&cache, &d_last).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-5;
            xm[i] -= 1e-5;
            let num = (loss(&lstm, &xp) - loss(&lstm, &xm)) / 2e-5;
            assert!((num - dx[i]).abs() < 1e-8, "coord {i}: {num} vs {}", dx[i]);
        }
    }
}
