use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per block; blocks larger than this are subsampled.
    pub max_coords_per_block: usize,
    /// Magnitude below which errors are measured in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords_per_block: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Block name, flat index, analytic and numeric values at the worst
    /// coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss` must evaluate the scalar loss and accumulate its gradient into the
/// model's blocks. Gradients are zeroed before every call and left zeroed on
/// return.
pub fn gradient_check<M, F>(model: &mut M, mut loss: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    M: Parameterized,
    F: FnMut(&mut M) -> f64,
{
    model.zero_grad();
    loss(model);
    let analytic: Vec<Vec<f64>> = model.blocks().iter().map(|b| b.grad.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (bi, grads) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if grads.len() <= cfg.max_coords_per_block {
            (0..grads.len()).collect()
        } else {
            let mut v = sample(&mut rng, grads.len(), cfg.max_coords_per_block).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let original = model.blocks()[bi].values[i];
            let mut eval = |value: f64, model: &mut M| {
                model.blocks_mut()[bi].values[i] = value;
                model.zero_grad();
                loss(model)
            };
            let plus = eval(original + cfg.step, model);
            let minus = eval(original - cfg.step, model);
            model.blocks_mut()[bi].values[i] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grads[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((model.blocks()[bi].name.clone(), i, a, numeric));
            }
        }
    }
    model.zero_grad();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBlock;

    struct Lin(ParamBlock);

    impl Parameterized for Lin {
        fn blocks(&self) -> Vec<&ParamBlock> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
            vec![&mut self.0]
        }
    }

    const COEF: [f64; 4] = [1.5, -2.0, 0.25, 3.0];

    fn linear(m: &mut Lin) -> f64 {
        for (g, c) in m.0.grad.iter_mut().zip(COEF) {
            *g += c;
        }
        m.0.values.iter().zip(COEF).map(|(v, c)| v * c).sum()
    }

    #[test]
    fn linear_function_agrees_exactly() {
        let mut m = Lin(ParamBlock::from_values("w", &[4], vec![0.1, 0.2, -0.3, 4.0]));
        let report = gradient_check(&mut m, linear, &GradCheckConfig::default());
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(m.0.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut m = Lin(ParamBlock::from_values("w", &[4], vec![0.1, 0.2, -0.3, 4.0]));
        let report = gradient_check(
            &mut m,
            |m| {
                let v = linear(m);
                m.0.grad[2] *= 1.01;
                v
            },
            &GradCheckConfig::default(),
        );
        assert!(!report.passed(1e-4));
        assert_eq!(report.worst.as_ref().unwrap().1, 2);
    }

    #[test]
    fn large_blocks_are_subsampled() {
        let mut m = Lin(ParamBlock::zeros("w", &[1000]));
        let cfg = GradCheckConfig {
            max_coords_per_block: 10,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&mut m, |m| m.0.values.iter().sum(), &cfg);
        assert_eq!(report.checked, 10);
    }
}
