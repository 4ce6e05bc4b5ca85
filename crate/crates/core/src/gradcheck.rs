//! Finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NormConfig, NormMode, RunningStats, Tape, Var};
use crate::tensor::{Result, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Relative errors divide by `max(|analytic|, |numeric|, DENOMINATOR_FLOOR)`
/// so coordinates whose true gradient is zero are judged by absolute error.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares tape gradients of `build` against central differences.
///
/// The op output is reduced to a scalar through a fixed random projection
/// (drawn from `seed`) so every output coordinate contributes. At most
/// `probes` input coordinates are checked; all of them when there are fewer.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out)?.shape().to_vec();
        Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))?
    };
    let loss_of = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = build(&mut tape, &vars)?;
        let weights = tape.leaf(projection.clone(), false);
        let weighted = tape.mul(out, weights)?;
        let loss = tape.sum(weighted)?;
        let value = tape.value(loss)?.data()[0];
        Ok((value, tape, vars, loss))
    };

    let (_, tape, vars, loss) = loss_of(inputs, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if total <= probes {
        inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect()
    } else {
        (0..probes)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut i = 0;
                while k >= inputs[i].len() {
                    k -= inputs[i].len();
                    i += 1;
                }
                (i, k)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: coords.len(),
        worst: None,
    };
    let mut perturbed = inputs.to_vec();
    for (i, j) in coords {
        let original = inputs[i].data()[j];
        perturbed[i].data_mut()[j] = original + STEP;
        let plus = loss_of(&perturbed, false)?.0;
        perturbed[i].data_mut()[j] = original - STEP;
        let minus = loss_of(&perturbed, false)?.0;
        perturbed[i].data_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i].data()[j];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}

/// Every differentiable tape op, in the configurations the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    Conv2d,
    Conv2dStrided,
    AvgPool2d,
    ConcatChannels,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Linear,
    SoftmaxCrossEntropy,
    Sum,
    Mul,
    Add,
    Reshape,
    Element,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 14] = [
        CheckedOp::Conv2d,
        CheckedOp::Conv2dStrided,
        CheckedOp::AvgPool2d,
        CheckedOp::ConcatChannels,
        CheckedOp::BatchNormTrain,
        CheckedOp::BatchNormEval,
        CheckedOp::Relu,
        CheckedOp::Linear,
        CheckedOp::SoftmaxCrossEntropy,
        CheckedOp::Sum,
        CheckedOp::Mul,
        CheckedOp::Add,
        CheckedOp::Reshape,
        CheckedOp::Element,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::Conv2dStrided => "conv2d_strided",
            CheckedOp::AvgPool2d => "avg_pool2d",
            CheckedOp::ConcatChannels => "concat_channels",
            CheckedOp::BatchNormTrain => "batch_norm_train",
            CheckedOp::BatchNormEval => "batch_norm_eval",
            CheckedOp::Relu => "relu",
            CheckedOp::Linear => "linear",
            CheckedOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            CheckedOp::Sum => "sum",
            CheckedOp::Mul => "mul",
            CheckedOp::Add => "add",
            CheckedOp::Reshape => "reshape",
            CheckedOp::Element => "element",
        }
    }

    /// One randomized trial: shapes and values are drawn from `seed`.
    pub fn check(self, seed: u64, probes: usize) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let mut dims = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5);
        let mut dim = |lo: usize, hi: usize| dims.random_range(lo..=hi);
        let (n, c, h, w) = (dim(1, 3), dim(1, 3), dim(3, 6), dim(3, 6));
        let image = [n, c, h, w];
        let norm = NormConfig {
            epsilon: 1e-5,
            momentum: 0.9,
        };
        match self {
            CheckedOp::Conv2d | CheckedOp::Conv2dStrided => {
                let (out, k) = (dim(1, 3), 2 * dim(0, 1) + 1);
                let (stride, pad) = if self == CheckedOp::Conv2d { (1, k / 2) } else { (2, dim(0, 1)) };
                let inputs = [random(&image)?, random(&[out, c, k, k])?, random(&[out])?];
                grad_check(|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), &inputs, probes, seed)
            }
            CheckedOp::AvgPool2d => {
                let inputs = [random(&[n, c, 2 * h, 2 * w])?];
                grad_check(|t, v| t.avg_pool2d(v[0], 2, 2), &inputs, probes, seed)
            }
            CheckedOp::ConcatChannels => {
                let inputs = [random(&image)?, random(&[n, dim(1, 3), h, w])?];
                grad_check(|t, v| t.concat_channels(v[0], v[1]), &inputs, probes, seed)
            }
            CheckedOp::BatchNormTrain | CheckedOp::BatchNormEval => {
                let mode = if self == CheckedOp::BatchNormTrain {
                    NormMode::Train
                } else {
                    NormMode::Eval
                };
                let stats = RunningStats {
                    mean: random(&[c])?.into_data(),
                    var: random(&[c])?.map(|v| 0.5 + v.abs()).into_data(),
                };
                let inputs = [random(&[n + 1, c, h, w])?, random(&[c])?, random(&[c])?];
                grad_check(
                    |t, v| t.batch_norm(v[0], v[1], v[2], &mut stats.clone(), mode, norm),
                    &inputs,
                    probes,
                    seed,
                )
            }
            CheckedOp::Relu => {
                // Keep clear of the kink, where the difference quotient is
                // not a derivative.
                let x = random(&image)?.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
                grad_check(|t, v| t.relu(v[0]), &[x], probes, seed)
            }
            CheckedOp::Linear => {
                let (rows, features, out) = (dim(1, 4), dim(1, 6), dim(1, 4));
                let inputs = [random(&[rows, features])?, random(&[out, features])?, random(&[out])?];
                grad_check(|t, v| t.linear(v[0], v[1], v[2]), &inputs, probes, seed)
            }
            CheckedOp::SoftmaxCrossEntropy => {
                let (rows, classes) = (dim(1, 5), dim(2, 5));
                let labels: Vec<usize> = (0..rows).map(|_| dim(0, classes - 1)).collect();
                let logits = random(&[rows, classes])?.map(|v| 3.0 * v);
                grad_check(
                    |t, v| Ok(t.softmax_cross_entropy(v[0], &labels)?.0),
                    &[logits],
                    probes,
                    seed,
                )
            }
            CheckedOp::Sum => grad_check(|t, v| t.sum(v[0]), &[random(&image)?], probes, seed),
            CheckedOp::Mul => {
                let inputs = [random(&image)?, random(&image)?];
                grad_check(|t, v| t.mul(v[0], v[1]), &inputs, probes, seed)
            }
            CheckedOp::Add => {
                let inputs = [random(&image)?, random(&image)?];
                grad_check(|t, v| t.add(v[0], v[1]), &inputs, probes, seed)
            }
            CheckedOp::Reshape => {
                let inputs = [random(&image)?];
                grad_check(|t, v| t.reshape(v[0], &[n, c * h * w]), &inputs, probes, seed)
            }
            CheckedOp::Element => {
                let index = dim(0, n * c * h * w - 1);
                grad_check(|t, v| t.element(v[0], index), &[random(&image)?], probes, seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn conv2d_gradients_match() {
        let report = grad_check(
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            &[random(&[1, 2, 5, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)],
            200,
            4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn linear_gradients_match() {
        let report = grad_check(
            |t, v| t.linear(v[0], v[1], v[2]),
            &[random(&[2, 4], 5), random(&[3, 4], 6), random(&[3], 7)],
            100,
            8,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn relu_away_from_kink_is_tight() {
        let x = random(&[3, 7], 9).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
        let report = grad_check(|t, v| t.relu(v[0]), &[x], 100, 10).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn every_op_passes_a_few_trials() {
        for op in CheckedOp::ALL {
            for seed in 0..5 {
                let report = op.check(seed, 64).unwrap();
                assert!(report.passes(1e-4), "{} seed {seed}: {report:?}", op.name());
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu probed exactly at its kink: the one-sided rule disagrees with
        // the symmetric difference quotient there.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let report = grad_check(|t, v| t.relu(v[0]), &[x], 1, 0).unwrap();
        assert!(!report.passes(1e-4));
    }
}
