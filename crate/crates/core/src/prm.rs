//! Process reward model: a linear value head over chain features, fitted to
//! tree values by least squares and served clipped to `[0, 1]`.

use std::io::{BufRead, Write};

use crate::env::{Chain, Features, ReasoningEnv};
use crate::error::{invalid, PropaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrmParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PrmParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim],
            bias: 0.0,
        }
    }

    pub fn constant(feature_dim: usize, value: f64) -> Self {
        Self {
            weights: vec![0.0; feature_dim],
            bias: value,
        }
    }

    pub fn raw(&self, features: &Features) -> f64 {
        self.bias
            + features
                .active()
                .iter()
                .map(|&(j, x)| self.weights[j] * x)
                .sum::<f64>()
    }
}

/// Anything that scores a partial or complete chain in `[0, 1]`.
pub trait ChainScorer {
    fn score(&self, chain: &Chain) -> Result<f64>;
}

pub fn prm_predict<E: ReasoningEnv>(env: &E, prm: &PrmParams, chain: &Chain) -> Result<f64> {
    let features = env.featurize(chain)?;
    Ok(prm.raw(&features).clamp(0.0, 1.0))
}

pub struct PrmScorer<'a, E> {
    pub env: &'a E,
    pub prm: &'a PrmParams,
}

impl<E: ReasoningEnv> ChainScorer for PrmScorer<'_, E> {
    fn score(&self, chain: &Chain) -> Result<f64> {
        prm_predict(self.env, self.prm, chain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmTrainReport {
    /// Training MSE after each iteration, starting with the initial loss.
    pub losses: Vec<f64>,
    pub iterations: usize,
}

impl PrmTrainReport {
    pub fn final_mse(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

struct Design {
    rows: Vec<Features>,
    targets: Vec<f64>,
    dim: usize,
}

impl Design {
    fn build<E: ReasoningEnv>(env: &E, data: &[(Chain, f64)]) -> Result<Self> {
        let rows = data
            .iter()
            .map(|(c, _)| env.featurize(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            targets: data.iter().map(|(_, q)| *q).collect(),
            dim: env.spec().feature_dim,
        })
    }

    /// Predictions for parameters packed as `[w..., b]`.
    fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let b = theta[self.dim];
        self.rows
            .iter()
            .map(|f| b + f.active().iter().map(|&(j, x)| theta[j] * x).sum::<f64>())
            .collect()
    }

    /// `Xᵀ v` in packed layout.
    fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim + 1];
        for (f, &vi) in self.rows.iter().zip(v) {
            for &(j, x) in f.active() {
                out[j] += x * vi;
            }
            out[self.dim] += vi;
        }
        out
    }

    fn mse(&self, theta: &[f64]) -> f64 {
        let n = self.targets.len() as f64;
        self.apply(theta)
            .iter()
            .zip(&self.targets)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / n
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.targets.len() as f64;
        let resid: Vec<f64> = self
            .apply(theta)
            .iter()
            .zip(&self.targets)
            .map(|(p, y)| 2.0 * (p - y) / n)
            .collect();
        self.apply_t(&resid)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean squared error of the unclipped head and its gradient, packed as
/// `[d/dw..., d/db]`.
pub fn mse_and_grad<E: ReasoningEnv>(
    env: &E,
    prm: &PrmParams,
    data: &[(Chain, f64)],
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(invalid("empty PRM dataset"));
    }
    let design = Design::build(env, data)?;
    let mut theta = prm.weights.clone();
    theta.push(prm.bias);
    Ok((design.mse(&theta), design.grad(&theta)))
}

pub const PRM_MAX_STEPS: usize = 10_000;
pub const PRM_MIN_IMPROVEMENT: f64 = 1e-8;

/// Fits the head by descent on the MSE of the unclipped output.
///
/// Search directions are conjugate gradients with an exact line search on the
/// quadratic, restarted from the steepest-descent direction every `dim + 1`
/// steps. Each step therefore never increases the loss.
pub fn train_prm<E: ReasoningEnv>(env: &E, data: &[(Chain, f64)]) -> Result<(PrmParams, PrmTrainReport)> {
    if data.is_empty() {
        return Err(invalid("empty PRM dataset"));
    }
    let design = Design::build(env, data)?;
    let p = design.dim + 1;
    if data.len() < design.dim / 4 {
        log::warn!("PRM dataset has {} samples for {} features", data.len(), design.dim);
    }
    let mut theta = vec![0.0; p];
    let mut loss = design.mse(&theta);
    let mut losses = vec![loss];
    let mut grad = design.grad(&theta);
    let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut iterations = 0;
    let n = data.len() as f64;
    while iterations < PRM_MAX_STEPS {
        let gg = dot(&grad, &grad);
        if gg == 0.0 {
            break;
        }
        // exact minimizer along dir of the quadratic: -g·d / dᵀHd, H = 2XᵀX/n
        let xd = design.apply(&dir);
        let curvature = 2.0 * dot(&xd, &xd) / n;
        if !(curvature > 0.0) {
            break;
        }
        let step = -dot(&grad, &dir) / curvature;
        let candidate: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
        let new_loss = design.mse(&candidate);
        if !new_loss.is_finite() {
            return Err(PropaError::Numerical("PRM loss diverged".into()));
        }
        iterations += 1;
        if new_loss > loss {
            // rounding at convergence; keep the better point
            break;
        }
        theta = candidate;
        let improvement = loss - new_loss;
        loss = new_loss;
        losses.push(loss);
        if improvement < PRM_MIN_IMPROVEMENT {
            break;
        }
        let new_grad = design.grad(&theta);
        let beta = if iterations % p == 0 {
            0.0
        } else {
            (dot(&new_grad, &new_grad) / gg).max(0.0)
        };
        dir = new_grad
            .iter()
            .zip(&dir)
            .map(|(g, d)| -g + beta * d)
            .collect();
        grad = new_grad;
    }
    let bias = theta.pop().expect("packed bias");
    Ok((
        PrmParams {
            weights: theta,
            bias,
        },
        PrmTrainReport { losses, iterations },
    ))
}

/// Header `feature_dim`, then the weights on one line and the bias on the next.
pub fn write_prm_checkpoint<W: Write>(mut out: W, prm: &PrmParams) -> Result<()> {
    writeln!(out, "{}", prm.weights.len())?;
    let line: Vec<String> = prm.weights.iter().map(|w| format!("{w:.16e}")).collect();
    writeln!(out, "{}", line.join(" "))?;
    writeln!(out, "{:.16e}", prm.bias)?;
    Ok(())
}

pub fn read_prm_checkpoint<R: BufRead>(input: R) -> Result<PrmParams> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let perr = |line: usize, message: String| PropaError::Parse { line, message };
    if lines.len() < 3 {
        return Err(perr(lines.len(), "PRM checkpoint needs 3 lines".into()));
    }
    let dim: usize = lines[0].trim().parse().map_err(|e: std::num::ParseIntError| perr(1, e.to_string()))?;
    let weights = lines[1]
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| perr(2, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if weights.len() != dim {
        return Err(perr(2, format!("expected {dim} weights, got {}", weights.len())));
    }
    let bias = lines[2].trim().parse::<f64>().map_err(|e| perr(3, e.to_string()))?;
    Ok(PrmParams { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PrefixSum, ProblemInstance};

    fn chain(digits: &[i64], steps: &[i64]) -> Chain {
        let mut c = Chain::empty(ProblemInstance::from_digits(0, digits).unwrap());
        for &s in steps {
            c.push(PrefixSum::reason(s)).unwrap();
        }
        c
    }

    #[test]
    fn prediction_is_clipped() {
        let env = PrefixSum::new();
        let c = chain(&[3, 1], &[3]);
        assert_eq!(prm_predict(&env, &PrmParams::constant(111, 0.5), &c).unwrap(), 0.5);
        assert_eq!(prm_predict(&env, &PrmParams::constant(111, 2.0), &c).unwrap(), 1.0);
        assert_eq!(prm_predict(&env, &PrmParams::constant(111, -1.0), &c).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_is_fit_exactly() {
        let env = PrefixSum::new();
        let (prm, report) = train_prm(&env, &[(chain(&[3, 1], &[3]), 0.8)]).unwrap();
        assert!(report.final_mse() < 1e-8);
        assert!((prm_predict(&env, &prm, &chain(&[3, 1], &[3])).unwrap() - 0.8).abs() < 1e-4);
    }

    #[test]
    fn constant_targets_give_constant_prediction() {
        let env = PrefixSum::new();
        let data: Vec<(Chain, f64)> = (0..40)
            .map(|i| (chain(&[i % 10, (i / 10) % 10], &[i % 10]), 0.7))
            .collect();
        let (prm, report) = train_prm(&env, &data).unwrap();
        assert!(report.final_mse() < 1e-10);
        for (c, _) in &data {
            assert!((prm_predict(&env, &prm, c).unwrap() - 0.7).abs() < 1e-5);
        }
    }

    #[test]
    fn losses_never_increase() {
        let env = PrefixSum::new();
        let data: Vec<(Chain, f64)> = (0..200)
            .map(|i| {
                let d = [i % 10, (i * 7) % 10, (i * 3) % 10];
                let steps: Vec<i64> = (0..(i % 3) as usize).map(|k| d[..=k].iter().sum()).collect();
                (chain(&d, &steps), ((i * 37) % 11) as f64 / 10.0)
            })
            .collect();
        let (_, report) = train_prm(&env, &data).unwrap();
        assert!(report.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.iterations < PRM_MAX_STEPS);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(train_prm(&PrefixSum::new(), &[]), Err(PropaError::InvalidArgument(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let prm = PrmParams {
            weights: (0..111).map(|i| (i as f64 * 0.1).sin() / 3.0).collect(),
            bias: std::f64::consts::PI / 7.0,
        };
        let mut buf = Vec::new();
        write_prm_checkpoint(&mut buf, &prm).unwrap();
        assert_eq!(read_prm_checkpoint(&buf[..]).unwrap(), prm);
    }
}
