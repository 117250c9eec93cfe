//! Huber reconstruction, velocity and acceleration losses with analytic
//! gradients with respect to the prediction. Motion is `[N x C]`, one frame
//! per row; squared norms sum over channels and average over frames.

use cospeech_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub huber: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub huber_delta: f64,
}

impl LossBreakdown {
    fn compose(huber: f64, velocity: f64, acceleration: f64, w: &LossWeights) -> Self {
        Self { huber, velocity, acceleration, total: huber + w.lambda_vel * velocity + w.lambda_acc * acceleration }
    }

    pub fn is_finite(&self) -> bool {
        self.huber.is_finite() && self.velocity.is_finite() && self.acceleration.is_finite() && self.total.is_finite()
    }
}

fn check_pair<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>) -> Result<()> {
    if x0.shape() != x0_hat.shape() {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", x0.shape(), x0_hat.shape())));
    }
    Ok(())
}

fn huber_elem(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Mean elementwise Huber penalty of `x0 − x̂0`.
pub fn huber_loss<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>, delta: f64) -> Result<f64> {
    check_pair(x0, x0_hat)?;
    if x0.is_empty() {
        return Err(Error::Shape("huber loss of an empty tensor".into()));
    }
    let sum: f64 = x0.data().iter().zip(x0_hat.data()).map(|(a, b)| huber_elem(a.as_f64() - b.as_f64(), delta)).sum();
    Ok(sum / x0.len() as f64)
}

/// Sum over frames of the squared `order`-th difference of the residual, and
/// the number of difference terms.
fn difference_energy<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>, start: usize, len: usize, order: usize) -> (f64, usize) {
    if len <= order {
        return (0.0, 0);
    }
    let c = x0.cols();
    let e = |r: usize, k: usize| x0_hat.get(r, k).as_f64() - x0.get(r, k).as_f64();
    let mut sum = 0.0;
    for j in start..start + len - order {
        for k in 0..c {
            let d = if order == 1 { e(j + 1, k) - e(j, k) } else { e(j + 2, k) - 2.0 * e(j + 1, k) + e(j, k) };
            sum += d * d;
        }
    }
    (sum, len - order)
}

/// `1/(N−1) Σ_j ‖Δx0_j − Δx̂0_j‖²`.
pub fn velocity_loss<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>) -> Result<f64> {
    check_pair(x0, x0_hat)?;
    if x0.rows() < 2 {
        return Err(Error::Shape(format!("velocity loss needs 2 frames, got {}", x0.rows())));
    }
    let (s, n) = difference_energy(x0, x0_hat, 0, x0.rows(), 1);
    Ok(s / n as f64)
}

/// `1/(N−2) Σ_j ‖Δ²x0_j − Δ²x̂0_j‖²`.
pub fn acceleration_loss<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>) -> Result<f64> {
    check_pair(x0, x0_hat)?;
    if x0.rows() < 3 {
        return Err(Error::Shape(format!("acceleration loss needs 3 frames, got {}", x0.rows())));
    }
    let (s, n) = difference_energy(x0, x0_hat, 0, x0.rows(), 2);
    Ok(s / n as f64)
}

pub fn total_loss<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>, lambda_vel: f64, lambda_acc: f64, delta: f64) -> Result<LossBreakdown> {
    let w = LossWeights { lambda_vel, lambda_acc, huber_delta: delta };
    Ok(LossBreakdown::compose(huber_loss(x0, x0_hat, delta)?, velocity_loss(x0, x0_hat)?, acceleration_loss(x0, x0_hat)?, &w))
}

/// Loss and its gradient for clips stacked along rows (`lens` rows each).
/// Huber averages over every element; velocity and acceleration average over
/// every difference term in the batch, so clips shorter than the difference
/// order contribute nothing.
pub fn batch_loss_and_grad<S: Scalar>(
    x0: &Tensor<S>,
    x0_hat: &Tensor<S>,
    lens: &[usize],
    w: &LossWeights,
) -> Result<(LossBreakdown, Tensor<S>)> {
    check_pair(x0, x0_hat)?;
    if lens.iter().sum::<usize>() != x0.rows() || x0.is_empty() {
        return Err(Error::Shape(format!("segment lengths {lens:?} do not cover {} rows", x0.rows())));
    }
    let c = x0.cols();
    let count = x0.len() as f64;
    let mut grad = vec![0.0f64; x0.len()];
    let mut huber = 0.0;
    for (i, (a, b)) in x0.data().iter().zip(x0_hat.data()).enumerate() {
        let r = a.as_f64() - b.as_f64();
        huber += huber_elem(r, w.huber_delta);
        grad[i] = -r.clamp(-w.huber_delta, w.huber_delta) / count;
    }
    huber /= count;

    let mut terms = [(0.0, 0usize); 2];
    let mut start = 0;
    for &len in lens {
        for order in 1..=2 {
            let (s, n) = difference_energy(x0, x0_hat, start, len, order);
            terms[order - 1].0 += s;
            terms[order - 1].1 += n;
        }
        start += len;
    }
    let e = |r: usize, k: usize| x0_hat.get(r, k).as_f64() - x0.get(r, k).as_f64();
    let mut start = 0;
    for &len in lens {
        if terms[0].1 > 0 && w.lambda_vel != 0.0 {
            let k1 = 2.0 * w.lambda_vel / terms[0].1 as f64;
            for j in start..(start + len).saturating_sub(1) {
                for k in 0..c {
                    let d = k1 * (e(j + 1, k) - e(j, k));
                    grad[(j + 1) * c + k] += d;
                    grad[j * c + k] -= d;
                }
            }
        }
        if terms[1].1 > 0 && w.lambda_acc != 0.0 {
            let k2 = 2.0 * w.lambda_acc / terms[1].1 as f64;
            for j in start..(start + len).saturating_sub(2) {
                for k in 0..c {
                    let d = k2 * (e(j + 2, k) - 2.0 * e(j + 1, k) + e(j, k));
                    grad[j * c + k] += d;
                    grad[(j + 1) * c + k] -= 2.0 * d;
                    grad[(j + 2) * c + k] += d;
                }
            }
        }
        start += len;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let breakdown = LossBreakdown::compose(huber, mean(terms[0]), mean(terms[1]), w);
    let grad = Tensor::from_vec(x0.rows(), c, grad.into_iter().map(S::from_f64).collect())?;
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn huber_hand_values() {
        assert_eq!(huber_loss(&col(&[0.5]), &col(&[0.0]), 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(&col(&[2.0]), &col(&[0.0]), 1.0).unwrap(), 1.5);
        assert_eq!(huber_loss(&col(&[1.0, 2.0]), &col(&[1.0, 2.0]), 1.0).unwrap(), 0.0);
        assert!(huber_loss(&col(&[1.0]), &col(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn difference_hand_values() {
        let (x0, xh) = (col(&[0.0, 1.0, 3.0]), col(&[0.0, 1.0, 2.0]));
        assert_eq!(velocity_loss(&x0, &xh).unwrap(), 0.5);
        assert_eq!(acceleration_loss(&x0, &xh).unwrap(), 1.0);
        let b = total_loss(&x0, &xh, 0.1, 0.01, 1.0).unwrap();
        assert!((b.huber - 1.0 / 6.0).abs() < 1e-15);
        assert!((b.total - (1.0 / 6.0 + 0.05 + 0.01)).abs() < 1e-15);
        assert!((b.total - 0.22667).abs() < 1e-5);
        assert!(velocity_loss(&col(&[1.0]), &col(&[1.0])).is_err());
        assert!(acceleration_loss(&col(&[1.0, 2.0]), &col(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn invariances_and_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(total_loss(&x0, &x0, 0.1, 0.01, 1.0).unwrap(), LossBreakdown::default());
        let offset = Tensor::from_fn(6, 3, |r, c| x0.get(r, c) + 0.75);
        assert!(velocity_loss(&x0, &offset).unwrap() < 1e-24);
        let ramp = Tensor::from_fn(6, 3, |r, c| x0.get(r, c) + 0.3 * r as f64 - 0.2 * c as f64 + 1.0);
        assert!(acceleration_loss(&x0, &ramp).unwrap() < 1e-24);
        let b = total_loss(&x0, &ramp, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(b.total, b.huber);
    }

    /// Central differences of the batch loss against its analytic gradient.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = LossWeights { lambda_vel: 0.1, lambda_acc: 0.01, huber_delta: 1.0 };
        for lens in [vec![3], vec![3, 1, 4, 2]] {
            let n: usize = lens.iter().sum();
            for _ in 0..5 {
                let x0 = Tensor::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
                let xh = Tensor::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
                let (_, g) = batch_loss_and_grad(&x0, &xh, &lens, &w).unwrap();
                let h = 1e-6;
                for i in 0..xh.len() {
                    let mut p = xh.clone();
                    p.data_mut()[i] += h;
                    let mut m = xh.clone();
                    m.data_mut()[i] -= h;
                    let lp = batch_loss_and_grad(&x0, &p, &lens, &w).unwrap().0.total;
                    let lm = batch_loss_and_grad(&x0, &m, &lens, &w).unwrap().0.total;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g.data()[i];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn single_clip_batch_matches_total_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = Tensor::from_fn(7, 4, |_, _| rng.random_range(-1.5..1.5));
        let xh = Tensor::from_fn(7, 4, |_, _| rng.random_range(-1.5..1.5));
        let w = LossWeights { lambda_vel: 0.1, lambda_acc: 0.01, huber_delta: 0.5 };
        let (b, _) = batch_loss_and_grad(&x0, &xh, &[7], &w).unwrap();
        let t = total_loss(&x0, &xh, 0.1, 0.01, 0.5).unwrap();
        assert!((b.total - t.total).abs() < 1e-12);
    }
}
