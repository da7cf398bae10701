//! Iteration-weighted L1 trajectory loss.
//!
//! Each refinement iteration i of m is supervised with weight
//! `gamma^(m-i) / m`; the per-iteration term is the mean absolute error over
//! all frames, points, and coordinates, in input-pixel units.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Per-iteration weights `gamma^(m-i) / m` for i = 1..=m.
pub fn iteration_weights(m: usize, gamma: f64) -> Vec<f64> {
    (1..=m)
        .map(|i| gamma.powi((m - i) as i32) / m as f64)
        .collect()
}

/// Closed form of the weight total: (1 - gamma^m) / (m (1 - gamma)),
/// or 1 when gamma = 1.
pub fn weight_sum(m: usize, gamma: f64) -> f64 {
    if (gamma - 1.0).abs() < 1e-12 {
        1.0
    } else {
        (1.0 - gamma.powi(m as i32)) / (m as f64 * (1.0 - gamma))
    }
}

/// Weighted loss over the post-iteration states (`states` excludes the
/// broadcast initialization).
pub fn trajectory_loss<S: Scalar>(
    tape: &mut Tape<S>,
    states: &[Var],
    gt: Var,
    gamma: f64,
) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::InvalidInput("loss needs at least one iteration".into()));
    }
    if !(0.0 < gamma && gamma <= 1.0) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} outside (0, 1]")));
    }
    let weights = iteration_weights(states.len(), gamma);
    let mut total: Option<Var> = None;
    for (&state, &w) in states.iter().zip(&weights) {
        let diff = tape.sub(state, gt)?;
        let l1 = tape.abs(diff);
        let term = tape.mean(l1);
        let term = tape.scale(term, S::from_f64(w));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn perfect_prediction_gives_zero() {
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let states = vec![gt, gt, gt];
        let loss = trajectory_loss(&mut tape, &states, gt, 0.8).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn hand_traced_weighted_case() {
        // m=4, gamma=0.8, every iteration at uniform error 2.0:
        // (1/4)(0.512 + 0.64 + 0.8 + 1.0) * 2.0 = 1.476
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::zeros(&[2, 3, 2]));
        let off = tape.constant(Tensor::full(&[2, 3, 2], 2.0));
        let states = vec![off; 4];
        let loss = trajectory_loss(&mut tape, &states, gt, 0.8).unwrap();
        assert!((tape.value(loss).item() - 1.476).abs() < 1e-9);
    }

    #[test]
    fn single_iteration_is_plain_l1() {
        for gamma in [0.5, 0.8, 1.0] {
            let mut tape = Tape::<f64>::new();
            let gt = tape.constant(Tensor::zeros(&[2, 2, 2]));
            let off = tape.constant(Tensor::full(&[2, 2, 2], 3.5));
            let loss = trajectory_loss(&mut tape, &[off], gt, gamma).unwrap();
            assert!((tape.value(loss).item() - 3.5).abs() < 1e-12, "gamma {gamma}");
        }
    }

    #[test]
    fn weight_sum_identity_holds() {
        for m in 1..=8 {
            for gamma in [0.3, 0.8, 0.95, 1.0] {
                let direct: f64 = iteration_weights(m, gamma).iter().sum();
                assert!(
                    (direct - weight_sum(m, gamma)).abs() < 1e-12,
                    "m={m} gamma={gamma}"
                );
            }
        }
    }

    #[test]
    fn loss_nonnegative_and_zero_only_at_exact_match() {
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.25));
        let near = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.25 + 1e-3));
        let loss = trajectory_loss(&mut tape, &[gt, near], gt, 0.8).unwrap();
        assert!(tape.value(loss).item() > 0.0);
    }
}
