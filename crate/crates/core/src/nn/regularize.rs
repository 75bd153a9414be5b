//! Dropout and l2 weight penalty for the regularized baselines.

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const DEFAULT_L2: f64 = 1e-4;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid!("dropout rate must be in [0, 1), got {rate}"));
    }
    Ok(())
}

/// Multiplier per unit: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_keep_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    check_rate(rate)?;
    let scale = 1.0 / (1.0 - rate);
    Tensor::from_fn(shape.to_vec(), |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            scale
        }
    })
}

/// Training-time dropout of a plain tensor. At evaluation time dropout is
/// the identity and this function is not called.
pub fn dropout(input: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = dropout_keep_mask(input.shape(), rate, &mut rng)?;
    input.zip_map(&keep, |x, k| x * k)
}

/// `coefficient · Σ‖θ‖²` over conv and fc weights (biases excluded).
pub fn l2_penalty(params: &ParamSet, coefficient: f64) -> Result<f64> {
    if !(coefficient >= 0.0) {
        return Err(invalid!("l2 coefficient must be non-negative, got {coefficient}"));
    }
    if coefficient == 0.0 {
        return Ok(0.0);
    }
    Ok(coefficient
        * params
            .iter()
            .filter(|p| p.is_weight())
            .map(|p| p.value().sum_squares())
            .sum::<f64>())
}

/// Tape version of [`l2_penalty`] over bound parameter leaves.
pub fn l2_penalty_node(
    tape: &mut Tape,
    params: &ParamSet,
    ids: &[NodeId],
    coefficient: f64,
) -> Result<Option<NodeId>> {
    if !(coefficient >= 0.0) {
        return Err(invalid!("l2 coefficient must be non-negative, got {coefficient}"));
    }
    if coefficient == 0.0 {
        return Ok(None);
    }
    let mut total: Option<NodeId> = None;
    for (p, &id) in params.iter().zip(ids) {
        if !p.is_weight() {
            continue;
        }
        let sq = tape.sum_squares(id);
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.map(|t| tape.scale(t, coefficient)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;

    #[test]
    fn zero_coefficient_is_zero() {
        let mut ps = ParamSet::new();
        ps.push(Parameter::new("conv1.kernels", Tensor::ones([3]).unwrap())).unwrap();
        assert_eq!(l2_penalty(&ps, 0.0).unwrap(), 0.0);
        assert!(l2_penalty(&ps, -1.0).is_err());
    }

    #[test]
    fn biases_are_not_penalized() {
        let mut ps = ParamSet::new();
        ps.push(Parameter::new("fc1.weights", Tensor::full([2], 2.0).unwrap())).unwrap();
        ps.push(Parameter::new("fc1.bias", Tensor::full([2], 100.0).unwrap())).unwrap();
        assert_eq!(l2_penalty(&ps, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn rate_zero_is_identity() {
        let x = Tensor::from_fn([5, 4], |i| i as f64).unwrap();
        assert_eq!(dropout(&x, 0.0, 1).unwrap(), x);
        assert!(dropout(&x, 1.0, 1).is_err());
    }

    #[test]
    fn half_rate_survivor_fraction() {
        let x = Tensor::ones([10_000]).unwrap();
        let y = dropout(&x, 0.5, 42).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&survivors), "{survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
