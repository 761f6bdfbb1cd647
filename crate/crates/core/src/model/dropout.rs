//! Inverted dropout with an auditable draw counter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

/// Dropout configuration: keep probability is `1 - rate`; surviving
/// entries are scaled by `1 / (1 - rate)` so the mask has unit mean.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub active: bool,
}

/// Owns the mask RNG and counts every sampled mask entry, so tests and run
/// reports can assert that a configuration sampled no masks at all.
#[derive(Clone, Debug)]
pub struct DropoutState {
    spec: DropoutSpec,
    rng: ChaCha12Rng,
    draws: u64,
}

impl DropoutState {
    pub fn new(spec: DropoutSpec, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {}",
                spec.rate
            )));
        }
        Ok(DropoutState { spec, rng: ChaCha12Rng::seed_from_u64(seed), draws: 0 })
    }

    /// A state that never drops and never samples.
    pub fn inactive() -> Self {
        DropoutState {
            spec: DropoutSpec { rate: 0.0, active: false },
            rng: ChaCha12Rng::seed_from_u64(0),
            draws: 0,
        }
    }

    pub fn active(rate: f64, seed: u64) -> Result<Self> {
        DropoutState::new(DropoutSpec { rate, active: true }, seed)
    }

    pub fn spec(&self) -> DropoutSpec {
        self.spec
    }

    /// Total mask entries sampled so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// Applies dropout to `x`. Inactive or zero-rate states return `x`
/// untouched without consuming randomness (the identity is exact and the
/// draw counter stays put); otherwise a fresh Bernoulli mask is sampled and
/// multiplied in as a constant.
pub fn apply_dropout(g: &Graph, x: &Tensor, state: &mut DropoutState) -> Result<Tensor> {
    if !state.spec.active || state.spec.rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = 1.0 / (1.0 - state.spec.rate);
    let mut mask = Value::zeros(x.shape());
    for m in mask.data_mut() {
        let u: f64 = state.rng.random();
        *m = if u < state.spec.rate { 0.0 } else { keep_scale };
    }
    state.draws += mask.numel() as u64;
    g.mul(x, &g.constant(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_exact_identity_with_no_draws() {
        let g = Graph::new();
        let x = g.leaf(Value::vector(&[1.0, -2.0, 3.0]), true);
        let mut st = DropoutState::new(DropoutSpec { rate: 0.0, active: true }, 42).unwrap();
        let y = apply_dropout(&g, &x, &mut st).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(st.draws(), 0);
        let mut off = DropoutState::inactive();
        let z = apply_dropout(&g, &x, &mut off).unwrap();
        assert_eq!(z.data(), x.data());
        assert_eq!(off.draws(), 0);
    }

    #[test]
    fn half_rate_on_ones_yields_zero_or_two() {
        let g = Graph::new();
        let x = g.constant(Value::ones(&[2, 2]));
        let mut st = DropoutState::active(0.5, 7).unwrap();
        let y = apply_dropout(&g, &x, &mut st).unwrap();
        for &v in y.data() {
            assert!(v == 0.0 || v == 2.0, "unexpected mask value {v}");
        }
        assert_eq!(st.draws(), 4);
    }

    #[test]
    fn mask_mean_approaches_one() {
        let g = Graph::new();
        let n = 100_000;
        let x = g.constant(Value::ones(&[n]));
        let mut st = DropoutState::active(0.3, 11).unwrap();
        let y = apply_dropout(&g, &x, &mut st).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "inverted scaling off: mean {mean}");
    }

    #[test]
    fn same_seed_same_mask() {
        let g = Graph::new();
        let x = g.constant(Value::ones(&[32]));
        let mut a = DropoutState::active(0.4, 5).unwrap();
        let mut b = DropoutState::active(0.4, 5).unwrap();
        let ya = apply_dropout(&g, &x, &mut a).unwrap();
        let yb = apply_dropout(&g, &x, &mut b).unwrap();
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn out_of_range_rates_rejected() {
        assert!(DropoutState::active(1.0, 0).is_err());
        assert!(DropoutState::active(-0.1, 0).is_err());
        assert!(DropoutState::active(0.999, 0).is_ok());
    }
}
