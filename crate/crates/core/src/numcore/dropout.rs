use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Inverted dropout: survivors are scaled by `1/(1-rate)` at training time,
/// so evaluation is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mask<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut mask = Tensor::zeros(shape);
        for m in mask.data_mut() {
            if rng.gen::<f64>() < keep {
                *m = scale;
            }
        }
        mask
    }

    /// Applies dropout when `rng` is given (training mode); otherwise
    /// returns `x` unchanged.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        match rng {
            Some(rng) if self.rate > 0.0 => {
                let mask = self.mask(tape.value(x).shape(), rng);
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empirical_rate_and_rescaling() {
        let d = Dropout::new(0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = d.mask(&[100_000], &mut rng);
        let zeros = mask.data().iter().filter(|&&m| m == 0.0).count();
        let rate = zeros as f64 / 1e5;
        assert!((rate - 0.2).abs() < 0.02, "rate {rate}");
        assert!(mask
            .data()
            .iter()
            .all(|&m| m == 0.0 || (m - 1.25).abs() < 1e-15));
    }

    #[test]
    fn eval_mode_is_identity() {
        let d = Dropout::new(0.5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[3, 4], 2.0));
        let y = d.apply::<ChaCha8Rng>(&mut tape, x, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn invalid_rate() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }
}
