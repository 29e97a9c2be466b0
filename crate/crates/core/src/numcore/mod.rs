//! Dense tensors, reverse-mode autodiff, the LSTM cell and the Adam optimizer.

mod adam;
mod dropout;
mod gradcheck;
mod lstm;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, PlateauDecay};
pub use dropout::Dropout;
pub use gradcheck::{grad_check, grad_check_with, relative_error, GRAD_CHECK_FLOOR};
pub use lstm::{lstm_cell, lstm_layer, LstmParams, LstmVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `W x + b` for `W: [m, n]`, `x: [n]`, `b: [m]`.
pub fn affine(w: &Tensor, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape()[1] != x.len() {
        return Err(Error::Dimension {
            op: "affine",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    if w.shape()[0] != b.len() {
        return Err(Error::Dimension {
            op: "affine",
            left: w.shape().to_vec(),
            right: vec![b.len()],
        });
    }
    Ok((0..b.len())
        .map(|i| w.row(i).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[i])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Tanh,
    Sigmoid,
}

pub fn pointwise(kind: Pointwise, x: &[f64]) -> Vec<f64> {
    match kind {
        Pointwise::Tanh => x.iter().map(|v| v.tanh()).collect(),
        Pointwise::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stabilized softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("softmax input is not finite".into()));
    }
    let mut out = x.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity; a zero-norm argument is an error, never a silent 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "cosine",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let b0 = [0.0, 0.0];
        assert_eq!(affine(&Tensor::identity(2), &[3.0, -1.0], &b0).unwrap(), vec![3.0, -1.0]);
        assert_eq!(
            affine(&Tensor::zeros(&[2, 2]), &[7.0, -9.0], &[1.0, 2.0]).unwrap(),
            vec![1.0, 2.0]
        );
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(affine(&w, &[1.0, 1.0], &b0).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        match affine(&w, &[1.0, 1.0], &[0.0, 0.0]) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tape_affine_matches_plain_affine() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(w);
        let x = tape.param(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let b = tape.param(Tensor::vector(vec![0.5, -0.5]).unwrap());
        let y = tape.affine(wv, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5, 6.5]);
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(pointwise(Pointwise::Tanh, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(pointwise(Pointwise::Sigmoid, &[0.0]), vec![0.5]);
        let t = pointwise(Pointwise::Tanh, &[1.0])[0];
        assert!((t - 0.761_594_155_955_764_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let p = softmax(&[1.0, 2.0]).unwrap();
        assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((p[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NumericDomain(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedSimilarity)));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..16).prop_flat_map(|n| proptest::collection::vec(-10.0f64..10.0, n))
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(x in vec_strategy(), c in -50.0f64..50.0) {
            let p = softmax(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // order preserving
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x[i] < x[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            pair in (1usize..16).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let (u, v) = pair;
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
            let us: Vec<f64> = u.iter().map(|x| x * a).collect();
            let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((c - cosine(&us, &vs).unwrap()).abs() < 1e-9);
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
