//! Small reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Supports one level of nested differentiation: [`Tape::grad`] records a
//! gradient on the tape so a loss built from it can be differentiated again
//! with [`Tape::backward`]. This is what the Lyapunov projection in the
//! policy needs, since the policy output contains the spatial gradient of
//! the Lyapunov candidate.

mod tape;
mod tensor;

pub use tape::{gradient_of_scalar_field, Gradients, Tape, Var};
pub(crate) use tape::{sigmoid, smooth_relu, smooth_relu_grad, softplus};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let i = t.constant(Tensor::new(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), t.value(a));
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.softplus(z);
        assert!((t.value(s).item() - 0.6931471805599453).abs() < 1e-16);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        match t.matmul(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            e => panic!("{e:?}"),
        }
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn least_squares_gradient() {
        // d/dW |Wx - y|^2 = 2 (Wx - y) x^T
        let w0 = Tensor::new(2, 3, vec![0.3, -0.1, 0.7, 1.2, 0.4, -0.5]).unwrap();
        let x0 = Tensor::column(&[1.0, -2.0, 0.5]);
        let y0 = Tensor::column(&[0.2, 0.9]);
        let mut t = Tape::new();
        let w = t.variable(w0.clone());
        let x = t.constant(x0.clone());
        let y = t.constant(y0.clone());
        let wx = t.matmul(w, x).unwrap();
        let r = t.sub(wx, y).unwrap();
        let l = t.norm_sq(r);
        let g = t.backward(l).unwrap();
        let res: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|k| w0.get(i, k) * x0.data()[k]).sum::<f64>() - y0.data()[i])
            .collect();
        for i in 0..2 {
            for k in 0..3 {
                let expected = 2.0 * res[i] * x0.data()[k];
                assert!((g.get(w).unwrap().get(i, k) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get_or_zeros(x, [1, 1]).item(), 0.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::zeros(2, 1));
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarOutput([2, 1]))));
    }

    #[test]
    fn gradient_of_norm_squared_field() {
        let mut t = Tape::new();
        let x = Tensor::new(2, 3, vec![1., -2., 0.5, 0.1, 0.2, 0.3]).unwrap();
        let (_, g) = gradient_of_scalar_field(&mut t, x.clone(), |t, x| {
            let sq = t.square(x);
            Ok(t.row_sum(sq))
        })
        .unwrap();
        for (a, b) in t.value(g).data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn gradient_of_quadratic_form() {
        // f(x) = x^T A x  =>  grad = (A + A^T) x
        let a0 = Tensor::new(2, 2, vec![1.0, 2.0, -0.5, 3.0]).unwrap();
        let x0 = Tensor::row(&[0.7, -1.3]);
        let mut t = Tape::new();
        let a = t.constant(a0.clone());
        let (_, g) = gradient_of_scalar_field(&mut t, x0.clone(), |t, x| {
            let xa = t.matmul_t(x, false, a, true)?; // row (A x)^T
            let prod = t.mul(xa, x)?;
            Ok(t.row_sum(prod))
        })
        .unwrap();
        let x = x0.data();
        for i in 0..2 {
            let expected: f64 = (0..2)
                .map(|k| (a0.get(i, k) + a0.get(k, i)) * x[k])
                .sum();
            assert!((t.value(g).data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_cannot_be_double_differentiated() {
        let mut t = Tape::new();
        let r = gradient_of_scalar_field(&mut t, Tensor::row(&[0.5, -0.2]), |t, x| {
            let r = t.relu(x);
            Ok(t.row_sum(r))
        });
        assert!(matches!(
            r,
            Err(Error::UnsupportedSecondDerivative { op: "relu" })
        ));
    }
}
