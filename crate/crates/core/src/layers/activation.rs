use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

#[derive(Debug, Clone)]
pub struct ReluTape {
    shape: Shape4,
    active: Vec<bool>,
}

/// `max(x, 0)`.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, ReluTape) {
    let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        y,
        ReluTape {
            shape: x.shape(),
            active,
        },
    )
}

/// Passes gradient where the input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(tape: &ReluTape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != tape.shape {
        return Err(shape_err!(
            "relu backward: grad shape {} does not match {}",
            grad_out.shape(),
            tape.shape
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&tape.active)
        .map(|(&g, &a)| if a { g } else { T::zero() })
        .collect();
    Tensor::from_vec(tape.shape, data)
}

/// Identity output activation of the synthesis head.
pub fn linear_activation<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    x
}

pub fn linear_backward<T: Scalar>(grad_out: Tensor<T>) -> Tensor<T> {
    grad_out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition_and_routing() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 3).unwrap(), vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, tape) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::new(x.shape(), 1.0);
        assert_eq!(relu_backward(&tape, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn positive_input_is_identity() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 2, 2).unwrap(), vec![0.5, 1.0, 2.0, 3.0]).unwrap();
        let (y, tape) = relu_forward(&x);
        assert!(y.bit_eq(&x));
        let g = Tensor::from_vec(x.shape(), vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        assert!(relu_backward(&tape, &g).unwrap().bit_eq(&g));
        assert!(relu_backward(&tape, &Tensor::new(Shape4::new(1, 1, 1, 4).unwrap(), 0.0)).is_err());
    }

    #[test]
    fn linear_is_identity_both_ways() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 2).unwrap(), vec![-3.0f32, 4.0]).unwrap();
        assert!(linear_activation(x.clone()).bit_eq(&x));
        assert!(linear_backward(x.clone()).bit_eq(&x));
    }
}
