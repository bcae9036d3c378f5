//! Elementwise activations and the Hadamard product, forward and backward.

use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// d_input = d_output where the forward input was positive, else 0.
pub fn relu_backward(input: &Tensor, d_output: &Tensor) -> Result<Tensor> {
    input.check_same_shape("relu_backward", d_output)?;
    let data = input
        .data()
        .iter()
        .zip(d_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Backward through the logistic map given its forward *output*:
/// d_input = d_output * s * (1 - s).
pub fn sigmoid_backward(output: &Tensor, d_output: &Tensor) -> Result<Tensor> {
    output.check_same_shape("sigmoid_backward", d_output)?;
    let data = output
        .data()
        .iter()
        .zip(d_output.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Elementwise product; shapes must match exactly.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape("hadamard", b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Backward of the Hadamard product: routes d*b to a and d*a to b.
pub fn hadamard_backward(a: &Tensor, b: &Tensor, d_output: &Tensor) -> Result<(Tensor, Tensor)> {
    a.check_same_shape("hadamard_backward", b)?;
    a.check_same_shape("hadamard_backward", d_output)?;
    let d_a = hadamard(d_output, b)?;
    let d_b = hadamard(d_output, a)?;
    Ok((d_a, d_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::rng::Rng;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let out = sigmoid(&Tensor::zeros([1, 1, 1, 1]));
        assert_eq!(out.data()[0], 0.5);
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::from_vec([1, 1, 1, 2], vec![-3.0, 3.0]).unwrap();
        let out = relu(&input);
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let zero = Tensor::zeros([1, 1, 1, 1]);
        let s = sigmoid(&zero);
        let d = sigmoid_backward(&s, &Tensor::filled([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(d.data()[0], 0.25);
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let ones = Tensor::filled([1, 1, 1, 2], 1.0);
        let zeros = Tensor::zeros([1, 1, 1, 2]);
        assert_eq!(hadamard(&a, &ones).unwrap().data(), a.data());
        assert_eq!(hadamard(&a, &zeros).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn hadamard_elementwise_values() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![4.0, 5.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[8.0, 15.0]);
    }

    #[test]
    fn hadamard_shape_mismatch_is_an_error() {
        let a = Tensor::zeros([1, 1, 1, 2]);
        let b = Tensor::zeros([1, 1, 2, 1]);
        assert!(hadamard(&a, &b).is_err());
    }

    #[test]
    fn hadamard_backward_routes_cross_terms() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![4.0, 5.0]).unwrap();
        let d = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 10.0]).unwrap();
        let (d_a, d_b) = hadamard_backward(&a, &b, &d).unwrap();
        assert_eq!(d_a.data(), &[4.0, 50.0]);
        assert_eq!(d_b.data(), &[2.0, 30.0]);
    }

    #[test]
    fn sigmoid_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(12);
        let input = Tensor::from_fn([1, 2, 3, 3], || rng.uniform(-2.0, 2.0));
        let probe: Vec<f64> = (0..input.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s = sigmoid(&input);
        let d_out = Tensor::from_vec(input.shape(), probe.clone()).unwrap();
        let analytic = sigmoid_backward(&s, &d_out).unwrap();
        let f = |xs: &[f64]| {
            let t = Tensor::from_vec(input.shape(), xs.to_vec()).unwrap();
            sigmoid(&t)
                .data()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let fd = finite_difference_gradient(&f, input.data(), 1e-4).unwrap();
        assert!(max_relative_error(analytic.data(), &fd) < 1e-7);
    }
}
