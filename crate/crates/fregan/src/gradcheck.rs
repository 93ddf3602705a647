//! Central finite-difference verification of analytic gradients, always in
//! 64-bit precision.

use crate::error::{Error, Result};
use crate::tape::{GradientTape, NodeId};
use crate::tensor::Tensor;

/// Builds a scalar-valued computation over the given leaves. The same builder
/// runs once for the analytic gradient and twice per coordinate for the
/// central differences, so it must be a pure function of the leaf values.
pub type ScalarFn<'a> = dyn Fn(&mut GradientTape<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Compares the tape gradient of `f` against (f(x+eps) - f(x-eps)) / (2 eps)
/// coordinate by coordinate and returns the worst relative error
/// |analytic - fd| / max(1, |analytic|).
pub fn finite_diff_check(
    f: &ScalarFn<'_>,
    inputs: &[Tensor<f64>],
    epsilon: f64,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    if inputs.is_empty() {
        return Err(Error::Contract("finite_diff_check needs at least one input".into()));
    }

    let analytic = {
        let mut tape = GradientTape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.parameter(format!("p{i}"), t.clone().with_grad()))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &ids)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "checked function must produce a scalar, got {}",
                tape.shape(out)
            )));
        }
        if !tape.value(out).data()[0].is_finite() {
            return Err(Error::Numeric("checked function produced a non-finite value".into()));
        }
        let grads = tape.backward(out)?;
        (0..inputs.len())
            .map(|i| grads.named()[&format!("p{i}")].clone())
            .collect::<Vec<_>>()
    };

    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = GradientTape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differencing".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let original = input.data()[coord];
            probe[which].data_mut()[coord] = original + epsilon;
            let plus = eval(&probe)?;
            probe[which].data_mut()[coord] = original - epsilon;
            let minus = eval(&probe)?;
            probe[which].data_mut()[coord] = original;

            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[which].data()[coord];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at input {which} coordinate {coord}"
                )));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_of_squares_checks_to_machine_noise() {
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let err = finite_diff_check(
            &|tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum_all(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn two_input_function_checks_both_leaves() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -0.25, 1.5]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, 0.75, -0.4]).unwrap();
        let err = finite_diff_check(
            &|tape, ids| {
                let prod = tape.mul(ids[0], ids[1])?;
                let th = tape.tanh(prod);
                Ok(tape.mean_all(th))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let w = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let f: &ScalarFn<'_> = &|tape, ids| Ok(tape.sum_all(ids[0]));
        assert!(matches!(
            finite_diff_check(f, std::slice::from_ref(&w), 1e-3),
            Err(Error::Config(_))
        ));
        assert!(matches!(finite_diff_check(f, &[w], 1e-7), Err(Error::Config(_))));
    }
}
