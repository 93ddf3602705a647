//! Training objectives: the pseudo-Huber penalty, the generator's adversarial
//! score-gap loss over it, and binary cross-entropy for the discriminator.

use crate::error::{Error, Result};
use crate::tape::{GradientTape, NodeId};
use crate::tensor::{Element, Tensor};

/// delta^2 * (sqrt(1 + (v/delta)^2) - 1). Quadratic near zero, linear with
/// slope delta far out. Callers validate delta.
#[inline]
pub(crate) fn pseudo_huber_scalar<T: Element>(v: T, delta: T) -> T {
    let r = v / delta;
    delta * delta * ((T::one() + r * r).sqrt() - T::one())
}

/// d/dv of pseudo_huber_scalar: v / sqrt(1 + (v/delta)^2). Bounded by delta.
#[inline]
pub(crate) fn pseudo_huber_grad_scalar<T: Element>(v: T, delta: T) -> T {
    let r = v / delta;
    v / (T::one() + r * r).sqrt()
}

fn check_delta<T: Element>(delta: T) -> Result<()> {
    if delta <= T::zero() || !delta.is_finite() {
        return Err(Error::Config(format!("delta must be a positive real, got {delta}")));
    }
    Ok(())
}

/// Pseudo-Huber penalty of a residual.
pub fn pseudo_huber<T: Element>(v: T, delta: T) -> Result<T> {
    check_delta(delta)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("pseudo_huber of non-finite residual {v}")));
    }
    Ok(pseudo_huber_scalar(v, delta))
}

/// Generator objective: pseudo-Huber of the realism score gap. Symmetric in
/// its two scores; during training the gradient enters through d_fake only.
pub fn adversarial_loss<T: Element>(d_real: T, d_fake: T, delta: T) -> Result<T> {
    pseudo_huber(d_real - d_fake, delta)
}

fn check_probability<T: Element>(v: T, what: &str) -> Result<()> {
    if !(v > T::zero() && v < T::one()) {
        return Err(Error::Domain(format!("{what} score {v} outside (0, 1)")));
    }
    Ok(())
}

/// -mean(ln p) over patches the discriminator should call real.
pub fn real_half_loss<T: Element>(real_patches: &Tensor<T>) -> Result<T> {
    let mut acc = T::zero();
    for &p in real_patches.data() {
        check_probability(p, "real")?;
        acc = acc + p.ln();
    }
    Ok(-acc / T::from_real(real_patches.numel() as f64))
}

/// -mean(ln(1 - p)) over patches the discriminator should call fake.
pub fn fake_half_loss<T: Element>(fake_patches: &Tensor<T>) -> Result<T> {
    let mut acc = T::zero();
    for &p in fake_patches.data() {
        check_probability(p, "fake")?;
        acc = acc + (T::one() - p).ln();
    }
    Ok(-acc / T::from_real(fake_patches.numel() as f64))
}

/// Full discriminator objective; the training loop applies the two halves
/// sequentially, this combined form is their sum.
pub fn discriminator_loss<T: Element>(
    real_patches: &Tensor<T>,
    fake_patches: &Tensor<T>,
) -> Result<T> {
    Ok(real_half_loss(real_patches)? + fake_half_loss(fake_patches)?)
}

/// Tape form of real_half_loss.
pub fn real_half_loss_on_tape<T: Element>(
    tape: &mut GradientTape<T>,
    real_patches: NodeId,
) -> Result<NodeId> {
    for &p in tape.value(real_patches).data() {
        check_probability(p, "real")?;
    }
    let logs = tape.ln(real_patches)?;
    let mean = tape.mean_all(logs);
    Ok(tape.affine(mean, -T::one(), T::zero()))
}

/// Tape form of fake_half_loss.
pub fn fake_half_loss_on_tape<T: Element>(
    tape: &mut GradientTape<T>,
    fake_patches: NodeId,
) -> Result<NodeId> {
    for &p in tape.value(fake_patches).data() {
        check_probability(p, "fake")?;
    }
    let flipped = tape.affine(fake_patches, -T::one(), T::one());
    let logs = tape.ln(flipped)?;
    let mean = tape.mean_all(logs);
    Ok(tape.affine(mean, -T::one(), T::zero()))
}

/// Tape form of adversarial_loss over two scalar score nodes. Pass the real
/// score as a constant leaf so gradient flows through the fake branch only.
pub fn adversarial_loss_on_tape<T: Element>(
    tape: &mut GradientTape<T>,
    d_real: NodeId,
    d_fake: NodeId,
    delta: T,
) -> Result<NodeId> {
    check_delta(delta)?;
    for (name, id) in [("d_real", d_real), ("d_fake", d_fake)] {
        if tape.value(id).numel() != 1 {
            return Err(Error::Contract(format!(
                "adversarial_loss takes scalar scores, {name} has shape {}",
                tape.shape(id)
            )));
        }
    }
    let gap = tape.sub(d_real, d_fake)?;
    tape.pseudo_huber(gap, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn pseudo_huber_frozen_values() {
        // (v/delta) = 1 cases evaluate to delta^2 (sqrt(2) - 1).
        let v = pseudo_huber(0.5f64, 0.5).unwrap();
        assert!((v - 0.25 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        let v = pseudo_huber(3.0f64, 1.0).unwrap();
        assert!((v - (10f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pseudo_huber_is_quadratic_near_zero() {
        let delta = 0.5f64;
        let mut v = -0.01;
        while v <= 0.01 {
            let l = pseudo_huber(v, delta).unwrap();
            assert!((l - v * v / 2.0).abs() <= 1e-7, "v = {v}");
            v += 0.0005;
        }
    }

    #[test]
    fn pseudo_huber_is_linear_far_out() {
        let l = pseudo_huber(100.0f64, 0.5).unwrap();
        assert!((l / (0.5 * 100.0) - 1.0).abs() <= 0.01);
    }

    #[test]
    fn pseudo_huber_is_even() {
        for v in [0.1f64, 0.7, 3.0, 42.0] {
            assert_eq!(pseudo_huber(v, 0.5).unwrap(), pseudo_huber(-v, 0.5).unwrap());
        }
    }

    #[test]
    fn pseudo_huber_rejects_non_positive_delta() {
        assert!(matches!(pseudo_huber(1.0f64, 0.0), Err(Error::Config(_))));
        assert!(matches!(pseudo_huber(1.0f64, -0.5), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_magnitude_stays_below_delta() {
        let delta = 0.5f64;
        for v in [-1e6, -3.0, -0.2, 0.0, 0.4, 7.0, 1e6] {
            assert!(pseudo_huber_grad_scalar(v, delta).abs() < delta);
        }
    }

    #[test]
    fn adversarial_loss_frozen_value() {
        let v = adversarial_loss(1.0f64, 0.0, 0.5).unwrap();
        assert!((v - 0.25 * (5f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_is_symmetric_under_score_swap() {
        let a = adversarial_loss(0.9f64, 0.2, 0.5).unwrap();
        let b = adversarial_loss(0.2f64, 0.9, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matched_scores_give_zero_adversarial_loss() {
        assert_eq!(adversarial_loss(0.7f64, 0.7, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn discriminator_loss_at_half_is_two_ln_two() {
        let real = Tensor::filled(Shape::new(1, 1, 3, 3), 0.5f64);
        let fake = Tensor::filled(Shape::new(1, 1, 3, 3), 0.5f64);
        let l = discriminator_loss(&real, &fake).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_discriminator_loss_is_near_zero() {
        let real = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0f64 - 1e-9);
        let fake = Tensor::filled(Shape::new(1, 1, 2, 2), 1e-9f64);
        let l = discriminator_loss(&real, &fake).unwrap();
        assert!(l > 0.0 && l < 1e-6);
    }

    #[test]
    fn scores_on_the_boundary_are_rejected() {
        let ok = Tensor::filled(Shape::new(1, 1, 1, 1), 0.5f64);
        let top = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0f64);
        let bottom = Tensor::filled(Shape::new(1, 1, 1, 1), 0.0f64);
        assert!(matches!(discriminator_loss(&top, &ok), Err(Error::Domain(_))));
        assert!(matches!(discriminator_loss(&ok, &bottom), Err(Error::Domain(_))));
    }

    #[test]
    fn tape_and_value_forms_agree() {
        let real = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.8f64, 0.7, 0.9, 0.6]).unwrap();
        let fake = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.2f64, 0.3, 0.1, 0.4]).unwrap();
        let direct = discriminator_loss(&real, &fake).unwrap();

        let mut tape = GradientTape::new();
        let r = tape.leaf(real);
        let f = tape.leaf(fake);
        let lr = real_half_loss_on_tape(&mut tape, r).unwrap();
        let lf = fake_half_loss_on_tape(&mut tape, f).unwrap();
        let total = tape.add(lr, lf).unwrap();
        assert!((tape.value(total).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn adversarial_tape_gradient_flows_through_fake_only() {
        let mut tape = GradientTape::new();
        let d_real = tape.scalar(0.9f64);
        let fake_in = Tensor::filled(Shape::new(1, 1, 1, 1), 0.3f64).with_grad();
        let d_fake = tape.parameter("d_fake", fake_in).unwrap();
        let loss = adversarial_loss_on_tape(&mut tape, d_real, d_fake, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d loss / d d_fake = -grad_pseudo_huber(0.6, 0.5)
        let expected = -pseudo_huber_grad_scalar(0.6, 0.5);
        assert!((grads.named()["d_fake"].data()[0] - expected).abs() < 1e-12);
    }
}
