//! Fidelity metrics over image tensors. Accumulation is always 64-bit no
//! matter the tensor element type. Callers are expected to pass images on the
//! [0, 1] scale; the dynamic range enters through the PSNR peak term and the
//! SSIM stabilizing constants.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_pair<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>, what: &str) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Dimension {
            axis: "numel",
            detail: format!("{what}: reference {} vs candidate {}", y.shape(), y_hat.shape()),
        });
    }
    if y.numel() == 0 {
        return Err(Error::Contract(format!("{what} of an empty tensor")));
    }
    if !y.is_finite() || !y_hat.is_finite() {
        return Err(Error::Numeric(format!("{what} of non-finite values")));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    check_pair(y, y_hat, "mse")?;
    let mut acc = 0.0f64;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        let d = a.to_real() - b.to_real();
        acc += d * d;
    }
    Ok(acc / y.numel() as f64)
}

/// 10 * log10(max(y)^2 / mse). Identical images yield +infinity; an all-zero
/// reference has no defined peak and is an error.
pub fn psnr<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    let e = mse(y, y_hat)?;
    let peak = y.max_value().to_real();
    if peak == 0.0 {
        return Err(Error::Domain("psnr reference image has zero peak value".into()));
    }
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Stabilizing constants for SSIM: c1 = (0.01 L)^2, c2 = (0.03 L)^2 where L is
/// the dynamic range of the values.
#[derive(Clone, Copy, Debug)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn for_dynamic_range(l: f64) -> Result<SsimConstants> {
        if l <= 0.0 || !l.is_finite() {
            return Err(Error::Config(format!("dynamic range {l} must be a positive real")));
        }
        Ok(SsimConstants { c1: (0.01 * l) * (0.01 * l), c2: (0.03 * l) * (0.03 * l) })
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants::for_dynamic_range(1.0).expect("unit range is valid")
    }
}

/// Global structural similarity: per channel, one mean/variance/covariance
/// over all pixels of that channel (population statistics, no sliding
/// window), then the channel scores are averaged.
pub fn ssim_global<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    k: &SsimConstants,
) -> Result<f64> {
    check_pair(x, y, "ssim")?;
    let s = x.shape();
    let plane = s.h * s.w;
    let m = (s.n * plane) as f64;
    let mut total = 0.0f64;
    for c in 0..s.c {
        let mut sum_x = 0.0f64;
        let mut sum_y = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                sum_x += x.data()[base + i].to_real();
                sum_y += y.data()[base + i].to_real();
            }
        }
        let mean_x = sum_x / m;
        let mean_y = sum_y / m;

        let mut var_x = 0.0f64;
        let mut var_y = 0.0f64;
        let mut cov = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let dx = x.data()[base + i].to_real() - mean_x;
                let dy = y.data()[base + i].to_real() - mean_y;
                var_x += dx * dx;
                var_y += dy * dy;
                cov += dx * dy;
            }
        }
        var_x /= m;
        var_y /= m;
        cov /= m;

        let num = (2.0 * mean_x * mean_y + k.c1) * (2.0 * cov + k.c2);
        let den = (mean_x * mean_x + mean_y * mean_y + k.c1) * (var_x + var_y + k.c2);
        total += num / den;
    }
    Ok(total / s.c as f64)
}
