//! Image quality: differentiable training losses and full-reference
//! evaluation metrics.
//!
//! The loss side ([`loss`]) builds on the autodiff tape; the metric side
//! ([`metrics`], [`tmqi`]) works on plain tensors in f64 so scores are
//! independent of the training element type.

pub mod color;
mod loss;
mod metrics;
mod tmqi;

pub use loss::{
    compute_losses, loss_hf, loss_msssim, loss_perceptual, loss_re, msssim_scale_count,
    total_loss, FeatureExtractor, GradientBank, LossParts, LossWeights,
};
pub use metrics::{delta_e, evaluate_pair, psnr, ssim, MetricReport, PSNR_CAP_DB};
pub use tmqi::{tmqi, TmqiReport};

/// Normalized k x k Gaussian window, row-major. Shared by the structural
/// metrics and losses (k = 11, sigma = 1.5 there).
pub(crate) fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let center = (k as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }
    let mut window = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            window.push(taps[y] * taps[x]);
        }
    }
    window
}

#[cfg(test)]
mod tests {
    use super::gaussian_window;

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for y in 0..11 {
            for x in 0..11 {
                assert_eq!(w[y * 11 + x], w[x * 11 + y]);
                assert_eq!(w[y * 11 + x], w[(10 - y) * 11 + (10 - x)]);
            }
        }
        let center = w[5 * 11 + 5];
        assert!(w.iter().all(|&v| v <= center));
    }
}
