use crate::element::Element;

const REVIN_EPS: f64 = 1e-5;

/// Per-(sample, channel) statistics captured at the input, reused to invert
/// the normalization on the output. Not trainable.
#[derive(Debug, Clone)]
pub struct RevinState<E: Element> {
    /// mean over the trailing `w_stat` steps, one entry per (sample, channel)
    pub mean: Vec<E>,
    /// sqrt(var + eps) over the same steps
    pub std: Vec<E>,
}

/// Normalize each (sample, channel) row of a `[batch, M, L]` buffer with the
/// mean/std of its trailing `w_stat` steps. The whole window is normalized
/// with those statistics.
pub fn revin_normalize<E: Element>(
    x: &[E],
    batch: usize,
    channels: usize,
    lookback: usize,
    w_stat: usize,
) -> (Vec<E>, RevinState<E>) {
    debug_assert_eq!(x.len(), batch * channels * lookback);
    debug_assert!(w_stat >= 1 && w_stat <= lookback);
    let rows = batch * channels;
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    let mut out = vec![E::zero(); x.len()];
    for row in 0..rows {
        let src = &x[row * lookback..(row + 1) * lookback];
        let tail = &src[lookback - w_stat..];
        let mut sum = 0.0;
        for &v in tail {
            sum += v.as_f64();
        }
        let mu = sum / w_stat as f64;
        let mut var = 0.0;
        for &v in tail {
            let d = v.as_f64() - mu;
            var += d * d;
        }
        var /= w_stat as f64;
        let sigma = (var + REVIN_EPS).sqrt();
        mean.push(E::from_f64(mu));
        std.push(E::from_f64(sigma));
        let (mu_e, sigma_e) = (E::from_f64(mu), E::from_f64(sigma));
        for (d, &v) in out[row * lookback..(row + 1) * lookback].iter_mut().zip(src) {
            *d = (v - mu_e) / sigma_e;
        }
    }
    (out, RevinState { mean, std })
}

/// Invert [`revin_normalize`] on a `[batch, M, F]` buffer: `y*sigma + mu`
/// per (sample, channel) row.
pub fn revin_denormalize_data<E: Element>(
    y: &[E],
    state: &RevinState<E>,
    row_len: usize,
) -> Vec<E> {
    debug_assert_eq!(y.len(), state.mean.len() * row_len);
    let mut out = vec![E::zero(); y.len()];
    for (row, chunk) in y.chunks(row_len).enumerate() {
        let (mu, sigma) = (state.mean[row], state.std[row]);
        for (d, &v) in out[row * row_len..(row + 1) * row_len].iter_mut().zip(chunk) {
            *d = v * sigma + mu;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = vec![3.5f64; 8];
        let (norm, state) = revin_normalize(&x, 1, 1, 8, 8);
        for v in norm {
            assert!(v.abs() < 1e-9); // numerator is exactly 0 up to accumulation
        }
        assert!((state.mean[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_identity() {
        let x: Vec<f64> = (0..2 * 3 * 10)
            .map(|i| (i as f64 * 0.7919).sin() * 3.0 + i as f64 * 0.01)
            .collect();
        for w_stat in [1, 4, 10] {
            let (norm, state) = revin_normalize(&x, 2, 3, 10, w_stat);
            let back = revin_denormalize_data(&norm, &state, 10);
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-10, "w_stat={w_stat}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zeros_denormalize_to_the_mean() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (_, state) = revin_normalize(&x, 1, 1, 6, 6);
        let y = vec![0.0f64; 4];
        let out = revin_denormalize_data(&y, &state, 4);
        for &v in &out {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn trailing_window_statistics_only() {
        // first half wildly different from the tail; stats must come from the tail
        let mut x = vec![100.0f64; 4];
        x.extend([1.0, 1.0, 1.0, 1.0]);
        let (_, state) = revin_normalize(&x, 1, 1, 8, 4);
        assert!((state.mean[0] - 1.0).abs() < 1e-12);
    }
}
