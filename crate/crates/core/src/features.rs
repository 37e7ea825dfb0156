//! Rolling statistics, normalization, resampling and two-channel assembly.
//!
//! All variances are population (divide-by-n) variances.

use crate::error::{Error, Result};

/// Below this population standard deviation (scaled by `max(1, |mean|)`) a
/// series counts as constant.
pub const CONSTANT_STD: f64 = 1e-12;

/// Trailing-window population variance via a sliding Welford update.
///
/// Output `i >= window - 1` covers `x[i + 1 - window ..= i]`; the first
/// `window - 1` outputs repeat the first full-window value so the output has
/// the input's length.
pub fn rolling_variance(x: &[f64], window: usize) -> Result<Vec<f64>> {
    let full = trailing_variance(x, window)?;
    let mut out = Vec::with_capacity(x.len());
    out.resize(window - 1, full[0]);
    out.extend_from_slice(&full);
    Ok(out)
}

/// Trailing-window variance without back-fill: `len - window + 1` values.
pub fn trailing_variance(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > x.len() {
        return Err(Error::WindowTooLarge {
            window,
            len: x.len(),
        });
    }
    let n = window as f64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &v) in x[..window].iter().enumerate() {
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let mut out = Vec::with_capacity(x.len() - window + 1);
    out.push((m2 / n).max(0.0));
    for i in window..x.len() {
        let incoming = x[i];
        let outgoing = x[i - window];
        let old_mean = mean;
        mean += (incoming - outgoing) / n;
        m2 += (incoming - outgoing) * (incoming - mean + outgoing - old_mean);
        out.push((m2 / n).max(0.0));
    }
    Ok(out)
}

/// Mean and population standard deviation (two-pass).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x - mean) / std`, or all zeros for a (numerically) constant series.
///
/// The constant test is relative so that rounding noise in large values
/// (such as a rolling variance over identical windows) is not amplified.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(x);
    if !(std >= CONSTANT_STD * mean.abs().max(1.0)) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Samples the piecewise-linear interpolant of `x` at `target_len` equally
/// spaced points spanning both endpoints.
pub fn linear_resample(x: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if x.len() < 2 || target_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling needs >= 2 input and output samples (got {} -> {target_len})",
            x.len()
        )));
    }
    if target_len == x.len() {
        return Ok(x.to_vec());
    }
    let last = x.len() - 1;
    let scale = last as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == target_len - 1 {
            out.push(x[last]);
            continue;
        }
        let pos = j as f64 * scale;
        let i = (pos.floor() as usize).min(last - 1);
        let frac = pos - i as f64;
        out.push(interpolate(x[i], x[i + 1], frac));
    }
    Ok(out)
}

/// `a + (b - a) * t` written so it stays inside `[min(a,b), max(a,b)]`.
pub(crate) fn interpolate(a: f64, b: f64, t: f64) -> f64 {
    if t <= 0.0 {
        a
    } else if t >= 1.0 {
        b
    } else {
        let v = a * (1.0 - t) + b * t;
        v.clamp(a.min(b), a.max(b))
    }
}

/// Z-scored raw signal and z-scored rolling variance of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPair {
    pub raw: Vec<f64>,
    pub rollvar: Vec<f64>,
}

impl ChannelPair {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Interleaved `[raw_0, var_0, raw_1, var_1, ...]` network input.
    pub fn interleaved_f32(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.len());
        for (r, v) in self.raw.iter().zip(&self.rollvar) {
            out.push(*r as f32);
            out.push(*v as f32);
        }
        out
    }
}

pub fn assemble_channels(x: &[f64], var_window: usize) -> Result<ChannelPair> {
    let rollvar = rolling_variance(x, var_window)?;
    Ok(ChannelPair {
        raw: zscore(x),
        rollvar: zscore(&rollvar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn naive_window_var(x: &[f64]) -> f64 {
        mean_std(x).1.powi(2)
    }

    #[test]
    fn rolling_variance_examples() {
        let v = rolling_variance(&[1.0, 2.0, 4.0, 7.0], 2).unwrap();
        assert_eq!(v, vec![0.25, 0.25, 1.0, 2.25]);
        assert_eq!(rolling_variance(&[3.5; 50], 7).unwrap(), vec![0.0; 50]);
        assert!(matches!(
            rolling_variance(&[1.0, 2.0], 3),
            Err(Error::WindowTooLarge { .. })
        ));
        assert!(rolling_variance(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn rolling_variance_of_white_noise_concentrates() {
        let mut rng = crate::seeded_rng(2024);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let v = rolling_variance(&x, 1000).unwrap();
        assert!(v.iter().all(|&s| (0.7..=1.3).contains(&s)));
    }

    #[test]
    fn rolling_variance_stays_accurate_on_a_large_offset() {
        let mut rng = crate::seeded_rng(5);
        let x: Vec<f64> = (0..5000)
            .map(|_| 1e6 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = rolling_variance(&x, 250).unwrap();
        for i in (249..5000).step_by(97) {
            let expect = naive_window_var(&x[i + 1 - 250..=i]);
            assert!((v[i] - expect).abs() < 1e-6 * expect, "{i}");
        }
    }

    #[test]
    fn zscore_examples() {
        let z = zscore(&[1.0, 2.0, 3.0]);
        let k = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0] + k).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - k).abs() < 1e-12);
        assert!((k - 1.224745).abs() < 1e-6);
        assert_eq!(zscore(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
    }

    #[test]
    fn linear_resample_examples() {
        assert_eq!(
            linear_resample(&[0.0, 1.0], 5).unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let x = [3.0, -1.0, 4.0, 1.5];
        assert_eq!(linear_resample(&x, 4).unwrap(), x.to_vec());
        assert_eq!(
            linear_resample(&[0.0, 2.0, 1.0], 5).unwrap(),
            vec![0.0, 1.0, 2.0, 1.5, 1.0]
        );
        assert!(linear_resample(&[1.0], 5).is_err());
        assert!(linear_resample(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn assemble_channels_constant_is_zero() {
        let pair = assemble_channels(&[1.25; 300], 50).unwrap();
        assert!(pair.raw.iter().chain(&pair.rollvar).all(|&v| v == 0.0));
    }

    fn max_abs(x: &[f64]) -> f64 {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn series(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 2..max_len)
    }

    proptest! {
        #[test]
        fn rolling_variance_matches_direct_window(x in series(200), w in 1usize..40) {
            prop_assume!(w <= x.len());
            let v = rolling_variance(&x, w).unwrap();
            prop_assert_eq!(v.len(), x.len());
            let tol = 1e-12 * (1.0 + max_abs(&x).powi(2));
            for i in w - 1..x.len() {
                let expect = naive_window_var(&x[i + 1 - w..=i]);
                prop_assert!((v[i] - expect).abs() <= tol);
                prop_assert!(v[i] >= 0.0);
            }
        }

        #[test]
        fn rolling_variance_shift_and_scale(x in series(150), w in 1usize..30, c in -1e3f64..1e3, k in 0.1f64..10.0) {
            prop_assume!(w <= x.len());
            let base = rolling_variance(&x, w).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
            let vs = rolling_variance(&shifted, w).unwrap();
            let vk = rolling_variance(&scaled, w).unwrap();
            let m = max_abs(&x);
            for i in 0..x.len() {
                prop_assert!((vs[i] - base[i]).abs() <= 1e-12 * (1.0 + (m + c.abs()).powi(2)));
                prop_assert!((vk[i] - k * k * base[i]).abs() <= 1e-12 * (1.0 + (k * m).powi(2)));
            }
        }

        #[test]
        fn zscore_properties(x in series(100), a in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], b in -100.0f64..100.0) {
            let z = zscore(&x);
            let (m, s) = mean_std(&z);
            prop_assert!(m.abs() < 1e-9);
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            let zz = zscore(&z);
            for (p, q) in z.iter().zip(&zz) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            let (_, sx) = mean_std(&x);
            prop_assume!(sx > 1e-6);
            let t: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let zt = zscore(&t);
            for (p, q) in z.iter().zip(&zt) {
                prop_assert!((a.signum() * p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn linear_resample_stays_in_range(x in series(60), n in 2usize..300) {
            let y = linear_resample(&x, n).unwrap();
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(y.len(), n);
            prop_assert_eq!(y[0], x[0]);
            prop_assert_eq!(y[n - 1], x[x.len() - 1]);
            prop_assert!(y.iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn linear_resample_preserves_monotonicity(mut x in series(60), n in 2usize..300) {
            x.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let y = linear_resample(&x, n).unwrap();
            prop_assert!(y.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn channel_pair_invariants(x in series(300), w in 1usize..50) {
            prop_assume!(w <= x.len());
            let pair = assemble_channels(&x, w).unwrap();
            prop_assert_eq!(pair.raw.len(), x.len());
            prop_assert_eq!(pair.rollvar.len(), x.len());
            for ch in [&pair.raw, &pair.rollvar] {
                let (m, s) = mean_std(ch);
                prop_assert!(m.abs() < 1e-9);
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            }
        }
    }
}
