//! Layer kernels. Each forward returns what its backward needs.

use rand::Rng;

use super::{gemm, MatRef, Real};
use crate::error::{Error, Result};

/// Zero-padded copy of a `len × channels` input for a "same" convolution.
///
/// Left padding is `(kernel - 1) / 2`, right padding the remainder, so an
/// even kernel of 300 pads 149 rows before and 150 after.
#[derive(Debug, Clone)]
pub struct ConvInput<T> {
    pub padded: Vec<T>,
    pub len: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl<T: Real> ConvInput<T> {
    pub fn new(input: &[T], channels: usize, kernel: usize) -> Result<Self> {
        if channels == 0 || !input.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "input of {} values is not a multiple of {channels} channels",
                input.len()
            )));
        }
        let len = input.len() / channels;
        if len == 0 || kernel == 0 {
            return Err(Error::Shape("empty convolution input or kernel".into()));
        }
        let left = (kernel - 1) / 2;
        let mut padded = vec![T::zero(); (len + kernel - 1) * channels];
        padded[left * channels..(left + len) * channels].copy_from_slice(input);
        Ok(ConvInput {
            padded,
            len,
            channels,
            kernel,
        })
    }

    pub fn left_pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// The implicit im2col matrix: row `t` is the `kernel × channels`
    /// receptive field ending `kernel - 1 - left_pad` rows after `t`.
    fn patches(&self) -> MatRef<'_, T> {
        MatRef::strided(
            &self.padded,
            self.len,
            self.kernel * self.channels,
            self.channels,
            1,
        )
    }
}

/// Cross-correlation with "same" padding followed by ReLU.
///
/// `weights` is laid out `[kernel][in_channels][out_channels]`.
pub fn conv1d_forward<T: Real>(
    input: &ConvInput<T>,
    weights: &[T],
    bias: &[T],
    relu: bool,
) -> Result<Vec<T>> {
    let out_channels = bias.len();
    let fan = input.kernel * input.channels;
    if weights.len() != fan * out_channels {
        return Err(Error::Shape(format!(
            "conv weights hold {} values, expected {} ({}×{}×{})",
            weights.len(),
            fan * out_channels,
            input.kernel,
            input.channels,
            out_channels
        )));
    }
    let mut out = Vec::with_capacity(input.len * out_channels);
    for _ in 0..input.len {
        out.extend_from_slice(bias);
    }
    gemm(
        T::one(),
        input.patches(),
        MatRef::dense(weights, fan, out_channels),
        T::one(),
        &mut out,
    );
    if relu {
        for v in &mut out {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients for a convolution given the
/// gradient at its (pre-activation) output; returns the input gradient when
/// `want_input_grad` is set.
pub fn conv1d_backward<T: Real>(
    input: &ConvInput<T>,
    weights: &[T],
    grad_out: &[T],
    grad_weights: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let out_channels = grad_bias.len();
    let (len, cin, k) = (input.len, input.channels, input.kernel);
    let fan = k * cin;
    debug_assert_eq!(grad_out.len(), len * out_channels);

    gemm(
        T::one(),
        input.patches().t(),
        MatRef::dense(grad_out, len, out_channels),
        T::one(),
        grad_weights,
    );
    for row in grad_out.chunks_exact(out_channels) {
        for (g, &d) in grad_bias.iter_mut().zip(row) {
            *g += d;
        }
    }
    if !want_input_grad {
        return None;
    }

    // Input gradient as a correlation of the zero-extended output gradient
    // with the tap-reversed, in/out-transposed kernel.
    let mut flipped = vec![T::zero(); fan * out_channels];
    for j in 0..k {
        let tap = k - 1 - j;
        for ci in 0..cin {
            for co in 0..out_channels {
                flipped[(j * out_channels + co) * cin + ci] =
                    weights[(tap * cin + ci) * out_channels + co];
            }
        }
    }
    let mut extended = vec![T::zero(); (len + 2 * (k - 1)) * out_channels];
    extended[(k - 1) * out_channels..(k - 1 + len) * out_channels].copy_from_slice(grad_out);
    let offset = input.left_pad() * out_channels;
    let windows = MatRef::strided(&extended[offset..], len, k * out_channels, out_channels, 1);
    let mut grad_in = vec![T::zero(); len * cin];
    gemm(
        T::one(),
        windows,
        MatRef::dense(&flipped, k * out_channels, cin),
        T::zero(),
        &mut grad_in,
    );
    Some(grad_in)
}

#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub values: Vec<T>,
    /// Input row chosen for each output element.
    pub argmax: Vec<u32>,
    pub in_len: usize,
    pub channels: usize,
}

/// Non-overlapping max-pool of size 2, stride 2, "valid" padding. A trailing
/// odd row is dropped; ties pick the earlier row.
pub fn maxpool_forward<T: Real>(input: &[T], channels: usize) -> Result<PoolOutput<T>> {
    if channels == 0 || !input.len().is_multiple_of(channels) {
        return Err(Error::Shape("pool input not a whole number of rows".into()));
    }
    let in_len = input.len() / channels;
    if in_len < 2 {
        return Err(Error::Shape(format!("pool needs >= 2 rows, got {in_len}")));
    }
    let out_len = in_len / 2;
    let mut values = Vec::with_capacity(out_len * channels);
    let mut argmax = Vec::with_capacity(out_len * channels);
    for t in 0..out_len {
        let r0 = 2 * t;
        let a = &input[r0 * channels..(r0 + 1) * channels];
        let b = &input[(r0 + 1) * channels..(r0 + 2) * channels];
        for (&x0, &x1) in a.iter().zip(b) {
            if x1 > x0 {
                values.push(x1);
                argmax.push((r0 + 1) as u32);
            } else {
                values.push(x0);
                argmax.push(r0 as u32);
            }
        }
    }
    Ok(PoolOutput {
        values,
        argmax,
        in_len,
        channels,
    })
}

pub fn maxpool_backward<T: Real>(pool: &PoolOutput<T>, grad_out: &[T]) -> Vec<T> {
    let c = pool.channels;
    let mut grad_in = vec![T::zero(); pool.in_len * c];
    for (i, (&row, &g)) in pool.argmax.iter().zip(grad_out).enumerate() {
        grad_in[row as usize * c + i % c] += g;
    }
    grad_in
}

/// Inverted dropout. Returns the mask (`0` or `1 / (1 - rate)` per unit), or
/// `None` when the layer is the identity (inference or zero rate).
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    values: &mut [T],
    rate: f64,
    rng: Option<&mut R>,
) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = values
        .iter()
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, m) in values.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Activations of one LSTM pass, enough for backpropagation through time.
///
/// Gate columns are ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    pub steps: usize,
    pub units: usize,
    /// `steps × 4·units` post-activation gates.
    pub gates: Vec<T>,
    /// `steps × units` cell states.
    pub cells: Vec<T>,
    /// `steps × units` hidden states.
    pub hidden: Vec<T>,
}

impl<T: Real> LstmCache<T> {
    pub fn last_hidden(&self) -> &[T] {
        &self.hidden[(self.steps - 1) * self.units..]
    }
}

/// Runs the recurrence with `h_0 = c_0 = 0` over a `steps × in_dim` input.
/// `kernel` is `in_dim × 4H`, `recurrent` is `H × 4H`, `bias` is `4H`.
pub fn lstm_forward<T: Real>(
    input: &[T],
    in_dim: usize,
    kernel: &[T],
    recurrent: &[T],
    bias: &[T],
) -> Result<LstmCache<T>> {
    let units = bias.len() / 4;
    let g4 = 4 * units;
    if units == 0
        || bias.len() != g4
        || kernel.len() != in_dim * g4
        || recurrent.len() != units * g4
    {
        return Err(Error::Shape("inconsistent LSTM parameter shapes".into()));
    }
    if in_dim == 0 || input.is_empty() || !input.len().is_multiple_of(in_dim) {
        return Err(Error::Shape(format!(
            "LSTM input of {} values is not a whole number of {in_dim}-wide steps",
            input.len()
        )));
    }
    let steps = input.len() / in_dim;
    let mut gates = Vec::with_capacity(steps * g4);
    for _ in 0..steps {
        gates.extend_from_slice(bias);
    }
    gemm(
        T::one(),
        MatRef::dense(input, steps, in_dim),
        MatRef::dense(kernel, in_dim, g4),
        T::one(),
        &mut gates,
    );
    let mut cells = vec![T::zero(); steps * units];
    let mut hidden = vec![T::zero(); steps * units];
    for t in 0..steps {
        let z = &mut gates[t * g4..(t + 1) * g4];
        if t > 0 {
            let h_prev = &hidden[(t - 1) * units..t * units];
            for (j, &h) in h_prev.iter().enumerate() {
                if h != T::zero() {
                    for (zi, &w) in z.iter_mut().zip(&recurrent[j * g4..(j + 1) * g4]) {
                        *zi += h * w;
                    }
                }
            }
        }
        for u in 0..units {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[units + u]);
            let g = z[2 * units + u].tanh();
            let o = sigmoid(z[3 * units + u]);
            z[u] = i;
            z[units + u] = f;
            z[2 * units + u] = g;
            z[3 * units + u] = o;
            let c_prev = if t > 0 {
                cells[(t - 1) * units + u]
            } else {
                T::zero()
            };
            let c = f * c_prev + i * g;
            cells[t * units + u] = c;
            hidden[t * units + u] = o * c.tanh();
        }
    }
    Ok(LstmCache {
        steps,
        units,
        gates,
        cells,
        hidden,
    })
}

/// Backpropagation through time.
///
/// `grad_hidden` is the loss gradient with respect to every emitted hidden
/// state (`steps × H`, zeros where nothing flows in). Parameter gradients
/// are accumulated; the input gradient is returned when requested.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward<T: Real>(
    cache: &LstmCache<T>,
    input: &[T],
    in_dim: usize,
    kernel: &[T],
    recurrent: &[T],
    grad_hidden: &[T],
    grad_kernel: &mut [T],
    grad_recurrent: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let (steps, units) = (cache.steps, cache.units);
    let g4 = 4 * units;
    let one = T::one();
    let mut dz = vec![T::zero(); steps * g4];
    let mut dh_next = vec![T::zero(); units];
    let mut dc_next = vec![T::zero(); units];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * g4..(t + 1) * g4];
        let dzt = &mut dz[t * g4..(t + 1) * g4];
        for u in 0..units {
            let (i, f, g, o) = (
                gates[u],
                gates[units + u],
                gates[2 * units + u],
                gates[3 * units + u],
            );
            let c = cache.cells[t * units + u];
            let c_prev = if t > 0 {
                cache.cells[(t - 1) * units + u]
            } else {
                T::zero()
            };
            let tc = c.tanh();
            let dh = grad_hidden[t * units + u] + dh_next[u];
            let d_o = dh * tc;
            let dc = dc_next[u] + dh * o * (one - tc * tc);
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * c_prev;
            dc_next[u] = dc * f;
            dzt[u] = d_i * i * (one - i);
            dzt[units + u] = d_f * f * (one - f);
            dzt[2 * units + u] = d_g * (one - g * g);
            dzt[3 * units + u] = d_o * o * (one - o);
        }
        // dh_{t-1} = dz_t · Wh^T
        for (j, dh) in dh_next.iter_mut().enumerate() {
            let row = &recurrent[j * g4..(j + 1) * g4];
            let mut acc = T::zero();
            for (&w, &d) in row.iter().zip(dzt.iter()) {
                acc += w * d;
            }
            *dh = acc;
        }
    }
    gemm(
        one,
        MatRef::dense(input, steps, in_dim).t(),
        MatRef::dense(&dz, steps, g4),
        one,
        grad_kernel,
    );
    if steps > 1 {
        gemm(
            one,
            MatRef::dense(&cache.hidden[..(steps - 1) * units], steps - 1, units).t(),
            MatRef::dense(&dz[g4..], steps - 1, g4),
            one,
            grad_recurrent,
        );
    }
    for row in dz.chunks_exact(g4) {
        for (g, &d) in grad_bias.iter_mut().zip(row) {
            *g += d;
        }
    }
    if !want_input_grad {
        return None;
    }
    let mut grad_in = vec![T::zero(); steps * in_dim];
    gemm(
        one,
        MatRef::dense(&dz, steps, g4),
        MatRef::dense(kernel, in_dim, g4).t(),
        T::zero(),
        &mut grad_in,
    );
    Some(grad_in)
}

/// Fully connected layer with softmax: returns (logits, probabilities).
pub fn dense_softmax<T: Real>(input: &[T], weights: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let classes = bias.len();
    let mut logits = bias.to_vec();
    for (j, &x) in input.iter().enumerate() {
        for (l, &w) in logits
            .iter_mut()
            .zip(&weights[j * classes..(j + 1) * classes])
        {
            *l += x * w;
        }
    }
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).as_f64().exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| T::from_f64_lossy(e / total)).collect();
    (logits, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_is_relu() {
        let input = [1.0f64, -2.0, 3.0, -0.5, 0.25];
        for k in [1usize, 3, 4, 300] {
            let mut w = vec![0.0; k];
            w[(k - 1) / 2] = 1.0;
            let ci = ConvInput::new(&input, 1, k).unwrap();
            let out = conv1d_forward(&ci, &w, &[0.0], true).unwrap();
            let want: Vec<f64> = input.iter().map(|v| v.max(0.0)).collect();
            assert_eq!(out, want, "kernel {k}");
        }
    }

    #[test]
    fn conv_all_ones_by_hand() {
        let ci = ConvInput::new(&[1.0f64; 10], 1, 3).unwrap();
        let out = conv1d_forward(&ci, &[1.0, 1.0, 1.0], &[0.0], true).unwrap();
        assert_eq!(out, vec![2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn even_kernel_pads_149_then_150() {
        let ci = ConvInput::new(&[0.0f32; 20], 1, 300).unwrap();
        assert_eq!(ci.left_pad(), 149);
        assert_eq!(ci.padded.len() - 20 - 149, 150);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (len, cin, cout, k) = (9usize, 3usize, 4usize, 4usize);
        let input: Vec<f64> = (0..len * cin)
            .map(|i| ((i * 7 % 11) as f64) - 5.0)
            .collect();
        let w: Vec<f64> = (0..k * cin * cout)
            .map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6)
            .collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let ci = ConvInput::new(&input, cin, k).unwrap();
        let out = conv1d_forward(&ci, &w, &b, false).unwrap();
        let left = (k - 1) / 2;
        for t in 0..len {
            for co in 0..cout {
                let mut acc = b[co];
                for tap in 0..k {
                    let s = t as isize + tap as isize - left as isize;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for c in 0..cin {
                        acc += input[s as usize * cin + c] * w[(tap * cin + c) * cout + co];
                    }
                }
                assert!((out[t * cout + co] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let ci = ConvInput::new(&[0.0f64; 12], 2, 3).unwrap();
        assert!(conv1d_forward(&ci, &[0.0; 5], &[0.0], true).is_err());
        assert!(ConvInput::new(&[0.0f64; 7], 2, 3).is_err());
    }

    #[test]
    fn conv_input_gradient_matches_adjoint() {
        // <conv(x), y> = <x, conv^T(y)> for the linear part.
        let (len, cin, cout, k) = (11usize, 2usize, 3usize, 4usize);
        let x: Vec<f64> = (0..len * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..len * cout).map(|i| (i as f64 * 0.91).cos()).collect();
        let w: Vec<f64> = (0..k * cin * cout)
            .map(|i| (i as f64 * 1.3).sin())
            .collect();
        let ci = ConvInput::new(&x, cin, k).unwrap();
        let out = conv1d_forward(&ci, &w, &[0.0; 3], false).unwrap();
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        let gx = conv1d_backward(&ci, &w, &y, &mut gw, &mut gb, true).unwrap();
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // and the weight gradient is the adjoint in w
        let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_examples() {
        let p = maxpool_forward(&[1.0f64, 3.0, 2.0, 2.0, 5.0], 1).unwrap();
        assert_eq!(p.values, vec![3.0, 2.0]);
        assert_eq!(p.argmax, vec![1, 2]);

        let p = maxpool_forward(&vec![0.5f32; 5000], 1).unwrap();
        assert_eq!(p.values.len(), 2500);
        assert!(p
            .argmax
            .iter()
            .enumerate()
            .all(|(i, &r)| r as usize == 2 * i));

        let g = maxpool_backward(
            &maxpool_forward(&[1.0f64, 3.0, 2.0, 2.0, 5.0], 1).unwrap(),
            &[10.0, 20.0],
        );
        assert_eq!(g, vec![0.0, 10.0, 20.0, 0.0, 0.0]);
        assert!(maxpool_forward(&[1.0f64], 1).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = crate::seeded_rng(1);
        let mut v = vec![1.0f64; 100];
        assert!(dropout_forward(&mut v, 0.0, Some(&mut rng)).is_none());
        assert!(dropout_forward::<f64, rand_chacha::ChaCha8Rng>(&mut v, 0.5, None).is_none());
        assert_eq!(v, vec![1.0; 100]);

        let mut v = vec![1.0f32; 1_000_000];
        let mask = dropout_forward(&mut v, 0.05, Some(&mut rng)).unwrap();
        let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64 / 1e6;
        assert!((0.948..=0.952).contains(&kept), "kept {kept}");
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.95).abs() < 1e-6));
    }

    #[test]
    fn lstm_zero_parameters_give_zero_output() {
        let input: Vec<f64> = (0..30).map(|i| i as f64 - 7.0).collect();
        let cache = lstm_forward(&input, 3, &[0.0; 3 * 8], &[0.0; 2 * 8], &[0.0; 8]).unwrap();
        assert!(cache.hidden.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn lstm_accumulates_monotonically() {
        // One cell, strong input gate and candidate: c and h grow each step.
        let kernel = [1.0, 0.0, 1.0, 1.0]; // i, f, g, o weights on the input
        let cache = lstm_forward(
            &[10.0f64, 10.0],
            1,
            &kernel,
            &[0.0; 4],
            &[0.0, 5.0, 0.0, 0.0],
        )
        .unwrap();
        let (h1, h2) = (cache.hidden[0], cache.hidden[1]);
        // Oracle: direct recurrence.
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let c1 = s(10.0) * 10.0f64.tanh();
        let c2 = s(5.0) * c1 + s(10.0) * 10.0f64.tanh();
        assert!((h1 - s(10.0) * c1.tanh()).abs() < 1e-12);
        assert!((h2 - s(10.0) * c2.tanh()).abs() < 1e-12);
        assert!(h2 > h1 && h1 > 0.0);
    }

    #[test]
    fn lstm_shape_errors() {
        assert!(lstm_forward(&[1.0f64; 5], 2, &[0.0; 8], &[0.0; 4], &[0.0; 4]).is_err());
        assert!(lstm_forward(&[1.0f64; 4], 2, &[0.0; 7], &[0.0; 4], &[0.0; 4]).is_err());
    }

    #[test]
    fn dense_softmax_normalizes() {
        let (_, p) = dense_softmax(
            &[0.3f64, -2.0, 5.0],
            &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6],
            &[0.0, 1.0],
        );
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (_, p) = dense_softmax(&[1.0f64; 3], &[0.0; 6], &[0.0; 2]);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
