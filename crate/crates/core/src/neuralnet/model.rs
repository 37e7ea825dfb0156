use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d_backward, conv1d_forward, dense_softmax, dropout_forward, lstm_backward, lstm_forward,
    maxpool_backward, maxpool_forward, ConvInput,
};
use super::Real;
use crate::error::{Error, Result};

/// Layer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub input_len: usize,
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub lstm1_units: usize,
    pub lstm2_units: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Architecture {
    /// Conv(50, k=300) → Conv(100, k=300) → Dropout(0.05) → MaxPool(2) →
    /// LSTM(50, sequences) → Dropout → LSTM(10) → Dropout → Dense(2, softmax).
    pub fn reference(input_len: usize) -> Self {
        Architecture {
            input_len,
            in_channels: 2,
            conv1_filters: 50,
            conv2_filters: 100,
            kernel: 300,
            lstm1_units: 50,
            lstm2_units: 10,
            classes: 2,
            dropout: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.conv1_filters,
            self.conv2_filters,
            self.kernel,
            self.lstm1_units,
            self.lstm2_units,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        if self.input_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "input length must be >= 2, got {}",
                self.input_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn pooled_len(&self) -> usize {
        self.input_len / 2
    }

    /// Shapes after each stage, input first.
    pub fn shape_chain(&self) -> Vec<LayerShape> {
        let l = self.input_len;
        let lp = self.pooled_len();
        vec![
            LayerShape::new("input", &[l, self.in_channels]),
            LayerShape::new("conv1", &[l, self.conv1_filters]),
            LayerShape::new("conv2", &[l, self.conv2_filters]),
            LayerShape::new("maxpool", &[lp, self.conv2_filters]),
            LayerShape::new("lstm1", &[lp, self.lstm1_units]),
            LayerShape::new("lstm2", &[self.lstm2_units]),
            LayerShape::new("dense", &[self.classes]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub dims: Vec<usize>,
}

impl LayerShape {
    fn new(name: &'static str, dims: &[usize]) -> Self {
        LayerShape {
            name,
            dims: dims.to_vec(),
        }
    }
}

/// Offsets of every tensor inside the flat parameter store, in storage
/// order: conv1 kernel `[K][Cin][F1]`, conv1 bias, conv2 kernel `[K][F1][F2]`,
/// conv2 bias, lstm1 kernel `[F2][4·H1]`, recurrent `[H1][4·H1]`, bias,
/// lstm2 kernel, recurrent, bias, dense kernel `[H2][classes]`, dense bias.
/// LSTM gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub lstm1_k: Range<usize>,
    pub lstm1_r: Range<usize>,
    pub lstm1_b: Range<usize>,
    pub lstm2_k: Range<usize>,
    pub lstm2_r: Range<usize>,
    pub lstm2_b: Range<usize>,
    pub dense_w: Range<usize>,
    pub dense_b: Range<usize>,
}

impl ParamLayout {
    pub fn new(arch: &Architecture) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (k, cin, f1, f2) = (
            arch.kernel,
            arch.in_channels,
            arch.conv1_filters,
            arch.conv2_filters,
        );
        let (h1, h2, nc) = (arch.lstm1_units, arch.lstm2_units, arch.classes);
        ParamLayout {
            conv1_w: take(k * cin * f1),
            conv1_b: take(f1),
            conv2_w: take(k * f1 * f2),
            conv2_b: take(f2),
            lstm1_k: take(f2 * 4 * h1),
            lstm1_r: take(h1 * 4 * h1),
            lstm1_b: take(4 * h1),
            lstm2_k: take(h1 * 4 * h2),
            lstm2_r: take(h2 * 4 * h2),
            lstm2_b: take(4 * h2),
            dense_w: take(h2 * nc),
            dense_b: take(nc),
        }
    }

    pub fn total(&self) -> usize {
        self.dense_b.end
    }

    /// Parameter count per layer: conv1, conv2, lstm1, lstm2, dense.
    pub fn layer_counts(&self) -> [(&'static str, usize); 5] {
        [
            ("conv1", self.conv1_w.len() + self.conv1_b.len()),
            ("conv2", self.conv2_w.len() + self.conv2_b.len()),
            (
                "lstm1",
                self.lstm1_k.len() + self.lstm1_r.len() + self.lstm1_b.len(),
            ),
            (
                "lstm2",
                self.lstm2_k.len() + self.lstm2_r.len() + self.lstm2_b.len(),
            ),
            ("dense", self.dense_w.len() + self.dense_b.len()),
        ]
    }
}

/// Loss, prediction and parameter gradient of one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    pub loss: f64,
    pub probs: [f64; 2],
    pub grad: Vec<T>,
}

/// A CNN-LSTM classifier with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    layout: ParamLayout,
    params: Vec<T>,
}

struct ForwardTrace<T> {
    conv1_in: ConvInput<T>,
    conv2_in: ConvInput<T>,
    conv2_out: Vec<T>,
    drop1: Option<Vec<T>>,
    pool: super::layers::PoolOutput<T>,
    lstm1: super::layers::LstmCache<T>,
    lstm2_in: Vec<T>,
    drop2: Option<Vec<T>>,
    lstm2: super::layers::LstmCache<T>,
    dense_in: Vec<T>,
    drop3: Option<Vec<T>>,
    probs: Vec<T>,
}

const LOG_CLAMP: f64 = 1e-12;

impl<T: Real> Network<T> {
    /// Glorot-uniform kernels, zero biases except LSTM forget gates (1).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = crate::seeded_rng(seed);
        let (k, cin, f1, f2) = (
            arch.kernel,
            arch.in_channels,
            arch.conv1_filters,
            arch.conv2_filters,
        );
        let (h1, h2, nc) = (arch.lstm1_units, arch.lstm2_units, arch.classes);
        let mut glorot = |range: Range<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params[range] {
                *v = T::from_f64_lossy(rng.random_range(-limit..limit));
            }
        };
        glorot(layout.conv1_w.clone(), k * cin, k * f1);
        glorot(layout.conv2_w.clone(), k * f1, k * f2);
        glorot(layout.lstm1_k.clone(), f2, 4 * h1);
        glorot(layout.lstm1_r.clone(), h1, 4 * h1);
        glorot(layout.lstm2_k.clone(), h1, 4 * h2);
        glorot(layout.lstm2_r.clone(), h2, 4 * h2);
        glorot(layout.dense_w.clone(), h2, nc);
        for (bias, units) in [(layout.lstm1_b.clone(), h1), (layout.lstm2_b.clone(), h2)] {
            for v in &mut params[bias.start + units..bias.start + 2 * units] {
                *v = T::one();
            }
        }
        Ok(Network {
            arch,
            layout,
            params,
        })
    }

    /// Every parameter zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        let params = vec![T::zero(); layout.total()];
        Ok(Network {
            arch,
            layout,
            params,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        if params.len() != layout.total() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Network {
            arch,
            layout,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        let want = self.arch.input_len * self.arch.in_channels;
        if input.len() != want {
            return Err(Error::Shape(format!(
                "input holds {} values, model expects {}×{}",
                input.len(),
                self.arch.input_len,
                self.arch.in_channels
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn run(&self, input: &[T], mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardTrace<T>> {
        self.check_input(input)?;
        let a = &self.arch;
        let l = &self.layout;
        let p = &self.params;
        let rate = a.dropout;

        let conv1_in = ConvInput::new(input, a.in_channels, a.kernel)?;
        let conv1_out = conv1d_forward(
            &conv1_in,
            &p[l.conv1_w.clone()],
            &p[l.conv1_b.clone()],
            true,
        )?;
        let conv2_in = ConvInput::new(&conv1_out, a.conv1_filters, a.kernel)?;
        drop(conv1_out);
        let conv2_out = conv1d_forward(
            &conv2_in,
            &p[l.conv2_w.clone()],
            &p[l.conv2_b.clone()],
            true,
        )?;
        let mut dropped = conv2_out.clone();
        let drop1 = dropout_forward(&mut dropped, rate, rng.as_deref_mut());
        let pool = maxpool_forward(&dropped, a.conv2_filters)?;
        drop(dropped);
        let lstm1 = lstm_forward(
            &pool.values,
            a.conv2_filters,
            &p[l.lstm1_k.clone()],
            &p[l.lstm1_r.clone()],
            &p[l.lstm1_b.clone()],
        )?;
        let mut lstm2_in = lstm1.hidden.clone();
        let drop2 = dropout_forward(&mut lstm2_in, rate, rng.as_deref_mut());
        let lstm2 = lstm_forward(
            &lstm2_in,
            a.lstm1_units,
            &p[l.lstm2_k.clone()],
            &p[l.lstm2_r.clone()],
            &p[l.lstm2_b.clone()],
        )?;
        let mut dense_in = lstm2.last_hidden().to_vec();
        let drop3 = dropout_forward(&mut dense_in, rate, rng);
        let (_, probs) = dense_softmax(&dense_in, &p[l.dense_w.clone()], &p[l.dense_b.clone()]);
        Ok(ForwardTrace {
            conv1_in,
            conv2_in,
            conv2_out,
            drop1,
            pool,
            lstm1,
            lstm2_in,
            drop2,
            lstm2,
            dense_in,
            drop3,
            probs,
        })
    }

    /// Class probabilities `(p_nonflicker, p_flicker)` in inference mode.
    pub fn predict(&self, input: &[T]) -> Result<[f64; 2]> {
        let trace = self.run(input, None)?;
        Ok(pair(&trace.probs))
    }

    /// Forward pass; dropout is active when `rng` is given.
    pub fn forward(&self, input: &[T], rng: Option<&mut ChaCha8Rng>) -> Result<[f64; 2]> {
        let trace = self.run(input, rng)?;
        Ok(pair(&trace.probs))
    }

    /// Cross-entropy `-ln p_label` of one sample and its gradient, scaled by
    /// `scale` (use `1 / batch` for a batch mean). `dropout_seed` selects the
    /// masks; `None` disables dropout.
    pub fn sample_grad(
        &self,
        input: &[T],
        label: usize,
        dropout_seed: Option<u64>,
        scale: f64,
    ) -> Result<SampleGrad<T>> {
        if label >= self.arch.classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range"
            )));
        }
        let mut rng = dropout_seed.map(crate::seeded_rng);
        let tr = self.run(input, rng.as_mut())?;
        let a = &self.arch;
        let l = &self.layout;
        let p = &self.params;
        let probs = pair(&tr.probs);
        let loss = -tr.probs[label].as_f64().max(LOG_CLAMP).ln();

        let mut grad = vec![T::zero(); p.len()];
        let s = T::from_f64_lossy(scale);

        // softmax + cross-entropy
        let dlogits: Vec<T> = tr
            .probs
            .iter()
            .enumerate()
            .map(|(k, &q)| (q - if k == label { T::one() } else { T::zero() }) * s)
            .collect();
        let nc = a.classes;
        {
            let gw = &mut grad[l.dense_w.clone()];
            for (j, &x) in tr.dense_in.iter().enumerate() {
                for (g, &d) in gw[j * nc..(j + 1) * nc].iter_mut().zip(&dlogits) {
                    *g += x * d;
                }
            }
        }
        for (g, &d) in grad[l.dense_b.clone()].iter_mut().zip(&dlogits) {
            *g += d;
        }
        let w = &p[l.dense_w.clone()];
        let mut d_dense_in: Vec<T> = (0..a.lstm2_units)
            .map(|j| {
                dlogits
                    .iter()
                    .zip(&w[j * nc..(j + 1) * nc])
                    .fold(T::zero(), |acc, (&d, &wv)| acc + d * wv)
            })
            .collect();
        apply_mask(&mut d_dense_in, tr.drop3.as_deref());

        // lstm2: gradient enters only at the final step
        let steps = tr.lstm2.steps;
        let h2 = a.lstm2_units;
        let mut dh2 = vec![T::zero(); steps * h2];
        dh2[(steps - 1) * h2..].copy_from_slice(&d_dense_in);
        let (gk, gr, gb) = split3(&mut grad, &l.lstm2_k, &l.lstm2_r, &l.lstm2_b);
        let mut d_lstm2_in = lstm_backward(
            &tr.lstm2,
            &tr.lstm2_in,
            a.lstm1_units,
            &p[l.lstm2_k.clone()],
            &p[l.lstm2_r.clone()],
            &dh2,
            gk,
            gr,
            gb,
            true,
        )
        .expect("input gradient requested");
        apply_mask(&mut d_lstm2_in, tr.drop2.as_deref());

        let (gk, gr, gb) = split3(&mut grad, &l.lstm1_k, &l.lstm1_r, &l.lstm1_b);
        let d_pool = lstm_backward(
            &tr.lstm1,
            &tr.pool.values,
            a.conv2_filters,
            &p[l.lstm1_k.clone()],
            &p[l.lstm1_r.clone()],
            &d_lstm2_in,
            gk,
            gr,
            gb,
            true,
        )
        .expect("input gradient requested");

        let mut d_conv2 = maxpool_backward(&tr.pool, &d_pool);
        apply_mask(&mut d_conv2, tr.drop1.as_deref());
        relu_backward(&mut d_conv2, &tr.conv2_out);

        let (gw, gb) = split2(&mut grad, &l.conv2_w, &l.conv2_b);
        let mut d_conv1 =
            conv1d_backward(&tr.conv2_in, &p[l.conv2_w.clone()], &d_conv2, gw, gb, true)
                .expect("input gradient requested");
        // conv2's padded input holds conv1's post-ReLU output.
        let left = tr.conv2_in.left_pad() * a.conv1_filters;
        let conv1_out = &tr.conv2_in.padded[left..left + d_conv1.len()];
        relu_backward(&mut d_conv1, conv1_out);

        let (gw, gb) = split2(&mut grad, &l.conv1_w, &l.conv1_b);
        conv1d_backward(&tr.conv1_in, &p[l.conv1_w.clone()], &d_conv1, gw, gb, false);

        Ok(SampleGrad { loss, probs, grad })
    }

    /// Mean loss over `batch` without gradients (inference mode).
    pub fn loss(&self, batch: &[(&[T], usize)]) -> Result<f64> {
        let mut total = 0.0;
        for &(input, label) in batch {
            let probs = self.predict(input)?;
            total -= probs[label].max(LOG_CLAMP).ln();
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

fn pair<T: Real>(probs: &[T]) -> [f64; 2] {
    [probs[0].as_f64(), probs.get(1).map_or(0.0, |v| v.as_f64())]
}

fn apply_mask<T: Real>(grad: &mut [T], mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (g, &m) in grad.iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

fn relu_backward<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn split2<'a, T>(
    buf: &'a mut [T],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(a.end, b.start);
    let (_, rest) = buf.split_at_mut(a.start);
    let (first, rest) = rest.split_at_mut(a.len());
    (first, &mut rest[..b.len()])
}

fn split3<'a, T>(
    buf: &'a mut [T],
    a: &Range<usize>,
    b: &Range<usize>,
    c: &Range<usize>,
) -> (&'a mut [T], &'a mut [T], &'a mut [T]) {
    debug_assert!(a.end == b.start && b.end == c.start);
    let (_, rest) = buf.split_at_mut(a.start);
    let (first, rest) = rest.split_at_mut(a.len());
    let (second, rest) = rest.split_at_mut(b.len());
    (first, second, &mut rest[..c.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            input_len: 64,
            in_channels: 2,
            conv1_filters: 4,
            conv2_filters: 8,
            kernel: 5,
            lstm1_units: 6,
            lstm2_units: 3,
            classes: 2,
            dropout: 0.0,
        }
    }

    fn probe(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seeded_rng(seed);
        (0..2 * len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn reference_parameter_counts() {
        let layout = ParamLayout::new(&Architecture::reference(5000));
        let counts = layout.layer_counts();
        assert_eq!(counts[0].1, 2 * 300 * 50 + 50);
        assert_eq!(counts[1].1, 50 * 300 * 100 + 100);
        assert_eq!(counts[2].1, 4 * (100 + 50) * 50 + 4 * 50);
        assert_eq!(counts[3].1, 4 * (50 + 10) * 10 + 4 * 10);
        assert_eq!(counts[4].1, 10 * 2 + 2);
        assert_eq!(layout.total(), counts.iter().map(|c| c.1).sum::<usize>());
    }

    #[test]
    fn zero_network_is_uninformative() {
        let net = Network::<f64>::zeros(tiny()).unwrap();
        let input = probe(64, 1);
        assert_eq!(net.predict(&input).unwrap(), [0.5, 0.5]);
        for label in 0..2 {
            let g = net.sample_grad(&input, label, None, 1.0).unwrap();
            assert_eq!(g.loss, std::f64::consts::LN_2);
        }
    }

    #[test]
    fn inference_is_deterministic_and_normalized() {
        let net = Network::<f32>::new(tiny(), 9).unwrap();
        let input: Vec<f32> = probe(64, 2).iter().map(|&v| v as f32).collect();
        let a = net.predict(&input).unwrap();
        let b = net.predict(&input).unwrap();
        assert_eq!(a, b);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-6);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let net = Network::<f64>::new(tiny(), 0).unwrap();
        assert!(matches!(net.predict(&probe(63, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_masks_follow_the_seed() {
        let arch = Architecture {
            dropout: 0.3,
            ..tiny()
        };
        let net = Network::<f64>::new(arch, 3).unwrap();
        let x = probe(64, 4);
        let a = net.sample_grad(&x, 1, Some(77), 1.0).unwrap();
        let b = net.sample_grad(&x, 1, Some(77), 1.0).unwrap();
        let c = net.sample_grad(&x, 1, Some(78), 1.0).unwrap();
        assert_eq!(a.grad, b.grad);
        assert_ne!(a.loss, c.loss);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let net = Network::<f64>::new(tiny(), 11).unwrap();
        let x = probe(64, 12);
        let analytic = net.sample_grad(&x, 1, None, 1.0).unwrap().grad;
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in (0..net.param_count()).step_by(7) {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let lp = plus.sample_grad(&x, 1, None, 1.0).unwrap().loss;
            let lm = minus.sample_grad(&x, 1, None, 1.0).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
