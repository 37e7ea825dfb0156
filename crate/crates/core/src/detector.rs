//! Sliding-window ensemble inference and scalar detection scores.
//!
//! Each ensemble member pairs a checkpoint with a window fraction `φ`. A
//! member slides a window of `⌊φ·N⌋` samples over the series, resamples each
//! window to the checkpoint's native length, assembles the two input channels
//! and records `p_flicker` at the window's last index. The ensemble trace is
//! the mean of the member traces after linear interpolation onto the union
//! of their end indices.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    assemble_channels, interpolate, linear_resample, mean_std, trailing_variance,
};
use crate::neuralnet::Checkpoint;

pub const DEFAULT_WINDOW_FRACTIONS: [f64; 6] = [0.08, 0.096, 0.11, 0.13, 0.14, 0.16];
pub const DEFAULT_STRIDE_FRACTION: f64 = 0.1;
/// Rolling-variance window of the training data, in raw samples.
pub const DEFAULT_VAR_WINDOW_BASE: usize = 1000;
pub const DEFAULT_SCORE_VAR_WINDOW: usize = 1000;

#[derive(Debug, Clone)]
pub struct Member {
    pub checkpoint: Checkpoint,
    pub window_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub members: Vec<Member>,
    /// Window stride as a fraction of the window length.
    pub stride_fraction: f64,
    /// Variance window in native samples is
    /// `round(var_window_base · native / window)`, capped at `native / 5`.
    pub var_window_base: usize,
}

impl EnsembleSpec {
    /// Pairs checkpoints with fractions in order.
    pub fn new(checkpoints: Vec<Checkpoint>, fractions: &[f64]) -> Result<Self> {
        if checkpoints.len() != fractions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} checkpoints but {} window fractions",
                checkpoints.len(),
                fractions.len()
            )));
        }
        let spec = EnsembleSpec {
            members: checkpoints
                .into_iter()
                .zip(fractions)
                .map(|(checkpoint, &window_fraction)| Member {
                    checkpoint,
                    window_fraction,
                })
                .collect(),
            stride_fraction: DEFAULT_STRIDE_FRACTION,
            var_window_base: DEFAULT_VAR_WINDOW_BASE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no members".into()));
        }
        for m in &self.members {
            if !(m.window_fraction > 0.0 && m.window_fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "window fraction {} outside (0, 1)",
                    m.window_fraction
                )));
            }
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stride fraction {} outside (0, 1]",
                self.stride_fraction
            )));
        }
        if self.var_window_base == 0 {
            return Err(Error::InvalidArgument(
                "variance window base must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Largest member window for a series of `n` samples.
    pub fn max_window(&self, n: usize) -> usize {
        self.members
            .iter()
            .map(|m| window_len(m.window_fraction, n))
            .max()
            .unwrap_or(0)
    }
}

/// Loads an ensemble from a checkpoint file or a directory of `*.ckpt`
/// files (ordered by native length, then file name).
///
/// A single checkpoint is reused for every window fraction. Without explicit
/// fractions the default six are used, which requires one or six
/// checkpoints.
pub fn load_ensemble(path: &Path, fractions: Option<&[f64]>) -> Result<EnsembleSpec> {
    let mut checkpoints = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        files.sort();
        let mut loaded = files
            .iter()
            .map(|f| Checkpoint::load(f))
            .collect::<Result<Vec<_>>>()?;
        loaded.sort_by_key(|c| c.native_length());
        loaded
    } else {
        vec![Checkpoint::load(path)?]
    };
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .ckpt files in {}",
            path.display()
        )));
    }
    let fractions = fractions.unwrap_or(&DEFAULT_WINDOW_FRACTIONS);
    if checkpoints.len() == 1 && fractions.len() > 1 {
        checkpoints = vec![checkpoints.remove(0); fractions.len()];
    }
    EnsembleSpec::new(checkpoints, fractions)
}

pub fn window_len(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).floor() as usize
}

/// Variance window, in native samples, for a raw window of `window` samples.
pub fn scaled_var_window(base: usize, native: usize, window: usize) -> usize {
    let scaled = (base as f64 * native as f64 / window as f64).round() as usize;
    scaled.min(native / 5).max(1)
}

/// Start offsets of windows of `window` samples with the given stride. The
/// last window always ends at the final sample.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().expect("window fits") + window < n {
        starts.push(n - window);
    }
    starts
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberTrace {
    /// Window-end indices.
    pub times: Vec<usize>,
    pub p_flicker: Vec<f64>,
    pub window: usize,
    pub var_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTrace {
    pub times: Vec<usize>,
    pub p_flicker: Vec<f64>,
    pub per_member: Vec<MemberTrace>,
}

impl ProbabilityTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Member `k` resampled onto the ensemble grid.
    pub fn member_on_grid(&self, k: usize) -> Vec<f64> {
        resample_trace(&self.per_member[k], &self.times)
    }

    /// CSV `index,p_flicker,p_nonflicker[,member_k...]`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "index,p_flicker,p_nonflicker")?;
        if self.per_member.len() > 1 {
            for k in 0..self.per_member.len() {
                write!(out, ",member_{}", k + 1)?;
            }
        }
        writeln!(out)?;
        let members: Vec<Vec<f64>> = if self.per_member.len() > 1 {
            (0..self.per_member.len())
                .map(|k| self.member_on_grid(k))
                .collect()
        } else {
            Vec::new()
        };
        for (i, (&t, &p)) in self.times.iter().zip(&self.p_flicker).enumerate() {
            write!(out, "{t},{p},{}", 1.0 - p)?;
            for m in &members {
                write!(out, ",{}", m[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Linear interpolation of a member trace at `grid`, clamped at both ends.
fn resample_trace(trace: &MemberTrace, grid: &[usize]) -> Vec<f64> {
    let t = &trace.times;
    let p = &trace.p_flicker;
    grid.iter()
        .map(|&g| match t.binary_search(&g) {
            Ok(i) => p[i],
            Err(0) => p[0],
            Err(i) if i == t.len() => p[t.len() - 1],
            Err(i) => {
                let frac = (g - t[i - 1]) as f64 / (t[i] - t[i - 1]) as f64;
                interpolate(p[i - 1], p[i], frac)
            }
        })
        .collect()
}

/// Runs one member over the series.
pub fn scan_member(
    series: &[f64],
    member: &Member,
    stride_fraction: f64,
    var_window_base: usize,
) -> Result<MemberTrace> {
    let n = series.len();
    let window = window_len(member.window_fraction, n);
    if window < 2 || window > n {
        return Err(Error::WindowTooLarge {
            window: window.max(2),
            len: n,
        });
    }
    let native = member.checkpoint.native_length();
    let var_window = scaled_var_window(var_window_base, native, window);
    let stride = ((stride_fraction * window as f64).round() as usize).max(1);
    let starts = window_starts(n, window, stride);
    let net = &member.checkpoint.network;
    let p_flicker = starts
        .par_iter()
        .map(|&s| {
            let resampled = linear_resample(&series[s..s + window], native)?;
            let input = assemble_channels(&resampled, var_window)?.interleaved_f32();
            Ok(net.predict(&input)?[1])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MemberTrace {
        times: starts.iter().map(|&s| s + window - 1).collect(),
        p_flicker,
        window,
        var_window,
    })
}

pub fn scan_series(series: &[f64], spec: &EnsembleSpec) -> Result<ProbabilityTrace> {
    spec.validate()?;
    if let Some(bad) = series.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("series value {bad}")));
    }
    let largest = spec.max_window(series.len());
    if largest > series.len() || largest < 2 {
        return Err(Error::WindowTooLarge {
            window: largest,
            len: series.len(),
        });
    }
    let per_member = spec
        .members
        .iter()
        .map(|m| scan_member(series, m, spec.stride_fraction, spec.var_window_base))
        .collect::<Result<Vec<_>>>()?;
    let mut times: Vec<usize> = per_member
        .iter()
        .flat_map(|m| m.times.iter().copied())
        .collect();
    times.sort_unstable();
    times.dedup();
    let mut p_flicker = vec![0.0; times.len()];
    for m in &per_member {
        for (acc, v) in p_flicker.iter_mut().zip(resample_trace(m, &times)) {
            *acc += v;
        }
    }
    let k = per_member.len() as f64;
    for v in &mut p_flicker {
        *v = (*v / k).clamp(0.0, 1.0);
    }
    Ok(ProbabilityTrace {
        times,
        p_flicker,
        per_member,
    })
}

/// `max(p) - mean(p)`.
pub fn dl_score(p_flicker: &[f64]) -> Result<f64> {
    if p_flicker.is_empty() {
        return Err(Error::InvalidArgument("empty probability trace".into()));
    }
    let max = p_flicker.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = p_flicker.iter().sum::<f64>() / p_flicker.len() as f64;
    Ok((max - mean).max(0.0))
}

/// Minimum [`dl_score`] over member traces.
pub fn conservative_score<T: AsRef<[f64]>>(members: &[T]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("no member traces".into()));
    }
    members
        .iter()
        .map(|m| dl_score(m.as_ref()))
        .try_fold(f64::INFINITY, |acc, s| Ok(acc.min(s?)))
}

pub fn trace_conservative_score(trace: &ProbabilityTrace) -> Result<f64> {
    let members: Vec<&[f64]> = trace
        .per_member
        .iter()
        .map(|m| m.p_flicker.as_slice())
        .collect();
    conservative_score(&members)
}

/// `max V / (mean V + std V)` of the trailing rolling variance `V` of the raw
/// series (full windows only); 0 when `V` is identically zero.
pub fn variance_score(series: &[f64], window: usize) -> Result<f64> {
    let v = trailing_variance(series, window)?;
    Ok(variance_ratio(&v))
}

pub fn variance_ratio(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let (mean, std) = mean_std(v);
    max / (mean + std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Architecture, Network};
    use proptest::prelude::*;

    fn tiny_checkpoint(native: usize, seed: u64) -> Checkpoint {
        let arch = Architecture {
            input_len: native,
            in_channels: 2,
            conv1_filters: 3,
            conv2_filters: 4,
            kernel: 5,
            lstm1_units: 4,
            lstm2_units: 3,
            classes: 2,
            dropout: 0.05,
        };
        Checkpoint::new(Network::new(arch, seed).unwrap(), native / 5)
    }

    fn wiggly(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).cos())
            .collect()
    }

    #[test]
    fn score_examples() {
        assert!((dl_score(&[0.2, 0.9, 0.4]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(dl_score(&[0.3; 7]).unwrap(), 0.0);
        assert!(dl_score(&[]).is_err());
        let members = [vec![0.1, 0.5], vec![0.0, 0.2], vec![0.3, 0.9]];
        assert!((conservative_score(&members).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(conservative_score(&[vec![0.5; 3]]).unwrap(), 0.0);
    }

    #[test]
    fn variance_score_examples() {
        // Trailing variances over windows of 2: [1, 1, 4].
        let s = variance_score(&[0.0, 2.0, 0.0, 4.0], 2).unwrap();
        assert!((s - 4.0 / (2.0 + 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(variance_score(&[2.5; 40], 10).unwrap(), 0.0);
        assert!(variance_score(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn window_starts_cover_the_end() {
        assert_eq!(window_starts(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(window_starts(11, 4, 3), vec![0, 3, 6, 7]);
        assert_eq!(window_starts(4, 4, 1), vec![0]);
        assert_eq!(scaled_var_window(1000, 1000, 8000), 125);
        assert_eq!(scaled_var_window(1000, 1000, 1000), 200);
    }

    #[test]
    fn single_member_reproduces_its_trace() {
        let spec = EnsembleSpec::new(vec![tiny_checkpoint(40, 1)], &[0.2]).unwrap();
        let x = wiggly(400);
        let trace = scan_series(&x, &spec).unwrap();
        assert_eq!(trace.times, trace.per_member[0].times);
        assert_eq!(trace.p_flicker, trace.per_member[0].p_flicker);
        assert_eq!(*trace.times.last().unwrap(), 399);
        assert_eq!(trace.times[0], 79);
        assert!(trace.p_flicker.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn ensemble_is_mean_on_union_grid() {
        let spec = EnsembleSpec::new(
            vec![tiny_checkpoint(40, 1), tiny_checkpoint(50, 2)],
            &[0.2, 0.25],
        )
        .unwrap();
        let x = wiggly(400);
        let trace = scan_series(&x, &spec).unwrap();
        let a = trace.member_on_grid(0);
        let b = trace.member_on_grid(1);
        for i in 0..trace.len() {
            assert!((trace.p_flicker[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
        for m in &trace.per_member {
            for t in &m.times {
                assert!(trace.times.binary_search(t).is_ok());
            }
        }
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,p_flicker,p_nonflicker,member_1,member_2\n"));
        assert_eq!(text.lines().count(), trace.len() + 1);
    }

    #[test]
    fn ensemble_loading_pairs_fractions() {
        let dir = tempfile::tempdir().unwrap();
        tiny_checkpoint(60, 1)
            .save(&dir.path().join("b.ckpt"))
            .unwrap();
        let single = load_ensemble(&dir.path().join("b.ckpt"), None).unwrap();
        assert_eq!(single.members.len(), 6);
        tiny_checkpoint(40, 2)
            .save(&dir.path().join("a.ckpt"))
            .unwrap();
        let pair = load_ensemble(dir.path(), Some(&[0.1, 0.2])).unwrap();
        let natives: Vec<usize> = pair
            .members
            .iter()
            .map(|m| m.checkpoint.native_length())
            .collect();
        assert_eq!(natives, vec![40, 60]);
        assert!(load_ensemble(dir.path(), None).is_err());
    }

    #[test]
    fn short_series_is_rejected() {
        let spec = EnsembleSpec::new(vec![tiny_checkpoint(40, 1)], &[0.2]).unwrap();
        assert!(matches!(
            scan_series(&wiggly(5), &spec),
            Err(Error::WindowTooLarge { .. })
        ));
        assert!(EnsembleSpec::new(vec![tiny_checkpoint(40, 1)], &[1.2]).is_err());
        assert!(EnsembleSpec::new(vec![tiny_checkpoint(40, 1)], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn trace_is_affine_invariant() {
        let spec = EnsembleSpec::new(
            vec![tiny_checkpoint(40, 3), tiny_checkpoint(60, 4)],
            &[0.1, 0.16],
        )
        .unwrap();
        let x = wiggly(900);
        let base = scan_series(&x, &spec).unwrap();
        let y: Vec<f64> = x.iter().map(|v| 37.5 * v - 1200.0).collect();
        let moved = scan_series(&y, &spec).unwrap();
        assert_eq!(base.times, moved.times);
        for (p, q) in base.p_flicker.iter().zip(&moved.p_flicker) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_variance_score_is_near_one() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut scores = Vec::new();
        for seed in 0..20 {
            let mut rng = crate::seeded_rng(seed);
            let x: Vec<f64> = (0..50_000).map(|_| rng.sample(StandardNormal)).collect();
            scores.push(variance_score(&x, 1000).unwrap());
        }
        let (m, _) = mean_std(&scores);
        assert!(m > 1.0 && m < 1.3, "{m}");
    }

    proptest! {
        #[test]
        fn dl_score_in_unit_interval(p in prop::collection::vec(0.0f64..=1.0, 1..100)) {
            let s = dl_score(&p).unwrap();
            prop_assert!((0.0..1.0).contains(&s));
        }

        #[test]
        fn variance_score_affine_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 20..200),
            a in prop_oneof![-20.0f64..-0.1, 0.1f64..20.0],
            b in -100.0f64..100.0,
        ) {
            let s = variance_score(&x, 10).unwrap();
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let t = variance_score(&y, 10).unwrap();
            prop_assert!((s - t).abs() <= 1e-9 * s.abs().max(1.0));
        }

        #[test]
        fn conservative_score_is_permutation_invariant(
            traces in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..20), 1..6),
        ) {
            let s = conservative_score(&traces).unwrap();
            let mut rev = traces.clone();
            rev.reverse();
            prop_assert_eq!(s, conservative_score(&rev).unwrap());
        }
    }
}
