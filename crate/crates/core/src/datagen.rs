//! Labeled synthetic training data from the degree-7 polynomial drift.
//!
//! A flickering sample (label 1) ramps `p` linearly from `p0 = 5` to the
//! coefficient set's fold value `p*` over the whole record; a non-flickering
//! sample (label 0) holds `p = p0`. Both start at the largest positive
//! equilibrium `x0` at `p0` and use constant noise `σ = 1.2·x0`.
//!
//! On disk a dataset directory holds:
//!
//! * `manifest.txt` – `key=value` lines: `format_version`, `native_length`,
//!   `count_per_class`, `var_window`, `base_seed`, `p0`, `dt`,
//!   `sigma_rule`, the sampling ranges (`range.g` … `range.a`) and the two
//!   data file names (`file.flicker`, `file.nonflicker`).
//! * `flicker_L<len>.f32` / `nonflicker_L<len>.f32` – samples back to back;
//!   each sample is the z-scored raw channel (`len` little-endian `f32`)
//!   followed by the z-scored rolling-variance channel (`len` values).
//! * `samples.csv` – one row per sample with its seeds and coefficients.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::dynamics::{
    self, simulate, CriticalPoint, Drift, PolyDrift, Schedule, Trajectory, TRAINING_P0,
};
use crate::error::{Error, Result};
use crate::features::{assemble_channels, ChannelPair};
use crate::keyvalue::KeyValues;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_VAR_WINDOW: usize = 1000;
pub const DEFAULT_DT: f64 = 0.01;
pub const SIGMA_FACTOR: f64 = 1.2;
pub const DEFAULT_SAMPLER_RETRIES: usize = 100;
pub const SIMULATION_RETRIES: usize = 10;
/// Native lengths of the six ensemble members.
pub const NATIVE_LENGTHS: [usize; 6] = [5000, 6000, 7000, 8000, 9000, 10000];

/// Sampling intervals of the polynomial coefficients.
///
/// `g`, `e`, `c` ~ U(-2, 0); `f` ~ U(-|g|, |g|); `d` ~ U(-|e|, |e|); `b = 0`;
/// `a` ~ U(1, 3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRanges {
    pub g: (f64, f64),
    pub e: (f64, f64),
    pub c: (f64, f64),
    pub a: (f64, f64),
}

impl Default for CoefficientRanges {
    fn default() -> Self {
        CoefficientRanges {
            g: (-2.0, 0.0),
            e: (-2.0, 0.0),
            c: (-2.0, 0.0),
            a: (1.0, 3.0),
        }
    }
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return 0.0;
    }
    open_uniform(rng, (-half_width, half_width))
}

/// A coefficient draw that passed the sampler's acceptance checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedDrift {
    /// Coefficients with `p = p0`.
    pub drift: PolyDrift,
    pub critical: CriticalPoint,
    /// Largest positive equilibrium at `p0`.
    pub x0: f64,
}

/// Draws coefficients until the drift has a positive equilibrium at `p0` and
/// a saddle-node below it, giving up after `max_retries` draws.
pub fn sample_coefficients<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &CoefficientRanges,
    max_retries: usize,
) -> Result<AcceptedDrift> {
    for _ in 0..max_retries {
        let g = open_uniform(rng, ranges.g);
        let f = symmetric(rng, g.abs());
        let e = open_uniform(rng, ranges.e);
        let d = symmetric(rng, e.abs());
        let c = open_uniform(rng, ranges.c);
        let a = open_uniform(rng, ranges.a);
        let drift = PolyDrift {
            a,
            b: 0.0,
            c,
            d,
            e,
            f,
            g,
            p: TRAINING_P0,
        };
        let Some(x0) = dynamics::upper_equilibrium(&drift) else {
            continue;
        };
        if let Ok(critical) = drift.critical_point() {
            return Ok(AcceptedDrift {
                drift,
                critical,
                x0,
            });
        }
    }
    Err(Error::SamplerExhausted(max_retries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    NonFlicker = 0,
    Flicker = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::NonFlicker => "nonflicker",
            Label::Flicker => "flicker",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub channels: ChannelPair,
    pub label: Label,
    /// Seed of the simulation that produced the sample.
    pub gen_seed: u64,
    pub coeffs: AcceptedDrift,
    pub sigma: f64,
    pub trajectory: Trajectory,
}

impl LabeledSample {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Simulates one sample. A divergent simulation is retried with a fresh
/// seed up to [`SIMULATION_RETRIES`] times.
pub fn make_sample(
    coeffs: &AcceptedDrift,
    length: usize,
    label: Label,
    seed: u64,
    var_window: usize,
) -> Result<LabeledSample> {
    let p0 = coeffs.drift.p;
    let param_schedule = match label {
        Label::Flicker => Schedule::linear_ramp(p0, coeffs.critical.p_star),
        Label::NonFlicker => Schedule::constant(p0),
    };
    let sigma = SIGMA_FACTOR * coeffs.x0;
    let noise = Schedule::constant(sigma);
    let mut last_err = None;
    for attempt in 0..SIMULATION_RETRIES as u64 {
        let gen_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match simulate(
            &coeffs.drift,
            &param_schedule,
            &noise,
            coeffs.x0,
            length,
            DEFAULT_DT,
            gen_seed,
        ) {
            Ok(trajectory) => {
                let channels = assemble_channels(&trajectory.values, var_window)?;
                return Ok(LabeledSample {
                    channels,
                    label,
                    gen_seed,
                    coeffs: *coeffs,
                    sigma,
                    trajectory,
                });
            }
            Err(err @ Error::Divergence { .. }) => last_err = Some(err),
            Err(err) => return Err(err),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Draws coefficients and simulates, redrawing the coefficients when a set
/// keeps diverging. All randomness comes from `stream_seed`.
pub fn generate_sample(
    stream_seed: u64,
    length: usize,
    label: Label,
    var_window: usize,
    ranges: &CoefficientRanges,
) -> Result<LabeledSample> {
    let mut rng = crate::seeded_rng(stream_seed);
    let mut last_err = None;
    for _ in 0..DEFAULT_SAMPLER_RETRIES {
        let coeffs = sample_coefficients(&mut rng, ranges, DEFAULT_SAMPLER_RETRIES)?;
        let sim_seed = rng.next_u64();
        match make_sample(&coeffs, length, label, sim_seed, var_window) {
            Ok(sample) => return Ok(sample),
            Err(err @ Error::Divergence { .. }) => last_err = Some(err),
            Err(err) => return Err(err),
        }
    }
    Err(last_err.unwrap_or(Error::SamplerExhausted(DEFAULT_SAMPLER_RETRIES)))
}

/// Whether the final `tail_fraction` of a flickering sample visits both
/// outer basins at `p*`: at or above the fold state `x*`, and at or below the
/// midpoint between `x*` and the lower stable equilibrium.
pub fn tail_has_basin_crossing(sample: &LabeledSample, tail_fraction: f64) -> bool {
    let x_star = sample.coeffs.critical.x_star;
    let at_fold = sample.coeffs.drift.with_p(sample.coeffs.critical.p_star);
    let h = 1e-6;
    let lower = dynamics::equilibria(&at_fold, dynamics::DEFAULT_SEARCH_INTERVAL, 40_001)
        .into_iter()
        .filter(|&x| x < x_star - 1e-3)
        .rfind(|&x| at_fold.rate(x + h, at_fold.p) < at_fold.rate(x - h, at_fold.p));
    let Some(lower) = lower else {
        return false;
    };
    let threshold = 0.5 * (lower + x_star);
    let values = &sample.trajectory.values;
    let start = ((1.0 - tail_fraction) * values.len() as f64) as usize;
    let tail = &values[start..];
    tail.iter().any(|&x| x >= x_star) && tail.iter().any(|&x| x <= threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub native_length: usize,
    pub count_per_class: usize,
    pub var_window: usize,
    pub base_seed: u64,
    pub ranges: CoefficientRanges,
    pub p0: f64,
    pub dt: f64,
}

impl DatasetManifest {
    pub fn new(native_length: usize, count_per_class: usize, base_seed: u64) -> Self {
        DatasetManifest {
            native_length,
            count_per_class,
            var_window: DEFAULT_VAR_WINDOW.min(native_length),
            base_seed,
            ranges: CoefficientRanges::default(),
            p0: TRAINING_P0,
            dt: DEFAULT_DT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.native_length < 2 {
            return Err(Error::InvalidArgument("native length must be >= 2".into()));
        }
        if self.count_per_class == 0 {
            return Err(Error::InvalidArgument(
                "count per class must be >= 1".into(),
            ));
        }
        if self.var_window == 0 || self.var_window > self.native_length {
            return Err(Error::InvalidArgument(format!(
                "variance window {} must lie in 1..={}",
                self.var_window, self.native_length
            )));
        }
        Ok(())
    }

    pub fn data_file(&self, label: Label) -> String {
        format!("{}_L{}.f32", label.name(), self.native_length)
    }

    /// RNG stream of sample `index` of a class.
    pub fn stream_seed(&self, label: Label, index: usize) -> u64 {
        crate::derive_seed(self.base_seed, 2 * index as u64 + label.index() as u64)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let r = &self.ranges;
        let mut kv = KeyValues::new();
        kv.push("format_version", DATASET_FORMAT_VERSION)
            .push("artifact_version", crate::ARTIFACT_VERSION)
            .push("native_length", self.native_length)
            .push("count_per_class", self.count_per_class)
            .push("var_window", self.var_window)
            .push("base_seed", self.base_seed)
            .push("seed_rule", "stream = base_seed + 2*index + label")
            .push("p0", self.p0)
            .push("dt", self.dt)
            .push("sigma_rule", format!("{SIGMA_FACTOR}*x0"))
            .push("range.g", format!("{},{}", r.g.0, r.g.1))
            .push("range.f", "-|g|,|g|")
            .push("range.e", format!("{},{}", r.e.0, r.e.1))
            .push("range.d", "-|e|,|e|")
            .push("range.c", format!("{},{}", r.c.0, r.c.1))
            .push("range.b", "0")
            .push("range.a", format!("{},{}", r.a.0, r.a.1))
            .push("channels", "raw,rollvar")
            .push("file.flicker", self.data_file(Label::Flicker))
            .push("file.nonflicker", self.data_file(Label::NonFlicker));
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let version: u32 = kv.parse_value("format_version")?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported version {version}"),
            ));
        }
        let pair = |key: &str| -> Result<(f64, f64)> {
            let raw = kv.require(key)?;
            let (a, b) = raw
                .split_once(',')
                .ok_or_else(|| Error::format("manifest", format!("bad range `{raw}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format("manifest", format!("bad range `{raw}`")))
            };
            Ok((parse(a)?, parse(b)?))
        };
        let manifest = DatasetManifest {
            native_length: kv.parse_value("native_length")?,
            count_per_class: kv.parse_value("count_per_class")?,
            var_window: kv.parse_value("var_window")?,
            base_seed: kv.parse_value("base_seed")?,
            ranges: CoefficientRanges {
                g: pair("range.g")?,
                e: pair("range.e")?,
                c: pair("range.c")?,
                a: pair("range.a")?,
            },
            p0: kv.parse_value("p0")?,
            dt: kv.parse_value("dt")?,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Also write `<class>_L<len>.csv` with `sample,t,raw,rollvar` rows.
    pub export_csv: bool,
    /// Samples generated per parallel chunk.
    pub chunk: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            export_csv: false,
            chunk: 64,
        }
    }
}

const SAMPLES_HEADER: &str =
    "label,index,stream_seed,gen_seed,a,b,c,d,e,f,g,x0,sigma,p_start,p_end,x_star";

/// Generates and writes a full dataset. Output is identical for a fixed
/// manifest regardless of thread count.
pub fn build_dataset(
    manifest: &DatasetManifest,
    out_dir: &Path,
    options: BuildOptions,
) -> Result<()> {
    manifest.validate()?;
    if manifest.p0 != TRAINING_P0 || manifest.dt != DEFAULT_DT {
        return Err(Error::Unsupported(
            "p0 and dt are fixed at 5 and 0.01".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut summary = BufWriter::new(File::create(out_dir.join("samples.csv"))?);
    writeln!(summary, "{SAMPLES_HEADER}")?;
    for label in [Label::Flicker, Label::NonFlicker] {
        let mut data = BufWriter::new(File::create(out_dir.join(manifest.data_file(label)))?);
        let mut csv = if options.export_csv {
            let path = out_dir.join(format!("{}_L{}.csv", label.name(), manifest.native_length));
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "sample,t,raw,rollvar")?;
            Some(w)
        } else {
            None
        };
        let indices: Vec<usize> = (0..manifest.count_per_class).collect();
        for chunk in indices.chunks(options.chunk.max(1)) {
            let samples = chunk
                .par_iter()
                .map(|&i| {
                    generate_sample(
                        manifest.stream_seed(label, i),
                        manifest.native_length,
                        label,
                        manifest.var_window,
                        &manifest.ranges,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for (&i, s) in chunk.iter().zip(&samples) {
                for ch in [&s.channels.raw, &s.channels.rollvar] {
                    for &v in ch.iter() {
                        data.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                if let Some(w) = csv.as_mut() {
                    for (t, (r, v)) in s.channels.raw.iter().zip(&s.channels.rollvar).enumerate() {
                        writeln!(w, "{i},{t},{},{}", *r as f32, *v as f32)?;
                    }
                }
                let k = &s.coeffs.drift;
                writeln!(
                    summary,
                    "{},{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    label.index(),
                    manifest.stream_seed(label, i),
                    s.gen_seed,
                    k.a,
                    k.b,
                    k.c,
                    k.d,
                    k.e,
                    k.f,
                    k.g,
                    s.coeffs.x0,
                    s.sigma,
                    s.trajectory.meta.param_schedule.start,
                    s.trajectory.meta.param_schedule.final_value(),
                    s.coeffs.critical.x_star,
                )?;
            }
        }
        data.flush()?;
        if let Some(mut w) = csv {
            w.flush()?;
        }
    }
    summary.flush()?;
    manifest
        .to_key_values()
        .write(&out_dir.join("manifest.txt"))?;
    Ok(())
}

/// A dataset loaded for training: interleaved `len × 2` inputs with labels.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<(Vec<f32>, usize)>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let kv = KeyValues::read(&manifest_path(dir))?;
    let manifest = DatasetManifest::from_key_values(&kv)?;
    let len = manifest.native_length;
    let mut examples = Vec::with_capacity(2 * manifest.count_per_class);
    for label in [Label::Flicker, Label::NonFlicker] {
        let mut bytes = Vec::new();
        File::open(dir.join(manifest.data_file(label)))?.read_to_end(&mut bytes)?;
        let per_sample = 2 * len * 4;
        if bytes.len() != per_sample * manifest.count_per_class {
            return Err(Error::format(
                "dataset",
                format!(
                    "{} holds {} bytes, expected {}",
                    manifest.data_file(label),
                    bytes.len(),
                    per_sample * manifest.count_per_class
                ),
            ));
        }
        for chunk in bytes.chunks_exact(per_sample) {
            let values: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let (raw, var) = values.split_at(len);
            let input = raw.iter().zip(var).flat_map(|(&r, &v)| [r, v]).collect();
            examples.push((input, label.index()));
        }
    }
    Ok(LoadedDataset { manifest, examples })
}
