//! Drift families, Euler–Maruyama integration, equilibria and saddle-node
//! (fold) points.
//!
//! Every drift has the shape `dx/dt = c - x + h(x)` where `c` is the control
//! parameter (`p` for the polynomial training family, `b` for the named test
//! systems) and `h` is the family's nonlinearity.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;

/// Default |x| bound beyond which a simulation is declared divergent.
pub const DEFAULT_OVERFLOW_BOUND: f64 = 1e6;
/// Default interval scanned for equilibria.
pub const DEFAULT_SEARCH_INTERVAL: (f64, f64) = (-20.0, 20.0);
/// Default number of grid points used to bracket roots.
pub const DEFAULT_GRID_SIZE: usize = 4001;
/// Control value at which training trajectories start (`p0`).
pub const TRAINING_P0: f64 = 5.0;

/// A deterministic drift `f(x; c)`.
pub trait Drift: Send + Sync {
    /// Drift at state `x` with control parameter `control`.
    fn rate(&self, x: f64, control: f64) -> f64;

    /// The drift's own control parameter value.
    fn control(&self) -> f64;

    /// Human-readable, single-line description.
    fn describe(&self) -> String;
}

/// Evaluates the drift at `x` using the drift's own control parameter.
pub fn eval_drift(drift: &dyn Drift, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("state x = {x}")));
    }
    let value = drift.rate(x, drift.control());
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "drift {} at x = {x}",
            drift.describe()
        )));
    }
    Ok(value)
}

/// `dx/dt = p - x + a x + b x^2 + ... + g x^7`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyDrift {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub p: f64,
}

impl PolyDrift {
    pub fn coefficients(&self) -> [f64; 7] {
        [self.a, self.b, self.c, self.d, self.e, self.f, self.g]
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    /// The polynomial term `P(x) = a x + ... + g x^7`.
    pub fn polynomial(&self, x: f64) -> f64 {
        let k = self.coefficients();
        let mut acc = 0.0;
        for &coef in k.iter().rev() {
            acc = acc * x + coef;
        }
        acc * x
    }

    /// `P'(x)`.
    pub fn polynomial_slope(&self, x: f64) -> f64 {
        let k = self.coefficients();
        let mut acc = 0.0;
        for (i, &coef) in k.iter().enumerate().rev() {
            acc = acc * x + (i + 1) as f64 * coef;
        }
        acc
    }

    /// `P''(x)`.
    pub fn polynomial_curvature(&self, x: f64) -> f64 {
        let k = self.coefficients();
        let mut acc = 0.0;
        for (i, &coef) in k.iter().enumerate().skip(1).rev() {
            acc = acc * x + ((i + 1) * i) as f64 * coef;
        }
        acc
    }

    /// Locates the fold of the upper equilibrium branch.
    ///
    /// The reference state is the largest positive equilibrium at
    /// `p = TRAINING_P0`; as `p` decreases that branch moves down until
    /// `P'(x) = 1`. The returned `x*` is the largest solution of
    /// `P'(x) = 1` in `(0, x_ref)`.
    pub fn critical_point(&self) -> Result<CriticalPoint> {
        let reference = self.with_p(TRAINING_P0);
        let x_ref = upper_equilibrium(&reference).ok_or(Error::NoSaddleNode)?;
        let slope_gap = |x: f64| self.polynomial_slope(x) - 1.0;
        if !(slope_gap(x_ref) < 0.0) {
            return Err(Error::NoSaddleNode);
        }
        // Walk down from x_ref; the first sign change is the nearest fold.
        let n = DEFAULT_GRID_SIZE;
        let step = x_ref / (n - 1) as f64;
        let mut hi = x_ref;
        let mut f_hi = slope_gap(hi);
        for i in (0..n - 1).rev() {
            let lo = i as f64 * step;
            let f_lo = slope_gap(lo);
            if f_lo == 0.0 {
                if lo > 0.0 {
                    return Ok(CriticalPoint::from_poly(self, lo));
                }
                break;
            }
            if f_lo > 0.0 {
                let x_star = bisect(&slope_gap, lo, hi, f_lo, f_hi);
                if x_star > 0.0 {
                    return Ok(CriticalPoint::from_poly(self, x_star));
                }
                break;
            }
            hi = lo;
            f_hi = f_lo;
        }
        Err(Error::NoSaddleNode)
    }
}

impl Default for PolyDrift {
    fn default() -> Self {
        PolyDrift {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            e: 0.0,
            f: 0.0,
            g: 0.0,
            p: 0.0,
        }
    }
}

impl Drift for PolyDrift {
    fn rate(&self, x: f64, control: f64) -> f64 {
        control - x + self.polynomial(x)
    }

    fn control(&self) -> f64 {
        self.p
    }

    fn describe(&self) -> String {
        format!(
            "poly(a={},b={},c={},d={},e={},f={},g={},p={})",
            self.a, self.b, self.c, self.d, self.e, self.f, self.g, self.p
        )
    }
}

/// The six held-out test systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DriftFamily {
    Cubic,
    Exponential,
    Tanh,
    Hill,
    Logistic,
    Arctan,
}

impl DriftFamily {
    pub const ALL: [DriftFamily; 6] = [
        DriftFamily::Cubic,
        DriftFamily::Exponential,
        DriftFamily::Tanh,
        DriftFamily::Hill,
        DriftFamily::Logistic,
        DriftFamily::Arctan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DriftFamily::Cubic => "cubic",
            DriftFamily::Exponential => "exponential",
            DriftFamily::Tanh => "tanh",
            DriftFamily::Hill => "hill",
            DriftFamily::Logistic => "logistic",
            DriftFamily::Arctan => "arctan",
        }
    }

    /// Names of the fixed parameters the family's formula uses.
    pub fn fixed_param_names(self) -> &'static [&'static str] {
        match self {
            DriftFamily::Cubic => &["D"],
            _ => &[],
        }
    }
}

impl fmt::Display for DriftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DriftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DriftFamily::ALL
            .into_iter()
            .find(|fam| fam.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown drift family `{s}`")))
    }
}

/// One of the named test systems with control parameter `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedDrift {
    pub family: DriftFamily,
    pub b: f64,
    fixed: BTreeMap<String, f64>,
}

impl NamedDrift {
    /// Creates the family with its default fixed parameters (`D = 1.5` for
    /// the cubic model).
    pub fn new(family: DriftFamily, b: f64) -> Self {
        let mut fixed = BTreeMap::new();
        if family == DriftFamily::Cubic {
            fixed.insert("D".to_string(), 1.5);
        }
        NamedDrift { family, b, fixed }
    }

    /// Overrides a fixed parameter. Only names the family uses are accepted.
    pub fn with_param(mut self, name: &str, value: f64) -> Result<Self> {
        if !self.family.fixed_param_names().contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "family {} has no parameter `{name}`",
                self.family
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name} = {value}")));
        }
        self.fixed.insert(name.to_string(), value);
        Ok(self)
    }

    pub fn with_b(mut self, b: f64) -> Self {
        self.b = b;
        self
    }

    pub fn fixed_params(&self) -> &BTreeMap<String, f64> {
        &self.fixed
    }

    fn cubic_d(&self) -> f64 {
        self.fixed.get("D").copied().unwrap_or(1.5)
    }

    /// The nonlinearity `h(x)`.
    pub fn nonlinearity(&self, x: f64) -> f64 {
        match self.family {
            DriftFamily::Cubic => self.cubic_d() * x - x * x * x,
            DriftFamily::Exponential => 2.0 * (1.0 - (-2.0 * x * x).exp()),
            DriftFamily::Tanh => 2.0 * x.tanh(),
            DriftFamily::Hill => {
                let x6 = x.powi(6);
                1.5 * x6 / (1.0 + x6)
            }
            DriftFamily::Logistic => 1.0 / (1.0 + (-10.0 * x).exp()),
            DriftFamily::Arctan => (10.0 * x).atan(),
        }
    }

    /// `h'(x)`.
    pub fn nonlinearity_slope(&self, x: f64) -> f64 {
        match self.family {
            DriftFamily::Cubic => self.cubic_d() - 3.0 * x * x,
            DriftFamily::Exponential => 8.0 * x * (-2.0 * x * x).exp(),
            DriftFamily::Tanh => {
                let sech = 1.0 / x.cosh();
                2.0 * sech * sech
            }
            DriftFamily::Hill => {
                let x6 = x.powi(6);
                9.0 * x.powi(5) / ((1.0 + x6) * (1.0 + x6))
            }
            DriftFamily::Logistic => {
                let s = 1.0 / (1.0 + (-10.0 * x).exp());
                10.0 * s * (1.0 - s)
            }
            DriftFamily::Arctan => 10.0 / (1.0 + 100.0 * x * x),
        }
    }

    /// Saddle-node value of `b` for the upper stable branch.
    ///
    /// Equilibria satisfy `b = x - h(x)`; the branch that disappears as `b`
    /// decreases folds at the stationary point of that curve with the largest
    /// state.
    pub fn critical_control(&self) -> Result<f64> {
        let gap = |x: f64| 1.0 - self.nonlinearity_slope(x);
        let (lo, hi) = DEFAULT_SEARCH_INTERVAL;
        let roots = find_roots(gap, lo, hi, 40_001);
        let x_star = roots
            .last()
            .copied()
            .ok_or_else(|| Error::NoStationaryPoint(self.family.to_string()))?;
        Ok(x_star - self.nonlinearity(x_star))
    }
}

impl Drift for NamedDrift {
    fn rate(&self, x: f64, control: f64) -> f64 {
        control - x + self.nonlinearity(x)
    }

    fn control(&self) -> f64 {
        self.b
    }

    fn describe(&self) -> String {
        let mut s = format!("{}(b={}", self.family, self.b);
        for (k, v) in &self.fixed {
            s.push_str(&format!(",{k}={v}"));
        }
        s.push(')');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    LinearRamp,
    TriangularBump,
}

/// Time profile of a control parameter or of the noise amplitude, expressed
/// over the fraction `u ∈ [0, 1]` of the record's duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    pub peak: f64,
    pub window: (f64, f64),
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            start: value,
            end: value,
            peak: value,
            window: (0.0, 1.0),
        }
    }

    pub fn linear_ramp(start: f64, end: f64) -> Self {
        Schedule {
            kind: ScheduleKind::LinearRamp,
            start,
            end,
            peak: end,
            window: (0.0, 1.0),
        }
    }

    /// `start` outside `window`; inside, linear up to `peak` at the window
    /// midpoint and back down.
    pub fn triangular_bump(base: f64, peak: f64, window: (f64, f64)) -> Result<Self> {
        if !(0.0 <= window.0 && window.0 < window.1 && window.1 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bump window {window:?} must satisfy 0 <= start < end <= 1"
            )));
        }
        Ok(Schedule {
            kind: ScheduleKind::TriangularBump,
            start: base,
            end: base,
            peak,
            window,
        })
    }

    /// Value at fraction `u` of the total duration.
    pub fn value_at(&self, u: f64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.start,
            ScheduleKind::LinearRamp => {
                if u >= 1.0 {
                    self.end
                } else {
                    self.start * (1.0 - u) + self.end * u
                }
            }
            ScheduleKind::TriangularBump => {
                let (w0, w1) = self.window;
                if u <= w0 || u >= w1 {
                    return self.start;
                }
                let mid = 0.5 * (w0 + w1);
                let rise = if u <= mid {
                    (u - w0) / (mid - w0)
                } else {
                    (w1 - u) / (w1 - mid)
                };
                self.start + (self.peak - self.start) * rise
            }
        }
    }

    /// Value at sample `n` of a record with `len` samples.
    pub fn value_at_step(&self, n: usize, len: usize) -> f64 {
        if len <= 1 {
            return self.value_at(0.0);
        }
        self.value_at(n as f64 / (len - 1) as f64)
    }

    pub fn final_value(&self) -> f64 {
        self.value_at(1.0)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Constant => write!(f, "constant(value={})", self.start),
            ScheduleKind::LinearRamp => {
                write!(f, "linear_ramp(start={},end={})", self.start, self.end)
            }
            ScheduleKind::TriangularBump => write!(
                f,
                "triangular_bump(base={},peak={},window={}..{})",
                self.start, self.peak, self.window.0, self.window.1
            ),
        }
    }
}

/// Provenance of a simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub drift: String,
    pub param_schedule: Schedule,
    pub noise_schedule: Schedule,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with header `t,x`, `t = step * dt`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,x")?;
        for (n, x) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", n as f64 * self.dt, x)?;
        }
        Ok(())
    }

    pub fn metadata(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("drift", &self.meta.drift)
            .push("param_schedule", self.meta.param_schedule)
            .push("noise_schedule", self.meta.noise_schedule)
            .push("x0", self.meta.x0)
            .push("dt", self.dt)
            .push("len", self.values.len())
            .push("seed", self.seed);
        kv
    }

    /// Writes `<stem>.csv` and the `<stem>.meta` sidecar.
    pub fn export(&self, csv_path: &Path) -> Result<()> {
        let file = std::fs::File::create(csv_path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv(&mut out)?;
        out.flush()?;
        self.metadata().write(&csv_path.with_extension("meta"))
    }
}

/// Euler–Maruyama integration options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub overflow_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            overflow_bound: DEFAULT_OVERFLOW_BOUND,
        }
    }
}

/// Integrates `dx = f(x; c(t)) dt + σ(t) dW` for `len` samples (`len - 1`
/// steps), starting from `x0`. The state is never clamped.
pub fn simulate(
    drift: &dyn Drift,
    param_schedule: &Schedule,
    noise_schedule: &Schedule,
    x0: f64,
    len: usize,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_with(
        drift,
        param_schedule,
        noise_schedule,
        x0,
        len,
        dt,
        seed,
        SimOptions::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_with(
    drift: &dyn Drift,
    param_schedule: &Schedule,
    noise_schedule: &Schedule,
    x0: f64,
    len: usize,
    dt: f64,
    seed: u64,
    options: SimOptions,
) -> Result<Trajectory> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory length must be >= 2, got {len}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite(format!("x0 = {x0}")));
    }
    let mut rng = crate::seeded_rng(seed);
    let sqrt_dt = dt.sqrt();
    let mut values = Vec::with_capacity(len);
    let mut x = x0;
    values.push(x);
    for n in 0..len - 1 {
        let control = param_schedule.value_at_step(n, len);
        let sigma = noise_schedule.value_at_step(n, len);
        let z: f64 = rng.sample(StandardNormal);
        x += drift.rate(x, control) * dt + sigma * sqrt_dt * z;
        if !(x.abs() <= options.overflow_bound) {
            return Err(Error::Divergence {
                step: n + 1,
                value: x,
            });
        }
        values.push(x);
    }
    Ok(Trajectory {
        values,
        dt,
        seed,
        meta: TrajectoryMeta {
            drift: drift.describe(),
            param_schedule: *param_schedule,
            noise_schedule: *noise_schedule,
            x0,
        },
    })
}

/// All sign-change-bracketed roots of the drift (at its own control value)
/// on `interval`, sorted ascending.
pub fn equilibria(drift: &dyn Drift, interval: (f64, f64), grid_size: usize) -> Vec<f64> {
    let control = drift.control();
    find_roots(
        |x| drift.rate(x, control),
        interval.0,
        interval.1,
        grid_size,
    )
}

/// Largest positive equilibrium, if any.
pub fn upper_equilibrium(drift: &dyn Drift) -> Option<f64> {
    equilibria(drift, DEFAULT_SEARCH_INTERVAL, DEFAULT_GRID_SIZE)
        .into_iter()
        .rev()
        .find(|&x| x > 0.0)
}

/// Largest equilibrium with negative drift slope.
pub fn upper_stable_equilibrium(drift: &dyn Drift) -> Option<f64> {
    let control = drift.control();
    let h = 1e-6;
    equilibria(drift, DEFAULT_SEARCH_INTERVAL, DEFAULT_GRID_SIZE)
        .into_iter()
        .rev()
        .find(|&x| drift.rate(x + h, control) - drift.rate(x - h, control) < 0.0)
}

/// Grid scan plus bisection. Grid points that are exact zeros are reported
/// once.
pub fn find_roots<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, grid_size: usize) -> Vec<f64> {
    let mut roots = Vec::new();
    if !(lo < hi) || grid_size < 2 {
        return roots;
    }
    let step = (hi - lo) / (grid_size - 1) as f64;
    let at = |i: usize| {
        if i == grid_size - 1 {
            hi
        } else {
            lo + i as f64 * step
        }
    };
    let mut x_prev = at(0);
    let mut f_prev = f(x_prev);
    if f_prev == 0.0 {
        roots.push(x_prev);
    }
    for i in 1..grid_size {
        let x = at(i);
        let fx = f(x);
        if fx == 0.0 {
            roots.push(x);
        } else if f_prev != 0.0
            && (f_prev < 0.0) != (fx < 0.0)
            && f_prev.is_finite()
            && fx.is_finite()
        {
            roots.push(bisect(&f, x_prev, x, f_prev, fx));
        }
        x_prev = x;
        f_prev = fx;
    }
    roots
}

/// Bisection on a bracket with `f(lo)` and `f(hi)` of opposite sign, run to
/// floating-point resolution.
fn bisect<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64, mut f_lo: f64, _f_hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Saddle-node of the polynomial training drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoint {
    pub x_star: f64,
    pub p_star: f64,
    /// `x* - p*`, which equals `P(x*)`.
    pub y_star: f64,
}

impl CriticalPoint {
    fn from_poly(drift: &PolyDrift, x_star: f64) -> Self {
        let p_star = x_star - drift.polynomial(x_star);
        CriticalPoint {
            x_star,
            p_star,
            y_star: x_star - p_star,
        }
    }
}
