//! The six-system generalization experiment and the ROC comparison of the
//! classifier score against the rolling-variance score.
//!
//! Replicate `i` of a flickering run uses seed `base + 2i + 1`; replicate `i`
//! of a null run uses `base + 2i`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::detector::{scan_series, trace_conservative_score, variance_score, EnsembleSpec};
use crate::dynamics::{self, simulate, DriftFamily, NamedDrift, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;

pub const DEFAULT_STEPS: usize = 62_500;
pub const DEFAULT_DT: f64 = 0.01;
/// Peak of the null-regime noise bump relative to the base noise. Large
/// enough to inflate the rolling variance, small enough that most null
/// replicates stay in their starting basin.
pub const DEFAULT_BUMP_PEAK_FACTOR: f64 = 1.5;
pub const NULL_BUMP_WINDOW: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);
pub const DEFAULT_DL_REPLICATES: usize = 50;
pub const DEFAULT_VAR_REPLICATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Flickering,
    Null,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Flickering => "flickering",
            Regime::Null => "null",
        }
    }
}

/// Noise level and control range of a test system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemSettings {
    pub family: DriftFamily,
    pub sigma: f64,
    pub b_start: f64,
    pub b_end: f64,
}

/// Default settings per system. The cubic system has no fixed end value; it ends
/// 5% of the ramp span beyond its fold.
pub fn system_settings(family: DriftFamily) -> Result<SystemSettings> {
    let (sigma, b_start, b_end) = match family {
        DriftFamily::Cubic => {
            let b_fold = NamedDrift::new(family, 0.5).critical_control()?;
            (0.4, 0.5, b_fold - 0.05 * (0.5 - b_fold))
        }
        DriftFamily::Exponential => (0.45, 0.0, -1.0),
        DriftFamily::Tanh => (0.9, 0.5, -1.0),
        DriftFamily::Hill => (0.5, 1.0, -0.5),
        DriftFamily::Logistic => (0.3, 0.0, -1.0),
        DriftFamily::Arctan => (0.8, 0.5, -1.0),
    };
    Ok(SystemSettings {
        family,
        sigma,
        b_start,
        b_end,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub drift: NamedDrift,
    pub regime: Regime,
    /// Samples per trajectory.
    pub steps: usize,
    pub dt: f64,
    pub sigma: f64,
    pub b_start: f64,
    pub b_end: f64,
    pub bump_peak_factor: f64,
    pub replicates: usize,
    pub base_seed: u64,
}

impl ExperimentSpec {
    pub fn new(
        family: DriftFamily,
        regime: Regime,
        replicates: usize,
        base_seed: u64,
    ) -> Result<Self> {
        let s = system_settings(family)?;
        Ok(ExperimentSpec {
            drift: NamedDrift::new(family, s.b_start),
            regime,
            steps: DEFAULT_STEPS,
            dt: DEFAULT_DT,
            sigma: s.sigma,
            b_start: s.b_start,
            b_end: s.b_end,
            bump_peak_factor: DEFAULT_BUMP_PEAK_FACTOR,
            replicates,
            base_seed,
        })
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be >= 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidArgument("steps must be >= 2".into()));
        }
        if !(self.sigma >= 0.0 && self.bump_peak_factor >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
        }
        Ok(())
    }

    pub fn param_schedule(&self) -> Schedule {
        match self.regime {
            Regime::Flickering => Schedule::linear_ramp(self.b_start, self.b_end),
            Regime::Null => Schedule::constant(self.b_start),
        }
    }

    pub fn noise_schedule(&self) -> Result<Schedule> {
        match self.regime {
            Regime::Flickering => Ok(Schedule::constant(self.sigma)),
            Regime::Null => Schedule::triangular_bump(
                self.sigma,
                self.bump_peak_factor * self.sigma,
                NULL_BUMP_WINDOW,
            ),
        }
    }

    /// Upper stable equilibrium at `b_start`.
    pub fn initial_state(&self) -> Result<f64> {
        let drift = self.drift.clone().with_b(self.b_start);
        dynamics::upper_stable_equilibrium(&drift).ok_or_else(|| {
            Error::NoStationaryPoint(format!("{} has no stable equilibrium", drift.family))
        })
    }

    pub fn replicate_seed(&self, index: usize) -> u64 {
        let offset = match self.regime {
            Regime::Flickering => 1,
            Regime::Null => 0,
        };
        crate::derive_seed(self.base_seed, 2 * index as u64 + offset)
    }

    pub fn replicate(&self, index: usize) -> Result<Trajectory> {
        simulate(
            &self.drift,
            &self.param_schedule(),
            &self.noise_schedule()?,
            self.initial_state()?,
            self.steps,
            self.dt,
            self.replicate_seed(index),
        )
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("system", self.drift.family)
            .push("regime", self.regime.name())
            .push("steps", self.steps)
            .push("dt", self.dt)
            .push("sigma", self.sigma)
            .push("b_start", self.b_start)
            .push("b_end", self.b_end)
            .push("bump_peak_factor", self.bump_peak_factor)
            .push("replicates", self.replicates)
            .push("base_seed", self.base_seed);
        kv
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    (0..spec.replicates)
        .into_par_iter()
        .map(|i| spec.replicate(i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Descending, from `+inf` to `-inf`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// CSV `threshold,fpr,tpr` followed by a final `auc=<value>` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            writeln!(out, "{t},{f},{p}")?;
        }
        writeln!(out, "auc={}", self.auc)?;
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// ROC of "alarm when score ≥ τ" over every distinct score. Equal scores
/// move the curve diagonally in one step.
pub fn roc_from_scores(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs positive and negative scores".into(),
        ));
    }
    if let Some(v) = pos.iter().chain(neg).find(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("score {v}")));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < all.len() {
        let tau = all[i].0;
        while i < all.len() && all[i].0 == tau {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (f, t) = (fp as f64 / nn, tp as f64 / np);
        auc += (f - fpr[fpr.len() - 1]) * (t + tpr[tpr.len() - 1]) / 2.0;
        thresholds.push(tau);
        fpr.push(f);
        tpr.push(t);
    }
    thresholds.push(f64::NEG_INFINITY);
    fpr.push(1.0);
    tpr.push(1.0);
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub steps: usize,
    pub dl_replicates: usize,
    pub var_replicates: usize,
    /// Trailing window of the variance score, in raw samples.
    pub var_window: usize,
    pub base_seed: u64,
}

impl CompareOptions {
    pub fn full_scale(base_seed: u64) -> Self {
        CompareOptions {
            steps: DEFAULT_STEPS,
            dl_replicates: DEFAULT_DL_REPLICATES,
            var_replicates: DEFAULT_VAR_REPLICATES,
            var_window: 1000,
            base_seed,
        }
    }

    /// Equal replicate counts, the variance window scaled with the series
    /// length.
    pub fn scaled(steps: usize, replicates: usize, base_seed: u64) -> Self {
        CompareOptions {
            steps,
            dl_replicates: replicates,
            var_replicates: replicates,
            var_window: ((1000.0 * steps as f64 / DEFAULT_STEPS as f64).round() as usize).max(2),
            base_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub family: DriftFamily,
    pub dl_pos: Vec<f64>,
    pub dl_neg: Vec<f64>,
    pub var_pos: Vec<f64>,
    pub var_neg: Vec<f64>,
    pub dl: RocCurve,
    pub var: RocCurve,
}

impl Comparison {
    pub fn report(&self, options: &CompareOptions) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("system", self.family)
            .push("steps", options.steps)
            .push("dl_replicates", options.dl_replicates)
            .push("var_replicates", options.var_replicates)
            .push("var_window", options.var_window)
            .push("base_seed", options.base_seed)
            .push("dl_auc", self.dl.auc)
            .push("var_auc", self.var.auc)
            .push("dl_wins", self.dl.auc > self.var.auc);
        kv
    }

    /// CSV `regime,replicate,dl_score,var_score`; a score the run did not
    /// compute is left empty.
    pub fn write_scores<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "regime,replicate,dl_score,var_score")?;
        for (regime, dl, var) in [
            ("flickering", &self.dl_pos, &self.var_pos),
            ("null", &self.dl_neg, &self.var_neg),
        ] {
            for i in 0..dl.len().max(var.len()) {
                let d = dl.get(i).map(|v| v.to_string()).unwrap_or_default();
                let v = var.get(i).map(|v| v.to_string()).unwrap_or_default();
                writeln!(out, "{regime},{i},{d},{v}")?;
            }
        }
        Ok(())
    }
}

/// Simulates flickering and null replicates and scores them with the
/// ensemble (conservative score) and the variance score.
pub fn compare_detectors(
    family: DriftFamily,
    ensemble: &EnsembleSpec,
    options: &CompareOptions,
) -> Result<Comparison> {
    if options.dl_replicates == 0 || options.var_replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    ensemble.validate()?;
    let count = options.dl_replicates.max(options.var_replicates);
    let mut scores = Vec::with_capacity(2);
    for regime in [Regime::Flickering, Regime::Null] {
        let spec = ExperimentSpec::new(family, regime, count, options.base_seed)?
            .with_steps(options.steps);
        spec.validate()?;
        let per_rep = (0..count)
            .map(|i| {
                let traj = spec.replicate(i)?;
                let var = if i < options.var_replicates {
                    Some(variance_score(&traj.values, options.var_window)?)
                } else {
                    None
                };
                let dl = if i < options.dl_replicates {
                    Some(trace_conservative_score(&scan_series(
                        &traj.values,
                        ensemble,
                    )?)?)
                } else {
                    None
                };
                Ok((dl, var))
            })
            .collect::<Result<Vec<_>>>()?;
        let dl: Vec<f64> = per_rep.iter().filter_map(|r| r.0).collect();
        let var: Vec<f64> = per_rep.iter().filter_map(|r| r.1).collect();
        scores.push((dl, var));
    }
    let (dl_neg, var_neg) = scores.pop().expect("null scores");
    let (dl_pos, var_pos) = scores.pop().expect("flickering scores");
    Ok(Comparison {
        family,
        dl: roc_from_scores(&dl_pos, &dl_neg)?,
        var: roc_from_scores(&var_pos, &var_neg)?,
        dl_pos,
        dl_neg,
        var_pos,
        var_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Drift;
    use crate::features::mean_std;
    use proptest::prelude::*;

    fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_from_scores(&[0.9, 0.8], &[0.1, 0.2]).unwrap().auc, 1.0);
        assert!((roc_from_scores(&[0.8, 0.4], &[0.6, 0.2]).unwrap().auc - 0.75).abs() < 1e-15);
        let s = [0.3, 0.1, 0.7, 0.7];
        assert_eq!(roc_from_scores(&s, &s).unwrap().auc, 0.5);
        assert!(roc_from_scores(&[], &[1.0]).is_err());
        for (p, n, want) in [(0.2, 0.1, 1.0), (0.1, 0.2, 0.0), (0.1, 0.1, 0.5)] {
            let c = roc_from_scores(&[p], &[n]).unwrap();
            assert_eq!(c.auc, want);
            assert_eq!((c.fpr[0], c.tpr[0]), (0.0, 0.0));
            assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
        }
    }

    #[test]
    fn roc_csv_ends_with_auc() {
        let c = roc_from_scores(&[0.8, 0.4], &[0.6, 0.2]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
        assert!(text.ends_with("-inf,1,1\nauc=0.75\n"));
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise_oracle(
            pos in prop::collection::vec(prop_oneof![0.0f64..1.0, (0u8..5).prop_map(|v| v as f64 / 4.0)], 1..40),
            neg in prop::collection::vec(prop_oneof![0.0f64..1.0, (0u8..5).prop_map(|v| v as f64 / 4.0)], 1..40),
        ) {
            let c = roc_from_scores(&pos, &neg).unwrap();
            prop_assert!((c.auc - pairwise_auc(&pos, &neg)).abs() < 1e-12);
            prop_assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.thresholds.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            pos in prop::collection::vec(-5.0f64..5.0, 1..30),
            neg in prop::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let f = |v: &f64| (2.0 * v).exp() + v;
            let a = roc_from_scores(&pos, &neg).unwrap().auc;
            let pt: Vec<f64> = pos.iter().map(f).collect();
            let nt: Vec<f64> = neg.iter().map(f).collect();
            prop_assert_eq!(a, roc_from_scores(&pt, &nt).unwrap().auc);
        }
    }

    #[test]
    fn settings_table() {
        let tanh = system_settings(DriftFamily::Tanh).unwrap();
        assert_eq!((tanh.sigma, tanh.b_start, tanh.b_end), (0.9, 0.5, -1.0));
        let logistic = system_settings(DriftFamily::Logistic).unwrap();
        assert_eq!(
            (logistic.sigma, logistic.b_start, logistic.b_end),
            (0.3, 0.0, -1.0)
        );
        let cubic = system_settings(DriftFamily::Cubic).unwrap();
        let fold = -2.0 * (0.5f64 / 3.0).powf(1.5);
        assert!((cubic.b_end - (fold - 0.05 * (0.5 - fold))).abs() < 1e-6);
        for family in DriftFamily::ALL {
            let s = system_settings(family).unwrap();
            let fold = NamedDrift::new(family, s.b_start)
                .critical_control()
                .unwrap();
            assert!(s.b_start > fold && s.b_end < fold, "{family}");
        }
    }

    #[test]
    fn initial_state_is_a_stable_equilibrium() {
        for family in DriftFamily::ALL {
            let spec = ExperimentSpec::new(family, Regime::Flickering, 1, 0).unwrap();
            let x0 = spec.initial_state().unwrap();
            let d = spec.drift.clone().with_b(spec.b_start);
            assert!(d.rate(x0, d.b).abs() < 1e-9);
            assert!(d.rate(x0 + 1e-4, d.b) < 0.0 && d.rate(x0 - 1e-4, d.b) > 0.0);
        }
    }

    #[test]
    fn null_regime_inflates_middle_variance() {
        let spec = ExperimentSpec::new(DriftFamily::Tanh, Regime::Null, 20, 11)
            .unwrap()
            .with_steps(12_000);
        let reps = run_experiment(&spec).unwrap();
        let mut inflated = 0;
        for t in &reps {
            assert_eq!(t.meta.param_schedule, Schedule::constant(0.5));
            let third = t.len() / 3;
            let first = mean_std(&t.values[..third]).1;
            let middle = mean_std(&t.values[third..2 * third]).1;
            if middle > first {
                inflated += 1;
            }
        }
        assert!(inflated >= 18, "{inflated} of 20");
    }

    #[test]
    fn experiments_are_deterministic_and_regimes_differ() {
        let f = ExperimentSpec::new(DriftFamily::Arctan, Regime::Flickering, 3, 5)
            .unwrap()
            .with_steps(500);
        let n = ExperimentSpec::new(DriftFamily::Arctan, Regime::Null, 3, 5)
            .unwrap()
            .with_steps(500);
        let a = run_experiment(&f).unwrap();
        assert_eq!(a, run_experiment(&f).unwrap());
        let b = run_experiment(&n).unwrap();
        let seeds: Vec<u64> = a.iter().chain(&b).map(|t| t.seed).collect();
        assert_eq!(seeds, vec![6, 8, 10, 5, 7, 9]);
        assert!(run_experiment(&f.clone().with_steps(1)).is_err());
        let mut zero = f;
        zero.replicates = 0;
        assert!(run_experiment(&zero).is_err());
    }

    #[test]
    fn one_vs_one_comparison_is_well_formed() {
        use crate::neuralnet::{Architecture, Checkpoint, Network};
        let arch = Architecture {
            input_len: 50,
            in_channels: 2,
            conv1_filters: 2,
            conv2_filters: 2,
            kernel: 3,
            lstm1_units: 2,
            lstm2_units: 2,
            classes: 2,
            dropout: 0.0,
        };
        let ckpt = Checkpoint::new(Network::new(arch, 1).unwrap(), 10);
        let ensemble = EnsembleSpec::new(vec![ckpt], &[0.16]).unwrap();
        let options = CompareOptions::scaled(1000, 1, 3);
        let c = compare_detectors(DriftFamily::Logistic, &ensemble, &options).unwrap();
        for curve in [&c.dl, &c.var] {
            assert!([0.0, 0.5, 1.0].contains(&curve.auc));
        }
        assert_eq!(options.var_window, 16);
        let kv = c.report(&options);
        assert_eq!(kv.get("system"), Some("logistic"));
    }
}
