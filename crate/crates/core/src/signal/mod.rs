//! Recordings, normalization, window segmentation and noise injection.

pub mod io;
pub mod synthetic;

use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StetError};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Supervision attached to a recording or window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    /// Gesture id in `0..n_classes`.
    Class(usize),
    /// Joint angles in degrees, `n_samples × n_joints`.
    Trajectory(Tensor),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Trajectory(_) => None,
        }
    }
}

/// A raw multi-channel recording (`n_samples × c`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub samples: Tensor,
    pub sample_rate_hz: f64,
    pub label: Label,
    pub subject_id: String,
}

impl Recording {
    pub fn new(samples: Tensor, sample_rate_hz: f64, label: Label, subject_id: impl Into<String>) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(StetError::dim("Recording", samples.shape(), &[2]));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(StetError::Parameter(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if let Label::Trajectory(tr) = &label {
            if tr.shape().len() != 2 || tr.shape()[0] != samples.shape()[0] {
                return Err(StetError::dim("Recording trajectory", tr.shape(), samples.shape()));
            }
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            label,
            subject_id: subject_id.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.samples.shape()[1]
    }
}

/// One model input window (`t × c`) with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSequence {
    pub values: Tensor,
    pub label: Label,
}

impl SignalSequence {
    pub fn t(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[1]
    }

    /// Regression target for the window: the joint angles at its final sample.
    pub fn regression_target(&self) -> Option<Vec<f64>> {
        match &self.label {
            Label::Trajectory(tr) => Some(tr.row(tr.rows() - 1).to_vec()),
            Label::Class(_) => None,
        }
    }
}

// ---- normalization -----------------------------------------------------

/// Per-channel affine map to `[-1, 1]`, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxParams {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxParams {
    pub fn fit<'a>(recordings: impl IntoIterator<Item = &'a Recording>) -> Result<Self> {
        let mut mins: Vec<f64> = Vec::new();
        let mut maxs: Vec<f64> = Vec::new();
        for rec in recordings {
            let c = rec.n_channels();
            if mins.is_empty() {
                mins = vec![f64::INFINITY; c];
                maxs = vec![f64::NEG_INFINITY; c];
            } else if mins.len() != c {
                return Err(StetError::dim("MinMaxParams::fit", &[mins.len()], &[c]));
            }
            for r in 0..rec.n_samples() {
                for (ch, &v) in rec.samples.row(r).iter().enumerate() {
                    mins[ch] = mins[ch].min(v);
                    maxs[ch] = maxs[ch].max(v);
                }
            }
        }
        if mins.is_empty() {
            return Err(StetError::InsufficientData("no recordings to fit normalization".into()));
        }
        for (ch, (lo, hi)) in mins.iter().zip(&maxs).enumerate() {
            if !(hi > lo) {
                return Err(StetError::DegenerateChannel { channel: ch, value: *lo });
            }
        }
        Ok(Self { mins, maxs })
    }

    /// Maps each channel to `[-1, 1]`. Values outside the fitted range (unseen
    /// data) are clamped to the interval.
    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        let c = rec.n_channels();
        if c != self.mins.len() {
            return Err(StetError::dim("minmax_normalize", &[self.mins.len()], &[c]));
        }
        let mut out = rec.clone();
        for (i, v) in out.samples.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            let (lo, hi) = (self.mins[ch], self.maxs[ch]);
            *v = (2.0 * (*v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
        }
        Ok(out)
    }
}

/// Fits min-max parameters on `rec` alone and applies them.
pub fn minmax_normalize(rec: &Recording) -> Result<(Recording, MinMaxParams)> {
    let params = MinMaxParams::fit(std::iter::once(rec))?;
    Ok((params.apply(rec)?, params))
}

/// `sign(x)·ln(1 + mu|x|)/ln(1 + mu)`
pub fn mulaw(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

/// μ-law companding of an already `[-1, 1]`-scaled recording.
pub fn mulaw_normalize(rec: &Recording, mu: f64) -> Result<Recording> {
    if !(mu > 0.0) {
        return Err(StetError::Parameter(format!("mu must be positive, got {mu}")));
    }
    let c = rec.n_channels();
    let mut out = rec.clone();
    for (i, v) in out.samples.data_mut().iter_mut().enumerate() {
        if v.abs() > 1.0 || v.is_nan() {
            return Err(StetError::Range {
                value: *v,
                row: i / c,
                channel: i % c,
            });
        }
        if *v != 0.0 {
            *v = mulaw(*v, mu);
        }
    }
    Ok(out)
}

/// Normalization steps applied in order: min-max, then optional μ-law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub minmax: Option<MinMaxParams>,
    pub mu: Option<f64>,
}

impl Normalizer {
    pub fn fit(train: &[Recording], minmax: bool, mu: Option<f64>) -> Result<Self> {
        let minmax = if minmax {
            Some(MinMaxParams::fit(train.iter())?)
        } else {
            None
        };
        Ok(Self { minmax, mu })
    }

    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        let mut out = match &self.minmax {
            Some(p) => p.apply(rec)?,
            None => rec.clone(),
        };
        if let Some(mu) = self.mu {
            out = mulaw_normalize(&out, mu)?;
        }
        Ok(out)
    }
}

// ---- segmentation --------------------------------------------------------

/// How the configured overlap translates into a window stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StrideMode {
    /// stride = window − overlap
    #[default]
    Overlap,
    /// The overlap value is itself the stride.
    Stride,
}

fn ms_to_samples(ms: f64, rate: f64) -> usize {
    (ms * rate / 1000.0).round() as usize
}

/// Cuts a recording into fixed-length windows. A trailing partial window is
/// dropped; recordings shorter than one window yield nothing.
pub fn segment_windows(
    rec: &Recording,
    window_ms: f64,
    overlap_ms: f64,
    mode: StrideMode,
) -> Result<Vec<SignalSequence>> {
    if !(window_ms > overlap_ms) || overlap_ms < 0.0 {
        return Err(StetError::Parameter(format!(
            "need window_ms > overlap_ms >= 0, got {window_ms} / {overlap_ms}"
        )));
    }
    let len = ms_to_samples(window_ms, rec.sample_rate_hz);
    if len < 2 {
        return Err(StetError::Parameter(format!("window of {len} samples is too short")));
    }
    let overlap = ms_to_samples(overlap_ms, rec.sample_rate_hz);
    let stride = match mode {
        StrideMode::Overlap => len - overlap.min(len - 1),
        StrideMode::Stride => overlap.max(1),
    };
    let n = rec.n_samples();
    if n < len {
        warn!(
            "recording {} has {n} samples, shorter than one {len}-sample window",
            rec.subject_id
        );
        return Ok(Vec::new());
    }
    let c = rec.n_channels();
    let count = (n - len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        let values = Tensor::new(
            vec![len, c],
            rec.samples.data()[start * c..(start + len) * c].to_vec(),
        )?;
        let label = match &rec.label {
            Label::Class(id) => Label::Class(*id),
            Label::Trajectory(tr) => {
                let j = tr.cols();
                Label::Trajectory(Tensor::new(
                    vec![len, j],
                    tr.data()[start * j..(start + len) * j].to_vec(),
                )?)
            }
        };
        out.push(SignalSequence { values, label });
    }
    Ok(out)
}

// ---- noise ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    AdditiveGaussian,
    MultiplicativeGaussian,
    SignalLoss,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::AdditiveGaussian => "additive-gaussian",
            NoiseMode::MultiplicativeGaussian => "multiplicative-gaussian",
            NoiseMode::SignalLoss => "signal-loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// σ for the Gaussian modes, drop probability for signal loss.
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0) {
            return Err(StetError::Parameter(format!(
                "noise intensity must be >= 0, got {}",
                self.intensity
            )));
        }
        if self.mode == NoiseMode::SignalLoss && self.intensity > 1.0 {
            return Err(StetError::Parameter(format!(
                "signal-loss probability {} exceeds 1",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Perturbs a window. `stream` distinguishes windows sharing one spec seed.
pub fn inject_noise(x: &SignalSequence, spec: &NoiseSpec, stream: u64) -> Result<SignalSequence> {
    spec.validate()?;
    let mut out = x.clone();
    if spec.intensity == 0.0 {
        return Ok(out);
    }
    let mut rng = RngState::new(spec.seed).stream(&[crate::rng::tag::NOISE, stream]);
    let data = out.values.data_mut();
    match spec.mode {
        NoiseMode::AdditiveGaussian => {
            let n = Normal::new(0.0, spec.intensity).expect("sigma validated");
            for v in data.iter_mut() {
                *v += n.sample(&mut rng);
            }
        }
        NoiseMode::MultiplicativeGaussian => {
            let n = Normal::new(0.0, spec.intensity).expect("sigma validated");
            for v in data.iter_mut() {
                *v *= 1.0 + n.sample(&mut rng);
            }
        }
        NoiseMode::SignalLoss => {
            use rand::Rng;
            for v in data.iter_mut() {
                if rng.gen::<f64>() < spec.intensity {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(cols: Vec<Vec<f64>>) -> Recording {
        let n = cols[0].len();
        let c = cols.len();
        let data = (0..n).flat_map(|i| cols.iter().map(move |col| col[i])).collect();
        Recording::new(Tensor::new(vec![n, c], data).unwrap(), 1000.0, Label::Class(0), "s").unwrap()
    }

    #[test]
    fn minmax_examples() {
        let (out, _) = minmax_normalize(&rec(vec![vec![0.0, 5.0, 10.0]])).unwrap();
        assert_eq!(out.samples.data(), &[-1.0, 0.0, 1.0]);
        let (out, _) = minmax_normalize(&rec(vec![vec![-1.0, 0.25, 1.0]])).unwrap();
        assert_eq!(out.samples.data(), &[-1.0, 0.25, 1.0]);
        let err = minmax_normalize(&rec(vec![vec![0.0, 1.0, 3.0], vec![2.0, 2.0, 2.0]])).unwrap_err();
        assert!(matches!(err, StetError::DegenerateChannel { channel: 1, .. }));
    }

    #[test]
    fn minmax_uses_training_stats_on_test_data() {
        let train = rec(vec![vec![0.0, 10.0]]);
        let p = MinMaxParams::fit([&train]).unwrap();
        let test = p.apply(&rec(vec![vec![5.0, 20.0, -3.0]])).unwrap();
        assert_eq!(test.samples.data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn mulaw_examples() {
        assert_eq!(mulaw(0.0, 255.0), 0.0);
        assert!((mulaw(1.0, 255.0) - 1.0).abs() < 1e-15);
        assert!((mulaw(-1.0, 255.0) + 1.0).abs() < 1e-15);
        // ln(3.55)/ln(256) = 1.266948... / 5.545177... = 0.228477
        assert!((mulaw(0.01, 255.0) - 0.228_477).abs() < 1e-5);
        let bad = rec(vec![vec![0.0, 1.5]]);
        assert!(matches!(mulaw_normalize(&bad, 255.0), Err(StetError::Range { row: 1, .. })));
    }

    #[test]
    fn segmentation_examples() {
        let r = rec(vec![vec![0.0; 1000]]);
        let w = segment_windows(&r, 200.0, 10.0, StrideMode::Overlap).unwrap();
        assert_eq!(w.len(), 5);
        let tiled = segment_windows(&r, 200.0, 0.0, StrideMode::Overlap).unwrap();
        assert_eq!(tiled.len(), 5);
        let dense = segment_windows(&r, 200.0, 10.0, StrideMode::Stride).unwrap();
        assert_eq!(dense.len(), 81);
        let short = rec(vec![vec![0.0; 150]]);
        assert!(segment_windows(&short, 200.0, 10.0, StrideMode::Overlap).unwrap().is_empty());
        assert!(segment_windows(&r, 10.0, 10.0, StrideMode::Overlap).is_err());
    }

    #[test]
    fn segmentation_start_offsets() {
        let ramp: Vec<f64> = (0..1000).map(f64::from).collect();
        let r = rec(vec![ramp]);
        let starts: Vec<f64> = segment_windows(&r, 200.0, 10.0, StrideMode::Overlap)
            .unwrap()
            .iter()
            .map(|w| w.values.data()[0])
            .collect();
        assert_eq!(starts, vec![0.0, 190.0, 380.0, 570.0, 760.0]);
    }

    #[test]
    fn trajectory_is_windowed_with_signal() {
        let n = 10;
        let samples = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let traj = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let r = Recording::new(samples, 1000.0, Label::Trajectory(traj), "s").unwrap();
        let w = segment_windows(&r, 4.0, 0.0, StrideMode::Overlap).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].regression_target().unwrap(), vec![14.0, 15.0]);
    }

    fn seq(n: usize, v: f64) -> SignalSequence {
        SignalSequence {
            values: Tensor::full(&[n, 1], v),
            label: Label::Class(0),
        }
    }

    #[test]
    fn noise_examples() {
        let x = seq(100, 0.7);
        for mode in [NoiseMode::AdditiveGaussian, NoiseMode::MultiplicativeGaussian, NoiseMode::SignalLoss] {
            let spec = NoiseSpec { mode, intensity: 0.0, seed: 3 };
            assert_eq!(inject_noise(&x, &spec, 0).unwrap(), x);
        }
        let all = NoiseSpec { mode: NoiseMode::SignalLoss, intensity: 1.0, seed: 3 };
        assert!(inject_noise(&x, &all, 0).unwrap().values.data().iter().all(|&v| v == 0.0));
        let bad = NoiseSpec { mode: NoiseMode::SignalLoss, intensity: 1.5, seed: 3 };
        assert!(inject_noise(&x, &bad, 0).is_err());
        let neg = NoiseSpec { mode: NoiseMode::AdditiveGaussian, intensity: -0.1, seed: 3 };
        assert!(inject_noise(&x, &neg, 0).is_err());
    }

    #[test]
    fn additive_noise_statistics() {
        let n = 100_000;
        let spec = NoiseSpec { mode: NoiseMode::AdditiveGaussian, intensity: 0.1, seed: 11 };
        let out = inject_noise(&seq(n, 0.0), &spec, 0).unwrap();
        let d = out.values.data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
        assert!((std - 0.1).abs() < 0.002, "std {std}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let spec = NoiseSpec { mode: NoiseMode::MultiplicativeGaussian, intensity: 0.2, seed: 5 };
        let x = seq(50, 0.5);
        assert_eq!(inject_noise(&x, &spec, 7).unwrap(), inject_noise(&x, &spec, 7).unwrap());
        assert_ne!(inject_noise(&x, &spec, 7).unwrap(), inject_noise(&x, &spec, 8).unwrap());
    }

    proptest! {
        #[test]
        fn mulaw_monotone_and_odd(a in -1.0f64..1.0, b in -1.0f64..1.0, mu in 1.0f64..1000.0) {
            prop_assert!((mulaw(-a, mu) + mulaw(a, mu)).abs() < 1e-15);
            prop_assert!(mulaw(a, mu).abs() <= 1.0);
            prop_assert_eq!(mulaw(a, mu).signum(), a.signum());
            if a < b {
                prop_assert!(mulaw(a, mu) < mulaw(b, mu));
            }
        }

        #[test]
        fn minmax_is_a_fixed_point(vals in proptest::collection::vec(-50.0f64..50.0, 3..40)) {
            prop_assume!(vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min) > 1e-3);
            let (once, _) = minmax_normalize(&rec(vec![vals])).unwrap();
            let (twice, _) = minmax_normalize(&once).unwrap();
            for (a, b) in once.samples.data().iter().zip(twice.samples.data()) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(a));
            }
        }

        #[test]
        fn window_count_formula(n in 2usize..400, lw in 2usize..60, lo_frac in 0.0f64..0.9) {
            let lo = ((lw as f64) * lo_frac) as usize;
            prop_assume!(lo < lw);
            let r = rec(vec![vec![0.0; n]]);
            let got = segment_windows(&r, lw as f64, lo as f64, StrideMode::Overlap).unwrap().len();
            let expected = if n < lw { 0 } else { (n - lw) / (lw - lo) + 1 };
            prop_assert_eq!(got, expected);
        }
    }
}
