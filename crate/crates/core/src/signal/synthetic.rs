//! Synthetic multi-channel sEMG-like recordings.
//!
//! Each class owns a per-channel activation envelope built from smooth
//! Gaussian bumps. A recording multiplies that envelope by band-limited,
//! zero-mean Gaussian noise (the carrier), so class identity lives in how
//! signal power is distributed over channels and time, as in surface EMG.
//!
//! "Short-term twin" pairs share one envelope everywhere except for a brief
//! burst on a single channel, placed early for one class and late for the
//! other. Their per-channel power is identical in expectation; only the
//! timing of a short local event separates them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, Recording};
use crate::error::{Result, StetError};
use crate::rng::{tag, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    /// Samples per recording.
    pub t: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub sample_rate_hz: f64,
    /// Leading class pairs (0,1), (2,3), ... generated as short-term twins.
    pub twin_pairs: usize,
    /// Channels carrying a class envelope; the rest sit at the noise floor.
    pub active_channels: usize,
    /// When set, recordings carry joint-angle trajectories instead of class ids.
    pub n_joints: Option<usize>,
    /// Standard deviation of per-sample joint-angle jitter, degrees.
    pub angle_noise_deg: f64,
    /// Envelope added on the burst channel of a twin class.
    pub twin_burst_gain: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_channels: 8,
            t: 64,
            samples_per_class: 200,
            seed: 7,
            sample_rate_hz: 1000.0,
            twin_pairs: 1,
            active_channels: 3,
            n_joints: None,
            angle_noise_deg: 1.0,
            twin_burst_gain: 8.0,
        }
    }
}

const NOISE_FLOOR: f64 = 0.1;
const SENSOR_NOISE: f64 = 0.03;
const CARRIER_TAPS: [f64; 5] = [0.25, 0.75, 1.0, 0.75, 0.25];

#[derive(Debug, Clone)]
struct ClassProfile {
    /// `t × c` envelope.
    envelope: Vec<f64>,
    /// Joint angles in degrees (regression only).
    angles: Vec<f64>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(StetError::Parameter("n_classes must be >= 2".into()));
        }
        if self.n_channels == 0 || self.t < 8 {
            return Err(StetError::Parameter("need n_channels >= 1 and t >= 8".into()));
        }
        if 2 * self.twin_pairs > self.n_classes {
            return Err(StetError::Parameter("twin_pairs exceeds n_classes / 2".into()));
        }
        if self.active_channels == 0 || self.active_channels > self.n_channels {
            return Err(StetError::Parameter("active_channels must be in 1..=n_channels".into()));
        }
        Ok(())
    }

    /// Burst half-width and the early/late centers used for twin classes.
    pub fn twin_burst_geometry(&self) -> (usize, usize, usize) {
        let width = (self.t / 16).max(2);
        (width, self.t / 4, (3 * self.t) / 4)
    }

    fn profiles(&self) -> Vec<ClassProfile> {
        let (t, c) = (self.t, self.n_channels);
        let root = RngState::new(self.seed);
        let base_envelope = |k: usize| -> Vec<f64> {
            let mut rng = root.stream(&[tag::SYNTH, 0, k as u64]);
            let mut env = vec![NOISE_FLOOR; t * c];
            let first = (k * self.active_channels) % c;
            for j in 0..self.active_channels {
                let ch = (first + j) % c;
                let tonic = rng.gen_range(0.2..0.4);
                let bumps: Vec<(f64, f64, f64)> = (0..2)
                    .map(|_| {
                        (
                            rng.gen_range(0.5..1.5),
                            rng.gen_range(0.0..t as f64),
                            rng.gen_range(t as f64 / 8.0..t as f64 / 3.0),
                        )
                    })
                    .collect();
                for i in 0..t {
                    let x = i as f64;
                    let mut e = tonic;
                    for &(a, mu, s) in &bumps {
                        e += a * (-(x - mu).powi(2) / (2.0 * s * s)).exp();
                    }
                    env[i * c + ch] = e;
                }
            }
            env
        };
        (0..self.n_classes)
            .map(|k| {
                let mut envelope;
                if k < 2 * self.twin_pairs {
                    let pair = k / 2;
                    envelope = base_envelope(2 * pair);
                    let (half, early, late) = self.twin_burst_geometry();
                    let ch = (2 * pair * self.active_channels) % c;
                    let center = if k % 2 == 0 { early } else { late };
                    for i in center.saturating_sub(half)..(center + half).min(t) {
                        envelope[i * c + ch] += self.twin_burst_gain;
                    }
                } else {
                    envelope = base_envelope(k);
                }
                let angles = match self.n_joints {
                    Some(nj) => {
                        let mut rng = root.stream(&[tag::SYNTH, 1, k as u64]);
                        (0..nj).map(|_| rng.gen_range(-40.0..40.0)).collect()
                    }
                    None => Vec::new(),
                };
                ClassProfile { envelope, angles }
            })
            .collect()
    }
}

fn carrier(t: usize, rng: &mut impl Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..t + CARRIER_TAPS.len())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = CARRIER_TAPS.iter().map(|h| h * h).sum::<f64>().sqrt();
    (0..t)
        .map(|i| {
            CARRIER_TAPS
                .iter()
                .enumerate()
                .map(|(k, h)| h * white[i + k])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Generates `samples_per_class` recordings for every class, grouped by class.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let (t, c) = (spec.t, spec.n_channels);
    let profiles = spec.profiles();
    let root = RngState::new(spec.seed);
    let sensor = Normal::new(0.0, SENSOR_NOISE).expect("constant sigma");
    let mut out = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (k, profile) in profiles.iter().enumerate() {
        for n in 0..spec.samples_per_class {
            let mut rng = root.stream(&[tag::SYNTH, 2, k as u64, n as u64]);
            let gain: f64 = rng.gen_range(0.8..1.2);
            let mut data = vec![0.0; t * c];
            for ch in 0..c {
                let car = carrier(t, &mut rng);
                for i in 0..t {
                    data[i * c + ch] = gain * profile.envelope[i * c + ch] * car[i] + sensor.sample(&mut rng);
                }
            }
            let label = match spec.n_joints {
                Some(nj) => {
                    let jitter = Normal::new(0.0, spec.angle_noise_deg.max(0.0))
                        .map_err(|e| StetError::Parameter(e.to_string()))?;
                    let traj = (0..t * nj)
                        .map(|i| profile.angles[i % nj] + jitter.sample(&mut rng))
                        .collect();
                    Label::Trajectory(Tensor::new(vec![t, nj], traj)?)
                }
                None => Label::Class(k),
            };
            out.push(Recording::new(
                Tensor::new(vec![t, c], data)?,
                spec.sample_rate_hz,
                label,
                format!("synth-c{k}-n{n}"),
            )?);
        }
    }
    Ok(out)
}
