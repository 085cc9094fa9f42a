//! Sensor-wise segment masks for self-supervised pretraining.
//!
//! Each sensor column is a two-state Markov chain. Masked runs end with
//! probability `p_m = 1/l_m` per step and kept runs with `p_u = p_m·r/(1−r)`,
//! so run lengths are geometric with means `l_m` and `l_u = l_m(1−r)/r` and the
//! stationary masked fraction is `r`. Contiguous masked segments avoid the
//! isolated masked samples that neighbours would trivially reveal.

use rand::Rng;

use crate::error::{Result, StetError};
use crate::signal::SignalSequence;
use crate::tensor::Tensor;

/// `t × c` mask. `true` keeps a sample, `false` masks it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    t: usize,
    c: usize,
    values: Vec<bool>,
    pub ratio: f64,
    pub mean_masked_len: f64,
}

/// Per-state stop probabilities `(p_m, p_u)`.
pub fn stop_probabilities(mean_masked_len: f64, ratio: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(StetError::Parameter(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    if !(mean_masked_len >= 1.0) {
        return Err(StetError::Parameter(format!(
            "mean masked length {mean_masked_len} must be >= 1"
        )));
    }
    let p_m = 1.0 / mean_masked_len;
    Ok((p_m, p_m * ratio / (1.0 - ratio)))
}

/// One sensor's mask of length `t`.
pub fn generate_mask_column<R: Rng + ?Sized>(
    t: usize,
    mean_masked_len: f64,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let (p_m, p_u) = stop_probabilities(mean_masked_len, ratio)?;
    let mut col = vec![true; t];
    let mut kept = rng.gen::<f64>() > ratio;
    for slot in col.iter_mut() {
        *slot = kept;
        let p_stop = if kept { p_u } else { p_m };
        if rng.gen::<f64>() < p_stop {
            kept = !kept;
        }
    }
    Ok(col)
}

/// Independent columns for `c` sensors, drawn in sensor order from `rng`.
pub fn generate_mask_matrix<R: Rng + ?Sized>(
    t: usize,
    c: usize,
    mean_masked_len: f64,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskMatrix> {
    let mut values = vec![true; t * c];
    for ch in 0..c {
        let col = generate_mask_column(t, mean_masked_len, ratio, rng)?;
        for (i, k) in col.into_iter().enumerate() {
            values[i * c + ch] = k;
        }
    }
    Ok(MaskMatrix {
        t,
        c,
        values,
        ratio,
        mean_masked_len,
    })
}

impl MaskMatrix {
    pub fn from_values(t: usize, c: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != t * c {
            return Err(StetError::dim("MaskMatrix", &[t, c], &[values.len()]));
        }
        Ok(Self {
            t,
            c,
            values,
            ratio: f64::NAN,
            mean_masked_len: f64::NAN,
        })
    }

    pub fn all_kept(t: usize, c: usize) -> Self {
        Self::from_values(t, c, vec![true; t * c]).expect("sizes agree")
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.t, self.c]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn is_kept(&self, i: usize, ch: usize) -> bool {
        self.values[i * self.c + ch]
    }

    pub fn column(&self, ch: usize) -> Vec<bool> {
        (0..self.t).map(|i| self.is_kept(i, ch)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|&&k| !k).count()
    }

    /// 1.0 where kept, 0.0 where masked.
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// 1.0 where masked, 0.0 where kept (the reconstruction-loss indicator).
    pub fn masked_indicator(&self) -> Vec<f64> {
        self.values.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect()
    }
}

/// Zeroes masked entries: `X ⊙ M`.
pub fn apply_mask(x: &SignalSequence, m: &MaskMatrix) -> Result<SignalSequence> {
    if x.values.shape() != m.shape() {
        return Err(StetError::dim("apply_mask", x.values.shape(), &m.shape()));
    }
    let data = x
        .values
        .data()
        .iter()
        .zip(&m.values)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Ok(SignalSequence {
        values: Tensor::new(x.values.shape().to_vec(), data)?,
        label: x.label.clone(),
    })
}

/// Lengths of maximal masked runs in a column.
pub fn masked_run_lengths(col: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for &k in col {
        if !k {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::signal::Label;

    #[test]
    fn stop_probabilities_for_defaults() {
        let (p_m, p_u) = stop_probabilities(3.0, 0.15).unwrap();
        assert!((p_m - 1.0 / 3.0).abs() < 1e-15);
        assert!((p_u - 1.0 / 17.0).abs() < 1e-15);
        // l_u = 1/p_u = l_m (1-r)/r = 17
        assert!((1.0 / p_u - 17.0).abs() < 1e-12);
        assert!(stop_probabilities(3.0, 0.0).is_err());
        assert!(stop_probabilities(3.0, 1.0).is_err());
        assert!(stop_probabilities(0.5, 0.15).is_err());
    }

    #[test]
    fn small_ratio_limit() {
        let mut rng = RngState::new(1).stream(&[]);
        let col = generate_mask_column(1_000_000, 3.0, 0.01, &mut rng).unwrap();
        let frac = col.iter().filter(|&&k| !k).count() as f64 / col.len() as f64;
        assert!((0.005..=0.015).contains(&frac), "{frac}");
    }

    #[test]
    fn single_sensor_matrix_is_a_column() {
        let s = RngState::new(4);
        let m = generate_mask_matrix(200, 1, 3.0, 0.15, &mut s.stream(&[])).unwrap();
        let col = generate_mask_column(200, 3.0, 0.15, &mut s.stream(&[])).unwrap();
        assert_eq!(m.column(0), col);
    }

    #[test]
    fn sensors_are_independent_and_seeded() {
        let s = RngState::new(5);
        let m = generate_mask_matrix(1000, 2, 3.0, 0.15, &mut s.stream(&[])).unwrap();
        assert_ne!(m.column(0), m.column(1));
        let again = generate_mask_matrix(1000, 2, 3.0, 0.15, &mut s.stream(&[])).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn apply_mask_examples() {
        let x = SignalSequence {
            values: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            label: Label::Class(0),
        };
        let ones = MaskMatrix::all_kept(2, 2);
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = MaskMatrix::from_values(2, 2, vec![false; 4]).unwrap();
        assert!(apply_mask(&x, &zeros).unwrap().values.data().iter().all(|&v| v == 0.0));
        let checker = MaskMatrix::from_values(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(apply_mask(&x, &checker).unwrap().values.data(), &[1.0, 0.0, 0.0, 4.0]);
        let wrong = MaskMatrix::all_kept(3, 2);
        assert!(apply_mask(&x, &wrong).is_err());
    }

    #[test]
    fn run_lengths() {
        let col = [true, false, false, true, false, true, false, false, false];
        assert_eq!(masked_run_lengths(&col), vec![2, 1, 3]);
    }
}
