//! Classification and regression metrics, the noise drop-rate, and the
//! serialized metrics report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StetError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SingleFinger,
    MultiFinger,
    Wrist,
    Rest,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::SingleFinger,
        Category::MultiFinger,
        Category::Wrist,
        Category::Rest,
    ];
}

/// Assigns every class id to a gesture category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap(pub Vec<Category>);

impl CategoryMap {
    /// Last class is rest; the others are split into three contiguous groups
    /// (single-finger, multi-finger, wrist).
    pub fn default_for(n_classes: usize) -> Self {
        let active = n_classes.saturating_sub(1);
        let mut v = Vec::with_capacity(n_classes);
        for k in 0..active {
            v.push(match (3 * k) / active.max(1) {
                0 => Category::SingleFinger,
                1 => Category::MultiFinger,
                _ => Category::Wrist,
            });
        }
        if n_classes > 0 {
            v.push(Category::Rest);
        }
        Self(v)
    }

    pub fn category(&self, class: usize) -> Result<Category> {
        self.0.get(class).copied().ok_or(StetError::Mapping(class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Categories with no samples are absent rather than reported as 0.
    pub per_category: BTreeMap<Category, f64>,
    pub per_category_count: BTreeMap<Category, usize>,
    pub overall: f64,
    pub n: usize,
}

pub fn accuracy(preds: &[usize], labels: &[usize], map: &CategoryMap) -> Result<AccuracyReport> {
    if preds.len() != labels.len() {
        return Err(StetError::dim("accuracy", &[preds.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(StetError::InsufficientData("no samples".into()));
    }
    let mut correct: BTreeMap<Category, usize> = BTreeMap::new();
    let mut count: BTreeMap<Category, usize> = BTreeMap::new();
    let mut total_correct = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        let cat = map.category(y)?;
        map.category(p)?;
        *count.entry(cat).or_default() += 1;
        if p == y {
            *correct.entry(cat).or_default() += 1;
            total_correct += 1;
        }
    }
    let per_category = count
        .iter()
        .map(|(cat, &n)| (*cat, *correct.get(cat).unwrap_or(&0) as f64 / n as f64))
        .collect();
    Ok(AccuracyReport {
        per_category,
        per_category_count: count,
        overall: total_correct as f64 / labels.len() as f64,
        n: labels.len(),
    })
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_across_runs(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(StetError::InsufficientData(format!(
            "std needs at least 2 runs, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(StetError::DegenerateSeries("zero variance in correlation".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn check_series(y_true: &[Vec<f64>], y_pred: &[Vec<f64>], min_len: usize) -> Result<()> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(StetError::dim("series", &[y_true.len()], &[y_pred.len()]));
    }
    for (t, p) in y_true.iter().zip(y_pred) {
        if t.len() != p.len() {
            return Err(StetError::dim("series", &[t.len()], &[p.len()]));
        }
        if t.len() < min_len {
            return Err(StetError::InsufficientData(format!(
                "need at least {min_len} points, got {}",
                t.len()
            )));
        }
    }
    Ok(())
}

/// Pearson correlation per joint trajectory, averaged over joints.
/// Each inner vector is one joint's series.
pub fn pcc(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    check_series(y_true, y_pred, 2)?;
    let mut s = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        s += pearson(t, p)?;
    }
    Ok(s / y_true.len() as f64)
}

pub fn rmse(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    check_series(y_true, y_pred, 1)?;
    let mut s = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let mse = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
        s += mse.sqrt();
    }
    Ok(s / y_true.len() as f64)
}

/// RMSE divided by the range of the true series, per joint, averaged.
pub fn nrmse(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    check_series(y_true, y_pred, 1)?;
    let mut s = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = t.iter().copied().fold(f64::INFINITY, f64::min);
        let range = max - min;
        if !(range > 0.0) {
            return Err(StetError::DegenerateSeries("flat true trajectory".into()));
        }
        let mse = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
        s += mse.sqrt() / range;
    }
    Ok(s / y_true.len() as f64)
}

/// Mean discrete curvature `|y''| / (1 + y'²)^{3/2}` over interior points and
/// joints, using central differences at unit index spacing.
pub fn avg_curvature(y: &[Vec<f64>]) -> Result<f64> {
    if y.is_empty() {
        return Err(StetError::InsufficientData("no joints".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for series in y {
        if series.len() < 3 {
            return Err(StetError::InsufficientData(format!(
                "curvature needs at least 3 points, got {}",
                series.len()
            )));
        }
        for i in 1..series.len() - 1 {
            let d1 = (series[i + 1] - series[i - 1]) / 2.0;
            let d2 = series[i + 1] - 2.0 * series[i] + series[i - 1];
            total += d2.abs() / (1.0 + d1 * d1).powf(1.5);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `(acc_raw − acc_noise) / acc_raw`
pub fn drop_rate(acc_raw: f64, acc_noise: f64) -> Result<f64> {
    if acc_raw == 0.0 {
        return Err(StetError::Division("clean accuracy is zero".into()));
    }
    Ok((acc_raw - acc_noise) / acc_raw)
}

// ---- report ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub mode: String,
    pub intensity: f64,
    pub accuracy: f64,
    pub drop_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub pcc: f64,
    pub rmse: f64,
    pub nrmse: f64,
    /// Mean curvature of the predicted trajectories.
    pub kappa: f64,
    /// Mean curvature of the ground-truth trajectories, for reference.
    pub kappa_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdSummary {
    /// What the standard deviation is taken across (e.g. "seeds").
    pub axis: String,
    pub overall: f64,
    pub per_category: BTreeMap<Category, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Free-form provenance lines (optimizer, split seed, init source, ...).
    pub header: Vec<String>,
    pub accuracy: Option<AccuracyReport>,
    pub std: Option<StdSummary>,
    pub regression: Option<RegressionMetrics>,
    pub noise: Vec<NoiseRow>,
    /// Row = true class, column = predicted class.
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl MetricsReport {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            header,
            accuracy: None,
            std: None,
            regression: None,
            noise: Vec::new(),
            confusion: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("report is serializable");
        std::fs::write(path, s).map_err(|e| StetError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| StetError::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| StetError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Flat `mode,intensity,accuracy,drop_rate` table.
    pub fn write_noise_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("mode,intensity,accuracy,drop_rate\n");
        for r in &self.noise {
            s.push_str(&format!("{},{},{},{}\n", r.mode, r.intensity, r.accuracy, r.drop_rate));
        }
        std::fs::write(path, s).map_err(|e| StetError::io(path, e))
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p < n_classes && y < n_classes {
            m[y][p] += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn accuracy_examples() {
        let map = CategoryMap::default_for(8);
        let labels: Vec<usize> = (0..8).collect();
        let r = accuracy(&labels, &labels, &map).unwrap();
        assert_eq!(r.overall, 1.0);
        assert!(r.per_category.values().all(|&a| a == 1.0));

        let r = accuracy(&[0, 1], &[0, 1], &map).unwrap();
        assert!(!r.per_category.contains_key(&Category::Rest));
        assert!(matches!(accuracy(&[0], &[99], &map), Err(StetError::Mapping(99))));
    }

    #[test]
    fn shuffled_predictions_are_chance() {
        let c = 8;
        let labels: Vec<usize> = (0..40_000).map(|i| i % c).collect();
        let mut preds = labels.clone();
        preds.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let r = accuracy(&preds, &labels, &CategoryMap::default_for(c)).unwrap();
        assert!((r.overall - 1.0 / c as f64).abs() < 0.01, "{}", r.overall);
    }

    #[test]
    fn default_category_map() {
        let m = CategoryMap::default_for(8);
        assert_eq!(m.0.len(), 8);
        assert_eq!(m.0[7], Category::Rest);
        for cat in Category::ALL {
            assert!(m.0.contains(&cat));
        }
    }

    #[test]
    fn std_examples() {
        assert_eq!(std_across_runs(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((std_across_runs(&[0.8, 1.0]).unwrap() - 0.141_421_356).abs() < 1e-8);
        assert!(std_across_runs(&[0.8]).is_err());
    }

    #[test]
    fn pcc_examples() {
        let t = vec![vec![1.0, 3.0, 2.0, 5.0]];
        assert!((pcc(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg = vec![t[0].iter().map(|v| -v).collect()];
        assert!((pcc(&t, &neg).unwrap() + 1.0).abs() < 1e-15);
        let aff = vec![t[0].iter().map(|v| 2.0 * v + 5.0).collect()];
        assert!((pcc(&t, &aff).unwrap() - 1.0).abs() < 1e-15);
        assert!(pcc(&t, &[vec![1.0; 4]]).is_err());
    }

    #[test]
    fn nrmse_examples() {
        let t = vec![vec![0.0, 2.0, 4.0, 1.0]];
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        let shifted = vec![t[0].iter().map(|v| v + 0.5).collect()];
        assert!((nrmse(&t, &shifted).unwrap() - 0.5 / 4.0).abs() < 1e-15);
        assert!(nrmse(&[vec![1.0, 1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn curvature_examples() {
        let line = vec![(0..50).map(|i| 3.0 * i as f64 - 2.0).collect::<Vec<_>>()];
        assert!(avg_curvature(&line).unwrap() < 1e-12);
        assert!(avg_curvature(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn curvature_of_a_circle() {
        // The upper half of a radius-R circle sampled at unit index spacing.
        // Written as y(i) = sqrt(R² − (i·s − R)²)/s so that the unit-index
        // derivative equals the geometric one; κ of the unit circle is 1 in
        // geometric units, i.e. 1/R · R = s·(R/s)/R in index units → 1 after
        // scaling by R. Use R = 1 via index scale s = 2/n.
        let n = 1000usize;
        let s = 2.0 / n as f64;
        let ys: Vec<f64> = (0..=n)
            .map(|i| {
                let x = i as f64 * s - 1.0;
                (1.0 - x * x).max(0.0).sqrt() / s
            })
            .collect();
        // Exclude the vertical-tangent ends where the graph parameterization breaks.
        let interior: Vec<f64> = ys[n / 10..9 * n / 10].to_vec();
        let k_index = avg_curvature(&[interior]).unwrap();
        // Curvature in index units of a circle of radius 1/s is s.
        let k = k_index / s;
        assert!((k - 1.0).abs() < 0.05, "{k}");
    }

    #[test]
    fn noise_increases_curvature() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let base: Vec<f64> = (0..500).map(|i| (i as f64 / 40.0).sin() * 10.0).collect();
        let noisy: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        assert!(avg_curvature(&[noisy]).unwrap() > avg_curvature(&[base]).unwrap());
    }

    #[test]
    fn drop_rate_examples() {
        assert_eq!(drop_rate(0.9, 0.9).unwrap(), 0.0);
        assert!((drop_rate(0.9, 0.81).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(drop_rate(0.7, 0.0).unwrap(), 1.0);
        assert!(drop_rate(0.0, 0.0).is_err());
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsReport::new(vec!["optimizer: adamw".into()]);
        r.noise.push(NoiseRow {
            mode: "signal-loss".into(),
            intensity: 0.1,
            accuracy: 0.8,
            drop_rate: 0.1,
        });
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(MetricsReport::read_json(&p).unwrap(), r);
        let c = dir.path().join("n.csv");
        r.write_noise_csv(&c).unwrap();
        assert_eq!(
            std::fs::read_to_string(c).unwrap(),
            "mode,intensity,accuracy,drop_rate\nsignal-loss,0.1,0.8,0.1\n"
        );
    }

    proptest! {
        #[test]
        fn overall_is_weighted_category_mean(labels in proptest::collection::vec(0usize..8, 1..200), seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<usize> = labels.iter().map(|&y| if rng.gen_bool(0.6) { y } else { rng.gen_range(0..8) }).collect();
            let r = accuracy(&preds, &labels, &CategoryMap::default_for(8)).unwrap();
            let weighted: f64 = r.per_category.iter().map(|(c, a)| a * r.per_category_count[c] as f64).sum::<f64>() / r.n as f64;
            prop_assert!((weighted - r.overall).abs() < 1e-12);
        }

        #[test]
        fn pcc_positive_affine_invariant(v in proptest::collection::vec(-10.0f64..10.0, 3..50), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + (i as f64).sin()).collect();
            let t = vec![v.clone()];
            let p = vec![w.clone()];
            prop_assume!(pcc(&t, &p).is_ok());
            let p2 = vec![w.iter().map(|x| a * x + b).collect()];
            prop_assert!((pcc(&t, &p).unwrap() - pcc(&t, &p2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn curvature_shift_invariant(v in proptest::collection::vec(-10.0f64..10.0, 3..50), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((avg_curvature(&[v]).unwrap() - avg_curvature(&[shifted]).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn std_shift_invariant(v in proptest::collection::vec(0.0f64..1.0, 2..20), c in -1.0f64..1.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((std_across_runs(&v).unwrap() - std_across_runs(&shifted).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn nrmse_scale_invariant(v in proptest::collection::vec(-10.0f64..10.0, 2..50), k in 0.1f64..10.0) {
            let p: Vec<f64> = v.iter().map(|x| x * 0.9 + 0.3).collect();
            prop_assume!(nrmse(&[v.clone()], &[p.clone()]).is_ok());
            let vs: Vec<f64> = v.iter().map(|x| x * k).collect();
            let ps: Vec<f64> = p.iter().map(|x| x * k).collect();
            prop_assert!((nrmse(&[v], &[p]).unwrap() - nrmse(&[vs], &[ps]).unwrap()).abs() < 1e-9);
        }
    }
}
