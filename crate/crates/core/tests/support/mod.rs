//! Reference classifiers used as independent oracles by several test targets.

#![allow(dead_code)]

use stet_core::signal::SignalSequence;

/// Per-channel root mean square over the whole window.
pub fn channel_rms(w: &SignalSequence) -> Vec<f64> {
    let (t, c) = (w.t(), w.c());
    let d = w.values.data();
    (0..c)
        .map(|ch| ((0..t).map(|i| d[i * c + ch].powi(2)).sum::<f64>() / t as f64).sqrt())
        .collect()
}

/// Squared signal smoothed over `half`-sample neighbourhoods, flattened `t·c`.
pub fn local_energy(w: &SignalSequence, half: usize) -> Vec<f64> {
    let (t, c) = (w.t(), w.c());
    let d = w.values.data();
    let mut out = vec![0.0; t * c];
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(t);
        for ch in 0..c {
            let s: f64 = (lo..hi).map(|k| d[k * c + ch].powi(2)).sum();
            out[i * c + ch] = s / (hi - lo) as f64;
        }
    }
    out
}

/// Linear discriminant with a pooled diagonal covariance.
pub struct DiagLda {
    means: Vec<Vec<f64>>,
    var: Vec<f64>,
    classes: Vec<usize>,
}

impl DiagLda {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Self {
        let d = features[0].len();
        let mut means = vec![vec![0.0; d]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (f, y) in features.iter().zip(labels) {
            let k = classes.iter().position(|c| c == y).expect("label in class list");
            counts[k] += 1;
            for (m, v) in means[k].iter_mut().zip(f) {
                *m += v;
            }
        }
        for (m, n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut var = vec![0.0; d];
        for (f, y) in features.iter().zip(labels) {
            let k = classes.iter().position(|c| c == y).unwrap();
            for j in 0..d {
                var[j] += (f[j] - means[k][j]).powi(2);
            }
        }
        let n = features.len() as f64;
        var.iter_mut().for_each(|v| *v = (*v / n).max(1e-12));
        Self {
            means,
            var,
            classes: classes.to_vec(),
        }
    }

    pub fn predict(&self, f: &[f64]) -> usize {
        let score = |m: &Vec<f64>| -> f64 { f.iter().zip(m).zip(&self.var).map(|((x, mu), v)| (x - mu).powi(2) / v).sum() };
        let mut best = 0;
        for k in 1..self.means.len() {
            if score(&self.means[k]) < score(&self.means[best]) {
                best = k;
            }
        }
        self.classes[best]
    }
}

/// Fits an LDA on `feature(train)` restricted to `classes` and returns its
/// accuracy on the matching test windows.
pub fn oracle_accuracy(
    train: &[SignalSequence],
    test: &[SignalSequence],
    classes: &[usize],
    feature: impl Fn(&SignalSequence) -> Vec<f64>,
) -> f64 {
    let pick = |ws: &[SignalSequence]| -> (Vec<Vec<f64>>, Vec<usize>) {
        ws.iter()
            .filter_map(|w| w.label.class().filter(|c| classes.contains(c)).map(|c| (feature(w), c)))
            .unzip()
    };
    let (xf, xy) = pick(train);
    let (tf, ty) = pick(test);
    let lda = DiagLda::fit(&xf, &xy, classes);
    let hits = tf.iter().zip(&ty).filter(|(f, y)| lda.predict(f) == **y).count();
    hits as f64 / ty.len() as f64
}

/// Among test windows of class `a` or `b`, the fraction whose probability for
/// the true class exceeds that of the other.
pub fn pairwise_accuracy(probs: &[Vec<f64>], labels: &[usize], a: usize, b: usize) -> f64 {
    let mut n = 0;
    let mut hits = 0;
    for (p, &y) in probs.iter().zip(labels) {
        if y != a && y != b {
            continue;
        }
        n += 1;
        let other = if y == a { b } else { a };
        if p[y] > p[other] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// 1-nearest-neighbour accuracy (squared Euclidean) on windows of `classes`.
pub fn nn_accuracy(
    train: &[SignalSequence],
    test: &[SignalSequence],
    classes: &[usize],
    feature: impl Fn(&SignalSequence) -> Vec<f64>,
) -> f64 {
    let pick = |ws: &[SignalSequence]| -> Vec<(Vec<f64>, usize)> {
        ws.iter()
            .filter_map(|w| w.label.class().filter(|c| classes.contains(c)).map(|c| (feature(w), c)))
            .collect()
    };
    let reference = pick(train);
    let queries = pick(test);
    let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum() };
    let hits = queries
        .iter()
        .filter(|(q, y)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (r, c) in &reference {
                let d = dist(q, r);
                if d < best.0 {
                    best = (d, *c);
                }
            }
            best.1 == *y
        })
        .count();
    hits as f64 / queries.len() as f64
}
