use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::NoiseConfig;
use super::train::classification_accuracy;
use crate::error::{Result, StetError};
use crate::metrics::{drop_rate, MetricsReport, NoiseRow};
use crate::model::{HeadKind, Model};
use crate::signal::{inject_noise, Label, NoiseMode, NoiseSpec, SignalSequence};

/// The sweep grid as `(mode, intensity)` pairs in report order.
pub fn noise_grid(cfg: &NoiseConfig) -> Vec<(NoiseMode, f64)> {
    let mut out = Vec::new();
    for (mode, list) in [
        (NoiseMode::AdditiveGaussian, &cfg.additive),
        (NoiseMode::MultiplicativeGaussian, &cfg.multiplicative),
        (NoiseMode::SignalLoss, &cfg.signal_loss),
    ] {
        out.extend(list.iter().map(|&i| (mode, i)));
    }
    out
}

/// Accuracy on `windows` after perturbing each with `spec`. Window `i` uses
/// noise stream `i`, so results do not depend on evaluation order.
pub fn noisy_accuracy(model: &Model, windows: &[SignalSequence], spec: &NoiseSpec) -> Result<f64> {
    let noisy: Vec<SignalSequence> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| inject_noise(w, spec, i as u64))
        .collect::<Result<_>>()?;
    Ok(classification_accuracy(model, &noisy)?.overall)
}

/// Clean accuracy plus accuracy and drop rate for every grid point. The model
/// is only evaluated, never retrained.
pub fn run_noise_bench(
    model: &Model,
    windows: &[SignalSequence],
    cfg: &NoiseConfig,
    header: Vec<String>,
) -> Result<MetricsReport> {
    if !matches!(model.config().head, HeadKind::Classify { .. }) {
        return Err(StetError::Config("noise benchmark needs a classification model".into()));
    }
    let grid = noise_grid(cfg);
    if grid.is_empty() {
        return Err(StetError::Config("noise grid is empty".into()));
    }
    let mut report = MetricsReport::new(header);
    let clean = classification_accuracy(model, windows)?;
    let clean_acc = clean.overall;
    report.accuracy = Some(clean);
    for (mode, intensity) in grid {
        let spec = NoiseSpec {
            mode,
            intensity,
            seed: cfg.seed,
        };
        let acc = noisy_accuracy(model, windows, &spec)?;
        report.noise.push(NoiseRow {
            mode: mode.as_str().into(),
            intensity,
            accuracy: acc,
            drop_rate: drop_rate(clean_acc, acc)?,
        });
    }
    Ok(report)
}

/// Writes `embeddings_{long,short,fused}.csv` into `dir`. Each row is the
/// window's label followed by the flattened stream (`t·h` values for long and
/// short, `2h` pooled values for fused).
pub fn export_embeddings(model: &Model, windows: &[SignalSequence], dir: &Path) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir).map_err(|e| StetError::io(dir, e))?;
    let paths = ["long", "short", "fused"].map(|k| dir.join(format!("embeddings_{k}.csv")));
    let mut files = Vec::with_capacity(3);
    for p in &paths {
        let f = std::fs::File::create(p).map_err(|e| StetError::io(p, e))?;
        files.push(std::io::BufWriter::new(f));
    }
    let (t, h) = (model.config().t, model.config().h);
    let widths = [t * h, t * h, 2 * h];
    for (f, (&w, p)) in files.iter_mut().zip(widths.iter().zip(&paths)) {
        let mut line = String::from("label");
        for k in 0..w {
            line.push_str(&format!(",e{k}"));
        }
        writeln!(f, "{line}").map_err(|e| StetError::io(p, e))?;
    }
    for w in windows {
        let e = model.embeddings(&w.values)?;
        let label = match &w.label {
            Label::Class(c) => c.to_string(),
            Label::Trajectory(_) => String::new(),
        };
        for (f, (vals, p)) in files.iter_mut().zip([&e.long, &e.short, &e.fused].into_iter().zip(&paths)) {
            let mut line = label.clone();
            for v in vals.iter() {
                line.push_str(&format!(",{v}"));
            }
            writeln!(f, "{line}").map_err(|e| StetError::io(p, e))?;
        }
    }
    for (f, p) in files.iter_mut().zip(&paths) {
        f.flush().map_err(|e| StetError::io(p, e))?;
    }
    Ok(paths)
}
