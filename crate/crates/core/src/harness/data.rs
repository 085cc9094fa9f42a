use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::config::{DataConfig, RunConfig};
use crate::error::{Result, StetError};
use crate::model::ModelConfig;
use crate::rng::{tag, RngState};
use crate::signal::io::{load_dataset, DatasetFormat};
use crate::signal::synthetic::generate_synthetic_dataset;
use crate::signal::{segment_windows, Label, Normalizer, Recording, SignalSequence};
use crate::tensor::Tensor;

/// Windows ready for training, with the normalization fitted on the train part.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SignalSequence>,
    pub test: Vec<SignalSequence>,
    pub normalizer: Normalizer,
    /// Seed of the split stream, recorded in reports.
    pub split_seed: u64,
}

pub fn load_recordings(cfg: &DataConfig) -> Result<Vec<Recording>> {
    match &cfg.path {
        Some(p) => load_dataset(p, DatasetFormat::from_path(p)),
        None => generate_synthetic_dataset(&cfg.synthetic),
    }
}

/// Per-class `train:test` split of recording indices. Recordings without a
/// class label are split as one group. Both index lists come back sorted.
pub fn stratified_split(recs: &[Recording], ratio: [usize; 2], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        groups.entry(r.label.class()).or_default().push(i);
    }
    let root = RngState::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in groups {
        let key = class.map_or(u64::MAX, |c| c as u64);
        idx.shuffle(&mut root.stream(&[tag::SPLIT, key]));
        let n = idx.len();
        let mut n_train = (n * ratio[0] + (ratio[0] + ratio[1]) / 2) / (ratio[0] + ratio[1]);
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn windows_of(rec: &Recording, cfg: &DataConfig, model: &ModelConfig) -> Result<Vec<SignalSequence>> {
    let windows = match cfg.window_ms {
        Some(ms) => segment_windows(rec, ms, cfg.overlap_ms, cfg.stride_mode)?,
        None => vec![SignalSequence {
            values: rec.samples.clone(),
            label: rec.label.clone(),
        }],
    };
    if let Some(w) = windows.first() {
        if w.values.shape() != [model.t, model.c] {
            return Err(StetError::Config(format!(
                "windows are {:?} but the model expects [{}, {}]",
                w.values.shape(),
                model.t,
                model.c
            )));
        }
    }
    Ok(windows)
}

/// Loads or generates recordings, splits them, fits normalization on the
/// training recordings and cuts both parts into windows.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let recs = load_recordings(&cfg.data)?;
    prepare_from(cfg, &recs)
}

pub fn prepare_from(cfg: &RunConfig, recs: &[Recording]) -> Result<PreparedData> {
    if recs.is_empty() {
        return Err(StetError::InsufficientData("dataset has no recordings".into()));
    }
    let split_seed = cfg.seed;
    let (tr, te) = stratified_split(recs, cfg.data.split, split_seed);
    let train_recs: Vec<Recording> = tr.iter().map(|&i| recs[i].clone()).collect();
    let mu = cfg.data.mulaw.then_some(cfg.data.mu);
    let normalizer = Normalizer::fit(&train_recs, cfg.data.minmax, mu)?;
    let cut = |idx: &[usize]| -> Result<Vec<SignalSequence>> {
        let mut out = Vec::new();
        for &i in idx {
            let r = normalizer.apply(&recs[i])?;
            out.extend(windows_of(&r, &cfg.data, &cfg.model)?);
        }
        Ok(out)
    };
    let train = cut(&tr)?;
    let test = cut(&te)?;
    if train.is_empty() || test.is_empty() {
        return Err(StetError::InsufficientData(format!(
            "split produced {} train and {} test windows",
            train.len(),
            test.len()
        )));
    }
    Ok(PreparedData {
        train,
        test,
        normalizer,
        split_seed,
    })
}

/// One-hot target row for a class window.
pub fn one_hot(label: &Label, n_classes: usize) -> Result<Vec<f64>> {
    let c = label
        .class()
        .ok_or_else(|| StetError::Config("classification needs class labels".into()))?;
    if c >= n_classes {
        return Err(StetError::Mapping(c));
    }
    let mut v = vec![0.0; n_classes];
    v[c] = 1.0;
    Ok(v)
}

/// Stacks the final-sample targets of regression windows, `n × joints`.
pub fn regression_targets(windows: &[SignalSequence]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| {
            w.regression_target()
                .ok_or_else(|| StetError::Config("regression needs trajectory labels".into()))
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}
