use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, RunConfig, Task};
use super::data::{one_hot, regression_targets, PreparedData};
use super::optim::{AdamW, OPTIMIZER_NAME};
use crate::error::{Result, StetError};
use crate::losses::{asymmetric_loss, cross_entropy_loss, masked_mse_loss, mse_regression_loss, LossKind};
use crate::masking::{apply_mask, generate_mask_matrix};
use crate::metrics::{
    accuracy, avg_curvature, confusion_matrix, nrmse, pcc, rmse, AccuracyReport, CategoryMap, MetricsReport,
    RegressionMetrics,
};
use crate::model::{argmax, HeadKind, Mode, Model, TargetStats};
use crate::rng::{tag, RngState};
use crate::signal::SignalSequence;
use crate::tensor::{Tape, Var};

const PHASE_PRETRAIN: u64 = 0;
const PHASE_FINETUNE: u64 = 1;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// `pretrain`, `train` or `test`.
    pub split: String,
    pub loss: f64,
    /// Accuracy for classification, RMSE for regression, empty for pretraining.
    pub metric: Option<f64>,
    pub seconds: f64,
}

pub fn write_log_csv(path: &Path, log: &[TrainLogRecord]) -> Result<()> {
    let mut s = String::from("epoch,split,loss,metric,seconds\n");
    for r in log {
        let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.split, r.loss, metric, r.seconds));
    }
    let mut f = std::fs::File::create(path).map_err(|e| StetError::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| StetError::io(path, e))
}

/// Shuffled mini-batches of `0..n` for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, root: &RngState, phase: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut root.stream(&[tag::SHUFFLE, phase, epoch as u64]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn collect_grads(tape: &Tape, n_params: usize) -> Vec<Option<Vec<f64>>> {
    let mut grads = vec![None; n_params];
    for (id, g) in tape.param_grads() {
        grads[id] = Some(g.to_vec());
    }
    grads
}

fn instability(model: &Model, phase: &str, epoch: usize, batch: usize, loss: f64) -> StetError {
    let mut norms = model.params().norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(4).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    StetError::NumericInstability {
        path: format!(
            "{phase} loss {loss} at epoch {epoch}, batch {batch}; largest parameter norms: {}",
            top.join(", ")
        ),
    }
}

fn mean_of(tape: &mut Tape, losses: Vec<Var>) -> Result<Var> {
    let n = losses.len() as f64;
    let mut it = losses.into_iter();
    let mut total = it.next().ok_or_else(|| StetError::InsufficientData("empty batch".into()))?;
    for l in it {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / n))
}

// ---- pretraining ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub log: Vec<TrainLogRecord>,
}

impl PretrainOutcome {
    /// Checkpoint with optimizer moments so the run can be resumed.
    pub fn checkpoint(&self) -> crate::model::Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.tensors.extend(self.optimizer.state_tensors(self.model.params()));
        ck.meta.insert("pretrain_epochs_done".into(), self.epochs_done.to_string());
        ck
    }
}

/// Masked-reconstruction pretraining on unlabeled windows. Each sample gets a
/// fresh mask every step. With `resume`, training continues from the saved
/// epoch and optimizer state, reproducing an uninterrupted run.
pub fn run_pretrain(
    cfg: &RunConfig,
    windows: &[SignalSequence],
    resume: Option<&crate::model::Checkpoint>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(StetError::InsufficientData("no pretraining windows".into()));
    }
    let root = RngState::new(cfg.seed);
    let ocfg = OptimizerConfig {
        lr: cfg.optimizer.pretrain_lr,
        ..cfg.optimizer
    };
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            let model = Model::from_checkpoint(ck)?;
            let diff = crate::model::config_diff(&cfg.model, model.config());
            if !diff.is_empty() {
                return Err(StetError::ConfigMismatch(diff.join("; ")));
            }
            let opt = AdamW::restore(ocfg, model.params(), &ck.tensors)?;
            let done = ck
                .meta
                .get("pretrain_epochs_done")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| StetError::Config("checkpoint is not a pretraining checkpoint".into()))?;
            (model, opt, done)
        }
        None => {
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let opt = AdamW::new(ocfg, model.params());
            (model, opt, 0)
        }
    };
    let (t, c) = (cfg.model.t, cfg.model.c);
    let mut log = Vec::new();
    for epoch in start..cfg.train.pretrain_epochs {
        let t0 = Instant::now();
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(windows.len(), cfg.train.batch_size, &root, PHASE_PRETRAIN, epoch);
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for (s, &idx) in batch.iter().enumerate() {
                let tags = [PHASE_PRETRAIN, epoch as u64, bi as u64, s as u64];
                let mut mrng = root.stream(&[&[tag::MASK][..], &tags].concat());
                let mask = generate_mask_matrix(t, c, cfg.mask.mean_len, cfg.mask.ratio, &mut mrng)?;
                if mask.masked_count() == 0 {
                    continue;
                }
                let masked = apply_mask(&windows[idx], &mask)?;
                let mut drng = root.stream(&[&[tag::DROPOUT][..], &tags].concat());
                let rec = model.forward_pretrain(&mut tape, &bound, &masked.values, &mut Mode::train(&mut drng))?;
                let truth = tape.constant(&windows[idx].values);
                losses.push(masked_mse_loss(&mut tape, truth, rec, &mask)?);
            }
            if losses.is_empty() {
                continue;
            }
            let n = losses.len();
            let loss = mean_of(&mut tape, losses)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(instability(&model, "pretrain", epoch, bi, value));
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, model.params().len());
            opt.step(model.params_mut(), &grads)?;
            epoch_loss += value * n as f64;
        }
        let rec = TrainLogRecord {
            epoch,
            split: "pretrain".into(),
            loss: epoch_loss / windows.len() as f64,
            metric: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!("pretrain epoch {epoch}: loss {:.6}", rec.loss);
        log.push(rec);
    }
    model.meta.insert("provenance".into(), "pretrain".into());
    Ok(PretrainOutcome {
        model,
        optimizer: opt,
        epochs_done: cfg.train.pretrain_epochs.max(start),
        log,
    })
}

// ---- evaluation ---------------------------------------------------------------

/// Predicted classes (argmax of the per-class probabilities) and labels.
pub fn predict_classes(model: &Model, windows: &[SignalSequence]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(windows.len());
    for w in windows {
        preds.push(argmax(&model.predict_proba(&w.values)?));
        labels.push(
            w.label
                .class()
                .ok_or_else(|| StetError::Config("classification needs class labels".into()))?,
        );
    }
    Ok((preds, labels))
}

pub fn classification_accuracy(model: &Model, windows: &[SignalSequence]) -> Result<AccuracyReport> {
    let (preds, labels) = predict_classes(model, windows)?;
    let n = model.config().head.n_outputs();
    accuracy(&preds, &labels, &CategoryMap::default_for(n))
}

/// Regression metrics over windows taken in order; each joint's targets form
/// one series.
pub fn regression_metrics(model: &Model, windows: &[SignalSequence]) -> Result<RegressionMetrics> {
    let truth = regression_targets(windows)?;
    let j = truth.cols();
    let mut pred_cols = vec![Vec::with_capacity(windows.len()); j];
    for w in windows {
        for (k, v) in model.predict_regress(&w.values)?.into_iter().enumerate() {
            pred_cols[k].push(v);
        }
    }
    let true_cols: Vec<Vec<f64>> = (0..j).map(|k| (0..truth.rows()).map(|i| truth.get2(i, k)).collect()).collect();
    Ok(RegressionMetrics {
        pcc: pcc(&true_cols, &pred_cols)?,
        rmse: rmse(&true_cols, &pred_cols)?,
        nrmse: nrmse(&true_cols, &pred_cols)?,
        kappa: avg_curvature(&pred_cols)?,
        kappa_true: avg_curvature(&true_cols)?,
    })
}

// ---- fine-tuning --------------------------------------------------------------

/// Starting point for fine-tuning.
#[derive(Debug, Clone)]
pub enum Init {
    Scratch,
    /// Backbone copied from a pretrained model; `source` names it in reports.
    Pretrained { model: Box<Model>, source: String },
}

impl Init {
    pub fn tag(&self) -> String {
        match self {
            Init::Scratch => "scratch".into(),
            Init::Pretrained { source, .. } => format!("pretrained:{source}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best held-out score.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<TrainLogRecord>,
    pub report: MetricsReport,
}

fn fit_target_stats(windows: &[SignalSequence]) -> Result<TargetStats> {
    let y = regression_targets(windows)?;
    let (n, j) = (y.rows() as f64, y.cols());
    let mut mean = vec![0.0; j];
    let mut std = vec![0.0; j];
    for k in 0..j {
        mean[k] = (0..y.rows()).map(|i| y.get2(i, k)).sum::<f64>() / n;
        let var = (0..y.rows()).map(|i| (y.get2(i, k) - mean[k]).powi(2)).sum::<f64>() / n;
        std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    Ok(TargetStats { mean, std })
}

pub fn report_header(cfg: &RunConfig, data: &PreparedData, init: &str, model: &Model) -> Vec<String> {
    vec![
        format!("optimizer: {OPTIMIZER_NAME}"),
        format!("split: {}:{} per class, split seed {}", cfg.data.split[0], cfg.data.split[1], data.split_seed),
        format!("init: {init}"),
        format!("ablation: {}", model.config().ablation.as_str()),
        format!("rng: {} seed {}", RngState::new(cfg.seed).algorithm(), cfg.seed),
    ]
}

/// Trains the full network on the labeled train split, evaluating on the test
/// split after every epoch and keeping the best parameters.
pub fn run_finetune(cfg: &RunConfig, data: &PreparedData, init: Init) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Init::Pretrained { model: pre, .. } = &init {
        model.load_backbone(pre)?;
    }
    model.meta.insert("provenance".into(), init.tag());
    model.meta.insert(
        "normalizer".into(),
        serde_json::to_string(&data.normalizer).expect("serializable"),
    );
    let stats = match cfg.task {
        Task::Regress => {
            let s = fit_target_stats(&data.train)?;
            model.set_target_stats(&s);
            Some(s)
        }
        Task::Classify => None,
    };
    let n_out = model.config().head.n_outputs();
    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.train.finetune_epochs {
        let t0 = Instant::now();
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data.train.len(), cfg.train.batch_size, &root, PHASE_FINETUNE, epoch);
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for (s, &idx) in batch.iter().enumerate() {
                let w = &data.train[idx];
                let mut drng = root.stream(&[tag::DROPOUT, PHASE_FINETUNE, epoch as u64, bi as u64, s as u64]);
                let mut mode = Mode::train(&mut drng);
                let l = match (cfg.task, &stats) {
                    (Task::Classify, _) => {
                        let (f, probs) = model.forward_classify(&mut tape, &bound, &w.values, &mut mode)?;
                        match cfg.train.loss {
                            LossKind::Asymmetric => {
                                asymmetric_loss(&mut tape, &one_hot(&w.label, n_out)?, probs, &cfg.train.asymmetric)?
                            }
                            LossKind::CrossEntropy => {
                                let y = w.label.class().ok_or_else(|| {
                                    StetError::Config("classification needs class labels".into())
                                })?;
                                cross_entropy_loss(&mut tape, y, f.logits)?
                            }
                        }
                    }
                    (Task::Regress, Some(st)) => {
                        let f = model.forward_regress(&mut tape, &bound, &w.values, &mut mode)?;
                        let y = w
                            .regression_target()
                            .ok_or_else(|| StetError::Config("regression needs trajectory labels".into()))?;
                        let z: Vec<f64> = y.iter().enumerate().map(|(k, v)| (v - st.mean[k]) / st.std[k]).collect();
                        mse_regression_loss(&mut tape, &z, f.logits)?
                    }
                    (Task::Regress, None) => unreachable!("stats are fitted for regression"),
                };
                losses.push(l);
            }
            let n = losses.len();
            let loss = mean_of(&mut tape, losses)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(instability(&model, "finetune", epoch, bi, value));
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, model.params().len());
            opt.step(model.params_mut(), &grads)?;
            epoch_loss += value * n as f64;
        }
        let train_secs = t0.elapsed().as_secs_f64();
        log.push(TrainLogRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / data.train.len() as f64,
            metric: None,
            seconds: train_secs,
        });
        // Higher is better for the selection score.
        let (score, metric) = match cfg.task {
            Task::Classify => {
                let acc = classification_accuracy(&model, &data.test)?.overall;
                (acc, acc)
            }
            Task::Regress => {
                let r = regression_metrics(&model, &data.test)?.rmse;
                (-r, r)
            }
        };
        log.push(TrainLogRecord {
            epoch,
            split: "test".into(),
            loss: f64::NAN,
            metric: Some(metric),
            seconds: t0.elapsed().as_secs_f64() - train_secs,
        });
        info!("finetune epoch {epoch}: train loss {:.6}, test metric {metric:.4}", log[log.len() - 2].loss);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, model),
    };
    let mut report = MetricsReport::new(report_header(cfg, data, &init.tag(), &best));
    report.header.push(format!("best epoch: {best_epoch}"));
    fill_report(&mut report, &best, &data.test)?;
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        log,
        report,
    })
}

/// Adds accuracy and confusion counts, or regression metrics, for `windows`.
pub fn fill_report(report: &mut MetricsReport, model: &Model, windows: &[SignalSequence]) -> Result<()> {
    match model.config().head {
        HeadKind::Classify { n_classes } => {
            let (preds, labels) = predict_classes(model, windows)?;
            report.accuracy = Some(accuracy(&preds, &labels, &CategoryMap::default_for(n_classes))?);
            report.confusion = Some(confusion_matrix(&preds, &labels, n_classes));
        }
        HeadKind::Regress { .. } => {
            report.regression = Some(regression_metrics(model, windows)?);
        }
    }
    Ok(())
}
