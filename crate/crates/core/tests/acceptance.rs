//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! `ACCEPTANCE_ONLY=1,3` restricts the run to the listed criteria.

mod support;

use std::time::Instant;

use rand::Rng;

use stet_core::gradcheck::GradCheckOptions;
use stet_core::harness::{self, noisy_accuracy, prepare, run_finetune, run_noise_bench, run_pretrain, Init, RunConfig};
use stet_core::losses::{asymmetric_loss, AsymmetricLossConfig};
use stet_core::masking::{generate_mask_column, masked_run_lengths};
use stet_core::model::{multi_head_attention, Ablation, Model};
use stet_core::rng::RngState;
use stet_core::signal::io::{load_dataset, save_dataset, DatasetFormat};
use stet_core::signal::{NoiseMode, NoiseSpec};
use stet_core::{Tape, Tensor};
use support::{channel_rms, oracle_accuracy, pairwise_accuracy};

type Check = Result<(bool, String), String>;

/// Model and optimizer settings for the end-to-end runs on the 8-class set.
const E2E: &[&str] = &[
    "model.h=16",
    "model.heads=2",
    "model.layers=1",
    "model.ffn_mult=2",
    "model.dropout=0.1",
    "optimizer.lr=1e-3",
];

fn config(extra: &[&str]) -> RunConfig {
    let o: Vec<String> = E2E.iter().chain(extra).map(|s| s.to_string()).collect();
    RunConfig::load(None, &o).expect("acceptance config")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn c1_gradients() -> Check {
    let t0 = Instant::now();
    let opts = GradCheckOptions {
        rel_tol: 1e-3,
        ..Default::default()
    };
    let reports = harness::gradcheck_suite(7, &opts).map_err(err)?;
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    Ok((
        worst < 1e-3 && reports.iter().all(|(_, r)| r.passed) && secs < 60.0,
        format!("{} checks ({}), max rel discrepancy {worst:.2e} < 1e-3, {secs:.1} s < 60 s", reports.len(), names.join(" ")),
    ))
}

fn c2_window_equivalence() -> Check {
    let t0 = Instant::now();
    let (t, h, heads) = (8, 8, 2);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = RngState::new(seed).stream(&[42]);
        let x = rand_tensor(&[t, h], &mut rng);
        let w: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[h, h], &mut rng)).collect();
        let run = |window: Option<usize>| -> Result<Vec<f64>, String> {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let v: Vec<_> = w.iter().map(|m| tape.constant(m)).collect();
            let scale = 1.0 / (h as f64).sqrt();
            let (y, _) = multi_head_attention(&mut tape, xv, v[0], v[1], v[2], v[3], heads, scale, window).map_err(err)?;
            Ok(tape.value(y).to_vec())
        };
        let full = run(None)?;
        let windowed = run(Some(2 * t - 1))?;
        for (a, b) in full.iter().zip(&windowed) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-10 && secs < 5.0,
        format!("20 seeds, t=8 h=8 w=15, max |diff| {worst:.2e} <= 1e-10, {secs:.2} s < 5 s"),
    ))
}

fn c3_mask_statistics() -> Check {
    let t0 = Instant::now();
    let n = 1_000_000;
    let mut rng = RngState::new(2024).stream(&[3]);
    let col = generate_mask_column(n, 3.0, 0.15, &mut rng).map_err(err)?;
    let frac = col.iter().filter(|k| !**k).count() as f64 / n as f64;
    let runs = masked_run_lengths(&col);
    let mean = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
    let max_len = *runs.iter().max().unwrap();
    let mut counts = vec![0usize; max_len + 1];
    for &r in &runs {
        counts[r] += 1;
    }
    // Geometric on {1, 2, ...} with success probability 1/3: F(k) = 1 − (2/3)^k.
    let mut ks = 0.0f64;
    let mut cum = 0usize;
    for (k, &c) in counts.iter().enumerate().skip(1) {
        cum += c;
        let emp = cum as f64 / runs.len() as f64;
        let model = 1.0 - (2.0f64 / 3.0).powi(k as i32);
        let prev = if k == 1 { 0.0 } else { 1.0 - (2.0f64 / 3.0).powi(k as i32 - 1) };
        let emp_prev = (cum - c) as f64 / runs.len() as f64;
        ks = ks.max((emp - model).abs()).max((emp_prev - prev).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        (0.14..=0.16).contains(&frac) && (2.8..=3.2).contains(&mean) && ks < 0.02 && secs < 10.0,
        format!(
            "masked fraction {frac:.4} in [0.14, 0.16], mean run {mean:.3} in [2.8, 3.2], KS {ks:.4} < 0.02 over {} runs, {secs:.2} s < 10 s",
            runs.len()
        ),
    ))
}

fn c4_loss_reductions() -> Check {
    let mut rng = RngState::new(4).stream(&[4]);
    let bce_cfg = AsymmetricLossConfig {
        gamma_plus: 0.0,
        gamma_minus: 0.0,
        margin: 0.0,
    };
    let mut ys = Vec::with_capacity(1000);
    let mut ps = Vec::with_capacity(1000);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let y = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let mut tape = Tape::new();
        let pv = tape.constant_from(vec![1], vec![p]).map_err(err)?;
        let l = asymmetric_loss(&mut tape, &[y], pv, &bce_cfg).map_err(err)?;
        worst = worst.max((tape.scalar(l) - bce).abs());
        ys.push(y);
        ps.push(p);
    }
    let summed: f64 = ys.iter().zip(&ps).map(|(y, p)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum();
    let mut tape = Tape::new();
    let pv = tape.constant_from(vec![1000], ps).map_err(err)?;
    let l = asymmetric_loss(&mut tape, &ys, pv, &bce_cfg).map_err(err)?;
    let sum_diff = (tape.scalar(l) - summed).abs();

    let margin_cfg = AsymmetricLossConfig {
        gamma_plus: 1.0,
        gamma_minus: 4.0,
        margin: 0.05,
    };
    let mut margin_max = 0.0f64;
    for i in 0..1000 {
        let p = 0.05 * (i as f64 + 0.5) / 1000.0;
        let mut tape = Tape::new();
        let pv = tape.constant_from(vec![1], vec![p]).map_err(err)?;
        let l = asymmetric_loss(&mut tape, &[0.0], pv, &margin_cfg).map_err(err)?;
        margin_max = margin_max.max(tape.scalar(l).abs());
    }
    Ok((
        worst <= 1e-10 && sum_diff <= 1e-10 && margin_max == 0.0,
        format!(
            "per-pair |ASL-BCE| max {worst:.2e}, summed over 1000 pairs {sum_diff:.2e} (<= 1e-10); negative loss for p <= m: max {margin_max:e} (== 0)"
        ),
    ))
}

struct Learned {
    model: Model,
    data: harness::PreparedData,
}

fn c5_learnability() -> Result<((bool, String), Learned), String> {
    let t0 = Instant::now();
    let cfg = config(&[]);
    let data = prepare(&cfg).map_err(err)?;
    let pre = run_pretrain(&cfg, &data.train, None).map_err(err)?;
    let out = run_finetune(
        &cfg,
        &data,
        Init::Pretrained {
            model: Box::new(pre.model),
            source: "acceptance".into(),
        },
    )
    .map_err(err)?;
    let acc = out.report.accuracy.as_ref().map(|a| a.overall).unwrap_or(0.0);
    let secs = t0.elapsed().as_secs_f64();
    let line = format!(
        "{} train / {} test windows, pretrain {} + finetune {} epochs, held-out accuracy {acc:.4} >= 0.90 (best epoch {}), {:.1} min < 15 min",
        data.train.len(),
        data.test.len(),
        cfg.train.pretrain_epochs,
        cfg.train.finetune_epochs,
        out.best_epoch,
        secs / 60.0
    );
    Ok((
        (acc >= 0.90 && secs < 900.0, line),
        Learned { model: out.best, data },
    ))
}

fn c6_twins(l: &Learned) -> Check {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for w in &l.data.test {
        probs.push(l.model.predict_proba(&w.values).map_err(err)?);
        labels.push(w.label.class().unwrap());
    }
    let model_acc = pairwise_accuracy(&probs, &labels, 0, 1);
    let rms_acc = oracle_accuracy(&l.data.train, &l.data.test, &[0, 1], channel_rms);
    let gap = model_acc - rms_acc;
    Ok((
        gap >= 0.15,
        format!("twin pair (0, 1): model {model_acc:.4}, channel-RMS oracle {rms_acc:.4}, gap {gap:.4} >= 0.15"),
    ))
}

fn c7_robustness() -> Check {
    let seeds = [7u64, 8, 9];
    let spec = |seed| NoiseSpec {
        mode: NoiseMode::AdditiveGaussian,
        intensity: 0.2,
        seed,
    };
    let mut drops = [[0.0; 3]; 2];
    let dir = std::env::temp_dir().join("stet-acceptance");
    std::fs::create_dir_all(&dir).map_err(err)?;
    for (ai, ablation) in [Ablation::Fused, Ablation::LongOnly].into_iter().enumerate() {
        for (si, &seed) in seeds.iter().enumerate() {
            let seed_s = format!("seed={seed}");
            let mut cfg = config(&[
                &seed_s,
                "data.synthetic.samples_per_class=100",
                "train.pretrain_epochs=0",
                "train.finetune_epochs=20",
            ]);
            cfg.model.ablation = ablation;
            let data = prepare(&cfg).map_err(err)?;
            let out = run_finetune(&cfg, &data, Init::Scratch).map_err(err)?;
            let header = out.report.header.clone();
            let table = run_noise_bench(&out.best, &data.test, &cfg.noise, header).map_err(err)?;
            let csv = dir.join(format!("noise_{}_seed{seed}.csv", ablation.as_str()));
            table.write_noise_csv(&csv).map_err(err)?;
            let clean = table.accuracy.as_ref().unwrap().overall;
            let noisy = noisy_accuracy(&out.best, &data.test, &spec(cfg.noise.seed)).map_err(err)?;
            drops[ai][si] = (clean - noisy) / clean;
            println!("      {} seed {seed}: clean {clean:.4}", ablation.as_str());
            for r in &table.noise {
                println!("        {:<24} {:>5}  acc {:.4}  drop {:+.4}", r.mode, r.intensity, r.accuracy, r.drop_rate);
            }
        }
    }
    let fused = drops[0].iter().sum::<f64>() / 3.0;
    let long = drops[1].iter().sum::<f64>() / 3.0;
    Ok((
        fused <= long + 0.02,
        format!(
            "mean drop rate at additive sigma=0.2: fused {fused:.4} <= long-only {long:.4} + 0.02 (per seed fused {:?}, long-only {:?}); tables in {}",
            drops[0].map(|d| (d * 1e4).round() / 1e4),
            drops[1].map(|d| (d * 1e4).round() / 1e4),
            dir.display()
        ),
    ))
}

fn c8_regression() -> Check {
    let t0 = Instant::now();
    let cfg = config(&[
        "task=\"regress\"",
        "model.head={kind=\"regress\",n_joints=3}",
        "data.synthetic.n_joints=3",
        "data.synthetic.twin_pairs=0",
        "data.synthetic.samples_per_class=100",
        "train.pretrain_epochs=0",
        "train.finetune_epochs=20",
    ]);
    let data = prepare(&cfg).map_err(err)?;
    let out = run_finetune(&cfg, &data, Init::Scratch).map_err(err)?;
    let r = out.report.regression.ok_or("no regression metrics")?;
    let ratio = r.kappa / r.kappa_true;
    Ok((
        r.pcc > 0.9 && r.nrmse < 0.15 && (0.5..=2.0).contains(&ratio),
        format!(
            "PCC {:.4} > 0.9, NRMSE {:.4} < 0.15, kappa {:.4} vs truth {:.4} (ratio {ratio:.3} in [0.5, 2]), {:.1} s",
            r.pcc,
            r.nrmse,
            r.kappa,
            r.kappa_true,
            t0.elapsed().as_secs_f64()
        ),
    ))
}

fn c9_determinism() -> Check {
    let cfg = config(&[
        "data.synthetic.samples_per_class=20",
        "train.pretrain_epochs=2",
        "train.finetune_epochs=3",
    ]);
    let run = || -> Result<(Vec<u64>, harness::FinetuneOutcome), String> {
        let data = prepare(&cfg).map_err(err)?;
        let pre = run_pretrain(&cfg, &data.train, None).map_err(err)?;
        let pre_losses: Vec<u64> = pre.log.iter().map(|r| r.loss.to_bits()).collect();
        let out = run_finetune(
            &cfg,
            &data,
            Init::Pretrained {
                model: Box::new(pre.model),
                source: "mem".into(),
            },
        )
        .map_err(err)?;
        Ok((pre_losses, out))
    };
    let (pa, a) = run()?;
    let (pb, b) = run()?;
    let bits = |o: &harness::FinetuneOutcome| -> Vec<u64> {
        o.log
            .iter()
            .flat_map(|r| [r.loss.to_bits(), r.metric.unwrap_or(0.0).to_bits()])
            .collect()
    };
    let same_run = pa == pb
        && bits(&a) == bits(&b)
        && a.report == b.report
        && a.best.params().as_slice() == b.best.params().as_slice();

    let dir = tempfile::tempdir().map_err(err)?;
    let ck = dir.path().join("m.ckpt");
    a.best.save(&ck).map_err(err)?;
    let back = Model::load(&ck).map_err(err)?;
    let same_ckpt = back.params().as_slice() == a.best.params().as_slice()
        && back.config() == a.best.config()
        && back.meta == a.best.meta;

    let recs = harness::data::load_recordings(&cfg.data).map_err(err)?;
    let raw = dir.path().join("d.bin");
    save_dataset(&raw, &recs, DatasetFormat::RawF64).map_err(err)?;
    let loaded = load_dataset(&raw, DatasetFormat::RawF64).map_err(err)?;
    let same_raw = loaded.len() == recs.len()
        && loaded.iter().zip(&recs).all(|(x, y)| {
            x.label == y.label
                && x.sample_rate_hz.to_bits() == y.sample_rate_hz.to_bits()
                && x.samples.data().iter().zip(y.samples.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    Ok((
        same_run && same_ckpt && same_raw,
        format!(
            "two seeded runs bit-identical: {same_run}; checkpoint round-trip lossless: {same_ckpt}; raw-f64 dataset round-trip lossless ({} recordings): {same_raw}",
            recs.len()
        ),
    ))
}

fn report(id: usize, title: &str, r: Check, failed: &mut Vec<usize>) {
    match r {
        Ok((true, detail)) => println!("PASS  {id}. {title}: {detail}"),
        Ok((false, detail)) => {
            failed.push(id);
            println!("FAIL  {id}. {title}: {detail}");
        }
        Err(e) => {
            failed.push(id);
            println!("FAIL  {id}. {title}: error: {e}");
        }
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().map_or(true, |o| o.contains(&id));
    let mut failed = Vec::new();

    if want(1) {
        report(1, "gradient oracle", c1_gradients(), &mut failed);
    }
    if want(2) {
        report(2, "window equivalence", c2_window_equivalence(), &mut failed);
    }
    if want(3) {
        report(3, "mask statistics", c3_mask_statistics(), &mut failed);
    }
    if want(4) {
        report(4, "loss reductions", c4_loss_reductions(), &mut failed);
    }
    if want(5) || want(6) {
        match c5_learnability() {
            Ok((r5, learned)) => {
                if want(5) {
                    report(5, "end-to-end learnability", Ok(r5), &mut failed);
                }
                if want(6) {
                    report(6, "short-term discrimination", c6_twins(&learned), &mut failed);
                }
            }
            Err(e) => {
                for id in [5, 6].into_iter().filter(|&i| want(i)) {
                    report(id, "end-to-end run", Err(e.clone()), &mut failed);
                }
            }
        }
    }
    if want(7) {
        report(7, "robustness direction", c7_robustness(), &mut failed);
    }
    if want(8) {
        report(8, "regression sanity", c8_regression(), &mut failed);
    }
    if want(9) {
        report(9, "determinism and round-trips", c9_determinism(), &mut failed);
    }

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
