use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use stet_core::gradcheck::GradCheckOptions;
use stet_core::harness::{self, train, Init, RunConfig};
use stet_core::metrics::MetricsReport;
use stet_core::model::{Ablation, Checkpoint, Model};
use stet_core::signal::io::{save_dataset, DatasetFormat};
use stet_core::{Result, StetError};

#[derive(Parser)]
#[command(name = "stet", version, about = "Short-term enhanced transformer for multi-channel sEMG")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optimizer.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Fused,
    LongOnly,
    ShortOnly,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-reconstruction pretraining of the encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the full network and report held-out metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// `scratch` or the path of a pretraining checkpoint.
        #[arg(long, default_value = "scratch")]
        init: String,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Evaluate a checkpoint on a data split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Accuracy and drop rate under the configured noise grid.
    NoiseBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write long, short and fused embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Generate the configured synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "raw")]
        format: Format,
    },
    /// Finite-difference check of every layer and the full loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out).map_err(|e| StetError::io(&common.out, e))?;
    Ok(&common.out)
}

fn load_cfg(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.overrides)
}

fn pick<'a>(data: &'a harness::PreparedData, split: Split) -> &'a [stet_core::signal::SignalSequence] {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { common, resume } => {
            let cfg = load_cfg(&common)?;
            let out = out_dir(&common)?;
            let data = harness::prepare(&cfg)?;
            let ck = resume.as_deref().map(Checkpoint::read).transpose()?;
            let outcome = harness::run_pretrain(&cfg, &data.train, ck.as_ref())?;
            outcome.checkpoint().write(&out.join("pretrain.ckpt"))?;
            harness::write_log_csv(&out.join("pretrain_log.csv"), &outcome.log)?;
            info!("wrote {}", out.join("pretrain.ckpt").display());
        }
        Cmd::Train { common, init, ablation } => {
            let mut cfg = load_cfg(&common)?;
            if let Some(a) = ablation {
                cfg.model.ablation = match a {
                    AblationArg::Fused => Ablation::Fused,
                    AblationArg::LongOnly => Ablation::LongOnly,
                    AblationArg::ShortOnly => Ablation::ShortOnly,
                };
            }
            let out = out_dir(&common)?;
            let data = harness::prepare(&cfg)?;
            let init = if init == "scratch" {
                Init::Scratch
            } else {
                Init::Pretrained {
                    model: Box::new(Model::load(Path::new(&init))?),
                    source: init.clone(),
                }
            };
            let outcome = harness::run_finetune(&cfg, &data, init)?;
            outcome.best.save(&out.join("model.ckpt"))?;
            outcome.report.write_json(&out.join("report.json"))?;
            harness::write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
            print_summary(&outcome.report);
        }
        Cmd::Eval { common, checkpoint, split } => {
            let cfg = load_cfg(&common)?;
            let out = out_dir(&common)?;
            let model = Model::load_expecting(&checkpoint, &cfg.model)?;
            let data = harness::prepare(&cfg)?;
            let provenance = model.meta.get("provenance").cloned().unwrap_or_default();
            let mut report = MetricsReport::new(train::report_header(&cfg, &data, &provenance, &model));
            harness::fill_report(&mut report, &model, pick(&data, split))?;
            report.write_json(&out.join("eval_report.json"))?;
            print_summary(&report);
        }
        Cmd::NoiseBench { common, checkpoint } => {
            let cfg = load_cfg(&common)?;
            let out = out_dir(&common)?;
            let model = Model::load_expecting(&checkpoint, &cfg.model)?;
            let data = harness::prepare(&cfg)?;
            let provenance = model.meta.get("provenance").cloned().unwrap_or_default();
            let header = train::report_header(&cfg, &data, &provenance, &model);
            let report = harness::run_noise_bench(&model, &data.test, &cfg.noise, header)?;
            report.write_json(&out.join("noise_report.json"))?;
            report.write_noise_csv(&out.join("noise.csv"))?;
            print_summary(&report);
        }
        Cmd::ExportEmbeddings { common, checkpoint, split } => {
            let cfg = load_cfg(&common)?;
            let out = out_dir(&common)?;
            let model = Model::load_expecting(&checkpoint, &cfg.model)?;
            let data = harness::prepare(&cfg)?;
            for p in harness::export_embeddings(&model, pick(&data, split), out)? {
                println!("{}", p.display());
            }
        }
        Cmd::GenData { common, format } => {
            let cfg = load_cfg(&common)?;
            let out = out_dir(&common)?;
            let recs = harness::data::load_recordings(&cfg.data)?;
            let (path, fmt) = match format {
                Format::Raw => (out.join("dataset.bin"), DatasetFormat::RawF64),
                Format::Csv => (out.join("dataset.csv"), DatasetFormat::Csv),
            };
            save_dataset(&path, &recs, fmt)?;
            println!("{} recordings -> {}", recs.len(), path.display());
        }
        Cmd::GradCheck { common } => {
            let cfg = load_cfg(&common)?;
            let opts = GradCheckOptions {
                rel_tol: 1e-3,
                ..Default::default()
            };
            let mut worst = 0.0f64;
            let mut failed = Vec::new();
            for (name, r) in harness::gradcheck_suite(cfg.seed, &opts)? {
                println!("{name:<22} coords {:>6}  max rel error {:.3e}", r.checked, r.max_rel_error);
                worst = worst.max(r.max_rel_error);
                if !r.passed {
                    failed.push(name);
                }
            }
            println!("max discrepancy {worst:.3e}");
            if !failed.is_empty() {
                return Err(StetError::NumericInstability {
                    path: format!("gradient check failed for {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    for line in &report.header {
        println!("# {line}");
    }
    if let Some(a) = &report.accuracy {
        println!("accuracy {:.4} over {} windows", a.overall, a.n);
        for (cat, acc) in &a.per_category {
            println!("  {cat:?}: {acc:.4}");
        }
    }
    if let Some(r) = &report.regression {
        println!(
            "pcc {:.4}  rmse {:.4}  nrmse {:.4}  kappa {:.4} (truth {:.4})",
            r.pcc, r.rmse, r.nrmse, r.kappa, r.kappa_true
        );
    }
    for row in &report.noise {
        println!("{:<24} {:>6}  acc {:.4}  drop {:.4}", row.mode, row.intensity, row.accuracy, row.drop_rate);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                StetError::Config(_) | StetError::ConfigMismatch(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
