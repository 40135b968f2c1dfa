use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmpct::backbone::SoftmaxBackbone;
use dmpct::config::ExperimentConfig;
use dmpct::cotrain::{self, with_workers, Mode, RoundRecord, UnlabeledCase};
use dmpct::error::{Error, Result};
use dmpct::fusion::predict_volume;
use dmpct::metrics::{self, Evaluation};
use dmpct::phantom::generate_dataset;
use dmpct::report::{self, ModeReport};
use dmpct::runio::{self, Checkpointer, RunMeta};

#[derive(Parser)]
#[command(name = "dmpct", version, about = "Multi-planar co-training for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel sections
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Master seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the supervised teacher on the labeled split
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label the unlabeled split with a trained model bundle
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full training mode with per-round checkpoints
    Cotrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Evaluate a run (or a model directory) on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory from `cotrain`
        #[arg(long, conflicts_with = "models")]
        run: Option<PathBuf>,
        /// Directory holding model_<plane>.dmpw files
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: <run>/evaluation)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge evaluations of several runs into one comparison table
    Report {
        /// Evaluation directories (or run directories) to merge
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "fcn")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, mode: Option<Mode>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::parse(&runio::read_text(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    Ok(cfg)
}

fn backbone(cfg: &ExperimentConfig, k: u8) -> Result<SoftmaxBackbone> {
    if k != cfg.num_classes {
        return Err(Error::ClassMismatch(format!(
            "config K={} but data K={k}",
            cfg.num_classes
        )));
    }
    Ok(SoftmaxBackbone::new(k, cfg.train_config()))
}

fn check_model_k(models_k: u8, data_k: u8) -> Result<()> {
    if models_k != data_k {
        return Err(Error::ClassMismatch(format!(
            "checkpoint K={models_k} but data K={data_k}"
        )));
    }
    Ok(())
}

const EVAL_REPORT: &str = "report.json";

fn write_evaluation(out: &Path, mode: &str, eval: Evaluation) -> Result<()> {
    let reports = vec![ModeReport {
        mode: mode.to_string(),
        evaluation: eval,
    }];
    runio::write_text(&out.join("report.csv"), &report::to_csv(&reports))?;
    runio::write_text(&out.join(EVAL_REPORT), &report::to_json(&reports)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common, None)?;
            let generated = with_workers(common.workers, || {
                generate_dataset(&cfg.phantom_spec(), cfg.split_counts(), cfg.seed)
            })??;
            runio::save_dataset(&out, &generated, &cfg.echo())?;
            println!(
                "generated {} labeled, {} unlabeled, {} test cases in {}",
                generated.dataset.labeled.len(),
                generated.dataset.unlabeled.len(),
                generated.dataset.test.len(),
                out.display()
            );
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common, Some(Mode::Fcn))?;
            let dataset = runio::load_dataset(&data)?;
            let bb = backbone(&cfg, dataset.num_classes()?)?;
            let (bundle, log) = with_workers(common.workers, || {
                cotrain::train_teacher(&bb, &dataset, &cfg.cotrain_config())
            })??;
            runio::save_bundle(&out, &bundle)?;
            runio::write_text(&out.join(runio::RUNLOG), &log.to_json_lines()?)?;
            runio::write_text(&out.join(runio::CONFIG_ECHO), &cfg.echo())?;
            println!("teacher models written to {}", out.display());
        }
        Command::Pseudolabel {
            common,
            models,
            data,
            out,
        } => {
            let cfg = load_config(&common, None)?;
            let bundle = runio::load_bundle(&models)?;
            let dataset = runio::load_dataset(&data)?;
            if let Ok(k) = dataset.num_classes() {
                check_model_k(bundle.num_classes(), k)?;
            }
            let fused = with_workers(common.workers, || {
                dataset
                    .unlabeled
                    .iter()
                    .map(|c: &UnlabeledCase| {
                        predict_volume(&bundle, &c.volume, &cfg.windows, cfg.record_provenance)
                            .map(|(f, _)| (c.id.clone(), f))
                    })
                    .collect::<Result<Vec<_>>>()
            })??;
            for (id, f) in &fused {
                runio::save_fused(&out, id, f)?;
            }
            println!("{} pseudo-labels written to {}", fused.len(), out.display());
        }
        Command::Cotrain {
            common,
            data,
            out,
            mode,
        } => {
            let cfg = load_config(&common, mode)?;
            let dataset = runio::load_dataset(&data)?;
            let manifest = runio::read_manifest(&data.join(runio::MANIFEST))?;
            let k = dataset.num_classes()?;
            let bb = backbone(&cfg, k)?;
            let ckpt = Checkpointer {
                run: &out,
                unlabeled_ids: dataset.unlabeled.iter().map(|c| c.id.clone()).collect(),
            };
            let mut observer = |rec: &RoundRecord<'_, _>| ckpt.record(rec);
            let output = with_workers(common.workers, || {
                cotrain::run_mode(cfg.mode, &bb, &dataset, &cfg.cotrain_config(), Some(&mut observer))
            })?;
            let output = match output {
                Ok(o) => o,
                Err(Error::RunAborted { source, log }) => {
                    runio::write_text(&out.join(runio::RUNLOG), &log.to_json_lines()?)?;
                    return Err(Error::RunAborted { source, log });
                }
                Err(e) => return Err(e),
            };
            let final_round = if cfg.mode == Mode::Fcn { 1 } else { cfg.rounds + 1 };
            let meta = RunMeta {
                mode: cfg.mode,
                final_round,
                num_classes: k,
            };
            runio::write_run_files(&out, &meta, &cfg.echo(), &manifest, &output.log)?;
            println!("{} run written to {}", cfg.mode, out.display());
        }
        Command::Evaluate {
            common,
            run,
            models,
            data,
            out,
        } => {
            let (bundle, mode, out, cfg) = match (run, models) {
                (Some(run), _) => {
                    let meta = runio::read_run_meta(&run)?;
                    let mut cfg = ExperimentConfig::parse(&runio::read_text(&run.join(runio::CONFIG_ECHO))?)?;
                    if let Some(path) = &common.config {
                        cfg = ExperimentConfig::parse(&runio::read_text(path)?)?;
                    }
                    let out = out.unwrap_or_else(|| run.join("evaluation"));
                    (runio::load_final_bundle(&run)?, meta.mode.to_string(), out, cfg)
                }
                (None, Some(models)) => {
                    let cfg = load_config(&common, None)?;
                    let out = out.ok_or_else(|| Error::InvalidArgument("--out is required with --models".into()))?;
                    (runio::load_bundle(&models)?, cfg.mode.to_string(), out, cfg)
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("one of --run or --models is required".into()))
                }
            };
            let dataset = runio::load_dataset(&data)?;
            check_model_k(bundle.num_classes(), dataset.num_classes()?)?;
            let predictions = with_workers(common.workers, || {
                dataset
                    .test
                    .iter()
                    .map(|c| predict_volume(&bundle, &c.volume, &cfg.windows, cfg.record_provenance).map(|(f, _)| f))
                    .collect::<Result<Vec<_>>>()
            })??;
            let mut cases = Vec::new();
            for (c, fused) in dataset.test.iter().zip(&predictions) {
                runio::save_fused(&out.join("predictions"), &c.id, fused)?;
                cases.push(metrics::CaseScores {
                    case_id: c.id.clone(),
                    dsc: metrics::case_dsc(&fused.labels, &c.mask)?,
                });
            }
            let eval = metrics::aggregate(&cases)?;
            println!("{mode}: mean DSC {:.4}", eval.overall.mean);
            write_evaluation(&out, &mode, eval)?;
        }
        Command::Report { runs, baseline, out } => {
            let mut reports = Vec::new();
            for dir in &runs {
                let path = [dir.join(EVAL_REPORT), dir.join("evaluation").join(EVAL_REPORT)]
                    .into_iter()
                    .find(|p| p.exists())
                    .unwrap_or_else(|| dir.join(EVAL_REPORT));
                let mut parsed: Vec<ModeReport> = serde_json::from_str(&runio::read_text(&path)?)?;
                reports.append(&mut parsed);
            }
            let reports = if reports.iter().any(|r| r.mode == baseline) {
                report::compare(reports, &baseline)?
            } else {
                reports
            };
            runio::write_text(&out.join("report.csv"), &report::to_csv(&reports))?;
            runio::write_text(&out.join(EVAL_REPORT), &report::to_json(&reports)?)?;
            print!("{}", report::to_csv(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
