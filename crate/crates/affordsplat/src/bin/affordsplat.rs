use std::path::PathBuf;
use std::process::ExitCode;

use affordsplat::checkpoint::Checkpoint;
use affordsplat::config::ExperimentConfig;
use affordsplat::harness::{self, Control, EpochEvent};
use affordsplat::report::{load_report, run_report};
use affordsplat::{Error, Result};
use affordsplat_core::train::Stage;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affordsplat", version, about = "Language-guided affordance masks on 3D Gaussian splats")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    Datagen(Common),
    /// Structure-alignment pretraining.
    Pretrain(Common),
    /// Supervised mask and answer training.
    Finetune(Common),
    /// Metrics of a checkpoint on a split.
    Evaluate(Common),
    /// Mask and answer for one Gaussian PLY.
    Predict(Common),
    /// Tables and plots from metric reports.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML file with any of the flag keys below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ExperimentConfig,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.overlay(&self.overrides)
    }
}

fn print_epoch(ev: &EpochEvent) -> Control {
    match ev.val_miou {
        Some(v) => eprintln!("epoch {:>3}  loss {:.6}  val mIoU {:.4}", ev.stats.epoch, ev.stats.mean_loss, v),
        None => eprintln!("epoch {:>3}  loss {:.6}", ev.stats.epoch, ev.stats.mean_loss),
    }
    Control::Continue
}

fn train(stage: Stage, cfg: &ExperimentConfig) -> Result<()> {
    cfg.require_seed()?;
    let out = ExperimentConfig::require_path(&cfg.out, "out")?.clone();
    let ds = harness::load_data(cfg)?;
    let split = harness::resolve_split(cfg, &ds)?;
    let init = match (&cfg.init, stage) {
        (Some(p), _) => Some(Checkpoint::load(p)?),
        (None, _) => None,
    };
    let ck = harness::run_stage(stage, cfg, &ds, &split, init.as_ref(), &mut print_epoch)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let name = match stage {
        Stage::Pretrain => "pretrain.ckpt",
        Stage::Finetune => "finetune.ckpt",
    };
    let path = out.join(name);
    ck.save(&path)?;
    println!("saved {} (epoch {})", path.display(), ck.header.epoch);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(c) => {
            let cfg = c.resolve()?;
            ExperimentConfig::require_path(&cfg.out, "out")?;
            let g = harness::run_datagen(&cfg)?;
            println!(
                "{} objects, {} samples, split {}/{}/{} written to {}",
                g.dataset.objects.len(),
                g.dataset.samples.len(),
                g.split.train.len(),
                g.split.val.len(),
                g.split.test.len(),
                cfg.out.as_ref().unwrap().display()
            );
        }
        Command::Pretrain(c) => train(Stage::Pretrain, &c.resolve()?)?,
        Command::Finetune(c) => train(Stage::Finetune, &c.resolve()?)?,
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            let ck = Checkpoint::load(ExperimentConfig::require_path(&cfg.checkpoint, "checkpoint")?)?;
            let ds = harness::load_data(&cfg)?;
            let r = harness::run_evaluate(&cfg, &ck, &ds)?;
            let m = |s: affordsplat_core::evalkit::Summary| s.mean.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} entries  mIoU {}  AUC {}  SIM {}  MAE {}  KLD {}",
                r.overall.count,
                m(r.overall.miou),
                m(r.overall.auc),
                m(r.overall.sim),
                m(r.overall.mae),
                m(r.overall.kld)
            );
        }
        Command::Predict(c) => {
            let cfg = c.resolve()?;
            let ck = Checkpoint::load(ExperimentConfig::require_path(&cfg.checkpoint, "checkpoint")?)?;
            let out = harness::run_predict(&cfg, &ck)?;
            println!("{}", out.prediction.answer);
            if let Some(p) = out.score_file {
                eprintln!("scores: {}", p.display());
            }
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            let out = ExperimentConfig::require_path(&cfg.out, "out")?;
            let paths = cfg.reports.clone().unwrap_or_default();
            let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let mut histories = Vec::new();
            for p in cfg.histories.clone().unwrap_or_default() {
                let h = Checkpoint::load_header(&p)?;
                histories.push((p.display().to_string(), h.loss_history));
            }
            let files = run_report(&reports, &histories, out)?;
            println!("wrote {}", files.markdown.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class() as u8)
        }
    }
}
