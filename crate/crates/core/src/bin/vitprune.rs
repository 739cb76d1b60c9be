use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vitprune::harness::{self, report, DataSpec, ExperimentConfig, SyntheticSpec, DATA_ROOT_ENV};
use vitprune::optimizer::{accuracy, hard_prune_compact, EtaPlacement};
use vitprune::ranking::export_ranking;
use vitprune::vit::{load_checkpoint_for, save_checkpoint, VitConfig};
use vitprune::Error;

#[derive(Parser)]
#[command(
    name = "vitprune",
    version,
    about = "Structured pruning for small vision transformers"
)]
struct Cli {
    /// TOML experiment config; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense baseline and write `dense.ckpt`.
    TrainDense,
    /// Rank heads of a checkpoint and print scores and keep-sets.
    Rank {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Soft-prune a dense checkpoint and compact it into `compact.ckpt`.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a compacted checkpoint into `finetuned.ckpt`.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Every stage end to end.
    Pipeline,
    /// Soft pruning against hard pruning plus retraining.
    AblateSoftHard {
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.6, 0.8])]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Ranking stability across sampled batch sizes.
    AblateBatch {
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 256])]
        grid: Vec<usize>,
    },
    /// Soft-pruning traces across penalty values.
    AblateRho {
        #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2])]
        grid: Vec<f64>,
    },
    /// Summarize `report.json` files under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Parameter and FLOP counts implied by a sparsity, without training.
    Count {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    VitSmallCifar,
    DeitTiny,
    DeitSmall,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    sparsity: Option<f64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    baseline: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    data: Option<DataKind>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    train_samples: Option<usize>,
    #[arg(long, global = true)]
    test_samples: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Scale only the loss gradient by the learning rate.
    #[arg(long, global = true)]
    eta_loss_only: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    #[arg(long, global = true)]
    dense_epochs: Option<usize>,
    #[arg(long, global = true)]
    dense_eta: Option<f64>,
    #[arg(long, global = true)]
    ranking_batch: Option<usize>,
    #[arg(long, global = true)]
    ranking_tolerance: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.sparsity {
            cfg.sparsity = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = Some(v.clone());
        }
        if let Some(v) = &self.baseline {
            cfg.baseline = Some(v.clone());
        }
        match self.data {
            Some(DataKind::Cifar10) => {
                cfg.data = DataSpec::Cifar10 {
                    path: None,
                    train_samples: None,
                    test_samples: None,
                }
            }
            Some(DataKind::Synthetic) if !matches!(cfg.data, DataSpec::Synthetic { .. }) => {
                cfg.data = DataSpec::Synthetic {
                    spec: SyntheticSpec::new(cfg.seed, cfg.model.num_classes, 2000),
                    test_samples: 500,
                }
            }
            _ => {}
        }
        match &mut cfg.data {
            DataSpec::Cifar10 {
                path,
                train_samples,
                test_samples,
            } => {
                if path.is_none() {
                    *path = self.data_root.clone();
                }
                if self.train_samples.is_some() {
                    *train_samples = self.train_samples;
                }
                if self.test_samples.is_some() {
                    *test_samples = self.test_samples;
                }
            }
            DataSpec::Synthetic { spec, test_samples } => {
                if let Some(n) = self.train_samples {
                    spec.samples = n;
                }
                if let Some(n) = self.test_samples {
                    *test_samples = n;
                }
            }
        }
        let o = &mut cfg.optimizer;
        if let Some(v) = self.rho {
            o.rho = v;
        }
        if let Some(v) = self.lambda {
            o.lambda = v;
        }
        if let Some(v) = self.eta {
            o.eta = v;
        }
        if self.eta_loss_only {
            o.eta_placement = EtaPlacement::LossOnly;
        }
        if let Some(v) = self.epochs {
            o.epochs = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        if self.finetune_epochs.is_some() {
            o.finetune_epochs = self.finetune_epochs;
        }
        if let Some(v) = self.dense_epochs {
            o.dense_epochs = v;
        }
        if self.dense_eta.is_some() {
            o.dense_eta = self.dense_eta;
        }
        if let Some(v) = self.ranking_batch {
            cfg.ranking.batch_size = v;
        }
        if let Some(v) = self.ranking_tolerance {
            cfg.ranking.tolerance = v;
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Budget(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Truncated(_) => 3,
        Error::Divergence { .. } | Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn output_dir(cfg: &ExperimentConfig) -> vitprune::Result<&Path> {
    cfg.output_dir
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --output-dir".into()))
}

fn checkpoint_arg(given: &Option<PathBuf>, cfg: &ExperimentConfig) -> vitprune::Result<PathBuf> {
    given
        .clone()
        .or_else(|| cfg.baseline.clone())
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or --baseline)".into()))
}

fn run(cli: Cli) -> vitprune::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);

    match cli.command {
        Command::Count { preset } => {
            let model = match preset {
                Preset::Desk => VitConfig::desk(),
                Preset::VitSmallCifar => VitConfig::vit_small_cifar(),
                Preset::DeitTiny => VitConfig::deit_tiny(),
                Preset::DeitSmall => VitConfig::deit_small(),
            };
            let dry = harness::dry_run(&model, cfg.sparsity)?;
            println!("params_before = {}", dry.params_before);
            println!("params_after = {}", dry.params_after);
            println!("flops_before = {}", dry.flops_before);
            println!("flops_after = {}", dry.flops_after);
            print!("{}", report::budget_csv(&dry.budget));
            return Ok(());
        }
        Command::Report { dir } => {
            print!("{}", report::report(&dir)?);
            return Ok(());
        }
        _ => {}
    }

    cfg.validate()?;
    match cli.command {
        Command::TrainDense => {
            let dir = output_dir(&cfg)?.to_path_buf();
            let splits = harness::load_data(&cfg)?;
            let (model, stats) = harness::dense_baseline(&cfg, &splits)?;
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&model, dir.join("dense.ckpt"))?;
            for s in stats {
                println!("epoch {} loss {:.6} val_acc {:.4}", s.epoch, s.loss, s.val_acc);
            }
            println!("test_acc {:.4}", accuracy(&model, &splits.test)?);
        }
        Command::Rank { checkpoint } => {
            let model = load_checkpoint_for(checkpoint_arg(&checkpoint, &cfg)?, &cfg.model)?;
            let splits = harness::load_data(&cfg)?;
            let scores = harness::rank(&cfg, &model, &splits)?;
            let (_, masks) = harness::plan(&cfg, &scores)?;
            let text = export_ranking(&scores, &masks);
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("ranking.txt"), &text)?;
            }
            print!("{text}");
        }
        Command::Prune { checkpoint } => {
            let dir = output_dir(&cfg)?.to_path_buf();
            let mut model = load_checkpoint_for(checkpoint_arg(&checkpoint, &cfg)?, &cfg.model)?;
            let splits = harness::load_data(&cfg)?;
            let scores = harness::rank(&cfg, &model, &splits)?;
            let (budget, masks) = harness::plan(&cfg, &scores)?;
            let trace = harness::soft_prune(&cfg, &mut model, &masks, &budget, &splits)?;
            let (compacted, structure) =
                hard_prune_compact(&model, &masks, &budget).map_err(|e| e.at_stage("hard-prune"))?;
            harness::verify_constraints(&compacted, &budget).map_err(|e| e.at_stage("verify"))?;
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&model, dir.join("soft.ckpt"))?;
            save_checkpoint(&compacted, dir.join("compact.ckpt"))?;
            std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
            std::fs::write(dir.join("budget.csv"), report::budget_csv(&budget))?;
            std::fs::write(dir.join("ranking.txt"), export_ranking(&scores, &masks))?;
            print!("{}", trace.to_csv());
            println!("params {} -> {}", structure.params_before, structure.params_after);
            println!("test_acc {:.4}", accuracy(&compacted, &splits.test)?);
        }
        Command::Finetune { checkpoint } => {
            let dir = output_dir(&cfg)?.to_path_buf();
            let model = load_checkpoint_for(&checkpoint, &cfg.model)?;
            let splits = harness::load_data(&cfg)?;
            let before = accuracy(&model, &splits.test)?;
            let tuned = harness::finetune_stage(&cfg, &model, &splits)?;
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&tuned, dir.join("finetuned.ckpt"))?;
            println!("test_acc {:.4} -> {:.4}", before, accuracy(&tuned, &splits.test)?);
        }
        Command::Pipeline => {
            let r = harness::run_pipeline(&cfg)?;
            print!("{}", report::summary_text(&r));
        }
        Command::AblateSoftHard { grid, seeds } => {
            let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
            let mut rows = Vec::new();
            for seed in seeds {
                let run = ExperimentConfig { seed, ..cfg.clone() };
                rows.extend(harness::ablate_soft_vs_hard(&run, &grid)?);
            }
            if let Some(dir) = &cfg.output_dir {
                report::write_soft_hard(dir, &rows)?;
            }
            print!("{}", report::soft_hard_csv(&rows));
        }
        Command::AblateBatch { grid } => {
            let rows = harness::ablate_batch_size(&cfg, &grid)?;
            if let Some(dir) = &cfg.output_dir {
                report::write_stability(dir, &rows)?;
            }
            print!("{}", report::stability_csv(&rows));
        }
        Command::AblateRho { grid } => {
            let traces = harness::ablate_rho(&cfg, &grid)?;
            if let Some(dir) = &cfg.output_dir {
                report::write_rho(dir, &traces)?;
            }
            print!("{}", report::rho_csv(&traces));
        }
        Command::Report { .. } | Command::Count { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
