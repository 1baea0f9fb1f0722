use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semikan::data::{generate_dataset, list_ids, load_sample, make_split, save_dataset, DatasetMeta, DatasetSplit};
use semikan::train::{
    evaluate_model, export_interpretability, load_eval_samples, load_model, write_eval_csv, Checkpoint, RunConfig, TrainData,
    Trainer, CHECKPOINT_FILE,
};
use semikan::Result;

#[derive(Parser)]
#[command(name = "semikan", version, about = "Semi-supervised KAN U-Net segmentation on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to the data directory.
    Generate(Common),
    /// Write the labeled/unlabeled/test split for the ratio and seed.
    Split(Common),
    /// Train and checkpoint into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (default: the one in --out-dir).
        #[arg(long, num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Score a checkpoint on the test split and write eval.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Feature overlay, KAN activation dumps and prune report for one sample.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample id (default: first test id).
        #[arg(long)]
        sample: Option<String>,
    },
}

/// Configuration sources, applied in order: defaults, `--config`, `--set`,
/// then the named flags.
#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    /// Weight of the uncertainty term in the consistency loss.
    #[arg(long)]
    alpha: Option<String>,
    /// Decoder count (1..3) or comma-separated upsampling strategies.
    #[arg(long)]
    decoders: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    lambda_max: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    num_samples: Option<String>,
    #[arg(long)]
    difficulty: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| semikan::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v)?;
        }
        let flags = [
            ("ratio", &self.ratio),
            ("seed", &self.seed),
            ("temperature", &self.temperature),
            ("alpha", &self.alpha),
            ("decoders", &self.decoders),
            ("epochs", &self.epochs),
            ("max_steps", &self.max_steps),
            ("lambda_max", &self.lambda_max),
            ("batch_size", &self.batch_size),
            ("num_samples", &self.num_samples),
            ("difficulty", &self.difficulty),
            ("out_dir", &self.out_dir),
            ("data_dir", &self.data_dir),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.data.out_dir.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            let m = &cfg.model;
            let d = &cfg.data;
            let samples = generate_dataset(d.num_samples, m.height, m.width, d.difficulty, d.seed)?;
            let meta = DatasetMeta {
                count: samples.len(),
                height: m.height,
                width: m.width,
                num_classes: 2,
                difficulty: d.difficulty,
                seed: d.seed,
            };
            save_dataset(&d.data_dir, &samples, &meta)?;
            println!("wrote {} {} samples to {}", samples.len(), d.difficulty, d.data_dir.display());
        }
        Command::Split(c) => {
            let cfg = c.resolve()?;
            let d = &cfg.data;
            let split = make_split(&list_ids(&d.data_dir)?, d.ratio, d.seed)?;
            let path = split.save(&d.data_dir)?;
            println!(
                "labeled {} unlabeled {} test {} -> {}",
                split.labeled.len(),
                split.unlabeled.len(),
                split.test.len(),
                path.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let out = cfg.data.out_dir.clone();
            let data = TrainData::load(&cfg)?;
            let mut trainer = match resume {
                Some(p) => {
                    let p = p.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
                    Trainer::resume(cfg, data, &Checkpoint::load(&p)?)?
                }
                None => Trainer::new(cfg, data)?,
            };
            let total = trainer.total_steps();
            let every = trainer.steps_per_epoch();
            let path = trainer.run(&out, |step, r| {
                if (step + 1) % every == 0 || step + 1 == total {
                    println!(
                        "step {}/{total} dice {:.4} cons {:.4} lambda {:.4} total {:.4}",
                        step + 1,
                        r.dice,
                        r.consistency,
                        r.lambda,
                        r.total
                    );
                }
            })?;
            println!("checkpoint {}", path.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.resolve()?;
            let (stored, model) = load_model(&checkpoint_path(&cfg, checkpoint))?;
            let mut eval_cfg = cfg.clone();
            eval_cfg.model = stored.model;
            let samples = load_eval_samples(&eval_cfg)?;
            let result = evaluate_model(&model, &samples, cfg.optim.batch_size)?;
            std::fs::create_dir_all(&cfg.data.out_dir).map_err(|e| semikan::Error::io(&cfg.data.out_dir, e))?;
            let path = cfg.data.out_dir.join("eval.csv");
            write_eval_csv(&path, &result)?;
            let a = &result.aggregate;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "dice {:.3} jaccard {:.3} hd95 {} asd {} over {} samples -> {}",
                a.dice,
                a.jaccard,
                show(a.hd95),
                show(a.asd),
                result.per_sample.len(),
                path.display()
            );
        }
        Command::Export { common, checkpoint, sample } => {
            let cfg = common.resolve()?;
            let (_, mut model) = load_model(&checkpoint_path(&cfg, checkpoint))?;
            let id = match sample {
                Some(id) => id,
                None => DatasetSplit::load(&cfg.data.data_dir, cfg.data.ratio, cfg.data.seed)?
                    .test
                    .first()
                    .cloned()
                    .ok_or_else(|| semikan::Error::Config("test split is empty".into()))?,
            };
            let s = load_sample(&cfg.data.data_dir, &id, false)?;
            let out = cfg.data.out_dir.join("export");
            let summary = export_interpretability(&mut model, &s, &out, cfg.data.prune_threshold)?;
            println!("exported {id} to {}", out.display());
            for l in &summary.layers {
                println!("{}: pruned {:.1}% of {} edges", l.layer, 100.0 * l.fraction_removed, l.in_dim * l.out_dim);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
