//! `cisunet`: train, evaluate, predict, inspect and generate synthetic data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cisunet_core::checkpoint::Checkpoint;
use cisunet_core::data::{
    list_cases, normalize_intensity, read_image, read_labels, synthetic_phantom, write_case,
    write_labels, LabelMap, LabelVolume,
};
use cisunet_core::inference::{segment_volume, SegmentationModel, DEFAULT_OVERLAP};
use cisunet_core::metrics::{evaluate_case, render_report, summarize};
use cisunet_core::train::{load_training_cases, Trainer, TrainingCase, TrainingLog};
use cisunet_core::{
    count_parameters, load_config, parameter_breakdown, preset, AttentionVariant, Error, RunConfig,
};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cisunet", version, about = "Volumetric vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the model section with a preset.
    #[arg(long, value_parser = ["tiny", "small", "base"])]
    preset: Option<String>,
    #[arg(long, value_parser = ["csw_sa", "sw_sa"])]
    attention: Option<String>,
    /// Number of classes including background.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data-dir>/images` and `<data-dir>/labels`.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory for checkpoints and `train_log.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint (its configuration wins).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Validation cases; defaults to one held-out synthetic phantom.
        #[arg(long)]
        val_dir: Option<PathBuf>,
    },
    /// Score predictions against ground truth and write a report.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data_dir: PathBuf,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "identity")]
        ckpt: Option<PathBuf>,
        /// Use the ground truth as the prediction.
        #[arg(long, conflicts_with = "ckpt")]
        identity: bool,
    },
    /// Segment one volume.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the architecture summary and parameter counts.
    Info {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write synthetic phantoms in the dataset layout.
    GenSynth {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut run = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.preset {
            let classes = run.model.num_classes;
            run.model = preset(name)?;
            run.model.num_classes = classes;
        }
        if let Some(a) = &self.attention {
            run.model.attention_variant = a.parse::<AttentionVariant>()?;
        }
        if let Some(c) = self.classes {
            run.model.num_classes = c;
        }
        if let Some(s) = self.seed {
            run.train.rng_seed = s;
        }
        run.validate()?;
        Ok(run)
    }

    fn variant_name(&self) -> &str {
        self.preset.as_deref().unwrap_or(if self.config.is_some() {
            "custom"
        } else {
            "base"
        })
    }
}

fn phantom_case(run: &RunConfig, seed: u64, id: &str) -> Result<TrainingCase, Error> {
    let (image, labels) = synthetic_phantom(
        &mut ChaCha8Rng::seed_from_u64(seed),
        64,
        run.model.num_classes,
    )?;
    Ok(TrainingCase {
        id: id.to_string(),
        image: normalize_intensity(&image, run.data.intensity_window)?,
        labels,
    })
}

fn train(
    args: &ModelArgs,
    data_dir: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    iterations: Option<usize>,
    val_dir: Option<&Path>,
) -> Result<(), Error> {
    let mut trainer = match ckpt {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?)?,
        None => Trainer::new(args.resolve()?)?,
    };
    if let Some(n) = iterations {
        trainer.config.train.iterations = n;
    }
    let cases = load_training_cases(data_dir, &trainer.config)?;
    let validation = match val_dir {
        Some(dir) => load_training_cases(dir, &trainer.config)?,
        None if trainer.config.train.validate_every > 0 => {
            vec![phantom_case(
                &trainer.config,
                trainer.config.train.rng_seed.wrapping_add(1),
                "heldout",
            )?]
        }
        None => Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut log = TrainingLog::to_file(out.join("train_log.jsonl"))?;
    trainer.train(&cases, &validation, Some(out), &mut log)?;
    if let Some(last) = log.entries.last() {
        println!(
            "trained to iteration {} loss {:.6}",
            last.iteration, last.loss
        );
    }
    println!("checkpoint {}", out.join("final.ckpt").display());
    Ok(())
}

fn check_classes(labels: &LabelVolume, classes: usize, path: &Path) -> Result<(), Error> {
    match labels
        .label_set()
        .into_iter()
        .find(|&l| l as usize >= classes)
    {
        Some(bad) => Err(Error::Dataset {
            path: path.to_path_buf(),
            msg: format!("label {bad} does not fit a {classes}-class model"),
        }),
        None => Ok(()),
    }
}

fn evaluate(
    args: &ModelArgs,
    data_dir: &Path,
    out: &Path,
    ckpt: Option<&Path>,
) -> Result<(), Error> {
    let (model, run) = match ckpt {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            let model = SegmentationModel {
                config: c.config.model.clone(),
                params: c.params,
            };
            (Some(model), c.config)
        }
        None => (None, args.resolve()?),
    };
    let classes = run.model.num_classes;
    let map = LabelMap::for_classes(classes);
    let mut results = Vec::new();
    for case in list_cases(data_dir)? {
        let Some(lp) = &case.labels else {
            return Err(Error::Dataset {
                path: case.image.clone(),
                msg: format!("no ground truth for case {}", case.id),
            });
        };
        let gt = read_labels(lp)?;
        check_classes(&gt, classes, lp)?;
        let pred = match &model {
            Some(m) => segment_volume(
                &read_image(&case.image)?,
                m,
                &run.data,
                run.train.patch_size,
                DEFAULT_OVERLAP,
            )?,
            None => gt.clone(),
        };
        log::info!("evaluated {}", case.id);
        results.push(evaluate_case(&case.id, &pred, &gt, &map)?);
    }
    let summary = summarize(&results)?;
    let report = render_report(&results, &summary);
    std::fs::write(out, &report).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    print!("{}", report.split("[cohort]\n").nth(1).unwrap_or_default());
    Ok(())
}

fn predict(ckpt: &Path, input: &Path, out: &Path) -> Result<(), Error> {
    let c = Checkpoint::load(ckpt)?;
    let model = SegmentationModel {
        config: c.config.model.clone(),
        params: c.params,
    };
    let image = read_image(input)?;
    let labels = segment_volume(
        &image,
        &model,
        &c.config.data,
        c.config.train.patch_size,
        DEFAULT_OVERLAP,
    )?;
    write_labels(out, &labels)?;
    println!("wrote {} {:?}", out.display(), labels.dims());
    Ok(())
}

fn info(args: &ModelArgs) -> Result<(), Error> {
    let run = args.resolve()?;
    let m = &run.model;
    let join = |v: &[usize]| {
        v.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    let total = count_parameters(m);
    println!("variant: {}", args.variant_name());
    println!("attention: {}", m.attention_variant);
    println!("stage_depths (L): {}", join(&m.stage_depths));
    println!("stage_channels (C): {}", join(&m.stage_channels));
    println!("embed_dim (F): {}", m.embed_dim);
    println!(
        "window_size: {} shift_size: {} heads: {}",
        m.window_size, m.shift_size, m.num_heads
    );
    println!("classes: {}", m.num_classes);
    println!("parameters: {total} ({:.3}M)", total as f64 / 1e6);
    println!("breakdown:");
    for (module, n) in parameter_breakdown(m) {
        println!("  {module:<24} {n:>12}");
    }
    Ok(())
}

fn gen_synth(args: &ModelArgs, out: &Path, count: usize, size: usize) -> Result<(), Error> {
    let run = args.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.rng_seed);
    for i in 0..count {
        let (image, labels) = synthetic_phantom(&mut rng, size, run.model.num_classes)?;
        let files = write_case(out, &format!("phantom_{i:03}"), &image, &labels)?;
        println!("{}", files.image.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train {
            model,
            data_dir,
            out,
            ckpt,
            iterations,
            val_dir,
        } => train(
            model,
            data_dir,
            out,
            ckpt.as_deref(),
            *iterations,
            val_dir.as_deref(),
        ),
        Command::Evaluate {
            model,
            data_dir,
            out,
            ckpt,
            identity: _,
        } => evaluate(model, data_dir, out, ckpt.as_deref()),
        Command::Predict { ckpt, input, out } => predict(ckpt, input, out),
        Command::Info { model } => info(model),
        Command::GenSynth {
            model,
            out,
            count,
            size,
        } => gen_synth(model, out, *count, *size),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
