use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use privsynth::classes::{class_index, ClassCondition};
use privsynth::curation::{parse_ratio, CurationConfig};
use privsynth::image_io::save_png;
use privsynth::pipeline::stages::{self, load_evaluation, write_json};
use privsynth::pipeline::{self, ExperimentConfig, PlanStatus};
use privsynth::seeds::derive_seed;
use privsynth::toy::{generate_toy_corpus, ToySpec};
use privsynth::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "privsynth", version, about = "Privacy-filtered synthetic radiograph datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML; the relevant section is used. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => pipeline::validate_config(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run or resume the full experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the stage plan without running anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Check an experiment file and list every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a toy corpus from a TOML spec.
    ToyData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curate a metadata catalog and split it by patient.
    Curate {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        max_followups: usize,
        #[arg(long, default_value_t = 21)]
        min_age: u32,
        #[arg(long, default_value = "70:10:20")]
        ratio: String,
    },
    TrainVae {
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a split's train and validation images into latents.
    Encode {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    TrainLdm {
        /// Latent file written by `encode`.
        #[arg(long, conflicts_with_all = ["vae", "split"])]
        latents: Option<PathBuf>,
        #[arg(long, requires = "split")]
        vae: Option<PathBuf>,
        #[arg(long, requires = "vae")]
        split: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    TrainGan {
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw class-conditional samples from a generator checkpoint.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    TrainMatcher {
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    BuildIndex {
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Leave validation images out of the index.
        #[arg(long)]
        train_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Privacy-filtered sampling of an anonymous dataset.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    TrainClf {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-set AUCs of classifier checkpoints of one training set.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        clf: Vec<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "real")]
        tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluations into the comparison table.
    Report {
        /// Evaluation directories (or evaluation.json files).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Text table; a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out, dry_run } => {
            let cfg = pipeline::validate_config(&config)?;
            if dry_run {
                for (stage, status) in pipeline::plan_status(&cfg, &out)? {
                    let tag = match status {
                        PlanStatus::Cached => "cached ",
                        PlanStatus::Pending => "pending",
                    };
                    println!("{tag} {:<24} seed {:<20} after [{}]", stage.name, stage.seed, stage.dependencies.join(", "));
                }
                return Ok(());
            }
            let outcome = pipeline::run_pipeline(&cfg, &out)?;
            let report = fs::read_to_string(outcome.run_dir.join("report/report.txt"))
                .map_err(|e| Error::io(outcome.run_dir.join("report/report.txt"), e))?;
            println!("{report}");
            println!(
                "run {}: {} stages executed, {} cached; manifest at {}",
                cfg.run_id,
                outcome.executed.len(),
                outcome.skipped.len(),
                outcome.run_dir.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Validate { config } => {
            let cfg = pipeline::validate_config(&config)?;
            println!("{}: ok (run_id {}, {} stages)", config.display(), cfg.run_id, pipeline::plan_stages(&cfg)?.len());
        }
        Command::ToyData { spec, out } => {
            let spec: ToySpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str(&text).map_err(|e| {
                        Error::Config(vec![privsynth::error::ConfigIssue::new(p.display().to_string(), e.message())])
                    })?
                }
                None => ToySpec::default(),
            };
            let corpus = generate_toy_corpus(&spec, &out)?;
            println!("{} images, metadata at {}", corpus.num_images, corpus.metadata.display());
        }
        Command::Curate {
            metadata,
            images,
            out,
            seed,
            max_followups,
            min_age,
            ratio,
        } => {
            let config = CurationConfig {
                max_followups_per_patient: max_followups,
                min_age_exclusive: min_age,
                split_ratio: parse_ratio(&ratio)?,
                seed,
            };
            let root = fs::canonicalize(&images).map_err(|e| Error::io(&images, e))?;
            print_json(&stages::curate_to_dir(&metadata, &images, &root, &config, &out)?);
        }
        Command::TrainVae { split, config, seed, out } => {
            let cfg = config.load()?;
            print_json(&stages::train_vae_from_split(&split, &cfg.vae, cfg.training.vae_epochs, seed, &out)?);
        }
        Command::Encode { vae, split, out } => print_json(&stages::encode_split(&vae, &split, &out)?),
        Command::TrainLdm {
            latents,
            vae,
            split,
            config,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let latents = match (latents, vae, split) {
                (Some(l), _, _) => l,
                (None, Some(vae), Some(split)) => {
                    let l = out.with_extension("latents.safetensors");
                    stages::encode_split(&vae, &split, &l)?;
                    l
                }
                _ => return Err(Error::Input("pass --latents, or --vae with --split".into())),
            };
            print_json(&stages::train_ldm_from_latents(
                &latents,
                &cfg.diffusion,
                cfg.training.diffusion_max_epochs,
                seed,
                &out,
            )?);
        }
        Command::TrainGan { split, config, seed, out } => {
            print_json(&stages::train_gan_from_split(&split, &config.load()?.gan, seed, &out)?);
        }
        Command::Sample {
            model,
            class,
            count,
            seed,
            out,
        } => {
            let c = class_index(&class).ok_or_else(|| Error::Input(format!("unknown class {class:?}")))?;
            let generator = stages::load_generator(&model)?;
            let conds = vec![ClassCondition::new(c)?; count];
            let seeds: Vec<u64> = (0..count as u64).map(|i| derive_seed(seed, "sample", i)).collect();
            let images = generator.generate(&conds, &seeds)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, img) in images.iter().enumerate() {
                save_png(&out.join(format!("{}_{c:02}_{i:06}.png", generator.kind().tag())), img)?;
            }
            println!("{count} images in {}", out.display());
        }
        Command::TrainMatcher { split, config, seed, out } => {
            print_json(&stages::train_matcher_from_split(&split, &config.load()?.matcher, seed, &out)?);
        }
        Command::BuildIndex {
            matcher,
            split,
            train_only,
            out,
        } => {
            print_json(&stages::build_index_from_split(&matcher, &split, !train_only, &out)?);
        }
        Command::Synthesize {
            model,
            matcher,
            index,
            split,
            threshold,
            config,
            seed,
            out,
        } => {
            let mut privacy = config.load()?.privacy;
            if let Some(t) = threshold {
                privacy.threshold = t;
            }
            let generator = stages::load_generator(&model)?;
            print_json(&stages::synthesize_to_dir(
                generator.as_ref(),
                &matcher,
                &index,
                &split,
                &privacy,
                seed,
                &out,
            )?);
        }
        Command::TrainClf {
            train,
            val,
            config,
            seed,
            out,
        } => {
            print_json(&stages::train_clf_from_catalogs(&train, &val, &config.load()?.classifier, seed, &out)?);
        }
        Command::Evaluate { clf, test, tag, out } => {
            let record = stages::evaluate_classifiers(&tag, &clf, &test)?;
            write_json(&out.join(stages::EVALUATION_FILE), &record)?;
            info!("evaluation written to {}", out.display());
            print_json(&serde_json::to_value(&record)?);
        }
        Command::Report { runs, out } => {
            let evals = runs.iter().map(|p| load_evaluation(p)).collect::<Result<Vec<_>>>()?;
            let (_, rendered) = stages::build_report(&evals)?;
            write_text(&out, &rendered.text)?;
            write_text(&out.with_extension("csv"), &rendered.csv)?;
            print!("{}", rendered.text);
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
