#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cnp_core::diffusion::{sample, SampleParams, SampleRequest};
use cnp_core::masking::{mask_random_with_ratio, mask_with, Mask, MaskStrategy};
use cnp_core::metrics::{evaluate_tasks, EvalConfig, GridRgbFeatures, ModelCompleter};
use cnp_core::render::{export_image, ImageFormat, Renderer};
use cnp_core::stroke::{ClassLabel, StrokeSequence};
use cnp_core::train::dataset::{generate_synthetic_dataset, load_split, SyntheticDatasetSpec};
use cnp_core::train::{Checkpoint, TrainConfig, Trainer, LATEST_CHECKPOINT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cnp", version, about = "Collaborative neural painting tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an interaction mask for a stroke sequence.
    Mask {
        #[arg(long)]
        strategy: MaskStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed masking ratio for the random strategy.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a partial sequence with a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class id or `none`.
        #[arg(long, default_value = "none")]
        class: String,
        /// Mask JSON (1 = context). Defaults to the context's occupancy.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Context sequence. Defaults to an empty canvas.
        #[arg(long)]
        ctx: Option<PathBuf>,
        #[arg(long, default_value_t = 70)]
        steps: usize,
        #[arg(long, default_value_t = 1.5)]
        s1: f64,
        #[arg(long, default_value_t = 1.5)]
        s2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use raw weights instead of the EMA copy.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PNG/PPM render of the result.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
    /// Render a sequence to PNG or PPM.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic stroke dataset.
    GenData {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        per_class: usize,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; resumes from `<out>/latest.ckpt` when present.
    Train {
        /// JSON file mirroring the training config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ignore an existing checkpoint and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Score a checkpoint on the completion tasks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// `all` or a comma list of level,random,square,block,none.
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 70)]
        steps: usize,
        #[arg(long, default_value_t = 1.5)]
        s1: f64,
        #[arg(long, default_value_t = 1.5)]
        s2: f64,
        #[arg(long, default_value_t = 64)]
        render_size: usize,
        /// Fixed masking ratio for the random task.
        #[arg(long)]
        random_ratio: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        raw: bool,
        /// JSON report; a CSV with the same stem is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP/WebSocket service (flags override CNP_CKPT, CNP_PORT, CNP_DATA_DIR).
    Serve {
        #[arg(long, env = "CNP_CKPT")]
        ckpt: PathBuf,
        #[arg(long, env = "CNP_PORT", default_value_t = cnp_server::DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = "CNP_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
}

fn parse_class(s: &str) -> Result<ClassLabel> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(ClassLabel::Null);
    }
    Ok(ClassLabel::Id(s.parse().with_context(|| format!("class must be an id or `none`, got {s}"))?))
}

fn parse_tasks(s: &str) -> Result<Vec<MaskStrategy>> {
    if s == "all" {
        return Ok(MaskStrategy::ALL.to_vec());
    }
    Ok(s.split(',').map(|t| t.trim().parse()).collect::<cnp_core::Result<_>>()?)
}

fn load_model(ckpt: &Path, raw: bool) -> Result<(Checkpoint, cnp_core::model::Mdt<f32>)> {
    let c = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model = if raw { c.raw_model()? } else { c.ema_model()? };
    Ok((c, model))
}

fn read_mask(path: &Path) -> Result<Mask> {
    Ok(serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?)
}

fn image_format(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path).with_context(|| format!("{}: use a .png or .ppm extension", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mask { strategy, seed, ratio, input, out } => {
            let seq = StrokeSequence::load(&input)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = match (strategy, ratio) {
                (MaskStrategy::Random, Some(r)) => mask_random_with_ratio(&mut rng, seq.len(), r)?,
                (_, Some(_)) => bail!("--ratio only applies to the random strategy"),
                _ => mask_with(&mut rng, strategy, &seq)?,
            };
            fs::write(&out, serde_json::to_string(&mask)?)?;
            println!("{strategy}: {} context, {} to predict", mask.context_count(), mask.predict_count());
        }
        Command::Sample { ckpt, class, mask, ctx, steps, s1, s2, seed, raw, out, image, size } => {
            let (c, model) = load_model(&ckpt, raw)?;
            let class = parse_class(&class)?;
            let context = match ctx {
                Some(p) => StrokeSequence::load(&p)?,
                None => StrokeSequence::empty(Default::default(), class),
            };
            let mask = match mask {
                Some(p) => read_mask(&p)?,
                None => Mask::from_bits(context.occupancy.clone()),
            };
            let request = SampleRequest { context: &context, mask: &mask, class, seed };
            let params = SampleParams { steps, s1, s2 };
            let started = std::time::Instant::now();
            let result = sample(&model, &c.schedule, &request, &params)?;
            log::info!("sampled {} strokes in {:?}", mask.predict_count(), started.elapsed());
            result.save(&out)?;
            if let Some(img) = image {
                export_image(&Renderer::default().render_sequence(&result, (size, size)), &img, image_format(&img)?)?;
            }
        }
        Command::Render { input, size, out } => {
            let seq = StrokeSequence::load(&input)?;
            export_image(&Renderer::default().render_sequence(&seq, (size, size)), &out, image_format(&out)?)?;
        }
        Command::GenData { classes, per_class, test_per_class, seed, out } => {
            let mut spec = SyntheticDatasetSpec::new(classes, per_class);
            if let Some(t) = test_per_class {
                spec.test_per_class = t;
            }
            let m = generate_synthetic_dataset(&spec, &out, seed)?;
            println!("wrote {} train / {} test sequences to {}", m.train_count, m.test_count, out.display());
        }
        Command::Train { config, out, steps, data, fresh } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            let train = load_split(cfg.data_dir.join("train"))?;
            let names = cnp_core::train::dataset::DatasetManifest::load(&cfg.data_dir)
                .map(|m| m.class_names)
                .unwrap_or_default();
            let latest = out.join(LATEST_CHECKPOINT);
            let mut trainer = if latest.exists() && !fresh {
                let mut ckpt = Checkpoint::load(&latest)?;
                log::info!("resuming from step {}", ckpt.step);
                if let Some(t) = ckpt.train.as_mut() {
                    t.total_steps = cfg.total_steps;
                }
                Trainer::resume(ckpt, train)?
            } else {
                if fresh {
                    let _ = fs::remove_file(out.join(cnp_core::train::TRAIN_LOG));
                }
                Trainer::new(cfg, train, names)?
            };
            let started = std::time::Instant::now();
            let path = trainer.run(&out, |_| {})?;
            println!("trained to step {} in {:.1?}; checkpoint {}", trainer.step, started.elapsed(), path.display());
        }
        Command::Eval { ckpt, test, tasks, n, seed, steps, s1, s2, render_size, random_ratio, batch, raw, out } => {
            let (c, model) = load_model(&ckpt, raw)?;
            let test = load_split(&test)?;
            let config = EvalConfig { tasks: parse_tasks(&tasks)?, n, seed, render_size, random_ratio };
            let completer = ModelCompleter { model: &model, schedule: c.schedule, params: SampleParams { steps, s1, s2 }, batch };
            let report = evaluate_tasks(&completer, &test, &config, &GridRgbFeatures::default())?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            fs::write(out.with_extension("csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Serve { ckpt, port, data_dir } => {
            let state = cnp_server::AppState::from_checkpoint(&ckpt, data_dir)?;
            tokio::runtime::Runtime::new()?.block_on(cnp_server::serve(Arc::new(state), port))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
