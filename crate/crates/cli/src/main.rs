use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use udc::masks::{MaskSet, MaskStage};
use udc::metrics::ExtractionMode;
use udc::mixsim::{Manifest, SimConfig};
use udc::permalign::align;
use udc::pipeline::{
    run_pipeline, teach_mixture, PipelineConfig, PredictionMode, StageLog, StageSummary, TeacherConfig, Workspace,
};
use udc::stft::{stft, StftConfig};
use udc::student::StudentNet;
use udc::tensor_io::{read_tensor, read_wav, write_tensor};

#[derive(Parser)]
#[command(name = "udc", version, about = "Unsupervised deep clustering for multichannel speech separation")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct StftArgs {
    #[arg(long, default_value_t = 512)]
    dft_size: usize,
    #[arg(long, default_value_t = 128)]
    shift: usize,
}

impl StftArgs {
    fn config(self) -> Result<StftConfig> {
        Ok(StftConfig::new(self.dft_size, self.shift)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SeparateMode {
    Teacher,
    Kmeans,
    CacgmmInit,
}

impl From<SeparateMode> for PredictionMode {
    fn from(m: SeparateMode) -> Self {
        match m {
            SeparateMode::Teacher => PredictionMode::TeacherOnly,
            SeparateMode::Kmeans => PredictionMode::StudentKmeans,
            SeparateMode::CacgmmInit => PredictionMode::StudentInitCacgmm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Extract {
    Mask,
    Mvdr,
}

impl From<Extract> for ExtractionMode {
    fn from(e: Extract) -> Self {
        match e {
            Extract::Mask => ExtractionMode::Mask,
            Extract::Mvdr => ExtractionMode::Mvdr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render simulated reverberant mixtures and a manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the cACGMM teacher and write aligned masks.
    Teach {
        /// A single multichannel WAV.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        r#in: Option<PathBuf>,
        /// A corpus manifest; `--out` is then a directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_pgm: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Resolve the frequency permutation of a mask tensor.
    Align {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the student on teacher masks.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON pipeline config supplying student settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Predict masks and write one WAV per class.
    Separate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SeparateMode::CacgmmInit)]
        mode: SeparateMode,
        #[arg(long, value_enum, default_value_t = Extract::Mvdr)]
        extract: Extract,
        /// Student network; required by the student modes.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long)]
        dump_pgm: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Invasive SDR of separated masks against simulated images.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        est_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Extract::Mvdr)]
        mode: Extract,
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Simulate, teach, train, separate and evaluate in one go.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_pgm: bool,
    },
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::read(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn report(stage: &str, summary: &StageSummary) -> bool {
    log::info!("{stage}: {} ok, {} failed", summary.processed.len(), summary.failures.len());
    for (id, err) in &summary.failures {
        eprintln!("{stage} failed on {id}: {err}");
    }
    summary.all_succeeded()
}

fn run(cli: Cli) -> Result<bool> {
    let workers = cli.workers;
    match cli.command {
        Command::Simulate { config, out, count, seed } => {
            let sim = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let sim: SimConfig = serde_json::from_str(&text)?;
                    sim.validate()?;
                    sim
                }
                None => SimConfig::default(),
            };
            let ws = Workspace::new(&out, workers)?;
            let (_, summary) = ws.simulate(&sim, &out, count, seed)?;
            Ok(report("simulate", &summary))
        }
        Command::Teach { r#in, manifest, classes, iters, seed, out, dump_pgm, stft: stft_args } => {
            let teacher = TeacherConfig {
                classes,
                iterations: iters,
                seed,
                ..TeacherConfig::default()
            };
            if let Some(m) = manifest {
                let corpus = Manifest::read(&m)?;
                let ws = Workspace::new(&out, workers)?;
                let summary = ws.teach(&corpus, &manifest_dir(&m), &out, stft_args.config()?, &teacher, dump_pgm)?;
                return Ok(report("teach", &summary));
            }
            let input = r#in.expect("clap enforces --in or --manifest");
            let y = stft(&read_wav(&input)?, stft_args.config()?)?;
            let masks = teach_mixture(&y, &teacher, seed, &mut StageLog::default())?;
            write_tensor(&out, &masks.to_tensor())?;
            if dump_pgm {
                for k in 0..masks.classes() {
                    masks.write_pgm(k, &out.with_extension(format!("class{k}.pgm")))?;
                }
            }
            Ok(true)
        }
        Command::Align { r#in, out } => {
            let masks = MaskSet::from_tensor(&read_tensor(&r#in)?, MaskStage::Raw)?;
            let (aligned, _) = align(&masks)?;
            write_tensor(&out, &aligned.to_tensor())?;
            Ok(true)
        }
        Command::Train { manifest, masks_dir, out, seed, config, stft: stft_args } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.student.seed = seed;
            cfg.student.train.seed = seed;
            let corpus = Manifest::read(&manifest)?;
            let ws = Workspace::new(manifest_dir(&manifest), workers)?;
            let (net, log, summary) =
                ws.train(&corpus, &manifest_dir(&manifest), &masks_dir, stft_args.config()?, &cfg.student)?;
            net.save(&out)?;
            log::info!(
                "best validation loss {:.5} at step {} after {} steps",
                log.best_validation_loss,
                log.best_step,
                log.steps_run
            );
            Ok(report("train", &summary))
        }
        Command::Separate {
            manifest,
            out,
            mode,
            extract,
            net,
            config,
            classes,
            seed,
            reference,
            dump_pgm,
            stft: stft_args,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.mode = mode.into();
            cfg.extraction = extract.into();
            cfg.teacher.classes = classes;
            cfg.teacher.seed = seed;
            cfg.reference_channel = reference;
            cfg.dump_pgm = dump_pgm;
            cfg.stft = stft_args.config()?;
            let net = match (cfg.mode.needs_student(), net) {
                (true, Some(p)) => Some(StudentNet::load(&p)?),
                (true, None) => bail!("--net is required for mode {:?}", cfg.mode),
                (false, _) => None,
            };
            let corpus = Manifest::read(&manifest)?;
            let ws = Workspace::new(&out, workers)?;
            let summary = ws.separate(&corpus, &manifest_dir(&manifest), &out, &cfg, net.as_ref())?;
            Ok(report("separate", &summary))
        }
        Command::Evaluate { manifest, est_dir, mode, reference, out, stft: stft_args } => {
            let corpus = Manifest::read(&manifest)?;
            let ws = Workspace::new(&est_dir, workers)?;
            let rep = ws.evaluate(&corpus, &manifest_dir(&manifest), &est_dir, stft_args.config()?, mode.into(), reference)?;
            rep.write(&out)?;
            println!(
                "{} mixtures: input {:.2} dB, output {:.2} dB, gain {:.2} +- {:.2} dB",
                rep.count, rep.input_sdr_db.mean, rep.output_sdr_db.mean, rep.gain_db.mean, rep.gain_db.std
            );
            for ex in &rep.excluded {
                eprintln!("evaluate failed on {}: {}", ex.id, ex.reason);
            }
            Ok(rep.excluded.is_empty())
        }
        Command::Pipeline { config, seed, dump_pgm } => {
            let mut cfg = load_config(Some(&config))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.dump_pgm |= dump_pgm;
            if workers != 0 {
                cfg.workers = workers;
            }
            let summary = run_pipeline(&cfg)?;
            println!(
                "{:?}/{:?}: gain {:.2} +- {:.2} dB over {} mixtures",
                cfg.mode, cfg.extraction, summary.report.gain_db.mean, summary.report.gain_db.std, summary.report.count
            );
            Ok(summary.all_succeeded())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
