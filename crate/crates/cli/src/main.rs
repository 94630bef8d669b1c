//! `dmf`: data generation, two-stage training, evaluation and exports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmf_core::ablation::run_ablation;
use dmf_core::attention::{image_attention, write_attention};
use dmf_core::checkpoint::Checkpoint;
use dmf_core::config::RunConfig;
use dmf_core::fusion::Modality;
use dmf_core::retrieval_eval::{evaluate, export_ranking_grid, retrieve};
use dmf_core::synthdata::{build_dataset, read_png, DatasetManifest, PersonImage};
use dmf_core::{trainer, Error, ErrorCategory, Result};

/// Multimodal-fusion person re-identification on a synthetic benchmark.
///
/// The worker thread count defaults to the DMF_THREADS environment variable,
/// or to the number of CPUs when it is unset.
#[derive(Parser, Debug)]
#[command(name = "dmf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage I: pre-train on images and captions
    Pretrain {
        #[command(flatten)]
        common: TrainArgs,
        /// Pre-train on images only
        #[arg(long)]
        no_text: bool,
        /// Pre-train on captions only
        #[arg(long)]
        no_image: bool,
    },
    /// Stage II: fine-tune on images
    Finetune {
        #[command(flatten)]
        common: TrainArgs,
        /// Stage I checkpoint to start from
        #[arg(long, required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
        init: Option<PathBuf>,
        /// Start from a fresh initialization instead of --init
        #[arg(long)]
        from_scratch: bool,
    },
    /// Continue an interrupted stage from its checkpoint
    Resume {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from
        #[arg(long)]
        ckpt: PathBuf,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Training log to append to (JSON lines)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Report file (JSON)
        #[arg(long)]
        report: PathBuf,
    },
    /// Export ranking strips for selected queries
    Rank {
        /// Checkpoint to rank with
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated identity ids; every query of each is exported
        #[arg(long, value_delimiter = ',', required = true)]
        queries: Vec<u32>,
        /// Gallery images per strip [default: eval.top_k of the checkpoint config]
        #[arg(long)]
        top_k: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention maps of one image
    AttnDump {
        /// Checkpoint to read weights from
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PNG
        #[arg(long)]
        image: PathBuf,
        /// Transformer block index
        #[arg(long)]
        layer: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four pre-training variants over several seeds
    Ablation {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Number of consecutive seeds starting at train.seed
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration (JSON); omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines) [default: the output path with extension .jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
}

impl TrainArgs {
    fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out.with_extension("jsonl"))
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Checkpoint => 4,
        ErrorCategory::Numeric => 5,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let m = build_dataset(&cfg.data, &out)?;
            println!(
                "wrote {}: {} pretrain images, {} captions, {} finetune images, {} queries, {} gallery",
                out.display(),
                m.pretrain_images.len(),
                m.pretrain_captions.len(),
                m.finetune_images.len(),
                m.query.len(),
                m.gallery.len()
            );
        }
        Command::Pretrain {
            common,
            no_text,
            no_image,
        } => {
            let mut modalities = Vec::new();
            if !no_image {
                modalities.push(Modality::Image);
            }
            if !no_text {
                modalities.push(Modality::Text);
            }
            if modalities.is_empty() {
                return Err(Error::Config("--no-text and --no-image together leave nothing to train on".into()));
            }
            let cfg = common.config.load()?;
            let ckpt = trainer::pretrain(&common.data, &cfg, &modalities, &common.out, Some(&common.log_path()))?;
            println!("wrote {} after {} iterations", common.out.display(), ckpt.meta.iteration);
        }
        Command::Finetune {
            common,
            init,
            from_scratch,
        } => {
            let cfg = common.config.load()?;
            let init = match (init, from_scratch) {
                (Some(p), false) => Some(Checkpoint::load(&p)?),
                _ => None,
            };
            let ckpt = trainer::finetune(&common.data, &cfg, init.as_ref(), &common.out, Some(&common.log_path()))?;
            println!("wrote {} after {} iterations", common.out.display(), ckpt.meta.iteration);
        }
        Command::Resume { data, ckpt, out, log } => {
            let start = Checkpoint::load(&ckpt)?;
            let done = trainer::resume(&data, &start, &out, log.as_deref())?;
            println!("wrote {} after {} iterations", out.display(), done.meta.iteration);
        }
        Command::Eval {
            config,
            data,
            ckpt,
            report,
        } => {
            let cfg = config.load()?;
            let manifest = DatasetManifest::load(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let r = evaluate(&data, &manifest, &ckpt, &cfg)?;
            write_json(&report, &r)?;
            print!("{}", r.table());
            if r.metrics.dropped > 0 {
                println!("{} queries dropped (no valid or relevant gallery entry)", r.metrics.dropped);
            }
        }
        Command::Rank {
            ckpt,
            data,
            queries,
            top_k,
            out,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = ckpt.meta.config.clone();
            let selected: Vec<usize> = manifest
                .query
                .iter()
                .enumerate()
                .filter(|(_, r)| queries.contains(&r.identity_id))
                .map(|(i, _)| i)
                .collect();
            if let Some(id) = queries.iter().find(|id| !manifest.query.iter().any(|r| r.identity_id == **id)) {
                return Err(Error::Config(format!("identity {id} has no query image")));
            }
            let retrieval = retrieve(&data, &manifest, &ckpt)?;
            let k = top_k.unwrap_or(cfg.eval.top_k);
            let sidecar = export_ranking_grid(&data, &manifest, &retrieval, &selected, k, &out, &ckpt.id(), &cfg)?;
            println!("wrote {} strips to {}", sidecar.strips.len(), out.display());
        }
        Command::AttnDump { ckpt, image, layer, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pixels = read_png(&image)?;
            let img = PersonImage {
                pixels,
                identity_id: 0,
                camera_id: 0,
                domain_id: 0,
            };
            let export = image_attention(&ckpt, &img, layer)?;
            let cfg = &ckpt.meta.config.model;
            let sample = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            write_attention(&out, &export, &sample, &ckpt.id(), (cfg.patch_height, cfg.patch_width))?;
            println!("wrote {} heads to {}", export.heads, out.display());
        }
        Command::Ablation {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = config.load()?;
            let report = run_ablation(&data, &cfg, seeds, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("DMF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a global pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", category.as_str());
            ExitCode::from(exit_code(category))
        }
    }
}
