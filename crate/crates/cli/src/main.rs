use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use liteflow::bases::{export_flow_bases, Unit};
use liteflow::checkpoint;
use liteflow::data::generate_synthetic;
use liteflow::encoder::PixelRange;
use liteflow::flowio::{read_flo, read_flow_any, read_image, read_mask, write_flo, write_rgb};
use liteflow::gradsuite::{self, THRESHOLD};
use liteflow::metrics::EvalReport;
use liteflow::train::{evaluate_aee, run_stagewise, SyntheticStream, TrainConfig};
use liteflow::viz::flow_to_color;
use liteflow::{Error, LiteFlowNet, ModelConfig, Result};

/// Lightweight pyramidal optical flow.
#[derive(Parser)]
#[command(name = "liteflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate flow from two images.
    Infer {
        image1: PathBuf,
        image2: PathBuf,
        /// Binary checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Model config; defaults to `model.toml` beside the checkpoint, else the LiteFlowNet2 layout.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a color-coded PNG.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Train on synthetic pairs; writes checkpoint, manifest, config and loss log to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated flow with ground truth (.flo or KITTI .png).
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Non-occluded mask image for Out-Noc.
        #[arg(long)]
        noc: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and layer counts of a model config.
    Params {
        /// Model or training config; the LiteFlowNet2 layout when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a .flo file with the color wheel.
    Viz {
        flow: PathBuf,
        png: PathBuf,
        /// Magnitude of full saturation; 99th percentile when absent.
        #[arg(long)]
        max_mag: Option<f64>,
    },
    /// Write the last-layer filters of an M or S unit as an image grid.
    ExportBases {
        /// Checkpoint; a freshly initialized model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        level: usize,
        #[arg(long, default_value = "S")]
        unit: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A model config, or the `model` table of a training config.
fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().any(|l| l.trim() == "[model]") {
        Ok(TrainConfig::from_toml_str(&text)?.model)
    } else {
        ModelConfig::from_toml_str(&text)
    }
}

fn model_config_for(checkpoint: Option<&Path>, explicit: Option<&Path>) -> Result<ModelConfig> {
    if let Some(p) = explicit {
        return load_model_config(p);
    }
    if let Some(sibling) = checkpoint.and_then(Path::parent).map(|d| d.join("model.toml")) {
        if sibling.is_file() {
            return load_model_config(&sibling);
        }
    }
    Ok(ModelConfig::liteflownet2())
}

fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<LiteFlowNet> {
    let mut model = LiteFlowNet::new(model_config_for(Some(ckpt), config)?)?;
    checkpoint::load(&mut model.store, ckpt)?;
    Ok(model)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Infer {
            image1,
            image2,
            model,
            config,
            out,
            viz,
        } => {
            let net = load_model(&model, config.as_deref())?;
            let flow = net.infer(&read_image(&image1)?, &read_image(&image2)?, PixelRange::Byte)?;
            write_flo(&out, &flow)?;
            if let Some(v) = viz {
                write_rgb(&v, &flow_to_color(&flow, None)?)?;
            }
            let s = flow.shape();
            println!("wrote {} ({}×{})", out.display(), s.w, s.h);
            Ok(true)
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            create_dir(&out)?;
            let schedule = cfg.stage_schedule()?;
            let mut model = LiteFlowNet::initialized(cfg.model.clone(), cfg.seed)?;
            let mut stream = SyntheticStream::new(cfg.data.clone(), cfg.seed);
            let log_path = out.join("loss.csv");
            let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let records = run_stagewise(&mut model, &schedule, &cfg, &mut stream, Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint::save(&model.store, &out.join("model.ckpt"))?;
            let manifest = out.join("manifest.txt");
            std::fs::write(&manifest, checkpoint::manifest(&model.store)).map_err(|e| Error::io(&manifest, e))?;
            let model_toml = out.join("model.toml");
            std::fs::write(&model_toml, cfg.model.to_toml_string()?).map_err(|e| Error::io(&model_toml, e))?;
            let tail = &records[records.len().saturating_sub(50)..];
            let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
            let held = generate_synthetic(cfg.seed.wrapping_add(1 << 32), 16, cfg.data.crop)?;
            println!("iterations {}", records.len());
            println!("final training loss {final_loss:.6e}");
            println!("held-out AEE {:.4} px", evaluate_aee(&model, &held, cfg.schedule.batch_size)?);
            Ok(true)
        }
        Command::Eval { est, gt, noc } => {
            let (est, _) = read_flow_any(&est)?;
            let (gt, valid) = read_flow_any(&gt)?;
            let noc = noc.as_deref().map(read_mask).transpose()?;
            let report = EvalReport::compute(&est, &gt, valid.as_ref(), noc.as_ref())?;
            print!("{}", report.to_text());
            println!("{}", serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?);
            Ok(true)
        }
        Command::Gradcheck { op, seed } => {
            let results = gradsuite::run(op.as_deref(), seed)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!("{verdict} {:20} max rel err {:.3e} over {} checks (threshold {THRESHOLD:e})", r.name, r.report.max_rel_err, r.report.checked);
                ok &= r.passed();
            }
            Ok(ok)
        }
        Command::Params { config } => {
            let cfg = match config {
                Some(p) => load_model_config(&p)?,
                None => ModelConfig::liteflownet2(),
            };
            let report = LiteFlowNet::new(cfg)?.parameter_report();
            println!("total parameters {}", report.total);
            println!("learnable layers {}", report.learnable_layers);
            for (part, n) in &report.breakdown {
                println!("  {part:10} {n}");
            }
            Ok(true)
        }
        Command::Viz { flow, png, max_mag } => {
            write_rgb(&png, &flow_to_color(&read_flo(&flow)?, max_mag)?)?;
            Ok(true)
        }
        Command::ExportBases {
            model,
            config,
            level,
            unit,
            seed,
            out,
        } => {
            let unit: Unit = unit.parse()?;
            let net = match &model {
                Some(ckpt) => load_model(ckpt, config.as_deref())?,
                None => LiteFlowNet::initialized(model_config_for(None, config.as_deref())?, seed)?,
            };
            let (bases, path) = export_flow_bases(&net, unit, level, &out)?;
            let per = bases.tiles.first().map_or(0, Vec::len);
            println!("wrote {} ({} components × {per} tiles)", path.display(), bases.tiles.len());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
