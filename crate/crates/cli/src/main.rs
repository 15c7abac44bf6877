//! `convshare`: verification suites, pass planning, toy training,
//! attention maps and optical simulation from the command line.
//!
//! Exit status: 0 success, 1 verification or feasibility failure,
//! 2 usage or configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use convshare_core::model::attention_heatmaps;
use convshare_core::optics::DeviceSpec;
use convshare_core::plan::{format_latency, plan_inferences};
use convshare_core::simulate::{compare_paths, SimulationMode};
use convshare_core::training::{metrics_csv, toy_model_config, train, DatasetKind, ToyDataset, TrainConfig};
use convshare_core::verify::{run_all, VerifyOptions, DEFAULT_SEED};
use convshare_core::{Checkpoint, ConvShareViT, Error, ModelConfig, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "convshare", version, about = "Convolution-only vision transformer on a simulated 4f optical correlator")]
struct Cli {
    /// Model configuration (JSON). Each command has its own default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Device resolution in pixels per side.
    #[arg(long, global = true, value_name = "INT", default_value_t = 2160)]
    device_res: usize,
    /// Device rate in optical passes per second.
    #[arg(long, global = true, value_name = "HZ", default_value_t = 2e6)]
    device_clock: f64,
    #[arg(long, global = true, value_name = "INT", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Directory for reports and artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::Double)]
    precision: PrecisionArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    QuadrantBlob,
    TwoClassTexture,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::QuadrantBlob => DatasetKind::QuadrantBlob,
            DatasetArg::TwoClassTexture => DatasetKind::TwoClassTexture,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cells,
    Canvas,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence suites and write verify.json.
    Verify {
        /// Scale one kernel of the convolution path by 1 + 1e-6.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Optical pass counts and latency (default model: 13x13, one head,
    /// 9 blocks).
    Plan {
        /// Print the plan as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train on a synthetic dataset; writes metrics.csv, model.ckpt and
    /// train.json.
    Train {
        #[arg(long, value_enum, default_value_t = DatasetArg::QuadrantBlob)]
        dataset: DatasetArg,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
    },
    /// Per-layer class-token attention heatmaps as CSV and PGM.
    Attnmap {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Synthetic image to visualise: index into a quadrant-blob set
        /// generated from --seed.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Run a model through the simulated correlator and compare logits
    /// with the electronic forward pass.
    Simulate {
        /// Trained model; otherwise weights are drawn from --seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Number of random input images.
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Cells)]
        mode: ModeArg,
    },
}

/// A failure and the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible { .. } | Error::Divergence { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let device = DeviceSpec::new(cli.device_res, cli.device_clock)?;
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
    }
    match &cli.command {
        Command::Verify { inject_fault } => verify(cli, *inject_fault),
        Command::Plan { json } => plan(cli, &device, *json),
        Command::Train { dataset, epochs } => train_cmd(cli, (*dataset).into(), *epochs),
        Command::Attnmap { checkpoint, sample } => attnmap(cli, checkpoint, *sample),
        Command::Simulate {
            checkpoint,
            images,
            mode,
        } => simulate(cli, &device, checkpoint.as_deref(), *images, *mode),
    }
}

fn load_config(cli: &Cli, default: ModelConfig) -> std::result::Result<ModelConfig, Failure> {
    match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}", p.display()),
            })?;
            Ok(ModelConfig::from_json(&text)?)
        }
        None => Ok(default),
    }
}

fn write(cli: &Cli, name: &str, contents: &str) -> Outcome {
    if let Some(dir) = &cli.out {
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn require_out(cli: &Cli) -> std::result::Result<&Path, Failure> {
    cli.out.as_deref().ok_or(Failure {
        code: 2,
        message: "this command needs --out DIR".into(),
    })
}

fn verify(cli: &Cli, inject_fault: bool) -> Outcome {
    let report = run_all(VerifyOptions {
        seed: cli.seed,
        inject_fault,
    })?;
    for s in &report.suites {
        println!("{}", s.line());
    }
    write(cli, "verify.json", &report.to_json())?;
    if report.passed {
        println!("all {} suites passed", report.suites.len());
        Ok(())
    } else {
        let names: Vec<_> = report.failing().iter().map(|s| s.suite.as_str()).collect();
        Err(failed(format!("failing suites: {}", names.join(", "))))
    }
}

fn plan(cli: &Cli, device: &DeviceSpec, json: bool) -> Outcome {
    let config = load_config(cli, ModelConfig::cifar100_13x13())?;
    let plan = match plan_inferences(&config, device) {
        Ok(p) => p,
        Err(Error::Infeasible { stage, reason }) => {
            let report = json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "feasible": false,
                "stage": stage,
                "reason": reason,
            });
            write(cli, "plan.json", &serde_json::to_string_pretty(&report).unwrap())?;
            return Err(failed(format!("infeasible at stage {stage}: {reason}")));
        }
        Err(e) => return Err(e.into()),
    };
    if json {
        println!("{}", plan.to_json());
    } else {
        print!("{}", plan.table());
    }
    write(cli, "plan.json", &plan.to_json())?;
    write(cli, "plan.txt", &plan.table())
}

fn train_cmd(cli: &Cli, kind: DatasetKind, epochs: usize) -> Outcome {
    let out = require_out(cli)?;
    let config = load_config(cli, toy_model_config(kind, 16))?;
    if config.channels != 1 || config.num_classes != kind.classes() {
        return Err(Failure {
            code: 2,
            message: format!(
                "toy datasets need 1 channel and {} classes, config has {} and {}",
                kind.classes(),
                config.channels,
                config.num_classes
            ),
        });
    }
    let tc = TrainConfig::toy(kind, config.image_size, epochs, cli.seed);
    let mut model = ConvShareViT::init(&config, &mut ChaCha8Rng::seed_from_u64(cli.seed))?;
    model.set_precision(cli.precision.into());
    let report = train(&mut model, &tc, |m| {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train {:.3}  val {:.3}",
            m.epoch + 1,
            m.lr,
            m.train_loss,
            m.train_acc,
            m.val_acc
        )
    })?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&report.metrics))?;
    report.checkpoint.save(out.join("model.ckpt"))?;
    let last = report.metrics.last();
    let summary = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "dataset": kind,
        "epochs": epochs,
        "seed": cli.seed,
        "parameters": model.parameter_count(),
        "final_train_acc": last.map(|m| m.train_acc),
        "final_val_acc": last.map(|m| m.val_acc),
        "config": config,
    });
    std::fs::write(out.join("train.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(())
}

/// 8-bit ASCII greymap of values in `[0, 1]`.
fn pgm(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in map.data().chunks(w) {
        let px: Vec<String> = row.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        writeln!(s, "{}", px.join(" ")).unwrap();
    }
    s
}

fn csv(map: &Tensor) -> String {
    let w = map.shape()[1];
    let mut s = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

fn attnmap(cli: &Cli, checkpoint: &Path, sample: usize) -> Outcome {
    let out = require_out(cli)?;
    let model = Checkpoint::load(checkpoint)?.restore()?;
    let c = model.config().clone();
    let image = if c.channels == 1 && c.image_size % 2 == 0 {
        let set = ToyDataset {
            kind: DatasetKind::QuadrantBlob,
            image_size: c.image_size,
            samples: sample + 1,
            seed: cli.seed,
            noise_std: convshare_core::training::TOY_NOISE_STD,
        };
        set.generate()?.swap_remove(sample).0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(sample as u64));
        Tensor::from_fn(&[c.channels, c.image_size, c.image_size], |_| rng.random_range(0.0..1.0))
    };
    let (logits, traces) = model.forward_traced(&image.to_precision(model.precision()))?;
    let mut files = Vec::new();
    for layer in 0..traces.len() {
        let map = attention_heatmaps(&traces, layer, c.image_size)?;
        for (ext, body) in [("csv", csv(&map)), ("pgm", pgm(&map))] {
            let name = format!("layer_{:02}.{ext}", layer + 1);
            std::fs::write(out.join(&name), body)?;
            files.push(name);
        }
    }
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = image.outer(0)?.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
    std::fs::write(out.join("input.pgm"), pgm(&first))?;
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint": checkpoint.display().to_string(),
        "sample": sample,
        "layers": traces.len(),
        "logits": logits.data(),
        "files": files,
    });
    std::fs::write(out.join("attnmap.json"), serde_json::to_string_pretty(&report).unwrap())?;
    println!("wrote {} heatmap pairs to {}", traces.len(), out.display());
    Ok(())
}

fn simulate(cli: &Cli, device: &DeviceSpec, checkpoint: Option<&Path>, images: usize, mode: ModeArg) -> Outcome {
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.restore()?,
        None => {
            let config = load_config(cli, ModelConfig::cifar100_13x13())?;
            ConvShareViT::init(&config, &mut ChaCha8Rng::seed_from_u64(cli.seed))?
        }
    };
    let c = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(1));
    let inputs: Vec<Tensor> = (0..images)
        .map(|_| Tensor::from_fn(&[c.channels, c.image_size, c.image_size], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let mode = match mode {
        ModeArg::Cells => SimulationMode::Cells,
        ModeArg::Canvas => SimulationMode::Canvas,
    };
    let report = compare_paths(&model, &inputs, device, mode)?;
    println!(
        "{} images: max relative logit deviation {:.3e}, argmax agreement {}/{}",
        report.images, report.max_rel_deviation, report.argmax_agreement, report.images
    );
    println!(
        "{} optical passes per image (plan: {}), {} at {} Hz",
        report.inferences_per_image,
        report.planned_inferences,
        format_latency(report.inferences_per_image as f64 / device.clock_hz),
        device.clock_hz
    );
    write(cli, "simulate.json", &serde_json::to_string_pretty(&report).unwrap())?;
    if report.passed {
        Ok(())
    } else {
        Err(failed(format!(
            "optical path disagrees: deviation {:.3e} (tolerance {:.0e}), {} of {} argmax agree",
            report.max_rel_deviation, report.tolerance, report.argmax_agreement, report.images
        )))
    }
}
