use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vtp_core::check::run_checks;
use vtp_core::metrics::{evaluate, FrameEval};
use vtp_core::pipeline::bench::bench_csv;
use vtp_core::pipeline::io::{read_tensor_set, write_tensor_set};
use vtp_core::pipeline::{
    bench_attention, config_schema, parse_config, run_inference, synth_scene, train_toy, RunConfig, Scene, SceneConfig, VtpWeights,
};
use vtp_core::posehead::PoseFile;
use vtp_core::{Result, VtpError};

#[derive(Parser)]
#[command(name = "vtp", version, about = "Volumetric transformer for multi-view 3D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    Run,
    Scene,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-camera scene.
    Synth {
        /// Scene config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate poses for a scene with stored weights and score them.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overfit the model on one scene with ground-truth centers.
    TrainToy {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted poses against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time sparse against dense attention and count score elements.
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = [512, 4096, 32768])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        bin_size: usize,
        #[arg(long, default_value_t = 32)]
        embed: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the JSON Schema of the run or scene config.
    Schema {
        #[arg(value_enum)]
        kind: SchemaKind,
    },
    /// Run the built-in invariant and gradient checks. Exits with 1 if any fails.
    Check {
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn save_weights(dir: &Path, weights: &VtpWeights, cfg: &RunConfig) -> Result<()> {
    let names = weights.param_names();
    let tensors: Vec<(String, &vtp_core::Tensor)> = names.into_iter().zip(weights.params()).collect();
    write_tensor_set(dir, &tensors, cfg.dtype())
}

fn load_weights(dir: &Path, scene: &Scene, cfg: &RunConfig) -> Result<VtpWeights> {
    let seq_len = scene.person_grid.resolution.pow(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut weights = VtpWeights::init(scene.joints(), seq_len, cfg.conv_channels(), &cfg.attention, &mut rng)?;
    let mut stored = read_tensor_set(dir)?;
    let mut values = Vec::new();
    for name in weights.param_names() {
        let i = stored
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| VtpError::Config(format!("weight set lacks tensor {name}")))?;
        values.push(stored.swap_remove(i).1);
    }
    if let Some((extra, _)) = stored.first() {
        return Err(VtpError::Config(format!("unexpected tensor {extra} in weight set")));
    }
    weights.load_params(values)?;
    Ok(weights)
}

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    final_mpjpe: f64,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let mut cfg: SceneConfig = match config {
                Some(p) => parse_config(&fs::read_to_string(p)?)?,
                None => SceneConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scene = synth_scene(&cfg)?;
            scene.save(&out)?;
            println!("wrote {} people, {} views to {}", scene.poses.len(), scene.cameras.len(), out.display());
        }
        Command::Infer {
            scene,
            weights,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let scene = Scene::load(&scene)?;
            let w = load_weights(&weights, &scene, &cfg)?;
            let result = run_inference(&scene, &w, &cfg)?;
            let dir = out_dir(out, &cfg)?;
            PoseFile::from_poses(&result.poses, &scene.skeleton()).save(&dir.join("poses.json"))?;
            fs::write(dir.join("metrics.json"), result.report.to_json()? + "\n")?;
            fs::write(dir.join("metrics.csv"), result.report.to_csv())?;
            print!("{}", result.report.to_csv());
        }
        Command::TrainToy {
            scene,
            config,
            steps,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let scene = Scene::load(&scene)?;
            let outcome = train_toy(&scene, &cfg)?;
            let dir = out_dir(out, &cfg)?;
            save_weights(&dir.join("weights"), &outcome.weights, &cfg)?;
            fs::write(dir.join("loss.csv"), outcome.loss_csv())?;
            let report = TrainReport {
                steps: cfg.train.steps,
                initial_loss: outcome.initial_loss(),
                final_loss: outcome.final_loss(),
                loss_ratio: outcome.final_loss() / outcome.initial_loss(),
                final_mpjpe: outcome.final_mpjpe,
            };
            write_json(&dir.join("train.json"), &report)?;
            println!(
                "loss {:.6} -> {:.6}, MPJPE {:.3} mm",
                report.initial_loss, report.final_loss, report.final_mpjpe
            );
        }
        Command::Eval { pred, gt, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let preds = PoseFile::load(&pred)?.to_poses()?;
            let gts = PoseFile::load(&gt)?.to_poses()?;
            let report = evaluate(&[FrameEval::new(preds, gts)?], &cfg.eval)?;
            let dir = out_dir(out, &cfg)?;
            fs::write(dir.join("metrics.json"), report.to_json()? + "\n")?;
            fs::write(dir.join("metrics.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Bench {
            lengths,
            bin_size,
            embed,
            heads,
            precision,
            seed,
            out,
        } => {
            let rows = match precision {
                PrecisionArg::F32 => bench_attention::<f32>(&lengths, bin_size, embed, heads, seed)?,
                PrecisionArg::F64 => bench_attention::<f64>(&lengths, bin_size, embed, heads, seed)?,
            };
            let csv = bench_csv(&rows);
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Schema { kind } => {
            let text = match kind {
                SchemaKind::Run => config_schema::<RunConfig>()?,
                SchemaKind::Scene => config_schema::<SceneConfig>()?,
            };
            print!("{text}");
        }
        Command::Check { out } => {
            let report = run_checks()?;
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = out {
                fs::write(p, &text)?;
            }
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
