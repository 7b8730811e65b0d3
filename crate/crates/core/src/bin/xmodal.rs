use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use xmodal::augment::{ColorPrompter, Palette, PatchSpec, Raster};
use xmodal::datagen::{
    background_texture, generate, load_dataset, save_dataset, tokenize, Task, VocabularyConfig, BACKGROUND_THRESHOLD,
};
use xmodal::eval::{build_router, evaluate, submission_csv};
use xmodal::harness::{load_checkpoint, save_checkpoint, train, TrainConfig};
use xmodal::losses::{gradcheck, LossKind};
use xmodal::router::route_text;
use xmodal::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Synthetic two-branch text-to-image retrieval lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        task: Task,
        /// JSON generator config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one branch and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
        tolerance: f64,
    },
    /// Route, rank and score the test captions of both datasets.
    Eval {
        #[arg(long)]
        ckpt_ped: PathBuf,
        #[arg(long)]
        ckpt_veh: PathBuf,
        /// Directory holding `ped/` and `veh/` datasets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        submission: PathBuf,
    },
    /// Show which branch a caption goes to.
    Route {
        #[arg(long)]
        text: String,
        /// Directory holding `ped/` and `veh/` datasets; default datasets are generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect a vehicle color and paint the prompt patch.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Only let pixels that differ from the synthetic scene background vote.
        #[arg(long)]
        scene: bool,
    },
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            task,
            config,
            out,
            seed,
        } => {
            let cfg = config.as_deref().map(read_json).transpose()?;
            let dataset = generate(task, cfg, seed)?;
            let hash = save_dataset(&dataset, &out)?;
            print_json(&json!({"task": task, "out": out, "dataset_hash": hash}));
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (dataset, _) = load_dataset(&data)?;
            let outcome = train(&cfg, &dataset)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            write_file(&out.join("run.json"), &serde_json::to_vec_pretty(&outcome.record)?)?;
            print_json(&json!({
                "out": out,
                "epochs": outcome.record.epochs.len(),
                "first_total": outcome.record.first_total(),
                "last_total": outcome.record.last_total(),
            }));
        }
        Command::Gradcheck { loss, seeds, tolerance } => {
            let kinds: Vec<LossKind> = if loss == "all" {
                LossKind::ALL.to_vec()
            } else {
                vec![loss.parse()?]
            };
            let reports = kinds
                .into_iter()
                .map(|k| gradcheck(k, seeds, tolerance))
                .collect::<Result<Vec<_>>>()?;
            let passed = reports.iter().all(|r| r.passed);
            print_json(&json!({"passed": passed, "losses": reports}));
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval {
            ckpt_ped,
            ckpt_veh,
            data,
            out,
            submission,
        } => {
            let pc = load_checkpoint(&ckpt_ped)?;
            let vc = load_checkpoint(&ckpt_veh)?;
            let (pd, _) = load_dataset(&data.join("ped"))?;
            let (vd, _) = load_dataset(&data.join("veh"))?;
            let ev = evaluate(&pc, &vc, &pd, &vd)?;
            write_file(&out, &serde_json::to_vec_pretty(&ev.report)?)?;
            write_file(&submission, submission_csv(&ev.submission).as_bytes())?;
            print_json(&json!({
                "queries": ev.report.queries,
                "recall@1": ev.report.overall.recall_at_1,
                "recall@10": ev.report.overall.recall_at_10,
                "mAP@10": ev.report.overall.map_at_10,
                "routing_accuracy": ev.report.routing_accuracy,
                "warnings": ev.report.warnings,
            }));
        }
        Command::Route { text, data } => {
            let (pd, vd) = match data {
                Some(dir) => (load_dataset(&dir.join("ped"))?.0, load_dataset(&dir.join("veh"))?.0),
                None => (generate(Task::Pedestrian, None, 0)?, generate(Task::Vehicle, None, 0)?),
            };
            let (p, v) = match (pd.as_pedestrian(), vd.as_vehicle()) {
                (Some(p), Some(v)) => (p, v),
                _ => return Err(Error::Malformed("expected ped/ and veh/ datasets".into())),
            };
            let (rules, clf) = build_router(p, v)?;
            let decision = route_text(&tokenize(&text), &rules, &clf)?;
            print_json(&serde_json::to_value(decision)?);
        }
        Command::Augment {
            input,
            out,
            palette,
            scene,
        } => {
            let palette = match palette {
                Some(p) => Palette::load(&p)?,
                None => VocabularyConfig::default().palette,
            };
            let image = Raster::read_ppm(&input)?;
            let prompter = ColorPrompter {
                palette,
                background: scene.then(|| background_texture(image.width(), image.height())),
                threshold: BACKGROUND_THRESHOLD,
                patch: PatchSpec::for_image(image.width().min(image.height())),
            };
            let (entry, patched) = prompter.prompt(&image)?;
            patched.write_ppm(&out)?;
            print_json(&json!({"color": entry.name, "rgb": entry.rgb}));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
