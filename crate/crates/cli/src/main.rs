use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tcve::io::checkpoint::{load_model_with, save_model};
use tcve::io::{read_video_dir, write_video_dir};
use tcve::metrics::evaluate;
use tcve::pipeline::{edit_video, reconstruct_video, EditRequest};
use tcve::training::train_on_video;
use tcve::{gradcheck, TcveConfig, TcveModel};

#[derive(Parser)]
#[command(name = "tcve", version, about = "Text-driven video editing with a temporal Unet branch")]
struct Cli {
    /// Disable a component: no-tu, no-stu, no-ta or no-3dconv. Repeatable.
    #[arg(long = "ablate", global = true, value_name = "FLAG")]
    ablate: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune on one video and write a checkpoint plus loss trace.
    Train {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        prompt: String,
        /// JSON config; every key optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert the source video and resample it under a new prompt.
    Edit {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source_prompt: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = tcve::diffusion::DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert and resample under the same prompt; writes frames and an error report.
    Reconstruct {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print frame consistency and textual alignment as JSON.
    Eval {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        prompt: String,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One suite only.
        #[arg(long)]
        module: Option<String>,
    },
}

fn apply_ablations(cfg: &mut TcveConfig, flags: &[String]) -> Result<()> {
    for f in flags {
        cfg.train.ablation.apply_flag(f)?;
    }
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<TcveConfig> {
    match path {
        None => Ok(TcveConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(TcveConfig::from_json(&text)?)
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load(ckpt: &Path, ablate: &[String]) -> Result<TcveModel<f32>> {
    let cfg_path = sidecar(ckpt, ".config.json");
    let mut cfg = read_config(Some(&cfg_path))?;
    apply_ablations(&mut cfg, ablate)?;
    load_model_with(ckpt, cfg).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    apply_ablations(&mut TcveConfig::default(), &cli.ablate)?;
    match cli.command {
        Command::Train {
            video,
            prompt,
            config,
            seed,
            out,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            apply_ablations(&mut cfg, &cli.ablate)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let video = read_video_dir(&video)?;
            let outcome = train_on_video::<f32>(&video, &prompt, &cfg)?;
            save_model(&out, &outcome.model)?;
            let trace = json!({
                "seed": cfg.train.seed,
                "losses": outcome.losses,
                "timesteps": outcome.timesteps,
            });
            write_json(&sidecar(&out, ".loss.json"), &trace)?;
            println!(
                "{}",
                json!({
                    "checkpoint": out,
                    "iterations": outcome.losses.len(),
                    "initial_loss": outcome.losses.first(),
                    "final_loss": outcome.losses.last(),
                })
            );
        }
        Command::Edit {
            video,
            ckpt,
            source_prompt,
            prompt,
            guidance,
            steps,
            seed,
            out,
        } => {
            let model = load(&ckpt, &cli.ablate)?;
            let mut req = EditRequest::new(read_video_dir(&video)?, &source_prompt, &prompt);
            req.guidance_scale = guidance;
            req.ddim_steps = steps.unwrap_or(model.config.schedule.ddim_steps);
            req.seed = seed;
            let edited = edit_video(&req, &model)?;
            write_video_dir(&out, &edited)?;
            println!("{}", json!({ "frames": edited.frames(), "out": out }));
        }
        Command::Reconstruct {
            video,
            ckpt,
            prompt,
            steps,
            out,
        } => {
            let model = load(&ckpt, &cli.ablate)?;
            let steps = steps.unwrap_or(model.config.schedule.ddim_steps);
            let (frames, report) = reconstruct_video(&read_video_dir(&video)?, &prompt, &model, steps)?;
            write_video_dir(&out, &frames)?;
            let report = serde_json::to_value(&report)?;
            write_json(&out.join("report.json"), &report)?;
            println!("{report}");
        }
        Command::Eval { video, prompt } => {
            let report = evaluate(&read_video_dir(&video)?, &prompt)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Gradcheck { module } => {
            let results = gradcheck::run_suites(module.as_deref(), 0)?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            for r in &results {
                println!(
                    "{} {:<30} max_rel_err={:.3e} tol={:.0e} coords={} worst={}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.coordinates,
                    r.worst
                );
            }
            if !failed.is_empty() {
                bail!("{} gradient check(s) failed: {}", failed.len(), failed.join(", "));
            }
        }
    }
    Ok(())
}

fn fail(msg: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": msg }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return fail(first, 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(format!("{e:#}"), 1),
    }
}
