use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use unic_cli::{ablate, evaluate, gen_data, init_threads, load_trained, sample_image, train, EvalOptions};
use unic_core::config::RunConfig;
use unic_core::metrics::report_text;
use unic_core::synthdata::{MixtureSpec, RgbImage, TaskKind};

#[derive(Parser)]
#[command(name = "unic", version, about = "Image-instruction adapter for a toy MM-DiT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, PPM images, vocabulary).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one task instead of drawing from the mixture.
        #[arg(long)]
        task: Option<TaskKind>,
        /// Family weights pixel,subject,style.
        #[arg(long, default_value = "0.4,0.5,0.1")]
        mixture: String,
    },
    /// Train a model; writes checkpoint.unic, metrics.log, config.txt and vocab.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate one image from a condition.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Defaults to the task's first instruction template.
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        condition: PathBuf,
        #[arg(long, default_value = "edge")]
        task: TaskKind,
        #[arg(long)]
        sc: Option<f64>,
        #[arg(long)]
        st: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample every example of a dataset and write report.txt / report.tsv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sc: Option<f64>,
        #[arg(long)]
        st: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate every variant of one ablation axis.
    Ablate {
        #[arg(long, value_parser = ["keys", "queries", "pe", "crossq", "interaction", "injection"])]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn parse_mixture(s: &str) -> Result<MixtureSpec> {
    let w: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .context("mixture weights")?;
    if w.len() != 3 {
        bail!("mixture needs three weights, got {}", w.len());
    }
    Ok(MixtureSpec::new(w[0], w[1], w[2])?)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            task,
            mixture,
        } => {
            let ds = gen_data(&out, n, seed, &parse_mixture(&mixture)?, task)?;
            println!("wrote {} examples to {}", ds.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let t = train(&cfg, &data, &out, true)?;
            let last = t
                .log
                .last()
                .map(|e| format!(", final loss {:.6}", e.loss))
                .unwrap_or_default();
            let verb = if t.reused { "reused identical run of" } else { "trained" };
            println!(
                "{verb} {} steps{last}; checkpoint in {}",
                cfg.train.steps,
                out.display()
            );
        }
        Command::Sample {
            ckpt,
            config,
            prompt,
            instruction,
            condition,
            task,
            sc,
            st,
            steps,
            seed,
            out,
        } => {
            let (model, vocab, cfg) = load_trained(&ckpt, config.as_deref())?;
            let mut spec = cfg.family_guidance(task.family(), seed);
            spec.s_c = sc.unwrap_or(spec.s_c);
            spec.s_t = st.unwrap_or(spec.s_t);
            spec.steps = steps.unwrap_or(spec.steps);
            spec.validate()?;
            let cond = RgbImage::read_ppm(&condition)?;
            let instruction = instruction.unwrap_or_else(|| task.templates()[0].to_string());
            let img = sample_image(&model, &vocab, &prompt, &instruction, &cond, &spec)?;
            img.write_ppm(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            ckpt,
            config,
            data,
            out,
            sc,
            st,
            steps,
            seed,
            limit,
        } => {
            let (model, vocab, cfg) = load_trained(&ckpt, config.as_deref())?;
            let opt = EvalOptions {
                s_c: sc,
                s_t: st,
                steps,
                seed,
                limit,
            };
            let rows = evaluate(&model, &vocab, &cfg, &data, &out, &opt)?;
            print!("{}", report_text(&rows));
        }
        Command::Ablate {
            axis,
            config,
            out,
            seed,
            limit,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.out.clone())
                .context("no output directory (--out or config `out`)")?;
            let opt = EvalOptions {
                seed,
                limit,
                ..Default::default()
            };
            let (_, table) = ablate(&cfg, &axis, &out, &opt, true)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
