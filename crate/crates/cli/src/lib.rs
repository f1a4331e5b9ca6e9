//! Commands behind the `unic` binary: data generation, training, sampling,
//! evaluation and ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use rayon::prelude::*;

use unic_core::blocks::KeySource;
use unic_core::checkpoint;
use unic_core::config::RunConfig;
use unic_core::embeddings::Vocab;
use unic_core::metrics::{self, ReportRow, Score};
use unic_core::model::{ConditionBundle, Injection, Interaction, PeMode, QuerySource, Stage, UnicModel};
use unic_core::numerics::rng::{derive_seed, derive_seed_str, rng};
use unic_core::sampling::{euler_sample, GuidanceSpec};
use unic_core::synthdata::{self, Dataset, MixtureSpec, RgbImage, TaskKind};
use unic_core::training::{self, LogEntry, TrainSample, FINAL_CHECKPOINT};

pub const CONFIG_NAME: &str = "config.txt";

/// Caps the global worker pool at `UNIC_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UNIC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("UNIC_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("UNIC_THREADS must be at least 1");
        }
        // A pool already built by an earlier call in this process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn gen_data(out: &Path, n: usize, seed: u64, mixture: &MixtureSpec, task: Option<TaskKind>) -> Result<Dataset> {
    Ok(synthdata::generate_dataset(out, n, mixture, task, seed)?)
}

pub fn load_samples(data: &Path) -> Result<(Vec<TrainSample>, Vocab)> {
    let ds = Dataset::load(data)?;
    let vocab = ds.vocab()?;
    let samples = ds
        .pairs()?
        .iter()
        .map(|p| TrainSample::from_pair(p, &vocab))
        .collect::<unic_core::Result<Vec<_>>>()?;
    Ok((samples, vocab))
}

fn build_model(cfg: &RunConfig, vocab: &Vocab) -> Result<UnicModel> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    let mut m = UnicModel::new(mc, cfg.arch.clone(), cfg.train.seed)?;
    m.set_stage(cfg.stage);
    Ok(m)
}

pub struct TrainOutcome {
    pub model: UnicModel,
    pub vocab: Vocab,
    pub log: Vec<LogEntry>,
    /// True when an identical earlier run was found and reused.
    pub reused: bool,
}

/// Trains per `cfg` on `data` into `out`. When `out` already holds a final
/// checkpoint written under the identical configuration, training is
/// skipped and that checkpoint is loaded; training is deterministic, so the
/// result is the same.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.data = Some(data.to_path_buf());
    cfg.out = Some(out.to_path_buf());
    let text = cfg.to_text();
    let (samples, vocab) = load_samples(data).with_context(|| format!("loading {}", data.display()))?;
    let mut model = build_model(&cfg, &vocab)?;

    let ckpt = out.join(FINAL_CHECKPOINT);
    if fs::read_to_string(out.join(CONFIG_NAME)).ok().as_deref() == Some(text.as_str()) && ckpt.exists() {
        checkpoint::load(&ckpt, model.store_mut(), true)?;
        let log = read_log(&out.join(training::METRICS_LOG)).unwrap_or_default();
        return Ok(TrainOutcome {
            model,
            vocab,
            log,
            reused: true,
        });
    }

    if let Some(init) = &cfg.init_from {
        checkpoint::load(init, model.store_mut(), false).with_context(|| format!("loading {}", init.display()))?;
        if cfg.stage == Stage::Adapter && cfg.adapter_from_base {
            model.init_adapter_from_base()?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let _ = fs::remove_file(out.join(CONFIG_NAME));
    vocab.save(&out.join(synthdata::VOCAB_NAME))?;
    let every = cfg.train.log_every.max(1);
    let progress = move |step: usize, loss: f64| {
        if verbose && step.is_multiple_of(every) {
            eprintln!("step {step} loss {loss:.6}");
        }
    };
    let log = training::train_loop(&mut model, &samples, &cfg.train, Some(out), Some(&progress))?;
    fs::write(out.join(CONFIG_NAME), &text)?;
    Ok(TrainOutcome {
        model,
        vocab,
        log,
        reused: false,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                bail!("bad log line {l:?}");
            }
            Ok(LogEntry {
                step: f[0].parse()?,
                task: f[1].parse()?,
                loss: f[2].parse()?,
            })
        })
        .collect()
}

/// Model, vocabulary and configuration from a training output directory.
pub fn load_trained(ckpt: &Path, config: Option<&Path>) -> Result<(UnicModel, Vocab, RunConfig)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONFIG_NAME));
    let cfg = RunConfig::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let vocab = Vocab::load(&dir.join(synthdata::VOCAB_NAME))?;
    let mut model = build_model(&cfg, &vocab)?;
    checkpoint::load(ckpt, model.store_mut(), true).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((model, vocab, cfg))
}

pub fn sample_image(
    model: &UnicModel,
    vocab: &Vocab,
    prompt: &str,
    instruction: &str,
    condition: &RgbImage,
    spec: &GuidanceSpec,
) -> Result<RgbImage> {
    let bundle = ConditionBundle::new(
        vocab.tokenize(prompt),
        vocab.tokenize(instruction),
        condition.to_tensor(),
    );
    let z = euler_sample(model, &bundle, spec)?;
    Ok(RgbImage::from_tensor(&z)?)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub s_c: Option<f64>,
    pub s_t: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// Samples every example, writes `images/{id}_gen.ppm` and the report, and
/// returns the summary rows. Each task also gets a shuffled-baseline row:
/// the same generations scored against conditions permuted by a seeded
/// random cycle, so no example keeps its own condition.
pub fn evaluate(
    model: &UnicModel,
    vocab: &Vocab,
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    opt: &EvalOptions,
) -> Result<Vec<ReportRow>> {
    let ds = Dataset::load(data)?;
    let n = opt.limit.map_or(ds.len(), |l| l.min(ds.len()));
    let pairs: Vec<_> = (0..n).map(|i| ds.pair(i)).collect::<unic_core::Result<_>>()?;
    let images = out.join("images");
    fs::create_dir_all(&images)?;

    let generated: Vec<RgbImage> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut spec = cfg.family_guidance(p.task.family(), derive_seed(opt.seed, i as u64));
            spec.s_c = opt.s_c.unwrap_or(spec.s_c);
            spec.s_t = opt.s_t.unwrap_or(spec.s_t);
            spec.steps = opt.steps.unwrap_or(spec.steps);
            let img = sample_image(model, vocab, &p.prompt, &p.instruction, &p.condition, &spec)?;
            img.write_ppm(&images.join(format!("{}_gen.ppm", ds.records[i].id)))?;
            Ok(img)
        })
        .collect::<Result<_>>()?;

    let mut scores: Vec<Score> = Vec::new();
    for (g, p) in generated.iter().zip(&pairs) {
        scores.extend(metrics::proxy_scores(g, p)?);
    }
    for task in TaskKind::ALL {
        let idx: Vec<usize> = (0..n).filter(|&i| pairs[i].task == task).collect();
        if idx.len() < 2 {
            continue;
        }
        let perm = random_cycle(idx.len(), derive_seed_str(opt.seed, task.name()));
        let name = metrics::shuffled_metric(task);
        for (a, &b) in perm.iter().enumerate() {
            let (gi, ci) = (idx[a], idx[b]);
            let value = metrics::score_against(task, &generated[gi], &pairs[ci].condition, &pairs[ci].target)?;
            scores.push(Score {
                task,
                metric: name,
                value,
            });
        }
    }
    let rows = metrics::summarize(&scores);
    metrics::write_report(out, &rows)?;
    Ok(rows)
}

/// Uniform random cyclic permutation (Sattolo), fixed-point free for n ≥ 2.
pub fn random_cycle(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        let j = r.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Variants an ablation axis compares, as config assignments.
pub fn axis_variants(axis: &str) -> Result<Vec<(String, String, String)>> {
    let v = |key: &str, vals: Vec<String>| {
        vals.into_iter()
            .map(|x| (format!("{axis}-{x}"), key.to_string(), x))
            .collect()
    };
    Ok(match axis {
        "keys" => v("keys", KeySource::ALL.iter().map(ToString::to_string).collect()),
        "queries" => v("queries", QuerySource::ALL.iter().map(ToString::to_string).collect()),
        "pe" => v("pe", PeMode::ALL.iter().map(ToString::to_string).collect()),
        "crossq" => v("cross_q", vec!["true".into(), "false".into()]),
        "interaction" => v(
            "interaction",
            Interaction::ALL.iter().map(ToString::to_string).collect(),
        ),
        "injection" => v(
            "injection",
            vec![Injection::Cross.to_string(), Injection::Add.to_string()],
        ),
        _ => bail!("unknown axis {axis:?}; expected keys, queries, pe, crossq, interaction or injection"),
    })
}

/// Base checkpoint for adapter runs: `init_from` if set, otherwise a
/// base-stage run of `base_steps` under `out/base`.
pub fn ensure_base(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> Result<PathBuf> {
    if let Some(p) = &cfg.init_from {
        return Ok(p.clone());
    }
    let mut base = cfg.clone();
    base.stage = Stage::Base;
    base.train.steps = cfg.base_steps;
    base.init_from = None;
    let dir = out.join("base");
    train(&base, data, &dir, verbose)?;
    Ok(dir.join(FINAL_CHECKPOINT))
}

pub struct VariantResult {
    pub name: String,
    pub rows: Vec<ReportRow>,
}

/// Adapter-stage run of one variant from the shared base, then evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    cfg: &RunConfig,
    name: &str,
    base: &Path,
    data: &Path,
    eval: &Path,
    out: &Path,
    opt: &EvalOptions,
    verbose: bool,
) -> Result<VariantResult> {
    let mut c = cfg.clone();
    c.stage = Stage::Adapter;
    c.init_from = Some(base.to_path_buf());
    let dir = out.join(name);
    let t = train(&c, data, &dir, verbose)?;
    let eval_dir = dir.join("eval");
    let rows = evaluate_cached(&t, &c, eval, &eval_dir, opt)?;
    Ok(VariantResult {
        name: name.to_string(),
        rows,
    })
}

fn reuse_report(dir: &Path, t: &TrainOutcome, opt: &EvalOptions) -> Option<Vec<ReportRow>> {
    let stamp = format!("{:x} {opt:?}", t.model.store().checksum());
    let stamp_path = dir.join("stamp.txt");
    if fs::read_to_string(&stamp_path).ok()? == stamp {
        return metrics::parse_report_tsv(&fs::read_to_string(dir.join(metrics::REPORT_TSV)).ok()?).ok();
    }
    None
}

fn stamp_report(dir: &Path, model: &UnicModel, opt: &EvalOptions) -> Result<()> {
    fs::write(dir.join("stamp.txt"), format!("{:x} {opt:?}", model.store().checksum()))?;
    Ok(())
}

/// Trains and evaluates every variant of `axis` with shared seeds; returns
/// the comparison table and writes it to `out/ablation_{axis}.tsv`.
pub fn ablate(
    cfg: &RunConfig,
    axis: &str,
    out: &Path,
    opt: &EvalOptions,
    verbose: bool,
) -> Result<(Vec<VariantResult>, String)> {
    let variants = axis_variants(axis)?;
    let data = cfg.data.clone().ok_or_else(|| anyhow!("config has no data path"))?;
    let eval = cfg
        .eval_data
        .clone()
        .ok_or_else(|| anyhow!("config has no eval_data path"))?;
    let base = ensure_base(cfg, &data, out, verbose)?;
    let mut results = Vec::new();
    for (name, key, value) in variants {
        let mut c = cfg.clone();
        c.set(&key, &value)?;
        if verbose {
            eprintln!("variant {name}");
        }
        let r = run_variant(&c, &name, &base, &data, &eval, out, opt, verbose)?;
        results.push(r);
    }
    let table = comparison_table(&results);
    fs::write(out.join(format!("ablation_{axis}.tsv")), &table)?;
    Ok((results, table))
}

pub fn comparison_table(results: &[VariantResult]) -> String {
    let mut s = String::from("variant\ttask\tmetric\tn\tmean\tstd\n");
    for r in results {
        for row in &r.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
                r.name, row.task, row.metric, row.n, row.mean, row.std
            ));
        }
    }
    s
}

/// Evaluation with a reuse stamp so identical re-runs are skipped.
pub fn evaluate_cached(
    t: &TrainOutcome,
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    opt: &EvalOptions,
) -> Result<Vec<ReportRow>> {
    if let Some(r) = reuse_report(out, t, opt) {
        return Ok(r);
    }
    let rows = evaluate(&t.model, &t.vocab, cfg, data, out, opt)?;
    stamp_report(out, &t.model, opt)?;
    Ok(rows)
}

pub fn metric_mean(rows: &[ReportRow], metric: &str) -> Option<f64> {
    rows.iter().find(|r| r.metric == metric).map(|r| r.mean)
}
