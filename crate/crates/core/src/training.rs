//! Rectified-flow objective, condition dropout, task mixing and AdamW.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::embeddings::Vocab;
use crate::error::{Error, Result};
use crate::model::{ConditionBundle, UnicModel};
use crate::numerics::rng::{derive_seed, derive_seed_str, rng, standard_normal, SeededRng};
use crate::numerics::{GradMode, Gradients, Graph, ParamId, ParamStore, Tensor};
pub use crate::synthdata::MixtureSpec;
use crate::synthdata::{ConditionPair, Family, TaskKind};

/// One training example as model inputs.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub target: Tensor<f32>,
    pub condition: Tensor<f32>,
    pub instruction: Vec<usize>,
    pub prompt: Vec<usize>,
    pub task: TaskKind,
}

impl TrainSample {
    pub fn from_pair(pair: &ConditionPair, vocab: &Vocab) -> Result<Self> {
        let target = pair.target.to_tensor::<f32>();
        let condition = pair.condition.to_tensor::<f32>();
        if target.shape() != condition.shape() {
            return Err(Error::Dataset("target and condition extents differ".into()));
        }
        if pair.instruction.trim().is_empty() {
            return Err(Error::Dataset("empty instruction".into()));
        }
        Ok(TrainSample {
            target,
            condition,
            instruction: vocab.tokenize(&pair.instruction),
            prompt: vocab.tokenize(&pair.prompt),
            task: pair.task,
        })
    }

    pub fn bundle(&self) -> ConditionBundle {
        ConditionBundle::new(self.prompt.clone(), self.instruction.clone(), self.condition.clone())
    }
}

/// `z_t = (1−t)·x + t·ε` and the velocity target `ε − x`.
pub fn rf_interpolate(x: &Tensor<f32>, eps: &Tensor<f32>, t: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "rf_interpolate",
            format!("{:?}", x.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
    }
    let t32 = t as f32;
    let z = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| (1.0 - t32) * a + t32 * e)
        .collect();
    let v = x.data().iter().zip(eps.data()).map(|(&a, &e)| e - a).collect();
    Ok((Tensor::new(x.shape().to_vec(), z)?, Tensor::new(x.shape().to_vec(), v)?))
}

/// Mean squared velocity error for one example, with gradients w.r.t. the
/// model's trainable parameters.
pub fn flow_loss_and_grad(
    model: &UnicModel,
    sample: &TrainSample,
    t: f64,
    eps: &Tensor<f32>,
    bundle: &ConditionBundle,
    mode: GradMode,
) -> Result<(f64, Gradients<f32>)> {
    let (z_t, v_target) = rf_interpolate(&sample.target, eps, t)?;
    let mut g = Graph::new(model.store(), mode);
    let v = model.velocity_graph(&mut g, &z_t, t, bundle, None)?;
    let loss = g.mse(v, &v_target)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "flow_loss" });
    }
    let grads = match mode {
        GradMode::None => Gradients::empty(model.store().len()),
        _ => g.backward(loss)?,
    };
    Ok((value, grads))
}

pub fn flow_loss(
    model: &UnicModel,
    sample: &TrainSample,
    t: f64,
    eps: &Tensor<f32>,
    bundle: &ConditionBundle,
) -> Result<f64> {
    flow_loss_and_grad(model, sample, t, eps, bundle, GradMode::None).map(|r| r.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit-normal timestep.
pub fn sample_timestep(r: &mut SeededRng) -> f64 {
    sigmoid(standard_normal(r))
}

pub fn gaussian_image(r: &mut SeededRng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(r) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normals")
}

/// Condition-dropout probabilities. Events are disjoint bands of one
/// uniform draw, in field order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub p_drop_txt_pixel: f64,
    pub p_drop_txt: f64,
    pub p_drop_ist_con: f64,
    pub p_drop_all: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        DropoutSpec {
            p_drop_txt_pixel: 0.15,
            p_drop_txt: 0.05,
            p_drop_ist_con: 0.05,
            p_drop_all: 0.05,
        }
    }
}

/// Which conditions a training example loses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub drop_txt: bool,
    pub drop_ist_con: bool,
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        let ps = [
            self.p_drop_txt_pixel,
            self.p_drop_txt,
            self.p_drop_ist_con,
            self.p_drop_all,
        ];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p_drop_txt + self.p_drop_ist_con + self.p_drop_all > 1.0
        {
            return Err(Error::InvalidArgument(format!("invalid dropout spec {self:?}")));
        }
        Ok(())
    }

    /// Decision for a uniform draw `u ∈ [0,1)`.
    pub fn decide(&self, family: Family, u: f64) -> DropDecision {
        if family == Family::Pixel {
            return DropDecision {
                drop_txt: u < self.p_drop_txt_pixel,
                drop_ist_con: false,
            };
        }
        let a = self.p_drop_txt;
        let b = a + self.p_drop_ist_con;
        let c = b + self.p_drop_all;
        if u < a {
            DropDecision {
                drop_txt: true,
                drop_ist_con: false,
            }
        } else if u < b {
            DropDecision {
                drop_txt: false,
                drop_ist_con: true,
            }
        } else if u < c {
            DropDecision {
                drop_txt: true,
                drop_ist_con: true,
            }
        } else {
            DropDecision::default()
        }
    }
}

pub fn condition_dropout(
    bundle: ConditionBundle,
    task: TaskKind,
    spec: &DropoutSpec,
    r: &mut SeededRng,
) -> ConditionBundle {
    let d = spec.decide(task.family(), r.random::<f64>());
    bundle.with_drops(d.drop_txt, d.drop_ist_con)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for trainable parameters only.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, store: &ParamStore<f32>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])))
            .collect();
        OptimState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// One decoupled-decay update; parameters without a gradient use zero.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(self.moments.len());
        for (&id, (m, v)) in self.moments.iter_mut() {
            let p = store.get(id);
            let g = grads.get(id);
            let mut next = Vec::with_capacity(m.len());
            for (i, &w) in p.tensor.data().iter().enumerate() {
                let gi = g.map_or(0.0, |g| g[i] as f64);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = w as f64;
                let nw = w - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w);
                if !nw.is_finite() {
                    return Err(Error::NonFinite { op: "adamw_step" });
                }
                next.push(nw as f32);
            }
            updated.push((id, next));
        }
        for (id, data) in updated {
            let p = store.get_mut(id);
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Rescales gradients to at most `max_norm` in global L2 norm.
pub fn clip_grad_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale((max_norm / n) as f32);
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    pub mixture: MixtureSpec,
    pub dropout: DropoutSpec,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 16,
            seed: 0,
            optim: AdamWConfig::default(),
            mixture: MixtureSpec::default(),
            dropout: DropoutSpec::default(),
            log_every: 50,
            checkpoint_every: 1000,
            clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub task: TaskKind,
    pub loss: f64,
}

impl LogEntry {
    pub fn line(&self) -> String {
        format!("{} {} {:.6}", self.step, self.task, self.loss)
    }
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.unic";
pub const METRICS_LOG: &str = "metrics.log";

pub fn step_checkpoint_name(step: usize) -> String {
    format!("checkpoint_step{step:06}.unic")
}

/// Examples grouped by task, in dataset order.
struct TaskIndex {
    by_task: Vec<(TaskKind, Vec<usize>)>,
}

impl TaskIndex {
    fn new(data: &[TrainSample]) -> Self {
        let by_task = TaskKind::ALL
            .iter()
            .map(|&t| {
                (
                    t,
                    data.iter()
                        .enumerate()
                        .filter(|(_, s)| s.task == t)
                        .map(|(i, _)| i)
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        TaskIndex { by_task }
    }

    /// Family by mixture weight renormalised over families present, then a
    /// uniform task within the family.
    fn draw_task(&self, mix: &MixtureSpec, r: &mut SeededRng) -> Result<(TaskKind, &[usize])> {
        let weight = |f: Family| match f {
            Family::Pixel => mix.pixel,
            Family::Subject => mix.subject,
            Family::Style => mix.style,
        };
        let present: Vec<(Family, f64)> = Family::ALL
            .iter()
            .filter(|f| self.by_task.iter().any(|(t, _)| t.family() == **f))
            .map(|&f| (f, weight(f)))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let total: f64 = present.iter().map(|p| p.1).sum();
        if present.is_empty() || total <= 0.0 {
            return Err(Error::Dataset(
                "no examples for any family with positive mixture weight".into(),
            ));
        }
        let mut u = r.random::<f64>() * total;
        let mut family = present[present.len() - 1].0;
        for &(f, w) in &present {
            if u < w {
                family = f;
                break;
            }
            u -= w;
        }
        let tasks: Vec<&(TaskKind, Vec<usize>)> = self.by_task.iter().filter(|(t, _)| t.family() == family).collect();
        let (t, idx) = tasks[r.random_range(0..tasks.len())];
        Ok((*t, idx))
    }
}

/// Optional progress sink, called after each step with (step, mean loss).
pub type Progress<'a> = &'a (dyn Fn(usize, f64) + Sync);

/// Trains the model's currently trainable parameters. Each step draws one
/// task, then `batch` examples of it; per-example randomness comes from
/// `hash(seed, step, index)`, and gradients are summed in index order, so
/// results do not depend on thread count. Checkpoints and the loss log go
/// to `out` when given.
pub fn train_loop(
    model: &mut UnicModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    progress: Option<Progress<'_>>,
) -> Result<Vec<LogEntry>> {
    cfg.dropout.validate()?;
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let index = TaskIndex::new(data);
    let mut opt = OptimState::new(cfg.optim, model.store());
    let mut log = Vec::new();
    let mut log_text = String::new();
    let shape = model.config.image_shape();

    for step in 1..=cfg.steps {
        let step_seed = derive_seed(cfg.seed, step as u64);
        let mut r = rng(derive_seed_str(step_seed, "task"));
        let (task, pool) = index.draw_task(&cfg.mixture, &mut r)?;
        let picks: Vec<usize> = (0..cfg.batch).map(|_| pool[r.random_range(0..pool.len())]).collect();

        let m: &UnicModel = model;
        let results: Vec<Result<(f64, Gradients<f32>)>> = picks
            .par_iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut sr = rng(derive_seed(step_seed, i as u64));
                let s = &data[k];
                let t = sample_timestep(&mut sr);
                let eps = gaussian_image(&mut sr, &shape);
                let bundle = condition_dropout(s.bundle(), s.task, &cfg.dropout, &mut sr);
                flow_loss_and_grad(m, s, t, &eps, &bundle, GradMode::Trainable)
            })
            .collect();
        let mut total = Gradients::empty(model.store().len());
        let mut loss = 0.0;
        for res in results {
            let (l, g) = res.map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step,
                    detail: e.to_string(),
                },
                other => other,
            })?;
            loss += l;
            total.accumulate(&g);
        }
        loss /= cfg.batch as f64;
        total.scale(1.0 / cfg.batch as f32);
        if let Some(c) = cfg.clip {
            clip_grad_norm(&mut total, c);
        }
        opt.step(model.store_mut(), &total).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;

        if let Some(p) = progress {
            p(step, loss);
        }
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let e = LogEntry { step, task, loss };
            writeln!(log_text, "{}", e.line()).unwrap();
            log.push(e);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                checkpoint::save(&dir.join(step_checkpoint_name(step)), model.store())?;
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), model.store())?;
        let p: PathBuf = dir.join(METRICS_LOG);
        fs::write(&p, log_text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(log)
}
