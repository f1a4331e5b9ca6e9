//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ArchOptions, ModelConfig, Stage, DEFAULT_INIT_STD};
use crate::sampling::{GuidanceSpec, DEFAULT_STEPS};
use crate::synthdata::{Family, MixtureSpec};
use crate::training::{AdamWConfig, DropoutSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub arch: ArchOptions,
    pub stage: Stage,
    pub train: TrainConfig,
    /// Parameters loaded before training (non-strict), if any.
    pub init_from: Option<PathBuf>,
    /// Copy backbone blocks into the adapter after loading `init_from`.
    pub adapter_from_base: bool,
    /// Base-stage steps `ablate` runs when `init_from` is unset.
    pub base_steps: usize,
    /// Guidance per family: (s_c, s_t) for pixel, subject, style.
    pub guidance: [(f64, f64); 3],
    pub sample_steps: usize,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::desk(0);
        model.init_std = DEFAULT_INIT_STD;
        RunConfig {
            model,
            arch: ArchOptions::default(),
            stage: Stage::Adapter,
            train: TrainConfig::default(),
            init_from: None,
            adapter_from_base: true,
            base_steps: 3000,
            guidance: [(1.3, 3.0), (1.2, 7.5), (3.0, 6.0)],
            sample_steps: DEFAULT_STEPS,
            data: None,
            eval_data: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn family_guidance(&self, family: Family, seed: u64) -> GuidanceSpec {
        let i = Family::ALL.iter().position(|&f| f == family).unwrap();
        let (s_c, s_t) = self.guidance[i];
        GuidanceSpec {
            s_c,
            s_t,
            steps: self.sample_steps,
            seed,
        }
    }

    /// Applies one assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut self.arch;
        let t = &mut self.train;
        match key {
            "depth" => m.depth = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "image_size" => m.image_size = parse(key, v)?,
            "init_std" => m.init_std = parse(key, v)?,
            "keys" => a.keys = parse(key, v)?,
            "queries" => a.queries = parse(key, v)?,
            "pe" => a.pe = parse(key, v)?,
            "cross_q" => a.cross_q = parse_bool(key, v)?,
            "interaction" => a.interaction = parse(key, v)?,
            "injection" => a.injection = parse(key, v)?,
            "gate_injection" => a.gate_injection = parse_bool(key, v)?,
            "query_from" => a.query_from = parse(key, v)?,
            "qk_norm" => a.qk_norm = parse_bool(key, v)?,
            "backbone_rope" => a.backbone_rope = parse_bool(key, v)?,
            "cache_adapter" => a.cache_adapter = parse_bool(key, v)?,
            "stage" => self.stage = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "lr" => t.optim.lr = parse(key, v)?,
            "weight_decay" => t.optim.weight_decay = parse(key, v)?,
            "beta1" => t.optim.beta1 = parse(key, v)?,
            "beta2" => t.optim.beta2 = parse(key, v)?,
            "adam_eps" => t.optim.eps = parse(key, v)?,
            "clip" => {
                let c: f64 = parse(key, v)?;
                t.clip = (c > 0.0).then_some(c);
            }
            "log_every" => t.log_every = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "mix_pixel" => t.mixture.pixel = parse(key, v)?,
            "mix_subject" => t.mixture.subject = parse(key, v)?,
            "mix_style" => t.mixture.style = parse(key, v)?,
            "p_drop_txt_pixel" => t.dropout.p_drop_txt_pixel = parse(key, v)?,
            "p_drop_txt" => t.dropout.p_drop_txt = parse(key, v)?,
            "p_drop_ist_con" => t.dropout.p_drop_ist_con = parse(key, v)?,
            "p_drop_all" => t.dropout.p_drop_all = parse(key, v)?,
            "init_from" => self.init_from = opt_path(v),
            "adapter_from_base" => self.adapter_from_base = parse_bool(key, v)?,
            "base_steps" => self.base_steps = parse(key, v)?,
            "sc_pixel" => self.guidance[0].0 = parse(key, v)?,
            "st_pixel" => self.guidance[0].1 = parse(key, v)?,
            "sc_subject" => self.guidance[1].0 = parse(key, v)?,
            "st_subject" => self.guidance[1].1 = parse(key, v)?,
            "sc_style" => self.guidance[2].0 = parse(key, v)?,
            "st_style" => self.guidance[2].1 = parse(key, v)?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "data" => self.data = opt_path(v),
            "eval_data" => self.eval_data = opt_path(v),
            "out" => self.out = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("config: ")
                ))
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        MixtureSpec::new(
            self.train.mixture.pixel,
            self.train.mixture.subject,
            self.train.mixture.style,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        self.train
            .dropout
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.train.batch == 0 || self.sample_steps == 0 {
            return Err(Error::Config("batch and sample_steps must be positive".into()));
        }
        let mut probe = self.model.clone();
        probe.vocab_size = probe.vocab_size.max(3);
        probe.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key with its current value, in a form `parse_str` accepts.
    pub fn to_text(&self) -> String {
        let (m, a, t) = (&self.model, &self.arch, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("depth", m.depth.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("patch", m.patch.to_string());
        kv("image_size", m.image_size.to_string());
        kv("init_std", m.init_std.to_string());
        kv("keys", a.keys.to_string());
        kv("queries", a.queries.to_string());
        kv("pe", a.pe.to_string());
        kv("cross_q", a.cross_q.to_string());
        kv("interaction", a.interaction.to_string());
        kv("injection", a.injection.to_string());
        kv("gate_injection", a.gate_injection.to_string());
        kv("query_from", a.query_from.to_string());
        kv("qk_norm", a.qk_norm.to_string());
        kv("backbone_rope", a.backbone_rope.to_string());
        kv("cache_adapter", a.cache_adapter.to_string());
        kv("stage", self.stage.to_string());
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("seed", t.seed.to_string());
        kv("lr", t.optim.lr.to_string());
        kv("weight_decay", t.optim.weight_decay.to_string());
        kv("beta1", t.optim.beta1.to_string());
        kv("beta2", t.optim.beta2.to_string());
        kv("adam_eps", t.optim.eps.to_string());
        kv("clip", t.clip.unwrap_or(0.0).to_string());
        kv("log_every", t.log_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("mix_pixel", t.mixture.pixel.to_string());
        kv("mix_subject", t.mixture.subject.to_string());
        kv("mix_style", t.mixture.style.to_string());
        kv("p_drop_txt_pixel", t.dropout.p_drop_txt_pixel.to_string());
        kv("p_drop_txt", t.dropout.p_drop_txt.to_string());
        kv("p_drop_ist_con", t.dropout.p_drop_ist_con.to_string());
        kv("p_drop_all", t.dropout.p_drop_all.to_string());
        kv("init_from", path_str(&self.init_from));
        kv("adapter_from_base", self.adapter_from_base.to_string());
        kv("base_steps", self.base_steps.to_string());
        for (i, f) in ["pixel", "subject", "style"].iter().enumerate() {
            kv(&format!("sc_{f}"), self.guidance[i].0.to_string());
            kv(&format!("st_{f}"), self.guidance[i].1.to_string());
        }
        kv("sample_steps", self.sample_steps.to_string());
        kv("data", path_str(&self.data));
        kv("eval_data", path_str(&self.eval_data));
        kv("out", path_str(&self.out));
        s
    }

    pub fn optim(&self) -> AdamWConfig {
        self.train.optim
    }

    pub fn dropout(&self) -> DropoutSpec {
        self.train.dropout
    }
}
