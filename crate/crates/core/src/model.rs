//! The full system: a two-stream text-to-image backbone whose blocks receive
//! per-layer keys/values from a parallel instruction/condition adapter.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::attention::{ada_ln_zero, tile_heads, Init, Linear, MultiHeadSpec, PosEnc, LN_EPS};
use crate::blocks::{
    adapter_block_forward, adapter_block_forward_one_way, inject_add, inject_cross_attention, joint_attention,
    stream_ffn, AdapterBlockParams, InjectionPacket, JointBlockParams, KeySource, StreamIn, StreamParams,
};
use crate::embeddings::{
    absolute_2d_embedding, timestep_features, PatchGrid, Position, RotaryTable, Vocab, MAX_TEXT_LEN, NULL_ID, PAD_ID,
};
use crate::error::{Error, Result};
use crate::numerics::{GradMode, Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// 32×32 RGB, patch 2, 4+4 blocks of width 64 with 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            patch: 2,
            image_size: 32,
            channels: 3,
            vocab_size,
            max_text_len: MAX_TEXT_LEN,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        MultiHeadSpec::new(self.dim, self.heads)?;
        PatchGrid::new(self.channels, self.image_size, self.image_size, self.patch)?;
        if self.depth == 0 || self.vocab_size < 3 || self.max_text_len == 0 {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    pub fn spec(&self) -> MultiHeadSpec {
        MultiHeadSpec::new(self.dim, self.heads).expect("validated config")
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.channels, self.image_size, self.image_size, self.patch).expect("validated config")
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} value {s:?}; expected one of {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Which stream supplies injection queries.
    QuerySource { Image => "image", Text => "text" }
);
named_enum!(
    /// Positional treatment inside adapter attention and injection.
    PeMode { None => "none", Absolute => "absolute", Rope => "rope" }
);
named_enum!(
    /// Instruction/condition interaction inside the adapter.
    Interaction { Mmdit => "mmdit", DitStyle => "dit-style" }
);
named_enum!(
    /// How adapter features reach the backbone.
    Injection { Cross => "cross", Add => "add", None => "none" }
);
named_enum!(
    /// Backbone image state the injection query is read from.
    QueryFrom { Pre => "pre", Post => "post" }
);
named_enum!(
    Stage { Base => "base", Adapter => "adapter" }
);

impl FromStr for KeySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(KeySource::Both),
            "instruction" => Ok(KeySource::Instruction),
            "condition" => Ok(KeySource::Condition),
            _ => Err(Error::Config(format!(
                "unknown key source {s:?}; expected one of both, instruction, condition"
            ))),
        }
    }
}

impl fmt::Display for KeySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeySource::Both => "both",
            KeySource::Instruction => "instruction",
            KeySource::Condition => "condition",
        })
    }
}

/// Architecture toggles. Defaults are the full method: image queries over
/// instruction and condition keys, rotary positions, a dedicated injection
/// query projection, joint interaction and cross-attention injection.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    pub keys: KeySource,
    pub queries: QuerySource,
    pub pe: PeMode,
    /// `true`: new per-layer query projection; `false`: reuse the backbone's.
    pub cross_q: bool,
    pub interaction: Interaction,
    pub injection: Injection,
    /// Multiply the injected residual by the block's attention gate.
    pub gate_injection: bool,
    pub query_from: QueryFrom,
    pub qk_norm: bool,
    /// Rotary positions inside backbone joint attention instead of the learned table.
    pub backbone_rope: bool,
    /// Condition the adapter on the instruction only, so its outputs can be
    /// computed once per sample instead of once per step.
    pub cache_adapter: bool,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions {
            keys: KeySource::Both,
            queries: QuerySource::Image,
            pe: PeMode::Rope,
            cross_q: true,
            interaction: Interaction::Mmdit,
            injection: Injection::Cross,
            gate_injection: true,
            query_from: QueryFrom::Pre,
            qk_norm: false,
            backbone_rope: false,
            cache_adapter: false,
        }
    }
}

/// Conditioning inputs for one forward pass. Dropped streams are replaced
/// by the `<null>` token or a zero image.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub txt: Vec<usize>,
    pub ist: Vec<usize>,
    pub con: Tensor<f32>,
    pub drop_txt: bool,
    pub drop_ist_con: bool,
}

impl ConditionBundle {
    pub fn new(txt: Vec<usize>, ist: Vec<usize>, con: Tensor<f32>) -> Self {
        ConditionBundle {
            txt,
            ist,
            con,
            drop_txt: false,
            drop_ist_con: false,
        }
    }

    pub fn with_drops(mut self, drop_txt: bool, drop_ist_con: bool) -> Self {
        self.drop_txt = drop_txt;
        self.drop_ist_con = drop_ist_con;
        self
    }

    /// Same bundle with all three conditions replaced by nulls explicitly.
    pub fn explicit_nulls(&self) -> Self {
        ConditionBundle {
            txt: Vocab::null_ids(),
            ist: Vocab::null_ids(),
            con: Tensor::zeros(self.con.shape()),
            drop_txt: false,
            drop_ist_con: false,
        }
    }

    fn text_ids(&self) -> Vec<usize> {
        if self.drop_txt {
            vec![NULL_ID]
        } else {
            content_ids(&self.txt)
        }
    }

    fn instruction_ids(&self) -> Vec<usize> {
        if self.drop_ist_con {
            vec![NULL_ID]
        } else {
            content_ids(&self.ist)
        }
    }
}

/// Ids with padding removed; an all-padding sequence becomes `<null>`.
fn content_ids(ids: &[usize]) -> Vec<usize> {
    let v: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD_ID).collect();
    if v.is_empty() {
        vec![NULL_ID]
    } else {
        v
    }
}

#[derive(Debug, Clone)]
struct BackboneLayout {
    token_embed: ParamId,
    patch_embed: Linear,
    pos_embed: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<JointBlockParams>,
    final_linear: Linear,
}

#[derive(Debug, Clone)]
struct AdapterLayout {
    patch_embed: Linear,
    blocks: Vec<AdapterBlockParams>,
}

/// Per-layer adapter outputs.
#[derive(Debug, Clone)]
pub struct AdapterOut {
    pub packet: InjectionPacket,
    /// Condition stream after the layer, for additive injection.
    pub con: NodeId,
}

/// Keys, values, key positions, instruction length and condition hidden
/// states of one adapter layer.
type CachedLayer<T> = (Tensor<T>, Tensor<T>, Arc<Vec<Position>>, usize, Tensor<T>);

/// Adapter outputs detached from any graph, reusable across forward passes
/// when `cache_adapter` is set.
#[derive(Debug, Clone)]
pub struct AdapterCache<T: Scalar> {
    layers: Vec<CachedLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct UnicModel {
    pub config: ModelConfig,
    pub arch: ArchOptions,
    store: ParamStore<f32>,
    stage: Stage,
    backbone: BackboneLayout,
    adapter: AdapterLayout,
    rope: RotaryTable,
    patch_index: Arc<Vec<usize>>,
    unpatch_index: Arc<Vec<usize>>,
}

impl UnicModel {
    pub fn new(config: ModelConfig, arch: ArchOptions, seed: u64) -> Result<Self> {
        let init = Init::new(seed, config.init_std);
        Self::with_init(config, arch, &init)
    }

    pub fn with_init(config: ModelConfig, arch: ArchOptions, init: &Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::<f32>::new();
        let (d, grid) = (config.dim, config.grid());
        let s = &mut store;

        let token_embed = s.insert(
            "backbone.token_embed.weight",
            init.weight("backbone.token_embed.weight", &[config.vocab_size, d]),
            false,
        )?;
        let patch_embed = Linear::register(s, "backbone.patch_embed", grid.patch_dim(), d, false, init)?;
        let pos_embed = s.insert(
            "backbone.pos_embed.weight",
            init.weight("backbone.pos_embed.weight", &[grid.tokens(), d]),
            false,
        )?;
        let time_fc1 = Linear::register(s, "backbone.time_embed.fc1", d, d, false, init)?;
        let time_fc2 = Linear::register(s, "backbone.time_embed.fc2", d, d, false, init)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(JointBlockParams {
                first: StreamParams::register(s, &format!("backbone.block{i}.txt"), d, false, false, init)?,
                second: StreamParams::register(s, &format!("backbone.block{i}.img"), d, false, false, init)?,
            });
        }
        let final_linear = Linear::register(s, "backbone.final", d, grid.patch_dim(), false, init)?;

        let a_patch = Linear::register(s, "adapter.patch_embed", grid.patch_dim(), d, false, init)?;
        let mut a_blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("adapter.block{i}");
            let joint = JointBlockParams {
                first: StreamParams::register(s, &format!("{p}.ist"), d, false, false, init)?,
                second: StreamParams::register(s, &format!("{p}.con"), d, false, false, init)?,
            };
            let cross_q = Linear::register(s, &format!("{p}.cross_q"), d, d, false, init)?;
            let cross_q_txt = if arch.queries == QuerySource::Text {
                Some(Linear::register(s, &format!("{p}.cross_q_txt"), d, d, false, init)?)
            } else {
                None
            };
            a_blocks.push(AdapterBlockParams {
                joint,
                cross_q,
                cross_q_txt,
            });
        }

        let rope = RotaryTable::new(config.spec().head_dim, grid.rows(), grid.cols())?;
        let mut model = UnicModel {
            patch_index: Arc::new(grid.patchify_index()),
            unpatch_index: Arc::new(grid.unpatchify_index()),
            config,
            arch,
            store,
            stage: Stage::Adapter,
            backbone: BackboneLayout {
                token_embed,
                patch_embed,
                pos_embed,
                time_fc1,
                time_fc2,
                blocks,
                final_linear,
            },
            adapter: AdapterLayout {
                patch_embed: a_patch,
                blocks: a_blocks,
            },
            rope,
        };
        model.set_stage(Stage::Adapter);
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Base stage trains the whole backbone with the adapter unused; adapter
    /// stage freezes the backbone and every adapter feed-forward.
    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        for (_, p) in self.store.iter_mut() {
            p.trainable = match stage {
                Stage::Base => is_backbone(&p.name),
                Stage::Adapter => is_adapter_trainable(&p.name),
            };
        }
    }

    /// Names of parameters the current stage updates.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Digest over parameters the adapter stage must never change.
    pub fn frozen_checksum(&self) -> u64 {
        self.store.checksum_where(|p| !is_adapter_trainable(&p.name))
    }

    /// Copies each backbone block into the matching adapter block:
    /// text → instruction, image → condition, image query → injection query.
    pub fn init_adapter_from_base(&mut self) -> Result<()> {
        if self.adapter.blocks.len() != self.backbone.blocks.len() {
            return Err(Error::InvalidArgument("adapter and backbone depth differ".into()));
        }
        let mut pairs: Vec<(ParamId, ParamId)> = Vec::new();
        let lin = |a: &Linear, b: &Linear| [(a.weight, b.weight), (a.bias, b.bias)];
        pairs.extend(lin(&self.backbone.patch_embed, &self.adapter.patch_embed));
        for (b, a) in self.backbone.blocks.iter().zip(&self.adapter.blocks) {
            for (src, dst) in [(&b.first, &a.joint.first), (&b.second, &a.joint.second)] {
                let s: Vec<ParamId> = src.attn_params().into_iter().chain(src.ffn_params()).collect();
                let t: Vec<ParamId> = dst.attn_params().into_iter().chain(dst.ffn_params()).collect();
                pairs.extend(s.into_iter().zip(t));
            }
            pairs.extend(lin(&b.second.attn.q, &a.cross_q));
            if let Some(cq) = &a.cross_q_txt {
                pairs.extend(lin(&b.first.attn.q, cq));
            }
        }
        for (src, dst) in pairs {
            let t = self.store.tensor(src).clone();
            self.store.get_mut(dst).tensor = t;
        }
        Ok(())
    }

    /// Trainable and total scalar counts for the current stage.
    pub fn parameter_counts(&self) -> (usize, usize) {
        (self.store.num_trainable_scalars(), self.store.num_scalars())
    }

    fn injection_active(&self) -> bool {
        self.stage == Stage::Adapter && self.arch.injection != Injection::None
    }

    fn adapter_pos<T: Scalar>(&self, positions: &[Position]) -> Result<PosEnc<T>> {
        let spec = self.config.spec();
        Ok(match self.arch.pe {
            PeMode::None => PosEnc::None,
            PeMode::Rope => PosEnc::Rope(self.rope.angles(positions)?),
            PeMode::Absolute => PosEnc::Absolute(tile_heads(
                &absolute_2d_embedding(positions, spec.head_dim)?,
                positions.len(),
                &spec,
            )?),
        })
    }

    fn embed_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<NodeId> {
        let d = self.config.dim;
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(self.backbone.token_embed);
        let index: Vec<usize> = ids.iter().flat_map(|&i| (0..d).map(move |c| i * d + c)).collect();
        g.gather(table, Arc::new(index), &[ids.len(), d])
    }

    fn patch_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, img: NodeId, proj: &Linear) -> Result<NodeId> {
        let grid = self.config.grid();
        let p = g.gather(img, Arc::clone(&self.patch_index), &[grid.tokens(), grid.patch_dim()])?;
        proj.forward(g, p)
    }

    fn check_image<T: Scalar>(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        if t.shape() != self.config.image_shape() {
            return Err(Error::shape(
                "forward_velocity",
                format!("{what} {:?}", self.config.image_shape()),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(())
    }

    /// `[1×dim]` timestep embedding.
    pub fn time_embedding<T: Scalar>(&self, g: &mut Graph<'_, T>, t: f64) -> Result<NodeId> {
        let f = timestep_features::<T>(t, self.config.dim)?.reshape(&[1, self.config.dim])?;
        let f = g.constant(f)?;
        let h = self.backbone.time_fc1.forward(g, f)?;
        let h = g.silu(h)?;
        self.backbone.time_fc2.forward(g, h)
    }

    /// Runs the adapter stack and returns one output per layer.
    pub fn adapter_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        temb: NodeId,
        bundle: &ConditionBundle,
    ) -> Result<Vec<AdapterOut>> {
        let spec = self.config.spec();
        let grid = self.config.grid();
        let ist_ids = bundle.instruction_ids();
        let mut ist = self.embed_tokens(g, &ist_ids)?;
        let con_img = if bundle.drop_ist_con {
            Tensor::<T>::zeros(&self.config.image_shape())
        } else {
            self.check_image(&bundle.con, "condition")?;
            bundle.con.cast::<T>()
        };
        let con_node = g.constant(con_img)?;
        let mut con = self.patch_tokens(g, con_node, &self.adapter.patch_embed)?;

        let pooled = g.mean_rows(ist)?;
        let cond = if self.arch.cache_adapter {
            pooled
        } else {
            g.add(temb, pooled)?
        };

        let mut positions = vec![Position::ORIGIN; ist_ids.len()];
        positions.extend(grid.positions());
        let ist_pos = self.adapter_pos::<T>(&positions[..ist_ids.len()])?;
        let con_pos = self.adapter_pos::<T>(&positions[ist_ids.len()..])?;

        let mut outs = Vec::with_capacity(self.adapter.blocks.len());
        for block in &self.adapter.blocks {
            let si = StreamIn {
                x: ist,
                pos: ist_pos.clone(),
            };
            let sc = StreamIn {
                x: con,
                pos: con_pos.clone(),
            };
            let f = match self.arch.interaction {
                Interaction::Mmdit => adapter_block_forward,
                Interaction::DitStyle => adapter_block_forward_one_way,
            };
            let (i2, c2, packet) = f(
                g,
                &si,
                &sc,
                &positions,
                cond,
                block,
                &spec,
                self.arch.qk_norm,
                self.arch.keys,
            )?;
            ist = i2;
            con = c2;
            outs.push(AdapterOut { packet, con });
        }
        Ok(outs)
    }

    /// Evaluates the adapter once and detaches its outputs.
    pub fn adapter_cache<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        t: f64,
        bundle: &ConditionBundle,
    ) -> Result<AdapterCache<T>> {
        let mut g = Graph::new(store, GradMode::None);
        let temb = self.time_embedding(&mut g, t)?;
        let outs = self.adapter_forward(&mut g, temb, bundle)?;
        Ok(AdapterCache {
            layers: outs
                .iter()
                .map(|o| {
                    (
                        g.value(o.packet.keys).clone(),
                        g.value(o.packet.values).clone(),
                        Arc::clone(&o.packet.positions),
                        o.packet.len_instruction,
                        g.value(o.con).clone(),
                    )
                })
                .collect(),
        })
    }

    fn restore_cache<T: Scalar>(&self, g: &mut Graph<'_, T>, cache: &AdapterCache<T>) -> Result<Vec<AdapterOut>> {
        cache
            .layers
            .iter()
            .map(|(k, v, pos, n_ist, con)| {
                Ok(AdapterOut {
                    packet: InjectionPacket {
                        keys: g.constant(k.clone())?,
                        values: g.constant(v.clone())?,
                        positions: Arc::clone(pos),
                        len_instruction: *n_ist,
                    },
                    con: g.constant(con.clone())?,
                })
            })
            .collect()
    }

    /// Velocity prediction `[C×H×W]` as a graph node. `cache` substitutes
    /// precomputed adapter outputs for the adapter stack.
    pub fn velocity_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        z_t: &Tensor<T>,
        t: f64,
        bundle: &ConditionBundle,
        cache: Option<&AdapterCache<T>>,
    ) -> Result<NodeId> {
        self.check_image(z_t, "latent")?;
        let spec = self.config.spec();
        let grid = self.config.grid();
        let temb = self.time_embedding(g, t)?;

        let txt_ids = bundle.text_ids();
        let mut txt = self.embed_tokens(g, &txt_ids)?;
        let pooled = g.mean_rows(txt)?;
        let cond = g.add(temb, pooled)?;

        let z = g.constant(z_t.clone())?;
        let img = self.patch_tokens(g, z, &self.backbone.patch_embed)?;
        let pos = g.param(self.backbone.pos_embed);
        let mut img = g.add(img, pos)?;

        let img_positions = grid.positions();
        let txt_positions = vec![Position::ORIGIN; txt_ids.len()];
        let (txt_pe, img_pe) = if self.arch.backbone_rope {
            (
                PosEnc::Rope(self.rope.angles::<T>(&txt_positions)?),
                PosEnc::Rope(self.rope.angles::<T>(&img_positions)?),
            )
        } else {
            (PosEnc::None, PosEnc::None)
        };

        let adapter = if !self.injection_active() {
            None
        } else if let Some(c) = cache {
            Some(self.restore_cache(g, c)?)
        } else {
            Some(self.adapter_forward(g, temb, bundle)?)
        };
        let (img_q_pe, txt_q_pe) = if adapter.is_some() && self.arch.injection == Injection::Cross {
            (
                self.adapter_pos::<T>(&img_positions)?,
                self.adapter_pos::<T>(&txt_positions)?,
            )
        } else {
            (PosEnc::None, PosEnc::None)
        };

        for (i, block) in self.backbone.blocks.iter().enumerate() {
            let ts = StreamIn {
                x: txt,
                pos: txt_pe.clone(),
            };
            let is = StreamIn {
                x: img,
                pos: img_pe.clone(),
            };
            let a = joint_attention(g, &ts, &is, cond, block, &spec, self.arch.qk_norm)?;
            let (mut t_mid, mut i_mid) = (a.first, a.second);
            if let Some(outs) = &adapter {
                let out = &outs[i];
                let ab = &self.adapter.blocks[i];
                match self.arch.injection {
                    Injection::Cross => {
                        let image_query = self.arch.queries == QuerySource::Image;
                        let (target, pre_in, m) = if image_query {
                            (i_mid, a.second_in, &a.mod_second)
                        } else {
                            (t_mid, a.first_in, &a.mod_first)
                        };
                        let src = match self.arch.query_from {
                            QueryFrom::Pre => pre_in,
                            QueryFrom::Post => ada_ln_zero(g, target, &m.attn)?.0,
                        };
                        let lq = match (image_query, self.arch.cross_q) {
                            (true, true) => ab.cross_q,
                            (true, false) => block.second.attn.q,
                            (false, true) => ab.cross_q_txt.expect("registered for text queries"),
                            (false, false) => block.first.attn.q,
                        };
                        let q_pe = if image_query { &img_q_pe } else { &txt_q_pe };
                        let gate = self.arch.gate_injection.then_some(m.attn.gate);
                        let r = inject_cross_attention(
                            g,
                            target,
                            src,
                            &out.packet,
                            &lq,
                            &spec,
                            q_pe,
                            self.arch.qk_norm,
                            gate,
                        )?;
                        if image_query {
                            i_mid = r;
                        } else {
                            t_mid = r;
                        }
                    }
                    Injection::Add => {
                        let gate = self.arch.gate_injection.then_some(a.mod_second.attn.gate);
                        i_mid = inject_add(g, i_mid, out.con, gate)?;
                    }
                    Injection::None => {}
                }
            }
            txt = stream_ffn(g, t_mid, &a.mod_first.ffn, &block.first.ffn)?;
            img = stream_ffn(g, i_mid, &a.mod_second.ffn, &block.second.ffn)?;
        }

        let h = g.layer_norm(img, LN_EPS)?;
        let out = self.backbone.final_linear.forward(g, h)?;
        g.gather(out, Arc::clone(&self.unpatch_index), &self.config.image_shape())
    }

    /// Velocity prediction with the model's own weights.
    pub fn forward_velocity(&self, z_t: &Tensor<f32>, t: f64, bundle: &ConditionBundle) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let v = self.velocity_graph(&mut g, z_t, t, bundle, None)?;
        Ok(g.value(v).clone())
    }

    /// Same as `forward_velocity` with precomputed adapter outputs.
    pub fn forward_velocity_cached(
        &self,
        z_t: &Tensor<f32>,
        t: f64,
        bundle: &ConditionBundle,
        cache: &AdapterCache<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let v = self.velocity_graph(&mut g, z_t, t, bundle, Some(cache))?;
        Ok(g.value(v).clone())
    }
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with("backbone.")
}

/// Adapter attention, modulation, projections and injection queries; not
/// the backbone and not adapter feed-forwards.
pub fn is_adapter_trainable(name: &str) -> bool {
    name.starts_with("adapter.") && !name.contains(".ffn.")
}
