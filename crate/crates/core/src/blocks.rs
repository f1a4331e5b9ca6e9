//! Block-level computations: the joint two-stream block used by both the
//! backbone (text, image) and the adapter (instruction, condition), the
//! one-way cross-attention block, and injection of adapter keys/values into
//! the backbone image stream.

use std::sync::Arc;

use crate::attention::{
    ada_ln_zero, encode_qk, feed_forward, gated_residual, head_norm, AdaLnZero, FeedForward, Init, Linear, Modulation,
    MultiHeadSpec, PosEnc, ProjectionSet, QkTreatment, SublayerMod,
};
use crate::embeddings::Position;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Scalar};

/// AdaLN-Zero, attention projections and feed-forward of one stream, named
/// `{prefix}.adaln`, `{prefix}.attn.{q,k,v,out}`, `{prefix}.ffn.{fc1,fc2}`.
#[derive(Debug, Clone, Copy)]
pub struct StreamParams {
    pub adaln: AdaLnZero,
    pub attn: ProjectionSet,
    pub ffn: FeedForward,
}

impl StreamParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        train_attn: bool,
        train_ffn: bool,
        init: &Init,
    ) -> Result<Self> {
        Ok(StreamParams {
            adaln: AdaLnZero::register(store, &format!("{prefix}.adaln"), dim, train_attn, init)?,
            attn: ProjectionSet::register(store, &format!("{prefix}.attn"), dim, train_attn, init)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), dim, train_ffn, init)?,
        })
    }

    pub fn attn_params(&self) -> Vec<ParamId> {
        let mut v = self.adaln.linear.params().to_vec();
        v.extend(self.attn.params());
        v
    }

    pub fn ffn_params(&self) -> Vec<ParamId> {
        self.ffn.params()
    }
}

/// Two streams that attend jointly: (text, image) in the backbone,
/// (instruction, condition) in the adapter.
#[derive(Debug, Clone, Copy)]
pub struct JointBlockParams {
    pub first: StreamParams,
    pub second: StreamParams,
}

/// Adapter block: a joint block over (instruction, condition) plus the
/// backbone-side query projections used for injection.
#[derive(Debug, Clone, Copy)]
pub struct AdapterBlockParams {
    pub joint: JointBlockParams,
    pub cross_q: Linear,
    /// Query projection for the text-query ablation.
    pub cross_q_txt: Option<Linear>,
}

/// A stream entering a block with the positional treatment of its
/// queries and keys.
#[derive(Debug, Clone)]
pub struct StreamIn<T: Scalar> {
    pub x: NodeId,
    pub pos: PosEnc<T>,
}

/// Result of the attention half of a joint block.
#[derive(Debug, Clone)]
pub struct JointAttnOut {
    /// Streams after the gated attention residual.
    pub first: NodeId,
    pub second: NodeId,
    /// Modulated, normalised block inputs (the projections' inputs).
    pub first_in: NodeId,
    pub second_in: NodeId,
    pub mod_first: Modulation,
    pub mod_second: Modulation,
    /// Position-encoded keys and raw values of `[first ‖ second]`.
    pub keys: NodeId,
    pub values: NodeId,
    pub len_first: usize,
}

fn rows<T: Scalar>(g: &Graph<'_, T>, x: NodeId) -> usize {
    g.shape(x)[0]
}

/// Attention half of a joint block: each stream is modulated, projected
/// with its own Q/K/V maps, and attends over the concatenation of both
/// streams' keys and values; the result is output-projected per stream and
/// added back under the stream's attention gate.
pub fn joint_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    first: &StreamIn<T>,
    second: &StreamIn<T>,
    cond: NodeId,
    params: &JointBlockParams,
    spec: &MultiHeadSpec,
    qk_norm: bool,
) -> Result<JointAttnOut> {
    let d1 = g.shape(first.x)[1];
    let d2 = g.shape(second.x)[1];
    if d1 != spec.dim() || d2 != spec.dim() {
        return Err(Error::shape("joint_attention", spec.dim(), format!("{d1}/{d2}")));
    }
    let n1 = rows(g, first.x);
    let n2 = rows(g, second.x);
    let mod_first = params.first.adaln.modulation(g, cond)?;
    let mod_second = params.second.adaln.modulation(g, cond)?;

    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    let mut ins = Vec::new();
    for (s, p, m, n) in [
        (first, &params.first, &mod_first, n1),
        (second, &params.second, &mod_second, n2),
    ] {
        let (h, _) = ada_ln_zero(g, s.x, &m.attn)?;
        ins.push(h);
        if n == 0 {
            continue;
        }
        let q = p.attn.q.forward(g, h)?;
        let k = p.attn.k.forward(g, h)?;
        let v = p.attn.v.forward(g, h)?;
        let treat = QkTreatment {
            q_pos: s.pos.clone(),
            k_pos: s.pos.clone(),
            qk_norm,
        };
        let (q, k) = encode_qk(g, q, k, spec, &treat)?;
        qs.push(q);
        ks.push(k);
        vs.push(v);
    }
    let q = g.concat_rows(&qs)?;
    let keys = g.concat_rows(&ks)?;
    let values = g.concat_rows(&vs)?;
    let a = g.attention(q, keys, values, spec.heads)?;

    let mut outs = Vec::new();
    for (s, p, m, start, n) in [
        (first, &params.first, &mod_first, 0, n1),
        (second, &params.second, &mod_second, n1, n2),
    ] {
        if n == 0 {
            outs.push(s.x);
            continue;
        }
        let part = g.slice_rows(a, start, n)?;
        let o = p.attn.out.forward(g, part)?;
        outs.push(gated_residual(g, s.x, o, Some(m.attn.gate))?);
    }
    Ok(JointAttnOut {
        first: outs[0],
        second: outs[1],
        first_in: ins[0],
        second_in: ins[1],
        mod_first,
        mod_second,
        keys,
        values,
        len_first: n1,
    })
}

/// Feed-forward half: `x + gate ⊙ FF(layer_norm(x)·(1+scale)+shift)`.
pub fn stream_ffn<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, m: &SublayerMod, ffn: &FeedForward) -> Result<NodeId> {
    if rows(g, x) == 0 {
        return Ok(x);
    }
    let (h, gate) = ada_ln_zero(g, x, m)?;
    let f = feed_forward(g, h, ffn)?;
    gated_residual(g, x, f, Some(gate))
}

/// Joint two-stream block, returning the updated (text, image) streams.
pub fn mmdit_block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    txt: &StreamIn<T>,
    img: &StreamIn<T>,
    cond: NodeId,
    params: &JointBlockParams,
    spec: &MultiHeadSpec,
    qk_norm: bool,
) -> Result<(NodeId, NodeId)> {
    let a = joint_attention(g, txt, img, cond, params, spec, qk_norm)?;
    let t = stream_ffn(g, a.first, &a.mod_first.ffn, &params.first.ffn)?;
    let i = stream_ffn(g, a.second, &a.mod_second.ffn, &params.second.ffn)?;
    Ok((t, i))
}

/// Output of a one-way block.
#[derive(Debug, Clone, Copy)]
pub struct DitOut {
    pub img: NodeId,
    /// Keys (position-encoded) and values projected from the static text.
    pub txt_keys: NodeId,
    pub txt_values: NodeId,
    /// Keys and values of the modulated image stream, for packet export.
    pub img_keys: NodeId,
    pub img_values: NodeId,
}

/// One-way block: image queries attend only to keys and values projected
/// from the static text stream, which this block does not update.
pub fn dit_block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    img: &StreamIn<T>,
    txt: &StreamIn<T>,
    cond: NodeId,
    params: &JointBlockParams,
    spec: &MultiHeadSpec,
    qk_norm: bool,
) -> Result<DitOut> {
    let (tp, ip) = (&params.first, &params.second);
    let m = ip.adaln.modulation(g, cond)?;
    let (h, _) = ada_ln_zero(g, img.x, &m.attn)?;
    let q = ip.attn.q.forward(g, h)?;
    let ik = ip.attn.k.forward(g, h)?;
    let iv = ip.attn.v.forward(g, h)?;
    let tk = tp.attn.k.forward(g, txt.x)?;
    let tv = tp.attn.v.forward(g, txt.x)?;
    let treat = QkTreatment {
        q_pos: img.pos.clone(),
        k_pos: txt.pos.clone(),
        qk_norm,
    };
    let (q, tk) = encode_qk(g, q, tk, spec, &treat)?;
    let ik = if qk_norm { head_norm(g, ik, spec)? } else { ik };
    let ik = img.pos.apply(g, ik, spec)?;
    let a = g.attention(q, tk, tv, spec.heads)?;
    let o = ip.attn.out.forward(g, a)?;
    let x = gated_residual(g, img.x, o, Some(m.attn.gate))?;
    let x = stream_ffn(g, x, &m.ffn, &ip.ffn)?;
    Ok(DitOut {
        img: x,
        txt_keys: tk,
        txt_values: tv,
        img_keys: ik,
        img_values: iv,
    })
}

/// Which adapter tokens supply injected keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    Both,
    Instruction,
    Condition,
}

impl KeySource {
    pub const ALL: [KeySource; 3] = [KeySource::Both, KeySource::Instruction, KeySource::Condition];
}

/// Per-layer keys `[K_ist ‖ K_con]` and values `[V_ist ‖ V_con]` exported by
/// the adapter. Keys already carry their positional encoding.
#[derive(Debug, Clone)]
pub struct InjectionPacket {
    pub keys: NodeId,
    pub values: NodeId,
    pub positions: Arc<Vec<Position>>,
    pub len_instruction: usize,
}

impl InjectionPacket {
    /// Builds a packet from concatenated instruction-then-condition keys and values.
    pub fn select<T: Scalar>(
        g: &mut Graph<'_, T>,
        keys: NodeId,
        values: NodeId,
        positions: &[Position],
        len_instruction: usize,
        source: KeySource,
    ) -> Result<Self> {
        let n = rows(g, keys);
        if rows(g, values) != n || positions.len() != n || len_instruction > n {
            return Err(Error::shape(
                "injection_packet",
                n,
                format!("{} values / {} positions", rows(g, values), positions.len()),
            ));
        }
        let (start, len) = match source {
            KeySource::Both => (0, n),
            KeySource::Instruction => (0, len_instruction),
            KeySource::Condition => (len_instruction, n - len_instruction),
        };
        let (keys, values) = if (start, len) == (0, n) {
            (keys, values)
        } else {
            (g.slice_rows(keys, start, len)?, g.slice_rows(values, start, len)?)
        };
        Ok(InjectionPacket {
            keys,
            values,
            positions: Arc::new(positions[start..start + len].to_vec()),
            len_instruction: len_instruction.saturating_sub(start).min(len),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Adapter block: instruction and condition update each other through joint
/// attention, and the same keys and values form the layer's packet.
#[allow(clippy::too_many_arguments)]
pub fn adapter_block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    ist: &StreamIn<T>,
    con: &StreamIn<T>,
    positions: &[Position],
    cond: NodeId,
    params: &AdapterBlockParams,
    spec: &MultiHeadSpec,
    qk_norm: bool,
    source: KeySource,
) -> Result<(NodeId, NodeId, InjectionPacket)> {
    let a = joint_attention(g, ist, con, cond, &params.joint, spec, qk_norm)?;
    let packet = InjectionPacket::select(g, a.keys, a.values, positions, a.len_first, source)?;
    let i = stream_ffn(g, a.first, &a.mod_first.ffn, &params.joint.first.ffn)?;
    let c = stream_ffn(g, a.second, &a.mod_second.ffn, &params.joint.second.ffn)?;
    Ok((i, c, packet))
}

/// Adapter block with one-way interaction: the instruction stream stays
/// fixed and the condition stream cross-attends to it.
#[allow(clippy::too_many_arguments)]
pub fn adapter_block_forward_one_way<T: Scalar>(
    g: &mut Graph<'_, T>,
    ist: &StreamIn<T>,
    con: &StreamIn<T>,
    positions: &[Position],
    cond: NodeId,
    params: &AdapterBlockParams,
    spec: &MultiHeadSpec,
    qk_norm: bool,
    source: KeySource,
) -> Result<(NodeId, NodeId, InjectionPacket)> {
    let d = dit_block_forward(g, con, ist, cond, &params.joint, spec, qk_norm)?;
    let keys = g.concat_rows(&[d.txt_keys, d.img_keys])?;
    let values = g.concat_rows(&[d.txt_values, d.img_values])?;
    let n_ist = rows(g, ist.x);
    let packet = InjectionPacket::select(g, keys, values, positions, n_ist, source)?;
    Ok((ist.x, d.img, packet))
}

/// Cross-attention of `query_src` (projected by `cross_q`) over the packet,
/// added onto `z` under an optional gate.
#[allow(clippy::too_many_arguments)]
pub fn inject_cross_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    z: NodeId,
    query_src: NodeId,
    packet: &InjectionPacket,
    cross_q: &Linear,
    spec: &MultiHeadSpec,
    q_pos: &PosEnc<T>,
    qk_norm: bool,
    gate: Option<NodeId>,
) -> Result<NodeId> {
    if g.shape(packet.keys)[1] != spec.dim() || g.shape(z)[1] != spec.dim() {
        return Err(Error::shape(
            "inject_cross_attention",
            spec.dim(),
            g.shape(packet.keys)[1],
        ));
    }
    if packet.is_empty() || rows(g, z) == 0 {
        return Ok(z);
    }
    let mut q = cross_q.forward(g, query_src)?;
    if qk_norm {
        q = head_norm(g, q, spec)?;
    }
    let q = q_pos.apply(g, q, spec)?;
    let a = g.attention(q, packet.keys, packet.values, spec.heads)?;
    gated_residual(g, z, a, gate)
}

/// Control-style additive injection of the adapter's condition tokens onto
/// a stream of the same length.
pub fn inject_add<T: Scalar>(g: &mut Graph<'_, T>, z: NodeId, con: NodeId, gate: Option<NodeId>) -> Result<NodeId> {
    if g.shape(z) != g.shape(con) {
        return Err(Error::shape(
            "inject_add",
            format!("{:?}", g.shape(z)),
            format!("{:?}", g.shape(con)),
        ));
    }
    gated_residual(g, z, con, gate)
}
