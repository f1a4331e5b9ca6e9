//! Sublayers shared by every block: multi-head attention with optional
//! positional encoding of queries and keys, AdaLayerNormZero modulation and
//! the GELU feed-forward.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed_str, rng, truncated_normal};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RopeAngles, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Weight initialisation: truncated normal for weights, zeros for biases,
/// one independent stream per parameter name.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Init { seed, std }
    }

    pub fn weight<T: Scalar>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        let mut r = rng(derive_seed_str(self.seed, name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(truncated_normal(&mut r, self.std))).collect();
        Tensor::new(shape.to_vec(), data).expect("finite init")
    }
}

/// Affine map `x·W + b`, `W: [in×out]`, stored as `{name}.weight` and `{name}.bias`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        trainable: bool,
        init: &Init,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = init.weight(&wname, &[inp, out]);
        let weight = store.insert(wname, w, trainable)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out]), trainable)?;
        Ok(Linear { weight, bias, inp, out })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Query/key/value/output projections of one stream.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSet {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl ProjectionSet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        trainable: bool,
        init: &Init,
    ) -> Result<Self> {
        let mut mk = |n: &str| Linear::register(store, &format!("{prefix}.{n}"), dim, dim, trainable, init);
        Ok(ProjectionSet {
            q: mk("q")?,
            k: mk("k")?,
            v: mk("v")?,
            out: mk("out")?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.out]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Regression of six modulation rows (attention shift/scale/gate, then
/// feed-forward shift/scale/gate) from the conditioning vector.
#[derive(Debug, Clone, Copy)]
pub struct AdaLnZero {
    pub linear: Linear,
}

impl AdaLnZero {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        trainable: bool,
        init: &Init,
    ) -> Result<Self> {
        Ok(AdaLnZero {
            linear: Linear::register(store, prefix, dim, 6 * dim, trainable, init)?,
        })
    }

    pub fn modulation<T: Scalar>(&self, g: &mut Graph<'_, T>, cond: NodeId) -> Result<Modulation> {
        let dim = self.linear.inp;
        let c = g.silu(cond)?;
        let m = self.linear.forward(g, c)?;
        let mut part = |i: usize| g.slice_cols(m, i * dim, dim);
        Ok(Modulation {
            attn: SublayerMod {
                shift: part(0)?,
                scale: part(1)?,
                gate: part(2)?,
            },
            ffn: SublayerMod {
                shift: part(3)?,
                scale: part(4)?,
                gate: part(5)?,
            },
        })
    }
}

/// Shift, scale and gate rows (each `[1×dim]`) for one sublayer.
#[derive(Debug, Clone, Copy)]
pub struct SublayerMod {
    pub shift: NodeId,
    pub scale: NodeId,
    pub gate: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub attn: SublayerMod,
    pub ffn: SublayerMod,
}

/// `layer_norm(x)·(1+scale)+shift`, returned with the gate that multiplies
/// the sublayer output before the residual addition.
pub fn ada_ln_zero<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, m: &SublayerMod) -> Result<(NodeId, NodeId)> {
    let n = g.layer_norm(x, LN_EPS)?;
    let one_plus = g.affine(m.scale, 1.0, 1.0)?;
    let y = g.mul_row(n, one_plus)?;
    let y = g.add_row(y, m.shift)?;
    Ok((y, m.gate))
}

/// `x + gate ⊙ y`, gate broadcast over rows.
pub fn gated_residual<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, y: NodeId, gate: Option<NodeId>) -> Result<NodeId> {
    let y = match gate {
        Some(gate) => g.mul_row(y, gate)?,
        None => y,
    };
    g.add(x, y)
}

/// Two-layer GELU MLP with hidden width `4·dim`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        trainable: bool,
        init: &Init,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::register(store, &format!("{prefix}.fc1"), dim, 4 * dim, trainable, init)?,
            fc2: Linear::register(store, &format!("{prefix}.fc2"), 4 * dim, dim, trainable, init)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1, self.fc2].iter().flat_map(Linear::params).collect()
    }
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, ff: &FeedForward) -> Result<NodeId> {
    let h = ff.fc1.forward(g, x)?;
    let h = g.gelu(h)?;
    ff.fc2.forward(g, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadSpec {
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadSpec {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide dim {dim}")));
        }
        let head_dim = dim / heads;
        if !head_dim.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "head dim {head_dim} is not a multiple of 4"
            )));
        }
        Ok(MultiHeadSpec { heads, head_dim })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Positional treatment applied to a query or key matrix before scoring.
#[derive(Debug, Clone)]
pub enum PosEnc<T: Scalar> {
    None,
    /// Per-token rotation of every head.
    Rope(Arc<RopeAngles<T>>),
    /// `[seq×dim]` table added to the projections (one embedding per head, tiled).
    Absolute(Arc<Tensor<T>>),
}

impl<T: Scalar> PosEnc<T> {
    pub fn apply(&self, g: &mut Graph<'_, T>, x: NodeId, spec: &MultiHeadSpec) -> Result<NodeId> {
        match self {
            PosEnc::None => Ok(x),
            PosEnc::Rope(angles) => g.rope(x, spec.heads, Arc::clone(angles)),
            PosEnc::Absolute(table) => {
                let c = g.constant((**table).clone())?;
                g.add(x, c)
            }
        }
    }
}

/// Builds the tiled absolute table for `PosEnc::Absolute` from a per-head
/// embedding `[seq×head_dim]`.
pub fn tile_heads<T: Scalar>(per_head: &[f64], seq: usize, spec: &MultiHeadSpec) -> Result<Arc<Tensor<T>>> {
    if per_head.len() != seq * spec.head_dim {
        return Err(Error::shape("tile_heads", seq * spec.head_dim, per_head.len()));
    }
    let mut data = Vec::with_capacity(seq * spec.dim());
    for row in per_head.chunks(spec.head_dim.max(1)) {
        for _ in 0..spec.heads {
            data.extend(row.iter().map(|&v| T::lit(v)));
        }
    }
    Ok(Arc::new(Tensor::new(vec![seq, spec.dim()], data)?))
}

/// Parameter-free per-head layer norm of a `[seq×dim]` query or key matrix.
pub fn head_norm<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, spec: &MultiHeadSpec) -> Result<NodeId> {
    let s = g.shape(x)[0];
    let r = g.reshape(x, &[s * spec.heads, spec.head_dim])?;
    let n = g.layer_norm(r, LN_EPS)?;
    g.reshape(n, &[s, spec.dim()])
}

/// Options applied to projected queries and keys before scoring.
#[derive(Debug, Clone)]
pub struct QkTreatment<T: Scalar> {
    pub q_pos: PosEnc<T>,
    pub k_pos: PosEnc<T>,
    pub qk_norm: bool,
}

impl<T: Scalar> QkTreatment<T> {
    pub fn plain() -> Self {
        QkTreatment {
            q_pos: PosEnc::None,
            k_pos: PosEnc::None,
            qk_norm: false,
        }
    }
}

/// Per head `softmax(q̃ k̃ᵀ/√|D|) v` over already-projected inputs, heads
/// concatenated; `q̃`, `k̃` are the optionally normalised and position-encoded
/// projections.
pub fn attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    spec: &MultiHeadSpec,
    qk: &QkTreatment<T>,
) -> Result<NodeId> {
    let (q, k) = encode_qk(g, q, k, spec, qk)?;
    g.attention(q, k, v, spec.heads)
}

pub fn encode_qk<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: NodeId,
    k: NodeId,
    spec: &MultiHeadSpec,
    qk: &QkTreatment<T>,
) -> Result<(NodeId, NodeId)> {
    let (mut q, mut k) = (q, k);
    if qk.qk_norm {
        q = head_norm(g, q, spec)?;
        k = head_norm(g, k, spec)?;
    }
    Ok((qk.q_pos.apply(g, q, spec)?, qk.k_pos.apply(g, k, spec)?))
}

/// Full multi-head attention: project `xq` to queries and `xkv` to keys and
/// values with one projection set, attend, then output-project.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    xq: NodeId,
    xkv: NodeId,
    proj: &ProjectionSet,
    spec: &MultiHeadSpec,
    qk: &QkTreatment<T>,
) -> Result<NodeId> {
    let q = proj.q.forward(g, xq)?;
    let k = proj.k.forward(g, xkv)?;
    let v = proj.v.forward(g, xkv)?;
    let a = attend(g, q, k, v, spec, qk)?;
    proj.out.forward(g, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{grid_positions, RotaryTable};
    use crate::numerics::{kernels, GradMode};

    fn store_with_proj(dim: usize, seed: u64) -> (ParamStore<f64>, ProjectionSet) {
        let mut s = ParamStore::new();
        let p = ProjectionSet::register(&mut s, "p", dim, true, &Init::new(seed, 0.5)).unwrap();
        (s, p)
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        Init::new(seed, 1.0).weight("x", shape)
    }

    #[test]
    fn single_key_returns_value_row() {
        let (s, p) = store_with_proj(4, 1);
        let spec = MultiHeadSpec::new(4, 1).unwrap();
        let mut g = Graph::new(&s, GradMode::None);
        let xq = g.constant(rand_tensor(&[3, 4], 2)).unwrap();
        let xkv = g.constant(rand_tensor(&[1, 4], 3)).unwrap();
        let q = p.q.forward(&mut g, xq).unwrap();
        let k = p.k.forward(&mut g, xkv).unwrap();
        let v = p.v.forward(&mut g, xkv).unwrap();
        let a = attend(&mut g, q, k, v, &spec, &QkTreatment::plain()).unwrap();
        for row in g.value(a).data().chunks(4) {
            for (x, y) in row.iter().zip(g.value(v).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_values_give_output_bias() {
        let (mut s, p) = store_with_proj(8, 4);
        for id in p.v.params() {
            s.get_mut(id).tensor = Tensor::zeros(s.tensor(id).shape());
        }
        s.get_mut(p.out.bias).tensor = rand_tensor(&[8], 9);
        let spec = MultiHeadSpec::new(8, 2).unwrap();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.constant(rand_tensor(&[5, 8], 5)).unwrap();
        let y = multi_head_attention(&mut g, x, x, &p, &spec, &QkTreatment::plain()).unwrap();
        let bias = s.tensor(p.out.bias).data();
        for row in g.value(y).data().chunks(8) {
            for (a, b) in row.iter().zip(bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_invariance_with_rope() {
        let (s, p) = store_with_proj(8, 6);
        let spec = MultiHeadSpec::new(8, 2).unwrap();
        let table = RotaryTable::new(4, 4, 4).unwrap();
        let qpos = grid_positions(2, 2);
        let kpos = grid_positions(2, 3);
        let xkv = rand_tensor(&[6, 8], 8);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let pk: Vec<_> = perm.iter().map(|&i| kpos[i]).collect();
        let mut pdata = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(&xkv.data()[i * 8..(i + 1) * 8]);
        }
        let run = |kv: Tensor<f64>, kp: &[crate::embeddings::Position]| {
            let mut g = Graph::new(&s, GradMode::None);
            let xq = g.constant(rand_tensor(&[4, 8], 7)).unwrap();
            let xkv = g.constant(kv).unwrap();
            let qk = QkTreatment {
                q_pos: PosEnc::Rope(table.angles(&qpos).unwrap()),
                k_pos: PosEnc::Rope(table.angles(kp).unwrap()),
                qk_norm: true,
            };
            let y = multi_head_attention(&mut g, xq, xkv, &p, &spec, &qk).unwrap();
            g.value(y).clone()
        };
        let a = run(xkv.clone(), &kpos);
        let b = run(Tensor::new(vec![6, 8], pdata).unwrap(), &pk);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn neutral_and_zero_gate_modulation() {
        let mut s = ParamStore::<f64>::new();
        let ada = AdaLnZero::register(&mut s, "ada", 4, true, &Init::new(1, 0.3)).unwrap();
        s.get_mut(ada.linear.weight).tensor = Tensor::zeros(&[4, 24]);
        let mut bias = vec![0.0; 24];
        bias[8..12].fill(1.0);
        s.get_mut(ada.linear.bias).tensor = Tensor::new(vec![24], bias).unwrap();
        let x = rand_tensor(&[3, 4], 11);
        let mut g = Graph::new(&s, GradMode::None);
        let xn = g.constant(x.clone()).unwrap();
        let c = g.constant(rand_tensor(&[1, 4], 12)).unwrap();
        let m = ada.modulation(&mut g, c).unwrap();
        let (y, gate) = ada_ln_zero(&mut g, xn, &m.attn).unwrap();
        assert!(g.value(y).max_abs_diff(&x.layer_norm(LN_EPS).unwrap()) < 1e-12);
        assert!(g.value(gate).data().iter().all(|&v| v == 1.0));
        let r = gated_residual(&mut g, xn, y, Some(m.ffn.gate)).unwrap();
        assert_eq!(g.value(r).data(), x.data());
    }

    #[test]
    fn modulation_matches_closed_form() {
        let mut s = ParamStore::<f64>::new();
        let ada = AdaLnZero::register(&mut s, "ada", 4, true, &Init::new(3, 0.4)).unwrap();
        s.get_mut(ada.linear.bias).tensor = rand_tensor(&[24], 13);
        let x = rand_tensor(&[2, 4], 14);
        let cond = rand_tensor(&[1, 4], 15);
        let mut g = Graph::new(&s, GradMode::None);
        let xn = g.constant(x.clone()).unwrap();
        let c = g.constant(cond.clone()).unwrap();
        let m = ada.modulation(&mut g, c).unwrap();
        let (y, _) = ada_ln_zero(&mut g, xn, &m.attn).unwrap();

        let w = s.tensor(ada.linear.weight);
        let b = s.tensor(ada.linear.bias).data();
        let mods: Vec<f64> = (0..24)
            .map(|j| {
                b[j] + (0..4)
                    .map(|i| kernels::silu(cond.data()[i]) * w.get(&[i, j]))
                    .sum::<f64>()
            })
            .collect();
        for r in 0..2 {
            let row = &x.data()[r * 4..r * 4 + 4];
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let ln = (row[j] - mu) / (var + LN_EPS).sqrt();
                let want = ln * (1.0 + mods[4 + j]) + mods[j];
                assert!((g.value(y).get(&[r, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feed_forward_examples() {
        let mut s = ParamStore::<f64>::new();
        let ff = FeedForward::register(&mut s, "ff", 1, true, &Init::new(0, 0.0)).unwrap();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.constant(Tensor::from_f64(&[2, 1], &[2.0, -1.0]).unwrap()).unwrap();
        let y = feed_forward(&mut g, x, &ff).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut s = ParamStore::<f64>::new();
        let fc1 = Linear::register(&mut s, "a", 1, 1, true, &Init::new(0, 0.0)).unwrap();
        let fc2 = Linear::register(&mut s, "b", 1, 1, true, &Init::new(0, 0.0)).unwrap();
        s.get_mut(fc1.weight).tensor = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        s.get_mut(fc2.weight).tensor = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap()).unwrap();
        let y = feed_forward(&mut g, x, &FeedForward { fc1, fc2 }).unwrap();
        assert!((g.value(y).data()[0] - 1.9546).abs() < 1e-4);
    }

    #[test]
    fn head_spec_validation() {
        assert!(MultiHeadSpec::new(64, 4).is_ok());
        assert!(MultiHeadSpec::new(8, 4).is_err());
        assert!(MultiHeadSpec::new(10, 3).is_err());
    }
}
