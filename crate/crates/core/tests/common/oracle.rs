//! Loop-level reference evaluation of the block equations over nested
//! vectors. Shares nothing with the graph engine except parameter names.
#![allow(dead_code)]

use unic_core::embeddings::Position;
use unic_core::numerics::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-6;

pub fn mat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub struct Lin {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Lin {
    pub fn load(store: &ParamStore<f64>, name: &str) -> Lin {
        let w = store.by_name(&format!("{name}.weight")).expect(name);
        let b = store.by_name(&format!("{name}.bias")).expect(name);
        Lin {
            w: mat(w.tensor.data(), w.tensor.shape()[1]),
            b: b.tensor.data().to_vec(),
        }
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += xi * self.w[i][j];
            }
        }
        y
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        x.iter().map(|r| self.apply_row(r)).collect()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter().map(|v| (v - mu) / (var + EPS).sqrt()).collect()
}

/// Six modulation vectors: shift/scale/gate for attention then feed-forward.
pub fn modulation(store: &ParamStore<f64>, prefix: &str, cond: &[f64]) -> Vec<Vec<f64>> {
    let lin = Lin::load(store, &format!("{prefix}.adaln"));
    let c: Vec<f64> = cond.iter().map(|&v| silu(v)).collect();
    let m = lin.apply_row(&c);
    let d = cond.len();
    (0..6).map(|i| m[i * d..(i + 1) * d].to_vec()).collect()
}

pub fn modulate(x: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            layer_norm_row(r)
                .iter()
                .enumerate()
                .map(|(j, v)| v * (1.0 + scale[j]) + shift[j])
                .collect()
        })
        .collect()
}

/// Block-diagonal rotation matrix for one head at one position.
pub fn rotation_matrix(head_dim: usize, pos: Position) -> Mat {
    let quarter = head_dim / 4;
    let mut r = vec![vec![0.0; head_dim]; head_dim];
    for pair in 0..head_dim / 2 {
        let (coord, i) = if pair < quarter {
            (pos.h, pair)
        } else {
            (pos.w, pair - quarter)
        };
        let theta = 10000f64.powf(-(i as f64) / head_dim as f64);
        let a = coord as f64 * theta;
        let (c, s) = (a.cos(), a.sin());
        r[2 * pair][2 * pair] = c;
        r[2 * pair][2 * pair + 1] = -s;
        r[2 * pair + 1][2 * pair] = s;
        r[2 * pair + 1][2 * pair + 1] = c;
    }
    r
}

/// Applies the per-position rotation to every head of every row.
pub fn rotate(x: &Mat, positions: &[Position], heads: usize) -> Mat {
    let d = x[0].len();
    let hd = d / heads;
    x.iter()
        .zip(positions)
        .map(|(row, &p)| {
            let r = rotation_matrix(hd, p);
            let mut out = vec![0.0; d];
            for h in 0..heads {
                for a in 0..hd {
                    out[h * hd + a] = (0..hd).map(|b| r[a][b] * row[h * hd + b]).sum();
                }
            }
            out
        })
        .collect()
}

/// Multi-head scaled dot-product attention by explicit loops.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| (0..hd).map(|a| qi[h * hd + a] * kj[h * hd + a]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for a in 0..hd {
                    out[i][h * hd + a] += e[j] / z * vj[h * hd + a];
                }
            }
        }
    }
    out
}

fn gated_add(x: &Mat, y: &Mat, gate: &[f64]) -> Mat {
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).zip(gate).map(|((a, b), g)| a + g * b).collect())
        .collect()
}

fn ffn_sublayer(store: &ParamStore<f64>, prefix: &str, x: &Mat, m: &[Vec<f64>]) -> Mat {
    let h = modulate(x, &m[3], &m[4]);
    let fc1 = Lin::load(store, &format!("{prefix}.ffn.fc1"));
    let fc2 = Lin::load(store, &format!("{prefix}.ffn.fc2"));
    let f: Mat = fc1
        .apply(&h)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    gated_add(x, &fc2.apply(&f), &m[5])
}

pub struct JointOut {
    pub first: Mat,
    pub second: Mat,
    pub keys: Mat,
    pub values: Mat,
}

/// Two streams attending over the concatenation of both streams' keys and
/// values; positions given means rotary encoding of queries and keys.
#[allow(clippy::too_many_arguments)]
pub fn joint_block(
    store: &ParamStore<f64>,
    first_prefix: &str,
    second_prefix: &str,
    x1: &Mat,
    x2: &Mat,
    pos: Option<(&[Position], &[Position])>,
    cond: &[f64],
    heads: usize,
) -> JointOut {
    let m1 = modulation(store, first_prefix, cond);
    let m2 = modulation(store, second_prefix, cond);
    let proj = |prefix: &str, x: &Mat, m: &[Vec<f64>], p: Option<&[Position]>| {
        let h = modulate(x, &m[0], &m[1]);
        let mut q = Lin::load(store, &format!("{prefix}.attn.q")).apply(&h);
        let mut k = Lin::load(store, &format!("{prefix}.attn.k")).apply(&h);
        let v = Lin::load(store, &format!("{prefix}.attn.v")).apply(&h);
        if let Some(p) = p {
            q = rotate(&q, p, heads);
            k = rotate(&k, p, heads);
        }
        (q, k, v)
    };
    let (q1, k1, v1) = proj(first_prefix, x1, &m1, pos.map(|p| p.0));
    let (q2, k2, v2) = proj(second_prefix, x2, &m2, pos.map(|p| p.1));
    let keys: Mat = k1.iter().chain(&k2).cloned().collect();
    let values: Mat = v1.iter().chain(&v2).cloned().collect();
    let a1 = attention(&q1, &keys, &values, heads);
    let a2 = attention(&q2, &keys, &values, heads);
    let o1 = Lin::load(store, &format!("{first_prefix}.attn.out")).apply(&a1);
    let o2 = Lin::load(store, &format!("{second_prefix}.attn.out")).apply(&a2);
    let y1 = gated_add(x1, &o1, &m1[2]);
    let y2 = gated_add(x2, &o2, &m2[2]);
    JointOut {
        first: ffn_sublayer(store, first_prefix, &y1, &m1),
        second: ffn_sublayer(store, second_prefix, &y2, &m2),
        keys,
        values,
    }
}

/// Image stream updated by cross-attention onto static text keys/values.
pub fn dit_block(
    store: &ParamStore<f64>,
    txt_prefix: &str,
    img_prefix: &str,
    img: &Mat,
    txt: &Mat,
    cond: &[f64],
    heads: usize,
) -> Mat {
    let m = modulation(store, img_prefix, cond);
    let h = modulate(img, &m[0], &m[1]);
    let q = Lin::load(store, &format!("{img_prefix}.attn.q")).apply(&h);
    let k = Lin::load(store, &format!("{txt_prefix}.attn.k")).apply(txt);
    let v = Lin::load(store, &format!("{txt_prefix}.attn.v")).apply(txt);
    let a = attention(&q, &k, &v, heads);
    let o = Lin::load(store, &format!("{img_prefix}.attn.out")).apply(&a);
    let y = gated_add(img, &o, &m[2]);
    ffn_sublayer(store, img_prefix, &y, &m)
}

/// `z + gate ⊙ Attn(rot(L_q(src)), keys, values)`; keys already rotated.
#[allow(clippy::too_many_arguments)]
pub fn inject(
    store: &ParamStore<f64>,
    cross_q: &str,
    z: &Mat,
    src: &Mat,
    keys: &Mat,
    values: &Mat,
    qpos: &[Position],
    heads: usize,
    gate: Option<&[f64]>,
) -> Mat {
    let q = rotate(&Lin::load(store, cross_q).apply(src), qpos, heads);
    let a = attention(&q, keys, values, heads);
    let ones = vec![1.0; z[0].len()];
    gated_add(z, &a, gate.unwrap_or(&ones))
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    flat(a).iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
