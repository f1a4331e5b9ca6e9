//! Token streams: image patches, sinusoidal timestep features, axial 2D
//! rotary tables and the closed-vocabulary text tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, RopeAngles, Scalar, Tensor};

/// Patch-grid coordinate (row, column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Position {
    pub h: usize,
    pub w: usize,
}

impl Position {
    /// Position shared by all instruction and text tokens.
    pub const ORIGIN: Position = Position { h: 0, w: 0 };

    pub const fn new(h: usize, w: usize) -> Self {
        Position { h, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Instruction,
    Condition,
}

/// Token matrix `[seq×dim]` with one position per row.
#[derive(Debug, Clone)]
pub struct TokenSeq<T: Scalar> {
    pub tokens: Tensor<T>,
    pub positions: Vec<Position>,
    pub modality: Modality,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(tokens: Tensor<T>, positions: Vec<Position>, modality: Modality) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != positions.len() {
            return Err(Error::shape(
                "token_seq",
                format!("{} rows", positions.len()),
                format!("{:?}", tokens.shape()),
            ));
        }
        Ok(TokenSeq {
            tokens,
            positions,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A token stream living in an autodiff graph.
#[derive(Debug, Clone)]
pub struct Stream {
    pub node: NodeId,
    pub positions: Arc<Vec<Position>>,
    pub modality: Modality,
}

impl Stream {
    pub fn new(node: NodeId, positions: Arc<Vec<Position>>, modality: Modality) -> Self {
        Stream {
            node,
            positions,
            modality,
        }
    }

    pub fn with_node(&self, node: NodeId) -> Self {
        Stream {
            node,
            positions: Arc::clone(&self.positions),
            modality: self.modality,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Row-major patch-grid positions of an `rows × cols` grid.
pub fn grid_positions(rows: usize, cols: usize) -> Vec<Position> {
    (0..rows)
        .flat_map(|h| (0..cols).map(move |w| Position::new(h, w)))
        .collect()
}

/// Geometry of a `C×H×W` image cut into `p×p` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch} does not divide {height}×{width}"
            )));
        }
        Ok(PatchGrid {
            channels,
            height,
            width,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Features per token before projection, ordered (dy, dx, channel).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn positions(&self) -> Vec<Position> {
        grid_positions(self.rows(), self.cols())
    }

    /// For each entry of the `[tokens × patch_dim]` matrix, the flat `C×H×W`
    /// index it is read from.
    pub fn patchify_index(&self) -> Vec<usize> {
        let (p, c, hh, ww) = (self.patch, self.channels, self.height, self.width);
        let mut idx = Vec::with_capacity(self.tokens() * self.patch_dim());
        for gy in 0..self.rows() {
            for gx in 0..self.cols() {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            idx.push(ch * hh * ww + (gy * p + dy) * ww + gx * p + dx);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of `patchify_index`.
    pub fn unpatchify_index(&self) -> Vec<usize> {
        let fwd = self.patchify_index();
        let mut inv = vec![0; fwd.len()];
        for (i, &j) in fwd.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    fn check_image<T: Scalar>(&self, img: &Tensor<T>) -> Result<()> {
        let want = [self.channels, self.height, self.width];
        if img.shape() != want {
            return Err(Error::shape(
                "patchify",
                format!("{want:?}"),
                format!("{:?}", img.shape()),
            ));
        }
        Ok(())
    }
}

/// Splits an image into row-major patch tokens without projection:
/// `[tokens × p·p·C]` plus grid positions.
pub fn patchify<T: Scalar>(img: &Tensor<T>, patch: usize, modality: Modality) -> Result<TokenSeq<T>> {
    let [c, h, w] = img.shape() else {
        return Err(Error::shape("patchify", "C×H×W", format!("{:?}", img.shape())));
    };
    let grid = PatchGrid::new(*c, *h, *w, patch)?;
    grid.check_image(img)?;
    let src = img.data();
    let data = grid.patchify_index().iter().map(|&i| src[i]).collect();
    let tokens = Tensor::new(vec![grid.tokens(), grid.patch_dim()], data)?;
    TokenSeq::new(tokens, grid.positions(), modality)
}

/// Reassembles `[tokens × p·p·C]` patch rows into a `C×H×W` image.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    if tokens.shape() != [grid.tokens(), grid.patch_dim()] {
        return Err(Error::shape(
            "unpatchify",
            format!("[{}×{}]", grid.tokens(), grid.patch_dim()),
            format!("{:?}", tokens.shape()),
        ));
    }
    let src = tokens.data();
    let data = grid.unpatchify_index().iter().map(|&i| src[i]).collect();
    Tensor::new(vec![grid.channels, grid.height, grid.width], data)
}

/// Multiplier applied to `t ∈ [0,1]` before the sinusoids.
pub const TIMESTEP_SCALE: f64 = 1000.0;

/// Sinusoidal timestep features `[sin(f_i·s·t) ‖ cos(f_i·s·t)]` over `d/2`
/// log-spaced frequencies `f_i = 10000^(−i/(d/2))`.
pub fn timestep_features<T: Scalar>(t: f64, d: usize) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0,1]")));
    }
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("timestep dim {d} must be even")));
    }
    let half = d / 2;
    let mut out = vec![T::zero(); d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = TIMESTEP_SCALE * t * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    Tensor::new(vec![d], out)
}

/// Axial rotary tables: `θ_i = base^(−i/D)` for `i = 0..D/4`, cached
/// per position for each axis.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    head_dim: usize,
    base: f64,
    thetas: Vec<f64>,
    max_h: usize,
    max_w: usize,
    cos_h: Vec<f64>,
    sin_h: Vec<f64>,
    cos_w: Vec<f64>,
    sin_w: Vec<f64>,
}

pub const ROPE_BASE: f64 = 10000.0;

impl RotaryTable {
    pub fn new(head_dim: usize, max_h: usize, max_w: usize) -> Result<Self> {
        Self::with_base(head_dim, max_h, max_w, ROPE_BASE)
    }

    pub fn with_base(head_dim: usize, max_h: usize, max_w: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "rotary head dim {head_dim} must be a positive multiple of 4"
            )));
        }
        let thetas: Vec<f64> = (0..head_dim / 4)
            .map(|i| base.powf(-(i as f64) / head_dim as f64))
            .collect();
        let table = |max: usize, f: fn(f64) -> f64| -> Vec<f64> {
            (0..max.max(1))
                .flat_map(|pos| thetas.iter().map(move |&th| f(pos as f64 * th)))
                .collect()
        };
        Ok(RotaryTable {
            head_dim,
            base,
            cos_h: table(max_h, f64::cos),
            sin_h: table(max_h, f64::sin),
            cos_w: table(max_w, f64::cos),
            sin_w: table(max_w, f64::sin),
            thetas,
            max_h,
            max_w,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    fn check(&self, pos: Position) -> Result<()> {
        if pos.h >= self.max_h.max(1) || pos.w >= self.max_w.max(1) {
            return Err(Error::InvalidArgument(format!(
                "position ({}, {}) outside rotary table {}×{}",
                pos.h, pos.w, self.max_h, self.max_w
            )));
        }
        Ok(())
    }

    /// Cosines and sines for the `D/2` rotation pairs of one position: the
    /// first `D/4` pairs follow the row index, the rest the column index.
    fn pair_angles(&self, pos: Position, cos: &mut Vec<f64>, sin: &mut Vec<f64>) {
        let q = self.head_dim / 4;
        cos.extend_from_slice(&self.cos_h[pos.h * q..(pos.h + 1) * q]);
        cos.extend_from_slice(&self.cos_w[pos.w * q..(pos.w + 1) * q]);
        sin.extend_from_slice(&self.sin_h[pos.h * q..(pos.h + 1) * q]);
        sin.extend_from_slice(&self.sin_w[pos.w * q..(pos.w + 1) * q]);
    }

    /// Rotation angles for a sequence of positions, in the form consumed
    /// by `Graph::rope`.
    pub fn angles<T: Scalar>(&self, positions: &[Position]) -> Result<Arc<RopeAngles<T>>> {
        let mut cos = Vec::with_capacity(positions.len() * self.head_dim / 2);
        let mut sin = Vec::with_capacity(positions.len() * self.head_dim / 2);
        for &p in positions {
            self.check(p)?;
            self.pair_angles(p, &mut cos, &mut sin);
        }
        Ok(Arc::new(RopeAngles {
            pairs: self.head_dim / 2,
            cos: cos.into_iter().map(T::lit).collect(),
            sin: sin.into_iter().map(T::lit).collect(),
        }))
    }
}

/// Rotates one head vector `f = [f_h ‖ f_w]` by its position: the height
/// half pairwise by `h·θ_i`, the width half by `w·θ_i`.
pub fn rope_rotate<T: Scalar>(f: &Tensor<T>, pos: Position, table: &RotaryTable) -> Result<Tensor<T>> {
    if f.numel() != table.head_dim || f.shape().len() != 1 {
        return Err(Error::shape(
            "rope_rotate",
            format!("[{}]", table.head_dim),
            format!("{:?}", f.shape()),
        ));
    }
    table.check(pos)?;
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    table.pair_angles(pos, &mut cos, &mut sin);
    let src = f.data();
    let mut out = src.to_vec();
    for j in 0..table.head_dim / 2 {
        let (c, s) = (T::lit(cos[j]), T::lit(sin[j]));
        let (a, b) = (src[2 * j], src[2 * j + 1]);
        out[2 * j] = c * a - s * b;
        out[2 * j + 1] = s * a + c * b;
    }
    Tensor::new(vec![table.head_dim], out)
}

/// Fixed sinusoidal 2D embedding of width `head_dim` per position (row half
/// then column half), used when absolute embeddings are added to queries
/// and keys instead of rotating them.
pub fn absolute_2d_embedding(positions: &[Position], head_dim: usize) -> Result<Vec<f64>> {
    if !head_dim.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "head dim {head_dim} must be a multiple of 4"
        )));
    }
    let q = head_dim / 4;
    let mut out = Vec::with_capacity(positions.len() * head_dim);
    for p in positions {
        for coord in [p.h, p.w] {
            for i in 0..q {
                let omega = ROPE_BASE.powf(-(i as f64) / q as f64);
                out.push((coord as f64 * omega).sin());
                out.push((coord as f64 * omega).cos());
            }
        }
    }
    Ok(out)
}

pub const NULL_TOKEN: &str = "<null>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NULL_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const MAX_TEXT_LEN: usize = 32;

/// Closed vocabulary; the first three ids are `<null>`, `<pad>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased words of `s`, split on whitespace and punctuation.
pub fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocab {
    /// Sorted unique words of the corpus after the three special tokens.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = corpus.into_iter().flat_map(words).collect();
        set.sort();
        set.dedup();
        let mut tokens = vec![NULL_TOKEN.to_string(), PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("specials are fixed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != NULL_TOKEN || tokens[1] != PAD_TOKEN || tokens[2] != UNK_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <null>, <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token ids padded with `<pad>` to `MAX_TEXT_LEN`; an empty string
    /// becomes a lone `<null>`.
    pub fn tokenize(&self, s: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = words(s)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .take(MAX_TEXT_LEN)
            .collect();
        if ids.is_empty() {
            ids.push(NULL_ID);
        }
        ids.resize(MAX_TEXT_LEN, PAD_ID);
        ids
    }

    /// Ids of the null prompt.
    pub fn null_ids() -> Vec<usize> {
        let mut ids = vec![NULL_ID];
        ids.resize(MAX_TEXT_LEN, PAD_ID);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patchify_p1_is_pixel_columns() {
        let img = Tensor::<f64>::new(vec![3, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let seq = patchify(&img, 1, Modality::Image).unwrap();
        assert_eq!(seq.tokens.shape(), &[4, 3]);
        for (t, row) in seq.tokens.data().chunks(3).enumerate() {
            let (h, w) = (t / 2, t % 2);
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, img.get(&[c, h, w]));
            }
        }
    }

    #[test]
    fn patchify_p2_positions() {
        let img = Tensor::<f32>::zeros(&[3, 4, 4]);
        let seq = patchify(&img, 2, Modality::Condition).unwrap();
        assert_eq!(
            seq.positions,
            vec![
                Position::new(0, 0),
                Position::new(0, 1),
                Position::new(1, 0),
                Position::new(1, 1)
            ]
        );
        assert_eq!(seq.tokens.shape(), &[4, 12]);
        assert!(patchify(&Tensor::<f32>::zeros(&[3, 5, 4]), 2, Modality::Image).is_err());
    }

    #[test]
    fn condition_grid_mirrors_image_grid() {
        let img = Tensor::<f32>::zeros(&[3, 8, 8]);
        let a = patchify(&img, 2, Modality::Image).unwrap();
        let b = patchify(&img, 2, Modality::Condition).unwrap();
        assert_eq!(a.positions, b.positions);
    }

    #[test]
    fn timestep_zero_and_closed_form() {
        let z = timestep_features::<f64>(0.0, 8).unwrap();
        assert!(z.data()[..4].iter().all(|&v| v == 0.0));
        assert!(z.data()[4..].iter().all(|&v| v == 1.0));

        let e = timestep_features::<f64>(0.5, 4).unwrap();
        let f1 = (-(10000f64.ln()) / 2.0).exp();
        let expect = [
            (500.0f64).sin(),
            (500.0 * f1).sin(),
            (500.0f64).cos(),
            (500.0 * f1).cos(),
        ];
        for (g, e) in e.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(timestep_features::<f64>(1.5, 4).is_err());
        assert!(timestep_features::<f64>(0.5, 3).is_err());
    }

    #[test]
    fn distinct_timesteps_give_distinct_features() {
        let a = timestep_features::<f64>(0.3, 64).unwrap();
        let b = timestep_features::<f64>(0.3001, 64).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn rope_table_frequencies() {
        let t4 = RotaryTable::new(4, 4, 4).unwrap();
        assert_eq!(t4.thetas(), &[1.0]);
        let t8 = RotaryTable::new(8, 4, 4).unwrap();
        assert_eq!(t8.thetas()[0], 1.0);
        assert!((t8.thetas()[1] - 10000f64.powf(-1.0 / 8.0)).abs() < 1e-15);
        let t16 = RotaryTable::new(16, 4, 4).unwrap();
        assert!(t16.thetas().windows(2).all(|w| w[0] > w[1]));
        assert!(RotaryTable::new(6, 4, 4).is_err());
    }

    #[test]
    fn rope_rotate_examples() {
        let table = RotaryTable::new(4, 4, 4).unwrap();
        let f = Tensor::<f64>::from_f64(&[4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = rope_rotate(&f, Position::new(1, 2), &table).unwrap();
        let expect = [1f64.cos(), 1f64.sin(), 2f64.cos(), 2f64.sin()];
        for (g, e) in r.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((r.data()[0] - 0.5403).abs() < 1e-4 && (r.data()[2] + 0.4161).abs() < 1e-4);

        let g = Tensor::<f64>::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        assert_eq!(rope_rotate(&g, Position::ORIGIN, &table).unwrap().data(), g.data());
        assert!(rope_rotate(&Tensor::<f64>::zeros(&[8]), Position::ORIGIN, &table).is_err());
    }

    #[test]
    fn tokenizer_examples() {
        let v = Vocab::from_corpus(["Generate an image from this edge map.", "a red circle"]);
        let ids = v.tokenize("Generate an image from this edge map.");
        assert_eq!(ids.len(), MAX_TEXT_LEN);
        assert!(ids[..7].iter().all(|&i| i > UNK_ID));
        assert!(ids[7..].iter().all(|&i| i == PAD_ID));
        assert_eq!(v.tokenize(""), Vocab::null_ids());
        assert_eq!(v.tokenize("purple"), {
            let mut x = vec![UNK_ID];
            x.resize(MAX_TEXT_LEN, PAD_ID);
            x
        });
        assert_eq!(v.tokenize("a red circle"), v.tokenize("A red, circle!"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::from_corpus(["blue square", "edge map"]);
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<null>\n<pad>\n<unk>\n"));
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn roundtrip_patchify(seed in 0u64..500) {
            use rand::Rng;
            let mut r = crate::numerics::rng::rng(seed);
            let img = Tensor::<f32>::new(vec![3, 8, 8], (0..192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let grid = PatchGrid::new(3, 8, 8, 2).unwrap();
            let seq = patchify(&img, 2, Modality::Image).unwrap();
            prop_assert_eq!(unpatchify(&seq.tokens, &grid).unwrap(), img);
        }

        #[test]
        fn rope_preserves_norm(v in proptest::collection::vec(-3.0f64..3.0, 16), h in 0usize..16, w in 0usize..16) {
            let table = RotaryTable::new(16, 16, 16).unwrap();
            let f = Tensor::new(vec![16], v).unwrap();
            let r = rope_rotate(&f, Position::new(h, w), &table).unwrap();
            prop_assert!((dot(r.data(), r.data()).sqrt() - dot(f.data(), f.data()).sqrt()).abs() <= 1e-6);
        }

        #[test]
        fn rope_scores_depend_only_on_offset(
            q in proptest::collection::vec(-2.0f64..2.0, 16),
            k in proptest::collection::vec(-2.0f64..2.0, 16),
            p in (0usize..8, 0usize..8), pp in (0usize..8, 0usize..8), d in (0usize..8, 0usize..8),
        ) {
            let table = RotaryTable::new(16, 16, 16).unwrap();
            let qt = Tensor::new(vec![16], q).unwrap();
            let kt = Tensor::new(vec![16], k).unwrap();
            let s0 = dot(rope_rotate(&qt, Position::new(p.0, p.1), &table).unwrap().data(),
                         rope_rotate(&kt, Position::new(pp.0, pp.1), &table).unwrap().data());
            let s1 = dot(rope_rotate(&qt, Position::new(p.0 + d.0, p.1 + d.1), &table).unwrap().data(),
                         rope_rotate(&kt, Position::new(pp.0 + d.0, pp.1 + d.1), &table).unwrap().data());
            prop_assert!((s0 - s1).abs() <= 1e-5);
        }
    }
}
