//! Procedural shape scenes and their condition images, instructions and
//! prompts, plus PPM and manifest IO.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::embeddings::Vocab;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, derive_seed_str, rng, SeededRng};
use crate::numerics::{Scalar, Tensor};

pub const IMAGE_SIZE: usize = 32;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];

/// Eight named colours used for shapes and backgrounds.
pub const PALETTE: [(&str, Rgb); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 210]),
    ("yellow", [235, 210, 40]),
    ("purple", [140, 60, 180]),
    ("orange", [240, 140, 30]),
    ("cyan", [40, 200, 210]),
    ("pink", [240, 120, 170]),
];

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&c);
        }
        RgbImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks(3).map(|p| [p[0], p[1], p[2]])
    }

    /// `C×H×W` tensor in `[−1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![T::zero(); 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let p = self.get(x, y);
                for c in 0..3 {
                    out[c * w * h + y * w + x] = T::lit(p[c] as f64 / 127.5 - 1.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("finite pixels")
    }

    /// Inverse of `to_tensor`: clamp to `[−1, 1]`, map to `[0, 255]`, round half up.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [3, h, w] = t.shape() else {
            return Err(Error::shape("from_tensor", "3×H×W", format!("{:?}", t.shape())));
        };
        let (h, w) = (*h, *w);
        let mut img = RgbImage::filled(w, h, BLACK);
        let d = t.data();
        for y in 0..h {
            for x in 0..w {
                let mut p = [0u8; 3];
                for (c, v) in p.iter_mut().enumerate() {
                    let f = d[c * w * h + y * w + x].as_f64().clamp(-1.0, 1.0);
                    *v = ((f + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8;
                }
                img.set(x, y, p);
            }
        }
        Ok(img)
    }

    /// BT.601 luma per pixel, in `[0, 255]`.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.data).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes).map_err(|m| Error::Dataset(format!("{}: {m}", path.display())))
    }

    pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(format!("not a binary PPM (magic {})", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(format!("unsupported max value {max}"));
        }
        let data = bytes.get(pos..pos + w * h * 3).ok_or("truncated pixel data")?.to_vec();
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// A shape occupying the `size × size` box with top-left corner `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Shape {
    /// Whether the pixel with top-left corner `(px, py)` is covered,
    /// tested at its centre.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.size || py >= self.y + self.size {
            return false;
        }
        let s = self.size as f64;
        let u = px as f64 + 0.5 - self.x as f64;
        let v = py as f64 + 0.5 - self.y as f64;
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            // Apex at top centre, base along the bottom edge.
            ShapeKind::Triangle => (u - s / 2.0).abs() <= v / 2.0,
        }
    }

    pub fn rgb(&self) -> Rgb {
        PALETTE[self.color].1
    }
}

/// Shapes in z-order (later is nearer) over a palette background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub background: usize,
    pub width: usize,
    pub height: usize,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.background >= PALETTE.len() {
            return Err(Error::InvalidArgument(format!("background colour {}", self.background)));
        }
        for s in &self.shapes {
            if s.size == 0 || s.x + s.size > self.width || s.y + s.size > self.height || s.color >= PALETTE.len() {
                return Err(Error::InvalidArgument(format!("shape {s:?} outside canvas or palette")));
            }
        }
        Ok(())
    }

    /// Hard-edged rasterisation with later shapes painted over earlier ones.
    pub fn render(&self) -> Result<RgbImage> {
        self.validate()?;
        let mut img = RgbImage::filled(self.width, self.height, PALETTE[self.background].1);
        for s in &self.shapes {
            paint(&mut img, s, s.rgb());
        }
        Ok(img)
    }

    /// Index of the shape with most visible pixels (first on ties).
    pub fn largest_shape(&self) -> Option<usize> {
        let mut counts = vec![0usize; self.shapes.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(i) = self.shapes.iter().rposition(|s| s.covers(x, y)) {
                    counts[i] += 1;
                }
            }
        }
        counts
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, usize)>, (i, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((i, c)),
            })
            .map(|(i, _)| i)
    }

    /// "a red circle, a blue square and a pink triangle on a green background".
    pub fn prompt(&self) -> String {
        let parts: Vec<String> = self
            .shapes
            .iter()
            .map(|s| format!("a {} {}", PALETTE[s.color].0, s.kind.name()))
            .collect();
        let body = match parts.len() {
            0 => "nothing".to_string(),
            1 => parts[0].clone(),
            n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
        };
        format!("{body} on a {} background", PALETTE[self.background].0)
    }

    /// Random scene of 1–3 shapes, sizes 8–16, colours distinct from the background.
    pub fn random(r: &mut SeededRng, width: usize, height: usize) -> Scene {
        let background = r.random_range(0..PALETTE.len());
        let n = r.random_range(1..=3);
        let shapes = (0..n).map(|_| random_shape(r, width, height, background)).collect();
        Scene {
            shapes,
            background,
            width,
            height,
        }
    }
}

fn random_shape(r: &mut SeededRng, width: usize, height: usize, background: usize) -> Shape {
    let size = r.random_range(8..=16usize.min(width).min(height));
    let mut color = r.random_range(0..PALETTE.len() - 1);
    if color >= background {
        color += 1;
    }
    Shape {
        kind: ShapeKind::ALL[r.random_range(0..3)],
        color,
        x: r.random_range(0..=width - size),
        y: r.random_range(0..=height - size),
        size,
    }
}

fn paint(img: &mut RgbImage, s: &Shape, c: Rgb) {
    for y in s.y..(s.y + s.size).min(img.height) {
        for x in s.x..(s.x + s.size).min(img.width) {
            if s.covers(x, y) {
                img.set(x, y, c);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Edge,
    DepthProxy,
    Inpaint,
    Deblur,
    Colorize,
    Subject,
    Style,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Pixel,
    Subject,
    Style,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Edge,
        TaskKind::DepthProxy,
        TaskKind::Inpaint,
        TaskKind::Deblur,
        TaskKind::Colorize,
        TaskKind::Subject,
        TaskKind::Style,
    ];
    pub const PIXEL: [TaskKind; 5] = [
        TaskKind::Edge,
        TaskKind::DepthProxy,
        TaskKind::Inpaint,
        TaskKind::Deblur,
        TaskKind::Colorize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Edge => "edge",
            TaskKind::DepthProxy => "depth_proxy",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Deblur => "deblur",
            TaskKind::Colorize => "colorize",
            TaskKind::Subject => "subject",
            TaskKind::Style => "style",
        }
    }

    pub fn family(self) -> Family {
        match self {
            TaskKind::Subject => Family::Subject,
            TaskKind::Style => Family::Style,
            _ => Family::Pixel,
        }
    }

    pub fn templates(self) -> &'static [&'static str; 5] {
        match self {
            TaskKind::Edge => &[
                "Generate an image from this edge map.",
                "Create a picture that follows these edges.",
                "Render a scene matching this edge drawing.",
                "Produce an image whose outlines match this edge map.",
                "Turn this edge map into a colored image.",
            ],
            TaskKind::DepthProxy => &[
                "Generate an image from this depth map.",
                "Create a picture consistent with this depth layout.",
                "Render a scene that matches these depth levels.",
                "Produce an image following this depth map.",
                "Turn this depth map into a colored image.",
            ],
            TaskKind::Inpaint => &[
                "Fill in the missing region of this image.",
                "Complete the masked area of this picture.",
                "Restore the blacked out part of this image.",
                "Inpaint the hidden rectangle in this image.",
                "Repair the missing patch of this picture.",
            ],
            TaskKind::Deblur => &[
                "Sharpen this blurry image.",
                "Remove the blur from this picture.",
                "Generate a sharp version of this blurred image.",
                "Restore the details of this soft image.",
                "Deblur this image.",
            ],
            TaskKind::Colorize => &[
                "Colorize this grayscale image.",
                "Add color to this black and white picture.",
                "Generate a colored version of this gray image.",
                "Paint colors onto this luminance image.",
                "Restore the colors of this monochrome picture.",
            ],
            TaskKind::Subject => &[
                "Generate an image from this subject image.",
                "Place this subject in a new scene.",
                "Create a picture featuring this object.",
                "Render this subject in a different setting.",
                "Produce an image containing this item.",
            ],
            TaskKind::Style => &[
                "Generate an image in the style of this swatch.",
                "Use the colors of this palette.",
                "Create a picture with this color scheme.",
                "Render the scene using these colors.",
                "Apply the style of this reference image.",
            ],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Pixel, Family::Subject, Family::Style];

    pub fn name(self) -> &'static str {
        match self {
            Family::Pixel => "pixel",
            Family::Subject => "subject",
            Family::Style => "style",
        }
    }

    pub fn tasks(self) -> &'static [TaskKind] {
        match self {
            Family::Pixel => &TaskKind::PIXEL,
            Family::Subject => &[TaskKind::Subject],
            Family::Style => &[TaskKind::Style],
        }
    }
}

/// Uniform draw from the task's fixed template list.
pub fn instruction_for(task: TaskKind, r: &mut SeededRng) -> &'static str {
    let t = task.templates();
    t[r.random_range(0..t.len())]
}

/// Vocabulary covering every instruction template and prompt word.
pub fn vocabulary() -> Vocab {
    let mut corpus: Vec<String> = TaskKind::ALL
        .iter()
        .flat_map(|t| t.templates().iter().map(|s| s.to_string()))
        .collect();
    corpus.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
    corpus.extend(ShapeKind::ALL.iter().map(|k| k.name().to_string()));
    corpus.push("a and on background nothing".into());
    Vocab::from_corpus(corpus.iter().map(String::as_str))
}

/// Rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// Condition image plus any randomness it consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub image: RgbImage,
    pub rect: Option<Rect>,
}

pub const EDGE_THRESHOLD: f64 = 0.25;

/// Binary Sobel edge map of the luminance in `[0,1]` (borders replicated).
pub fn edge_map(img: &RgbImage) -> Vec<bool> {
    let (w, h) = (img.width, img.height);
    let lum: Vec<f64> = img.luminance().into_iter().map(|v| v / 255.0).collect();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD;
        }
    }
    out
}

/// White-on-black rendering of a binary map.
pub fn binary_image(map: &[bool], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, BLACK);
    for (i, _) in map.iter().enumerate().filter(|(_, &b)| b) {
        img.set(i % width, i / width, WHITE);
    }
    img
}

/// Edge pixels of an edge-condition image (any channel above mid-grey).
pub fn binary_from_image(img: &RgbImage) -> Vec<bool> {
    img.pixels()
        .map(|p| p.iter().map(|&c| c as u32).sum::<u32>() > 3 * 127)
        .collect()
}

fn gray(v: u8) -> Rgb {
    [v, v, v]
}

/// Grey levels 85/170/255 by z-order (nearer is brighter), background black.
pub fn depth_proxy(scene: &Scene) -> RgbImage {
    let mut img = RgbImage::filled(scene.width, scene.height, BLACK);
    for (k, s) in scene.shapes.iter().enumerate() {
        paint(&mut img, s, gray((85 * (k + 1)).min(255) as u8));
    }
    img
}

pub fn box_blur(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let p = img.get((x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            out.set(x as usize, y as usize, acc.map(|a| ((a + 4) / 9) as u8));
        }
    }
    out
}

pub fn luminance_image(img: &RgbImage) -> RgbImage {
    let lum = img.luminance();
    let mut out = img.clone();
    for (i, &l) in lum.iter().enumerate() {
        out.set(i % img.width, i / img.width, gray((l + 0.5).floor().min(255.0) as u8));
    }
    out
}

/// Rectangle covering 25–50% of the canvas.
pub fn random_rect(r: &mut SeededRng, width: usize, height: usize) -> Rect {
    let area = (width * height) as f64;
    loop {
        let w = r.random_range(width / 4..=width);
        let h = r.random_range(height / 4..=height);
        let frac = (w * h) as f64 / area;
        if (0.25..=0.5).contains(&frac) {
            return Rect {
                x: r.random_range(0..=width - w),
                y: r.random_range(0..=height - h),
                w,
                h,
            };
        }
    }
}

/// Four horizontal bands cycling through the background then shape colours.
pub fn style_swatch(scene: &Scene) -> RgbImage {
    let mut colors = vec![PALETTE[scene.background].1];
    colors.extend(scene.shapes.iter().map(Shape::rgb));
    let mut img = RgbImage::filled(scene.width, scene.height, BLACK);
    for y in 0..scene.height {
        let c = colors[(y * 4 / scene.height) % colors.len()];
        for x in 0..scene.width {
            img.set(x, y, c);
        }
    }
    img
}

/// Condition generator for each task.
pub fn make_condition(task: TaskKind, target: &RgbImage, scene: &Scene, r: &mut SeededRng) -> Result<Condition> {
    let (w, h) = (target.width, target.height);
    let image = match task {
        TaskKind::Edge => binary_image(&edge_map(target), w, h),
        TaskKind::DepthProxy => depth_proxy(scene),
        TaskKind::Inpaint => {
            let rect = random_rect(r, w, h);
            let mut img = target.clone();
            for y in 0..h {
                for x in 0..w {
                    if rect.contains(x, y) {
                        img.set(x, y, BLACK);
                    }
                }
            }
            return Ok(Condition {
                image: img,
                rect: Some(rect),
            });
        }
        TaskKind::Deblur => box_blur(target),
        TaskKind::Colorize => luminance_image(target),
        TaskKind::Subject => {
            let i = scene
                .largest_shape()
                .ok_or_else(|| Error::InvalidArgument("subject task needs a shape".into()))?;
            let mut s = scene.shapes[i];
            s.x = r.random_range(0..=w - s.size);
            s.y = r.random_range(0..=h - s.size);
            let mut img = RgbImage::filled(w, h, WHITE);
            paint(&mut img, &s, s.rgb());
            img
        }
        TaskKind::Style => style_swatch(scene),
    };
    Ok(Condition { image, rect: None })
}

/// Family weights (pixel, subject, style).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub pixel: f64,
    pub subject: f64,
    pub style: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            pixel: 0.4,
            subject: 0.5,
            style: 0.1,
        }
    }
}

impl MixtureSpec {
    pub fn new(pixel: f64, subject: f64, style: f64) -> Result<Self> {
        let m = MixtureSpec { pixel, subject, style };
        let ok = [pixel, subject, style].iter().all(|w| (0.0..=1.0).contains(w))
            && ((pixel + subject + style) - 1.0).abs() < 1e-9;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "mixture weights {m:?} must be in [0,1] and sum to 1"
            )));
        }
        Ok(m)
    }

    /// Family selected by one uniform draw in `[0,1)`.
    pub fn pick(&self, u: f64) -> Family {
        if u < self.pixel {
            Family::Pixel
        } else if u < self.pixel + self.subject || self.style == 0.0 {
            if self.subject == 0.0 && self.style > 0.0 {
                Family::Style
            } else {
                Family::Subject
            }
        } else {
            Family::Style
        }
    }

    pub fn sample(&self, r: &mut SeededRng) -> Family {
        self.pick(r.random::<f64>())
    }
}

/// One generated example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionPair {
    pub target: RgbImage,
    pub condition: RgbImage,
    pub instruction: String,
    pub prompt: String,
    pub task: TaskKind,
}

/// Example `index` of the stream rooted at `seed`; the task is drawn from the
/// mixture unless `only` fixes it.
pub fn generate_pair(seed: u64, index: u64, mixture: &MixtureSpec, only: Option<TaskKind>) -> Result<ConditionPair> {
    let mut r = rng(derive_seed(seed, index));
    let task = match only {
        Some(t) => t,
        None => {
            let fam = mixture.sample(&mut r);
            let tasks = fam.tasks();
            tasks[r.random_range(0..tasks.len())]
        }
    };
    let scene = Scene::random(&mut r, IMAGE_SIZE, IMAGE_SIZE);
    let target = scene.render()?;
    let mut cr = rng(derive_seed_str(derive_seed(seed, index), "condition"));
    let condition = make_condition(task, &target, &scene, &mut cr)?.image;
    Ok(ConditionPair {
        instruction: instruction_for(task, &mut r).to_string(),
        prompt: scene.prompt(),
        target,
        condition,
        task,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub task: TaskKind,
    pub target: PathBuf,
    pub condition: PathBuf,
    pub instruction: String,
    pub prompt: String,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const VOCAB_NAME: &str = "vocab.txt";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected 6 fields, got {}",
                    path.display(),
                    n + 1,
                    f.len()
                )));
            }
            records.push(ManifestRecord {
                id: f[0].to_string(),
                task: f[1].parse()?,
                target: PathBuf::from(f[2]),
                condition: PathBuf::from(f[3]),
                instruction: f[4].to_string(),
                prompt: f[5].to_string(),
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pair(&self, i: usize) -> Result<ConditionPair> {
        let r = &self.records[i];
        Ok(ConditionPair {
            target: RgbImage::read_ppm(&self.root.join(&r.target))?,
            condition: RgbImage::read_ppm(&self.root.join(&r.condition))?,
            instruction: r.instruction.clone(),
            prompt: r.prompt.clone(),
            task: r.task,
        })
    }

    pub fn pairs(&self) -> Result<Vec<ConditionPair>> {
        (0..self.len()).into_par_iter().map(|i| self.pair(i)).collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.root.join(VOCAB_NAME))
    }
}

/// Writes `n` examples as PPM files plus `manifest.tsv` and `vocab.txt`.
pub fn generate_dataset(
    out: &Path,
    n: usize,
    mixture: &MixtureSpec,
    only: Option<TaskKind>,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let width = n.to_string().len().max(5);
    let records: Vec<ManifestRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pair = generate_pair(seed, i as u64, mixture, only)?;
            let id = format!("{i:0width$}");
            let target = PathBuf::from("images").join(format!("{id}_target.ppm"));
            let condition = PathBuf::from("images").join(format!("{id}_cond.ppm"));
            pair.target.write_ppm(&out.join(&target))?;
            pair.condition.write_ppm(&out.join(&condition))?;
            Ok(ManifestRecord {
                id,
                task: pair.task,
                target,
                condition,
                instruction: pair.instruction,
                prompt: pair.prompt,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.task,
            r.target.display(),
            r.condition.display(),
            r.instruction,
            r.prompt
        ));
    }
    let mpath = out.join(MANIFEST_NAME);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    vocabulary().save(&out.join(VOCAB_NAME))?;
    Ok(Dataset {
        root: out.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn scene(shapes: Vec<Shape>) -> Scene {
        Scene {
            shapes,
            background: 2,
            width: 32,
            height: 32,
        }
    }

    #[test]
    fn empty_scene_is_uniform_background() {
        let img = scene(vec![]).render().unwrap();
        assert!(img.pixels().all(|p| p == PALETTE[2].1));
    }

    #[test]
    fn centred_square_has_exact_area() {
        let s = Shape {
            kind: ShapeKind::Square,
            color: 0,
            x: 11,
            y: 11,
            size: 10,
        };
        let img = scene(vec![s]).render().unwrap();
        assert_eq!(img.pixels().filter(|&p| p == PALETTE[0].1).count(), 100);
    }

    #[test]
    fn circle_and_triangle_areas_approximate_geometry() {
        for (kind, area) in [
            (ShapeKind::Circle, std::f64::consts::PI * 64.0),
            (ShapeKind::Triangle, 16.0 * 16.0 / 2.0),
        ] {
            let s = Shape {
                kind,
                color: 0,
                x: 8,
                y: 8,
                size: 16,
            };
            let n = scene(vec![s])
                .render()
                .unwrap()
                .pixels()
                .filter(|&p| p == PALETTE[0].1)
                .count() as f64;
            assert!((n - area).abs() / area < 0.08, "{kind:?}: {n} vs {area}");
        }
    }

    #[test]
    fn z_order_and_out_of_canvas() {
        let a = Shape {
            kind: ShapeKind::Square,
            color: 0,
            x: 0,
            y: 0,
            size: 10,
        };
        let b = Shape {
            kind: ShapeKind::Square,
            color: 1,
            x: 5,
            y: 5,
            size: 10,
        };
        let img = scene(vec![a, b]).render().unwrap();
        assert_eq!(img.get(7, 7), PALETTE[1].1);
        let bad = Shape { x: 25, ..a };
        assert!(scene(vec![bad]).render().is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut r1 = rng(5);
        let mut r2 = rng(5);
        let s1 = Scene::random(&mut r1, 32, 32);
        let s2 = Scene::random(&mut r2, 32, 32);
        assert_eq!(s1.render().unwrap(), s2.render().unwrap());
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let img = scene(vec![]).render().unwrap();
        let mut r = rng(0);
        let c = make_condition(TaskKind::Edge, &img, &scene(vec![]), &mut r).unwrap();
        assert!(c.image.pixels().all(|p| p == BLACK));
    }

    #[test]
    fn square_edges_hug_the_boundary() {
        let s = Shape {
            kind: ShapeKind::Square,
            color: 3,
            x: 10,
            y: 10,
            size: 10,
        };
        let img = scene(vec![s]).render().unwrap();
        let e = edge_map(&img);
        assert!(e[15 * 32 + 10] && e[15 * 32 + 9]);
        assert!(!e[15 * 32 + 15] && !e[2 * 32 + 2]);
    }

    #[test]
    fn colorize_is_replicated_luminance() {
        let mut r = rng(1);
        let sc = Scene::random(&mut r, 32, 32);
        let img = sc.render().unwrap();
        let c = make_condition(TaskKind::Colorize, &img, &sc, &mut r).unwrap().image;
        for (p, q) in img.pixels().zip(c.pixels()) {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            assert_eq!(q, gray((y + 0.5).floor() as u8));
        }
    }

    #[test]
    fn inpaint_masks_exactly_the_rectangle() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let sc = Scene::random(&mut r, 32, 32);
            let img = sc.render().unwrap();
            let c = make_condition(TaskKind::Inpaint, &img, &sc, &mut r).unwrap();
            let rect = c.rect.unwrap();
            let frac = (rect.w * rect.h) as f64 / 1024.0;
            assert!((0.25..=0.5).contains(&frac));
            for y in 0..32 {
                for x in 0..32 {
                    let want = if rect.contains(x, y) { BLACK } else { img.get(x, y) };
                    assert_eq!(c.image.get(x, y), want);
                }
            }
        }
    }

    #[test]
    fn subject_condition_is_palette_on_white() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let sc = Scene::random(&mut r, 32, 32);
            let img = sc.render().unwrap();
            let c = make_condition(TaskKind::Subject, &img, &sc, &mut r).unwrap().image;
            let subject = sc.shapes[sc.largest_shape().unwrap()];
            let fg = c.pixels().filter(|&p| p != WHITE).count();
            assert!(fg > 0);
            assert!(c.pixels().all(|p| p == WHITE || p == subject.rgb()));
        }
    }

    #[test]
    fn deblur_and_depth_and_style_examples() {
        let s = Shape {
            kind: ShapeKind::Square,
            color: 0,
            x: 0,
            y: 0,
            size: 16,
        };
        let t = Shape {
            kind: ShapeKind::Circle,
            color: 1,
            x: 16,
            y: 16,
            size: 16,
        };
        let sc = scene(vec![s, t]);
        let img = sc.render().unwrap();
        let blur = box_blur(&img);
        assert_eq!(blur.get(5, 5), img.get(5, 5));
        let d = depth_proxy(&sc);
        assert_eq!(d.get(2, 2), gray(85));
        assert_eq!(d.get(24, 24), gray(170));
        assert_eq!(d.get(30, 2), BLACK);
        let sw = style_swatch(&sc);
        assert_eq!(sw.get(0, 0), PALETTE[2].1);
        assert_eq!(sw.get(0, 9), PALETTE[0].1);
        assert_eq!(sw.get(0, 17), PALETTE[1].1);
        assert_eq!(sw.get(0, 31), PALETTE[2].1);
    }

    #[test]
    fn instruction_templates() {
        let mut seen = HashSet::new();
        for t in TaskKind::ALL {
            for s in t.templates() {
                assert!(seen.insert(*s), "{s} shared");
            }
        }
        assert_eq!(TaskKind::Edge.templates()[0], "Generate an image from this edge map.");
        assert_eq!(
            TaskKind::Subject.templates()[0],
            "Generate an image from this subject image."
        );
        let v = vocabulary();
        assert!(v.len() <= 512);
        for t in TaskKind::ALL {
            for s in t.templates() {
                assert!(!v.tokenize(s).contains(&crate::embeddings::UNK_ID));
            }
        }
    }

    #[test]
    fn prompt_grammar() {
        let a = Shape {
            kind: ShapeKind::Square,
            color: 0,
            x: 0,
            y: 0,
            size: 8,
        };
        let b = Shape {
            kind: ShapeKind::Triangle,
            color: 7,
            x: 8,
            y: 8,
            size: 8,
        };
        let c = Shape {
            kind: ShapeKind::Circle,
            color: 3,
            x: 16,
            y: 16,
            size: 8,
        };
        assert_eq!(scene(vec![a]).prompt(), "a red square on a blue background");
        assert_eq!(
            scene(vec![a, b, c]).prompt(),
            "a red square, a pink triangle and a yellow circle on a blue background"
        );
        let v = vocabulary();
        assert!(!v
            .tokenize(&scene(vec![a, b, c]).prompt())
            .contains(&crate::embeddings::UNK_ID));
    }

    #[test]
    fn mixture_draws() {
        let m = MixtureSpec::default();
        assert_eq!(m.pick(0.0), Family::Pixel);
        assert_eq!(m.pick(0.45), Family::Subject);
        assert_eq!(m.pick(0.95), Family::Style);
        let only_pixel = MixtureSpec::new(1.0, 0.0, 0.0).unwrap();
        assert!((0..100).all(|i| only_pixel.pick(i as f64 / 100.0) == Family::Pixel));
        let only_style = MixtureSpec::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(only_style.pick(0.3), Family::Style);
        assert!(MixtureSpec::new(0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn ppm_round_trip_and_tensor_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(3);
        let img = Scene::random(&mut r, 32, 32).render().unwrap();
        let p = dir.path().join("x.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap(), img);
        let t = img.to_tensor::<f32>();
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
        let edge = Tensor::<f32>::from_f64(&[3, 1, 2], &[-1.0, 1.0, 0.0, 2.0, -3.0, 0.0]).unwrap();
        let e = RgbImage::from_tensor(&edge).unwrap();
        assert_eq!(e.data, vec![0, 128, 0, 255, 255, 128]);
        assert!(RgbImage::parse_ppm(b"P3\n1 1\n255\n000").is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = MixtureSpec::new(1.0, 0.0, 0.0).unwrap();
        let a = generate_dataset(d1.path(), 10, &m, None, 9).unwrap();
        generate_dataset(d2.path(), 10, &m, None, 9).unwrap();
        assert!(a.records.iter().all(|r| r.task.family() == Family::Pixel));
        let m1 = fs::read(d1.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(m1, fs::read(d2.path().join(MANIFEST_NAME)).unwrap());
        let loaded = Dataset::load(d1.path()).unwrap();
        assert_eq!(loaded.records, a.records);
        for i in 0..10 {
            let fresh = generate_pair(9, i as u64, &m, None).unwrap();
            assert_eq!(loaded.pair(i).unwrap(), fresh);
            let f = &loaded.records[i].target;
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
        assert_eq!(loaded.vocab().unwrap(), vocabulary());
    }

    #[test]
    fn family_frequencies_follow_mixture() {
        let m = MixtureSpec::default();
        let n = 10_000;
        let mut counts = [0usize; 3];
        for i in 0..n {
            let mut r = rng(derive_seed(1, i));
            let fam = m.sample(&mut r);
            counts[Family::ALL.iter().position(|&f| f == fam).unwrap()] += 1;
        }
        for (c, w) in counts.iter().zip([0.4, 0.5, 0.1]) {
            assert!((*c as f64 / n as f64 - w).abs() <= 0.01);
        }
    }
}
