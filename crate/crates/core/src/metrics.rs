//! Image metrics and the per-task evaluation built on re-extracting the
//! condition from a generated image.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{
    binary_from_image, box_blur, edge_map, luminance_image, ConditionPair, RgbImage, TaskKind, BLACK, WHITE,
};

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// F1 of binary maps where a pixel matches if the other map has a set
/// pixel within Chebyshev distance `tol`.
pub fn edge_f1(pred: &[bool], reference: &[bool], width: usize, height: usize, tol: usize) -> Result<f64> {
    check_len("edge_f1", pred.len(), reference.len())?;
    check_len("edge_f1", pred.len(), width * height)?;
    let near = |map: &[bool], x: usize, y: usize| {
        let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(width - 1));
        let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(height - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| map[yy * width + xx]))
    };
    let matched = |a: &[bool], b: &[bool]| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (i, _) in a.iter().enumerate().filter(|(_, &v)| v) {
            total += 1;
            if near(b, i % width, i / width) {
                hit += 1;
            }
        }
        (hit, total)
    };
    let (tp_p, n_p) = matched(pred, reference);
    let (tp_r, n_r) = matched(reference, pred);
    match (n_p, n_r) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let p = tp_p as f64 / n_p as f64;
    let r = tp_r as f64 / n_r as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Mean SSIM over all 7×7 windows (uniform weights, population moments) of
/// two grayscale images on the 8-bit scale.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_len("ssim", a.len(), b.len())?;
    check_len("ssim", a.len(), width * height)?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least 7×7, got {width}×{height}"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (u, v) = (a[y * width + x], b[y * width + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("rmse", a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

fn bytes_f64(img: &RgbImage) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

fn same_extent(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "metrics",
            format!("{}×{}", a.width, a.height),
            format!("{}×{}", b.width, b.height),
        ));
    }
    Ok(())
}

/// Concatenated 8-bin histograms of R, G and B.
pub fn color_histogram(img: &RgbImage) -> [f64; 24] {
    let mut h = [0.0; 24];
    for p in img.pixels() {
        for c in 0..3 {
            h[c * 8 + (p[c] / 32) as usize] += 1.0;
        }
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn style_similarity(generated: &RgbImage, reference: &RgbImage) -> f64 {
    cosine(&color_histogram(generated), &color_histogram(reference))
}

/// Most frequent non-white colour of a subject condition.
pub fn subject_color(condition: &RgbImage) -> Option<[u8; 3]> {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for p in condition.pixels().filter(|&p| p != WHITE) {
        *counts.entry(p).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
        .map(|(c, _)| c)
}

/// `1 − MSE` on the `[0,1]` scale over target pixels of the subject colour
/// (the whole image when the mask is empty).
pub fn subject_fidelity(generated: &RgbImage, target: &RgbImage, condition: &RgbImage) -> Result<f64> {
    same_extent(generated, target)?;
    let color = subject_color(condition);
    let mask: Vec<bool> = target.pixels().map(|p| Some(p) == color).collect();
    let use_all = !mask.iter().any(|&m| m);
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (g, t)) in generated.pixels().zip(target.pixels()).enumerate() {
        if use_all || mask[i] {
            for c in 0..3 {
                let d = (g[c] as f64 - t[c] as f64) / 255.0;
                s += d * d;
            }
            n += 3;
        }
    }
    Ok(1.0 - s / n as f64)
}

/// Most frequent colour on the image border.
fn border_color(img: &RgbImage) -> [u8; 3] {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for y in 0..img.height {
        for x in 0..img.width {
            if x == 0 || y == 0 || x + 1 == img.width || y + 1 == img.height {
                *counts.entry(img.get(x, y)).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
        .map(|(c, _)| c)
        .unwrap_or(BLACK)
}

/// 255 where the image differs from its border colour, else 0.
pub fn foreground_mask(img: &RgbImage) -> Vec<f64> {
    let bg = border_color(img);
    img.pixels().map(|p| if p != bg { 255.0 } else { 0.0 }).collect()
}

/// One metric value for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub task: TaskKind,
    pub metric: &'static str,
    pub value: f64,
}

pub fn controllability_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Edge => "edge_f1",
        TaskKind::DepthProxy => "depth_mask_rmse",
        TaskKind::Inpaint => "inpaint_rmse",
        TaskKind::Deblur => "deblur_ssim",
        TaskKind::Colorize => "colorize_rmse",
        TaskKind::Subject => "subject_fidelity",
        TaskKind::Style => "style_similarity",
    }
}

/// Name of the same metric scored against another example's condition.
pub fn shuffled_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Edge => "edge_f1_shuffled",
        TaskKind::DepthProxy => "depth_mask_rmse_shuffled",
        TaskKind::Inpaint => "inpaint_rmse_shuffled",
        TaskKind::Deblur => "deblur_ssim_shuffled",
        TaskKind::Colorize => "colorize_rmse_shuffled",
        TaskKind::Subject => "subject_fidelity_shuffled",
        TaskKind::Style => "style_similarity_shuffled",
    }
}

/// Task metric of `generated` against the condition (pixel tasks, after
/// re-extraction with the dataset's own operators) or the target.
pub fn score_against(task: TaskKind, generated: &RgbImage, condition: &RgbImage, target: &RgbImage) -> Result<f64> {
    same_extent(generated, condition)?;
    let (w, h) = (generated.width, generated.height);
    match task {
        TaskKind::Edge => edge_f1(&edge_map(generated), &binary_from_image(condition), w, h, 1),
        TaskKind::DepthProxy => {
            let cond: Vec<f64> = condition
                .pixels()
                .map(|p| if p != BLACK { 255.0 } else { 0.0 })
                .collect();
            rmse(&foreground_mask(generated), &cond)
        }
        TaskKind::Inpaint => {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (g, c) in generated.pixels().zip(condition.pixels()) {
                if c != BLACK {
                    a.extend(g.iter().map(|&v| v as f64));
                    b.extend(c.iter().map(|&v| v as f64));
                }
            }
            rmse(&a, &b)
        }
        TaskKind::Deblur => ssim(&box_blur(generated).luminance(), &condition.luminance(), w, h),
        TaskKind::Colorize => rmse(&bytes_f64(&luminance_image(generated)), &bytes_f64(condition)),
        TaskKind::Subject => subject_fidelity(generated, target, condition),
        TaskKind::Style => {
            same_extent(generated, target)?;
            Ok(style_similarity(generated, target))
        }
    }
}

pub fn proxy_scores(generated: &RgbImage, pair: &ConditionPair) -> Result<Vec<Score>> {
    Ok(vec![Score {
        task: pair.task,
        metric: controllability_metric(pair.task),
        value: score_against(pair.task, generated, &pair.condition, &pair.target)?,
    }])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task: TaskKind,
    pub n: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Per (task, metric) mean and population standard deviation, in order of
/// first appearance.
pub fn summarize(scores: &[Score]) -> Vec<ReportRow> {
    let mut keys: Vec<(TaskKind, &'static str)> = Vec::new();
    for s in scores {
        if !keys.contains(&(s.task, s.metric)) {
            keys.push((s.task, s.metric));
        }
    }
    keys.into_iter()
        .map(|(task, metric)| {
            let v: Vec<f64> = scores
                .iter()
                .filter(|s| s.task == task && s.metric == metric)
                .map(|s| s.value)
                .collect();
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            ReportRow {
                task,
                n,
                metric: metric.to_string(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut s = String::from("task\tn\tmetric\tmean\tstd\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{:.6}\t{:.6}", r.task, r.n, r.metric, r.mean, r.std).unwrap();
    }
    s
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<12} {:>5}  {:<20} {:>10} {:>10}\n",
        "task", "n", "metric", "mean", "std"
    );
    for r in rows {
        writeln!(
            s,
            "{:<12} {:>5}  {:<20} {:>10.4} {:>10.4}",
            r.task.to_string(),
            r.n,
            r.metric,
            r.mean,
            r.std
        )
        .unwrap();
    }
    s
}

/// Parses a file written by `report_tsv`.
pub fn parse_report_tsv(text: &str) -> Result<Vec<ReportRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Dataset(format!("bad report line {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ReportRow {
                task: f[0].parse()?,
                n: f[1].parse().map_err(|_| bad())?,
                metric: f[2].to_string(),
                mean: f[3].parse().map_err(|_| bad())?,
                std: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_TSV: &str = "report.tsv";

pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [(REPORT_TXT, report_text(rows)), (REPORT_TSV, report_tsv(rows))] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
