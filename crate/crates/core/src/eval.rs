//! Classification metrics, the ground-truth co-occurrence matrix, and heatmap
//! export.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::correlation::{write_matrix_csv, AttentionMap};
use crate::error::{Error, Result};
use crate::head::decide;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or(Error::AucUndefined)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro metrics at `threshold` (a class never predicted has precision 0) and
/// the tie-aware rank AUC.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Validation("no samples to score".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = if threshold == 0.5 {
            decide(s)
        } else {
            u8::from(s >= threshold)
        };
        match (pred, y) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    let (p1, r1) = (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_));
    let (p0, r0) = (ratio(c.tn, c.tn + c.fn_), ratio(c.tn, c.tn + c.fp));
    Ok(MetricsReport {
        macro_precision: (p0 + p1) / 2.0,
        macro_recall: (r0 + r1) / 2.0,
        macro_f1: (f1(p0, r0) + f1(p1, r1)) / 2.0,
        auc: auc(scores, labels).ok(),
        confusion: c,
        n_samples: scores.len(),
    })
}

/// Mann-Whitney AUC with average ranks for ties, in exact integer arithmetic.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives; a tie group at 1-based ranks i..=j has
    // doubled average rank i + j
    let mut doubled = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let rank2 = (start + 1 + end + 1) as u64;
        let pos = order[start..=end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled += rank2 * pos;
        start = end + 1;
    }
    let u2 = doubled - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

pub fn haversine_km((lat1, lon1): (f64, f64), (lat2, lon2): (f64, f64)) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// `1 − minmax(haversine distance)`; all ones when every distance is equal.
pub fn cooccurrence_matrix(a: Option<&[(f64, f64)]>, b: Option<&[(f64, f64)]>) -> Result<Tensor> {
    let (Some(a), Some(b)) = (a, b) else {
        return Err(Error::Unavailable(
            "raw coordinates are needed for co-occurrence".into(),
        ));
    };
    if a.is_empty() || b.is_empty() {
        return Err(Error::Unavailable("empty sequence".into()));
    }
    let dist: Vec<f64> = a
        .iter()
        .flat_map(|&p| b.iter().map(move |&q| haversine_km(p, q)))
        .collect();
    let lo = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        dist.iter().map(|d| 1.0 - (d - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; dist.len()]
    };
    Tensor::new(vec![a.len(), b.len()], data)
}

/// Paths written by [`export_heatmaps`].
#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub map_ab: PathBuf,
    pub map_ba: PathBuf,
    pub cooccurrence: PathBuf,
    pub image: PathBuf,
}

/// Writes the two attention maps and the co-occurrence matrix as CSV into
/// `dir`, plus an SVG with the three panels side by side.
pub fn export_heatmaps(
    map_ab: &AttentionMap,
    map_ba: &AttentionMap,
    cooc: &Tensor,
    dir: &Path,
) -> Result<HeatmapFiles> {
    fs::create_dir_all(dir)?;
    let files = HeatmapFiles {
        map_ab: dir.join("attention_a_to_b.csv"),
        map_ba: dir.join("attention_b_to_a.csv"),
        cooccurrence: dir.join("cooccurrence.csv"),
        image: dir.join("heatmaps.svg"),
    };
    write_matrix_csv(BufWriter::new(File::create(&files.map_ab)?), &map_ab.matrix)?;
    write_matrix_csv(BufWriter::new(File::create(&files.map_ba)?), &map_ba.matrix)?;
    write_matrix_csv(BufWriter::new(File::create(&files.cooccurrence)?), cooc)?;
    let panels = [
        ("(a) attention A->B", &map_ab.matrix),
        ("(b) attention B->A", &map_ba.matrix),
        ("(c) co-occurrence", cooc),
    ];
    fs::write(&files.image, render_svg(&panels))?;
    Ok(files)
}

const CELL: usize = 8;
const GAP: usize = 24;
const TITLE: usize = 20;

fn render_svg(panels: &[(&str, &Tensor)]) -> String {
    let width = panels.iter().map(|(_, m)| m.cols() * CELL).sum::<usize>() + GAP * (panels.len() + 1);
    let height = panels.iter().map(|(_, m)| m.rows() * CELL).max().unwrap_or(0) + TITLE + 2 * GAP;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let mut x0 = GAP;
    for (title, m) in panels {
        let _ = writeln!(svg, r#"<text x="{x0}" y="{}">{title}</text>"#, GAP);
        // each panel is scaled to its own maximum so small maps stay visible
        let max = m.data().iter().copied().fold(0.0, f64::max);
        let y0 = GAP + TITLE;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let v = if max > 0.0 { m.at(i, j) / max } else { 0.0 };
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb(255,{shade},{shade})"/>"#,
                    x0 + j * CELL,
                    y0 + i * CELL
                );
            }
        }
        x0 += m.cols() * CELL + GAP;
    }
    svg.push_str("</svg>\n");
    svg
}
