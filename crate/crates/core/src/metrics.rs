//! Segmentation metrics (IoU, mIoU, oIoU, P@k) and the worst-N error report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::types::BinaryMask;

/// Thresholds reported as P@k.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Failure categories for manual annotation: `(key, alias, description)`.
pub const ERROR_CATEGORIES: [(&str, Option<&str>, &str); 7] = [
    ("SC", None, "serious comprehension error on visual and language information"),
    ("RE", None, "reference or exophora resolution error"),
    ("SEO", Some("BTE"), "segmentation of extra objects"),
    ("OUS", Some("WNS"), "over- or under-segmentation"),
    ("NSG", None, "no segmentation in any region"),
    ("SNI", None, "segmentation of a non-target object named in the instruction"),
    ("AE", None, "annotation error in the mask or instruction"),
];

/// Intersection and union pixel counts.
pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    if !pred.same_shape(gt) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((inter, union))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(ratio(i, u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ious: Vec<f64>,
    pub intersections: Vec<usize>,
    pub unions: Vec<usize>,
    pub miou: f64,
    pub oiou: f64,
    /// `(k, P@k)` for each of [`PRECISION_THRESHOLDS`].
    pub precision: Vec<(f64, f64)>,
    pub n: usize,
}

impl EvalResult {
    /// Builds the aggregate metrics from per-sample `(intersection, union)` counts.
    pub fn from_counts(counts: &[(usize, usize)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidInput("evaluation over zero samples".into()));
        }
        let n = counts.len();
        let ious: Vec<f64> = counts.iter().map(|&(i, u)| ratio(i, u)).collect();
        let miou = ious.iter().sum::<f64>() / n as f64;
        let total_i: usize = counts.iter().map(|c| c.0).sum();
        let total_u: usize = counts.iter().map(|c| c.1).sum();
        let precision = PRECISION_THRESHOLDS
            .iter()
            .map(|&k| (k, ious.iter().filter(|&&x| x > k).count() as f64 / n as f64))
            .collect();
        Ok(Self {
            intersections: counts.iter().map(|c| c.0).collect(),
            unions: counts.iter().map(|c| c.1).collect(),
            ious,
            miou,
            oiou: ratio(total_i, total_u),
            precision,
            n,
        })
    }

    pub fn precision_at(&self, k: f64) -> Option<f64> {
        self.precision.iter().find(|(t, _)| (*t - k).abs() < 1e-12).map(|p| p.1)
    }

    pub fn precision_is_monotone(&self) -> bool {
        self.precision.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    /// One `id,iou` row per sample, preceded by a header.
    pub fn iou_table(&self, ids: &[String]) -> Result<String> {
        if ids.len() != self.n {
            return Err(shape_err!("{} ids for {} results", ids.len(), self.n));
        }
        let mut s = String::from("id,iou\n");
        for (id, v) in ids.iter().zip(&self.ious) {
            writeln!(s, "{id},{v:.6}").unwrap();
        }
        Ok(s)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("n      {}\nmIoU   {:.4}\noIoU   {:.4}\n", self.n, self.miou, self.oiou);
        for (k, p) in &self.precision {
            writeln!(s, "P@{k:.1}  {p:.4}").unwrap();
        }
        s
    }
}

pub fn evaluate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let counts = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| overlap(p, g))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Lowest-IoU samples, ascending by IoU then id.
    pub worst: Vec<(String, f64)>,
    pub zero_iou_count: usize,
    /// Empty tallies keyed by category, filled in by a human annotator.
    pub categories: BTreeMap<String, usize>,
}

pub fn error_report(result: &EvalResult, ids: &[String], worst_n: usize) -> Result<ErrorReport> {
    if ids.len() != result.n {
        return Err(shape_err!("{} ids for {} results", ids.len(), result.n));
    }
    if worst_n > result.n {
        return Err(Error::InvalidInput(format!(
            "worst_n = {worst_n} exceeds the {} evaluated samples",
            result.n
        )));
    }
    let mut rows: Vec<(String, f64)> = ids.iter().cloned().zip(result.ious.iter().copied()).collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    rows.truncate(worst_n);
    Ok(ErrorReport {
        worst: rows,
        zero_iou_count: result.ious.iter().filter(|&&v| v == 0.0).count(),
        categories: ERROR_CATEGORIES.iter().map(|c| (c.0.to_string(), 0)).collect(),
    })
}

impl ErrorReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "worst {} samples (IoU = 0: {})\n\n",
            self.worst.len(),
            self.zero_iou_count
        );
        for (rank, (id, v)) in self.worst.iter().enumerate() {
            writeln!(s, "{:>4}  {id}  {v:.4}", rank + 1).unwrap();
        }
        s.push_str("\ncategories\n");
        for (key, alias, desc) in ERROR_CATEGORIES {
            let label = match alias {
                Some(a) => format!("{key}/{a}"),
                None => key.to_string(),
            };
            writeln!(s, "  {label:<8} {:>4}  {desc}", self.categories[key]).unwrap();
        }
        s
    }
}

/// Draws a bar chart of IoU values over `bins` equal-width bins on `[0, 1]`.
pub fn save_iou_histogram(ious: &[f64], bins: usize, path: &Path) -> Result<()> {
    if bins == 0 {
        return Err(Error::InvalidInput("histogram with zero bins".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in ious {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let (bar, gap, height) = (12u32, 2u32, 160u32);
    let width = bins as u32 * (bar + gap) + gap;
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut img = image::RgbImage::from_pixel(width, height + 2, image::Rgb([255, 255, 255]));
    for (i, &c) in counts.iter().enumerate() {
        let h = (c as u64 * height as u64 / max as u64) as u32;
        let x0 = gap + i as u32 * (bar + gap);
        for x in x0..x0 + bar {
            for y in height - h..height {
                img.put_pixel(x, y, image::Rgb([60, 90, 160]));
            }
        }
    }
    for x in 0..width {
        img.put_pixel(x, height, image::Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}
