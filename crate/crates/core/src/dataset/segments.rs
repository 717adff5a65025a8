//! Target-mask selection from a segment label map and a bounding box.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::types::{BBox, BinaryMask};

/// Per-pixel segment ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("{} labels for a {height}x{width} map", labels.len()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// A 4-connected run of pixels sharing one non-zero label.
#[derive(Debug, Clone)]
pub struct Segment {
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
}

/// 4-connected components of equal non-zero labels, in raster order of their
/// first pixel.
pub fn connected_segments(map: &LabelMap) -> Vec<Segment> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let label = map.labels[start];
        if label == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            pixels.push((y, x));
            let mut visit = |j: usize| {
                if !seen[j] && map.labels[j] == label {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(Segment { label, pixels });
    }
    out
}

/// Mask of the largest segment lying entirely inside `bbox`.
///
/// Ties on area go to the smaller segment id, then to the segment whose first
/// pixel comes first in raster order.
pub fn select_target_mask(map: &LabelMap, bbox: BBox) -> Result<BinaryMask> {
    if bbox.x_max >= map.width || bbox.y_max >= map.height || bbox.x_min > bbox.x_max || bbox.y_min > bbox.y_max {
        return Err(shape_err!(
            "bbox {bbox:?} outside the {}x{} label map",
            map.height,
            map.width
        ));
    }
    let best = connected_segments(map)
        .into_iter()
        .filter(|s| s.pixels.iter().all(|&(y, x)| bbox.contains(y, x)))
        .fold(None::<Segment>, |best, s| match best {
            Some(b) if (b.pixels.len(), std::cmp::Reverse(b.label)) >= (s.pixels.len(), std::cmp::Reverse(s.label)) => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| Error::EmptyResult(format!("no segment fully inside {bbox:?}")))?;
    let mut mask = BinaryMask::empty(map.height, map.width);
    for (y, x) in best.pixels {
        mask.set(y, x, true);
    }
    Ok(mask)
}
