//! Proxy average precision of occupancy-grid object detection.

use super::head::TaskPrediction;
use super::scene::SceneBox;
use crate::tensor::kernels::sigmoid;

/// Cells scoring below this probability produce no detection.
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MATCH_IOU: f64 = 0.5;

/// A box rasterized to whole grid cells, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

impl CellRect {
    /// Snaps a center/extent box to cell edges and clips it to the grid.
    pub fn rasterize(cx: f64, cy: f64, w: f64, h: f64, gw: usize, gh: usize) -> Self {
        let snap = |v: f64, hi: usize| (v.round() as i64).clamp(0, hi as i64);
        Self {
            x0: snap(cx - w / 2.0, gw),
            x1: snap(cx + w / 2.0, gw),
            y0: snap(cy - h / 2.0, gh),
            y1: snap(cy + h / 2.0, gh),
        }
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0).max(0) * (self.y1 - self.y0).max(0)
    }

    pub fn iou(&self, o: &Self) -> f64 {
        let ix = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let iy = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        let inter = ix * iy;
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub rect: CellRect,
}

/// Decodes one scene's prediction (batch 1) into scored boxes after
/// greedy non-maximum suppression.
pub fn detect(pred: &TaskPrediction) -> Vec<Detection> {
    let s = pred.occupancy.shape();
    let (gh, gw) = (s[2], s[3]);
    let cells = gh * gw;
    let occ = pred.occupancy.data();
    let bx = pred.boxes.data();
    let mut cands = Vec::new();
    for i in 0..cells {
        let score = sigmoid(occ[i] as f64);
        if score < SCORE_THRESHOLD {
            continue;
        }
        let (gy, gx) = ((i / gw) as f64, (i % gw) as f64);
        let cx = gx + 0.5 + bx[i] as f64;
        let cy = gy + 0.5 + bx[cells + i] as f64;
        // clamp log extents so a wild regression cannot overflow
        let w = (bx[2 * cells + i] as f64).clamp(-10.0, 10.0).exp();
        let h = (bx[3 * cells + i] as f64).clamp(-10.0, 10.0).exp();
        let rect = CellRect::rasterize(cx, cy, w, h, gw, gh);
        if rect.area() > 0 {
            cands.push(Detection { score, rect });
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for c in cands {
        if keep.iter().all(|k| k.rect.iou(&c.rect) <= NMS_IOU) {
            keep.push(c);
        }
    }
    keep
}

pub fn truth_rects(boxes: &[SceneBox], gw: usize, gh: usize) -> Vec<CellRect> {
    boxes
        .iter()
        .map(|b| CellRect::rasterize(b.cx, b.cy, b.w, b.h, gw, gh))
        .collect()
}

/// Pooled all-point-interpolated AP over scenes, in `[0, 100]`. Each entry
/// pairs one scene's detections with its ground-truth rectangles.
pub fn average_precision(scenes: &[(Vec<Detection>, Vec<CellRect>)]) -> f64 {
    let n_truth: usize = scenes.iter().map(|(_, t)| t.len()).sum();
    if n_truth == 0 {
        return 0.0;
    }
    let mut all: Vec<(f64, usize, CellRect)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (d, _))| d.iter().map(move |d| (d.score, s, d.rect)))
        .collect();
    // stable: ties keep scene order
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut matched: Vec<Vec<bool>> = scenes.iter().map(|(_, t)| vec![false; t.len()]).collect();
    let mut tp = Vec::with_capacity(all.len());
    for (_, s, rect) in &all {
        let truth = &scenes[*s].1;
        let best =
            truth
                .iter()
                .enumerate()
                .map(|(j, t)| (j, rect.iou(t)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
        let hit = match best {
            Some((j, v)) if v >= MATCH_IOU && !matched[*s][j] => {
                matched[*s][j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &hit in &tp {
        if hit {
            ntp += 1;
        } else {
            nfp += 1;
        }
        precision.push(ntp as f64 / (ntp + nfp) as f64);
        recall.push(ntp as f64 / n_truth as f64);
    }
    // precision envelope, then area under the step function
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    100.0 * ap
}
