//! Training losses: penalty-reduced focal loss on a Gaussian heatmap, L1 and
//! GIoU on box corners, feature MSE for distillation, and their weighted sum.

use crate::error::{Error, Result};
use crate::event_io::BBox;
use crate::tensor::{cast, to_f64, Mat, Real};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const SCORE_CLAMP: f64 = 1e-4;
pub const MIN_OVERLAP: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: 1.0,
            l1: 14.0,
            giou: 1.0,
            kd: 0.1,
        }
    }
}

impl LossWeights {
    pub fn without_kd(self) -> Self {
        LossWeights { kd: 0.0, ..self }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub kd: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    /// Adds the terms of `other`; weights are taken from it.
    pub fn accumulate(&mut self, other: &LossBundle) {
        self.focal += other.focal;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.kd += other.kd;
        self.total += other.total;
        self.weights = other.weights;
    }

    pub fn scaled(&self, s: f64) -> LossBundle {
        LossBundle {
            focal: self.focal * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            kd: self.kd * s,
            total: self.total * s,
            weights: self.weights,
        }
    }
}

/// Weighted sum of the four terms, accumulated left to right.
pub fn total_loss(focal: f64, l1: f64, giou: f64, kd: f64, weights: LossWeights) -> Result<LossBundle> {
    for (name, v) in [("focal", focal), ("l1", l1), ("giou", giou), ("kd", kd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    let mut total = weights.focal * focal;
    total += weights.l1 * l1;
    total += weights.giou * giou;
    total += weights.kd * kd;
    Ok(LossBundle {
        focal,
        l1,
        giou,
        kd,
        weights,
        total,
    })
}

/// Largest radius (in cells) for which a box shifted by it keeps IoU
/// `min_overlap` with the original, as used by CenterNet.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Training target for one normalized ground-truth box on a `size x size`
/// map.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub size: usize,
    /// Row-major heatmap with exactly 1 at `cell`.
    pub heatmap: Vec<f64>,
    pub cell: (usize, usize),
    pub offset: (f64, f64),
    pub wh: (f64, f64),
    /// Corners `[x1, y1, x2, y2]` of the normalized box.
    pub corners: [f64; 4],
}

pub fn encode_target(gt: &BBox, size: usize) -> Target {
    let (cx, cy) = gt.center();
    let s = size as f64;
    let cell_of = |v: f64| ((v * s).floor().max(0.0) as usize).min(size - 1);
    let (c, r) = (cell_of(cx), cell_of(cy));
    let radius = gaussian_radius(gt.h * s, gt.w * s, MIN_OVERLAP).floor().max(0.0) as i64;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut heatmap = vec![0.0; size * size];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (y, x) = (r as i64 + dy, c as i64 + dx);
            if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            heatmap[y as usize * size + x as usize] = v;
        }
    }
    heatmap[r * size + c] = 1.0;
    Target {
        size,
        heatmap,
        cell: (r, c),
        offset: (cx * s - c as f64, cy * s - r as f64),
        wh: (gt.w, gt.h),
        corners: gt.corners(),
    }
}

/// Penalty-reduced focal loss, normalized by the number of positives.
/// Scores are clamped to `[1e-4, 1 - 1e-4]`; clamped entries get no gradient.
pub fn focal_loss(scores: &[f64], heatmap: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), heatmap.len(), "focal loss operands differ in length");
    let num_pos = heatmap.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for (i, (&raw, &y)) in scores.iter().zip(heatmap).enumerate() {
        let p = raw.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let live = p == raw;
        let (l, dl) = if y == 1.0 {
            let q = 1.0 - p;
            let l = -q.powi(FOCAL_ALPHA) * p.ln();
            // d/dp [-(1-p)^a ln p]
            let dl = a_f64() * q.powi(FOCAL_ALPHA - 1) * p.ln() - q.powi(FOCAL_ALPHA) / p;
            (l, dl)
        } else {
            let w = (1.0 - y).powi(FOCAL_BETA);
            let q = 1.0 - p;
            let l = -w * p.powi(FOCAL_ALPHA) * q.ln();
            let dl = -w * (a_f64() * p.powi(FOCAL_ALPHA - 1) * q.ln() - p.powi(FOCAL_ALPHA) / q);
            (l, dl)
        };
        loss += l;
        if live {
            grad[i] = dl / num_pos;
        }
    }
    (loss / num_pos, grad)
}

fn a_f64() -> f64 {
    FOCAL_ALPHA as f64
}

/// Mean absolute difference of the four corner coordinates.
pub fn l1_loss(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut l = 0.0;
    let mut g = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - gt[i];
        l += d.abs();
        g[i] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (l / 4.0, g)
}

/// Generalized IoU of two corner-format boxes.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    giou_loss(a, b).0.mul_add(-1.0, 1.0)
}

/// `1 - GIoU` and its gradient with respect to the first box.
pub fn giou_loss(p: &[f64; 4], g: &[f64; 4]) -> (f64, [f64; 4]) {
    let ap = (p[2] - p[0]) * (p[3] - p[1]);
    let ag = (g[2] - g[0]) * (g[3] - g[1]);
    let iw_raw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih_raw = p[3].min(g[3]) - p[1].max(g[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + ag - inter;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let hull = cw * ch;
    let union_s = union.max(1e-12);
    let hull_s = hull.max(1e-12);
    let iou = inter / union_s;
    let loss = 1.0 - iou + (hull - union) / hull_s;

    // partial derivatives of the pieces w.r.t. (x1, y1, x2, y2) of `p`
    let dap = [-(p[3] - p[1]), -(p[2] - p[0]), p[3] - p[1], p[2] - p[0]];
    let mut di = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if p[0] > g[0] {
            di[0] = -ih;
        }
        if p[2] < g[2] {
            di[2] = ih;
        }
        if p[1] > g[1] {
            di[1] = -iw;
        }
        if p[3] < g[3] {
            di[3] = iw;
        }
    }
    let mut dc = [0.0; 4];
    if p[0] < g[0] {
        dc[0] = -ch;
    }
    if p[2] > g[2] {
        dc[2] = ch;
    }
    if p[1] < g[1] {
        dc[1] = -cw;
    }
    if p[3] > g[3] {
        dc[3] = cw;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = dap[k] - di[k];
        let diou = (di[k] * union_s - inter * du) / (union_s * union_s);
        // loss = 2 - iou - union / hull
        let dratio = (du * hull_s - union * dc[k]) / (hull_s * hull_s);
        grad[k] = -diou - dratio;
    }
    (loss, grad)
}

/// `mean((f - s)^2)` and its gradient on `f`; the teacher side `s` gets none.
pub fn kd_loss<T: Real>(fast: &Mat<T>, slow: &Mat<T>) -> Result<(f64, Mat<T>)> {
    if fast.rows != slow.rows || fast.cols != slow.cols {
        return Err(Error::shape(
            "distillation features",
            format!("student {}x{} vs teacher {}x{}", fast.rows, fast.cols, slow.rows, slow.cols),
        ));
    }
    let n = fast.data.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Mat::zeros(fast.rows, fast.cols);
    let scale = cast::<T>(2.0 / n);
    for ((g, &a), &b) in grad.data.iter_mut().zip(&fast.data).zip(&slow.data) {
        let d = a - b;
        sum += to_f64(d) * to_f64(d);
        *g = d * scale;
    }
    Ok((sum / n, grad))
}
