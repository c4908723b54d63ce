//! Box geometry, matching costs, the Hungarian solver, and the IoU-relaxed
//! assignment of ground-truth triplets to prediction slots.

use serde::{Deserialize, Serialize};

use crate::model::TripletPrediction;
use crate::{Error, Result};

/// Axis-aligned box as normalized center/size, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box enclosing both.
    pub fn union_box(&self, other: &BBox) -> BBox {
        let x0 = self.x0().min(other.x0());
        let y0 = self.y0().min(other.y0());
        let x1 = self.x1().max(other.x1());
        let y1 = self.y1().max(other.y1());
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }
}

/// Sum of absolute coordinate differences over (cx, cy, w, h).
pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Generalized IoU: IoU minus the enclosing-area penalty. In (−1, 1].
pub fn box_giou(a: &BBox, b: &BBox) -> Result<f64> {
    for (bx, name) in [(a, "first"), (b, "second")] {
        if bx.w <= 1e-9 || bx.h <= 1e-9 {
            return Err(Error::Numeric(format!(
                "giou: degenerate {name} box {bx:?}"
            )));
        }
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enc = a.union_box(b).area();
    Ok(inter / union - (enc - union) / enc)
}

pub const CLASS_COST_ALPHA: f64 = 0.25;
pub const CLASS_COST_GAMMA: f64 = 2.0;
pub const CLASS_COST_EPS: f64 = 1e-8;
pub const BOX_COST_L1_WEIGHT: f64 = 5.0;
pub const BOX_COST_GIOU_WEIGHT: f64 = 2.0;

/// Focal-style class cost of the probability assigned to the target class:
/// a positive term for not predicting it minus a negative term for
/// predicting it.
pub fn class_cost(prob_of_target: f64) -> f64 {
    let p = prob_of_target;
    let pos = CLASS_COST_ALPHA * (1.0 - p).powf(CLASS_COST_GAMMA) * (-(p + CLASS_COST_EPS).ln());
    let neg =
        (1.0 - CLASS_COST_ALPHA) * p.powf(CLASS_COST_GAMMA) * (-(1.0 - p + CLASS_COST_EPS).ln());
    pos - neg
}

pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Matching cost of one prediction against one ground-truth item: the class
/// cost of the target's probability plus, when the target carries a box,
/// the weighted L1 and GIoU box costs.
pub fn entity_cost(
    class_probs: &[f64],
    pred_box: &BBox,
    gt_class: usize,
    gt_box: Option<&BBox>,
) -> Result<f64> {
    let mut cost = class_cost(class_probs[gt_class]);
    if let Some(gt) = gt_box {
        cost += BOX_COST_L1_WEIGHT * box_l1(pred_box, gt)
            + BOX_COST_GIOU_WEIGHT * (1.0 - box_giou(pred_box, gt)?);
    }
    Ok(cost)
}

/// Ground-truth triplet with its entity classes and boxes resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub sub_class: usize,
    pub sub_box: BBox,
    pub predicate: usize,
    pub obj_class: usize,
    pub obj_box: BBox,
}

/// Subject cost + object cost + predicate cost.
pub fn triplet_cost(pred: &TripletPrediction, gt: &GtTriplet) -> Result<f64> {
    let sub_probs = softmax_slice(&pred.subject_logits);
    let obj_probs = softmax_slice(&pred.object_logits);
    let prd_probs = softmax_slice(&pred.predicate_logits);
    let sub = entity_cost(&sub_probs, &pred.subject_box, gt.sub_class, Some(&gt.sub_box))?;
    let obj = entity_cost(&obj_probs, &pred.object_box, gt.obj_class, Some(&gt.obj_box))?;
    let prd = class_cost(prd_probs[gt.predicate]);
    Ok(sub + obj + prd)
}

/// Dense prediction-by-ground-truth cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Minimum-cost injective assignment of every column to a distinct row,
/// for matrices with at least as many rows as columns. Returns the row
/// index chosen for each column.
///
/// Shortest-augmenting-path formulation with row/column potentials; ties
/// resolve to the lowest row index through the fixed scan order.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (nr, nc) = (cost.rows, cost.cols);
    if nc == 0 {
        return Ok(Vec::new());
    }
    if nr < nc {
        return Err(Error::Config(format!(
            "hungarian: {nr} rows < {nc} columns; pad the smaller side first"
        )));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("hungarian: non-finite cost entry".into()));
    }
    // 1-indexed potentials; p[j] holds the column currently assigned to row j.
    let mut u = vec![0.0_f64; nc + 1];
    let mut v = vec![0.0_f64; nr + 1];
    let mut p = vec![0_usize; nr + 1];
    let mut way = vec![0_usize; nr + 1];
    for i in 1..=nc {
        p[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; nr + 1];
        let mut used = vec![false; nr + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=nr {
                if used[j] {
                    continue;
                }
                let cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=nr {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0_usize; nc];
    for j in 1..=nr {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// What one prediction slot is trained against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTarget {
    /// Matched ground-truth triplet index; `None` means the padded
    /// background / no-relation target.
    pub gt: Option<usize>,
    /// Subject loss active for this slot.
    pub theta_s: bool,
    /// Object loss active for this slot.
    pub theta_o: bool,
}

/// Hungarian matching plus the per-slot Θ flags that gate the loss.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    /// gt index → prediction slot, one entry per ground-truth triplet.
    pub matched: Vec<(usize, usize)>,
    pub slots: Vec<SlotTarget>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Assign ground-truth triplets to prediction slots.
///
/// Matched slots take the full ground-truth target. Unmatched slots fall
/// back to background / no-relation, except that a branch whose argmax
/// label agrees with its best-overlapping ground truth of the same role at
/// IoU ≥ `t_iou` is excused from the loss (Θ = 0 for that branch). At
/// `t_iou` = 1 the relaxation is effectively off.
pub fn assign_triplets(
    preds: &[TripletPrediction],
    gts: &[GtTriplet],
    t_iou: f64,
) -> Result<AssignmentResult> {
    if !(t_iou > 0.0 && t_iou <= 1.0) {
        return Err(Error::Config(format!(
            "assignment threshold {t_iou} outside (0, 1]"
        )));
    }
    if preds.len() < gts.len() {
        return Err(Error::Config(format!(
            "{} prediction slots cannot cover {} ground-truth triplets; raise the query count",
            preds.len(),
            gts.len()
        )));
    }
    let mut cost = CostMatrix::new(preds.len(), gts.len());
    for (r, pred) in preds.iter().enumerate() {
        for (c, gt) in gts.iter().enumerate() {
            cost.set(r, c, triplet_cost(pred, gt)?);
        }
    }
    let rows = hungarian(&cost)?;
    let mut slot_gt = vec![None; preds.len()];
    let mut matched = Vec::with_capacity(gts.len());
    for (gt_idx, &row) in rows.iter().enumerate() {
        slot_gt[row] = Some(gt_idx);
        matched.push((gt_idx, row));
    }
    let slots = preds
        .iter()
        .zip(&slot_gt)
        .map(|(pred, &gt)| {
            if gt.is_some() {
                return SlotTarget {
                    gt,
                    theta_s: true,
                    theta_o: true,
                };
            }
            let excuse = |logits: &[f64], pred_box: &BBox, role: fn(&GtTriplet) -> (usize, BBox)| {
                let mut best: Option<(f64, usize)> = None;
                for g in gts {
                    let (cls, gbox) = role(g);
                    let iou = pred_box.iou(&gbox);
                    if best.map_or(true, |(b, _)| iou > b) {
                        best = Some((iou, cls));
                    }
                }
                match best {
                    Some((iou, cls)) => iou >= t_iou && argmax(logits) == cls,
                    None => false,
                }
            };
            SlotTarget {
                gt: None,
                theta_s: !excuse(&pred.subject_logits, &pred.subject_box, |g| {
                    (g.sub_class, g.sub_box)
                }),
                theta_o: !excuse(&pred.object_logits, &pred.object_box, |g| {
                    (g.obj_class, g.obj_box)
                }),
            }
        })
        .collect();
    Ok(AssignmentResult { matched, slots })
}

/// Hungarian match of entity predictions to ground-truth entities; returns
/// the matched ground-truth index per prediction slot.
pub fn assign_entities(
    preds: &[(Vec<f64>, BBox)],
    gts: &[(usize, BBox)],
) -> Result<Vec<Option<usize>>> {
    if preds.len() < gts.len() {
        return Err(Error::Config(format!(
            "{} entity slots cannot cover {} ground-truth entities",
            preds.len(),
            gts.len()
        )));
    }
    let mut cost = CostMatrix::new(preds.len(), gts.len());
    for (r, (logits, pbox)) in preds.iter().enumerate() {
        let probs = softmax_slice(logits);
        for (c, (cls, gbox)) in gts.iter().enumerate() {
            cost.set(r, c, entity_cost(&probs, pbox, *cls, Some(gbox))?);
        }
    }
    let rows = hungarian(&cost)?;
    let mut out = vec![None; preds.len()];
    for (gt_idx, &row) in rows.iter().enumerate() {
        out[row] = Some(gt_idx);
    }
    Ok(out)
}
