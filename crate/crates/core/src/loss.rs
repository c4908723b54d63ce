//! Set-prediction losses: the entity loss, the Θ-gated triplet loss, and
//! the total over all decoder layers.
//!
//! Matching runs on extracted values (no gradient flows through the
//! assignment); the loss terms themselves are built on the tape. Box
//! regression terms are composed from scalar primitives, so their gradients
//! come from the same audited backward rules as everything else.

use serde::Serialize;

use crate::boxes::{assign_entities, assign_triplets, AssignmentResult, BBox, GtTriplet};
use crate::model::{LayerEntityVars, LayerTripletVars, ModelOutput};
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Cross-entropy weight for the padded background / no-relation class.
/// With many more slots than ground truths, an unweighted padded class
/// drowns the real signal.
pub const BACKGROUND_CLASS_WEIGHT: f64 = 0.1;

pub const BOX_L1_WEIGHT: f64 = 5.0;
pub const BOX_GIOU_WEIGHT: f64 = 2.0;

/// One decoder layer's loss components as values.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossTerms {
    pub entity_cls: f64,
    pub entity_box: f64,
    pub sub_cls: f64,
    pub sub_box: f64,
    pub obj_cls: f64,
    pub obj_box: f64,
    pub prd_cls: f64,
}

impl LossTerms {
    pub fn layer_total(&self) -> f64 {
        self.entity_cls
            + self.entity_box
            + self.sub_cls
            + self.sub_box
            + self.obj_cls
            + self.obj_box
            + self.prd_cls
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    /// Per decoder layer, first to last; every earlier layer is an
    /// auxiliary copy of the final loss at equal weight.
    pub layers: Vec<LossTerms>,
    pub total: f64,
}

/// Sum of absolute differences between a predicted `[4]` box row and a
/// constant target box.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: &BBox) -> Result<Var> {
    let t = tape.leaf(Tensor::new(
        vec![4],
        vec![target.cx, target.cy, target.w, target.h],
    )?);
    let diff = tape.sub(pred, t)?;
    let a = tape.abs(diff);
    Ok(tape.sum(a))
}

/// `1 − GIoU` between a predicted `[4]` cxcywh row and a constant target,
/// built from scalar primitives.
pub fn giou_loss(tape: &mut Tape, pred: Var, target: &BBox) -> Result<Var> {
    let e = |tape: &mut Tape, i: usize| tape.narrow(pred, 0, i, 1);
    let cx = e(tape, 0)?;
    let cy = e(tape, 1)?;
    let w = e(tape, 2)?;
    let h = e(tape, 3)?;
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let ax0 = tape.sub(cx, half_w)?;
    let ax1 = tape.add(cx, half_w)?;
    let ay0 = tape.sub(cy, half_h)?;
    let ay1 = tape.add(cy, half_h)?;
    let bx0 = tape.scalar(target.x0());
    let bx1 = tape.scalar(target.x1());
    let by0 = tape.scalar(target.y0());
    let by1 = tape.scalar(target.y1());

    let ix1 = tape.min_elem(ax1, bx1)?;
    let ix0 = tape.max_elem(ax0, bx0)?;
    let iw_raw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw_raw);
    let iy1 = tape.min_elem(ay1, by1)?;
    let iy0 = tape.max_elem(ay0, by0)?;
    let ih_raw = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let area_a = tape.mul(w, h)?;
    let area_b = tape.scalar(target.area());
    let areas = tape.add(area_a, area_b)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex0 = tape.min_elem(ax0, bx0)?;
    let ex1 = tape.max_elem(ax1, bx1)?;
    let ey0 = tape.min_elem(ay0, by0)?;
    let ey1 = tape.max_elem(ay1, by1)?;
    let ew = tape.sub(ex1, ex0)?;
    let eh = tape.sub(ey1, ey0)?;
    let enc = tape.mul(ew, eh)?;
    let gap = tape.sub(enc, union)?;
    let penalty = tape.div(gap, enc)?;
    let giou = tape.sub(iou, penalty)?;
    let neg = tape.scale(giou, -1.0);
    Ok(tape.add_const(neg, 1.0))
}

/// `5·L1 + 2·(1−GIoU)` for one matched slot.
fn box_term(tape: &mut Tape, boxes: Var, slot: usize, target: &BBox) -> Result<Var> {
    let row = tape.narrow(boxes, 0, slot, 1)?;
    let row = tape.reshape(row, vec![4])?;
    let l1 = l1_loss(tape, row, target)?;
    let g = giou_loss(tape, row, target)?;
    let l1w = tape.scale(l1, BOX_L1_WEIGHT);
    let gw = tape.scale(g, BOX_GIOU_WEIGHT);
    tape.add(l1w, gw)
}

/// Sum the box terms over matched slots, averaged over the number of real
/// ground truths.
fn box_terms(
    tape: &mut Tape,
    boxes: Var,
    matched: &[(usize, &BBox)],
    gt_count: usize,
) -> Result<Var> {
    if matched.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut terms = Vec::with_capacity(matched.len());
    for &(slot, target) in matched {
        terms.push(box_term(tape, boxes, slot, target)?);
    }
    let sum = tape.add_many(&terms)?;
    Ok(tape.scale(sum, 1.0 / gt_count as f64))
}

pub struct EntityLossVars {
    pub cls: Var,
    pub bbox: Var,
}

/// Entity set loss for one decoder layer: weighted cross-entropy over all
/// slots plus box regression on the matched ones.
pub fn entity_loss(
    tape: &mut Tape,
    layer: &LayerEntityVars,
    preds: &[(Vec<f64>, BBox)],
    gts: &[(usize, BBox)],
    background_class: usize,
) -> Result<EntityLossVars> {
    let assignment = assign_entities(preds, gts)?;
    let mut targets = Vec::with_capacity(preds.len());
    let mut weights = Vec::with_capacity(preds.len());
    let mut matched = Vec::new();
    for (slot, m) in assignment.iter().enumerate() {
        match m {
            Some(g) => {
                targets.push(gts[*g].0);
                weights.push(1.0);
                matched.push((slot, &gts[*g].1));
            }
            None => {
                targets.push(background_class);
                weights.push(BACKGROUND_CLASS_WEIGHT);
            }
        }
    }
    let cls = tape.cross_entropy_rows(layer.logits, &targets, &weights)?;
    let bbox = box_terms(tape, layer.boxes, &matched, gts.len())?;
    Ok(EntityLossVars { cls, bbox })
}

pub struct TripletLossVars {
    pub sub_cls: Var,
    pub sub_box: Var,
    pub obj_cls: Var,
    pub obj_box: Var,
    pub prd_cls: Var,
}

/// Triplet set loss for one decoder layer under a fixed assignment. The Θ
/// flags zero out the subject or object branch of excused slots, which
/// makes their gradient contribution exactly zero.
pub fn triplet_loss(
    tape: &mut Tape,
    layer: &LayerTripletVars,
    assignment: &AssignmentResult,
    gts: &[GtTriplet],
    background_class: usize,
    no_relation_class: usize,
) -> Result<TripletLossVars> {
    let n = assignment.slots.len();
    let mut sub_targets = Vec::with_capacity(n);
    let mut sub_weights = Vec::with_capacity(n);
    let mut obj_targets = Vec::with_capacity(n);
    let mut obj_weights = Vec::with_capacity(n);
    let mut prd_targets = Vec::with_capacity(n);
    let mut prd_weights = Vec::with_capacity(n);
    let mut sub_matched = Vec::new();
    let mut obj_matched = Vec::new();
    for (slot, st) in assignment.slots.iter().enumerate() {
        match st.gt {
            Some(g) => {
                let gt = &gts[g];
                sub_targets.push(gt.sub_class);
                sub_weights.push(1.0);
                obj_targets.push(gt.obj_class);
                obj_weights.push(1.0);
                prd_targets.push(gt.predicate);
                prd_weights.push(1.0);
                sub_matched.push((slot, &gt.sub_box));
                obj_matched.push((slot, &gt.obj_box));
            }
            None => {
                sub_targets.push(background_class);
                sub_weights.push(if st.theta_s {
                    BACKGROUND_CLASS_WEIGHT
                } else {
                    0.0
                });
                obj_targets.push(background_class);
                obj_weights.push(if st.theta_o {
                    BACKGROUND_CLASS_WEIGHT
                } else {
                    0.0
                });
                prd_targets.push(no_relation_class);
                prd_weights.push(BACKGROUND_CLASS_WEIGHT);
            }
        }
    }
    let sub_cls = tape.cross_entropy_rows(layer.sub_logits, &sub_targets, &sub_weights)?;
    let obj_cls = tape.cross_entropy_rows(layer.obj_logits, &obj_targets, &obj_weights)?;
    let prd_cls = tape.cross_entropy_rows(layer.prd_logits, &prd_targets, &prd_weights)?;
    let sub_box = box_terms(tape, layer.sub_boxes, &sub_matched, gts.len())?;
    let obj_box = box_terms(tape, layer.obj_boxes, &obj_matched, gts.len())?;
    Ok(TripletLossVars {
        sub_cls,
        sub_box,
        obj_cls,
        obj_box,
        prd_cls,
    })
}

pub struct TotalLoss {
    pub total: Var,
    pub layer_vars: Vec<(EntityLossVars, TripletLossVars)>,
}

impl TotalLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data[0];
        let layers: Vec<LossTerms> = self
            .layer_vars
            .iter()
            .map(|(e, t)| LossTerms {
                entity_cls: v(e.cls),
                entity_box: v(e.bbox),
                sub_cls: v(t.sub_cls),
                sub_box: v(t.sub_box),
                obj_cls: v(t.obj_cls),
                obj_box: v(t.obj_box),
                prd_cls: v(t.prd_cls),
            })
            .collect();
        LossBreakdown {
            total: v(self.total),
            layers,
        }
    }
}

/// Entity + triplet loss on the final decoder layer plus the same pair on
/// every earlier layer at equal weight.
pub fn total_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    entities: &[(usize, BBox)],
    triplets: &[GtTriplet],
    entity_classes: usize,
    predicate_classes: usize,
    t_iou: f64,
) -> Result<TotalLoss> {
    let mut layer_vars = Vec::with_capacity(out.layers());
    let mut parts = Vec::new();
    for l in 0..out.layers() {
        let ent_preds = out.layer_entities(tape, l);
        let ent = entity_loss(
            tape,
            &out.entity_layers[l],
            &ent_preds,
            entities,
            entity_classes,
        )?;
        let tri_preds = out.layer_triplets(tape, l);
        let assignment = assign_triplets(&tri_preds, triplets, t_iou)?;
        let tri = triplet_loss(
            tape,
            &out.triplet_layers[l],
            &assignment,
            triplets,
            entity_classes,
            predicate_classes,
        )?;
        parts.extend([
            ent.cls, ent.bbox, tri.sub_cls, tri.sub_box, tri.obj_cls, tri.obj_box, tri.prd_cls,
        ]);
        layer_vars.push((ent, tri));
    }
    let total = tape.add_many(&parts)?;
    Ok(TotalLoss { total, layer_vars })
}
