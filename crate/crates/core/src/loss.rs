//! Training objective: stage-1 dense losses, the per-layer set loss, target
//! filtering and teacher forcing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::detection_head::{LayerOutput, BOX_DIM};
use crate::matching::{hungarian_rect, match_cost};
use crate::proposal_head::{reg, DenseOutput, DenseTargets, Proposal};
use crate::scene_sim::Box3D;
use crate::Error;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const DEFAULT_EMPTY_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalLoss {
    pub focal: f64,
    pub centerness: f64,
    pub offset: f64,
    pub depth: f64,
    pub box2d: f64,
    pub corners: f64,
    pub rotation: f64,
    pub size: f64,
    pub velocity: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub classification: f64,
    pub box_l1: f64,
    pub matched: usize,
    pub total: f64,
}

/// One training step's loss breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub proposal: ProposalLoss,
    pub layers: Vec<LayerLoss>,
    pub filtered_targets: usize,
    pub teacher_forced: bool,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(
        proposal: ProposalLoss,
        layers: Vec<LayerLoss>,
        filtered_targets: usize,
        teacher_forced: bool,
        lambda: f64,
    ) -> Self {
        let det: Vec<f64> = layers.iter().map(|l| l.total).collect();
        let total = total_loss(proposal.total, &det, lambda);
        Self {
            proposal,
            layers,
            filtered_targets,
            teacher_forced,
            lambda,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = &self.proposal;
        let head = [
            p.focal,
            p.centerness,
            p.offset,
            p.depth,
            p.box2d,
            p.corners,
            p.rotation,
            p.size,
            p.velocity,
            p.total,
            self.total,
        ];
        head.iter().all(|x| x.is_finite())
            && self.layers.iter().all(|l| {
                l.classification.is_finite() && l.box_l1.is_finite() && l.total.is_finite()
            })
    }
}

/// `λ · L_pro + Σ L_det`.
pub fn total_loss(l_pro: f64, l_det: &[f64], lambda: f64) -> f64 {
    lambda * l_pro + l_det.iter().sum::<f64>()
}

fn add_all(g: &mut Graph, terms: &[Var]) -> Result<Var, Error> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

/// Graph form of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, l_pro: Var, l_det: &[Var], lambda: f64) -> Result<Var, Error> {
    let mut terms = vec![g.scale(l_pro, lambda)];
    terms.extend_from_slice(l_det);
    add_all(g, &terms)
}

/// Focal classification over every cell plus centerness BCE and per-branch
/// smooth-L1 on positive cells, each divided by `max(1, #positives)`.
/// Branch reports are unweighted; `aux_weight` scales the auxiliary
/// branches (2D box, corners, rotation, size, velocity) in the total.
pub fn proposal_loss(
    g: &mut Graph,
    dense: &DenseOutput,
    targets: &DenseTargets,
    aux_weight: f64,
) -> Result<(Var, ProposalLoss), Error> {
    let npos = targets.positives.len();
    let inv = 1.0 / npos.max(1) as f64;
    let focal = g.sigmoid_focal(dense.cls_logits, &targets.cls, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let focal = g.sum(focal);
    let focal = g.scale(focal, inv);
    let mut report = ProposalLoss {
        focal: g.scalar(focal),
        ..Default::default()
    };
    let mut terms = vec![focal];
    if npos > 0 {
        let cells: Vec<usize> = targets.positives.iter().map(|p| p.cell).collect();
        let ctr = g.gather_rows(dense.ctr_logits, &cells)?;
        let ctr_t: Vec<f64> = targets.positives.iter().map(|p| p.centerness).collect();
        let bce = g.bce_with_logits(ctr, &ctr_t)?;
        let bce = g.sum(bce);
        let bce = g.scale(bce, inv);
        report.centerness = g.scalar(bce);
        terms.push(bce);

        let rc = g.shape(dense.reg)[1];
        let rows = g.gather_rows(dense.reg, &cells)?;
        let t: Vec<f64> = targets
            .positives
            .iter()
            .flat_map(|p| p.reg[..rc].to_vec())
            .collect();
        let w: Vec<f64> = targets
            .positives
            .iter()
            .flat_map(|p| p.reg_weight[..rc].to_vec())
            .collect();
        let sl = g.smooth_l1(rows, &t, &w, SMOOTH_L1_BETA)?;
        let mut branches: Vec<(std::ops::Range<usize>, &mut f64, f64)> = vec![
            (reg::OFFSET, &mut report.offset, 1.0),
            (reg::DEPTH..reg::DEPTH + 1, &mut report.depth, 1.0),
        ];
        if rc == reg::ALL {
            branches.extend([
                (reg::BOX2D, &mut report.box2d, aux_weight),
                (reg::CORNERS, &mut report.corners, aux_weight),
                (reg::ROT, &mut report.rotation, aux_weight),
                (reg::SIZE, &mut report.size, aux_weight),
                (reg::VELOCITY, &mut report.velocity, aux_weight),
            ]);
        }
        for (range, slot, weight) in branches {
            let mask: Vec<f64> = (0..npos * rc)
                .map(|i| if range.contains(&(i % rc)) { inv } else { 0.0 })
                .collect();
            let term = g.weighted_sum(sl, &mask)?;
            *slot = g.scalar(term);
            terms.push(if weight == 1.0 {
                term
            } else {
                g.scale(term, weight)
            });
        }
    }
    let total = add_all(g, &terms)?;
    report.total = g.scalar(total);
    Ok((total, report))
}

/// A stage-2 target: class and the 10-vector (center, log sizes, sin/cos
/// yaw, velocity).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetTarget {
    pub class_id: usize,
    pub box10: [f64; BOX_DIM],
}

impl SetTarget {
    pub fn from_box(b: &Box3D) -> Self {
        Self {
            class_id: b.class_id,
            box10: [
                b.x,
                b.y,
                b.z,
                b.w.ln(),
                b.l.ln(),
                b.h.ln(),
                b.yaw.sin(),
                b.yaw.cos(),
                b.vx,
                b.vy,
            ],
        }
    }
}

/// `[n, 10]` predicted boxes: absolute centers followed by the remaining
/// regression columns. The L1 distance to a target equals the residual-form
/// distance relative to the layer's input positions.
pub fn layer_boxes(g: &mut Graph, out: &LayerOutput) -> Result<Var, Error> {
    let rest = g.slice(out.reg, 1, 3, BOX_DIM - 3)?;
    Ok(g.concat(&[out.center, rest], 1)?)
}

pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |x| x / s)
        })
        .collect()
}

/// Optimal `(target, prediction)` pairs under the pairwise matching cost.
pub fn match_layer(
    g: &Graph,
    logits: Var,
    boxes: Var,
    targets: &[SetTarget],
) -> Result<Vec<(usize, usize)>, Error> {
    let n = g.shape(logits)[0];
    if n == 0 || targets.is_empty() {
        return Ok(vec![]);
    }
    let cols = g.shape(logits)[1];
    let probs = softmax_rows(g.value(logits), cols);
    let bv = g.value(boxes);
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            (0..n)
                .map(|j| {
                    match_cost(
                        &t.box10,
                        Some(t.class_id),
                        &bv[j * BOX_DIM..(j + 1) * BOX_DIM],
                        &probs[j * cols..(j + 1) * cols],
                    )
                })
                .collect()
        })
        .collect();
    hungarian_rect(&cost)
}

/// Set loss for one layer under `matching`: matched slots pay `-log p(c)`
/// plus the box L1, the rest pay `empty_weight · -log p(∅)`. The sum is
/// divided by `max(1, #matched)`.
pub fn set_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    targets: &[SetTarget],
    matching: &[(usize, usize)],
    empty_weight: f64,
) -> Result<(Var, LayerLoss), Error> {
    let n = g.shape(logits)[0];
    let cols = g.shape(logits)[1];
    let empty = cols - 1;
    let inv = 1.0 / matching.len().max(1) as f64;
    if n == 0 {
        let z = g.constant(vec![1], vec![0.0])?;
        return Ok((z, LayerLoss::default()));
    }
    let mut labels = vec![empty; n];
    let mut weights = vec![-empty_weight * inv; n];
    for &(t, p) in matching {
        labels[p] = targets[t].class_id;
        weights[p] = -inv;
    }
    let lsm = g.log_softmax(logits, 1)?;
    let picked = g.pick(lsm, &labels)?;
    let cls = g.weighted_sum(picked, &weights)?;
    let mut report = LayerLoss {
        classification: g.scalar(cls),
        matched: matching.len(),
        ..Default::default()
    };
    let total = if matching.is_empty() {
        cls
    } else {
        let preds: Vec<usize> = matching.iter().map(|m| m.1).collect();
        let rows = g.gather_rows(boxes, &preds)?;
        let tv: Vec<f64> = matching.iter().flat_map(|m| targets[m.0].box10).collect();
        let tc = g.constant(vec![matching.len(), BOX_DIM], tv)?;
        let d = g.sub(rows, tc)?;
        let d = g.abs(d);
        let l1 = g.sum(d);
        let l1 = g.scale(l1, inv);
        report.box_l1 = g.scalar(l1);
        g.add(cls, l1)?
    };
    report.total = g.scalar(total);
    Ok((total, report))
}

/// GT indices whose 2D box (in the proposal's view, inclusive edges)
/// contains at least one proposal's source pixel. Sorted.
pub fn target_filtering(proposals: &[Proposal], boxes2d: &[Vec<Option<[f64; 4]>>]) -> Vec<usize> {
    (0..boxes2d.len())
        .filter(|&gi| {
            proposals.iter().any(|p| {
                boxes2d[gi].get(p.view).copied().flatten().is_some_and(|b| {
                    let (u, v) = p.pixel;
                    u >= b[0] && u <= b[2] && v >= b[1] && v <= b[3]
                })
            })
        })
        .collect()
}

/// With probability `p` (one draw) returns the GT objectness map instead of
/// the predicted one. The flag reports the replacement.
pub fn teacher_forcing<'a>(
    predicted: &'a [f64],
    ground_truth: &'a [f64],
    p: f64,
    rng: &mut impl Rng,
) -> Result<(&'a [f64], bool), Error> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "teacher-forcing probability {p} outside [0, 1]"
        )));
    }
    if predicted.len() != ground_truth.len() {
        return Err(Error::Domain("objectness maps differ in size".into()));
    }
    let replace = rng.gen::<f64>() < p;
    Ok((if replace { ground_truth } else { predicted }, replace))
}
