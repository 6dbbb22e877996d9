//! First stage: dense per-cell predictions, peak selection and lifting of
//! the selected cells into ego-frame proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoder::{CellRef, FeaturePyramid, PyramidLayout, NUM_LEVELS, STRIDES};
use crate::geometry::{CameraRig, EgoPoint, Z_MIN};
use crate::scene_sim::{gt_2d_box, Scene};
use crate::Error;

/// Column ranges of the dense regression output.
pub mod reg {
    use std::ops::Range;
    pub const OFFSET: Range<usize> = 0..2;
    pub const DEPTH: usize = 2;
    pub const BOX2D: Range<usize> = 3..7;
    pub const CORNERS: Range<usize> = 7..23;
    pub const ROT: Range<usize> = 23..25;
    pub const SIZE: Range<usize> = 25..28;
    pub const VELOCITY: Range<usize> = 28..30;
    /// Offset and depth only.
    pub const BASE: usize = 3;
    pub const ALL: usize = 30;
}

pub const TOWER_DEPTH: usize = 4;
/// Leading tower blocks that are 3×3 convolutions; the rest are per-cell.
/// Two give a 5×5-cell receptive field, enough to reach the projected
/// center from any positive cell.
pub const TOWER_CONV_BLOCKS: usize = 2;
/// Position normalization for the proposal encoding, meters.
pub const R_MAX: f64 = 55.0;
const FOCAL_PRIOR: f64 = 0.01;
const DEPTH_PRIOR: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelAssignSpec {
    /// Upper bounds of the 2D extent (input pixels) for levels 0..3; level 3 is unbounded.
    pub level_limits: [f64; 3],
    /// Positive cells lie within this many cells of the projected center.
    pub radius: f64,
    /// Centerness bandwidth in cells.
    pub sigma: f64,
}

impl Default for LevelAssignSpec {
    fn default() -> Self {
        Self {
            level_limits: [64.0, 128.0, 256.0],
            radius: 1.5,
            sigma: 2.5,
        }
    }
}

impl LevelAssignSpec {
    pub fn validate(&self) -> Result<(), Error> {
        let l = self.level_limits;
        if !(l[0] > 0.0 && l[0] < l[1] && l[1] < l[2] && self.radius > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config(format!("invalid level assignment {self:?}")));
        }
        Ok(())
    }

    /// Level whose extent range `(lo, hi]` contains `extent`.
    pub fn level_for(&self, extent: f64) -> usize {
        self.level_limits
            .iter()
            .position(|&hi| extent <= hi)
            .unwrap_or(NUM_LEVELS - 1)
    }
}

/// Supervision for one positive cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveCell {
    pub cell: usize,
    pub gt: usize,
    pub class_id: usize,
    pub centerness: f64,
    pub reg: [f64; reg::ALL],
    pub reg_weight: [f64; reg::ALL],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    pub num_classes: usize,
    /// Sorted by cell index.
    pub positives: Vec<PositiveCell>,
    /// `[total_cells × num_classes]` one-hot at positives.
    pub cls: Vec<f64>,
    /// Classwise max of `cls` times the centerness target, per cell.
    pub objectness: Vec<f64>,
    /// Per GT: has at least one positive cell.
    pub visible: Vec<bool>,
    /// Per GT, per view: clipped 2D box.
    pub boxes2d: Vec<Vec<Option<[f64; 4]>>>,
    /// Per GT, per view: assigned level (when the box is seen in that view).
    pub levels: Vec<Vec<Option<usize>>>,
}

/// Yaw about the vertical, expressed relative to the camera's optical axis.
pub fn camera_yaw(rig: &CameraRig, view: usize, yaw: f64) -> Result<f64, Error> {
    let cam = rig.view(view)?;
    let h =
        cam.extrinsics.rotation().transpose() * nalgebra::Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    Ok((-h.x).atan2(h.z))
}

struct Candidate {
    gt: usize,
    dist: f64,
    depth: f64,
    center: (f64, f64),
}

/// Dense targets for every view and level. A cell claimed by several
/// objects goes to the one whose projected center is closest (in cells), then
/// to the nearer camera depth, then to the lower GT index.
pub fn assign_dense_targets(
    scene: &Scene,
    layout: &PyramidLayout,
    spec: &LevelAssignSpec,
) -> Result<DenseTargets, Error> {
    let nc = scene.config.num_classes();
    let n = layout.total_cells();
    let rig = &scene.rig;
    let mut best: Vec<Option<Candidate>> = (0..n).map(|_| None).collect();
    let mut boxes2d = vec![vec![None; rig.len()]; scene.boxes.len()];
    let mut levels = vec![vec![None; rig.len()]; scene.boxes.len()];
    for (gi, b) in scene.boxes.iter().enumerate() {
        for j in 0..rig.len() {
            let Some(bb) = gt_2d_box(b, j, rig)? else {
                continue;
            };
            boxes2d[gi][j] = Some(bb);
            let extent = ((bb[2] - bb[0]) * (bb[3] - bb[1])).max(0.0).sqrt();
            let k = spec.level_for(extent);
            levels[gi][j] = Some(k);
            let pc = rig.project_to_view(b.center(), j, 1.0);
            if !pc.in_front() {
                continue;
            }
            let s = STRIDES[k] as f64;
            let (cx, cy) = (pc.u / s, pc.v / s);
            let (h, w) = layout.dims[k];
            let r = spec.radius;
            let (r0, r1) = (
                (cy - r).ceil().max(0.0),
                (cy + r).floor().min(h as f64 - 1.0),
            );
            let (c0, c1) = (
                (cx - r).ceil().max(0.0),
                (cx + r).floor().min(w as f64 - 1.0),
            );
            if r0 > r1 || c0 > c1 {
                continue;
            }
            for row in r0 as usize..=r1 as usize {
                for col in c0 as usize..=c1 as usize {
                    let dist = ((col as f64 - cx).powi(2) + (row as f64 - cy).powi(2)).sqrt();
                    if dist > r {
                        continue;
                    }
                    let idx = layout.index(CellRef {
                        level: k,
                        view: j,
                        row,
                        col,
                    });
                    let cand = Candidate {
                        gt: gi,
                        dist,
                        depth: pc.depth,
                        center: (cx, cy),
                    };
                    let better = match &best[idx] {
                        None => true,
                        Some(o) => (cand.dist, cand.depth, cand.gt) < (o.dist, o.depth, o.gt),
                    };
                    if better {
                        best[idx] = Some(cand);
                    }
                }
            }
        }
    }

    let mut positives = Vec::new();
    let mut cls = vec![0.0; n * nc];
    let mut objectness = vec![0.0; n];
    let mut visible = vec![false; scene.boxes.len()];
    for (idx, cand) in best.iter().enumerate() {
        let Some(cand) = cand else { continue };
        let cell = layout.cell(idx);
        let b = &scene.boxes[cand.gt];
        let s = STRIDES[cell.level] as f64;
        let (u, v) = layout.pixel(cell);
        let (cx, cy) = cand.center;
        let centerness = (-cand.dist * cand.dist / (2.0 * spec.sigma * spec.sigma)).exp();
        let mut t = [0.0; reg::ALL];
        let mut wgt = [1.0; reg::ALL];
        t[0] = cx - u / s;
        t[1] = cy - v / s;
        t[reg::DEPTH] = cand.depth.ln();
        let bb = boxes2d[cand.gt][cell.view].expect("assigned boxes have a 2D box");
        t[3] = (u - bb[0]) / s;
        t[4] = (v - bb[1]) / s;
        t[5] = (bb[2] - u) / s;
        t[6] = (bb[3] - v) / s;
        let corners = rig.project_box_corners(b, cell.view)?;
        for (i, c) in corners.iter().enumerate() {
            let base = reg::CORNERS.start + 2 * i;
            if c.depth > Z_MIN {
                t[base] = (c.u - u) / s;
                t[base + 1] = (c.v - v) / s;
            } else {
                wgt[base] = 0.0;
                wgt[base + 1] = 0.0;
            }
        }
        let yc = camera_yaw(rig, cell.view, b.yaw)?;
        t[reg::ROT.start] = yc.sin();
        t[reg::ROT.start + 1] = yc.cos();
        t[reg::SIZE.start] = b.w.ln();
        t[reg::SIZE.start + 1] = b.l.ln();
        t[reg::SIZE.start + 2] = b.h.ln();
        t[reg::VELOCITY.start] = b.vx;
        t[reg::VELOCITY.start + 1] = b.vy;
        cls[idx * nc + b.class_id] = 1.0;
        objectness[idx] = centerness;
        visible[cand.gt] = true;
        positives.push(PositiveCell {
            cell: idx,
            gt: cand.gt,
            class_id: b.class_id,
            centerness,
            reg: t,
            reg_weight: wgt,
        });
    }
    Ok(DenseTargets {
        num_classes: nc,
        positives,
        cls,
        objectness,
        visible,
        boxes2d,
        levels,
    })
}

/// Classwise max times centerness for channel-last `cls` rows.
pub fn objectness(cls: &[f64], ctr: &[f64], num_classes: usize) -> Vec<f64> {
    ctr.iter()
        .enumerate()
        .map(|(i, c)| {
            let row = &cls[i * num_classes..(i + 1) * num_classes];
            row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * c
        })
        .collect()
}

/// A selected cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub cell: usize,
    pub cell_ref: CellRef,
    pub score: f64,
    pub peak: bool,
}

/// Whether each cell equals the maximum of its 3×3 neighbourhood inside its
/// own view and level.
pub fn peak_mask(obj: &[f64], layout: &PyramidLayout) -> Vec<bool> {
    peak_mask_by(obj, layout, |_, _| true)
}

/// Peak mask where only neighbours of the same owner can suppress a cell.
/// Used on ground-truth maps so adjacent objects each keep a peak.
pub fn instance_peak_mask(
    obj: &[f64],
    layout: &PyramidLayout,
    owner: &[Option<usize>],
) -> Vec<bool> {
    peak_mask_by(obj, layout, |i, n| owner[i] == owner[n])
}

fn peak_mask_by(
    obj: &[f64],
    layout: &PyramidLayout,
    competes: impl Fn(usize, usize) -> bool,
) -> Vec<bool> {
    let mut out = vec![false; obj.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let c = layout.cell(i);
        let (h, w) = layout.dims[c.level];
        let mut peak = true;
        'nb: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, cc) = (c.row as i64 + dr, c.col as i64 + dc);
                if r < 0 || cc < 0 || r >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let n = layout.index(CellRef {
                    row: r as usize,
                    col: cc as usize,
                    ..c
                });
                if obj[n] > obj[i] && competes(i, n) {
                    peak = false;
                    break 'nb;
                }
            }
        }
        *slot = peak;
    }
    out
}

/// Top `n_pro` peaks by score across all views and levels, topped up from
/// non-peak cells when there are too few peaks, then thresholded. Equal
/// scores keep cell order. With `center_nms` off every cell is a candidate.
pub fn select_proposals(
    obj: &[f64],
    layout: &PyramidLayout,
    n_pro: usize,
    score_min: f64,
    center_nms: bool,
) -> Vec<Selection> {
    let peaks = if center_nms {
        peak_mask(obj, layout)
    } else {
        vec![true; obj.len()]
    };
    select_from_peaks(obj, layout, &peaks, n_pro, score_min)
}

/// `select_proposals` with a precomputed peak mask.
pub fn select_from_peaks(
    obj: &[f64],
    layout: &PyramidLayout,
    peaks: &[bool],
    n_pro: usize,
    score_min: f64,
) -> Vec<Selection> {
    let by_score = |a: &usize, b: &usize| obj[*b].total_cmp(&obj[*a]).then(a.cmp(b));
    let mut peak_idx: Vec<usize> = (0..obj.len()).filter(|&i| peaks[i]).collect();
    peak_idx.sort_by(by_score);
    peak_idx.truncate(n_pro);
    if peak_idx.len() < n_pro {
        let mut rest: Vec<usize> = (0..obj.len()).filter(|&i| !peaks[i]).collect();
        rest.sort_by(by_score);
        let need = n_pro - peak_idx.len();
        peak_idx.extend(rest.into_iter().take(need));
    }
    peak_idx
        .into_iter()
        .filter(|&i| obj[i] >= score_min)
        .map(|i| Selection {
            cell: i,
            cell_ref: layout.cell(i),
            score: obj[i],
            peak: peaks[i],
        })
        .collect()
}

/// Lifts a cell with predicted offset (stride units) and log depth.
pub fn lift_cell(
    rig: &CameraRig,
    layout: &PyramidLayout,
    cell: CellRef,
    offset: [f64; 2],
    log_depth: f64,
) -> Result<EgoPoint, Error> {
    let s = STRIDES[cell.level] as f64;
    let (u, v) = layout.pixel(cell);
    Ok(rig.lift_to_ego(
        cell.view,
        u,
        v,
        offset[0] * s,
        offset[1] * s,
        log_depth.exp(),
    )?)
}

/// Stage-1 candidate carried into refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub position: EgoPoint,
    pub view: usize,
    pub level: usize,
    pub cell: usize,
    pub pixel: (f64, f64),
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadShape {
    pub channels: usize,
    pub num_classes: usize,
    pub views: usize,
    pub aux: bool,
}

impl HeadShape {
    pub fn reg_channels(&self) -> usize {
        if self.aux {
            reg::ALL
        } else {
            reg::BASE
        }
    }
}

pub fn init_proposal_head(
    store: &mut ParamStore,
    shape: HeadShape,
    rng: &mut impl Rng,
) -> Result<(), Error> {
    let c = shape.channels;
    for tower in ["cls_tower", "reg_tower"] {
        for i in 0..TOWER_DEPTH {
            let fan_in = if i < TOWER_CONV_BLOCKS { 9 * c } else { c };
            store.add_linear(&format!("proposal_head.{tower}.{i}"), fan_in, c, rng);
        }
    }
    store.add_linear("proposal_head.cls", c, shape.num_classes, rng);
    store.add_linear("proposal_head.ctr", c, 1, rng);
    store.add_linear("proposal_head.reg", c, shape.reg_channels(), rng);
    store.add_linear("proposal_head.reduce", 2 * c, c, rng);
    let prior = -((1.0 - FOCAL_PRIOR) / FOCAL_PRIOR).ln();
    store.set("proposal_head.cls.b", &vec![prior; shape.num_classes])?;
    let mut rb = vec![0.0; shape.reg_channels()];
    rb[reg::DEPTH] = DEPTH_PRIOR.ln();
    store.set("proposal_head.reg.b", &rb)?;
    store.add_uniform("embed.view", vec![shape.views, c], 1.0, rng);
    store.add_uniform("embed.level", vec![NUM_LEVELS, c], 1.0, rng);
    store.add_linear("embed.proj", 2 * c + 3, c, rng);
    Ok(())
}

/// Dense outputs over all cells in layout order.
#[derive(Clone, Copy, Debug)]
pub struct DenseOutput {
    pub cls_logits: Var,
    pub ctr_logits: Var,
    pub reg: Var,
    pub cls_feat: Var,
    pub reg_feat: Var,
}

/// 3×3 convolution over every level and view of a flat `[cells, C]` map,
/// zero-padded at map borders. `w` is `[9·C, C_out]`.
pub fn conv3x3(g: &mut Graph, x: Var, neighbors: &[usize], w: Var, b: Var) -> Result<Var, Error> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let zero = g.constant(vec![1, c], vec![0.0; c])?;
    let padded = g.concat(&[x, zero], 0)?;
    let cols = g.gather_rows(padded, neighbors)?;
    let cols = g.reshape(cols, vec![n, 9 * c])?;
    Ok(g.linear(cols, w, b)?)
}

fn tower(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    pyramid: &FeaturePyramid,
) -> Result<Var, Error> {
    let mut h = pyramid.flat;
    for i in 0..TOWER_DEPTH {
        let w = g.param(store, &format!("proposal_head.{name}.{i}.w"))?;
        let b = g.param(store, &format!("proposal_head.{name}.{i}.b"))?;
        let y = if i < TOWER_CONV_BLOCKS {
            conv3x3(g, h, &pyramid.neighbors, w, b)?
        } else {
            g.linear(h, w, b)?
        };
        h = g.relu(y);
    }
    Ok(h)
}

fn head(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var, Error> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b)?)
}

pub fn dense_head(
    g: &mut Graph,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
) -> Result<DenseOutput, Error> {
    let cls_feat = tower(g, store, "cls_tower", pyramid)?;
    let reg_feat = tower(g, store, "reg_tower", pyramid)?;
    Ok(DenseOutput {
        cls_logits: head(g, store, "proposal_head.cls", cls_feat)?,
        ctr_logits: head(g, store, "proposal_head.ctr", reg_feat)?,
        reg: head(g, store, "proposal_head.reg", reg_feat)?,
        cls_feat,
        reg_feat,
    })
}

/// Objectness per cell from the current dense predictions (values only).
pub fn predicted_objectness(g: &Graph, dense: &DenseOutput, num_classes: usize) -> Vec<f64> {
    let sig = |x: &f64| 1.0 / (1.0 + (-x).exp());
    let cls: Vec<f64> = g.value(dense.cls_logits).iter().map(sig).collect();
    let ctr: Vec<f64> = g.value(dense.ctr_logits).iter().map(sig).collect();
    objectness(&cls, &ctr, num_classes)
}

/// Proposals for `selections`, lifted with the predicted offset and depth.
pub fn build_proposals(
    g: &Graph,
    dense: &DenseOutput,
    selections: &[Selection],
    rig: &CameraRig,
    layout: &PyramidLayout,
) -> Result<Vec<Proposal>, Error> {
    let regv = g.value(dense.reg);
    let rc = g.shape(dense.reg)[1];
    selections
        .iter()
        .map(|s| {
            let row = &regv[s.cell * rc..(s.cell + 1) * rc];
            let position = lift_cell(rig, layout, s.cell_ref, [row[0], row[1]], row[reg::DEPTH])?;
            Ok(Proposal {
                position,
                view: s.cell_ref.view,
                level: s.cell_ref.level,
                cell: s.cell,
                pixel: layout.pixel(s.cell_ref),
                score: s.score,
            })
        })
        .collect()
}

/// `[n, C]` features: linear reduction of both tower activations at each cell.
pub fn proposal_features(
    g: &mut Graph,
    store: &ParamStore,
    dense: &DenseOutput,
    cells: &[usize],
) -> Result<Var, Error> {
    let a = g.gather_rows(dense.cls_feat, cells)?;
    let b = g.gather_rows(dense.reg_feat, cells)?;
    let cat = g.concat(&[a, b], 1)?;
    head(g, store, "proposal_head.reduce", cat)
}

/// Encoding input for one query: view and level embedding rows (or none for
/// free queries) plus the position scaled by [`R_MAX`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingKey {
    pub view_level: Option<(usize, usize)>,
    pub position: EgoPoint,
}

/// `[n, C]` encodings `proj(concat(E_view[v], E_level[k], p / R_MAX))`.
pub fn proposal_encoding(
    g: &mut Graph,
    store: &ParamStore,
    keys: &[EncodingKey],
) -> Result<Var, Error> {
    let ev = g.param(store, "embed.view")?;
    let el = g.param(store, "embed.level")?;
    let c = g.shape(ev)[1];
    let views = g.shape(ev)[0];
    // Row `views` of the padded tables is all zeros for free queries.
    let zero = g.constant(vec![1, c], vec![0.0; c])?;
    let ev_pad = g.concat(&[ev, zero], 0)?;
    let el_pad = g.concat(&[el, zero], 0)?;
    let mut vi = Vec::with_capacity(keys.len());
    let mut li = Vec::with_capacity(keys.len());
    let mut pos = Vec::with_capacity(3 * keys.len());
    for k in keys {
        match k.view_level {
            Some((v, l)) => {
                if v >= views || l >= NUM_LEVELS {
                    return Err(Error::Domain(format!(
                        "encoding index ({v}, {l}) out of range"
                    )));
                }
                vi.push(v);
                li.push(l);
            }
            None => {
                vi.push(views);
                li.push(NUM_LEVELS);
            }
        }
        pos.extend(k.position.to_array().iter().map(|x| x / R_MAX));
    }
    let a = g.gather_rows(ev_pad, &vi)?;
    let b = g.gather_rows(el_pad, &li)?;
    let p = g.constant(vec![keys.len(), 3], pos)?;
    let cat = g.concat(&[a, b, p], 1)?;
    head(g, store, "embed.proj", cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraExtrinsics, CameraIntrinsics, CameraView};
    use crate::scene_sim::{sample_scene, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn objectness_examples_and_oracle() {
        assert_eq!(objectness(&[0.2, 0.6], &[0.5], 2), vec![0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // channel-first 3×4×4 maps against a per-cell loop
        let cf: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
        let ctr: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let mut cl = vec![0.0; 48];
        for c in 0..3 {
            for p in 0..16 {
                cl[p * 3 + c] = cf[c * 16 + p];
            }
        }
        let ones = vec![1.0; 16];
        let got = objectness(&cl, &ctr, 3);
        let max_only = objectness(&cl, &ones, 3);
        for p in 0..16 {
            let m = (0..3).map(|c| cf[c * 16 + p]).fold(f64::MIN, f64::max);
            assert_eq!(got[p], m * ctr[p]);
            assert_eq!(max_only[p], m);
        }
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let layout = PyramidLayout::new(2, 128, 64).unwrap();
        let n = layout.total_cells();
        let (c, co) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..9 * c * co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.5, -0.25, 0.0];
        let mut g = Graph::new();
        let xv = g.constant(vec![n, c], x.clone()).unwrap();
        let wv = g.constant(vec![9 * c, co], w.clone()).unwrap();
        let bv = g.constant(vec![co], b.clone()).unwrap();
        let y = conv3x3(&mut g, xv, &layout.neighbors3x3(), wv, bv).unwrap();
        let got = g.value(y);
        for i in 0..n {
            let cell = layout.cell(i);
            let (h, wd) = layout.dims[cell.level];
            for o in 0..co {
                let mut acc = b[o];
                for (t, (dr, dc)) in (-1i64..=1)
                    .flat_map(|r| (-1i64..=1).map(move |q| (r, q)))
                    .enumerate()
                {
                    let (r, q) = (cell.row as i64 + dr, cell.col as i64 + dc);
                    if r < 0 || q < 0 || r >= h as i64 || q >= wd as i64 {
                        continue;
                    }
                    let j = layout.index(CellRef {
                        row: r as usize,
                        col: q as usize,
                        ..cell
                    });
                    for ci in 0..c {
                        acc += x[j * c + ci] * w[(t * c + ci) * co + o];
                    }
                }
                assert!((got[i * co + o] - acc).abs() < 1e-12);
            }
        }
    }

    fn tiny_layout() -> PyramidLayout {
        PyramidLayout::new(1, 128, 64).unwrap()
    }

    #[test]
    fn single_spike_and_adjacent_ties() {
        let layout = tiny_layout();
        let mut obj = vec![0.0; layout.total_cells()];
        let spike = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 5,
        });
        obj[spike] = 1.0;
        let sel = select_proposals(&obj, &layout, 1, 0.05, true);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].cell, spike);

        let mut obj = vec![0.0; layout.total_cells()];
        let a = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 5,
        });
        let b = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 6,
        });
        obj[a] = 0.7;
        obj[b] = 0.7;
        let peaks = peak_mask(&obj, &layout);
        assert!(peaks[a] && peaks[b]);
        let sel = select_proposals(&obj, &layout, 5, 0.05, true);
        assert_eq!(sel.iter().map(|s| s.cell).collect::<Vec<_>>(), vec![a, b]);
    }

    #[test]
    fn instance_peaks_survive_a_stronger_neighbour_object() {
        let layout = tiny_layout();
        let mut obj = vec![0.0; layout.total_cells()];
        let mut owner = vec![None; obj.len()];
        let a = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 5,
        });
        let b = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 6,
        });
        let b2 = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 3,
            col: 7,
        });
        (obj[a], obj[b], obj[b2]) = (0.9, 0.6, 0.4);
        (owner[a], owner[b], owner[b2]) = (Some(0), Some(1), Some(1));
        assert!(!peak_mask(&obj, &layout)[b]);
        let peaks = instance_peak_mask(&obj, &layout, &owner);
        assert!(peaks[a] && peaks[b] && !peaks[b2]);
        let sel = select_from_peaks(&obj, &layout, &peaks, 2, 0.05);
        assert_eq!(sel.iter().map(|s| s.cell).collect::<Vec<_>>(), vec![a, b]);
    }

    #[test]
    fn fill_rule_tops_up_from_non_peaks() {
        let layout = tiny_layout();
        let n = layout.total_cells();
        // strictly increasing map: exactly one peak per (view, level) map
        let obj: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) / n as f64).collect();
        let sel = select_proposals(&obj, &layout, 10, 0.0, true);
        assert_eq!(sel.len(), 10);
        assert_eq!(sel.iter().filter(|s| s.peak).count(), NUM_LEVELS);
        let sel = select_proposals(&obj, &layout, 10, 2.0, true);
        assert!(sel.is_empty());
    }

    #[test]
    fn lift_identity_rig_and_depth_doubling() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let rig = CameraRig::new(vec![CameraView::new(
            k,
            CameraExtrinsics::identity(),
            128,
            64,
        )])
        .unwrap();
        let layout = tiny_layout();
        let c0 = CellRef {
            level: 0,
            view: 0,
            row: 0,
            col: 0,
        };
        assert_eq!(
            lift_cell(&rig, &layout, c0, [0.0, 0.0], 0.0).unwrap(),
            EgoPoint::new(0.0, 0.0, 1.0)
        );
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let rig = CameraRig::surround(6, 256, 128, 70.0, 1.5).unwrap();
        let layout = PyramidLayout::new(6, 256, 128).unwrap();
        for _ in 0..20 {
            let c = layout.cell(r.gen_range(0..layout.total_cells()));
            let off = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let ld: f64 = r.gen_range(1.0..3.5);
            let a = lift_cell(&rig, &layout, c, off, ld).unwrap();
            let b = lift_cell(&rig, &layout, c, off, ld + std::f64::consts::LN_2).unwrap();
            let cam = &rig.views()[c.view];
            assert!((cam.ego_to_camera(b) - 2.0 * cam.ego_to_camera(a)).norm() < 1e-9);
        }
    }

    #[test]
    fn lift_matches_explicit_matrix_algebra() {
        let rig = CameraRig::surround(6, 256, 128, 70.0, 1.5).unwrap();
        let layout = PyramidLayout::new(6, 256, 128).unwrap();
        let c = CellRef {
            level: 1,
            view: 4,
            row: 3,
            col: 9,
        };
        let (off, ld) = ([0.25, -0.5], 2.3f64);
        let got = lift_cell(&rig, &layout, c, off, ld).unwrap();
        let cam = &rig.views()[4];
        let kinv = cam.intrinsics.k.try_inverse().unwrap();
        let pix = nalgebra::Vector3::new(9.0 * 16.0 + 0.25 * 16.0, 3.0 * 16.0 - 0.5 * 16.0, 1.0);
        let pc = kinv * pix * ld.exp();
        let pe = cam.extrinsics.t * nalgebra::Vector4::new(pc.x, pc.y, pc.z, 1.0);
        assert!((got.x - pe.x / pe.w).abs() < 1e-12);
        assert!((got.y - pe.y / pe.w).abs() < 1e-12);
        assert!((got.z - pe.z / pe.w).abs() < 1e-12);
    }

    #[test]
    fn gt_center_lifts_back_to_box_center() {
        let cfg = SimConfig::default();
        let layout = PyramidLayout::new(6, 256, 128).unwrap();
        let spec = LevelAssignSpec::default();
        for seed in 0..20 {
            let scene = sample_scene(&cfg, seed).unwrap();
            let t = assign_dense_targets(&scene, &layout, &spec).unwrap();
            for p in &t.positives {
                let c = layout.cell(p.cell);
                let pos = lift_cell(
                    &scene.rig,
                    &layout,
                    c,
                    [p.reg[0], p.reg[1]],
                    p.reg[reg::DEPTH],
                )
                .unwrap();
                let gt = scene.boxes[p.gt].center();
                assert!(pos.planar_distance(gt) < 1e-6 && (pos.z - gt.z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn level_assignment_ranges() {
        let spec = LevelAssignSpec::default();
        assert_eq!(spec.level_for(40.0), 0);
        assert_eq!(spec.level_for(64.0), 0);
        assert_eq!(spec.level_for(64.5), 1);
        assert_eq!(spec.level_for(200.0), 2);
        assert_eq!(spec.level_for(1e6), 3);
    }

    #[test]
    fn targets_match_per_cell_rule() {
        let cfg = SimConfig::default();
        let layout = PyramidLayout::new(6, 256, 128).unwrap();
        let spec = LevelAssignSpec::default();
        let scene = (0..200)
            .map(|s| sample_scene(&cfg, s).unwrap())
            .find(|s| s.boxes.len() == 3)
            .unwrap();
        let t = assign_dense_targets(&scene, &layout, &spec).unwrap();
        // brute force: every cell against every (box, view)
        let mut expected = Vec::new();
        for idx in 0..layout.total_cells() {
            let c = layout.cell(idx);
            let s = STRIDES[c.level] as f64;
            let mut best: Option<(f64, f64, usize)> = None;
            for (gi, b) in scene.boxes.iter().enumerate() {
                let Some(bb) = gt_2d_box(b, c.view, &scene.rig).unwrap() else {
                    continue;
                };
                let ext = ((bb[2] - bb[0]) * (bb[3] - bb[1])).sqrt();
                if spec.level_for(ext) != c.level {
                    continue;
                }
                let pc = scene.rig.project_to_view(b.center(), c.view, 1.0);
                if pc.depth <= Z_MIN {
                    continue;
                }
                let d =
                    ((c.col as f64 - pc.u / s).powi(2) + (c.row as f64 - pc.v / s).powi(2)).sqrt();
                if d <= 1.5 && best.is_none_or(|o| (d, pc.depth, gi) < o) {
                    best = Some((d, pc.depth, gi));
                }
            }
            if let Some((d, _, gi)) = best {
                expected.push((idx, gi, (-d * d / 12.5).exp()));
            }
        }
        let got: Vec<(usize, usize, f64)> = t
            .positives
            .iter()
            .map(|p| (p.cell, p.gt, p.centerness))
            .collect();
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-12);
        }
        assert!(!got.is_empty());
    }

    #[test]
    fn center_cell_has_unit_centerness_and_in_bounds_objects_have_positives() {
        let layout = PyramidLayout::new(6, 256, 128).unwrap();
        let spec = LevelAssignSpec::default();
        let cfg = SimConfig::default();
        let mut scene = sample_scene(&cfg, 0).unwrap();
        // a box whose center projects exactly onto a stride-8 cell of view 0
        let cam = &scene.rig.views()[0];
        let d = 20.0;
        let (u, v) = (128.0 + 8.0, 64.0);
        let p = scene.rig.lift_to_ego(0, u, v, 0.0, 0.0, d).unwrap();
        let mut b = scene.boxes[0];
        b.x = p.x;
        b.y = p.y;
        b.z = p.z;
        b.w = 0.6;
        b.l = 0.6;
        b.h = 1.7;
        scene.boxes = vec![b];
        assert!((cam.ego_to_camera(p).z - d).abs() < 1e-9);
        let t = assign_dense_targets(&scene, &layout, &spec).unwrap();
        let center = layout.index(CellRef {
            level: 0,
            view: 0,
            row: 8,
            col: 17,
        });
        let pc = t.positives.iter().find(|p| p.cell == center).unwrap();
        assert_eq!(pc.centerness, 1.0);

        for seed in 0..100 {
            let scene = sample_scene(&cfg, seed).unwrap();
            let t = assign_dense_targets(&scene, &layout, &spec).unwrap();
            for (gi, b) in scene.boxes.iter().enumerate() {
                for j in 0..6 {
                    let Some(k) = t.levels[gi][j] else { continue };
                    let pr = scene.rig.project_to_view(b.center(), j, STRIDES[k] as f64);
                    if pr.valid {
                        assert!(t.visible[gi], "seed {seed} box {gi}");
                    }
                }
            }
        }
    }
}
